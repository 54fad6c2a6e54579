"""Desk-scale federated catalogs, lock management, tiered storage, sweeps and
remote imports, driven by a deterministic scenario simulator."""

from fedstore.clock import SimClock
from fedstore.errors import FedStoreError

__version__ = "0.1.0"

__all__ = ["FedStoreError", "SimClock", "__version__"]
