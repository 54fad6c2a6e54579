"""A whole computing site laid out in one workspace directory:

    <root>/site.conf       the scenario it was built from
    <root>/clock           current simulated time
    <root>/catalog/        federation catalogs
    <root>/data/<host>/    data server disks
    <root>/mss/            mass store
    <root>/dropzone/       remote-site exports
    <root>/imports.reg     import registry
    <root>/sweeps/         sweep journals

``Site.build`` creates a fresh site from a Scenario; ``Site.open`` reloads
one so command-line tools can work on it between scenario runs.
"""

from dataclasses import dataclass, field
from pathlib import Path

from fedstore import dbfile
from fedstore.clock import SimClock
from fedstore.config import Scenario, load_scenario
from fedstore.fedcat import FederationStore
from fedstore.importer import REGISTRY, ImportRegistry, ImportTarget
from fedstore.lockmgr import LockServer
from fedstore.storage import DataServer, Disk, MassStore
from fedstore.sweep import SweepEnv

BIG_DISK = 10**12
BRIDGE = "bridge"
CONDITIONS = "cond1"
CALIBRATION = "pc1"
IMPORT = "imp1"


def host_of(fed_name):
    return f"ds-{fed_name}"


@dataclass
class Layout:
    """Federation names and their roles for a scenario."""

    reco: list
    sim: list
    analysis: list

    @classmethod
    def of(cls, sc):
        p = sc.production
        return cls([f"reco{i}" for i in range(1, p.reco_federations + 1)],
                   [f"sim{i}" for i in range(1, p.sim_federations + 1)],
                   [f"ana{i}" for i in range(1, sc.analysis.federations + 1)])

    def roles(self):
        out = {n: "production" for n in self.reco + self.sim + [CALIBRATION]}
        out[CONDITIONS] = "conditions"
        out[IMPORT] = "import"
        out.update({n: "analysis" for n in self.analysis})
        out[BRIDGE] = "bridge"
        return out

    def sweep_dest(self, source):
        """Reconstruction goes to the first analysis federation, simulation
        and imports to the second (or the first when there is only one)."""
        if source in self.reco:
            return self.analysis[0]
        return self.analysis[min(1, len(self.analysis) - 1)]

    def sweep_sources(self):
        return self.reco + self.sim + [IMPORT]

    def category(self, fed_name):
        if fed_name in self.reco:
            return "reconstruction"
        if fed_name in self.sim:
            return "simulation"
        if fed_name == IMPORT:
            return "imported"
        return None


@dataclass
class Site:
    root: Path
    scenario: Scenario
    clock: SimClock
    layout: Layout
    store: FederationStore
    mss: MassStore
    lockservers: dict = field(default_factory=dict)
    servers: dict = field(default_factory=dict)
    ana_servers: list = field(default_factory=list)
    registry: ImportRegistry = None

    @property
    def dropzone(self):
        return self.root / "dropzone"

    @property
    def sweep_dir(self):
        return self.root / "sweeps"

    def fed(self, name):
        return self.store[name]

    def sweep_env(self):
        a = self.scenario.analysis
        return SweepEnv(self.store, self.servers, self.mss, self.clock, self.ana_servers,
                        load_cost=a.load_cost)

    def import_target(self, handoff=None):
        return ImportTarget(self.store[IMPORT], self.servers[host_of(IMPORT)], self.registry,
                            self.clock, self.dropzone, handoff)

    def services(self):
        """Everything the monitor probes, in a fixed order."""
        return [self.servers[h] for h in sorted(self.servers)] + \
               [self.lockservers[i] for i in sorted(self.lockservers)]

    def service(self, name):
        if name in self.servers:
            return self.servers[name]
        if name in self.lockservers:
            return self.lockservers[name]
        raise KeyError(f"no service {name!r}")

    @classmethod
    def _skeleton(cls, root, scenario, clock):
        root = Path(root)
        layout = Layout.of(scenario)
        store = FederationStore(root / "catalog", data_root=root / "data", clock=clock)
        mss = MassStore(root / "mss")
        site = cls(root, scenario, clock, layout, store, mss)
        site.registry = ImportRegistry(root / REGISTRY)
        roles = layout.roles()
        server_role = {"production": "production", "import": "import", "conditions": "analysis"}
        for name, role in roles.items():
            if role in server_role:
                site.servers[host_of(name)] = DataServer(
                    host_of(name), Disk(root / "data" / host_of(name), BIG_DISK), mss, clock,
                    role=server_role[role])
        for i in range(1, scenario.analysis.servers + 1):
            host = f"ds-ana-{i}"
            srv = DataServer(host, Disk(root / "data" / host, scenario.analysis.disk_capacity),
                             mss, clock, role="analysis")
            site.servers[host] = srv
            site.ana_servers.append(srv)
        for name, role in roles.items():
            if role != "bridge":
                site.lockservers[f"ls-{name}"] = LockServer(f"ls-{name}", clock=clock)
        return site

    @classmethod
    def build(cls, root, scenario, clock=None):
        clock = clock or SimClock()
        root = Path(root)
        root.mkdir(parents=True, exist_ok=True)
        site = cls._skeleton(root, scenario, clock)
        for name, role in site.layout.roles().items():
            ls = site.lockservers.get(f"ls-{name}")
            site.store.create_federation(name, role, lockserver=ls,
                                         domain="bridge" if role == "bridge" else "slac")
        site.dropzone.mkdir(exist_ok=True)
        site.sweep_dir.mkdir(exist_ok=True)
        dbfile.atomic_write(root / "site.conf", scenario.text().encode())
        site.save()
        return site

    @classmethod
    def open(cls, root):
        root = Path(root)
        scenario = load_scenario(root / "site.conf")
        clock_file = root / "clock"
        clock = SimClock(int(clock_file.read_text()) if clock_file.exists() else 0)
        site = cls._skeleton(root, scenario, clock)
        site.store.load_all(site.lockservers)
        for srv in site.servers.values():
            srv.disk.scan(clock.now)
        return site

    def save(self):
        for srv in self.servers.values():
            srv.disk.save_access_log()
        dbfile.atomic_write(self.root / "clock", f"{self.clock.now}\n".encode())

    def analysis_feds(self):
        return [self.store[n] for n in self.layout.analysis]

    def production_feds(self):
        return [self.store[n] for n in self.layout.reco + self.layout.sim]
