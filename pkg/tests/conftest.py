import pytest

from fedstore.clock import SimClock
from fedstore.fedcat import DbEntry, FederationStore, State
from fedstore.lockmgr import LockServer


def bitwise_crc64(data):
    """Reference CRC-64/XZ, one bit at a time."""
    crc = 0xFFFFFFFFFFFFFFFF
    for byte in data:
        crc ^= byte
        for _ in range(8):
            crc = (crc >> 1) ^ (0xC96C5795D7870F42 if crc & 1 else 0)
    return crc ^ 0xFFFFFFFFFFFFFFFF


@pytest.fixture
def clock():
    return SimClock()


@pytest.fixture
def store(tmp_path, clock):
    return FederationStore(tmp_path / "catalog", data_root=tmp_path / "data", clock=clock)


@pytest.fixture
def lockserver(clock):
    return LockServer("ls1", clock=clock)


def closed_entry(name, host="h1", size=100, **kw):
    return DbEntry(name=name, host=host, path=f"{name}.db", state=State.CLOSED, size=size, **kw)


# acceptance criteria report: one PASS/FAIL line per criterion, printed in
# the terminal summary so it shows up even with output capture on

ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[n])
