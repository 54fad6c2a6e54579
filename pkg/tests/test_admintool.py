import random
import threading

import pytest
from hypothesis import given, settings, strategies as st

from conftest import closed_entry
from fedstore import dbfile
from fedstore.admintool import (
    FAILED,
    OK,
    PENDING,
    AdminContext,
    CommandFile,
    ConditionsLink,
    Host,
    SelectionCriteria,
    build_command_files,
    execute_plan,
    monitor_hosts,
    parse_selection,
    run_maintenance,
    select_databases,
    selection_text,
    write_command_files,
)
from fedstore.errors import MalformedCriteria, UnknownOperation
from fedstore.fedcat import CollectionRef, DbEntry, FederationStore, State
from fedstore.lockmgr import LockServer, Mode, catalog_resource
from fedstore.prodsys import RunControl
from fedstore.storage import DataServer, Disk, MassStore

HOSTS = ("h1", "h2", "h3")


def populated(store, n=12, seed=0):
    rng = random.Random(seed)
    fed = store.create_federation("ana", "analysis", domain="slac")
    other = store.create_federation("prod", "production", domain="ral")
    for f in (fed, other):
        for i in range(n):
            state = rng.choice(list(State))
            fed_entry = DbEntry(f"{f.name}.{i}", rng.choice(HOSTS), f"{f.name}/{i}.db", state,
                                component=rng.choice(["micro", "mini", "raw"]),
                                auth_level=rng.randint(0, 2), mtime=rng.randint(0, 100),
                                size=1)
            dbid = f.register(fed_entry)
            if state is State.CLOSED and rng.random() < 0.5:
                f.set_readonly(dbid)
    return [fed, other]


def brute(feds, inc, exc, after, before):
    out = []
    for fed in sorted(feds, key=lambda f: f.name):
        for dbid in sorted(fed.entries):
            e = fed.entries[dbid]
            attrs = {"name": e.name, "dbid": str(e.id), "host": e.host, "domain": fed.domain,
                     "auth_level": str(e.auth_level), "component": e.component,
                     "readonly": "true" if e.readonly else "false", "state": e.state.value}
            if any(attrs[a] not in v for a, v in inc.items()):
                continue
            if any(attrs[a] in v for a, v in exc.items()):
                continue
            if after is not None and not e.mtime >= after:
                continue
            if before is not None and not e.mtime < before:
                continue
            out.append((fed.name, e.id))
    return out


def keys(sel):
    return [(s.fed, s.entry.id) for s in sel]


def test_empty_criteria_selects_all(store):
    feds = populated(store)
    assert len(select_databases(feds)) == 24


def test_spec_example_selection(store):
    feds = populated(store, 30, seed=3)
    crit = SelectionCriteria({"component": {"micro"}}, {"host": {"h2"}}, after=40)
    assert keys(select_databases(feds, crit)) == brute(
        feds, {"component": {"micro"}}, {"host": {"h2"}}, 40, None)


def test_state_closed_only(store):
    feds = populated(store, 30, seed=4)
    sel = select_databases(feds, SelectionCriteria({"state": "closed"}))
    assert sel and all(s.entry.state is State.CLOSED for s in sel)


def test_window_bounds(store):
    fed = store.create_federation("f", "analysis")
    for t in (9, 10, 11, 20):
        fed.register(closed_entry(f"d{t}", mtime=t))
    crit = SelectionCriteria(after=10, before=20)
    assert [s.entry.mtime for s in select_databases([fed], crit)] == [10, 11]


@pytest.mark.parametrize("kw", [
    {"include": {"colour": {"red"}}},
    {"include": {"host": {"h1"}}, "exclude": {"host": {"h1"}}},
    {"after": 5, "before": 5},
    {"include": {"readonly": {"maybe"}}},
    {"include": {"state": {"busy"}}},
    {"include": {"dbid": {"x"}}},
])
def test_malformed(kw):
    with pytest.raises(MalformedCriteria):
        SelectionCriteria(**kw)


def test_parse_cli_form(store):
    crit = SelectionCriteria.parse(["component=micro,mini", "readonly=yes"], ["host=h2"], "3", None)
    assert crit.include == {"component": {"micro", "mini"}, "readonly": {"true"}}
    assert crit.exclude == {"host": {"h2"}} and crit.after == 3


attr_values = {
    "host": st.sampled_from(HOSTS), "component": st.sampled_from(["micro", "mini", "raw"]),
    "state": st.sampled_from([s.value for s in State]), "readonly": st.sampled_from(["true", "false"]),
    "auth_level": st.sampled_from(["0", "1", "2"]), "domain": st.sampled_from(["slac", "ral"]),
    "dbid": st.sampled_from([str(i) for i in range(1, 13)]),
}


@st.composite
def criteria(draw):
    inc, exc = {}, {}
    for attr, vals in attr_values.items():
        mode = draw(st.sampled_from(["none", "inc", "exc", "both"]))
        chosen = draw(st.sets(vals, min_size=1, max_size=3))
        if mode == "inc":
            inc[attr] = chosen
        elif mode == "exc":
            exc[attr] = chosen
        elif mode == "both":
            other = draw(st.sets(vals, max_size=2)) - chosen
            inc[attr] = chosen
            if other:
                exc[attr] = other
    after = draw(st.none() | st.integers(0, 100))
    before = draw(st.none() | st.integers(0, 101))
    if after is not None and before is not None and after >= before:
        before = None
    return inc, exc, after, before


@settings(max_examples=150, deadline=None)
@given(criteria())
def test_selection_matches_brute_force(crit):
    store = FederationStore()
    feds = populated(store, 12, seed=11)
    inc, exc, after, before = crit
    got = select_databases(feds, SelectionCriteria({k: set(v) for k, v in inc.items()},
                                                   {k: set(v) for k, v in exc.items()}, after, before))
    assert keys(got) == brute(feds, inc, exc, after, before)


def test_selection_text_roundtrip(store):
    feds = populated(store)
    sel = select_databases(feds, SelectionCriteria({"host": "h1"}))
    assert parse_selection(selection_text(sel), store) == sel


# command files

def test_build_is_pure_and_one_file_per_op(store):
    feds = populated(store, 3)
    sel = select_databases(feds[:1])
    before = store["ana"].catalog_text()
    files = build_command_files(sel, ["stage", "checksum"])
    assert [cf.op for cf in files] == ["stage", "checksum"]
    assert [len(cf.lines) for cf in files] == [3, 3]
    assert store["ana"].catalog_text() == before
    with pytest.raises(UnknownOperation):
        build_command_files(sel, ["frobnicate"])


def test_command_file_edit_and_reload(store, tmp_path):
    feds = populated(store, 3)
    files = build_command_files(select_databases(feds[:1]), ["migrate"])
    (path,) = write_command_files(files, tmp_path / "plan")
    assert path.name == "01-migrate.cmd"
    text = path.read_text()
    assert text.startswith("#OP migrate\n")
    # operator removes a line and adds a comment before running
    lines = text.splitlines()
    path.write_text("\n".join([lines[0], "# keep only two", *lines[1:3]]) + "\n")
    cf = CommandFile.load(path)
    assert cf.op == "migrate" and len(cf.lines) == 2
    assert all(ln.status == PENDING for ln in cf.lines)


class Farm:
    def __init__(self, root, clock, n=10):
        self.clock = clock
        self.store = FederationStore(root / "catalog", data_root=root / "data", clock=clock)
        self.mss = MassStore(root / "mss")
        self.servers = {h: DataServer(h, Disk(root / "data" / h, 10**9), self.mss, clock) for h in HOSTS}
        self.fed = self.store.create_federation("ana", "analysis",
                                                lockserver=LockServer("lsa", clock=clock))
        for i in range(n):
            host = HOSTS[i % 3]
            path = f"ana/d{i}.db"
            srv = self.servers[host]
            dbfile.write_dbfile(srv.full_path(path), bytes([i]) * 64)
            size = srv.adopt(path)
            self.fed.register(DbEntry(f"d{i}", host, path, State.CLOSED, size=size))
        self.ctx = AdminContext(self.store, self.servers, self.mss, clock, root / "backup")

    def plan(self, *ops, **crit):
        sel = select_databases([self.fed], SelectionCriteria(**crit))
        return build_command_files(sel, list(ops))


@pytest.fixture
def farm(tmp_path, clock):
    return Farm(tmp_path, clock)


def test_streams_bound_concurrency(farm):
    barrier_hits = []
    gate = threading.Event()

    def slow_fail(line):
        barrier_hits.append(line.dbid)
        if len(barrier_hits) >= 4:
            gate.set()
        gate.wait(0.3)
        return False

    farm.ctx.fail = slow_fail
    rep = execute_plan(farm.plan("checksum"), farm.ctx, streams=4)
    (fr,) = rep.files
    assert fr.attempted == 10 and fr.succeeded == 10
    assert fr.max_concurrent == 4


def test_streams_one_is_serial(farm):
    rep = execute_plan(farm.plan("checksum"), farm.ctx, streams=1)
    assert rep.files[0].max_concurrent == 1


def test_files_run_strictly_in_order(farm):
    log = []
    lock = threading.Lock()

    def spy(line):
        with lock:
            log.append(current[0])
        return False

    current = [None]
    files = farm.plan("migrate", "checksum")
    farm.ctx.fail = spy
    for cf in files:
        current[0] = cf.op
        execute_plan([cf], farm.ctx, streams=3)
    assert log == ["migrate"] * 10 + ["checksum"] * 10
    # the same through one call: no checksum line ever sees an unarchived file
    farm2_files = farm.plan("migrate", "checksum")
    farm.ctx.fail = None
    rep = execute_plan(farm2_files, farm.ctx, streams=4)
    assert [f.op for f in rep.files] == ["migrate", "checksum"]
    assert rep.failed == 0


def test_host_affinity(farm, monkeypatch):
    import fedstore.admintool as at

    seen = []

    def run(ctx, fed, entry, line):
        seen.append((line.host, threading.current_thread().name))

    monkeypatch.setitem(at.OPERATIONS, "stage", at.Operation("stage", run))
    execute_plan(farm.plan("stage"), farm.ctx, streams=2)
    assert all(name.startswith(f"exec-{host}") for host, name in seen)


def test_rerun_after_failures(farm, tmp_path):
    files = farm.plan("migrate")
    write_command_files(files, tmp_path / "plan")
    bad = {2, 7}
    farm.ctx.fail = lambda line: line.dbid in bad
    rep = execute_plan(files, farm.ctx, streams=3)
    assert (rep.attempted, rep.succeeded, rep.failed) == (10, 8, 2)
    assert sorted(rep.files[0].per_host) == ["h1", "h2", "h3"]
    reloaded = CommandFile.load(files[0].path)
    assert [ln.dbid for ln in reloaded.lines if ln.status == FAILED] == [2, 7]
    farm.ctx.fail = None
    rep2 = execute_plan([reloaded], farm.ctx, streams=3)
    assert rep2.attempted == 2 and rep2.succeeded == 2
    assert all(ln.status == OK for ln in reloaded.lines)


@settings(max_examples=15, deadline=None)
@given(st.sets(st.integers(1, 10), max_size=10), st.integers(1, 5))
def test_resume_converges_once_per_line(bad, streams):
    import tempfile
    from pathlib import Path

    from fedstore.clock import SimClock

    with tempfile.TemporaryDirectory() as d:
        farm = Farm(Path(d), SimClock())
        runs = {}
        lock = threading.Lock()
        import fedstore.admintool as at

        def count(ctx, fed, entry, line):
            with lock:
                runs[line.dbid] = runs.get(line.dbid, 0) + 1

        files = farm.plan("checksum")
        op = at.Operation("checksum", count)
        old = at.OPERATIONS["checksum"]
        at.OPERATIONS["checksum"] = op
        try:
            farm.ctx.fail = lambda line: line.dbid in bad
            execute_plan(files, farm.ctx, streams)
            farm.ctx.fail = None
            execute_plan(files, farm.ctx, streams)
        finally:
            at.OPERATIONS["checksum"] = old
        assert runs == {i: 1 for i in range(1, 11)}
        assert all(ln.status == OK for ln in files[0].lines)


def test_outage_only_around_outage_lines(farm):
    for fed in [farm.fed]:
        for dbid in list(fed.entries):
            fed.set_readonly(dbid)
    q0 = farm.fed.quiescent_seconds
    execute_plan(farm.plan("checksum"), farm.ctx, streams=4)
    assert farm.fed.quiescent_seconds == q0
    files = farm.plan("relocate", include={"host": {"h1"}})
    for ln in files[0].lines:
        ln.args = "h2"
    rep = execute_plan(files, farm.ctx, streams=4)
    fr = rep.files[0]
    assert fr.succeeded == 4 and fr.max_concurrent == 1
    assert farm.fed.quiescent_seconds - q0 == 4 * 60 == fr.quiescent_seconds
    assert not farm.fed.quiescent
    assert all(farm.fed.entries[ln.dbid].host == "h2" for ln in files[0].lines)


def test_purge_requires_archive(farm):
    rep = execute_plan(farm.plan("purge"), farm.ctx)
    assert rep.failed == 10
    execute_plan(farm.plan("migrate", "purge"), farm.ctx, streams=2)
    assert all(not s.files() for s in farm.servers.values())
    rep = execute_plan(farm.plan("stage"), farm.ctx, streams=2)
    assert rep.succeeded == 10 and sum(s.stage_events for s in farm.servers.values()) == 10


def test_backup_op(farm):
    rep = execute_plan(farm.plan("backup"), farm.ctx)
    assert rep.succeeded == 10
    assert (farm.ctx.backup_dir / "ana" / "d3.db").exists()


# maintenance

def test_daily_bumps_schema_everywhere(store):
    feds = populated(store, 2)
    rep = run_maintenance(feds, "daily")
    assert rep.schema_versions == {"ana": 2, "prod": 2}
    assert rep.backups == {}


def test_daily_runs_conditions_snapshot(store, tmp_path, clock):
    mss = MassStore(tmp_path / "mss")
    pc = store.create_federation("pc1", "production")
    cond = store.create_federation("cond1", "conditions")
    pc_srv = DataServer("ds-pc", Disk(store.data_root / "ds-pc", 10**6), mss, clock, role="analysis")
    cond_srv = DataServer("ds-cond", Disk(store.data_root / "ds-cond", 10**6), mss, clock)
    dbfile.write_dbfile(pc_srv.full_path("pc1/cal.db"), b"cal")
    size = pc_srv.adopt("pc1/cal.db")
    pc.register(DbEntry("cal", "ds-pc", "pc1/cal.db", State.CLOSED, size=size))
    control = RunControl()
    link = ConditionsLink(pc, cond, control, cond_srv, pc_srv)
    control.begin_run()
    rep = run_maintenance([pc, cond], "daily", conditions=link)
    assert rep.snapshot is None and "active" in rep.snapshot_skipped
    control.end_run()
    control.pause()
    rep = run_maintenance([pc, cond], "daily", conditions=link)
    assert rep.snapshot == [1] and cond.entries[1].readonly


def test_weekly_backup_equals_catalog_at_quiesce(store, tmp_path, clock):
    fed = store.create_federation("ana", "analysis", lockserver=LockServer("lsa", clock=clock))
    fed.register(closed_entry("x"))
    fed.register_collection(CollectionRef("c", local=(1,)))
    captured = {}
    real = fed.quiesce

    def spy():
        real()
        captured["cat"] = fed.catalog_text()

    fed.quiesce = spy
    rep = run_maintenance([fed], "weekly", clock, tmp_path / "bk", auth={"ana": {"alice": 1}})
    path = rep.backups["ana"]
    assert path.read_text() == captured["cat"]
    assert path.with_suffix(".col").read_text() == fed.collections_text()
    assert fed.auth == {"alice": 1} and rep.auth_rewritten == ["ana"]
    assert "schema_version=2" in path.read_text()
    assert not fed.quiescent


def test_weekly_backup_retried_after_cleanup(store, tmp_path, clock):
    ls = LockServer("lsa", clock=clock, heartbeat_timeout=60)
    fed = store.create_federation("ana", "analysis", lockserver=ls)
    client = ls.connect("crashed")
    txn = ls.begin(client)
    ls.acquire(txn, catalog_resource("ana"), Mode.WRITE)
    clock.advance(61)
    rep = run_maintenance([fed], "weekly", clock, tmp_path / "bk")
    assert rep.retries == {"ana": [txn.txn_id]}
    assert "ana" in rep.backups and rep.refused == {}


def test_weekly_backup_refused_for_live_writer(store, tmp_path, clock):
    ls = LockServer("lsa", clock=clock)
    fed = store.create_federation("ana", "analysis", lockserver=ls)
    txn = ls.begin(ls.connect("live"))
    ls.acquire(txn, catalog_resource("ana"), Mode.WRITE)
    rep = run_maintenance([fed], "weekly", clock, tmp_path / "bk")
    assert "ana" in rep.refused and "ana" not in rep.backups


# monitoring

def test_monitor_all_up(tmp_path, clock):
    srv = DataServer("ds1", Disk(tmp_path / "d", 10), MassStore(tmp_path / "m"), clock)
    assert monitor_hosts([srv, LockServer("ls", clock=clock), Host("gw")], clock) == []


def test_monitor_restarts_and_reports(tmp_path, clock):
    srv = DataServer("ds1", Disk(tmp_path / "d", 10), MassStore(tmp_path / "m"), clock)
    ls = LockServer("ls9", clock=clock)
    gw = Host("gw")
    srv.kill()
    ls.kill()
    gw.kill()
    clock.set(120)
    log = tmp_path / "incidents.log"
    inc = monitor_hosts([srv, ls, gw], clock, log)
    assert [(i.kind, i.name, i.action, i.outcome) for i in inc] == [
        ("dataserver", "ds1", "restart", "up"),
        ("lockserver", "ls9", "restart", "up"),
        ("host", "gw", "report", "down"),
    ]
    assert srv.is_up() and ls.is_up() and not gw.is_up()
    assert log.read_text().splitlines()[0] == "120\tdataserver\tds1\trestart\tup"
    monitor_hosts([gw], clock, log)
    assert len(log.read_text().splitlines()) == 4
