import dataclasses
import threading
import time

import pytest
from hypothesis import HealthCheck, given, settings, strategies as st

from fedstore import dbfile
from fedstore.errors import (
    ActiveTransactions,
    CapTooLarge,
    DanglingRef,
    DuplicateFederation,
    DuplicateId,
    IdExhausted,
    IntegrityFailure,
    NotClosed,
    QuiescenceRequired,
    UnknownCollection,
)
from fedstore.fedcat import (
    CollectionRef,
    DbEntry,
    Federation,
    FederationStore,
    PolicyConstants,
    Role,
    State,
    catalog_diff,
)
from fedstore.lockmgr import Mode, db_resource

from conftest import closed_entry


def make_payload(tmp_path, name, content):
    p = tmp_path / "src" / f"{name}.db"
    dbfile.write_dbfile(p, content)
    return p


# create_federation

def test_create_production_federation_is_empty(store):
    fed = store.create_federation("prod1", Role.PRODUCTION, 65535)
    assert len(fed.entries) == 0
    assert not fed.quiescent
    header = (store.root / "prod1.cat").read_text().splitlines()[0]
    assert header == "FEDCAT v1 production 65535"


def test_analysis_default_cap_is_16k(store):
    assert store.create_federation("ana1", "analysis", 16384).id_cap == 16384
    assert store.create_federation("ana2", "analysis").id_cap == 16384
    assert store.create_federation("prod", "production").id_cap == 65535


def test_cap_too_large(store):
    with pytest.raises(CapTooLarge):
        store.create_federation("ana1", "analysis", 70000)


def test_duplicate_federation(store):
    store.create_federation("a", "production")
    with pytest.raises(DuplicateFederation):
        store.create_federation("a", "analysis")
    reopened = FederationStore(store.root)
    with pytest.raises(DuplicateFederation):
        reopened.create_federation("a", "analysis")


def test_policy_constants():
    p = PolicyConstants()
    assert (p.hard_db_cap, p.practical_db_cap, p.lockserver_conn_cap) == (65535, 16384, 1024)
    assert (p.purge_age_days, p.purge_usage_pct) == (10, 95)
    with pytest.raises(ValueError):
        PolicyConstants(practical_db_cap=70000)


# attach

def test_attach_db_assigns_id_and_scans(store, tmp_path):
    fed = store.create_federation("imp", "import")
    src = make_payload(tmp_path, "a", b"hello")
    dbid = fed.attach_db(closed_entry("a"), src)
    assert dbid == 1
    assert fed.scan_count == 1
    entry = fed.entries[1]
    assert entry.size == src.stat().st_size
    assert fed.locate(entry).read_bytes() == src.read_bytes()
    assert "\ta\th1\ta.db\tclosed\t" in (store.root / "imp.cat").read_text()


def test_attach_at_cap_is_exhausted(store):
    fed = store.create_federation("small", "analysis", 3)
    for i in range(3):
        fed.register(closed_entry(f"d{i}"))
    with pytest.raises(IdExhausted):
        fed.register(closed_entry("d3"))


def test_attach_rejects_flipped_byte(store, tmp_path):
    fed = store.create_federation("imp", "import")
    src = make_payload(tmp_path, "a", b"0123456789")
    manifest_crc = dbfile.file_crc(src)
    data = bytearray(src.read_bytes())
    data[-3] ^= 0x01
    src.write_bytes(bytes(data))
    with pytest.raises(IntegrityFailure):
        fed.attach_db(closed_entry("a"), src, expected_crc=manifest_crc)
    assert fed.entries == {}


def test_duplicate_name_and_location(store):
    fed = store.create_federation("f", "production")
    fed.register(closed_entry("a"))
    with pytest.raises(DuplicateId):
        fed.register(closed_entry("a"))
    with pytest.raises(DuplicateId):
        fed.register(DbEntry("b", "h1", "a.db", State.CLOSED, size=1))
    with pytest.raises(DuplicateId):
        fed.register(dataclasses.replace(closed_entry("c"), id=1))


def test_ids_are_never_reused(store):
    fed = store.create_federation("f", "production")
    fed.register(closed_entry("a"))
    fed.register(closed_entry("b"))
    fed.detach(2)
    assert fed.register(closed_entry("c")) == 3


def test_proxy_attach_matches_checked_attach(tmp_path):
    a = FederationStore(tmp_path / "a", data_root=tmp_path / "da").create_federation("x", "analysis")
    b = FederationStore(tmp_path / "b", data_root=tmp_path / "db").create_federation("x", "analysis")
    src = make_payload(tmp_path, "p", b"payload bytes")
    a.attach_db(closed_entry("p", mtime=5), src)
    b.attach_by_proxy(closed_entry("p", mtime=5), src)
    assert a.entries == b.entries
    assert a.locate(a.entries[1]).read_bytes() == b.locate(b.entries[1]).read_bytes()
    assert (a.scan_count, b.scan_count) == (1, 0)


def test_proxy_skips_payload_reads(store, tmp_path, monkeypatch):
    fed = store.create_federation("x", "analysis")
    src = make_payload(tmp_path, "p", b"zz")

    def no_scan(*a, **k):
        raise AssertionError("proxy path must not scan payloads")

    monkeypatch.setattr(dbfile, "verify", no_scan)
    fed.attach_by_proxy(closed_entry("p"), src)
    fed.attach_by_proxy(closed_entry("q"), src)
    assert fed.scan_count == 0


def test_proxy_attach_to_full_federation(store, tmp_path):
    fed = store.create_federation("x", "analysis", 1)
    fed.register(closed_entry("a"))
    with pytest.raises(IdExhausted):
        fed.attach_by_proxy(closed_entry("b"), make_payload(tmp_path, "b", b"1"))
    assert not fed.locate(closed_entry("b")).exists()


# readonly and quiescence

def test_set_readonly(store):
    fed = store.create_federation("f", "analysis")
    fed.register(closed_entry("a"))
    fed.register(DbEntry("b", "h1", "b.db", State.IN_USE))
    assert fed.set_readonly(1).readonly
    with pytest.raises(NotClosed):
        fed.set_readonly(2)


def test_readonly_mutation_requires_quiescence(store):
    fed = store.create_federation("f", "analysis")
    fed.register(closed_entry("a"))
    fed.set_readonly(1)
    with pytest.raises(QuiescenceRequired):
        fed.update_entry(1, host="h2")
    with fed.quiesced():
        assert fed.update_entry(1, host="h2").host == "h2"


def test_quiesce_without_clients(store, lockserver):
    fed = store.create_federation("f", "analysis", lockserver=lockserver)
    fed.quiesce()
    assert fed.quiescent
    fed.release()
    assert not fed.quiescent


def test_quiesce_refused_with_open_write_txn(store, lockserver):
    fed = store.create_federation("f", "production", lockserver=lockserver)
    fed.register(closed_entry("a"))
    lockserver.connect("c1")
    txn = lockserver.begin("c1")
    lockserver.acquire(txn, db_resource("f", 1), Mode.WRITE)
    with pytest.raises(ActiveTransactions):
        fed.quiesce()
    lockserver.commit(txn)
    fed.quiesce()
    fed.release()


def test_open_stalls_while_quiescent(store):
    fed = store.create_federation("f", "analysis")
    fed.register(closed_entry("a"))
    fed.quiesce()
    opened = threading.Event()

    def client():
        fed.open_db(1)
        opened.set()

    t = threading.Thread(target=client)
    t.start()
    time.sleep(0.05)
    assert not opened.is_set()
    assert fed.opens == 0
    fed.release()
    t.join(2)
    assert opened.is_set()
    assert fed.opens == 1


def test_readonly_open_takes_no_locks(store, lockserver):
    fed = store.create_federation("f", "analysis", lockserver=lockserver)
    fed.register(closed_entry("ro"))
    fed.register(closed_entry("rw"))
    fed.set_readonly(1)
    lockserver.connect("reader")
    txn = lockserver.begin("reader")
    before = lockserver.requests
    fed.open_db(1, txn)
    assert lockserver.requests == before
    fed.open_db(2, txn)
    assert lockserver.requests == before + 1


# diff

def test_diff_identical_is_empty(store):
    a = store.create_federation("a", "production")
    b = store.create_federation("b", "analysis")
    for fed in (a, b):
        fed.register(closed_entry("x"))
    assert catalog_diff(a, b) == []


def test_diff_set_difference(store):
    a = store.create_federation("a", "production")
    b = store.create_federation("b", "analysis")
    for n in "abc":
        a.register(closed_entry(n))
    b.register(closed_entry("a", host="other"))
    got = [e.name for e in catalog_diff(a, b, state=State.CLOSED)]
    assert got == sorted({"a", "b", "c"} - {"a"})


def test_diff_filter_excludes_in_use(store):
    a = store.create_federation("a", "production")
    b = store.create_federation("b", "analysis")
    a.register(closed_entry("done"))
    a.register(DbEntry("busy", "h1", "busy.db", State.IN_USE))
    assert [e.name for e in catalog_diff(a, b, state="closed")] == ["done"]
    assert [e.name for e in catalog_diff(a, b, predicate=lambda e: e.component == "raw")] == []


# collections

def two_level(store):
    d1 = store.create_federation("d1", "analysis")
    d2 = store.create_federation("d2", "analysis")
    bridge = store.create_federation("br", "bridge")
    for fed, names in ((d1, "ab"), (d2, "cd")):
        for n in names:
            fed.register(closed_entry(n))
        fed.register_collection(CollectionRef("coll", local=tuple(fed.entries)))
    return d1, d2, bridge


def test_local_collection(store):
    d1, _, _ = two_level(store)
    assert d1.collections["coll"].local == (1, 2)
    assert d1.resolve_collection("coll").entries == [d1.entries[1], d1.entries[2]]


def test_bridge_pointer_without_entries(store):
    d1, _, bridge = two_level(store)
    bridge.register_collection(CollectionRef("all-d1", remote=("d1", "coll")))
    assert bridge.entries == {}
    res = bridge.resolve_collection("all-d1")
    assert res.federations == ("d1",)
    assert [e.name for e in res.entries] == ["a", "b"]


def test_span_concatenates_in_daughter_order(store):
    d1, d2, bridge = two_level(store)
    bridge.register_collection(CollectionRef("both", span=(("d2", "coll"), ("d1", "coll"))))
    res = bridge.resolve_collection("both")
    assert res.federations == ("d2", "d1")
    expected = list(d2.entries.values()) + list(d1.entries.values())
    assert res.entries == expected


def test_dangling_refs(store):
    d1, _, bridge = two_level(store)
    with pytest.raises(DanglingRef):
        bridge.register_collection(CollectionRef("x", remote=("missing", "coll")))
    with pytest.raises(DanglingRef):
        bridge.register_collection(CollectionRef("x", remote=("d1", "nope")))
    with pytest.raises(DanglingRef):
        d1.register_collection(CollectionRef("x", local=(99,)))
    with pytest.raises(DanglingRef):
        d1.register_collection(CollectionRef("x", span=(("d2", "coll"),)))
    with pytest.raises(DanglingRef):
        bridge.register_collection(CollectionRef("x", local=()))


def test_no_bridge_chains(store):
    two_level(store)
    store.create_federation("br2", "bridge")
    store["br"].register_collection(CollectionRef("p", remote=("d1", "coll")))
    with pytest.raises(DanglingRef):
        store["br2"].register_collection(CollectionRef("q", remote=("br", "p")))


def test_unknown_collection(store):
    _, _, bridge = two_level(store)
    with pytest.raises(UnknownCollection):
        bridge.resolve_collection("ghost")


def test_collection_file_format(store):
    two_level(store)
    store["br"].register_collection(CollectionRef("r", remote=("d1", "coll")))
    store["br"].register_collection(CollectionRef("s", span=(("d1", "coll"), ("d2", "coll"))))
    assert (store.root / "d1.col").read_text() == "coll\tlocal:1,2\n"
    assert (store.root / "br.col").read_text() == "r\tremote:d1/coll\ns\tspan:d1/coll;d2/coll\n"


# properties

names = st.text("abcdefgh", min_size=1, max_size=6)


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 20), st.lists(st.tuples(st.booleans(), names), max_size=60))
def test_entries_never_exceed_cap(cap, ops):
    fed = Federation("f", "production", cap)
    for attach, name in ops:
        if attach:
            try:
                fed.register(closed_entry(name))
            except (IdExhausted, DuplicateId):
                pass
        elif fed.entries:
            fed.detach(sorted(fed.entries)[0])
        assert len(fed.entries) <= fed.id_cap
        assert all(0 < i <= 65535 for i in fed.entries)


@settings(max_examples=25, deadline=None, suppress_health_check=[HealthCheck.function_scoped_fixture])
@given(st.lists(st.binary(max_size=64), min_size=1, max_size=8))
def test_proxy_equivalence_property(tmp_path_factory, payloads):
    root = tmp_path_factory.mktemp("prox")
    checked = FederationStore(root / "c", data_root=root / "dc").create_federation("x", "analysis")
    proxied = FederationStore(root / "p", data_root=root / "dp").create_federation("x", "analysis")
    for i, content in enumerate(payloads):
        src = root / "src" / f"{i}.db"
        dbfile.write_dbfile(src, content)
        checked.attach_db(closed_entry(f"d{i}", mtime=i), src)
        proxied.attach_by_proxy(closed_entry(f"d{i}", mtime=i), src)
    assert checked.entries == proxied.entries
    assert proxied.scan_count == 0 and checked.scan_count == len(payloads)


@settings(max_examples=50, deadline=None)
@given(st.sets(names, max_size=15), st.sets(names, max_size=15))
def test_diff_then_attach_is_idempotent(src_names, dst_names):
    a = Federation("a", "production")
    b = Federation("b", "analysis")
    for n in sorted(src_names):
        a.register(closed_entry(n))
    for n in sorted(dst_names):
        b.register(closed_entry(n))
    diff = catalog_diff(a, b)
    assert {e.name for e in diff} == src_names - dst_names
    for e in diff:
        b.register(dataclasses.replace(e, id=0))
    assert catalog_diff(a, b) == []


entry_st = st.builds(
    lambda name, host, state, ro, comp, auth, mtime, size: DbEntry(
        name, host, f"{host}/{name}.db", state,
        readonly=ro and state is State.CLOSED, component=comp, auth_level=auth,
        mtime=mtime, size=size if state is State.CLOSED else 0),
    names, st.sampled_from(["h1", "h2"]), st.sampled_from(list(State)), st.booleans(),
    st.sampled_from(["micro", "mini", "raw"]), st.integers(0, 5), st.integers(0, 10**9),
    st.integers(1, 10**9))


@settings(max_examples=40, deadline=None, suppress_health_check=[HealthCheck.function_scoped_fixture])
@given(st.lists(entry_st, max_size=20, unique_by=lambda e: e.name),
       st.sampled_from(list(Role)), st.integers(30, 65535))
def test_persist_load_roundtrip(tmp_path_factory, entries, role, cap):
    root = tmp_path_factory.mktemp("rt")
    store = FederationStore(root)
    fed = store.create_federation("f", role, cap, domain="dom")
    if role is not Role.BRIDGE:
        with fed.batch():
            for e in entries:
                fed.register(e)
            if fed.entries:
                fed.register_collection(CollectionRef("c", local=tuple(sorted(fed.entries))[:3]))
    fed.schema_version = 4
    fed.auth = {"alice": 2}
    store.save(fed)
    loaded = FederationStore(root).load("f")
    assert loaded == fed


def test_register_many_is_one_section_and_keeps_prefix(store):
    fed = store.create_federation("f", "production")
    before = fed.catalog_writes
    assert fed.register_many([closed_entry(n) for n in "abc"]) == [1, 2, 3]
    assert fed.catalog_writes == before + 1
    with pytest.raises(DuplicateId):
        fed.register_many([closed_entry("d"), closed_entry("a"), closed_entry("e")])
    assert sorted(e.name for e in fed.entries.values()) == ["a", "b", "c", "d"]
    # the caller's objects are not mutated
    mine = closed_entry("z")
    fed.register_many([mine])
    assert mine.id == 0 and fed.by_name("z").id == 5
