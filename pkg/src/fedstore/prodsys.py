"""Production environment: pre-created database pools, the conditions OID
cache, conditions snapshots and a synthetic reconstruction/simulation write
workload."""

import csv
import io
import random
import tempfile
import threading
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path

from fedstore import dbfile
from fedstore.errors import NotPaused, UnknownKey
from fedstore.fedcat import CollectionRef, DbEntry, State, catalog_diff
from fedstore.lockmgr import Mode, catalog_resource
from fedstore.storage import mss_key

DEFAULT_REFILL_BATCH = 16
RECO_COMPONENTS = ("micro", "mini")
SIM_STAGES = ("sim", "mix", "reco")


def db_name(fed, component, serial):
    return f"{fed.name}.{component}.{serial:05d}"


def _new_entry(fed, server, component, state=State.EMPTY, size=0):
    serial = fed.next_id
    name = db_name(fed, component, serial)
    return DbEntry(name=name, host=server.host, path=f"{fed.name}/{name}.db",
                   state=state, component=component, size=size)


def _presize(server, path, size):
    full = server.full_path(path)
    full.parent.mkdir(parents=True, exist_ok=True)
    with open(full, "wb") as f:
        f.truncate(size)
    server.adopt(path)


def direct_allocate(fed, server, component, clock=None):
    """Create one database the old way: one catalog write lock per db."""
    with fed.catalog_write(creates=True):
        entry = _new_entry(fed, server, component, state=State.IN_USE)
        if clock is not None:
            entry.mtime = clock.now
        dbid = fed.register(entry)
    _presize(server, fed.entries[dbid].path, 0)
    return dbid


class ChsPool:
    """Per-component queues of pre-created, pre-sized empty databases.
    An allocation from a non-empty queue needs no catalog write lock; an
    empty queue is refilled with ``refill_batch`` databases under a single
    catalog write lock."""

    def __init__(self, fed, server, presize, refill_batch=DEFAULT_REFILL_BATCH):
        if refill_batch < 1:
            raise ValueError("refill_batch must be at least 1")
        self.fed = fed
        self.server = server
        self.presize = presize
        self.refill_batch = refill_batch
        self.queues = {}
        self.refills = 0
        self.created = 0
        self.allocated = 0
        self._lock = threading.Lock()

    def pool_size(self, component=None):
        if component is not None:
            return len(self.queues.get(component, ()))
        return sum(len(q) for q in self.queues.values())

    def prime(self, component, n):
        with self._lock:
            self._refill(component, n)

    def _refill(self, component, n):
        queue = self.queues.setdefault(component, deque())
        with self.fed.catalog_write(creates=True):
            created = []
            for _ in range(n):
                entry = _new_entry(self.fed, self.server, component, size=self.presize)
                created.append(self.fed.register(entry))
        for dbid in created:
            _presize(self.server, self.fed.entries[dbid].path, self.presize)
            queue.append(dbid)
        self.refills += 1
        self.created += n

    def allocate(self, component):
        with self._lock:
            queue = self.queues.setdefault(component, deque())
            if not queue:
                self._refill(component, self.refill_batch)
            dbid = queue.popleft()
            self.allocated += 1
        return dbid


def chs_allocate(pool, fed, component):
    if pool.fed is not fed:
        raise ValueError("pool serves a different federation")
    return pool.allocate(component)


class OidCache:
    """Object identifiers of conditions collections. A miss costs one
    locked catalog read on the conditions lock server; a hit costs none."""

    def __init__(self, client="oid-server"):
        self.client = client
        self.cache = {}
        self.hits = 0
        self.misses = 0
        self._lock = threading.Lock()

    def lookup(self, key, cond_fed):
        with self._lock:
            if key in self.cache:
                self.hits += 1
                return self.cache[key]
        server = cond_fed.lockserver
        if server is not None:
            server.connect(self.client)
            txn = server.begin(self.client)
            try:
                server.acquire(txn, catalog_resource(cond_fed.name), Mode.READ)
                ref = cond_fed.collections.get(key)
            finally:
                server.commit(txn)
        else:
            ref = cond_fed.collections.get(key)
        if ref is None or ref.kind != "local":
            raise UnknownKey(f"{cond_fed.name}: no conditions key {key!r}")
        oid = f"{cond_fed.name}:" + ",".join(str(i) for i in ref.local)
        with self._lock:
            self.misses += 1
            self.cache[key] = oid
        return oid


def oid_lookup(cache, key, conditions_fed):
    return cache.lookup(key, conditions_fed)


class RunControl:
    """Reconstruction run bookkeeping: clients inside a run, and a pause
    flag set between runs while conditions are copied."""

    def __init__(self):
        self.active = 0
        self.paused = False
        self._lock = threading.Lock()

    def begin_run(self, clients=1):
        with self._lock:
            if self.paused:
                raise NotPaused("cannot start a run while paused")
            self.active += clients

    def end_run(self, clients=1):
        with self._lock:
            self.active -= clients

    def pause(self):
        with self._lock:
            if self.active:
                raise NotPaused(f"{self.active} clients still inside a run")
            self.paused = True

    def resume(self):
        with self._lock:
            self.paused = False


def _fetch(entry, fed, server, mss, scratch):
    """Path to readable bytes of ``entry``: its disk copy if present, else a
    scratch copy pulled from the mass store."""
    if server is not None and server.on_disk(entry.path):
        return server.full_path(entry.path)
    if fed.data_root is not None and fed.locate(entry).exists():
        return fed.locate(entry)
    dest = Path(scratch) / mss_key(entry.path)
    mss.retrieve(mss_key(entry.path), dest)
    return dest


def conditions_snapshot(pc_fed, cond_fed, control, cond_server, mss=None, pc_server=None):
    """Copy new closed calibration databases into the readonly conditions
    federation by proxy, plus any calibration collections that become
    complete. Reconstruction must be paused."""
    if not control.paused or control.active:
        raise NotPaused("reconstruction clients are active; pause between runs first")
    mss = mss if mss is not None else cond_server.mss
    new = catalog_diff(pc_fed, cond_fed, state=State.CLOSED)
    copied = []
    with tempfile.TemporaryDirectory() as scratch, cond_fed.quiesced():
        for e in new:
            src = _fetch(e, pc_fed, pc_server, mss, scratch)
            entry = DbEntry(name=e.name, host=cond_server.host,
                            path=f"{cond_fed.name}/{mss_key(e.path)}", state=State.CLOSED,
                            component=e.component, auth_level=e.auth_level,
                            mtime=e.mtime, size=e.size)
            dbid = cond_fed.attach_by_proxy(entry, src)
            cond_server.adopt(entry.path)
            cond_fed.set_readonly(dbid)
            copied.append(dbid)
        for name in sorted(pc_fed.collections):
            ref = pc_fed.collections[name]
            if name in cond_fed.collections or ref.kind != "local":
                continue
            members = [cond_fed.by_name(pc_fed.entries[i].name) for i in ref.local]
            if all(m is not None for m in members):
                cond_fed.register_collection(CollectionRef(name, local=tuple(m.id for m in members)))
    return copied


def event_payload(run, event, component, size):
    return random.Random(f"{run}:{event}:{component}").randbytes(size)


@dataclass
class Binding:
    fed: object
    lockserver: object
    server: object
    pool: object = None


@dataclass
class ProdTopology:
    bindings: list
    conditions: list = field(default_factory=list)
    components: tuple = ("micro",)
    event_size: dict = field(default_factory=lambda: {"micro": 4096, "mini": 12288,
                                                      "sim": 4096, "mix": 4096, "reco": 4096})
    target_db_size: int = 500 * 1024
    refill_batch: int = DEFAULT_REFILL_BATCH
    three_stage: bool = False
    next_run: int = 1

    def __post_init__(self):
        servers = [b.lockserver for b in self.bindings]
        if len({id(s) for s in servers}) != len(servers):
            raise ValueError("each production federation needs its own lock server")

    def pool_for(self, binding):
        if binding.pool is None:
            binding.pool = ChsPool(binding.fed, binding.server, self.target_db_size,
                                   self.refill_batch)
        return binding.pool


@dataclass
class ClientRow:
    client: str
    fed: str
    run: int
    events: int = 0
    dbs: int = 0
    bytes: int = 0
    lock_requests: int = 0


@dataclass
class CycleReport:
    clients: list
    dbs_created: list
    collections: list
    lock_requests: int
    catalog_write_locks: int
    catalog_stalls: int
    chs: bool

    def summary(self):
        return (f"clients={len(self.clients)} dbs={len(self.dbs_created)} "
                f"collections={len(self.collections)} lock_requests={self.lock_requests} "
                f"catalog_write_locks={self.catalog_write_locks} "
                f"catalog_stalls={self.catalog_stalls} chs={int(self.chs)}")

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["client", "fed", "run", "events", "dbs", "bytes", "lock_requests"])
        for r in self.clients:
            w.writerow([r.client, r.fed, r.run, r.events, r.dbs, r.bytes, r.lock_requests])
        return buf.getvalue()


class _Client:
    def __init__(self, name, binding, run, events, components):
        self.name = name
        self.binding = binding
        self.run = run
        self.remaining = events
        self.next_event = 0
        self.components = components
        self.open = {}  # component -> (dbid, [chunks], size)
        self.written = {c: [] for c in components}
        self.row = ClientRow(name, binding.fed.name, run, events)
        self.txn = None


def run_production_cycle(topology, n_clients, n_events, clock, chs=True, control=None):
    """Simulate one production cycle. Clients are spread over the
    topology's federations; each processes one run. They advance one event
    at a time in a fixed round-robin order, so the outcome depends only on
    the inputs. Every database ends closed, archived and in exactly one
    collection of its client's run."""
    components = SIM_STAGES if topology.three_stage else tuple(topology.components)
    per_fed_before = {b.fed.name: (b.lockserver.requests,
                                   b.lockserver.catalog_write_locks(b.fed.name))
                      for b in topology.bindings}
    clients = []
    for i in range(n_clients):
        binding = topology.bindings[i % len(topology.bindings)]
        events = n_events // n_clients + (1 if i < n_events % n_clients else 0)
        run = topology.next_run + i
        clients.append(_Client(f"{binding.fed.name}-c{i:03d}", binding, run, events, components))
    topology.next_run += n_clients

    for c in clients:
        c.binding.lockserver.connect(c.name)
    if control is not None:
        control.begin_run(len(clients))

    stalls = 0
    created = []
    active_by_fed = {}
    for c in clients:
        if c.remaining:
            active_by_fed[c.binding.fed.name] = active_by_fed.get(c.binding.fed.name, 0) + 1

    def allocate(c, component):
        nonlocal stalls
        b = c.binding
        before = b.lockserver.catalog_write_locks(b.fed.name)
        if chs:
            dbid = topology.pool_for(b).allocate(component)
            b.fed.update_entry(dbid, state=State.IN_USE, mtime=clock.now)
        else:
            dbid = direct_allocate(b.fed, b.server, component, clock)
        took = b.lockserver.catalog_write_locks(b.fed.name) - before
        stalls += took * (active_by_fed.get(b.fed.name, 1) - 1)
        return dbid

    def close(c, component):
        dbid, chunks, size = c.open.pop(component)
        b = c.binding
        entry = b.fed.entries[dbid]
        nbytes = dbfile.write_dbfile(b.server.full_path(entry.path), b"".join(chunks))
        b.server.adopt(entry.path)
        b.fed.close_db(dbid, nbytes, clock.now)
        b.server.close_and_migrate(entry.path)
        c.written[component].append(dbid)
        c.row.dbs += 1
        c.row.bytes += nbytes
        created.append((b.fed.name, dbid))

    try:
        pending = [c for c in clients if c.remaining]
        for c in pending:
            c.txn = c.binding.lockserver.begin(c.name)
        while pending:
            for c in pending:
                ev = c.next_event
                for comp in components:
                    size = topology.event_size.get(comp, 4096)
                    cur = c.open.get(comp)
                    if cur is not None and cur[2] + size > topology.target_db_size:
                        close(c, comp)
                        cur = None
                    if cur is None:
                        dbid = allocate(c, comp)
                        c.binding.lockserver.acquire(
                            c.txn, ("db", c.binding.fed.name, dbid), Mode.WRITE)
                        cur = c.open[comp] = (dbid, [], 0)
                    dbid, chunks, used = cur
                    chunks.append(event_payload(c.run, ev, comp, size))
                    c.open[comp] = (dbid, chunks, used + size)
                c.next_event += 1
                c.remaining -= 1
            pending = [c for c in pending if c.remaining]

        collections = []
        for c in clients:
            for comp in components:
                if comp in c.open:
                    close(c, comp)
            if c.txn is not None:
                c.binding.lockserver.commit(c.txn)
            fed = c.binding.fed
            if topology.three_stage:
                groups = [(f"{fed.name}.run{c.run:06d}.{comp}", c.written[comp]) for comp in components]
            else:
                ids = [i for comp in components for i in c.written[comp]]
                groups = [(f"{fed.name}.run{c.run:06d}", ids)] if ids else []
            for name, ids in groups:
                if ids:
                    fed.register_collection(CollectionRef(name, local=tuple(sorted(ids))))
                    collections.append((fed.name, name))
    finally:
        for c in clients:
            c.binding.lockserver.disconnect(c.name)
        if control is not None:
            control.end_run(len(clients))

    for c in clients:
        c.row.lock_requests = c.binding.lockserver.requests_by_client[c.name]
    lock_requests = sum(b.lockserver.requests - per_fed_before[b.fed.name][0]
                        for b in topology.bindings)
    catalog_locks = sum(b.lockserver.catalog_write_locks(b.fed.name) - per_fed_before[b.fed.name][1]
                        for b in topology.bindings)
    return CycleReport([c.row for c in clients], created, collections, lock_requests,
                       catalog_locks, stalls, chs)
