"""Lock server model.

One LockServer stands in for a single-threaded lock daemon: every request is
processed under one mutex, in arrival order. Resources are tuples, either
``("catalog", fed)`` or ``("db", fed, dbid)``. Conflicting requests queue in
FIFO order per resource; a queued request is only granted once everything
ahead of it has been.
"""

import enum
import itertools
import threading
from collections import Counter, deque
from dataclasses import dataclass, field

from fedstore.errors import (
    ConnectionsExhausted,
    DeadTransaction,
    NotActive,
    NotConnected,
    ServiceDown,
)

DEFAULT_CONN_CAP = 1024
DEFAULT_HEARTBEAT_TIMEOUT = 60


class Mode(str, enum.Enum):
    READ = "read"
    WRITE = "write"


class TxnState(str, enum.Enum):
    ACTIVE = "active"
    COMMITTED = "committed"
    ABORTED = "aborted"
    DEAD = "dead"


def catalog_resource(fed):
    return ("catalog", fed)


def db_resource(fed, dbid):
    return ("db", fed, dbid)


def resource_fed(resource):
    return resource[1]


def format_resource(resource):
    return ":".join(str(p) for p in resource)


@dataclass(eq=False)
class Transaction:
    txn_id: int
    client: str
    state: TxnState = TxnState.ACTIVE
    last_heartbeat: float = 0
    locks: list = field(default_factory=list)

    @property
    def active(self):
        return self.state is TxnState.ACTIVE

    def __repr__(self):
        return f"Transaction({self.txn_id}, {self.client!r}, {self.state.value})"


@dataclass(eq=False)
class LockRequest:
    txn: Transaction
    resource: tuple
    mode: Mode
    seq: int
    granted: bool = False
    cancelled: bool = False


class _Entry:
    __slots__ = ("holders", "queue")

    def __init__(self):
        self.holders = {}  # txn_id -> Mode
        self.queue = deque()

    def writer(self):
        for tid, mode in self.holders.items():
            if mode is Mode.WRITE:
                return tid
        return None


class LockServer:
    kind = "lockserver"

    def __init__(self, server_id, conn_cap=DEFAULT_CONN_CAP, clock=None,
                 service_delay=0.0, heartbeat_timeout=DEFAULT_HEARTBEAT_TIMEOUT, host=None):
        if conn_cap < 1:
            raise ValueError("conn_cap must be positive")
        self.id = server_id
        self.host = host or server_id
        self.conn_cap = conn_cap
        self.clock = clock
        self.service_delay = service_delay
        self.heartbeat_timeout = heartbeat_timeout
        self.serving = set()
        self.connections = set()
        self.up = True

        self._mutex = threading.Lock()
        self._cond = threading.Condition(self._mutex)
        self._table = {}
        self._txns = {}
        self._txn_ids = itertools.count(1)
        self._seq = itertools.count(1)

        self.requests = 0
        self.busy_seconds = 0.0
        self.stalls = 0
        self.grant_log = []
        self.requests_by_client = Counter()
        self.write_grants = Counter()
        self.peak_connections = 0

    def _now(self):
        return self.clock.now if self.clock is not None else 0

    def _check_up(self):
        if not self.up:
            raise ServiceDown(f"lockserver {self.id} is down")

    # connections

    def connect(self, client):
        with self._mutex:
            self._check_up()
            if client in self.connections:
                return client
            if len(self.connections) >= self.conn_cap:
                raise ConnectionsExhausted(
                    f"{self.id}: {len(self.connections)} connections at cap {self.conn_cap}")
            self.connections.add(client)
            self.peak_connections = max(self.peak_connections, len(self.connections))
            return client

    def disconnect(self, client):
        """Drop a client; its active transactions are aborted."""
        with self._cond:
            for txn in list(self._txns.values()):
                if txn.client == client and txn.active:
                    self._finish(txn, TxnState.ABORTED)
            self.connections.discard(client)

    # transactions

    def begin(self, client):
        with self._mutex:
            self._check_up()
            if client not in self.connections:
                raise NotConnected(f"{client} is not connected to {self.id}")
            txn = Transaction(next(self._txn_ids), client, last_heartbeat=self._now())
            self._txns[txn.txn_id] = txn
            return txn

    def heartbeat(self, txn, now=None):
        with self._mutex:
            if txn.active:
                txn.last_heartbeat = self._now() if now is None else now

    def acquire(self, txn, resource, mode, wait=True, timeout=None):
        """Request a lock. Returns the LockRequest; with ``wait`` the call
        blocks until granted, otherwise the request stays queued and is
        granted later as holders release."""
        mode = Mode(mode)
        with self._cond:
            self._check_up()
            if txn.state is TxnState.DEAD:
                raise DeadTransaction(f"txn {txn.txn_id} is dead")
            if not txn.active:
                raise NotActive(f"txn {txn.txn_id} is {txn.state.value}")
            if txn.client not in self.connections:
                raise NotConnected(f"{txn.client} is not connected to {self.id}")
            self.requests += 1
            self.busy_seconds += self.service_delay
            self.requests_by_client[txn.client] += 1
            txn.last_heartbeat = self._now()

            req = LockRequest(txn, resource, mode, next(self._seq))
            entry = self._table.setdefault(resource, _Entry())
            held = entry.holders.get(txn.txn_id)
            if held is Mode.WRITE or (held is Mode.READ and mode is Mode.READ):
                req.granted = True
                return req
            if not entry.queue and self._compatible(entry, txn, mode):
                self._grant(entry, req)
                return req
            entry.queue.append(req)
            self.stalls += 1
            if not wait:
                return req
            ok = self._cond.wait_for(lambda: req.granted or not txn.active, timeout)
            if req.granted:
                return req
            self._cancel(req)
            if txn.state is TxnState.DEAD:
                raise DeadTransaction(f"txn {txn.txn_id} died while waiting")
            if not ok:
                raise TimeoutError(f"lock on {format_resource(resource)} not granted")
            raise NotActive(f"txn {txn.txn_id} ended while waiting")

    def wait(self, req, timeout=None):
        """Block until a queued request is granted."""
        with self._cond:
            self._cond.wait_for(lambda: req.granted or not req.txn.active, timeout)
            if not req.granted and req.txn.state is TxnState.DEAD:
                raise DeadTransaction(f"txn {req.txn.txn_id} died while waiting")
            return req.granted

    def commit(self, txn):
        with self._cond:
            if not txn.active:
                raise NotActive(f"txn {txn.txn_id} is {txn.state.value}")
            self._finish(txn, TxnState.COMMITTED)

    def abort(self, txn):
        with self._cond:
            if not txn.active:
                raise NotActive(f"txn {txn.txn_id} is {txn.state.value}")
            self._finish(txn, TxnState.ABORTED)

    def cleanup_dead(self, now=None, timeout=None):
        """Abort every active transaction whose heartbeat is older than
        ``timeout``; returns their ids in ascending order."""
        now = self._now() if now is None else now
        timeout = self.heartbeat_timeout if timeout is None else timeout
        with self._cond:
            stale = [t for t in self._txns.values()
                     if t.active and now - t.last_heartbeat > timeout]
            for txn in stale:
                txn.state = TxnState.DEAD
            for txn in stale:
                self._finish(txn, TxnState.DEAD)
            return sorted(t.txn_id for t in stale)

    # internals; caller holds the mutex

    @staticmethod
    def _compatible(entry, txn, mode):
        others = {tid: m for tid, m in entry.holders.items() if tid != txn.txn_id}
        if mode is Mode.WRITE:
            return not others
        return all(m is Mode.READ for m in others.values())

    def _grant(self, entry, req):
        entry.holders[req.txn.txn_id] = req.mode  # upgrades read -> write in place
        if req.resource not in req.txn.locks:
            req.txn.locks.append(req.resource)
        req.granted = True
        self.grant_log.append((req.seq, req.txn.txn_id, req.resource, req.mode))
        if req.mode is Mode.WRITE:
            self.write_grants[req.resource] += 1

    def _cancel(self, req):
        entry = self._table.get(req.resource)
        if entry is not None and req in entry.queue:
            entry.queue.remove(req)
            req.cancelled = True
            self._pump(req.resource)

    def _finish(self, txn, state):
        txn.state = state
        touched = set(txn.locks)
        for resource in txn.locks:
            entry = self._table.get(resource)
            if entry is not None:
                entry.holders.pop(txn.txn_id, None)
        txn.locks.clear()
        for resource, entry in self._table.items():
            kept = deque(r for r in entry.queue if r.txn is not txn)
            if len(kept) != len(entry.queue):
                for r in entry.queue:
                    if r.txn is txn:
                        r.cancelled = True
                entry.queue = kept
                touched.add(resource)
        for resource in touched:
            self._pump(resource)
        self._cond.notify_all()

    def _pump(self, resource):
        entry = self._table.get(resource)
        if entry is None:
            return
        while entry.queue:
            head = entry.queue[0]
            if not head.txn.active:
                entry.queue.popleft()
                head.cancelled = True
                continue
            if not self._compatible(entry, head.txn, head.mode):
                break
            entry.queue.popleft()
            self._grant(entry, head)
        if not entry.holders and not entry.queue:
            del self._table[resource]
        self._cond.notify_all()

    # inspection

    def lock_table(self):
        """Snapshot: resource -> (mode, sorted holder txn ids, queued count)."""
        with self._mutex:
            out = {}
            for resource, entry in self._table.items():
                if not entry.holders and not entry.queue:
                    continue
                mode = Mode.WRITE if entry.writer() is not None else Mode.READ
                out[resource] = (mode, tuple(sorted(entry.holders)), len(entry.queue))
            return out

    def transactions(self, state=None):
        with self._mutex:
            return [t for t in self._txns.values() if state is None or t.state is state]

    def active_writers(self, fed):
        """Active transactions holding a write lock on any resource of ``fed``."""
        with self._mutex:
            found = []
            for resource, entry in self._table.items():
                if resource_fed(resource) != fed:
                    continue
                for tid, mode in entry.holders.items():
                    if mode is Mode.WRITE and self._txns[tid].active:
                        found.append(self._txns[tid])
            return found

    def catalog_write_locks(self, fed):
        return self.write_grants[catalog_resource(fed)]

    def dump(self):
        lines = [f"LOCKSERVER {self.id} up={int(self.up)} connections={len(self.connections)}"
                 f"/{self.conn_cap} requests={self.requests}"]
        for resource, (mode, holders, queued) in sorted(
                self.lock_table().items(), key=lambda kv: format_resource(kv[0])):
            lines.append(f"{format_resource(resource)}\t{mode.value}\t"
                         f"{','.join(map(str, holders))}\tqueued={queued}")
        return "\n".join(lines) + "\n"

    # service supervision

    def is_up(self):
        return self.up

    def kill(self):
        """Simulated crash: every transaction dies and connections drop."""
        with self._cond:
            doomed = [t for t in self._txns.values() if t.active]
            for txn in doomed:
                txn.state = TxnState.DEAD
            for txn in doomed:
                self._finish(txn, TxnState.DEAD)
            self.connections.clear()
            self.up = False

    def restart(self):
        with self._mutex:
            self.up = True
        return True


class ClientSession:
    """Convenience wrapper: one connected client running one transaction at
    a time. Reads of readonly databases skip the lock server entirely."""

    def __init__(self, server, client):
        self.server = server
        self.client = server.connect(client)
        self.txn = None

    def begin(self):
        self.txn = self.server.begin(self.client)
        return self.txn

    def read_db(self, fed, entry):
        if entry.readonly:
            return None
        return self.server.acquire(self.txn, db_resource(fed, entry.id), Mode.READ)

    def write_db(self, fed, dbid):
        return self.server.acquire(self.txn, db_resource(fed, dbid), Mode.WRITE)

    def commit(self):
        self.server.commit(self.txn)
        self.txn = None

    def close(self):
        if self.txn is not None and self.txn.active:
            self.server.abort(self.txn)
        self.server.disconnect(self.client)
