"""Federation catalogs.

A Federation owns the catalog of database entries, the collection catalog,
the id space and the quiescence gate. A FederationStore keeps federations by
name, persists them as ``<fed>.cat`` / ``<fed>.col`` text files and lets
bridge federations find their daughters.

Database files live at ``<data_root>/<host>/<path>``; entries only carry the
host and the host-relative path.
"""

import dataclasses
import enum
import os
import threading
from contextlib import contextmanager
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

from fedstore import dbfile
from fedstore.errors import (
    ActiveTransactions,
    CapOutOfRange,
    CapTooLarge,
    DanglingRef,
    DuplicateFederation,
    DuplicateId,
    FedStoreError,
    IdExhausted,
    NotClosed,
    QuiescenceRequired,
    UnknownCollection,
    UnknownDatabase,
)
from fedstore.lockmgr import Mode, catalog_resource, db_resource

HARD_DB_CAP = 65535
PRACTICAL_DB_CAP = 16384


@dataclass(frozen=True)
class PolicyConstants:
    hard_db_cap: int = HARD_DB_CAP
    practical_db_cap: int = PRACTICAL_DB_CAP
    target_db_size: int = 500 * 1024
    lockserver_conn_cap: int = 1024
    purge_age_days: int = 10
    purge_usage_pct: float = 95

    def __post_init__(self):
        for f in dataclasses.fields(self):
            if getattr(self, f.name) <= 0:
                raise ValueError(f"{f.name} must be positive")
        if self.practical_db_cap > self.hard_db_cap:
            raise ValueError("practical_db_cap exceeds hard_db_cap")


POLICY = PolicyConstants()


class State(str, enum.Enum):
    EMPTY = "empty"
    IN_USE = "in_use"
    CLOSED = "closed"


class Role(str, enum.Enum):
    PRODUCTION = "production"
    ANALYSIS = "analysis"
    IMPORT = "import"
    CONDITIONS = "conditions"
    BRIDGE = "bridge"


def default_cap(role):
    return PRACTICAL_DB_CAP if Role(role) is Role.ANALYSIS else HARD_DB_CAP


@dataclass
class DbEntry:
    name: str
    host: str
    path: str
    state: State = State.EMPTY
    readonly: bool = False
    component: str = "micro"
    auth_level: int = 0
    mtime: int = 0
    size: int = 0
    id: int = 0

    def __post_init__(self):
        self.state = State(self.state)

    def clone(self):
        # shallow copy without dataclasses.replace's re-validation
        new = object.__new__(DbEntry)
        new.__dict__.update(self.__dict__)
        return new

    def check(self):
        if self.state is State.CLOSED and self.size <= 0:
            raise ValueError(f"{self.name}: closed database must have size > 0")
        if self.readonly and self.state is not State.CLOSED:
            raise ValueError(f"{self.name}: readonly database must be closed")
        for text in (self.name, self.host, self.path, self.component):
            if not text or "\t" in text or "\n" in text:
                raise ValueError(f"{self.name!r}: fields must be non-empty, without tabs")


@dataclass(frozen=True)
class CollectionRef:
    """A named collection. Exactly one of ``local`` (db ids), ``remote``
    (daughter fed, collection name) or ``span`` (several remote refs) is set."""

    name: str
    local: tuple = ()
    remote: tuple | None = None
    span: tuple = ()

    def __post_init__(self):
        if sum(bool(x) for x in (self.local, self.remote, self.span)) > 1:
            raise ValueError(f"collection {self.name!r} mixes location kinds")
        object.__setattr__(self, "local", tuple(self.local))
        object.__setattr__(self, "span", tuple(tuple(r) for r in self.span))
        if self.remote is not None:
            object.__setattr__(self, "remote", tuple(self.remote))

    @property
    def kind(self):
        if self.remote is not None:
            return "remote"
        if self.span:
            return "span"
        return "local"

    def encode(self):
        if self.kind == "remote":
            loc = f"remote:{self.remote[0]}/{self.remote[1]}"
        elif self.kind == "span":
            loc = "span:" + ";".join(f"{f}/{n}" for f, n in self.span)
        else:
            loc = "local:" + ",".join(str(i) for i in self.local)
        return f"{self.name}\t{loc}"

    @classmethod
    def decode(cls, line):
        name, loc = line.rstrip("\n").split("\t")
        kind, _, body = loc.partition(":")
        if kind == "local":
            return cls(name, local=tuple(int(x) for x in body.split(",") if x))
        if kind == "remote":
            fed, _, coll = body.partition("/")
            return cls(name, remote=(fed, coll))
        if kind == "span":
            return cls(name, span=tuple(tuple(part.split("/", 1)) for part in body.split(";")))
        raise ValueError(f"bad collection line: {line!r}")


class Resolved(NamedTuple):
    federations: tuple
    entries: list


class Federation:
    def __init__(self, name, role, id_cap=None, domain="", lockserver=None,
                 data_root=None, store=None, clock=None):
        role = Role(role)
        if id_cap is None:
            id_cap = default_cap(role)
        if id_cap > HARD_DB_CAP:
            raise CapTooLarge(f"id_cap {id_cap} exceeds {HARD_DB_CAP}")
        if id_cap < 1:
            raise CapOutOfRange(f"id_cap {id_cap} must be at least 1")
        self.name = name
        self.role = role
        self.id_cap = id_cap
        self.domain = domain
        self.lockserver = lockserver
        self.data_root = Path(data_root) if data_root is not None else None
        self.store = store
        self.clock = clock
        self.entries = {}
        self.collections = {}
        self.next_id = 1
        self.schema_version = 1
        self.auth = {}
        self.lockserver_id = lockserver.id if lockserver is not None else None

        self.scan_count = 0
        self.proxy_count = 0
        self.catalog_writes = 0
        self.opens = 0
        self.quiescent = False
        self.quiescent_seconds = 0
        self._quiesce_owner = None
        self._quiesced_at = None
        self._writer = threading.RLock()
        self._gate = threading.Condition()
        self._depth = 0
        self._catalog_txn = None
        self._by_name = {}
        self._by_loc = {}
        if lockserver is not None:
            lockserver.serving.add(name)

    def __repr__(self):
        return f"Federation({self.name!r}, {self.role.value}, entries={len(self.entries)})"

    def __eq__(self, other):
        if not isinstance(other, Federation):
            return NotImplemented
        return self.persistent_state() == other.persistent_state()

    __hash__ = None

    def persistent_state(self):
        return (self.name, self.role, self.id_cap, self.domain, self.next_id,
                self.schema_version, dict(self.entries), dict(self.collections), dict(self.auth))

    # locating files

    def locate(self, entry):
        if self.data_root is None:
            raise FedStoreError(f"{self.name}: no data_root configured")
        return self.data_root / entry.host / entry.path

    def get(self, dbid):
        try:
            return self.entries[dbid]
        except KeyError:
            raise UnknownDatabase(f"{self.name}: no database {dbid}") from None

    def by_name(self, name):
        dbid = self._by_name.get(name)
        return None if dbid is None else self.entries[dbid]

    # gates

    def _owns_quiesce(self):
        return self._quiesce_owner == threading.get_ident()

    def _wait_open(self, timeout=None):
        with self._gate:
            if not self._gate.wait_for(lambda: not self.quiescent or self._owns_quiesce(), timeout):
                raise TimeoutError(f"{self.name} stayed quiescent")

    @contextmanager
    def catalog_write(self, creates=False):
        """Single-writer section for catalog mutations. ``creates`` marks
        mutations that introduce databases or collections; those take the
        lock server's catalog write lock, once per outermost section."""
        self._wait_open()
        with self._writer:
            self._depth += 1
            try:
                if creates and self._catalog_txn is None and self.lockserver is not None:
                    self._catalog_txn = self._take_catalog_lock()
                yield
            finally:
                self._depth -= 1
                if self._depth == 0:
                    if self._catalog_txn is not None:
                        self.lockserver.commit(self._catalog_txn)
                        self._catalog_txn = None
                    self.catalog_writes += 1
                    if self.store is not None and self.store.autosave:
                        self.store.save(self)

    def _take_catalog_lock(self):
        server = self.lockserver
        client = server.connect(f"catalog:{self.name}")
        txn = server.begin(client)
        server.acquire(txn, catalog_resource(self.name), Mode.WRITE)
        return txn

    @contextmanager
    def batch(self):
        """Group mutations into one catalog section: one save, and at most
        one catalog write lock for whatever creates happen inside."""
        with self.catalog_write():
            yield self

    def quiesce(self):
        with self._gate:
            if self.quiescent and self._owns_quiesce():
                raise FedStoreError(f"{self.name} already quiesced by this caller")
            if self.lockserver is not None:
                writers = self.lockserver.active_writers(self.name)
                if writers:
                    raise ActiveTransactions(
                        f"{self.name}: {len(writers)} active write transactions")
            self._gate.wait_for(lambda: not self.quiescent)
            self.quiescent = True
            self._quiesce_owner = threading.get_ident()
            self._quiesced_at = self.clock.now if self.clock is not None else None

    def release(self):
        with self._gate:
            if not self.quiescent:
                return
            if self.clock is not None and self._quiesced_at is not None:
                self.quiescent_seconds += self.clock.now - self._quiesced_at
            self.quiescent = False
            self._quiesce_owner = None
            self._quiesced_at = None
            self._gate.notify_all()

    @contextmanager
    def quiesced(self):
        self.quiesce()
        try:
            yield self
        finally:
            self.release()

    def open_db(self, dbid, txn=None, timeout=None):
        """Client open. Stalls while the federation is quiescent. Writable
        databases take a read lock when ``txn`` is given; readonly ones
        never touch the lock server."""
        self._wait_open(timeout)
        entry = self.get(dbid)
        if not entry.readonly and txn is not None and self.lockserver is not None:
            self.lockserver.acquire(txn, db_resource(self.name, dbid), Mode.READ)
        self.opens += 1
        return entry

    # registration

    def _check_attach(self, entry):
        if self.role is Role.BRIDGE:
            raise FedStoreError(f"{self.name}: bridge federations hold no databases")
        if len(self.entries) >= self.id_cap or self.next_id > HARD_DB_CAP:
            raise IdExhausted(f"{self.name}: database ids exhausted at {len(self.entries)}")
        if entry.id and entry.id in self.entries:
            raise DuplicateId(f"{self.name}: id {entry.id} already in use")
        if entry.name in self._by_name:
            raise DuplicateId(f"{self.name}: database {entry.name!r} already registered")
        if (entry.host, entry.path) in self._by_loc:
            raise DuplicateId(f"{self.name}: {entry.host}:{entry.path} already registered")

    def _insert(self, entry):
        entry.check()
        if entry.id:
            if entry.id < self.next_id or entry.id > HARD_DB_CAP:
                raise DuplicateId(f"{self.name}: id {entry.id} not assignable")
            self.next_id = entry.id + 1
        else:
            entry.id = self.next_id
            self.next_id += 1
        self.entries[entry.id] = entry
        self._by_name[entry.name] = entry.id
        self._by_loc[(entry.host, entry.path)] = entry.id
        return entry.id

    def register(self, entry):
        """Metadata-only registration (no payload)."""
        entry = dataclasses.replace(entry)
        with self.catalog_write(creates=True):
            self._check_attach(entry)
            return self._insert(entry)

    def register_many(self, entries):
        """Metadata-only registration of many entries in one catalog
        section. Stops at the first entry that cannot be registered; the
        ones before it stay registered. Returns the new ids."""
        ids = []
        with self.catalog_write(creates=True):
            for entry in entries:
                entry = entry.clone()
                self._check_attach(entry)
                ids.append(self._insert(entry))
        return ids

    def attach_db(self, entry, source=None, expected_crc=None):
        """Attach with the full integrity scan of ``source``; the file is
        placed at the entry's location and its size recorded."""
        entry = dataclasses.replace(entry)
        with self.catalog_write(creates=True):
            self._check_attach(entry)
            if source is not None:
                self.scan_count += 1
                entry.size = dbfile.verify(source, expected_crc)
                dest = self.locate(entry)
                if Path(source).resolve() != dest.resolve():
                    dbfile.atomic_copy(source, dest)
            return self._insert(entry)

    def attach_by_proxy(self, entry, source=None):
        """Attach a zero-content placeholder (no scan), then swap in the
        real file. The final catalog state matches attach_db."""
        entry = dataclasses.replace(entry)
        with self.catalog_write(creates=True):
            self._check_attach(entry)
            if source is not None:
                entry.size = os.stat(source).st_size
                dest = self.locate(entry)
                if Path(source).resolve() == dest.resolve():
                    raise ValueError("proxy attach needs a source outside the target location")
                dbfile.write_placeholder(dest)
            dbid = self._insert(entry)
            if source is not None:
                dbfile.atomic_copy(source, dest)
            self.proxy_count += 1
            return dbid

    def detach(self, dbid):
        with self.catalog_write():
            entry = self.get(dbid)
            if entry.readonly and not self._owns_quiesce():
                raise QuiescenceRequired(f"{self.name}: {entry.name} is readonly")
            del self.entries[dbid]
            del self._by_name[entry.name]
            del self._by_loc[(entry.host, entry.path)]
            return entry

    def update_entry(self, dbid, **changes):
        with self.catalog_write():
            entry = self.get(dbid)
            if entry.readonly and not self._owns_quiesce():
                raise QuiescenceRequired(f"{self.name}: {entry.name} is readonly")
            updated = dataclasses.replace(entry, **changes)
            updated.check()
            loc = (updated.host, updated.path)
            if loc != (entry.host, entry.path):
                if loc in self._by_loc:
                    raise DuplicateId(f"{self.name}: {loc[0]}:{loc[1]} already registered")
                del self._by_loc[(entry.host, entry.path)]
                self._by_loc[loc] = dbid
            if updated.name != entry.name:
                raise ValueError("database names are immutable")
            self.entries[dbid] = updated
            return updated

    def close_db(self, dbid, size, mtime):
        return self.update_entry(dbid, state=State.CLOSED, size=size, mtime=mtime)

    def set_readonly(self, dbid):
        with self.catalog_write():
            entry = self.get(dbid)
            if entry.state is not State.CLOSED:
                raise NotClosed(f"{self.name}: {entry.name} is {entry.state.value}")
            if entry.readonly:
                return entry
            updated = dataclasses.replace(entry, readonly=True)
            self.entries[dbid] = updated
            return updated

    # collections

    def register_collection(self, ref):
        with self.catalog_write(creates=True):
            if ref.kind == "local":
                if self.role is Role.BRIDGE:
                    raise DanglingRef(f"{self.name}: bridge collections must point at daughters")
                missing = [i for i in ref.local if i not in self.entries]
                if missing:
                    raise DanglingRef(f"{ref.name}: unknown db ids {missing}")
            else:
                if self.role is not Role.BRIDGE:
                    raise DanglingRef(f"{self.name}: remote refs only allowed in bridges")
                targets = [ref.remote] if ref.kind == "remote" else list(ref.span)
                for fed, coll in targets:
                    daughter = self.store.get(fed) if self.store is not None else None
                    if daughter is None:
                        raise DanglingRef(f"{ref.name}: no daughter federation {fed!r}")
                    if daughter.role is Role.BRIDGE:
                        raise DanglingRef(f"{ref.name}: bridge chains are not supported")
                    if coll not in daughter.collections:
                        raise DanglingRef(f"{ref.name}: {fed} has no collection {coll!r}")
            self.collections[ref.name] = ref

    def resolve_collection(self, name):
        """Return the federations and entries behind a collection, following
        at most one hop into daughter federations."""
        ref = self.collections.get(name)
        if ref is None:
            raise UnknownCollection(f"{self.name}: no collection {name!r}")
        if ref.kind == "local":
            return Resolved((self.name,), [self.entries[i] for i in ref.local])
        targets = [ref.remote] if ref.kind == "remote" else list(ref.span)
        feds, entries = [], []
        for fed, coll in targets:
            daughter = self.store.get(fed) if self.store is not None else None
            if daughter is None:
                raise DanglingRef(f"{name}: daughter {fed!r} vanished")
            dref = daughter.collections.get(coll)
            if dref is None or dref.kind != "local":
                raise UnknownCollection(f"{fed}: no local collection {coll!r}")
            feds.append(fed)
            entries.extend(daughter.entries[i] for i in dref.local)
        return Resolved(tuple(feds), entries)

    # catalog file format

    def catalog_text(self):
        lines = [f"FEDCAT v1 {self.role.value} {self.id_cap}",
                 f"#domain={self.domain}",
                 f"#next_id={self.next_id}",
                 f"#schema_version={self.schema_version}"]
        if self.lockserver is not None:
            lines.append(f"#lockserver={self.lockserver.id}")
        for dbid in sorted(self.entries):
            e = self.entries[dbid]
            lines.append("\t".join([str(e.id), e.name, e.host, e.path, e.state.value,
                                    str(int(e.readonly)), e.component, str(e.auth_level),
                                    str(e.mtime), str(e.size)]))
        return "\n".join(lines) + "\n"

    def collections_text(self):
        return "".join(self.collections[n].encode() + "\n" for n in sorted(self.collections))

    def auth_text(self):
        return "".join(f"{user}\t{level}\n" for user, level in sorted(self.auth.items()))

    @classmethod
    def from_text(cls, name, cat_text, col_text="", auth_text="", **kwargs):
        lines = cat_text.splitlines()
        head = lines[0].split()
        if head[:2] != ["FEDCAT", "v1"] or len(head) != 4:
            raise ValueError(f"{name}: bad catalog header {lines[0]!r}")
        meta = {}
        rows = []
        for line in lines[1:]:
            if line.startswith("#"):
                key, _, value = line[1:].partition("=")
                meta[key] = value
            elif line:
                rows.append(line)
        fed = cls(name, head[2], int(head[3]), domain=meta.get("domain", ""), **kwargs)
        for line in rows:
            f = line.split("\t")
            entry = DbEntry(name=f[1], host=f[2], path=f[3], state=State(f[4]),
                            readonly=f[5] == "1", component=f[6], auth_level=int(f[7]),
                            mtime=int(f[8]), size=int(f[9]), id=int(f[0]))
            fed.entries[entry.id] = entry
            fed._by_name[entry.name] = entry.id
            fed._by_loc[(entry.host, entry.path)] = entry.id
        fed.next_id = int(meta.get("next_id", max(fed.entries, default=0) + 1))
        fed.schema_version = int(meta.get("schema_version", 1))
        for line in col_text.splitlines():
            if line and not line.startswith("#"):
                ref = CollectionRef.decode(line)
                fed.collections[ref.name] = ref
        for line in auth_text.splitlines():
            if line:
                user, level = line.split("\t")
                fed.auth[user] = int(level)
        fed.lockserver_id = meta.get("lockserver") or fed.lockserver_id
        return fed


def catalog_diff(source, dest, state=None, predicate=None):
    """Entries of ``source`` whose name is absent from ``dest``, in source
    id order, optionally restricted by state and a predicate."""
    state = State(state) if state is not None else None
    present = set(dest._by_name)
    out = []
    for dbid in sorted(source.entries):
        e = source.entries[dbid]
        if e.name in present:
            continue
        if state is not None and e.state is not state:
            continue
        if predicate is not None and not predicate(e):
            continue
        out.append(e)
    return out


class FederationStore:
    """All federations of one site, persisted under ``root``."""

    def __init__(self, root=None, data_root=None, clock=None, autosave=True):
        self.root = Path(root) if root is not None else None
        self.data_root = Path(data_root) if data_root is not None else None
        self.clock = clock
        self.autosave = autosave and self.root is not None
        self.feds = {}
        if self.root is not None:
            self.root.mkdir(parents=True, exist_ok=True)

    def __contains__(self, name):
        return name in self.feds

    def __getitem__(self, name):
        return self.feds[name]

    def __iter__(self):
        return iter(sorted(self.feds))

    def get(self, name):
        return self.feds.get(name)

    def federations(self):
        return [self.feds[n] for n in sorted(self.feds)]

    def create_federation(self, name, role, id_cap=None, domain="", lockserver=None):
        if name in self.feds or (self.root is not None and (self.root / f"{name}.cat").exists()):
            raise DuplicateFederation(f"federation {name!r} exists")
        if not name or any(c in name for c in "/\t\n "):
            raise ValueError(f"bad federation name {name!r}")
        fed = Federation(name, role, id_cap, domain=domain, lockserver=lockserver,
                         data_root=self.data_root, store=self, clock=self.clock)
        self.feds[name] = fed
        if self.root is not None:
            self.save(fed)
        return fed

    def save(self, fed):
        if self.root is None:
            return
        dbfile.atomic_write(self.root / f"{fed.name}.cat", fed.catalog_text().encode())
        dbfile.atomic_write(self.root / f"{fed.name}.col", fed.collections_text().encode())
        if fed.auth:
            dbfile.atomic_write(self.root / f"{fed.name}.auth", fed.auth_text().encode())

    def load(self, name, lockservers=None):
        cat = (self.root / f"{name}.cat").read_text()
        col_path = self.root / f"{name}.col"
        auth_path = self.root / f"{name}.auth"
        fed = Federation.from_text(
            name, cat,
            col_path.read_text() if col_path.exists() else "",
            auth_path.read_text() if auth_path.exists() else "",
            data_root=self.data_root, store=self, clock=self.clock)
        if lockservers and fed.lockserver_id in lockservers:
            fed.lockserver = lockservers[fed.lockserver_id]
            fed.lockserver.serving.add(name)
        self.feds[name] = fed
        return fed

    def load_all(self, lockservers=None):
        for path in sorted(self.root.glob("*.cat")):
            self.load(path.stem, lockservers)
        return self.federations()


def create_federation(store, name, role, id_cap=None, **kwargs):
    return store.create_federation(name, role, id_cap, **kwargs)
