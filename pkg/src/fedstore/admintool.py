"""Administration pipeline: select databases, write one command file per
operation, execute the files in order with bounded parallel streams.
Also the periodic maintenance tasks and the service monitor."""

import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

from fedstore import dbfile, storage
from fedstore.errors import (
    ActiveTransactions,
    FedStoreError,
    MalformedCriteria,
    NotPaused,
    UnknownOperation,
)
from fedstore.fedcat import State
from fedstore.prodsys import conditions_snapshot
from fedstore.storage import mss_key

ATTRIBUTES = ("name", "dbid", "host", "domain", "auth_level", "component", "readonly", "state")

PENDING, OK, FAILED = "pending", "ok", "failed"

_TRUE = {"true", "1", "yes", "y"}
_FALSE = {"false", "0", "no", "n"}


def _canon(attr, value):
    if attr == "readonly":
        if isinstance(value, bool):
            return "true" if value else "false"
        v = str(value).lower()
        if v in _TRUE:
            return "true"
        if v in _FALSE:
            return "false"
        raise MalformedCriteria(f"readonly expects a boolean, got {value!r}")
    if attr == "state":
        v = value.value if isinstance(value, State) else str(value)
        if v not in {s.value for s in State}:
            raise MalformedCriteria(f"unknown state {value!r}")
        return v
    if attr in ("dbid", "auth_level"):
        try:
            return str(int(value))
        except (TypeError, ValueError):
            raise MalformedCriteria(f"{attr} expects an integer, got {value!r}") from None
    return str(value)


def entry_attr(fed, entry, attr):
    if attr == "dbid":
        return str(entry.id)
    if attr == "domain":
        return fed.domain
    return _canon(attr, getattr(entry, attr))


@dataclass
class SelectionCriteria:
    """Include/exclude sets per attribute plus an mtime window. ``after``
    is inclusive and ``before`` exclusive."""

    include: dict = field(default_factory=dict)
    exclude: dict = field(default_factory=dict)
    after: int | None = None
    before: int | None = None

    def __post_init__(self):
        for side in (self.include, self.exclude):
            for attr in list(side):
                if attr not in ATTRIBUTES:
                    raise MalformedCriteria(f"unknown attribute {attr!r}")
                vals = side[attr]
                if isinstance(vals, (str, int, bool, State)):
                    vals = [vals]
                side[attr] = frozenset(_canon(attr, v) for v in vals)
        for attr in set(self.include) & set(self.exclude):
            both = self.include[attr] & self.exclude[attr]
            if both:
                raise MalformedCriteria(f"{attr}: {sorted(both)} both included and excluded")
        if self.after is not None and self.before is not None and self.after >= self.before:
            raise MalformedCriteria(f"empty mtime window [{self.after}, {self.before})")

    @classmethod
    def parse(cls, include=(), exclude=(), after=None, before=None):
        """Build from ``attr=v1,v2`` strings as given on the command line."""

        def split(items):
            out = {}
            for item in items:
                if "=" not in item:
                    raise MalformedCriteria(f"expected attr=values, got {item!r}")
                attr, vals = item.split("=", 1)
                out.setdefault(attr.strip(), set()).update(v for v in vals.split(",") if v)
            return out

        return cls(split(include), split(exclude),
                   None if after is None else int(after), None if before is None else int(before))

    def matches(self, fed, entry):
        for attr, vals in self.include.items():
            if entry_attr(fed, entry, attr) not in vals:
                return False
        for attr, vals in self.exclude.items():
            if entry_attr(fed, entry, attr) in vals:
                return False
        if self.after is not None and entry.mtime < self.after:
            return False
        if self.before is not None and entry.mtime >= self.before:
            return False
        return True


@dataclass(frozen=True)
class Selected:
    fed: str
    entry: object


def select_databases(feds, criteria=None):
    criteria = criteria or SelectionCriteria()
    out = []
    for fed in sorted(feds, key=lambda f: f.name):
        for dbid in sorted(fed.entries):
            e = fed.entries[dbid]
            if criteria.matches(fed, e):
                out.append(Selected(fed.name, e))
    return out


def selection_text(selection):
    return "".join(f"{s.fed}\t{s.entry.id}\t{s.entry.host}\t{s.entry.name}\n" for s in selection)


def parse_selection(text, store):
    out = []
    for line in text.splitlines():
        if not line.strip() or line.startswith("#"):
            continue
        fed, dbid = line.split("\t")[:2]
        out.append(Selected(fed, store[fed].get(int(dbid))))
    return out


# operations

@dataclass
class AdminContext:
    """Everything an operation may touch."""

    store: object
    servers: dict
    mss: object
    clock: object
    backup_dir: Path | None = None
    fail: object = None  # optional hook(line) -> bool, for fault injection


@dataclass(frozen=True)
class Operation:
    name: str
    run: object
    host_affine: bool = True
    outage: bool = False
    cost: int = 1


def _server(ctx, line):
    try:
        return ctx.servers[line.host]
    except KeyError:
        raise FedStoreError(f"no data server on {line.host}") from None


def _op_stage(ctx, fed, entry, line):
    _server(ctx, line).open_read(entry.path).close()


def _op_purge(ctx, fed, entry, line):
    srv = _server(ctx, line)
    if mss_key(entry.path) not in ctx.mss:
        raise FedStoreError(f"{entry.name} is not archived")
    srv.delete(entry.path)


def _op_migrate(ctx, fed, entry, line):
    _server(ctx, line).close_and_migrate(entry.path, purge=False)


def _op_relocate(ctx, fed, entry, line):
    if not line.args:
        raise FedStoreError("relocate needs a target host")
    storage.relocate(fed, _server(ctx, line), ctx.servers[line.args], entry.id)


def _op_set_readonly(ctx, fed, entry, line):
    fed.set_readonly(entry.id)


def _op_checksum(ctx, fed, entry, line):
    srv = _server(ctx, line)
    key = mss_key(entry.path)
    expected = ctx.mss.checksum(key) if key in ctx.mss else None
    if srv.on_disk(entry.path):
        dbfile.verify(srv.full_path(entry.path), expected)
    elif expected is None:
        raise FedStoreError(f"{entry.name} is neither on disk nor archived")
    else:
        ctx.mss.verify(key)


def _op_backup(ctx, fed, entry, line):
    if ctx.backup_dir is None:
        raise FedStoreError("no backup directory configured")
    srv = _server(ctx, line)
    dest = Path(ctx.backup_dir) / fed.name / mss_key(entry.path)
    if srv.on_disk(entry.path):
        dbfile.atomic_copy(srv.full_path(entry.path), dest)
    else:
        ctx.mss.retrieve(mss_key(entry.path), dest)


OPERATIONS = {
    "stage": Operation("stage", _op_stage, cost=30),
    "purge": Operation("purge", _op_purge),
    "migrate": Operation("migrate", _op_migrate, cost=20),
    "relocate": Operation("relocate", _op_relocate, host_affine=False, outage=True, cost=60),
    "set_readonly": Operation("set_readonly", _op_set_readonly, host_affine=False),
    "checksum": Operation("checksum", _op_checksum, cost=10),
    "backup": Operation("backup", _op_backup, cost=20),
}


def operation(name):
    try:
        return OPERATIONS[name]
    except KeyError:
        raise UnknownOperation(f"unknown operation {name!r}; known: {', '.join(OPERATIONS)}") from None


# command files

@dataclass
class CommandLine:
    host: str
    fed: str
    dbid: int
    args: str = ""
    status: str = PENDING


@dataclass
class CommandFile:
    op: str
    lines: list = field(default_factory=list)
    path: Path | None = None

    def text(self):
        out = [f"#OP {self.op}"]
        out += [f"{ln.host}\t{ln.fed}\t{ln.dbid}\t{ln.args}" for ln in self.lines]
        if any(ln.status != PENDING for ln in self.lines):
            out += [f"#STATUS {i} {ln.status}" for i, ln in enumerate(self.lines)]
        return "\n".join(out) + "\n"

    def save(self, path=None):
        if path is not None:
            self.path = Path(path)
        if self.path is not None:
            dbfile.atomic_write(self.path, self.text().encode())
        return self.path

    @classmethod
    def parse(cls, text, path=None):
        cf, statuses = None, {}
        for raw in text.splitlines():
            if raw.startswith("#OP "):
                if cf is not None:
                    raise FedStoreError("one operation per command file")
                cf = cls(operation(raw[4:].strip()).name, path=path)
            elif raw.startswith("#STATUS "):
                _, idx, status = raw.split()
                statuses[int(idx)] = status
            elif not raw.strip() or raw.startswith("#"):
                continue
            else:
                if cf is None:
                    raise FedStoreError("command file lacks an #OP header")
                f = raw.split("\t")
                cf.lines.append(CommandLine(f[0], f[1], int(f[2]), f[3] if len(f) > 3 else ""))
        if cf is None:
            raise FedStoreError("command file lacks an #OP header")
        for i, s in statuses.items():
            if i < len(cf.lines):
                cf.lines[i].status = s
        return cf

    @classmethod
    def load(cls, path):
        return cls.parse(Path(path).read_text(), path=Path(path))


def build_command_files(selection, operations, args=None):
    """One command file per operation, in the order given. Pure: nothing is
    executed or written. ``args`` maps operation name to its argument."""
    args = args or {}
    files = []
    for name in operations:
        op = operation(name)
        cf = CommandFile(op.name)
        for s in selection:
            cf.lines.append(CommandLine(s.entry.host, s.fed, s.entry.id, args.get(op.name, "")))
        files.append(cf)
    return files


def write_command_files(files, directory):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    return [cf.save(directory / f"{i:02d}-{cf.op}.cmd") for i, cf in enumerate(files, start=1)]


@dataclass
class FileReport:
    op: str
    attempted: int = 0
    succeeded: int = 0
    failed: int = 0
    streams: int = 1
    max_concurrent: int = 0
    per_host: dict = field(default_factory=dict)  # host -> [ok, failed]
    errors: list = field(default_factory=list)
    quiescent_seconds: int = 0


@dataclass
class ExecutionReport:
    files: list = field(default_factory=list)

    @property
    def attempted(self):
        return sum(f.attempted for f in self.files)

    @property
    def succeeded(self):
        return sum(f.succeeded for f in self.files)

    @property
    def failed(self):
        return sum(f.failed for f in self.files)

    def text(self):
        out = ["op,attempted,succeeded,failed,streams,max_concurrent"]
        for f in self.files:
            out.append(f"{f.op},{f.attempted},{f.succeeded},{f.failed},{f.streams},{f.max_concurrent}")
        return "\n".join(out) + "\n"


class _Gauge:
    def __init__(self, limit):
        self.sem = threading.Semaphore(limit)
        self.lock = threading.Lock()
        self.now = 0
        self.peak = 0

    def __enter__(self):
        self.sem.acquire()
        with self.lock:
            self.now += 1
            self.peak = max(self.peak, self.now)

    def __exit__(self, *exc):
        with self.lock:
            self.now -= 1
        self.sem.release()


def _run_line(ctx, op, line):
    fed = ctx.store[line.fed]
    entry = fed.get(line.dbid)
    if ctx.fail is not None and ctx.fail(line):
        raise FedStoreError("injected failure")
    if op.outage:
        fed.quiesce()
        start = ctx.clock.now
        try:
            op.run(ctx, fed, entry, line)
            ctx.clock.advance(op.cost)
        finally:
            fed.release()
        return ctx.clock.now - start
    op.run(ctx, fed, entry, line)
    ctx.clock.advance(op.cost)
    return 0


def execute_plan(files, ctx, streams=1):
    """Run command files strictly in order. Within a file at most
    ``streams`` lines run at once (an int, or a dict per operation);
    host-affine lines go to their host's executor. Lines already ok are
    skipped, so a rerun only retries failed and pending lines. Outage
    operations quiesce their federation around each line and run one at a
    time."""
    report = ExecutionReport()
    for cf in files:
        op = operation(cf.op)
        n = streams.get(cf.op, 1) if isinstance(streams, dict) else streams
        if n < 1:
            raise ValueError("streams must be at least 1")
        if op.outage:
            n = 1
        fr = FileReport(op.name, streams=n)
        todo = [ln for ln in cf.lines if ln.status != OK]
        gauge = _Gauge(n)
        pools = {}
        lock = threading.Lock()

        def work(line):
            with gauge:
                try:
                    q = _run_line(ctx, op, line)
                    status, err = OK, None
                except Exception as exc:
                    q, status, err = 0, FAILED, f"{line.fed}:{line.dbid}: {exc}"
            with lock:
                line.status = status
                counts = fr.per_host.setdefault(line.host, [0, 0])
                counts[0 if status == OK else 1] += 1
                fr.quiescent_seconds += q
                if err:
                    fr.errors.append(err)

        def pool_for(line):
            key = line.host if op.host_affine else "*"
            if key not in pools:
                pools[key] = ThreadPoolExecutor(max_workers=n, thread_name_prefix=f"exec-{key}")
            return pools[key]

        try:
            futures = [pool_for(ln).submit(work, ln) for ln in todo]
            for fut in futures:
                fut.result()
        finally:
            for p in pools.values():
                p.shutdown(wait=True)
        fr.attempted = len(todo)
        fr.succeeded = sum(1 for ln in todo if ln.status == OK)
        fr.failed = fr.attempted - fr.succeeded
        fr.max_concurrent = gauge.peak
        fr.errors.sort()
        cf.save()
        report.files.append(fr)
    return report


# maintenance

@dataclass
class MaintenanceReport:
    schedule: str
    schema_versions: dict = field(default_factory=dict)
    snapshot: list | None = None
    snapshot_skipped: str = ""
    auth_rewritten: list = field(default_factory=list)
    backups: dict = field(default_factory=dict)
    retries: dict = field(default_factory=dict)
    refused: dict = field(default_factory=dict)


@dataclass
class ConditionsLink:
    pc_fed: object
    cond_fed: object
    control: object
    cond_server: object
    pc_server: object = None


def _backup_catalog(fed, backup_dir, clock):
    """Copy the catalog while the federation is quiesced. Returns the path
    of the snapshot."""
    stamp = clock.now if clock is not None else 0
    dest = Path(backup_dir) / f"{fed.name}.{stamp}.cat"
    with fed.quiesced():
        dbfile.atomic_write(dest, fed.catalog_text().encode())
        dbfile.atomic_write(dest.with_suffix(".col"), fed.collections_text().encode())
    return dest


def run_maintenance(feds, schedule, clock=None, backup_dir=None, conditions=None, auth=None):
    """daily: schema version bump everywhere plus the conditions snapshot.
    weekly: additionally rewrite authorization tables and back up every
    catalog under quiescence. A backup refused for active writers is
    retried once after dead transactions are cleaned up."""
    if schedule not in ("daily", "weekly"):
        raise ValueError(f"unknown schedule {schedule!r}")
    rep = MaintenanceReport(schedule)
    feds = sorted(feds, key=lambda f: f.name)
    for fed in feds:
        with fed.catalog_write():
            fed.schema_version += 1
        rep.schema_versions[fed.name] = fed.schema_version
    if conditions is not None:
        c = conditions
        try:
            rep.snapshot = conditions_snapshot(c.pc_fed, c.cond_fed, c.control, c.cond_server,
                                               pc_server=c.pc_server)
        except NotPaused as exc:
            rep.snapshot_skipped = str(exc)
    if schedule == "weekly":
        for fed in feds:
            if auth is not None:
                with fed.catalog_write():
                    fed.auth = dict(auth.get(fed.name, fed.auth))
                rep.auth_rewritten.append(fed.name)
            if backup_dir is None:
                continue
            try:
                rep.backups[fed.name] = _backup_catalog(fed, backup_dir, clock)
            except ActiveTransactions:
                cleaned = fed.lockserver.cleanup_dead() if fed.lockserver is not None else []
                rep.retries[fed.name] = cleaned
                try:
                    rep.backups[fed.name] = _backup_catalog(fed, backup_dir, clock)
                except ActiveTransactions as exc:
                    rep.refused[fed.name] = str(exc)
    return rep


# monitoring

RESTARTABLE = frozenset({"dataserver", "lockserver"})
PROBE_INTERVAL = 30


class Host:
    """A machine without a restartable daemon; it can only be reported."""

    kind = "host"

    def __init__(self, name):
        self.name = name
        self.up = True

    def is_up(self):
        return self.up

    def kill(self):
        self.up = False


def service_name(svc):
    for attr in ("host", "id", "name"):
        v = getattr(svc, attr, None)
        if v is not None and not callable(v):
            return str(v)
    return repr(svc)


@dataclass(frozen=True)
class Incident:
    time: int
    kind: str
    name: str
    action: str
    outcome: str

    def line(self):
        return f"{self.time}\t{self.kind}\t{self.name}\t{self.action}\t{self.outcome}"


def monitor_hosts(inventory, clock, log_path=None, restartable=RESTARTABLE):
    """Probe every service once. Down daemons of a restartable kind are
    restarted; everything else is reported. Incidents are appended to the
    log as tab-separated lines."""
    incidents = []
    for svc in inventory:
        if svc.is_up():
            continue
        kind = getattr(svc, "kind", "host")
        if kind in restartable:
            svc.restart()
            inc = Incident(clock.now, kind, service_name(svc), "restart",
                           "up" if svc.is_up() else "down")
        else:
            inc = Incident(clock.now, kind, service_name(svc), "report", "down")
        incidents.append(inc)
    if log_path is not None and incidents:
        log_path = Path(log_path)
        log_path.parent.mkdir(parents=True, exist_ok=True)
        with open(log_path, "a") as fh:
            fh.writelines(i.line() + "\n" for i in incidents)
    return incidents

