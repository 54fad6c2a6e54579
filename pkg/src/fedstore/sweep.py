"""Production to analysis sweeps.

plan -> execute (copy + attach by proxy) -> qa -> publish. Every step
rewrites the job journal, so a failed or interrupted job can be reloaded
and resumed; only entries still pending are copied again.
"""

import shutil
import tempfile
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

from fedstore import dbfile
from fedstore.errors import CopyFailure, FedStoreError, IntegrityFailure, SweepBusy
from fedstore.fedcat import CollectionRef, DbEntry, State, catalog_diff
from fedstore.storage import mss_key

PENDING = "pending"
COPIED = "copied"
QA_PASS = "qa_pass"
QA_FAIL = "qa_fail"
PUBLISHED = "published"
STATUSES = (PENDING, COPIED, QA_PASS, QA_FAIL, PUBLISHED)

_job_locks = {}
_job_locks_guard = threading.Lock()


def _pair_lock(source, dest):
    with _job_locks_guard:
        return _job_locks.setdefault((source, dest), threading.Lock())


@dataclass
class SweepEnv:
    """What a sweep needs to touch: federations, servers by host, the mass
    store and the clock. ``placement`` lists the analysis servers new data
    is spread over."""

    store: object
    servers: dict
    mss: object
    clock: object
    placement: list = field(default_factory=list)
    load_cost: int = 60
    load_delay: float = 0.0
    snapshot_cost: int = 0


@dataclass
class SweepJob:
    name: str
    source: str
    dest: str
    bridge: str | None = None
    candidates: list = field(default_factory=list)
    status: dict = field(default_factory=dict)
    hosts: dict = field(default_factory=dict)
    crcs: dict = field(default_factory=dict)
    collections: dict = field(default_factory=dict)  # name -> [member db names]
    collection_status: dict = field(default_factory=dict)
    published_at: dict = field(default_factory=dict)
    qa: dict = field(default_factory=dict)
    failures: dict = field(default_factory=dict)
    outage: tuple | None = None
    path: Path | None = None

    def names(self, status):
        return [n for n in self.candidates if self.status[n] == status]

    @property
    def copied(self):
        return [n for n in self.candidates if self.status[n] != PENDING]

    @property
    def qa_passed(self):
        return [n for n in self.candidates if self.status[n] in (QA_PASS, PUBLISHED)]

    @property
    def published(self):
        return [c for c in self.collections if self.collection_status[c] == PUBLISHED]

    def bytes_copied(self, store):
        dest = store[self.dest]
        return sum(dest.by_name(n).size for n in self.copied if dest.by_name(n) is not None)

    # journal

    def journal_text(self):
        lines = [f"SWEEP v1 {self.source} {self.dest} {self.bridge or '-'}"]
        if self.outage is not None:
            lines.append(f"#outage\t{self.outage[0]}\t{self.outage[1]}")
        for n in self.candidates:
            crc = self.crcs.get(n)
            lines.append("\t".join(["db", n, self.status[n], self.hosts.get(n, "-"),
                                    "-" if crc is None else f"{crc:016x}"]))
        for c, members in self.collections.items():
            lines.append("\t".join(["col", c, self.collection_status[c],
                                    str(self.published_at.get(c, "-")), ",".join(members)]))
        return "\n".join(lines) + "\n"

    def save(self):
        if self.path is not None:
            dbfile.atomic_write(self.path, self.journal_text().encode())

    @classmethod
    def load(cls, path):
        path = Path(path)
        lines = path.read_text().splitlines()
        head = lines[0].split()
        if head[:2] != ["SWEEP", "v1"]:
            raise FedStoreError(f"{path}: not a sweep journal")
        job = cls(path.stem, head[2], head[3], None if head[4] == "-" else head[4], path=path)
        for line in lines[1:]:
            f = line.split("\t")
            if f[0] == "#outage":
                job.outage = (int(f[1]), int(f[2]))
            elif f[0] == "db":
                job.candidates.append(f[1])
                job.status[f[1]] = f[2]
                if f[3] != "-":
                    job.hosts[f[1]] = f[3]
                if f[4] != "-":
                    job.crcs[f[1]] = int(f[4], 16)
            elif f[0] == "col":
                job.collections[f[1]] = f[4].split(",") if f[4] else []
                job.collection_status[f[1]] = f[2]
                if f[3] != "-":
                    job.published_at[f[1]] = int(f[3])
        return job


def plan_sweep(source, dest, bridge=None, journal_dir=None, name=None):
    """Closed databases in ``source`` missing from ``dest``, plus the source
    collections that become complete in ``dest`` once they are copied."""
    candidates = catalog_diff(source, dest, state=State.CLOSED)
    job = SweepJob(name or f"{source.name}-to-{dest.name}", source.name, dest.name,
                   bridge.name if bridge is not None else None)
    job.candidates = [e.name for e in candidates]
    job.status = {n: PENDING for n in job.candidates}
    incoming = set(job.candidates)
    for cname in sorted(source.collections):
        ref = source.collections[cname]
        if ref.kind != "local" or cname in dest.collections:
            continue
        members = [source.entries[i] for i in ref.local]
        if not members or any(m.state is not State.CLOSED for m in members):
            continue
        names = [m.name for m in members]
        if not any(n in incoming for n in names):
            continue
        if all(n in incoming or dest.by_name(n) is not None for n in names):
            job.collections[cname] = names
            job.collection_status[cname] = PENDING
    if journal_dir is not None:
        job.path = Path(journal_dir) / f"{job.name}.sweep"
        job.save()
    return job


def _source_crc(entry, env):
    key = mss_key(entry.path)
    if key in env.mss:
        return env.mss.checksum(key)
    return None


def _fetch(entry, source_fed, env, dest):
    server = env.servers.get(entry.host)
    if server is not None and server.on_disk(entry.path):
        dbfile.atomic_copy(server.full_path(entry.path), dest)
    elif source_fed.data_root is not None and source_fed.locate(entry).exists():
        dbfile.atomic_copy(source_fed.locate(entry), dest)
    else:
        env.mss.retrieve(mss_key(entry.path), dest)


def execute_sweep(job, env, streams=1, fail=(), copier=None):
    """Copy every pending candidate to its analysis server and attach it by
    proxy. Copies may run in ``streams`` parallel streams; attaches happen
    in candidate order. Raises CopyFailure after finishing everything else
    if any entry failed; rerunning the job retries only those."""
    lock = _pair_lock(job.source, job.dest)
    if not lock.acquire(blocking=False):
        raise SweepBusy(f"a sweep {job.source} -> {job.dest} is already running")
    try:
        source = env.store[job.source]
        dest = env.store[job.dest]
        with source._writer:
            start = env.clock.now
            snapshot = {n: source.by_name(n) for n in job.candidates}
            if env.snapshot_cost:
                env.clock.advance(env.snapshot_cost)
            job.outage = (start, env.clock.now)
        if not env.placement:
            raise FedStoreError("no analysis servers to place data on")
        for i, n in enumerate(job.candidates):
            job.hosts.setdefault(n, env.placement[i % len(env.placement)].host)

        todo = [n for n in job.candidates if job.status[n] == PENDING]
        job.failures = {}
        scratch = Path(tempfile.mkdtemp(prefix="sweep-"))
        copier = copier or _fetch

        def copy_one(n):
            if n in fail:
                raise CopyFailure(job, [n])
            entry = snapshot[n]
            if entry is None:
                raise FedStoreError(f"{n} vanished from {job.source}")
            tmp = scratch / mss_key(entry.path)
            copier(entry, source, env, tmp)
            return tmp

        try:
            results = {}
            with ThreadPoolExecutor(max_workers=max(1, streams)) as pool:
                futures = {n: pool.submit(copy_one, n) for n in todo}
                for n, fut in futures.items():
                    try:
                        results[n] = fut.result()
                    except Exception as exc:
                        job.failures[n] = str(exc)
            for n in todo:
                if n not in results:
                    continue
                src_entry = snapshot[n]
                server = env.servers[job.hosts[n]]
                path = f"{dest.name}/{mss_key(src_entry.path)}"
                entry = DbEntry(name=n, host=server.host, path=path, state=State.CLOSED,
                                component=src_entry.component, auth_level=src_entry.auth_level,
                                mtime=src_entry.mtime, size=src_entry.size)
                crc = _source_crc(src_entry, env)
                if crc is None:
                    crc = dbfile.file_crc(results[n])
                existing = dest.by_name(n)
                if existing is None:
                    dbid = dest.attach_by_proxy(entry, results[n])
                    server.adopt(path)
                    dest.set_readonly(dbid)
                job.crcs[n] = crc
                job.status[n] = COPIED
        finally:
            shutil.rmtree(scratch, ignore_errors=True)
            job.save()
        if job.failures:
            raise CopyFailure(job, sorted(job.failures))
        return job
    finally:
        lock.release()


def qa_check(job, env):
    """Per-database checks (present in catalog and on disk, non-empty,
    checksum equal to the production original) rolled up per collection.
    Returns {collection: [problems]}; an empty list means it passes."""
    dest = env.store[job.dest]
    problems = {}
    for n in job.candidates:
        if job.status[n] not in (COPIED, QA_PASS, QA_FAIL):
            continue
        entry = dest.by_name(n)
        why = None
        if entry is None:
            why = "missing databases"
        else:
            server = env.servers.get(entry.host)
            full = server.full_path(entry.path) if server else dest.locate(entry)
            if not full.exists():
                why = "missing databases"
            elif entry.size <= 0 or full.stat().st_size == 0:
                why = "empty database"
            else:
                try:
                    dbfile.verify(full, job.crcs.get(n))
                except IntegrityFailure:
                    why = "checksum mismatch"
        problems[n] = why
        job.status[n] = QA_FAIL if why else QA_PASS
    report = {}
    for c, members in job.collections.items():
        if job.collection_status[c] == PUBLISHED:
            continue
        issues = []
        for m in members:
            if m in problems:
                if problems[m]:
                    issues.append(f"{m}: {problems[m]}")
            elif m in job.status and job.status[m] not in (QA_PASS, PUBLISHED):
                issues.append(f"{m}: not copied")
            elif m not in job.status and dest.by_name(m) is None:
                issues.append(f"{m}: missing databases")
        job.collection_status[c] = QA_FAIL if issues else QA_PASS
        report[c] = issues
    job.qa = report
    job.save()
    return report


def publish_collections(job, env):
    """Two-step publication of QA-passed collections: register in the
    daughter federation, then point the bridge at it. Users only see a
    collection after the second step. Returns the names published."""
    lock = _pair_lock(job.source, job.dest)
    if not lock.acquire(blocking=False):
        raise SweepBusy(f"a sweep {job.source} -> {job.dest} is already running")
    try:
        dest = env.store[job.dest]
        bridge = env.store[job.bridge] if job.bridge else None
        done = []
        for c, members in job.collections.items():
            if job.collection_status[c] != QA_PASS:
                continue
            if c not in dest.collections:
                ids = tuple(dest.by_name(m).id for m in members)
                dest.register_collection(CollectionRef(c, local=ids))
                env.clock.advance(env.load_cost)
                if env.load_delay:
                    time.sleep(env.load_delay)
            if bridge is not None and c not in bridge.collections:
                bridge.register_collection(CollectionRef(c, remote=(dest.name, c)))
            job.collection_status[c] = PUBLISHED
            job.published_at[c] = env.clock.now
            for m in members:
                if job.status.get(m) == QA_PASS:
                    job.status[m] = PUBLISHED
            done.append(c)
        job.save()
        return done
    finally:
        lock.release()


def run_sweep(source, dest, bridge, env, journal_dir=None, name=None, streams=1):
    """plan + execute + qa + publish in one go; returns the job."""
    job = plan_sweep(source, dest, bridge, journal_dir, name)
    if job.candidates:
        execute_sweep(job, env, streams=streams)
    qa_check(job, env)
    publish_collections(job, env)
    return job
