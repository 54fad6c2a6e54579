"""Data servers backed by a mass store.

Files are keyed by their host-relative path; the mass-store key is the
file's basename, which is globally unique across federations. A Disk holds
the byte accounting and access log and may be shared by several DataServer
instances on one host.
"""

import csv
import io
import os
import threading
import time
from dataclasses import dataclass
from pathlib import Path, PurePosixPath

from fedstore import dbfile
from fedstore.clock import DAY
from fedstore.errors import (
    DiskFull,
    FedStoreError,
    MssWriteFailure,
    NotFoundAnywhere,
    QuiescenceRequired,
    ServiceDown,
)

MANIFEST = "archive.manifest"


def mss_key(path):
    return PurePosixPath(path).name


class MassStore:
    """Immutable archive stub: one directory of files plus a manifest of
    ``name\\tsize\\tcrc64`` lines."""

    def __init__(self, root, retrieve_delay=0.0):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self.retrieve_delay = retrieve_delay
        self.contents = {}
        self.writes = 0
        self.retrievals = 0
        self._lock = threading.Lock()
        manifest = self.root / MANIFEST
        if manifest.exists():
            for line in manifest.read_text().splitlines():
                name, size, crc = line.split("\t")
                self.contents[name] = (int(size), int(crc, 16))

    def __contains__(self, name):
        return name in self.contents

    def _append_manifest(self, name, size, crc):
        # append-only: one short write per archive instead of a rewrite
        with open(self.root / MANIFEST, "a") as f:
            f.write(f"{name}\t{size}\t{crc:016x}\n")

    def _copy_in(self, data, dest):
        dbfile.atomic_write(dest, data)

    def archive(self, name, src):
        """Copy ``src`` in under ``name`` and verify the archived bytes.
        Re-archiving identical content is a no-op; different content is an
        error because archived files never change."""
        data = Path(src).read_bytes()
        crc, size = dbfile.crc64(data), len(data)
        with self._lock:
            known = self.contents.get(name)
            if known is not None:
                if known != (size, crc):
                    raise MssWriteFailure(f"{name}: archive is immutable")
                return crc
            dest = self.root / name
            self._copy_in(data, dest)
            if dbfile.file_crc(dest) != crc:
                dest.unlink(missing_ok=True)
                raise MssWriteFailure(f"{name}: archived copy failed checksum verification")
            self.contents[name] = (size, crc)
            self.writes += 1
            self._append_manifest(name, size, crc)
            return crc

    def checksum(self, name):
        return self.contents[name][1]

    def verify(self, name):
        size, crc = self.contents[name]
        path = self.root / name
        return path.exists() and path.stat().st_size == size and dbfile.file_crc(path) == crc

    def retrieve(self, name, dest):
        if name not in self.contents:
            raise NotFoundAnywhere(f"{name}: not archived")
        if self.retrieve_delay:
            time.sleep(self.retrieve_delay)
        dbfile.atomic_copy(self.root / name, dest)
        with self._lock:
            self.retrievals += 1

    def total_bytes(self):
        return sum(size for size, _ in self.contents.values())


class Disk:
    """Byte accounting and access log for one disk root."""

    ACCESS_LOG = ".access"

    def __init__(self, root, capacity):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self.capacity = capacity
        self.sizes = {}
        self.access = {}
        self.lock = threading.RLock()

    @property
    def used(self):
        return sum(self.sizes.values())

    def usage_pct(self):
        return 100.0 * self.used / self.capacity

    def recompute(self):
        """Sum of on-disk file sizes, straight from the filesystem."""
        return sum(os.stat(self.root / p).st_size for p in self.sizes)

    def scan(self, now=0):
        """Rebuild accounting from the filesystem and the saved access log."""
        logged = {}
        log = self.root / self.ACCESS_LOG
        if log.exists():
            for line in log.read_text().splitlines():
                p, t = line.split("\t")
                logged[p] = int(t)
        with self.lock:
            self.sizes.clear()
            self.access.clear()
            for dirpath, _, files in os.walk(self.root):
                for fn in files:
                    if fn.startswith("."):
                        continue
                    full = Path(dirpath) / fn
                    rel = full.relative_to(self.root).as_posix()
                    self.sizes[rel] = full.stat().st_size
                    self.access[rel] = logged.get(rel, now)

    def save_access_log(self):
        with self.lock:
            text = "".join(f"{p}\t{self.access[p]}\n" for p in sorted(self.sizes))
        dbfile.atomic_write(self.root / self.ACCESS_LOG, text.encode())


class FileHandle:
    def __init__(self, server, path):
        self.server = server
        self.path = path
        self.closed = False

    def read(self):
        return self.server.full_path(self.path).read_bytes()

    def close(self):
        if not self.closed:
            self.closed = True
            self.server._closed(self.path)

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


@dataclass
class PurgePolicy:
    age_threshold: int = 10 * DAY
    usage_trigger: float = 95
    purge_all_eligible: bool = False

    def __post_init__(self):
        if not 0 < self.usage_trigger <= 100:
            raise ValueError("usage_trigger must be in (0, 100]")
        if self.age_threshold < 0:
            raise ValueError("age_threshold must be non-negative")


class DataServer:
    """One data-serving daemon. ``role`` decides whether closed files are
    dropped from disk right after migration (production and import)."""

    kind = "dataserver"

    def __init__(self, host, disk, mss, clock, role="analysis", capacity=None,
                 stage_delay=0, real_stage_delay=0.0):
        if not isinstance(disk, Disk):
            if capacity is None:
                raise ValueError("capacity required when passing a disk root")
            disk = Disk(disk, capacity)
        self.host = host
        self.disk = disk
        self.mss = mss
        self.clock = clock
        self.role = role
        self.stage_delay = stage_delay
        self.real_stage_delay = real_stage_delay
        self.up = True
        self.stage_events = 0
        self.stall_seconds = 0
        self.opens = 0
        self.purged = 0
        self._inflight = {}
        self._handles = {}
        self._touched = set()

    def __repr__(self):
        return f"DataServer({self.host!r}, used={self.used}/{self.capacity})"

    @property
    def capacity(self):
        return self.disk.capacity

    @property
    def used(self):
        return self.disk.used

    def full_path(self, path):
        return self.disk.root / path

    def on_disk(self, path):
        return path in self.disk.sizes

    def files(self):
        return sorted(self.disk.sizes)

    def _check_up(self):
        if not self.up:
            raise ServiceDown(f"dataserver {self.host} is down")

    def _reserve(self, path, size):
        if self.disk.used - self.disk.sizes.get(path, 0) + size > self.disk.capacity:
            raise DiskFull(f"{self.host}: no room for {path} ({size} bytes)")

    # writes

    def adopt(self, path, access=None):
        """Account for a file written into the disk root by someone else."""
        size = os.stat(self.full_path(path)).st_size
        with self.disk.lock:
            self._reserve(path, size)
            self.disk.sizes[path] = size
            self.disk.access[path] = self.clock.now if access is None else access
        return size

    def store(self, path, src):
        size = os.stat(src).st_size
        with self.disk.lock:
            self._reserve(path, size)
            dbfile.atomic_copy(src, self.full_path(path))
            self.disk.sizes[path] = size
            self.disk.access[path] = self.clock.now
        return size

    def delete(self, path):
        with self.disk.lock:
            self.full_path(path).unlink(missing_ok=True)
            self.disk.sizes.pop(path, None)
            self.disk.access.pop(path, None)

    # reads

    def open_read(self, path):
        """Open for reading. A file that is only archived is staged first;
        the caller stalls meanwhile and concurrent callers share one stage."""
        self._check_up()
        while True:
            with self.disk.lock:
                if path in self.disk.sizes:
                    self.disk.access[path] = self.clock.now
                    self._handles[path] = self._handles.get(path, 0) + 1
                    self._touched.add(path)
                    self.opens += 1
                    return FileHandle(self, path)
                flight = self._inflight.get(path)
                leader = flight is None
                if leader:
                    flight = self._inflight[path] = _Flight()
            if leader:
                try:
                    self._stage(path)
                except BaseException as exc:
                    flight.error = exc
                    raise
                finally:
                    with self.disk.lock:
                        del self._inflight[path]
                    flight.done.set()
            else:
                flight.done.wait()
                if flight.error is not None:
                    raise flight.error

    def _stage(self, path):
        key = mss_key(path)
        if key not in self.mss:
            raise NotFoundAnywhere(f"{path}: not on {self.host} and not archived")
        size = self.mss.contents[key][0]
        with self.disk.lock:
            self._reserve(path, size)
        if self.real_stage_delay:
            time.sleep(self.real_stage_delay)
        self.mss.retrieve(key, self.full_path(path))
        with self.disk.lock:
            self.disk.sizes[path] = size
            self.disk.access[path] = self.clock.now
            self.stage_events += 1
            self.stall_seconds += self.stage_delay

    def _closed(self, path):
        with self.disk.lock:
            n = self._handles.get(path, 0) - 1
            if n > 0:
                self._handles[path] = n
            else:
                self._handles.pop(path, None)

    # migration and purging

    def close_and_migrate(self, path, purge=None):
        """Archive a closed file; production and import servers then drop
        the disk copy. Returns the archived checksum."""
        self._check_up()
        if path not in self.disk.sizes:
            raise FedStoreError(f"{self.host}: {path} not on disk")
        crc = self.mss.archive(mss_key(path), self.full_path(path))
        if purge is None:
            purge = self.role in ("production", "import")
        if purge:
            self.delete(path)
        return crc

    def purge_scan(self, policy=None, now=None):
        """Age-based purge gated by disk usage. Oldest files go first and
        the scan stops once usage drops below the trigger (unless the policy
        says to evict everything eligible). Files without an archive copy,
        and files opened since the scan began, are never removed."""
        policy = policy or PurgePolicy()
        now = self.clock.now if now is None else now
        with self.disk.lock:
            self._touched.clear()
            if self.disk.usage_pct() < policy.usage_trigger:
                return []
            candidates = purge_candidates(self.disk.sizes, self.disk.access, now,
                                          policy.age_threshold,
                                          lambda p: mss_key(p) in self.mss)
        purged = []
        for path in candidates:
            with self.disk.lock:
                if not policy.purge_all_eligible and self.disk.usage_pct() < policy.usage_trigger:
                    break
                if path in self._touched or self._handles.get(path) or path not in self.disk.sizes:
                    continue
                self.delete(path)
                purged.append(path)
                self.purged += 1
        return purged

    # service supervision

    def is_up(self):
        return self.up

    def kill(self):
        self.up = False

    def restart(self):
        self.up = True
        return True


class _Flight:
    __slots__ = ("done", "error")

    def __init__(self):
        self.done = threading.Event()
        self.error = None


def purge_candidates(sizes, access, now, age_threshold, archived):
    """Eligible files, oldest access first (path breaks ties)."""
    eligible = [p for p in sizes if now - access[p] > age_threshold and archived(p)]
    return sorted(eligible, key=lambda p: (access[p], p))


def open_read(server, path):
    return server.open_read(path)


def close_and_migrate(server, path, purge=None):
    return server.close_and_migrate(path, purge)


def purge_scan(server, policy=None, now=None):
    return server.purge_scan(policy, now)


def access_histogram(servers, bucket, now):
    """Rows of (bucket_start_seconds, count, cumulative_percent) over the
    last-access ages of every on-disk file. Disks shared between servers
    are counted once; empty buckets are omitted."""
    if bucket <= 0:
        raise ValueError("bucket must be positive")
    seen = set()
    ages = []
    for server in servers:
        if id(server.disk) in seen:
            continue
        seen.add(id(server.disk))
        with server.disk.lock:
            ages.extend(max(0, now - t) for p, t in server.disk.access.items()
                        if p in server.disk.sizes)
    if not ages:
        return []
    counts = {}
    for age in ages:
        start = int(age // bucket) * bucket
        counts[start] = counts.get(start, 0) + 1
    rows, running = [], 0
    for start in sorted(counts):
        running += counts[start]
        rows.append((start, counts[start], 100.0 * running / len(ages)))
    return rows


def histogram_csv(rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["bucket_start_seconds", "count", "cumulative_percent"])
    for start, count, pct in rows:
        w.writerow([start, count, f"{pct:.3f}"])
    return buf.getvalue()


def relocate(fed, server_from, server_to, dbid):
    """Move a database between servers and update its catalog entry. The
    federation must be quiesced by the caller."""
    if not fed.quiescent or not fed._owns_quiesce():
        raise QuiescenceRequired(f"{fed.name}: relocation needs a quiescent federation")
    entry = fed.get(dbid)
    if entry.host != server_from.host:
        raise FedStoreError(f"{entry.name} lives on {entry.host}, not {server_from.host}")
    if server_from.on_disk(entry.path):
        server_to.store(entry.path, server_from.full_path(entry.path))
        server_from.delete(entry.path)
    elif mss_key(entry.path) not in server_from.mss:
        raise NotFoundAnywhere(f"{entry.name}: nothing to relocate")
    return fed.update_entry(dbid, host=server_to.host)
