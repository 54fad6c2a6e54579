"""Remote-site exports and their import into an import federation.

Exporters and the importer only ever talk through the dropzone:

    <dropzone>/<site>/<dataset>/MANIFEST
    <dropzone>/<site>/<dataset>/<file>.db ...
    <dropzone>/<site>/<dataset>/<dataset>.<state>    zero-length markers

Both sides are written as generators that perform one filesystem action
per step, so tests can interleave them exhaustively. ``export_dataset`` and
``handle_import`` just drive the generators to completion.
"""

import os
import shutil
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

from fedstore import dbfile
from fedstore.errors import FedStoreError, IntegrityFailure
from fedstore.fedcat import CollectionRef, DbEntry, State

TRANSFER_IN_PROGRESS = "transfer_in_progress"
TRANSFER_DONE = "transfer_done"
IMPORT_IN_PROGRESS = "import_in_progress"
IMPORT_DONE = "import_done"
STATES = (TRANSFER_IN_PROGRESS, TRANSFER_DONE, IMPORT_IN_PROGRESS, IMPORT_DONE)
RANK = {s: i for i, s in enumerate(STATES)}

MANIFEST = "MANIFEST"
QUARANTINE = "quarantine"
REGISTRY = "imports.reg"


def dataset_id(site, cycle, piece):
    return f"{site}-{cycle}-p{piece:03d}"


@dataclass(frozen=True)
class ManifestLine:
    name: str
    size: int
    crc: int
    compressed: bool = False


@dataclass
class ImportDataset:
    id: str
    site: str
    dir: Path
    files: list = field(default_factory=list)
    compressed: bool = False
    state: str | None = None
    events: int = 0
    runs: int = 0
    exported: int = 0

    @property
    def size(self):
        return sum(f.size for f in self.files)


def markers(piece_dir):
    """Marker states present in a piece directory, in protocol order."""
    piece_dir = Path(piece_dir)
    found = []
    for s in STATES:
        if (piece_dir / f"{piece_dir.name}.{s}").exists():
            found.append(s)
    return found


def current_state(piece_dir):
    """The highest-ranked marker is authoritative (transitions overlap)."""
    found = markers(piece_dir)
    return found[-1] if found else None


def _mark(piece_dir, state):
    (Path(piece_dir) / f"{Path(piece_dir).name}.{state}").touch()


def _unmark(piece_dir, state):
    (Path(piece_dir) / f"{Path(piece_dir).name}.{state}").unlink(missing_ok=True)


def manifest_text(files, events, runs, exported):
    lines = ["MANIFEST v1"]
    lines += [f"{f.name}\t{f.size}\t{f.crc:016x}\t{int(f.compressed)}" for f in files]
    lines += [f"events={events}", f"runs={runs}", f"exported={exported}"]
    return "\n".join(lines) + "\n"


def read_manifest(path):
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0] != "MANIFEST v1":
        raise IntegrityFailure(f"{path}: bad manifest header")
    files, trailer = [], {}
    for line in lines[1:]:
        if "=" in line and "\t" not in line:
            k, v = line.split("=", 1)
            trailer[k] = int(v)
            continue
        name, size, crc, comp = line.split("\t")
        files.append(ManifestLine(name, int(size), int(crc, 16), comp == "1"))
    return files, trailer


def load_dataset(piece_dir):
    piece_dir = Path(piece_dir)
    ds = ImportDataset(piece_dir.name, piece_dir.parent.name, piece_dir,
                       state=current_state(piece_dir))
    if (piece_dir / MANIFEST).exists():
        files, trailer = read_manifest(piece_dir / MANIFEST)
        ds.files = files
        ds.compressed = any(f.compressed for f in files)
        ds.events = trailer.get("events", 0)
        ds.runs = trailer.get("runs", 0)
        ds.exported = trailer.get("exported", 0)
    return ds


# export side

def split_pieces(sizes, limit):
    """Greedy first-fit in listed order. Returns lists of indices."""
    pieces, room = [], []
    for i, size in enumerate(sizes):
        if size > limit:
            raise ValueError(f"file {i} ({size} bytes) exceeds the piece limit {limit}")
        for p, free in enumerate(room):
            if size <= free:
                pieces[p].append(i)
                room[p] -= size
                break
        else:
            pieces.append([i])
            room.append(limit - size)
    return pieces


def export_steps(site, files, piece_size_limit, dropzone, cycle=1, clock=None,
                 compressed=False, stats=None):
    """Generator form of export_dataset; yields a label after every
    filesystem action and returns the list of datasets."""
    files = [Path(f) for f in files]
    stats = stats or {}
    sizes = [f.stat().st_size for f in files]
    out = []
    for n, idx in enumerate(split_pieces(sizes, piece_size_limit), start=1):
        ds_id = dataset_id(site, cycle, n)
        piece_dir = Path(dropzone) / site / ds_id
        piece_dir.mkdir(parents=True, exist_ok=True)
        _mark(piece_dir, TRANSFER_IN_PROGRESS)
        yield ("export", ds_id, "begin")
        lines = []
        for i in idx:
            src = files[i]
            shutil.copyfile(src, piece_dir / src.name)
            lines.append(ManifestLine(src.name, sizes[i], dbfile.file_crc(src), compressed))
            yield ("export", ds_id, f"copy {src.name}")
        events = sum(stats.get(files[i].stem, (0, None))[0] for i in idx)
        runs = len({stats[files[i].stem][1] for i in idx if files[i].stem in stats})
        exported = clock.now if clock is not None else 0
        dbfile.atomic_write(piece_dir / MANIFEST,
                            manifest_text(lines, events, runs, exported).encode())
        yield ("export", ds_id, "manifest")
        _mark(piece_dir, TRANSFER_DONE)
        yield ("export", ds_id, "done")
        _unmark(piece_dir, TRANSFER_IN_PROGRESS)
        yield ("export", ds_id, "cleared")
        out.append(load_dataset(piece_dir))
    return out


def drive(gen):
    """Run a step generator to completion and return its value."""
    while True:
        try:
            next(gen)
        except StopIteration as stop:
            return stop.value


def export_dataset(site, files, piece_size_limit, dropzone, cycle=1, clock=None,
                   compressed=False, stats=None):
    """Split ``files`` into pieces and push them into the dropzone. No
    acknowledgment is awaited. ``stats`` maps file stem to (events, run)."""
    return drive(export_steps(site, files, piece_size_limit, dropzone, cycle, clock,
                              compressed, stats))


# import side

def scan_incoming(dropzone):
    """Datasets whose authoritative marker is transfer_done, oldest export
    first. Pure: it only reads the dropzone."""
    dropzone = Path(dropzone)
    if not dropzone.is_dir():
        return []
    found = []
    for site_dir in sorted(p for p in dropzone.iterdir() if p.is_dir() and p.name != QUARANTINE):
        for piece_dir in sorted(p for p in site_dir.iterdir() if p.is_dir()):
            if current_state(piece_dir) == TRANSFER_DONE:
                found.append(load_dataset(piece_dir))
    found.sort(key=lambda d: (d.exported, d.id))
    return found


@dataclass
class ImportRecord:
    dataset: str
    site: str
    status: str
    size: int = 0
    events: int = 0
    runs: int = 0
    members: tuple = ()
    stamps: dict = field(default_factory=dict)
    reason: str = ""

    @property
    def time(self):
        return max(self.stamps.values()) if self.stamps else 0

    def encode(self):
        stamps = ";".join(f"{k}={v}" for k, v in self.stamps.items())
        return "\t".join([self.dataset, self.site, self.status, str(self.size), str(self.events),
                          str(self.runs), ",".join(self.members), stamps, self.reason])

    @classmethod
    def decode(cls, line):
        f = line.rstrip("\n").split("\t")
        stamps = dict(kv.split("=") for kv in f[7].split(";")) if f[7] else {}
        return cls(f[0], f[1], f[2], int(f[3]), int(f[4]), int(f[5]),
                   tuple(f[6].split(",")) if f[6] else (),
                   {k: int(v) for k, v in stamps.items()}, f[8] if len(f) > 8 else "")


class ImportRegistry:
    """Append-only record file; the latest line for a dataset wins."""

    def __init__(self, path):
        self.path = Path(path)
        self._lock = threading.Lock()

    def append(self, record):
        with self._lock:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with open(self.path, "a") as fh:
                fh.write(record.encode() + "\n")
                fh.flush()
                os.fsync(fh.fileno())

    def records(self):
        if not self.path.exists():
            return []
        latest = {}
        for line in self.path.read_text().splitlines():
            if line:
                rec = ImportRecord.decode(line)
                latest[rec.dataset] = rec
        return sorted(latest.values(), key=lambda r: (r.time, r.dataset))

    def get(self, dataset):
        for rec in self.records():
            if rec.dataset == dataset:
                return rec
        return None

    def query(self, site=None, status=None, since=None, until=None, db=None):
        """Filter by site, status, [since, until) on the record time, or a
        member database name."""
        out = []
        for rec in self.records():
            if site is not None and rec.site != site:
                continue
            if status is not None and rec.status != status:
                continue
            if since is not None and rec.time < since:
                continue
            if until is not None and rec.time >= until:
                continue
            if db is not None and db not in rec.members:
                continue
            out.append(rec)
        return out


def registry_query(registry, **filters):
    return registry.query(**filters)


@dataclass
class ImportTarget:
    """Where imports land: the import federation, its data server and the
    registry. ``handoff`` is called with each finished record (the sweep
    queue)."""

    fed: object
    server: object
    registry: ImportRegistry
    clock: object
    dropzone: Path
    handoff: object = None


def _quarantine(ds, target):
    dest = Path(target.dropzone) / QUARANTINE / ds.site / ds.id
    dest.parent.mkdir(parents=True, exist_ok=True)
    if dest.exists():
        shutil.rmtree(dest)
    shutil.move(str(ds.dir), str(dest))
    return dest


def handle_steps(ds, target):
    """Generator form of handle_import; returns the ImportRecord."""
    fed, server, clock = target.fed, target.server, target.clock
    stamps = {TRANSFER_DONE: ds.exported}
    _mark(ds.dir, IMPORT_IN_PROGRESS)
    stamps[IMPORT_IN_PROGRESS] = clock.now
    yield ("import", ds.id, "begin")
    _unmark(ds.dir, TRANSFER_DONE)
    yield ("import", ds.id, "claimed")

    members = tuple(Path(f.name).stem for f in ds.files)
    record = ImportRecord(ds.id, ds.site, "in_progress", ds.size, ds.events, ds.runs,
                          members, stamps)
    # all-or-nothing: verify the whole piece before attaching anything
    try:
        for f in ds.files:
            path = ds.dir / f.name
            if not path.exists():
                raise IntegrityFailure(f"{ds.id}: {f.name} missing")
            if path.stat().st_size != f.size:
                raise IntegrityFailure(f"{ds.id}: {f.name} size differs from manifest")
            try:
                dbfile.verify(path, f.crc)
            except IntegrityFailure as exc:
                # keep registry lines free of workspace paths
                detail = str(exc).rpartition(": ")[2]
                raise IntegrityFailure(f"{ds.id}: {f.name} {detail}") from None
    except IntegrityFailure as exc:
        _quarantine(ds, target)
        record.status = "failed"
        record.reason = str(exc)
        stamps["failed"] = clock.now
        target.registry.append(record)
        yield ("import", ds.id, "quarantined")
        return record
    yield ("import", ds.id, "verified")

    ids = []
    with fed.batch():
        for f in ds.files:
            name = Path(f.name).stem
            entry = DbEntry(name=name, host=server.host, path=f"{fed.name}/{f.name}",
                            state=State.CLOSED, component="import", mtime=ds.exported)
            ids.append(fed.attach_db(entry, ds.dir / f.name, expected_crc=f.crc))
        fed.register_collection(CollectionRef(ds.id, local=tuple(ids)))
    yield ("import", ds.id, "attached")
    for dbid in ids:
        entry = fed.entries[dbid]
        server.adopt(entry.path)
        server.close_and_migrate(entry.path, purge=True)
    yield ("import", ds.id, "migrated")

    _mark(ds.dir, IMPORT_DONE)
    stamps[IMPORT_DONE] = clock.now
    yield ("import", ds.id, "done")
    _unmark(ds.dir, IMPORT_IN_PROGRESS)
    for f in ds.files:
        (ds.dir / f.name).unlink(missing_ok=True)
    yield ("import", ds.id, "cleared")
    record.status = "done"
    target.registry.append(record)
    if target.handoff is not None:
        target.handoff(record)
    yield ("import", ds.id, "registered")
    return record


def handle_import(ds, target):
    """Verify, attach (full integrity path), migrate and purge one piece.
    A bad file quarantines the whole piece and records status=failed."""
    if current_state(ds.dir) != TRANSFER_DONE:
        raise FedStoreError(f"{ds.id}: not in {TRANSFER_DONE}")
    return drive(handle_steps(ds, target))


def importer_steps(target):
    """The importer actor: scan, then handle what was found, forever."""
    while True:
        found = scan_incoming(target.dropzone)
        yield ("scan", tuple(ds.id for ds in found))
        for ds in found:
            yield from handle_steps(ds, target)


def run_importer(target, workers=1):
    """One pass over the dropzone; datasets are independent and may be
    handled concurrently."""
    found = scan_incoming(target.dropzone)
    if workers <= 1:
        return [handle_import(ds, target) for ds in found]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(lambda ds: handle_import(ds, target), found))
