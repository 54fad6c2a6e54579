"""Simulated weeks of site operation.

Each week, in simulated time:

    day 0   production cycles, calibration db, remote exports, import,
            sweeps into the analysis federations and the bridge
    day 0-6 service probe, daily maintenance, analysis readers, purge
    day 6   weekly maintenance (auth rewrite, catalog backups)

Everything random draws from one seeded generator and the clock only moves
by scheduled events, so a scenario and its seed fix every output byte.
"""

import csv
import io
import random
from dataclasses import dataclass, field
from pathlib import Path

from fedstore import dbfile
from fedstore.admintool import ConditionsLink, monitor_hosts, run_maintenance
from fedstore.clock import DAY, WEEK
from fedstore.errors import DiskFull, FedStoreError, UnknownCollection
from fedstore.fedcat import CollectionRef, DbEntry, State
from fedstore.importer import export_dataset, run_importer
from fedstore.prodsys import SIM_STAGES, Binding, ProdTopology, RunControl, run_production_cycle
from fedstore.site import BRIDGE, CALIBRATION, CONDITIONS, IMPORT, Site, host_of
from fedstore.storage import PurgePolicy, access_histogram, histogram_csv, mss_key
from fedstore.sweep import run_sweep

HOUR = 3600
CATEGORIES = ("reconstruction", "simulation", "imported")


def _csv(header, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


@dataclass
class Totals:
    dbs_created: int = 0
    collections_created: int = 0
    catalog_write_locks: int = 0
    catalog_stalls: int = 0
    exported_pieces: int = 0
    imports_done: int = 0
    imports_failed: int = 0
    swept_dbs: int = 0
    swept_bytes: int = 0
    published: int = 0
    reads: int = 0
    read_failures: int = 0
    stage_events: int = 0
    purged: int = 0
    incidents: int = 0
    backups: int = 0


@dataclass
class ScenarioResult:
    out: Path
    totals: Totals
    violations: list = field(default_factory=list)

    @property
    def ok(self):
        return not self.violations


class ScenarioRun:
    def __init__(self, scenario, out):
        self.sc = scenario
        self.site = Site.build(out, scenario)
        self.clock = self.site.clock
        self.rng = random.Random(scenario.seed)
        self.totals = Totals()
        self.control = RunControl()
        self.control.pause()
        p = scenario.production
        self.reco = self._topology(self.site.layout.reco, ("micro",))
        sim_components = SIM_STAGES if p.three_stage else ("sim",)
        self.sim = self._topology(self.site.layout.sim, sim_components)
        self.published = []  # bridge collections, in publication order
        self.production_rows = []
        self.sweep_rows = []
        self.failures = []
        self.serial = {}
        self.conditions = ConditionsLink(self.site.fed(CALIBRATION), self.site.fed(CONDITIONS),
                                         self.control, self.site.servers[host_of(CONDITIONS)],
                                         self.site.servers[host_of(CALIBRATION)])
        self.policy = PurgePolicy(scenario.purge.age_days * DAY, scenario.purge.usage_trigger)

    def _topology(self, names, components):
        if not names:
            return None
        p = self.sc.production
        bindings = [Binding(self.site.fed(n), self.site.lockservers[f"ls-{n}"],
                            self.site.servers[host_of(n)]) for n in names]
        return ProdTopology(bindings, components=components,
                            event_size={c: p.event_size for c in components},
                            target_db_size=p.target_db_size, refill_batch=p.refill_batch,
                            three_stage=p.three_stage)

    def at(self, t):
        if t > self.clock.now:
            self.clock.set(t)

    # week steps

    def produce(self, week):
        p = self.sc.production
        local = 0
        self.control.resume()
        for label, topo, clients in (("reconstruction", self.reco, p.clients),
                                     ("simulation", self.sim, max(1, p.clients // 2))):
            if topo is None:
                continue
            rep = run_production_cycle(topo, clients, p.events, self.clock, chs=p.chs,
                                       control=self.control if label == "reconstruction" else None)
            local += sum(r.bytes for r in rep.clients)
            self.totals.dbs_created += len(rep.dbs_created)
            self.totals.collections_created += len(rep.collections)
            self.totals.catalog_write_locks += rep.catalog_write_locks
            self.totals.catalog_stalls += rep.catalog_stalls
            self.production_rows.append([week, label, len(rep.clients), len(rep.dbs_created),
                                         len(rep.collections), rep.lock_requests,
                                         rep.catalog_write_locks, rep.catalog_stalls, int(rep.chs)])
        self.control.pause()
        return local

    def calibrate(self, week):
        pc = self.site.fed(CALIBRATION)
        srv = self.site.servers[host_of(CALIBRATION)]
        name = f"{CALIBRATION}.calib.{week:05d}"
        path = f"{CALIBRATION}/{name}.db"
        size = dbfile.write_dbfile(srv.full_path(path), self.rng.randbytes(2048))
        srv.adopt(path)
        dbid = pc.register(DbEntry(name, srv.host, path, State.CLOSED, component="calib",
                                   mtime=self.clock.now, size=size))
        srv.close_and_migrate(path)
        pc.register_collection(CollectionRef(f"{CALIBRATION}.calib.w{week:02d}", local=(dbid,)))

    def export(self, week, local_bytes):
        s, p = self.sc.sites, self.sc.production
        if not s.names:
            return
        want = s.weight * local_bytes / (len(s.names) * s.file_size)
        n_files = max(1, round(want))
        for site in s.names:
            src = self.site.root / "remote" / site
            files, stats = [], {}
            for _ in range(n_files):
                k = self.serial[site] = self.serial.get(site, 0) + 1
                f = src / f"{site}.sim.{k:05d}.db"
                dbfile.write_dbfile(f, self.rng.randbytes(s.file_size - dbfile.HEADER_SIZE))
                files.append(f)
                stats[f.stem] = (max(1, s.file_size // p.event_size), week)
            pieces = export_dataset(site, files, s.piece_limit, self.site.dropzone, cycle=week,
                                    clock=self.clock, stats=stats)
            for f in files:
                f.unlink()
            self.totals.exported_pieces += len(pieces)
            if site in self.sc.faults_for("corrupt_export", week):
                victim = pieces[0].dir / pieces[0].files[0].name
                data = bytearray(victim.read_bytes())
                data[self.rng.randrange(len(data))] ^= 0x01 << self.rng.randrange(8)
                victim.write_bytes(bytes(data))

    def import_(self):
        for rec in run_importer(self.site.import_target()):
            if rec.status == "done":
                self.totals.imports_done += 1
            else:
                self.totals.imports_failed += 1

    def free_up(self, srv, need):
        """Purge old archived files until ``need`` more bytes fit under the
        usage trigger."""
        cap = srv.capacity
        if srv.used + need <= cap * self.policy.usage_trigger / 100:
            return
        trigger = max(0.01, min(self.policy.usage_trigger, 100.0 * (cap - need) / cap))
        self.totals.purged += len(srv.purge_scan(PurgePolicy(self.policy.age_threshold, trigger)))

    def make_room(self, incoming):
        """Purge ahead of a sweep so every analysis server can take its
        share of ``incoming`` bytes."""
        share = incoming // max(1, len(self.site.ana_servers)) + 1
        for srv in self.site.ana_servers:
            self.free_up(srv, share)

    def sweep(self, week):
        site = self.site
        env = site.sweep_env()
        env.placement = site.ana_servers
        bridge = site.fed(BRIDGE)
        env_streams = self.sc.analysis.streams
        for src_name in site.layout.sweep_sources():
            src = site.fed(src_name)
            dest = site.fed(site.layout.sweep_dest(src_name))
            incoming = sum(e.size for e in src.entries.values()
                           if e.state is State.CLOSED and dest.by_name(e.name) is None)
            self.make_room(incoming)
            try:
                job = run_sweep(src, dest, bridge, env, journal_dir=site.sweep_dir,
                                name=f"w{week:02d}-{src_name}", streams=env_streams)
            except FedStoreError as exc:
                self.failures.append(f"week {week} sweep {src_name}: {exc}")
                continue
            nbytes = job.bytes_copied(site.store)
            self.totals.swept_dbs += len(job.copied)
            self.totals.swept_bytes += nbytes
            self.totals.published += len(job.published)
            self.published.extend(job.published)
            first = min(job.published_at.values()) if job.published_at else ""
            last = max(job.published_at.values()) if job.published_at else ""
            self.sweep_rows.append([week, job.name, src_name, dest.name, len(job.candidates),
                                    len(job.copied), nbytes, len(job.published),
                                    job.outage[0] if job.outage else "",
                                    job.outage[1] if job.outage else "", first, last])

    def read(self):
        if not self.published:
            return
        bridge = self.site.fed(BRIDGE)
        n = len(self.published)
        for _ in range(self.sc.analysis.readers_per_day):
            # recent collections are read far more often than old ones
            idx = n - 1 - int(n * self.rng.random() ** 3)
            try:
                res = bridge.resolve_collection(self.published[idx])
            except UnknownCollection:
                self.totals.read_failures += 1
                continue
            entry = self.rng.choice(res.entries)
            fed = self.site.fed(res.federations[0])
            srv = self.site.servers[entry.host]
            fed.open_db(entry.id)
            self.totals.reads += 1
            try:
                srv.open_read(entry.path).close()
            except DiskFull:
                self.free_up(srv, entry.size)
                try:
                    srv.open_read(entry.path).close()
                except DiskFull:
                    self.totals.read_failures += 1
            except FedStoreError:
                self.totals.read_failures += 1

    def purge(self):
        for srv in self.site.ana_servers:
            self.totals.purged += len(srv.purge_scan(self.policy))

    def probe(self):
        incidents = monitor_hosts(self.site.services(), self.clock,
                                  self.site.root / "incidents.log",
                                  restartable=frozenset(self.sc.monitor.restartable))
        self.totals.incidents += len(incidents)

    def maintain(self, schedule):
        feds = self.site.store.federations()
        auth = None
        backup_dir = None
        if schedule == "weekly":
            auth = {f.name: {"production": 2, "analysis": 1} for f in feds}
            if self.sc.maintenance.backup:
                backup_dir = self.site.root / "backups"
        rep = run_maintenance(feds, schedule, self.clock, backup_dir, self.conditions, auth)
        self.totals.backups += len(rep.backups)

    def week(self, w):
        week = w + 1
        t0 = w * WEEK
        self.at(t0)
        local = self.produce(week)
        self.calibrate(week)
        self.at(t0 + HOUR)
        self.export(week, local)
        self.at(t0 + 2 * HOUR)
        self.import_()
        self.at(t0 + 3 * HOUR)
        self.sweep(week)
        for day in range(7):
            if day == 2:
                self.at(t0 + 2 * DAY + 6 * HOUR)
                for name in self.sc.faults_for("kill", week):
                    self.site.service(name).kill()
            self.at(t0 + day * DAY + 12 * HOUR)
            self.probe()
            self.maintain("daily")
            self.read()
            self.at(t0 + day * DAY + 20 * HOUR)
            self.purge()
        self.at(t0 + 7 * DAY - HOUR)
        self.maintain("weekly")

    def run(self):
        for w in range(self.sc.weeks):
            self.week(w)
        self.at(self.sc.weeks * WEEK)
        self.totals.stage_events = sum(s.stage_events for s in self.site.servers.values())
        violations = self.check()
        self.write_outputs(violations)
        self.site.save()
        return ScenarioResult(self.site.root, self.totals, violations)

    # end-of-run checks and outputs

    def volumes(self):
        vols = {c: 0 for c in CATEGORIES}
        for fed in self.site.store.federations():
            cat = self.site.layout.category(fed.name)
            if cat is not None:
                vols[cat] += sum(e.size for e in fed.entries.values() if e.state is State.CLOSED)
        total = sum(vols.values())
        return [(c, vols[c], 100.0 * vols[c] / total if total else 0.0) for c in CATEGORIES]

    def histogram(self):
        return access_histogram(self.site.ana_servers, DAY, self.clock.now)

    def check(self):
        v = list(self.failures)
        site = self.site
        ana = site.analysis_feds()
        origin = [site.fed(n) for n in site.layout.sweep_sources() + [CALIBRATION]]
        for fed in origin:
            for e in fed.entries.values():
                if e.state is not State.CLOSED:
                    continue
                if mss_key(e.path) not in site.mss:
                    v.append(f"{fed.name}:{e.name} closed but not archived")
                copies = sum(1 for a in ana if a.by_name(e.name) is not None)
                if copies > 1:
                    v.append(f"{fed.name}:{e.name} in {copies} analysis federations")
        for key in sorted(site.mss.contents):
            if not site.mss.verify(key):
                v.append(f"mss {key}: archived copy does not match its manifest line")
        for ls_id, ls in sorted(site.lockservers.items()):
            if ls.lock_table():
                v.append(f"{ls_id}: locks still held at end")
        bridge = site.fed(BRIDGE)
        for fed in (site.fed(n) for n in site.layout.sweep_sources()):
            for cname, ref in fed.collections.items():
                if ref.kind != "local":
                    continue
                try:
                    got = [e.name for e in bridge.resolve_collection(cname).entries]
                except FedStoreError:
                    v.append(f"{cname} never published")
                    continue
                want = [fed.entries[i].name for i in ref.local]
                if got != want:
                    v.append(f"{cname} published with wrong members")
        rows = self.histogram()
        cum = [r[2] for r in rows]
        if cum != sorted(cum) or (cum and abs(cum[-1] - 100.0) > 0.1):
            v.append("access histogram not monotone to 100%")
        shares = [r[2] for r in self.volumes()]
        if any(shares) and abs(sum(shares) - 100.0) > 0.1:
            v.append("volume shares do not sum to 100%")
        return v

    def write_outputs(self, violations):
        root = self.site.root
        t = self.totals
        summary = [f"seed={self.sc.seed}", f"weeks={self.sc.weeks}"]
        summary += [f"{k}={getattr(t, k)}" for k in Totals.__dataclass_fields__]
        for c, nbytes, pct in self.volumes():
            summary.append(f"volume_{c}_bytes={nbytes}")
            summary.append(f"volume_{c}_percent={pct:.3f}")
        summary.append(f"violations={len(violations)}")
        summary += [f"violation: {x}" for x in violations]
        dbfile.atomic_write(root / "summary.txt", ("\n".join(summary) + "\n").encode())
        dbfile.atomic_write(root / "histogram.csv", histogram_csv(self.histogram()).encode())
        dbfile.atomic_write(root / "volumes.csv", _csv(
            ["category", "bytes", "percent"],
            [(c, b, f"{p:.3f}") for c, b, p in self.volumes()]).encode())
        dbfile.atomic_write(root / "production.csv", _csv(
            ["week", "kind", "clients", "dbs", "collections", "lock_requests",
             "catalog_write_locks", "catalog_stalls", "chs"], self.production_rows).encode())
        dbfile.atomic_write(root / "sweeps.csv", _csv(
            ["week", "job", "source", "dest", "candidates", "copied", "bytes", "published",
             "outage_start", "outage_end", "first_published", "last_published"],
            self.sweep_rows).encode())
        dbfile.atomic_write(root / "imports.csv", _csv(
            ["dataset", "site", "status", "bytes", "events", "runs", "dbs", "time"],
            [(r.dataset, r.site, r.status, r.size, r.events, r.runs, len(r.members), r.time)
             for r in self.site.registry.records()]).encode())
        lock_rows = []
        for ls_id, ls in sorted(self.site.lockservers.items()):
            fed = ls_id[3:]
            lock_rows.append([ls_id, ls.requests, ls.catalog_write_locks(fed), ls.stalls,
                              ls.peak_connections])
        dbfile.atomic_write(root / "locks.csv", _csv(
            ["lockserver", "requests", "catalog_write_locks", "stalls", "peak_connections"],
            lock_rows).encode())
        dbfile.atomic_write(root / "locks.txt", "".join(
            ls.dump() for _, ls in sorted(self.site.lockservers.items())).encode())


def run_scenario(scenario, out, figures=True):
    """Run ``scenario`` into the workspace ``out`` (created fresh)."""
    out = Path(out)
    if out.exists() and any(out.iterdir()):
        raise FedStoreError(f"{out} is not empty")
    result = ScenarioRun(scenario, out).run()
    if figures:
        from fedstore.report import report

        report(out)
    return result
