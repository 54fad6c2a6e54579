"""``fedstore`` command line.

Scenario harness:

    fedstore run --scenario S --out DIR      exit 0 iff no invariant violated
    fedstore report DIR

Everything else works on a workspace left by ``run`` (``-w DIR``, or the
FEDSTORE_WORKSPACE environment variable, default ``.``):

    fedstore locks [SERVER]
    fedstore purge --server H [--dry-run]
    fedstore histo [--bucket 86400]
    fedstore sweep plan|run|publish --source F --dest G [--bridge B]
    fedstore export --site S --limit N FILE...
    fedstore import run [--dropzone D] [--fed F]
    fedstore import query [--site S] [--status failed] ...
    fedstore select ... | fedstore plan --ops stage,migrate | fedstore exec --streams 4
"""

import argparse
import os
import sys
from pathlib import Path

from fedstore import __version__
from fedstore.errors import FedStoreError


def _site(args):
    from fedstore.site import Site

    root = Path(args.workspace)
    if not (root / "site.conf").is_file():
        raise FedStoreError(f"{root}: not a fedstore workspace (no site.conf)")
    return Site.open(root)


def _write(text):
    sys.stdout.write(text)
    if text and not text.endswith("\n"):
        sys.stdout.write("\n")


# scenario harness

def cmd_run(args):
    from fedstore.config import load_scenario
    from fedstore.scenario import run_scenario

    result = run_scenario(load_scenario(args.scenario), args.out)
    _write((Path(args.out) / "summary.txt").read_text())
    for v in result.violations:
        print(f"violation: {v}", file=sys.stderr)
    return 0 if result.ok else 1


def cmd_report(args):
    from fedstore.report import report

    _write(report(args.dir))
    return 0


# storage and locks

def cmd_locks(args):
    path = Path(args.workspace) / "locks.txt"
    if not path.is_file():
        raise FedStoreError(f"{path}: no lock table dump in this workspace")
    sections, current = {}, None
    for line in path.read_text().splitlines():
        if line.startswith("LOCKSERVER "):
            current = line.split()[1]
            sections[current] = []
        sections[current].append(line)
    if args.server is not None:
        if args.server not in sections:
            raise FedStoreError(f"no lock server {args.server!r}")
        sections = {args.server: sections[args.server]}
    for lines in sections.values():
        _write("\n".join(lines))
    return 0


def purge_preview(server, policy, now):
    """What purge_scan would remove right now, without removing it."""
    from fedstore.storage import mss_key, purge_candidates

    disk = server.disk
    if disk.usage_pct() < policy.usage_trigger:
        return []
    used, out = disk.used, []
    for path in purge_candidates(disk.sizes, disk.access, now, policy.age_threshold,
                                 lambda p: mss_key(p) in server.mss):
        if not policy.purge_all_eligible and 100.0 * used / disk.capacity < policy.usage_trigger:
            break
        out.append(path)
        used -= disk.sizes[path]
    return out


def cmd_purge(args):
    from fedstore.clock import DAY
    from fedstore.storage import PurgePolicy

    site = _site(args)
    if args.server not in site.servers:
        raise FedStoreError(f"no data server {args.server!r}")
    srv = site.servers[args.server]
    purge = site.scenario.purge
    policy = PurgePolicy((args.age_days if args.age_days is not None else purge.age_days) * DAY,
                         args.trigger if args.trigger is not None else purge.usage_trigger)
    if args.dry_run:
        paths = purge_preview(srv, policy, site.clock.now)
    else:
        paths = srv.purge_scan(policy)
        site.save()
    verb = "would purge" if args.dry_run else "purged"
    for p in paths:
        print(f"{verb}\t{p}")
    print(f"# {srv.host}: {len(paths)} files, usage {srv.disk.usage_pct():.1f}%")
    return 0


def cmd_histo(args):
    from fedstore.storage import access_histogram, histogram_csv

    site = _site(args)
    _write(histogram_csv(access_histogram(site.ana_servers, args.bucket, site.clock.now)))
    return 0


# sweeps

def cmd_sweep(args):
    from fedstore.sweep import SweepJob, execute_sweep, plan_sweep, publish_collections, qa_check

    site = _site(args)
    source, dest = site.fed(args.source), site.fed(args.dest)
    bridge = site.fed(args.bridge) if args.bridge else None
    name = args.job or f"{source.name}-to-{dest.name}"
    journal = site.sweep_dir / f"{name}.sweep"
    env = site.sweep_env()
    if args.action == "plan" or not journal.is_file():
        job = plan_sweep(source, dest, bridge, site.sweep_dir, name)
    else:
        job = SweepJob.load(journal)
    if args.action == "run":
        if job.candidates:
            execute_sweep(job, env, streams=args.streams)
        for cname, issues in sorted(qa_check(job, env).items()):
            print(f"qa\t{cname}\t{'; '.join(issues) if issues else 'pass'}")
    elif args.action == "publish":
        if not job.qa:
            qa_check(job, env)
        for cname in publish_collections(job, env):
            print(f"published\t{cname}")
    site.save()
    print(f"# {job.name}: {len(job.candidates)} candidates, {len(job.copied)} copied, "
          f"{len(job.published)} collections published")
    return 0


# remote export and import

def cmd_export(args):
    from fedstore.importer import export_dataset

    site = _site(args)
    dropzone = Path(args.dropzone) if args.dropzone else site.dropzone
    pieces = export_dataset(args.site, [Path(f) for f in args.files], args.limit, dropzone,
                            cycle=args.cycle, clock=site.clock)
    for ds in pieces:
        print(f"{ds.id}\t{len(ds.files)}\t{ds.size}")
    return 0


def cmd_import_run(args):
    from fedstore.importer import ImportTarget, run_importer
    from fedstore.site import IMPORT, host_of

    site = _site(args)
    fed_name = args.fed or IMPORT
    server = site.servers.get(host_of(fed_name))
    if server is None:
        raise FedStoreError(f"no data server for federation {fed_name!r}")
    dropzone = Path(args.dropzone) if args.dropzone else site.dropzone
    target = ImportTarget(site.fed(fed_name), server, site.registry, site.clock, dropzone)
    records = run_importer(target, workers=args.workers)
    site.save()
    for r in records:
        print(f"{r.dataset}\t{r.status}\t{r.reason}".rstrip())
    return 1 if any(r.status != "done" for r in records) else 0


def cmd_import_query(args):
    from fedstore.importer import REGISTRY, ImportRegistry

    path = Path(args.registry) if args.registry else Path(args.workspace) / REGISTRY
    registry = ImportRegistry(path)
    for r in registry.query(site=args.site, status=args.status, since=args.since,
                            until=args.until, db=args.db):
        print(r.encode())
    return 0


# admin pipeline

def cmd_select(args):
    from fedstore.admintool import SelectionCriteria, select_databases, selection_text

    site = _site(args)
    criteria = SelectionCriteria.parse(args.include, args.exclude, args.after, args.before)
    feds = [site.fed(n) for n in args.fed] if args.fed else site.store.federations()
    _write(selection_text(select_databases(feds, criteria)))
    return 0


def cmd_plan(args):
    from fedstore.admintool import build_command_files, parse_selection, write_command_files

    site = _site(args)
    text = Path(args.selection).read_text() if args.selection else sys.stdin.read()
    selection = parse_selection(text, site.store)
    ops = [o for o in args.ops.split(",") if o]
    op_args = dict(a.split("=", 1) for a in args.arg)
    files = build_command_files(selection, ops, op_args)
    out = Path(args.out) if args.out else _next_plan_dir(site.root / "plans")
    for path in write_command_files(files, out):
        print(path)
    return 0


def _next_plan_dir(base):
    n = 1
    while (base / f"{n:03d}").exists():
        n += 1
    return base / f"{n:03d}"


def cmd_exec(args):
    from fedstore.admintool import AdminContext, CommandFile, execute_plan

    site = _site(args)
    paths = args.files or [line.strip() for line in sys.stdin if line.strip()]
    files = [CommandFile.load(p) for p in paths]
    ctx = AdminContext(site.store, site.servers, site.mss, site.clock,
                       backup_dir=site.root / "backups")
    report = execute_plan(files, ctx, streams=args.streams)
    site.save()
    _write(report.text())
    for f in report.files:
        for err in f.errors:
            print(f"error\t{f.op}\t{err}", file=sys.stderr)
    return 1 if report.failed else 0


def build_parser():
    p = argparse.ArgumentParser(prog="fedstore", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"fedstore {__version__}")
    p.add_argument("-w", "--workspace", default=os.environ.get("FEDSTORE_WORKSPACE", "."),
                   help="workspace directory left by 'fedstore run'")
    # also accepted after the subcommand name
    ws = argparse.ArgumentParser(add_help=False)
    ws.add_argument("-w", "--workspace", default=argparse.SUPPRESS)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("run", help="run a scenario into a fresh directory")
    s.add_argument("--scenario", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_run)

    s = sub.add_parser("report", help="check artifacts, write timeline, redraw figures")
    s.add_argument("dir")
    s.set_defaults(func=cmd_report)

    s = sub.add_parser("locks", parents=[ws], help="lock table dump")
    s.add_argument("server", nargs="?")
    s.set_defaults(func=cmd_locks)

    s = sub.add_parser("purge", parents=[ws], help="age-based purge of one data server")
    s.add_argument("--server", required=True)
    s.add_argument("--dry-run", action="store_true")
    s.add_argument("--age-days", type=int)
    s.add_argument("--trigger", type=float, help="usage percent that starts a purge")
    s.set_defaults(func=cmd_purge)

    s = sub.add_parser("histo", parents=[ws], help="access-age histogram of analysis disks")
    s.add_argument("--bucket", type=int, default=86400)
    s.set_defaults(func=cmd_histo)

    s = sub.add_parser("sweep", parents=[ws], help="copy closed databases to an analysis fed")
    s.add_argument("action", choices=["plan", "run", "publish"])
    s.add_argument("--source", required=True)
    s.add_argument("--dest", required=True)
    s.add_argument("--bridge")
    s.add_argument("--job", help="journal name (default SOURCE-to-DEST)")
    s.add_argument("--streams", type=int, default=1)
    s.set_defaults(func=cmd_sweep)

    s = sub.add_parser("export", parents=[ws], help="package files into dropzone pieces")
    s.add_argument("--site", required=True)
    s.add_argument("--limit", type=int, required=True, help="piece size limit in bytes")
    s.add_argument("--cycle", type=int, default=1)
    s.add_argument("--dropzone")
    s.add_argument("files", nargs="+")
    s.set_defaults(func=cmd_export)

    s = sub.add_parser("import", help="dropzone importer and registry")
    isub = s.add_subparsers(dest="import_command", required=True)
    r = isub.add_parser("run", parents=[ws])
    r.add_argument("--dropzone")
    r.add_argument("--fed")
    r.add_argument("--workers", type=int, default=1)
    r.set_defaults(func=cmd_import_run)
    q = isub.add_parser("query", parents=[ws])
    q.add_argument("--registry")
    q.add_argument("--site")
    q.add_argument("--status")
    q.add_argument("--db")
    q.add_argument("--since", type=int)
    q.add_argument("--until", type=int)
    q.set_defaults(func=cmd_import_query)

    s = sub.add_parser("select", parents=[ws], help="select databases by attribute")
    s.add_argument("--fed", action="append", default=[])
    s.add_argument("--include", action="append", default=[], metavar="ATTR=V1,V2")
    s.add_argument("--exclude", action="append", default=[], metavar="ATTR=V1,V2")
    s.add_argument("--after", type=int, help="mtime lower bound, inclusive")
    s.add_argument("--before", type=int, help="mtime upper bound, exclusive")
    s.set_defaults(func=cmd_select)

    s = sub.add_parser("plan", parents=[ws], help="turn a selection into command files")
    s.add_argument("--ops", required=True)
    s.add_argument("--arg", action="append", default=[], metavar="OP=VALUE")
    s.add_argument("--selection", help="selection file (default stdin)")
    s.add_argument("--out", help="plan directory (default WORKSPACE/plans/NNN)")
    s.set_defaults(func=cmd_plan)

    s = sub.add_parser("exec", parents=[ws], help="execute command files in order")
    s.add_argument("--streams", type=int, default=1)
    s.add_argument("files", nargs="*", help="command files (default: paths on stdin)")
    s.set_defaults(func=cmd_exec)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except FedStoreError as exc:
        print(f"fedstore: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
