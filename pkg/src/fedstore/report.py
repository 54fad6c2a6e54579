"""Figures from a scenario workspace.

The figures are drawn only from the CSV files a run leaves behind, so
``report`` can regenerate them later without rerunning anything.
"""

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from fedstore.clock import DAY  # noqa: E402
from fedstore.errors import MissingArtifacts  # noqa: E402

REQUIRED = ("summary.txt", "histogram.csv", "volumes.csv", "sweeps.csv", "imports.csv",
            "locks.csv")
FIGURES = ("access_pattern.png", "volume_shares.png")
# no timestamps or version strings in the files, so reruns are byte-identical
_PNG_META = {"Software": None}


def _rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def read_summary(out):
    values = {}
    for line in (Path(out) / "summary.txt").read_text().splitlines():
        key, sep, value = line.partition("=")
        if sep and not key.startswith("violation:"):
            values[key] = value
    return values


def check_artifacts(out):
    out = Path(out)
    missing = [name for name in REQUIRED if not (out / name).is_file()]
    if missing:
        raise MissingArtifacts(f"{out}: missing {', '.join(missing)}")


def access_pattern_figure(out):
    rows = _rows(Path(out) / "histogram.csv")
    days = [int(r["bucket_start_seconds"]) / DAY for r in rows]
    counts = [int(r["count"]) for r in rows]
    cum = [float(r["cumulative_percent"]) for r in rows]
    fig, ax = plt.subplots(figsize=(7, 4))
    ax.bar(days, counts, width=0.8, color="tab:blue", label="files")
    ax.set_xlabel("days since last access")
    ax.set_ylabel("files on analysis disks")
    ax2 = ax.twinx()
    ax2.plot(days, cum, color="tab:red", marker="o", label="cumulative %")
    ax2.set_ylim(0, 105)
    ax2.set_ylabel("cumulative %")
    ax.set_title("Analysis disk access pattern")
    fig.tight_layout()
    path = Path(out) / "access_pattern.png"
    fig.savefig(path, metadata=_PNG_META)
    plt.close(fig)
    return path


def volume_shares_figure(out):
    rows = _rows(Path(out) / "volumes.csv")
    labels = [r["category"] for r in rows]
    shares = [float(r["percent"]) for r in rows]
    fig, ax = plt.subplots(figsize=(6, 4))
    bars = ax.bar(labels, shares, color=["tab:green", "tab:orange", "tab:purple"][:len(rows)])
    for bar, pct in zip(bars, shares):
        ax.annotate(f"{pct:.1f}%", (bar.get_x() + bar.get_width() / 2, bar.get_height()),
                    ha="center", va="bottom")
    ax.set_ylim(0, 105)
    ax.set_ylabel("% of stored volume")
    ax.set_title("Stored volume by origin")
    fig.tight_layout()
    path = Path(out) / "volume_shares.png"
    fig.savefig(path, metadata=_PNG_META)
    plt.close(fig)
    return path


def render_figures(out):
    return [access_pattern_figure(out), volume_shares_figure(out)]


def timeline_rows(out):
    """Sweep publications and import outcomes, ordered by simulated time."""
    out = Path(out)
    rows = []
    for r in _rows(out / "sweeps.csv"):
        if r["first_published"]:
            rows.append((int(r["first_published"]), "sweep", r["job"], "publish_begin",
                         r["published"], r["bytes"]))
            rows.append((int(r["last_published"]), "sweep", r["job"], "publish_end",
                         r["published"], r["bytes"]))
    for r in _rows(out / "imports.csv"):
        rows.append((int(r["time"]), "import", r["dataset"], r["status"], r["dbs"],
                     r["bytes"]))
    return sorted(rows)


def write_timeline(out):
    path = Path(out) / "timeline.csv"
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["time", "kind", "name", "event", "dbs", "bytes"])
        w.writerows(timeline_rows(out))
    return path


def report_text(out):
    summary = read_summary(out)
    hist = _rows(Path(out) / "histogram.csv")
    lines = ["volume shares:"]
    for r in _rows(Path(out) / "volumes.csv"):
        lines.append(f"  {r['category']:<15} {int(r['bytes']):>12} bytes {float(r['percent']):7.3f}%")
    if hist:
        lines.append(f"access histogram: {len(hist)} buckets, cumulative ends at "
                     f"{float(hist[-1]['cumulative_percent']):.3f}%")
    else:
        lines.append("access histogram: no files on analysis disks")
    for key in ("imports_done", "imports_failed", "swept_dbs", "published", "purged",
                "stage_events", "incidents", "violations"):
        if key in summary:
            lines.append(f"{key}: {summary[key]}")
    return "\n".join(lines) + "\n"


def report(out):
    """Check a workspace has every run artifact, write the timeline and
    redraw the figures. Returns the text summary."""
    check_artifacts(out)
    write_timeline(out)
    render_figures(out)
    return report_text(out)
