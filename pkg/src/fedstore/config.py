"""Scenario files: ``[section]`` headers and ``key = value`` lines.

Every key has a default, so an empty file is a valid scenario. Unknown
sections or keys are errors: a typo should not silently fall back to a
default.
"""

import configparser
from dataclasses import dataclass, field, fields
from pathlib import Path

from fedstore.errors import ScenarioParseError


@dataclass
class ScenarioSection:
    seed: int = 1
    weeks: int = 4


@dataclass
class ProductionSection:
    reco_federations: int = 2
    sim_federations: int = 1
    clients: int = 8
    events: int = 96
    event_size: int = 2048
    target_db_size: int = 24576
    refill_batch: int = 16
    chs: bool = True
    three_stage: bool = False


@dataclass
class SitesSection:
    names: list = field(default_factory=lambda: ["lyon", "ral"])
    # imported volume relative to locally produced volume
    weight: float = 3.0
    file_size: int = 24576
    piece_limit: int = 100000


@dataclass
class AnalysisSection:
    federations: int = 2
    servers: int = 3
    disk_capacity: int = 2_000_000
    readers_per_day: int = 40
    streams: int = 2
    load_cost: int = 600


@dataclass
class PurgeSection:
    age_days: int = 10
    usage_trigger: float = 95.0


@dataclass
class MaintenanceSection:
    backup: bool = True


@dataclass
class MonitorSection:
    restartable: list = field(default_factory=lambda: ["dataserver", "lockserver"])
    interval: int = 30


@dataclass
class FaultsSection:
    # "week:site" entries
    corrupt_export: list = field(default_factory=list)
    # "week:service" entries, service is a data server host or lock server id
    kill: list = field(default_factory=list)


SECTIONS = {
    "scenario": ScenarioSection,
    "production": ProductionSection,
    "sites": SitesSection,
    "analysis": AnalysisSection,
    "purge": PurgeSection,
    "maintenance": MaintenanceSection,
    "monitor": MonitorSection,
    "faults": FaultsSection,
}


@dataclass
class Scenario:
    scenario: ScenarioSection = field(default_factory=ScenarioSection)
    production: ProductionSection = field(default_factory=ProductionSection)
    sites: SitesSection = field(default_factory=SitesSection)
    analysis: AnalysisSection = field(default_factory=AnalysisSection)
    purge: PurgeSection = field(default_factory=PurgeSection)
    maintenance: MaintenanceSection = field(default_factory=MaintenanceSection)
    monitor: MonitorSection = field(default_factory=MonitorSection)
    faults: FaultsSection = field(default_factory=FaultsSection)

    @property
    def seed(self):
        return self.scenario.seed

    @property
    def weeks(self):
        return self.scenario.weeks

    def faults_for(self, kind, week):
        return [who for w, who in _schedule(getattr(self.faults, kind)) if w == week]

    def text(self):
        """Canonical rendering; parse(text()) == self."""
        out = []
        for name, sec_type in SECTIONS.items():
            sec = getattr(self, name)
            out.append(f"[{name}]")
            for f in fields(sec_type):
                out.append(f"{f.name} = {_render(getattr(sec, f.name))}")
            out.append("")
        return "\n".join(out)


def _render(v):
    if isinstance(v, bool):
        return "yes" if v else "no"
    if isinstance(v, list):
        return ", ".join(str(x) for x in v)
    return str(v)


def _schedule(items):
    out = []
    for item in items:
        week, _, who = item.partition(":")
        out.append((int(week), who))
    return out


def _convert(section, key, raw, default):
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            v = raw.lower()
            if v in ("yes", "true", "1", "on"):
                return True
            if v in ("no", "false", "0", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw.replace("_", ""))
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, list):
            return [x.strip() for x in raw.split(",") if x.strip()]
    except ValueError:
        raise ScenarioParseError(f"[{section}] {key}: bad value {raw!r}") from None
    return raw


def parse_scenario(text):
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ScenarioParseError(str(exc).splitlines()[0]) from None
    sc = Scenario()
    for name in cp.sections():
        if name not in SECTIONS:
            raise ScenarioParseError(f"unknown section [{name}]")
        sec = getattr(sc, name)
        known = {f.name for f in fields(SECTIONS[name])}
        for key, raw in cp.items(name):
            if key not in known:
                raise ScenarioParseError(f"[{name}] unknown key {key!r}")
            setattr(sec, key, _convert(name, key, raw, getattr(sec, key)))
    _validate(sc)
    return sc


def _validate(sc):
    if sc.weeks < 0:
        raise ScenarioParseError("weeks must be >= 0")
    p, a = sc.production, sc.analysis
    if p.reco_federations < 1 or p.sim_federations < 0:
        raise ScenarioParseError("need at least one reconstruction federation")
    if p.clients < 1 or p.events < 0 or p.event_size < 1 or p.target_db_size < p.event_size:
        raise ScenarioParseError("bad production sizing")
    if a.federations < 1 or a.servers < 1 or a.streams < 1:
        raise ScenarioParseError("need at least one analysis federation, server and stream")
    if sc.sites.file_size > sc.sites.piece_limit:
        raise ScenarioParseError("file_size exceeds piece_limit")
    for kind in ("corrupt_export", "kill"):
        for item in getattr(sc.faults, kind):
            week, sep, who = item.partition(":")
            if not sep or not week.strip().isdigit() or not who:
                raise ScenarioParseError(f"[faults] {kind}: expected week:name, got {item!r}")
    for item in sc.faults.corrupt_export:
        if item.partition(":")[2] not in sc.sites.names:
            raise ScenarioParseError(f"[faults] corrupt_export: unknown site in {item!r}")


def load_scenario(path):
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ScenarioParseError(f"{path}: {exc.strerror}") from None
    return parse_scenario(text)
