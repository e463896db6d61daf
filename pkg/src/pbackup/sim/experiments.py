"""Experiment specs, the metrics log, and the report tables built from it."""
from __future__ import annotations

import csv
import dataclasses
import json
import math
import random
import statistics
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

from ..contracts import EngineConfig
from ..model import ContractState, PeerId, PolicyConfig, derive_peer_id
from ..node import Node, NodeParams
from ..optimizer import OptimizerConfig
from ..protocol import Note
from ..simnet import AvailabilitySchedule, Topology, read_topology, read_traces, ttl_distance
from ..utility import estimate_transfer_duration
from .engine import Simulation, register_descriptors
from .synchro import SweepParams, report_synchro_experiment, run_sweep
from .traces import DAY, TraceParams, synthesize_traces

MB = 1_000_000


class SpecError(ValueError):
    """The experiment spec is malformed or inconsistent."""


@dataclass(frozen=True)
class TraceSpec:
    profile: str = "lab"
    mean_availability: float = 0.13
    spread: float = 6.0
    min_availability: float = 0.02
    session_median_h: float = 4.0
    file: str | None = None


@dataclass(frozen=True)
class TopologySpec:
    kind: str = "flat"  # flat | regions | file
    regions: int = 2
    sites_per_region: int = 4
    intra_region: tuple[float, float] = (1, 2)
    inter_region: tuple[float, float] = (3, 8)
    file: str | None = None
    sites_file: str | None = None


@dataclass(frozen=True)
class DataSpec:
    chunks_per_node: tuple[int, int] = (10, 10)  # inclusive uniform range
    chunk_size: int = 50 * MB
    storage: tuple[tuple[int, float], ...] = ((10_000 * MB, 1.0),)  # (bytes, weight)
    bandwidth: tuple[float, ...] = (500_000.0,)  # cycled over nodes
    modify_daily: bool = True


@dataclass(frozen=True)
class SynchroSpec:
    count: int = 5
    relay_tick: float = 60.0
    sweep: tuple[int, ...] = (0, 1, 3, 5, 10)
    messages: int = 20000


@dataclass(frozen=True)
class ExperimentSpec:
    name: str = "experiment"
    kind: str = "placement"  # placement | synchro_sweep
    nodes: int = 48
    duration_days: float = 3.0
    warmup_days: float = 14.0
    seed: int = 1
    latency: float = 0.05
    traces: TraceSpec = field(default_factory=TraceSpec)
    topology: TopologySpec = field(default_factory=TopologySpec)
    data: DataSpec = field(default_factory=DataSpec)
    policy: PolicyConfig = field(default_factory=PolicyConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    engine: EngineConfig = field(default_factory=EngineConfig)
    synchro: SynchroSpec = field(default_factory=SynchroSpec)
    base_dir: str = "."

    @property
    def duration(self) -> float:
        return self.duration_days * DAY

    @property
    def warmup(self) -> float:
        return self.warmup_days * DAY


def _build(cls, raw: Any, path: str):
    if raw is None:
        return cls()
    if not isinstance(raw, dict):
        raise SpecError(f"{path}: expected a mapping")
    names = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(raw) - set(names))
    if unknown:
        raise SpecError(f"{path}: unknown keys {unknown}")
    kwargs = {}
    for k, v in raw.items():
        default = getattr(cls(), k) if _has_default(cls) else None
        if isinstance(v, list):
            v = tuple(tuple(x) if isinstance(x, list) else x for x in v)
        if isinstance(default, float) and isinstance(v, int):
            v = float(v)
        kwargs[k] = v
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise SpecError(f"{path}: {exc}") from exc


def _has_default(cls) -> bool:
    try:
        cls()
        return True
    except TypeError:
        return False


SECTIONS = {
    "traces": TraceSpec, "topology": TopologySpec, "data": DataSpec, "policy": PolicyConfig,
    "optimizer": OptimizerConfig, "engine": EngineConfig, "synchro": SynchroSpec,
}


def spec_from_dict(raw: dict, base_dir: str = ".") -> ExperimentSpec:
    if not isinstance(raw, dict):
        raise SpecError("spec must be a mapping")
    top = {f.name for f in dataclasses.fields(ExperimentSpec)}
    unknown = sorted(set(raw) - top)
    if unknown:
        raise SpecError(f"unknown keys {unknown}")
    kwargs: dict[str, Any] = {"base_dir": base_dir}
    for k, v in raw.items():
        kwargs[k] = _build(SECTIONS[k], v, k) if k in SECTIONS else v
    if "optimizer" not in raw or "N_est" not in (raw.get("optimizer") or {}):
        opt = kwargs.get("optimizer", OptimizerConfig())
        kwargs["optimizer"] = dataclasses.replace(opt, N_est=int(kwargs.get("nodes", 48)))
    try:
        spec = ExperimentSpec(**kwargs)
    except (TypeError, ValueError) as exc:
        raise SpecError(str(exc)) from exc
    if spec.kind not in ("placement", "synchro_sweep"):
        raise SpecError(f"unknown experiment kind {spec.kind!r}")
    if spec.nodes < 2 or spec.duration_days < 0 or spec.warmup_days < 0:
        raise SpecError("need at least 2 nodes and non-negative durations")
    return spec


def load_spec(path: str | Path) -> ExperimentSpec:
    path = Path(path)
    try:
        raw = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise SpecError(f"{path}: {exc}") from exc
    return spec_from_dict(raw or {}, str(path.parent))


# ----- metrics log -----


def _plain(v):
    if isinstance(v, PeerId):
        return v.hex()
    if isinstance(v, float) and not math.isfinite(v):
        return repr(v)
    if isinstance(v, (list, tuple)):
        return [_plain(x) for x in v]
    if isinstance(v, dict):
        return {str(k): _plain(x) for k, x in v.items()}
    if hasattr(v, "owner") and hasattr(v, "index"):  # ChunkId
        return str(v)
    return v


@dataclass
class MetricsLog:
    records: list[dict] = field(default_factory=list)

    def add(self, rtype: str, t: float, **data) -> None:
        self.records.append({"type": rtype, "t": t, **{k: _plain(v) for k, v in data.items()}})

    def of(self, rtype: str) -> list[dict]:
        return [r for r in self.records if r["type"] == rtype]

    def to_ndjson(self) -> str:
        return "".join(json.dumps(r, sort_keys=True) + "\n" for r in self.records)

    def write(self, path: str | Path) -> None:
        Path(path).write_text(self.to_ndjson())

    @classmethod
    def read(cls, path: str | Path) -> "MetricsLog":
        return cls([json.loads(line) for line in Path(path).read_text().splitlines() if line])


# ----- building a placement run -----


def sim_keys(n: int) -> dict[PeerId, bytes]:
    keys = {}
    for i in range(n):
        k = f"sim-node-{i}".encode()
        keys[derive_peer_id(k)] = k
    return keys


def build_topology(spec: ExperimentSpec, order: list[PeerId], rng: random.Random) -> Topology:
    t = spec.topology
    if t.kind == "flat":
        return Topology({p: "lan" for p in order})
    if t.kind == "file":
        if not t.file or not t.sites_file:
            raise SpecError("topology kind 'file' needs file and sites_file")
        base = Path(spec.base_dir)
        with open(base / t.sites_file, newline="") as f:
            sites = {PeerId.from_hex(r["peer_id"]): r["site"] for r in csv.DictReader(f)}
        return read_topology(base / t.file, sites)
    if t.kind != "regions":
        raise SpecError(f"unknown topology kind {t.kind!r}")
    labels = [f"r{r}s{s}" for r in range(t.regions) for s in range(t.sites_per_region)]
    topo = Topology({p: labels[i % len(labels)] for i, p in enumerate(order)})
    for i, a in enumerate(labels):
        for b in labels[i + 1:]:
            lo, hi = t.intra_region if a[:2] == b[:2] else t.inter_region
            topo.set_distance(a, b, float(rng.randint(int(lo), int(hi))))
    return topo


def build_traces(spec: ExperimentSpec, order: list[PeerId]) -> dict[PeerId, AvailabilitySchedule]:
    tr = spec.traces
    total = spec.warmup + spec.duration
    if tr.file:
        traces = read_traces(Path(spec.base_dir) / tr.file)
        missing = [p for p in order if p not in traces]
        if missing:
            raise SpecError(f"trace file lacks {len(missing)} peers")
        return traces
    params = TraceParams(tr.profile, tr.mean_availability, tr.spread, tr.min_availability,
                         tr.session_median_h * 3600.0)
    try:
        return synthesize_traces(order, params, max(total, DAY), spec.seed)
    except ValueError as exc:
        raise SpecError(str(exc)) from exc


class PlacementRun:
    """Full-node simulation recording replica, load and utility metrics."""

    def __init__(self, spec: ExperimentSpec, log: MetricsLog | None = None):
        self.spec = spec
        self.log = log or MetricsLog()
        rng = random.Random(spec.seed)
        self.keys = sim_keys(spec.nodes)
        order = list(self.keys)  # creation order, independent of hashing
        self.traces = build_traces(spec, order)
        self.topo = build_topology(spec, order, rng)
        params = NodeParams(spec.policy, spec.optimizer, spec.engine, relay_tick=spec.synchro.relay_tick)
        d = spec.data
        weights = [w for _, w in d.storage]
        self.nodes: dict[PeerId, Node] = {}
        self.own_bytes: dict[PeerId, int] = {}
        self.storage: dict[PeerId, int] = {}
        for i, p in enumerate(order):
            nchunks = rng.randint(*d.chunks_per_node)
            storage = rng.choices([s for s, _ in d.storage], weights)[0]
            own = nchunks * d.chunk_size
            node = Node(p, params, bandwidth=d.bandwidth[i % len(d.bandwidth)], quota=max(0, storage - own),
                        seed=rng.randrange(2**32), dist=self._dist_fn(p))
            node.add_data(nchunks, d.chunk_size)
            self.nodes[p] = node
            self.own_bytes[p] = own
            self.storage[p] = storage
        registry = register_descriptors(self.keys, self.topo.sites, spec.synchro.count, rng)
        self.start = spec.warmup
        self.sim = Simulation(self.nodes, self.traces, seed=spec.seed, start=self.start, latency=spec.latency,
                              registry=registry, on_note=self._on_note)
        self.versions: dict = {}  # chunk -> {version: [created_at, [peers]]}
        self.migrations = 0
        self.extra_hooks: list = []

    def _dist_fn(self, me: PeerId):
        return lambda peer: ttl_distance(me, peer, self.topo)

    def _refresh_availability(self, now: float) -> None:
        for p, n in self.nodes.items():
            tr = self.traces[p]
            # no history yet: bootstrap from the first simulated day
            n.p_av = tr.decayed_availability(now) if now > 0 else tr.availability(0.0, DAY)

    def _track_versions(self, now: float) -> None:
        for p, n in self.nodes.items():
            for chunk, entry in n.catalog.entries.items():
                self.versions.setdefault(chunk, {})[entry.meta.version] = [now, []]

    def _on_note(self, peer: PeerId, note: Note, now: float) -> None:
        k = note.kind
        if k == "acked":
            chunk, rep, w = note.data["chunk"], note.data["peer"], note.data["version"]
            owner_av = self.nodes[peer].p_av
            vs = self.versions.get(chunk, {})
            for v in sorted(vs):
                if v > w:
                    break
                created, peers = vs[v]
                if rep in peers or len(peers) >= self.spec.policy.N_r:
                    continue
                peers.append(rep)
                dt = now - created
                self.log.add("replica", now, chunk=chunk, owner=peer, version=v, ordinal=len(peers),
                             abs=dt, rel=dt * owner_av, peer=rep)
            for v in [v for v, (_, ps) in vs.items() if len(ps) >= self.spec.policy.N_r]:
                del vs[v]
        elif k == "commit":
            if note.data["migration"]:
                self.migrations += 1
            self.log.add("commit", now, chunk=note.data["chunk"], migration=note.data["migration"],
                         peers=note.data["peers"])
        elif k == "transfer":
            self.log.add("transfer", now, peer=peer, chunk=note.data["chunk"], version=note.data["version"],
                         bytes=note.data["bytes"], source=note.data["source"])
        elif k in ("swapped", "added", "delete_ordered", "rebuilt", "rebuild_failed"):
            self.log.add(k, now, owner=peer, **note.data)

    def _day_end(self, now: float) -> None:
        day = round((now - self.start) / DAY)
        lo = now - DAY
        for p, n in self.nodes.items():
            self.log.add("peer_day", now, day=day, peer=p, p_av=n.p_av,
                         online=self.traces[p].online_time(lo, now) > 0,
                         contracted=n.replicas.contracted_bytes(), stored=n.replicas.stored_bytes(),
                         storage=self.storage[p], own=self.own_bytes[p])
        utils = []
        for n in self.nodes.values():
            for chunk in n.catalog.entries:
                u = n.chunk_utility(chunk, now)
                if u is not None:
                    utils.append(u)
        if utils:
            self.log.add("utility", now, day=day, min=min(utils), mean=statistics.fmean(utils))
        self._refresh_availability(now)
        if self.spec.data.modify_daily:
            for p, n in self.nodes.items():
                self.sim.execute(p, n.modify_all(now))
            self._track_versions(now)

    def _final(self, now: float) -> None:
        policy = self.spec.policy
        for p, n in self.nodes.items():
            for chunk, entry in n.catalog.entries.items():
                reps = entry.active_replicators()
                self.log.add("placement", now, chunk=chunk, owner=p, replicators=sorted(reps),
                             dist=[n.dist(r) for r in sorted(reps)],
                             committed=sum(1 for c in entry.contracts.values() if c.state is ContractState.COMMITTED))
        for p, n in self.nodes.items():
            prof = n.own_profile(now)
            e = estimate_transfer_duration(prof.load, prof)
            self.log.add("window", now, peer=p, load=prof.load, bandwidth=prof.bandwidth_B, p_av=prof.p_av,
                         duration=e, excess=max(0.0, e - policy.Des_Tb), exceeds=e > policy.Des_Tb)
        self.log.add("end", now, sent=self.sim.sent, failed=self.sim.failed, migrations=self.migrations)

    def run(self) -> MetricsLog:
        if self.spec.duration <= 0:
            return self.log
        self._refresh_availability(self.start)
        self._track_versions(self.start)
        self.sim.start_timers()
        end = self.start + self.spec.duration
        days = int(math.floor(self.spec.duration / DAY + 1e-9))
        hooks = [(self.start + k * DAY, self._day_end) for k in range(1, days + 1)]
        self.sim.run_until(end + 1e-6, hooks + self.extra_hooks)
        self._final(end)
        return self.log


def run_sweep_spec(spec: ExperimentSpec, log: MetricsLog | None = None) -> MetricsLog:
    log = log or MetricsLog()
    order = list(sim_keys(spec.nodes))
    traces = build_traces(spec, order)
    horizon = spec.warmup + spec.duration
    params = SweepParams(spec.synchro.sweep, spec.synchro.messages, spec.synchro.relay_tick, spec.latency,
                         (spec.warmup, spec.warmup + 0.6 * spec.duration), spec.seed)
    results = run_sweep(traces, params, horizon)
    for s, res in results.items():
        for r in res:
            log.add("message", r.sent_at, synchro=s, survived=r.survived, executed=r.executed_at < math.inf,
                    delay=r.receiver_delay if r.executed_at < math.inf else None)
    for row in report_synchro_experiment(results):
        log.add("synchro_row", 0.0, **dataclasses.asdict(row))
    return log


def run(spec: ExperimentSpec) -> MetricsLog:
    if spec.kind == "synchro_sweep":
        if spec.duration <= 0:
            return MetricsLog()
        return run_sweep_spec(spec)
    return PlacementRun(spec).run()


# ----- reports -----


def report_synchro_table(log: MetricsLog) -> list[dict]:
    return [{k: v for k, v in r.items() if k not in ("type", "t")} for r in log.of("synchro_row")]


def report_placement_experiment(log: MetricsLog, min_storage: float | None = None) -> list[dict]:
    """Per day: mean, std and CV of (replicated bytes / p_av) over eligible peers."""
    days: dict[int, list[dict]] = {}
    for r in log.of("peer_day"):
        days.setdefault(r["day"], []).append(r)
    rows = []
    for day in sorted(days):
        recs = days[day]
        floor = min_storage
        if floor is None:
            floor = 3 * statistics.fmean(r["own"] for r in recs)
        ratios = [r["contracted"] / MB / r["p_av"] for r in recs
                  if r["online"] and r["storage"] >= floor and r["p_av"] > 0]
        if not ratios:
            continue
        mean = statistics.fmean(ratios)
        std = statistics.pstdev(ratios)
        rows.append({"day": day, "peers": len(ratios), "mean": mean, "std": std,
                     "cv": std / mean if mean > 0 else math.inf})
    return rows


def report_backup_durations(log: MetricsLog, from_time: float | None = None, ordinals=(1, 2, 3)) -> dict:
    """Per replica ordinal: mean and max owner-relative time plus CDF points."""
    recs = log.of("replica")
    if from_time is not None:
        recs = [r for r in recs if r["t"] - r["abs"] >= from_time]
    out = {}
    for k in ordinals:
        rel = sorted(r["rel"] for r in recs if r["ordinal"] == k)
        ab = [r["abs"] for r in recs if r["ordinal"] == k]
        if not rel:
            out[k] = {"count": 0, "mean": math.nan, "max": math.nan, "mean_abs": math.nan, "cdf": []}
            continue
        cdf = [(x, (i + 1) / len(rel)) for i, x in enumerate(rel)]
        out[k] = {"count": len(rel), "mean": statistics.fmean(rel), "max": rel[-1],
                  "mean_abs": statistics.fmean(ab), "cdf": cdf}
    return out


def report_geo_window(log: MetricsLog) -> dict:
    dists = [d for r in log.of("placement") for d in r["dist"]]
    windows = log.of("window")
    excess = [w["excess"] for w in windows if w["exceeds"]]
    return {
        "mean_ttl": statistics.fmean(dists) if dists else math.nan,
        "std_ttl": statistics.pstdev(dists) if len(dists) > 1 else 0.0,
        "replicas": len(dists),
        "violators": sum(1 for w in windows if w["exceeds"]),
        "mean_excess": statistics.fmean(excess) if excess else 0.0,
        "max_excess": max(excess, default=0.0),
        "max_duration": max((w["duration"] for w in windows), default=0.0),
    }


def write_csv(path: str | Path, rows: list[dict]) -> None:
    if not rows:
        Path(path).write_text("")
        return
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)


def write_reports(log: MetricsLog, out: str | Path, spec: ExperimentSpec) -> list[Path]:
    """MetricsLog as NDJSON plus the four report tables as CSV."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    written = [out / "metrics.ndjson"]
    log.write(written[0])
    tables = {
        "synchro.csv": report_synchro_table(log),
        "placement.csv": report_placement_experiment(log),
        "geo_window.csv": [report_geo_window(log)] if log.of("placement") else [],
    }
    dur = report_backup_durations(log)
    tables["durations.csv"] = [{"ordinal": k, **{x: v for x, v in d.items() if x != "cdf"}} for k, d in dur.items()]
    for k, d in dur.items():
        p = out / f"cdf_replica{k}.csv"
        with open(p, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["relative_seconds", "fraction"])
            w.writerows(d["cdf"])
        written.append(p)
    for name, rows in tables.items():
        write_csv(out / name, rows)
        written.append(out / name)
    return written
