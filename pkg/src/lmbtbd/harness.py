"""Monte Carlo experiment runner.

Every run regenerates its measurements and initial track priors from
substreams keyed by the run id alone, so all filter variants of a run see
the same data.  Filter randomness is keyed by (run, variant).  Runs are
independent and may execute in a process pool; results are reassembled
in run order, so the output does not depend on the worker count.
"""
import csv
import io
import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .exceptions import ConfigError
from .filters import VARIANTS, make_filter
from .metrics import ospa, rmsospa
from .models import (POSITION_INDEX, GroundTruth, InitialTrack, ScenarioModel,
                     build_scenario, simulate_measurements)
from .rng import Streams

log = logging.getLogger(__name__)

CSV_HEADER = ("run", "step", "filter", "ospa_m", "card_est", "card_true", "wall_ms")
WORKERS_ENV = "LMBTBD_WORKERS"
# Steps after the crossing targets have separated again.
POST_CROSSING_WINDOW = (56, 100)

# Stream-key roots below the master seed.
_DATA, _FILTER, _INIT = 0, 1, 2


@dataclass
class RunConfig:
    """Experiment configuration, usually read from JSON.

    ``filters`` may be one variant name or a list of them.  ``n_steps``
    caps the number of filter steps (step 0 is the prior and is not
    counted); ``record_wall_time = False`` writes zeros in
    the timing column so that repeated runs give byte-identical files.
    """

    scenario: str
    filters: List[str]
    runs: int = 1
    master_seed: int = 0
    n_particles: int = 500
    sir_particles: int = 10000
    n_outer: int = 1
    n_sweeps: int = 20
    umcmc_steps: int = 20
    permutation_cap: int = 6
    prune_threshold: float = 1e-4
    gate_radius: Optional[float] = None
    sensors_x: int = 21
    sensors_y: int = 12
    n_steps: Optional[int] = None
    kmeans_init: int = 10
    record_wall_time: bool = True
    out: Optional[str] = None

    def __post_init__(self):
        if isinstance(self.filters, str):
            self.filters = [self.filters]
        self.filters = list(self.filters)
        if not self.filters:
            raise ConfigError("field 'filters' must name at least one variant")
        for f in self.filters:
            if f not in VARIANTS:
                raise ConfigError(f"field 'filters': unknown filter '{f}'; "
                                  f"options: {', '.join(VARIANTS)}")
        if int(self.runs) < 1:
            raise ConfigError("field 'runs' must be >= 1")
        for name in ("n_particles", "sir_particles", "n_outer", "sensors_x", "sensors_y",
                     "permutation_cap", "kmeans_init"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"field '{name}' must be >= 1")
        for name in ("n_sweeps", "umcmc_steps"):
            if int(getattr(self, name)) < 0:
                raise ConfigError(f"field '{name}' must be >= 0")
        if self.n_steps is not None and int(self.n_steps) < 1:
            raise ConfigError("field 'n_steps' must be >= 1")

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        if not isinstance(d, dict):
            raise ConfigError("config must be a JSON object")
        known = set(cls.__dataclass_fields__)
        for key in ("scenario", "filters"):
            if key not in d:
                raise ConfigError(f"missing required field '{key}'")
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown field(s): {', '.join(unknown)}")
        try:
            return cls(**d)
        except (TypeError, ValueError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(str(exc)) from exc

    @classmethod
    def from_json(cls, path) -> "RunConfig":
        try:
            d = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
        return cls.from_dict(d)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class RunRecord:
    run: int
    step: int
    filter: str
    ospa_m: float
    card_est: int
    card_true: int
    wall_ms: float


@dataclass
class ExperimentResult:
    records: List[RunRecord]
    summary: dict
    failures: List[Tuple[int, str, str]] = field(default_factory=list)


def scenario_for(cfg: RunConfig) -> Tuple[ScenarioModel, GroundTruth]:
    model, truth = build_scenario(cfg.scenario, n_sensors_x=cfg.sensors_x,
                                  n_sensors_y=cfg.sensors_y)
    if cfg.n_steps is not None and cfg.n_steps + 1 < model.n_steps:
        model.n_steps = int(cfg.n_steps) + 1
        truth = GroundTruth(truth.targets, model.n_steps)
    return model, truth


def perturbed_tracks(tracks: Sequence[InitialTrack], rng) -> List[InitialTrack]:
    """Track priors with means drawn around the true initial states."""
    out = []
    for tr in tracks:
        noise = np.sqrt(tr.cov_scale) * rng.standard_normal(tr.mean.size)
        mean = tr.mean + noise if tr.perturb else tr.mean.copy()
        out.append(InitialTrack(mean, tr.cov_scale, tr.existence, tr.perturb))
    return out


def _filter_params(cfg: RunConfig, variant: str) -> dict:
    if variant == "sir":
        return {"n_particles": cfg.sir_particles, "kmeans_init": cfg.kmeans_init}
    return {"n_particles": cfg.n_particles, "n_outer": cfg.n_outer, "n_sweeps": cfg.n_sweeps,
            "umcmc_steps": cfg.umcmc_steps, "permutation_cap": cfg.permutation_cap,
            "prune_threshold": cfg.prune_threshold, "gate_radius": cfg.gate_radius,
            "kmeans_init": cfg.kmeans_init}


def run_single(cfg: RunConfig, run: int):
    """All configured variants on one run; returns (records, failures)."""
    model, truth = scenario_for(cfg)
    root = Streams(cfg.master_seed)
    Z = simulate_measurements(model, truth, root.get(_DATA, run))
    tracks = perturbed_tracks(model.initial_tracks, root.get(_INIT, run))
    records, failures = [], []
    for variant in cfg.filters:
        flt = make_filter(variant, model, initial_tracks=tracks,
                          random_state=root.child(_FILTER, run, VARIANTS.index(variant)),
                          **_filter_params(cfg, variant))
        try:
            flt.fit(Z)
        except Exception as exc:  # a failed run must not stop the experiment
            log.warning("run %d, filter %s failed: %s", run, variant, exc)
            failures.append((run, variant, f"{type(exc).__name__}: {exc}"))
            continue
        for k, (est, ms) in enumerate(zip(flt.estimates_, flt.wall_ms_), start=1):
            truth_pos = truth.states_at(k)[:, list(POSITION_INDEX)]
            records.append(RunRecord(run, k, variant, ospa(est.positions, truth_pos),
                                     est.cardinality, truth.cardinality(k),
                                     ms if cfg.record_wall_time else 0.0))
    return records, failures


def _workers(workers: Optional[int]) -> int:
    if workers is None:
        raw = os.environ.get(WORKERS_ENV, "1")
        try:
            workers = int(raw)
        except ValueError as exc:
            raise ConfigError(f"{WORKERS_ENV} must be an integer, got '{raw}'") from exc
    return max(1, workers)


def run_experiment(cfg: RunConfig, workers: Optional[int] = None) -> ExperimentResult:
    """Run every (run, variant) pair and aggregate the records.

    Writes ``records.csv`` and ``summary.json`` into ``cfg.out`` if set.
    """
    n_workers = _workers(workers)
    runs = range(int(cfg.runs))
    if n_workers == 1:
        results = [run_single(cfg, r) for r in runs]
    else:
        with ProcessPoolExecutor(max_workers=n_workers) as pool:
            results = list(pool.map(run_single, [cfg] * len(runs), runs))
    records = [rec for recs, _ in results for rec in recs]
    failures = [f for _, fails in results for f in fails]
    summary = summarize(records, cfg, failures)
    result = ExperimentResult(records, summary, failures)
    if cfg.out:
        write_outputs(result, cfg.out)
    return result


def records_by_variant(records: Sequence[RunRecord]) -> Dict[str, Dict[str, np.ndarray]]:
    """Per-variant (run x step) arrays of ospa, card_est and card_true."""
    out = {}
    for variant in dict.fromkeys(r.filter for r in records):
        recs = [r for r in records if r.filter == variant]
        run_ids = sorted({r.run for r in recs})
        steps = sorted({r.step for r in recs})
        ri = {r: i for i, r in enumerate(run_ids)}
        si = {s: i for i, s in enumerate(steps)}
        arrays = {k: np.full((len(run_ids), len(steps)), np.nan)
                  for k in ("ospa_m", "card_est", "card_true")}
        for r in recs:
            for k in arrays:
                arrays[k][ri[r.run], si[r.step]] = getattr(r, k)
        arrays["runs"] = np.array(run_ids)
        arrays["steps"] = np.array(steps)
        out[variant] = arrays
    return out


def summarize(records: Sequence[RunRecord], cfg: Optional[RunConfig] = None,
              failures: Sequence = ()) -> dict:
    """RMSOSPA per step, its time average, and cardinality statistics."""
    per = records_by_variant(records)
    variants = {}
    for variant, a in per.items():
        rms = rmsospa(a["ospa_m"], axis=0)
        wall = [r.wall_ms for r in records if r.filter == variant]
        variants[variant] = {
            "runs_ok": int(a["runs"].size),
            "steps": a["steps"].tolist(),
            "rmsospa": rms.tolist(),
            "rmsospa_time_avg": float(np.mean(rms)),
            "mean_card_est": np.mean(a["card_est"], axis=0).tolist(),
            "card_true": a["card_true"][0].tolist(),
            "card_accuracy": float(np.mean(a["card_est"] == a["card_true"])),
            "mean_wall_ms": float(np.mean(wall)),
        }
    return {
        "config": cfg.to_dict() if cfg is not None else None,
        "failures": len(failures),
        "failed_runs": [list(f) for f in failures],
        "variants": variants,
    }


def records_to_csv(records: Sequence[RunRecord]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    for r in records:
        w.writerow([r.run, r.step, r.filter, repr(float(r.ospa_m)), r.card_est, r.card_true,
                    f"{r.wall_ms:.3f}"])
    return buf.getvalue()


def read_records(path) -> List[RunRecord]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [RunRecord(int(r["run"]), int(r["step"]), r["filter"], float(r["ospa_m"]),
                      int(r["card_est"]), int(r["card_true"]), float(r["wall_ms"]))
            for r in rows]


def write_outputs(result: ExperimentResult, out) -> Path:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "records.csv").write_text(records_to_csv(result.records))
    (out / "summary.json").write_text(json.dumps(result.summary, indent=2, sort_keys=True))
    return out


def window_means(records: Sequence[RunRecord], variant: str, window=POST_CROSSING_WINDOW):
    """Mean OSPA per run over steps ``window[0]..window[1]`` inclusive."""
    a = records_by_variant([r for r in records if r.filter == variant])[variant]
    sel = (a["steps"] >= window[0]) & (a["steps"] <= window[1])
    return a["runs"], a["ospa_m"][:, sel].mean(axis=1)
