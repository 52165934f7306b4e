"""Error binning, MLE tables and suite output files."""
from __future__ import annotations

import csv
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .scenario import ScenarioConfig, TrajectoryLog, run_scenario

BIN_WIDTH = 2.0
COVERAGE_BASIS = "sensor_to_vehicle_center"

TRAJECTORY_COLUMNS = [
    "trial", "seed", "run", "t", "arc", "truth_x", "truth_y", "truth_yaw", "ndt_x", "ndt_y",
    "rsu_x", "rsu_y", "rsu_stamp", "rsu_points", "fused_x", "fused_y", "fused_yaw", "error", "in_coverage",
]
BINS_COLUMNS = ["trial", "seed", "bin_start", "bin_end", "baseline_min", "fused_min", "region"]
SUMMARY_COLUMNS = [
    "scope", "trial", "seed", "sensor", "region", "start", "end",
    "mle_baseline", "mle_fused", "improvement", "coverage_basis",
]


@dataclass
class Region:
    name: str
    start: float
    end: float
    mle_baseline: float
    mle_fused: float

    @property
    def improvement(self) -> float:
        if not (self.mle_baseline > 0) or math.isnan(self.mle_fused):
            return math.nan
        return 1.0 - self.mle_fused / self.mle_baseline


@dataclass
class MetricsReport:
    bin_edges: np.ndarray
    baseline_min: np.ndarray
    fused_min: np.ndarray
    bin_region: list
    regions: list = field(default_factory=list)

    def region(self, name: str) -> Region:
        for r in self.regions:
            if r.name == name:
                return r
        raise KeyError(name)

    @property
    def coverage(self) -> Region:
        return self.region("coverage")


def coverage_intervals(cfg: ScenarioConfig) -> list:
    road = cfg.road_model
    out = []
    for rc in cfg.rsus:
        iv = road.coverage_interval((rc.x, rc.y), rc.range)
        if iv is not None:
            out.append(iv)
    return out


def bin_minima(arc: np.ndarray, err: np.ndarray, road_length: float, width: float = BIN_WIDTH):
    """Per-bin minimum error over arc-length bins [0, w), [w, 2w), ...; NaN for empty bins."""
    n = int(math.ceil(road_length / width - 1e-9))
    edges = np.arange(n + 1) * width
    idx = np.minimum((arc // width).astype(int), n - 1)
    mins = np.full(n, np.inf)
    np.minimum.at(mins, idx, err)
    mins[np.isinf(mins)] = np.nan
    return edges, mins


def _mean_or_nan(values: np.ndarray) -> float:
    v = values[~np.isnan(values)]
    return float(v.mean()) if v.size else math.nan


def compute_metrics(baseline: TrajectoryLog, fused: TrajectoryLog, cfg: ScenarioConfig) -> MetricsReport:
    """Compare two runs over the same truth track bin by bin."""
    a, b = baseline.arrays(), fused.arrays()
    if a["truth"].shape != b["truth"].shape or not np.array_equal(a["truth"], b["truth"]):
        raise ValueError("baseline and fused logs follow different truth tracks")
    road_length = cfg.road_model.length
    edges, base_min = bin_minima(a["arc"], baseline.errors(), road_length)
    _, fused_min = bin_minima(b["arc"], fused.errors(), road_length)
    mids = (edges[:-1] + edges[1:]) / 2

    intervals = coverage_intervals(cfg)
    inside = np.zeros(mids.shape, dtype=bool)
    per_rsu = []
    for lo, hi in intervals:
        m = (mids >= lo) & (mids <= hi)
        per_rsu.append(m)
        inside |= m

    regions = []
    if intervals:
        lo = min(iv[0] for iv in intervals)
        hi = max(iv[1] for iv in intervals)
        regions.append(Region("coverage", lo, hi, _mean_or_nan(base_min[inside]), _mean_or_nan(fused_min[inside])))
    regions.append(Region("outside", 0.0, road_length, _mean_or_nan(base_min[~inside]),
                          _mean_or_nan(fused_min[~inside])))
    if len(intervals) > 1:
        for i, ((lo, hi), m) in enumerate(zip(intervals, per_rsu)):
            regions.append(Region(f"rsu{i}", lo, hi, _mean_or_nan(base_min[m]), _mean_or_nan(fused_min[m])))
    bin_region = ["coverage" if x else "outside" for x in inside]
    return MetricsReport(edges, base_min, fused_min, bin_region, regions)


@dataclass
class TrialResult:
    trial: int
    seed: int
    baseline: TrajectoryLog
    fused: TrajectoryLog
    report: MetricsReport


def run_trial(cfg: ScenarioConfig, trial: int, no_rsu: bool = False,
              baseline: Optional[TrajectoryLog] = None) -> TrialResult:
    seed = cfg.master_seed + trial
    if baseline is None:
        baseline = run_scenario(cfg.without_rsus(), seed)
    fused = baseline if no_rsu else run_scenario(cfg, seed)
    return TrialResult(trial, seed, baseline, fused, compute_metrics(baseline, fused, cfg))


def _trial_job(args):
    return run_trial(*args)


def run_trials(cfg: ScenarioConfig, trial_count: int, jobs: int = 1, no_rsu: bool = False,
               baselines: Optional[list] = None) -> list:
    baselines = baselines or [None] * trial_count
    args = [(cfg, i, no_rsu, baselines[i]) for i in range(trial_count)]
    if jobs > 1 and trial_count > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(_trial_job, args))
    return [_trial_job(a) for a in args]


@dataclass
class SuiteResult:
    cfg: ScenarioConfig
    trials: list
    aggregate: dict  # region -> {"mle_baseline": (mean, min, max), "mle_fused": ..., "improvement": mean-based}

    def mean(self, region: str, key: str) -> float:
        return self.aggregate[region][key][0]


def aggregate(trials: list) -> dict:
    names = [r.name for r in trials[0].report.regions]
    out = {}
    for name in names:
        regs = [t.report.region(name) for t in trials]
        entry = {}
        for key in ("mle_baseline", "mle_fused"):
            v = np.array([getattr(r, key) for r in regs], dtype=float)
            entry[key] = (float(np.mean(v)), float(np.min(v)), float(np.max(v)))
        b, f = entry["mle_baseline"][0], entry["mle_fused"][0]
        entry["improvement"] = 1.0 - f / b if b > 0 else math.nan
        entry["start"], entry["end"] = regs[0].start, regs[0].end
        out[name] = entry
    return out


def run_suite(cfg: ScenarioConfig, trial_count: Optional[int] = None, out_dir=None, jobs: int = 1,
              no_rsu: bool = False, plot: bool = True) -> SuiteResult:
    """Run seeds master_seed .. master_seed + trial_count - 1 and aggregate."""
    n = cfg.trial_count if trial_count is None else trial_count
    if n < 1:
        raise ValueError("trial_count must be >= 1")
    trials = run_trials(cfg, n, jobs=jobs, no_rsu=no_rsu)
    result = SuiteResult(cfg, trials, aggregate(trials))
    if out_dir is not None:
        write_outputs(result, Path(out_dir), plot=plot)
    return result


def _fmt(x) -> str:
    if isinstance(x, float):
        return "" if math.isnan(x) else repr(float(x))
    return str(x)


def _writer(path: Path, columns: list):
    try:
        fh = path.open("w", newline="")
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc.strerror}") from None
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(columns)
    return fh, w


def _sensor_label(cfg: ScenarioConfig) -> str:
    return "+".join(r.sensor.upper() for r in cfg.rsus) or "none"


def write_outputs(result: SuiteResult, out: Path, plot: bool = True) -> list:
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create {out}: {exc.strerror}") from None
    paths = [out / "trajectory.csv", out / "bins.csv", out / "summary.csv"]

    fh, w = _writer(paths[0], TRAJECTORY_COLUMNS)
    with fh:
        for tr in result.trials:
            for run, log in (("baseline", tr.baseline), ("fused", tr.fused)):
                for row in log.rows():
                    w.writerow([tr.trial, tr.seed, run] + [row[c] for c in TRAJECTORY_COLUMNS[3:]])

    fh, w = _writer(paths[1], BINS_COLUMNS)
    with fh:
        for tr in result.trials:
            r = tr.report
            for i in range(len(r.baseline_min)):
                w.writerow([tr.trial, tr.seed, _fmt(float(r.bin_edges[i])), _fmt(float(r.bin_edges[i + 1])),
                            _fmt(float(r.baseline_min[i])), _fmt(float(r.fused_min[i])), r.bin_region[i]])

    sensor = _sensor_label(result.cfg)
    fh, w = _writer(paths[2], SUMMARY_COLUMNS)
    with fh:
        for tr in result.trials:
            for reg in tr.report.regions:
                w.writerow(["trial", tr.trial, tr.seed, sensor, reg.name, _fmt(reg.start), _fmt(reg.end),
                            _fmt(reg.mle_baseline), _fmt(reg.mle_fused), _fmt(reg.improvement), COVERAGE_BASIS])
        for k, stat in enumerate(("mean", "min", "max")):
            for name, e in result.aggregate.items():
                imp = e["improvement"] if stat == "mean" else math.nan
                w.writerow([stat, "", "", sensor, name, _fmt(e["start"]), _fmt(e["end"]),
                            _fmt(e["mle_baseline"][k]), _fmt(e["mle_fused"][k]), _fmt(imp), COVERAGE_BASIS])

    if plot:
        from .plotting import error_curve_svg

        svg = out / "error_curve.svg"
        error_curve_svg(result, svg)
        paths.append(svg)
    return paths


# --------------------------------------------------------------------- network sweep


@dataclass
class SweepCell:
    delay: float
    loss: float
    mle_fused: float
    mle_baseline: float


def run_sweep(cfg: ScenarioConfig, delays, losses, trial_count: Optional[int] = None, jobs: int = 1):
    """MLE in coverage for every (delay, loss) pair; baselines are shared across cells."""
    n = cfg.trial_count if trial_count is None else trial_count
    ref = run_trials(cfg.with_channel(0.0, 0.0), n, jobs=jobs)
    baselines = [t.baseline for t in ref]
    cells = []
    for loss in losses:
        for delay in delays:
            trials = run_trials(cfg.with_channel(delay, loss), n, jobs=jobs, baselines=baselines)
            agg = aggregate(trials)["coverage"]
            cells.append(SweepCell(delay, loss, agg["mle_fused"][0], agg["mle_baseline"][0]))
    return cells


def write_sweep(cells: list, cfg: ScenarioConfig, out: Path) -> list:
    out.mkdir(parents=True, exist_ok=True)
    ideal = next((c.mle_fused for c in cells if c.delay == 0 and c.loss == 0), math.nan)
    sensor = _sensor_label(cfg)
    long_path, table_path = out / "sweep.csv", out / "sweep_table.csv"
    fh, w = _writer(long_path, ["sensor", "delay_ms", "loss", "mle_fused", "mle_baseline",
                                "change_vs_ideal", "improvement_vs_baseline"])
    with fh:
        for c in cells:
            w.writerow([sensor, _fmt(round(c.delay * 1000, 6)), _fmt(c.loss), _fmt(c.mle_fused),
                        _fmt(c.mle_baseline), _fmt(c.mle_fused / ideal - 1.0 if ideal > 0 else math.nan),
                        _fmt(1.0 - c.mle_fused / c.mle_baseline)])
    delays = sorted({c.delay for c in cells})
    losses = sorted({c.loss for c in cells})
    lookup = {(c.delay, c.loss): c.mle_fused for c in cells}
    fh, w = _writer(table_path, ["loss"] + [f"{round(d * 1000, 6):g}ms" for d in delays])
    with fh:
        for loss in losses:
            w.writerow([_fmt(loss)] + [_fmt(lookup.get((d, loss), math.nan)) for d in delays])
    return [long_path, table_path]
