"""Ablation sweeps over the edge-loss settings and their comparison reports."""
from __future__ import annotations

import csv
import io
import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .experiment import ExperimentConfig, TrainRecord, read_records, run_experiment, run_file_name
from .filters import FILTER_SET_NAMES
from .grid import InvalidInputError
from .loss import BASELINE, Formulation, LossConfig
from .synthdata import DatasetSpec, generate_dataset

log = logging.getLogger(__name__)

AXES = ("filter", "p", "alpha", "mask_size", "smoothing", "formulation")
MA_WINDOW = 20

SUMMARY_HEADER = [
    "label", "config_id", "baseline_id", "n_seeds", "final_step",
    "final_mean_iou", "final_std_iou", "final_mean_bce", "final_std_bce",
    "auc_loss_mask", "pct_steps_below_baseline", "seeds_bce_below_baseline",
    "rel_improvement_final_bce_pct", "rel_improvement_final_iou_pct",
    "rel_improvement_auc_pct", "speedup_pct",
]
TRAJECTORY_HEADER = [
    "config_id", "baseline_id", "step", "mean_loss_mask", "std_loss_mask",
    "baseline_mean_loss_mask", "rel_improvement_pct",
    "mean_loss_mask_ma20", "baseline_mean_loss_mask_ma20", "rel_improvement_ma20_pct",
]


@dataclass
class SweepEntry:
    label: str
    config: ExperimentConfig
    baseline_id: str

    @property
    def config_id(self) -> str:
        return self.config.config_id


@dataclass
class SweepReport:
    axis: str
    entries: List[SweepEntry]
    records: Dict[str, List[TrainRecord]] = field(default_factory=dict)

    def entry(self, config_id: str) -> SweepEntry:
        for e in self.entries:
            if e.config_id == config_id:
                return e
        raise KeyError(config_id)


def _loss_variants(axis: str, base: LossConfig) -> List[Tuple[str, LossConfig]]:
    edge = base if base.filter_set is not None else LossConfig()
    if axis == "filter":
        return [(name, replace(edge, filter_set=name)) for name in FILTER_SET_NAMES]
    if axis == "p":
        return [(f"p={p}", replace(edge, p=p)) for p in (1, 2, 3, 4)]
    if axis == "alpha":
        rows = [(f"p=2 alpha={a:g}", replace(edge, p=2, alpha=a)) for a in (0.5, 1.0, 8.0, 16.0)]
        return rows + [("p=4 alpha=1/16", replace(edge, p=4, alpha=1 / 16))]
    if axis == "smoothing":
        return [("no smoothing", replace(edge, smooth_gt=False, smooth_pred=False)),
                ("smooth gt", replace(edge, smooth_gt=True, smooth_pred=False)),
                ("smooth pred", replace(edge, smooth_gt=False, smooth_pred=True)),
                ("smooth both", replace(edge, smooth_gt=True, smooth_pred=True))]
    if axis == "formulation":
        std = replace(edge, formulation=Formulation.STANDARD, include_magnitude=False)
        return [("standard", std),
                ("standard+magnitude", replace(std, include_magnitude=True)),
                ("productpw", replace(std, formulation=Formulation.PRODUCT_PW)),
                ("expproductpw", replace(std, formulation=Formulation.EXP_PRODUCT_PW))]
    raise InvalidInputError(f"unknown sweep axis {axis!r}; expected one of {AXES}")


def sweep_entries(axis: str, base: ExperimentConfig) -> List[SweepEntry]:
    """Configurations of one ablation axis, each paired with its baseline."""
    if axis == "mask_size":
        entries = []
        for size in (28, 56):
            ds = replace(base.dataset_spec, mask_size=size, image_size=None)
            b = replace(base, loss_config=BASELINE, dataset_spec=ds)
            edge_cfg = base.loss_config if base.loss_config.edge_active else LossConfig()
            e = replace(base, loss_config=edge_cfg, dataset_spec=ds)
            entries.append(SweepEntry(f"{size}x{size} baseline", b, b.config_id))
            entries.append(SweepEntry(f"{size}x{size}", e, b.config_id))
        return entries
    b = replace(base, loss_config=BASELINE)
    entries = [SweepEntry(label, replace(base, loss_config=lc), b.config_id)
               for label, lc in _loss_variants(axis, base.loss_config)]
    label = "alpha=0 (baseline)" if axis == "alpha" else "Baseline"
    entries.append(SweepEntry(label, b, b.config_id))
    return entries


def _run_one(args):
    config, seed = args
    return run_experiment(replace(config, seeds=(seed,)))


def run_sweep(axis: str, base: ExperimentConfig, workers: int = 1) -> SweepReport:
    """Run every configuration of ``axis`` over the seeds of ``base``.

    Runs are independent, so ``workers > 1`` executes them in a process pool;
    results do not depend on the worker count. With ``base.output_dir`` set,
    per-run CSVs go to ``<output_dir>/runs`` and a ``manifest.json`` is written.
    """
    entries = sweep_entries(axis, base)
    runs_dir = os.path.join(base.output_dir, "runs") if base.output_dir else None
    unique: Dict[str, ExperimentConfig] = {}
    for e in entries:
        e.config = replace(e.config, output_dir=runs_dir)
        unique.setdefault(e.config_id, e.config)
    report = SweepReport(axis, entries)
    if base.output_dir:
        os.makedirs(base.output_dir, exist_ok=True)
        write_manifest(os.path.join(base.output_dir, "manifest.json"), report)

    jobs = [(cfg, seed) for cfg in unique.values() for seed in cfg.seeds]
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            results = list(pool.map(_run_one, jobs))
    else:
        datasets = {}
        results = []
        for cfg, seed in jobs:
            key = cfg.dataset_spec
            if key not in datasets:
                datasets[key] = generate_dataset(key)
            results.append(run_experiment(replace(cfg, seeds=(seed,)), datasets[key]))
    for (cfg, _), recs in zip(jobs, results):
        report.records.setdefault(cfg.config_id, []).extend(recs)
    return report


def _config_to_dict(cfg: ExperimentConfig) -> dict:
    lc = asdict(cfg.loss_config)
    lc["formulation"] = cfg.loss_config.formulation.value
    return {
        "loss_config": lc,
        "dataset_spec": asdict(cfg.dataset_spec),
        "seeds": list(cfg.seeds),
        "steps": cfg.steps,
        "batch_size": cfg.batch_size,
        "learning_rate": cfg.learning_rate,
        "eval_every": cfg.eval_every,
    }


def _config_from_dict(d: dict, output_dir: Optional[str]) -> ExperimentConfig:
    return ExperimentConfig(
        loss_config=LossConfig(**d["loss_config"]),
        dataset_spec=DatasetSpec(**d["dataset_spec"]),
        seeds=d["seeds"], steps=d["steps"], batch_size=d["batch_size"],
        learning_rate=d["learning_rate"], eval_every=d["eval_every"], output_dir=output_dir)


def write_manifest(path, report: SweepReport) -> None:
    data = {
        "axis": report.axis,
        "entries": [{"label": e.label, "config_id": e.config_id, "baseline_id": e.baseline_id,
                     "config": _config_to_dict(e.config)} for e in report.entries],
    }
    with open(path, "w") as fh:
        json.dump(data, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_sweep(directory) -> SweepReport:
    """Rebuild a :class:`SweepReport` from a sweep output directory."""
    with open(os.path.join(directory, "manifest.json")) as fh:
        data = json.load(fh)
    runs = os.path.join(directory, "runs")
    entries = [SweepEntry(e["label"], _config_from_dict(e["config"], runs), e["baseline_id"])
               for e in data["entries"]]
    report = SweepReport(data["axis"], entries)
    for e in entries:
        if e.config_id in report.records:
            continue
        recs = []
        for seed in e.config.seeds:
            recs.extend(read_records(os.path.join(runs, run_file_name(e.config_id, seed))))
        report.records[e.config_id] = recs
    return report


# ---------------------------------------------------------------- reporting

@dataclass
class _Curves:
    steps: np.ndarray
    per_seed: np.ndarray          # (n_seeds, n_steps) loss_mask
    final_iou: np.ndarray         # (n_seeds,)
    final_bce: np.ndarray
    final_step: int


def _curves(records: Sequence[TrainRecord]) -> _Curves:
    by_seed: Dict[int, List[TrainRecord]] = {}
    for r in records:
        by_seed.setdefault(r.seed, []).append(r)
    seeds = sorted(by_seed)
    rows, ious, bces, final_steps, step_lists = [], [], [], set(), set()
    for s in seeds:
        recs = sorted(by_seed[s], key=lambda r: r.step)
        train = [r for r in recs if r.loss_mask is not None]
        step_lists.add(tuple(r.step for r in train))
        rows.append([r.loss_mask for r in train])
        last_eval = [r for r in recs if r.eval_mean_iou is not None][-1]
        final_steps.add(last_eval.step)
        ious.append(last_eval.eval_mean_iou)
        bces.append(last_eval.eval_mean_bce)
    if len(step_lists) != 1 or len(final_steps) != 1:
        raise InvalidInputError("seeds of one configuration logged different steps")
    steps = np.array(step_lists.pop(), dtype=int)
    return _Curves(steps, np.array(rows, dtype=float).reshape(len(seeds), len(steps)),
                   np.array(ious), np.array(bces), final_steps.pop())


def moving_average(x: np.ndarray, window: int = MA_WINDOW) -> np.ndarray:
    """Trailing mean over up to ``window`` points (shorter at the start)."""
    c = np.cumsum(np.concatenate([[0.0], x]))
    idx = np.arange(1, len(x) + 1)
    lo = np.maximum(idx - window, 0)
    return (c[idx] - c[lo]) / (idx - lo)


def _std(x: np.ndarray, axis=None):
    n = x.shape[0] if axis == 0 or axis is None else x.shape[axis]
    return np.std(x, axis=axis, ddof=1) if n > 1 else np.zeros_like(np.mean(x, axis=axis))


def _rel(base, value):
    """Percentage by which ``value`` is lower than ``base``; undefined for a zero base."""
    if base == 0:
        return None
    return 100.0 * (base - value) / base


def _neg(v):
    return None if v is None else -v


def _speedup(mean_ma: np.ndarray, base_ma: np.ndarray, steps: np.ndarray) -> Optional[float]:
    """Percent of steps saved in reaching the baseline's final smoothed mask loss."""
    if len(steps) == 0:
        return None
    target = base_ma[-1]
    hit = np.nonzero(mean_ma <= target)[0]
    if len(hit) == 0:
        return None
    return 100.0 * (1.0 - steps[hit[0]] / steps[-1])


def _cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (float, np.floating)):
        return "" if np.isnan(v) else repr(float(v))
    return str(v)


def compare_report(sweep: SweepReport) -> Tuple[str, str, str]:
    """Compare each configuration with its baseline.

    Returns ``(text, summary_csv, trajectory_csv)``. Relative improvements are
    percentages, positive when the configuration beats its baseline.
    """
    curves: Dict[str, _Curves] = {}
    for e in sweep.entries:
        if e.config_id not in curves:
            if e.config_id not in sweep.records:
                raise InvalidInputError(f"no records for {e.config_id}")
            curves[e.config_id] = _curves(sweep.records[e.config_id])
    for e in sweep.entries:
        if e.baseline_id not in curves:
            raise InvalidInputError(f"sweep has no baseline run {e.baseline_id!r}")

    summary_rows, traj_rows = [], []
    for e in sweep.entries:
        c, b = curves[e.config_id], curves[e.baseline_id]
        if not np.array_equal(c.steps, b.steps):
            raise InvalidInputError(f"{e.config_id} and {e.baseline_id} logged different steps")
        mean = c.per_seed.mean(axis=0)
        std = _std(c.per_seed, axis=0)
        bmean = b.per_seed.mean(axis=0)
        ma, bma = moving_average(mean), moving_average(bmean)
        for i, step in enumerate(c.steps):
            traj_rows.append([e.config_id, e.baseline_id, int(step), mean[i], std[i], bmean[i],
                              _rel(bmean[i], mean[i]), ma[i], bma[i], _rel(bma[i], ma[i])])
        auc, bauc = float(mean.sum()), float(bmean.sum())
        pct_below = 100.0 * float(np.mean(mean < bmean)) if len(mean) else None
        same_seeds = c.per_seed.shape[0] == b.per_seed.shape[0]
        seeds_below = int(np.sum(c.final_bce < b.final_bce)) if same_seeds else None
        is_base = e.config_id == e.baseline_id
        summary_rows.append([
            e.label, e.config_id, e.baseline_id, c.per_seed.shape[0], c.final_step,
            c.final_iou.mean(), _std(c.final_iou), c.final_bce.mean(), _std(c.final_bce),
            auc, pct_below, seeds_below,
            _rel(b.final_bce.mean(), c.final_bce.mean()),
            _neg(_rel(b.final_iou.mean(), c.final_iou.mean())),
            _rel(bauc, auc) if len(mean) else None,
            None if is_base else _speedup(ma, bma, c.steps),
        ])

    summary_csv = _to_csv(SUMMARY_HEADER, summary_rows)
    traj_csv = _to_csv(TRAJECTORY_HEADER, traj_rows)
    return _text_table(sweep, summary_rows), summary_csv, traj_csv


def _to_csv(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([_cell(v) for v in row])
    return buf.getvalue()


def _fmt(v, spec):
    if v is None or (isinstance(v, float) and np.isnan(v)):
        return "-"
    return format(v, spec)


def _text_table(sweep: SweepReport, rows) -> str:
    lines = [f"sweep axis: {sweep.axis}",
             f"{'config':<24} {'IoU':>17} {'BCE':>19} {'dBCE%':>7} {'<base%':>7} {'speedup%':>9}"]
    for r in rows:
        iou = f"{_fmt(r[5], '.4f')} +- {_fmt(r[6], '.4f')}"
        bce = f"{_fmt(r[7], '.5f')} +- {_fmt(r[8], '.5f')}"
        lines.append(f"{r[0]:<24} {iou:>17} {bce:>19} {_fmt(r[12], '7.2f')} "
                     f"{_fmt(r[10], '7.1f')} {_fmt(r[15], '9.1f')}")
    return "\n".join(lines) + "\n"


def write_report(directory, sweep: SweepReport) -> Tuple[str, str, str]:
    text, summary, traj = compare_report(sweep)
    os.makedirs(directory, exist_ok=True)
    for name, content in (("report.txt", text), ("summary.csv", summary), ("trajectories.csv", traj)):
        with open(os.path.join(directory, name), "w", newline="") as fh:
            fh.write(content)
    return text, summary, traj
