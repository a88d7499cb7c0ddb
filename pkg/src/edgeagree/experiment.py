"""Multi-seed training runs with per-step CSV logging."""
from __future__ import annotations

import csv
import io
import logging
import os
from dataclasses import dataclass, field, fields
from typing import Iterable, List, Optional, Sequence

import numpy as np

from .grid import InvalidInputError
from .loss import LossConfig, combined_mask_loss, mask_bce_loss
from .model import MaskHead, OptimizerState, backward, forward, init_weights, sgd_step
from .synthdata import DatasetSpec, Sample, generate_dataset

log = logging.getLogger(__name__)

CSV_HEADER = ["step", "seed", "config_id", "loss_mask", "loss_edge", "loss_total",
              "eval_mean_iou", "eval_mean_bce"]


@dataclass(frozen=True)
class TrainRecord:
    step: int
    seed: int
    config_id: str
    # None only on the step-0 evaluation record, which precedes any training
    loss_mask: Optional[float]
    loss_edge: Optional[float]
    loss_total: Optional[float]
    eval_mean_iou: Optional[float] = None
    eval_mean_bce: Optional[float] = None


def loss_label(cfg: LossConfig) -> str:
    """Short identifier of a loss variant; every inert edge head maps to ``baseline``."""
    if not cfg.edge_active:
        return "baseline"
    parts = [cfg.filters().name.lower(), f"p{cfg.p}", f"a{cfg.alpha:g}"]
    if cfg.smooth_gt:
        parts.append("sg")
    if cfg.smooth_pred:
        parts.append("sp")
    if cfg.include_magnitude:
        parts.append("mag")
    if cfg.formulation.value != "standard":
        parts.append(cfg.formulation.value)
    return "_".join(parts)


@dataclass
class ExperimentConfig:
    loss_config: LossConfig = field(default_factory=LossConfig)
    dataset_spec: DatasetSpec = field(default_factory=DatasetSpec)
    seeds: Sequence[int] = (0, 1, 2, 3, 4)
    steps: int = 3000
    batch_size: int = 2
    learning_rate: float = 0.01
    eval_every: int = 100
    output_dir: Optional[str] = None

    def __post_init__(self):
        self.seeds = tuple(int(s) for s in self.seeds)
        if not self.seeds:
            raise InvalidInputError("at least one seed is required")
        if len(set(self.seeds)) != len(self.seeds):
            raise InvalidInputError("seeds must be distinct")
        if self.steps < 0:
            raise InvalidInputError("steps must be nonnegative")
        if self.batch_size < 1 or self.eval_every < 1:
            raise InvalidInputError("batch_size and eval_every must be positive")
        if not self.learning_rate > 0:
            raise InvalidInputError("learning_rate must be positive")
        if self.dataset_spec.n_train < 1 or self.dataset_spec.n_eval < 1:
            raise InvalidInputError("need nonempty train and eval sets")

    @property
    def config_id(self) -> str:
        return f"{loss_label(self.loss_config)}_m{self.dataset_spec.mask_size}"


def iou(pred: np.ndarray, gt: np.ndarray, threshold: float = 0.5) -> float:
    """IoU of ``pred >= threshold`` against the binary ``gt``; two empty masks give 1."""
    p = pred >= threshold
    g = gt >= 0.5
    union = np.count_nonzero(p | g)
    if union == 0:
        return 1.0
    return np.count_nonzero(p & g) / union


def evaluate_predictions(preds: Sequence[np.ndarray], eval_set: Sequence[Sample]):
    if not eval_set:
        raise InvalidInputError("evaluation set is empty")
    ious = [iou(p, s.gt_mask) for p, s in zip(preds, eval_set)]
    bces = [mask_bce_loss(p, s.gt_mask).value for p, s in zip(preds, eval_set)]
    return float(np.mean(ious)), float(np.mean(bces))


def evaluate(head: MaskHead, eval_set: Sequence[Sample]):
    """Mean IoU (threshold 0.5) and mean BCE of the head over ``eval_set``."""
    if not eval_set:
        raise InvalidInputError("evaluation set is empty")
    preds = [forward(head, s.image, s.class_id)[0] for s in eval_set]
    return evaluate_predictions(preds, eval_set)


def _fmt(v) -> str:
    if v is None:
        return ""
    return repr(float(v)) if isinstance(v, float) else str(v)


def record_row(r: TrainRecord) -> List[str]:
    return [_fmt(getattr(r, f.name)) for f in fields(TrainRecord)]


def write_records(fh, records: Iterable[TrainRecord], header: bool = True) -> None:
    w = csv.writer(fh, lineterminator="\n")
    if header:
        w.writerow(CSV_HEADER)
    for r in records:
        w.writerow(record_row(r))


def records_to_csv(records: Iterable[TrainRecord]) -> str:
    buf = io.StringIO()
    write_records(buf, records)
    return buf.getvalue()


def _opt_float(s: str) -> Optional[float]:
    return None if s == "" else float(s)


def parse_records(text_or_fh) -> List[TrainRecord]:
    fh = io.StringIO(text_or_fh) if isinstance(text_or_fh, str) else text_or_fh
    reader = csv.reader(fh)
    header = next(reader, None)
    if header != CSV_HEADER:
        raise InvalidInputError(f"unexpected record header {header}")
    out = []
    for row in reader:
        if not row:
            continue
        out.append(TrainRecord(int(row[0]), int(row[1]), row[2],
                               *(_opt_float(v) for v in row[3:])))
    return out


def read_records(path) -> List[TrainRecord]:
    with open(path, newline="") as fh:
        return parse_records(fh)


def run_file_name(config_id: str, seed: int) -> str:
    return f"{config_id}__seed{seed}.csv"


def train_step(head: MaskHead, batch: Sequence[Sample], cfg: LossConfig):
    """Batch-mean losses and gradients; per-sample results are reduced in batch order."""
    grads = None
    mask_sum = edge_sum = total_sum = 0.0
    for s in batch:
        pred, cache = forward(head, s.image, s.class_id)
        if cfg.edge_active:
            res = combined_mask_loss(pred, s.gt_mask, cfg)
        else:
            res = mask_bce_loss(pred, s.gt_mask)
        g = backward(head, cache, res.grad_wrt_pred)
        if grads is None:
            grads = g
        else:
            for k in grads:
                grads[k] += g[k]
        mask_sum += res.terms["mask"]
        edge_sum += res.terms.get("edge", 0.0)
        total_sum += res.value
    n = len(batch)
    grads = {k: v / n for k, v in grads.items()}
    return grads, mask_sum / n, edge_sum / n, total_sum / n


def run_seed(config: ExperimentConfig, seed: int, train: Sequence[Sample],
             eval_set: Sequence[Sample], sink=None) -> List[TrainRecord]:
    """Train one model from ``seed``; each record is passed to ``sink`` as soon as it exists."""
    cfg = config.loss_config
    cid = config.config_id
    head = init_weights(seed, config.dataset_spec.mask_size, config.dataset_spec.n_classes)
    state = OptimizerState(config.learning_rate)
    order_rng = np.random.default_rng([seed, 0x5EED])
    records = []

    def emit(r):
        records.append(r)
        if sink is not None:
            sink(r)

    emit(TrainRecord(0, seed, cid, None, None, None, *evaluate(head, eval_set)))
    queue: List[int] = []
    for step in range(1, config.steps + 1):
        if len(queue) < config.batch_size:
            queue.extend(order_rng.permutation(len(train)).tolist())
        idx, queue = queue[:config.batch_size], queue[config.batch_size:]
        grads, lm, le, lt = train_step(head, [train[i] for i in idx], cfg)
        params, state = sgd_step(head.params, grads, state)
        head.params = params
        ev = (None, None)
        if step % config.eval_every == 0 or step == config.steps:
            ev = evaluate(head, eval_set)
        emit(TrainRecord(step, seed, cid, lm, le, lt, *ev))
    return records


def run_experiment(config: ExperimentConfig, dataset=None) -> List[TrainRecord]:
    """Train every seed of ``config`` and return all records (seed-major order).

    With ``output_dir`` set, each seed's records stream to
    ``<output_dir>/<config_id>__seed<seed>.csv`` and are flushed per row.
    """
    train, eval_set = dataset if dataset is not None else generate_dataset(config.dataset_spec)
    out: List[TrainRecord] = []
    for seed in config.seeds:
        log.info("training %s seed %d for %d steps", config.config_id, seed, config.steps)
        if config.output_dir:
            os.makedirs(config.output_dir, exist_ok=True)
            path = os.path.join(config.output_dir, run_file_name(config.config_id, seed))
            with open(path, "w", newline="") as fh:
                writer = csv.writer(fh, lineterminator="\n")
                writer.writerow(CSV_HEADER)

                def sink(r, writer=writer, fh=fh):
                    writer.writerow(record_row(r))
                    fh.flush()

                out.extend(run_seed(config, seed, train, eval_set, sink))
        else:
            out.extend(run_seed(config, seed, train, eval_set))
    return out
