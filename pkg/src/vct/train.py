"""SGD training loop, evaluation, and the component-ablation harness."""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import metrics
from .data import ImagePair
from .model import Ablation, ModelConfig, VcT, forward_pipeline
from .numerics import NumericError
from .numerics import params as ckpt

log = logging.getLogger(__name__)

HISTORY_FIELDS = ("epoch", "loss", "precision", "recall", "f1", "iou", "oa")


class TrainingDiverged(NumericError):
    pass


@dataclass
class TrainConfig:
    lr0: float = 0.01
    momentum: float = 0.99
    weight_decay: float = 0.0005
    batch_size: int = 8
    epochs: int = 30
    seed: int = 0
    ablation: Ablation = field(default_factory=Ablation)

    def validate(self) -> None:
        if not self.lr0 >= 0:
            raise ValueError("lr must be >= 0")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ValueError("weight decay must be >= 0")
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("batch size and epochs must be >= 1")


@dataclass
class TrainState:
    step: int = 0
    epoch: int = 0
    velocity: dict = field(default_factory=dict)
    best_val_f1: float = -1.0


def lr_at(epoch: int, cfg: TrainConfig) -> float:
    """Linear decay ``lr0 * (1 - epoch / epochs)``."""
    if not 0 <= epoch < cfg.epochs:
        raise ValueError(f"epoch {epoch} outside [0, {cfg.epochs})")
    return cfg.lr0 * (1.0 - epoch / cfg.epochs)


def sgd_step(params: dict, state: TrainState, lr: float, momentum: float, weight_decay: float) -> None:
    """``v <- momentum*v + g + wd*p``; ``p <- p - lr*v`` for every named tensor."""
    for name, p in params.items():
        if p.grad is None:
            raise RuntimeError(f"parameter {name!r} has no gradient")
        g = p.grad + weight_decay * p.data if weight_decay else p.grad
        v = momentum * state.velocity.get(name, 0.0) + g
        state.velocity[name] = np.asarray(v, dtype=p.data.dtype)
        p.data = (p.data - lr * state.velocity[name]).astype(p.data.dtype)
    state.step += 1


# -- evaluation ---------------------------------------------------------------


def evaluate(model: VcT, pairs: list[ImagePair]) -> tuple[metrics.ConfusionCounts, metrics.MetricReport]:
    acc = metrics.ConfusionCounts()
    for pair in pairs:
        if pair.label is None:
            raise ValueError(f"pair {pair.id} has no label")
        out = forward_pipeline(pair.a, pair.b, model).out
        acc = metrics.accumulate(out.hard_mask(), pair.label, acc)
    return acc, metrics.compute(acc)


# -- training -----------------------------------------------------------------


@dataclass
class TrainResult:
    model: VcT
    history: list
    best_val_f1: float
    best_state: dict
    checkpoint: Path | None = None
    seconds: float = 0.0


def write_history(path, history: list) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(HISTORY_FIELDS)
        for row in history:
            w.writerow([row["epoch"], f"{row['loss']:.6f}"] + [f"{row[k]:.6f}" for k in HISTORY_FIELDS[2:]])


def train_loop(
    model_cfg: ModelConfig,
    train_pairs: list[ImagePair],
    val_pairs: list[ImagePair] | None,
    cfg: TrainConfig,
    out_dir=None,
    model: VcT | None = None,
) -> TrainResult:
    """Seeded shuffling, mini-batch SGD and per-epoch validation.

    The best-validation-F1 parameters are kept (and written to
    ``out_dir/model.vct`` together with ``history.csv``).
    """
    cfg.validate()
    t0 = time.perf_counter()
    model = model or VcT(model_cfg, cfg.ablation)
    trainable = {n: model.params[n] for n in model.trainable_names()}
    state = TrainState()
    rng = np.random.default_rng(cfg.seed)
    history = []
    best_state = model.params.state()
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)

    for epoch in range(cfg.epochs):
        state.epoch = epoch
        lr = lr_at(epoch, cfg)
        order = rng.permutation(len(train_pairs))
        losses = []
        for start in range(0, len(order), cfg.batch_size):
            batch = [train_pairs[i] for i in order[start : start + cfg.batch_size]]
            model.params.zero_grad()
            batch_loss = 0.0
            try:
                for pair in batch:
                    fwd = forward_pipeline(pair.a, pair.b, model)
                    loss = model.loss(fwd, pair.label) * (1.0 / len(batch))
                    loss.backward()
                    batch_loss += float(loss.data)
            except NumericError as exc:
                raise TrainingDiverged(f"non-finite values at epoch {epoch}, step {state.step}: {exc}") from exc
            if not math.isfinite(batch_loss):
                raise TrainingDiverged(f"loss is {batch_loss} at epoch {epoch}, step {state.step}")
            sgd_step(trainable, state, lr, cfg.momentum, cfg.weight_decay)
            losses.append(batch_loss)

        row = {"epoch": epoch, "loss": float(np.mean(losses))}
        eval_pairs = val_pairs if val_pairs else train_pairs
        _, report = evaluate(model, eval_pairs)
        row.update(report.as_dict())
        history.append(row)
        log.info("epoch %d lr %.5f loss %.4f val_f1 %.4f", epoch, lr, row["loss"], report.f1)
        if report.f1 > state.best_val_f1:
            state.best_val_f1 = report.f1
            best_state = model.params.state()

    model.params.load_state(best_state)
    ckpt_path = None
    if out_dir is not None:
        ckpt_path = out_dir / "model.vct"
        ckpt.save(ckpt_path, best_state)
        write_history(out_dir / "history.csv", history)
    return TrainResult(model, history, state.best_val_f1, best_state, ckpt_path, time.perf_counter() - t0)


# -- ablation harness ---------------------------------------------------------

ABLATIONS = {
    "w/o RTM": Ablation(use_rtm=False),
    "w/o TE": Ablation(use_te=False),
    "w/o TD": Ablation(use_td=False),
    "VcT": Ablation(),
}


def run_ablations(model_cfg, train_pairs, val_pairs, test_pairs, cfg: TrainConfig, variants=None) -> dict:
    """Train each component setting and return ``label -> (test report, TrainResult)``."""
    results = {}
    for label, abl in (variants or ABLATIONS).items():
        run_cfg = TrainConfig(cfg.lr0, cfg.momentum, cfg.weight_decay, cfg.batch_size, cfg.epochs, cfg.seed, abl)
        res = train_loop(model_cfg, train_pairs, val_pairs, run_cfg)
        _, report = evaluate(res.model, test_pairs)
        results[label] = (report, res)
    return results


def ablation_table(results: dict) -> str:
    lines = [f"{'variant':<10} {'RTM':>4} {'TE':>4} {'TD':>4} | {'F1':>6} {'IoU':>6} {'OA':>6}"]
    for label, (rep, res) in results.items():
        abl = res.model.ablation
        marks = ["x" if v else "-" for v in (abl.use_rtm, abl.use_te, abl.use_td)]
        lines.append(
            f"{label:<10} {marks[0]:>4} {marks[1]:>4} {marks[2]:>4} | "
            f"{100 * rep.f1:6.2f} {100 * rep.iou:6.2f} {100 * rep.oa:6.2f}"
        )
    return "\n".join(lines) + "\n"
