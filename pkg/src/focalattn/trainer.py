"""Training loop: Adam with parameter groups, cosine annealing, best-val selection.

The learnable bias ``delta`` forms its own parameter group with a learning rate
``bias_lr`` (100x the base rate unless overridden).  Decoupled weight decay is
off; the only regulariser on ``delta`` is the ``lam * ||delta||^2`` loss term.
"""
from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .attention import BiasVector, cffa_bias, dfa_cold_start, dfa_warm_start, hcfa_bias
from .decoder import (BIAS_PARAM, DecoderConfig, DecoderParams, bind, forward, init_params)
from .objectives import LossWeights, binarize, composite_loss, dice_metric, iou_metric
from .synthgen import DatasetSplit, Sample

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 40
    batch_size: int = 4
    base_lr: float = 1e-4
    bias_lr: float | None = None      # None -> 100 * base_lr
    lr_min: float = 0.0
    betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    loss: LossWeights = field(default_factory=LossWeights)
    strategy: str = "none"
    warm_start: bool = True
    freeze_bias: bool = False
    gamma: float = 2.0
    beta: float = 0.8
    hcfa_dice: tuple[float, ...] | None = None
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.strategy not in ("none", "cffa", "hcfa", "dfa"):
            raise ValueError(f"unknown strategy {self.strategy!r}")
        if isinstance(self.loss, dict):
            self.loss = LossWeights(**self.loss)

    @property
    def effective_bias_lr(self) -> float:
        return 100.0 * self.base_lr if self.bias_lr is None else self.bias_lr

    def to_dict(self) -> dict:
        d = asdict(self)
        d["bias_lr"] = self.effective_bias_lr
        return d


@dataclass
class OptimState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def param_group(name: str) -> str:
    return "bias" if name == BIAS_PARAM else "base"


def cosine_lr(step: int, total_steps: int, lr0: float, lr_min: float = 0.0) -> float:
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    if total_steps == 0:
        return lr0
    return lr_min + 0.5 * (lr0 - lr_min) * (1.0 + math.cos(math.pi * step / total_steps))


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: OptimState,
              lr_by_group: dict[str, float], betas=(0.9, 0.999), eps: float = 1e-8,
              frozen: Sequence[str] = ()) -> dict[str, np.ndarray]:
    """One bias-corrected Adam update; returns the new parameter arrays."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient for parameter {name!r}")
    b1, b2 = betas
    state.step += 1
    t = state.step
    out = {}
    for name, p in params.items():
        if name in frozen or name not in grads:
            out[name] = p
            continue
        g = grads[name]
        m = state.m.get(name, np.zeros_like(p))
        v = state.v.get(name, np.zeros_like(p))
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        state.m[name], state.v[name] = m, v
        m_hat = m / (1 - b1 ** t)
        v_hat = v / (1 - b2 ** t)
        out[name] = p - lr_by_group[param_group(name)] * m_hat / (np.sqrt(v_hat) + eps)
    return out


# ---------------------------------------------------------------- evaluation

def predict_probs(params: DecoderParams, sample_features: np.ndarray) -> np.ndarray:
    tape = ad.Tape()
    v = bind(tape, params, requires_grad=False)
    return forward(params.config, v, sample_features, params.bias.values).mask_probs.value


def evaluate(params: DecoderParams, samples: Sequence[Sample]) -> dict[str, np.ndarray]:
    """Per-class Dice and IoU at threshold 0.5, averaged over samples."""
    dice, iou = [], []
    for s in samples:
        pred = binarize(predict_probs(params, s.features))
        dice.append(dice_metric(pred, s.labels))
        iou.append(iou_metric(pred, s.labels))
    return {"dice": np.mean(dice, axis=0), "iou": np.mean(iou, axis=0)}


# ---------------------------------------------------------------- run record

@dataclass
class RunRecord:
    strategy: str
    config: dict
    rows: list[dict] = field(default_factory=list)
    best_epoch: int = 0
    best_val: dict = field(default_factory=dict)
    test_metrics: dict = field(default_factory=dict)
    delta_init: list | None = None
    delta_final: list | None = None
    bias_values: list | None = None
    wall_clock_seconds: float = 0.0
    stages: list["RunRecord"] = field(default_factory=list)

    def summary(self) -> dict:
        d = {
            "strategy": self.strategy,
            "config": self.config,
            "best_epoch": self.best_epoch,
            "best_val": self.best_val,
            "final_metrics": self.test_metrics,
            "delta_init": self.delta_init,
            "delta_final": self.delta_final,
            "bias_values": self.bias_values,
            "wall_clock_seconds": self.wall_clock_seconds,
        }
        if self.stages:
            d["stages"] = [s.summary() for s in self.stages]
        return d

    def write(self, out_dir, stem: str = "run") -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / f"{stem}.json").write_text(json.dumps(self.summary(), indent=2))
        if self.rows:
            with open(out / f"{stem}.csv", "w", newline="") as fh:
                w = csv.DictWriter(fh, fieldnames=list(self.rows[0]))
                w.writeheader()
                w.writerows(self.rows)
        for i, st in enumerate(self.stages, 1):
            st.write(out, f"{stem}.stage{i}")


def _metrics_row(prefix: str, m: dict) -> dict:
    row = {}
    for key in ("dice", "iou"):
        for c, val in enumerate(m[key]):
            row[f"{prefix}_{key}_{c}"] = float(val)
    row[f"{prefix}_dice_mean"] = float(np.mean(m["dice"]))
    return row


def initial_bias(dataset: DatasetSplit, num_classes: int, tc: TrainConfig) -> BiasVector:
    freqs = dataset.empirical_frequencies
    if tc.strategy == "none":
        return BiasVector.zeros(num_classes)
    if tc.strategy == "cffa":
        return cffa_bias(freqs, tc.gamma)
    if tc.strategy == "hcfa":
        if tc.hcfa_dice is None:
            raise TrainingError("strategy 'hcfa' needs baseline Dice (see hcfa_two_stage)")
        return hcfa_bias(tc.hcfa_dice, tc.gamma)
    if tc.warm_start:
        return dfa_warm_start(freqs, tc.gamma, tc.beta)
    return dfa_cold_start(num_classes, tc.gamma, tc.beta)


def train_run(dataset: DatasetSplit, decoder_config: DecoderConfig, train_config: TrainConfig,
              bias: BiasVector | None = None,
              callback: Callable[[int, DecoderParams], None] | None = None,
              ) -> tuple[DecoderParams, RunRecord]:
    """Train one decoder; return the best-validation parameters and the record.

    Parameters are initialised from ``decoder_config.seed``; minibatch order is
    drawn from ``train_config.seed``.  ``bias`` overrides the strategy's
    initial bias when given.  ``callback(epoch, params)`` runs after every
    epoch, including epoch 0 before any update, outside the timed region.
    """
    tc = train_config
    C = decoder_config.num_classes
    if dataset.num_classes != C or dataset.input_dim != decoder_config.input_dim:
        raise ValueError("dataset does not match decoder_config")
    bias = initial_bias(dataset, C, tc) if bias is None else bias
    params = init_params(decoder_config, bias)
    frozen = (BIAS_PARAM,) if tc.freeze_bias else ()
    weights = tc.loss

    rng = np.random.default_rng(tc.seed)
    n_train = len(dataset.train)
    steps_per_epoch = math.ceil(n_train / tc.batch_size)
    total_steps = tc.epochs * steps_per_epoch
    bias_scale = tc.effective_bias_lr / tc.base_lr
    state = OptimState()

    record = RunRecord(strategy=tc.strategy, config={
        "decoder": asdict(decoder_config), "train": tc.to_dict()})
    if params.bias.learnable:
        record.delta_init = params.bias.values.tolist()
    best_score, best = -np.inf, params.copy()

    if callback is not None:
        callback(0, params)
    step = 0
    elapsed = 0.0
    t0 = time.perf_counter()
    for epoch in range(1, tc.epochs + 1):
        order = rng.permutation(n_train)
        sums = {"loss_total": 0.0, "loss_dice": 0.0, "loss_focal": 0.0,
                "loss_iou": 0.0, "loss_reg": 0.0}
        lr = tc.base_lr
        for b in range(steps_per_epoch):
            batch = [dataset.train[i] for i in order[b * tc.batch_size:(b + 1) * tc.batch_size]]
            lr = cosine_lr(step, total_steps, tc.base_lr, tc.lr_min)
            try:
                tape = ad.Tape()
                v = bind(tape, params)
                loss = None
                for s in batch:
                    out = forward(decoder_config, v, s.features, params.bias.values)
                    lb = composite_loss(out, s.labels, weights, v.get(BIAS_PARAM))
                    loss = lb.total if loss is None else loss + lb.total
                    for k, val in lb.as_row().items():
                        sums[k] += val / len(batch) / steps_per_epoch
                loss = loss * (1.0 / len(batch))
                ad.backward(loss)
            except ad.DomainError as exc:
                raise TrainingError(f"non-finite loss at epoch {epoch}, batch {b}: {exc}") from exc
            grads = {k: tape.grad(var) for k, var in v.items()}
            new = adam_step(params.trainable(), grads, state,
                            {"base": lr, "bias": lr * bias_scale}, tc.betas, tc.adam_eps, frozen)
            for k, arr in new.items():
                params.assign(k, arr)
            step += 1

        train_m = evaluate(params, dataset.train)
        val_m = evaluate(params, dataset.val)
        row = {"epoch": epoch, "lr": lr}
        row.update(_metrics_row("train", train_m))
        row.update(_metrics_row("val", val_m))
        row.update(sums)
        if params.bias.learnable:
            row.update({f"delta_{c}": float(x) for c, x in enumerate(params.bias.values)})
        record.rows.append(row)

        score = float(np.mean(val_m["dice"]))
        if score > best_score:
            best_score, best = score, params.copy()
            record.best_epoch = epoch
            record.best_val = {k: np.asarray(x).tolist() for k, x in val_m.items()}
        log.debug("epoch %d val dice %.4f", epoch, score)
        if callback is not None:
            elapsed += time.perf_counter() - t0
            callback(epoch, params)
            t0 = time.perf_counter()
    record.wall_clock_seconds = elapsed + time.perf_counter() - t0

    if params.bias.learnable:
        record.delta_final = params.bias.values.tolist()
    record.bias_values = best.bias.values.tolist()
    test_m = evaluate(best, dataset.test)
    record.test_metrics = {k: np.asarray(x).tolist() for k, x in test_m.items()}
    return best, record


def hcfa_two_stage(dataset: DatasetSplit, decoder_config: DecoderConfig,
                   train_config: TrainConfig) -> tuple[DecoderParams, RunRecord]:
    """Baseline run, then a fresh run with the hardness bias from its val Dice."""
    stage1_cfg = replace(train_config, strategy="none", hcfa_dice=None)
    _, rec1 = train_run(dataset, decoder_config, stage1_cfg)
    base_dice = rec1.best_val["dice"]
    if not np.sum(base_dice) > 0:
        raise TrainingError("stage-1 validation Dice is all zero; hardness bias undefined")
    stage2_cfg = replace(train_config, strategy="hcfa", hcfa_dice=tuple(base_dice))
    params, rec2 = train_run(dataset, decoder_config, stage2_cfg)

    record = replace(rec2, stages=[rec1, rec2], rows=list(rec2.rows))
    record.wall_clock_seconds = rec1.wall_clock_seconds + rec2.wall_clock_seconds
    return params, record
