"""Per-class attention logit biases and biased cross-attention.

Four bias strategies share one container, :class:`BiasVector`:

* ``none``  -- all-zero bias, plain cross-attention.
* ``cffa``  -- fixed bias from training-set pixel frequency, ``gamma*log(1-f)``.
* ``hcfa``  -- fixed bias from a baseline's per-class Dice share.
* ``dfa``   -- learnable bias, warm-started from a centred log-frequency prior.

The attention softmax normalises over *classes* at each spatial position, so a
per-class bias shifts how much of every pixel each class prompt absorbs.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import DimensionError, DomainError, Variable

STRATEGIES = ("none", "cffa", "hcfa", "dfa")


def _freqs(freqs: Sequence[float]) -> np.ndarray:
    f = np.asarray(freqs, dtype=np.float64)
    if f.ndim != 1 or f.size < 2:
        raise DimensionError("class frequencies must be a vector of length >= 2")
    if np.any(f <= 0) or np.any(f >= 1):
        raise DomainError(f"class frequencies must lie strictly inside (0, 1), got {f.tolist()}")
    if abs(f.sum() - 1.0) > 1e-6:
        raise DomainError(f"class frequencies must sum to 1, got {f.sum():.8f}")
    return f


def _positive(name: str, x: float) -> float:
    if not x > 0:
        raise DomainError(f"{name} must be positive, got {x}")
    return float(x)


@dataclass
class BiasVector:
    strategy: str
    values: np.ndarray
    gamma: float = 2.0
    beta: float = 0.8

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown bias strategy {self.strategy!r}")
        self.values = np.array(self.values, dtype=np.float64).reshape(-1)
        if self.strategy == "none" and np.any(self.values != 0):
            raise ValueError("strategy 'none' requires an all-zero bias")

    @property
    def learnable(self) -> bool:
        return self.strategy == "dfa"

    @property
    def num_classes(self) -> int:
        return self.values.size

    def copy(self) -> "BiasVector":
        return BiasVector(self.strategy, self.values.copy(), self.gamma, self.beta)

    def to_dict(self) -> dict:
        return {"strategy": self.strategy, "gamma": self.gamma, "beta": self.beta,
                "values": self.values.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "BiasVector":
        return cls(d["strategy"], d["values"], d.get("gamma", 2.0), d.get("beta", 0.8))

    @classmethod
    def zeros(cls, num_classes: int, strategy: str = "none") -> "BiasVector":
        return cls(strategy, np.zeros(num_classes))


def cffa_bias(freqs: Sequence[float], gamma: float = 2.0) -> BiasVector:
    """Fixed frequency bias ``b_c = gamma * log(1 - f_c)``."""
    f = _freqs(freqs)
    gamma = _positive("gamma", gamma)
    return BiasVector("cffa", gamma * np.log1p(-f), gamma=gamma)


def hcfa_bias(base_dice: Sequence[float], gamma: float = 2.0) -> BiasVector:
    """Fixed hardness bias from a baseline's per-class validation Dice.

    ``p_c = dice_c / sum(dice)`` and ``b_c = gamma * log(1 - p_c)``.
    """
    d = np.asarray(base_dice, dtype=np.float64).reshape(-1)
    gamma = _positive("gamma", gamma)
    if np.any(d < 0) or np.any(d > 1):
        raise DomainError("baseline Dice values must lie in [0, 1]")
    total = d.sum()
    if not total > 0:
        raise DomainError("baseline Dice is all zero; hardness shares are undefined")
    p = d / total
    if np.any(p >= 1):
        raise DomainError("a class holds the entire Dice share; log(1 - p) is undefined")
    return BiasVector("hcfa", gamma * np.log1p(-p), gamma=gamma)


def dfa_warm_start(freqs: Sequence[float], gamma: float = 2.0, beta: float = 0.8) -> BiasVector:
    """Centred log-frequency prior for the learnable bias.

    ``log_pi = gamma*log(1-f)``, ``delta0 = beta*(log_pi - mean(log_pi))``.  Rare
    classes start positive, common ones negative, and the mean is zero.
    """
    f = _freqs(freqs)
    gamma = _positive("gamma", gamma)
    beta = _positive("beta", beta)
    log_pi = gamma * np.log1p(-f)
    return BiasVector("dfa", beta * (log_pi - log_pi.mean()), gamma=gamma, beta=beta)


def dfa_cold_start(num_classes: int, gamma: float = 2.0, beta: float = 0.8) -> BiasVector:
    return BiasVector("dfa", np.zeros(num_classes), gamma=gamma, beta=beta)


@dataclass
class AttentionOutput:
    weights: Variable      # C x N, columns sum to one
    aggregated: Variable   # C x d_v


@dataclass
class AttentionWeights:
    """Projection matrices for one attention head."""
    wq: Variable
    wk: Variable
    wv: Variable


def biased_cross_attention(prompts: Variable, features: Variable, bias,
                           weights: AttentionWeights) -> AttentionOutput:
    """Cross-attention from class prompts to spatial features with a class bias.

    ``S[c, i] = <q_c, k_i> / sqrt(d_k) + b_c`` and the softmax runs over the
    class axis for each position ``i``.  ``aggregated_c = sum_i w[c, i] v_i / N``.

    ``bias`` is a length-C Variable (learnable), array, or ``None``.
    """
    if prompts.value.ndim != 2 or features.value.ndim != 2:
        raise DimensionError("prompts and features must be matrices")
    C, N = prompts.shape[0], features.shape[0]
    if C < 2:
        raise DimensionError("class softmax needs at least two classes")
    if prompts.shape[1] != weights.wq.shape[0] or features.shape[1] != weights.wk.shape[0]:
        raise DimensionError(
            f"feature width mismatch: prompts {prompts.shape}, features {features.shape}, "
            f"wq {weights.wq.shape}, wk {weights.wk.shape}")
    q = prompts @ weights.wq
    k = features @ weights.wk
    v = features @ weights.wv
    logits = (q @ k.T) * (1.0 / math.sqrt(q.shape[1]))
    if bias is not None:
        if isinstance(bias, BiasVector):
            bias = bias.values
        if isinstance(bias, Variable) or np.any(np.asarray(bias) != 0):
            if (bias.shape if isinstance(bias, Variable) else np.shape(bias)) != (C,):
                raise DimensionError(f"bias must have length {C}")
            logits = ad.broadcast_add(logits, bias, axis=0)
    w = ad.softmax_axis(logits, axis=0)
    agg = (w @ v) * (1.0 / N)
    return AttentionOutput(weights=w, aggregated=agg)


def self_gating_diagnostic(upstream: np.ndarray, weights: np.ndarray):
    """Compare the diagonal self-gating bias gradient with the exact one.

    ``upstream`` is dL/d(attention weights) and ``weights`` the class-softmax
    output, both C x N.  Returns ``(diagonal, exact, gap)``, each of length C:

    * diagonal: ``sum_i g[c,i] * w[c,i] * (1 - w[c,i])``
    * exact:    ``sum_i w[c,i] * (g[c,i] - sum_c' w[c',i] g[c',i])``
    """
    g = np.asarray(upstream, dtype=np.float64)
    w = np.asarray(weights, dtype=np.float64)
    if g.shape != w.shape or g.ndim != 2:
        raise DimensionError(f"shape mismatch: upstream {g.shape}, weights {w.shape}")
    diag = (g * w * (1.0 - w)).sum(axis=1)
    exact = (w * (g - (w * g).sum(axis=0, keepdims=True))).sum(axis=1)
    return diag, exact, diag - exact


def self_gating_factor(weights: np.ndarray) -> np.ndarray:
    w = np.asarray(weights, dtype=np.float64)
    return w * (1.0 - w)
