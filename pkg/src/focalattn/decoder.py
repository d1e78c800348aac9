"""Toy prompt-based mask decoder.

Class prompt tokens attend to projected pixel features through ``num_layers``
blocks of biased cross-attention, each followed by a residual feed-forward
update.  Masks come from a dot product between the updated prompts and a
projection of the pixel features; an MLP on each updated prompt predicts that
class's IoU.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .attention import (AttentionOutput, AttentionWeights, BiasVector, STRATEGIES,
                        biased_cross_attention)
from .autodiff import DimensionError, Tape, Variable

BIAS_PARAM = "delta"


@dataclass(frozen=True)
class DecoderConfig:
    num_classes: int = 4
    feature_dim: int = 32
    input_dim: int = 8
    num_layers: int = 2
    num_heads: int = 2
    ffn_dim: int = 64
    iou_hidden_dim: int = 32
    seed: int = 0

    def __post_init__(self):
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if self.num_layers < 1:
            raise ValueError("num_layers must be >= 1")
        if self.num_heads < 1 or self.feature_dim % self.num_heads:
            raise ValueError(
                f"feature_dim {self.feature_dim} is not divisible by num_heads {self.num_heads}")

    @property
    def head_dim(self) -> int:
        return self.feature_dim // self.num_heads


@dataclass
class DecoderParams:
    config: DecoderConfig
    arrays: dict[str, np.ndarray]
    bias: BiasVector

    def copy(self) -> "DecoderParams":
        return DecoderParams(self.config, {k: v.copy() for k, v in self.arrays.items()},
                             self.bias.copy())

    def trainable(self) -> dict[str, np.ndarray]:
        """Every learnable array by name; the DFA bias appears as ``delta``."""
        out = dict(self.arrays)
        if self.bias.learnable:
            out[BIAS_PARAM] = self.bias.values
        return out

    def assign(self, name: str, value: np.ndarray) -> None:
        if name == BIAS_PARAM:
            self.bias.values = np.asarray(value, dtype=np.float64)
        else:
            self.arrays[name] = np.asarray(value, dtype=np.float64)

    def with_bias(self, bias: BiasVector) -> "DecoderParams":
        if bias.num_classes != self.config.num_classes:
            raise DimensionError("bias length does not match num_classes")
        return DecoderParams(self.config, {k: v.copy() for k, v in self.arrays.items()},
                             bias.copy())


@dataclass
class DecoderOutput:
    mask_logits: Variable            # C x N
    mask_probs: Variable             # C x N
    iou_pred: Variable               # C
    attention: list[list[AttentionOutput]]  # [layer][head]


def _shapes(cfg: DecoderConfig) -> dict[str, tuple[int, ...]]:
    C, d, h, dh = cfg.num_classes, cfg.feature_dim, cfg.num_heads, cfg.head_dim
    s: dict[str, tuple[int, ...]] = {
        "prompts": (C, d),
        "in_w": (cfg.input_dim, d),
        "in_b": (d,),
    }
    for layer in range(cfg.num_layers):
        for head in range(h):
            for m in ("wq", "wk", "wv"):
                s[f"l{layer}.h{head}.{m}"] = (d, dh)
            s[f"l{layer}.h{head}.wo"] = (dh, d)
        s[f"l{layer}.ffn_w1"] = (d, cfg.ffn_dim)
        s[f"l{layer}.ffn_b1"] = (cfg.ffn_dim,)
        s[f"l{layer}.ffn_w2"] = (cfg.ffn_dim, d)
        s[f"l{layer}.ffn_b2"] = (d,)
    s.update({
        "mask_w": (d, d),
        "mask_b": (d,),
        "iou_w1": (d, cfg.iou_hidden_dim),
        "iou_b1": (cfg.iou_hidden_dim,),
        "iou_w2": (cfg.iou_hidden_dim, 1),
        "iou_b2": (1,),
    })
    return s


def init_params(config: DecoderConfig, bias: BiasVector | None = None) -> DecoderParams:
    """Deterministic initialisation from ``config.seed``.

    Matrices are drawn from N(0, 1/fan_in); prompts use fan_in = feature_dim;
    vector offsets start at zero.
    """
    rng = np.random.default_rng(config.seed)
    arrays = {}
    for name, shape in _shapes(config).items():
        if len(shape) == 1:
            arrays[name] = np.zeros(shape)
        else:
            fan_in = config.feature_dim if name == "prompts" else shape[0]
            arrays[name] = rng.normal(0.0, 1.0 / math.sqrt(fan_in), size=shape)
    if bias is None:
        bias = BiasVector.zeros(config.num_classes)
    if bias.num_classes != config.num_classes:
        raise DimensionError("bias length does not match num_classes")
    return DecoderParams(config, arrays, bias.copy())


def bind(tape: Tape, params: DecoderParams, requires_grad: bool = True) -> dict[str, Variable]:
    """Place every trainable array on ``tape``."""
    return {k: tape.variable(v, requires_grad=requires_grad)
            for k, v in params.trainable().items()}


def forward(cfg: DecoderConfig, v: dict[str, Variable], features_raw, bias=None) -> DecoderOutput:
    """Run the decoder on one scene given bound parameter Variables.

    ``bias`` is used when ``v`` holds no learnable ``delta`` (fixed strategies).
    """
    tape = v["prompts"].tape
    x = features_raw if isinstance(features_raw, Variable) else tape.constant(features_raw)
    if x.value.ndim != 2 or x.shape[1] != cfg.input_dim:
        raise DimensionError(
            f"features must be N x {cfg.input_dim}, got shape {x.shape}")
    b = v.get(BIAS_PARAM, bias)

    h = ad.broadcast_add(x @ v["in_w"], v["in_b"], axis=1)
    p = v["prompts"]
    attn = []
    for layer in range(cfg.num_layers):
        outs = []
        update = None
        for head in range(cfg.num_heads):
            pre = f"l{layer}.h{head}."
            a = biased_cross_attention(
                p, h, b, AttentionWeights(v[pre + "wq"], v[pre + "wk"], v[pre + "wv"]))
            outs.append(a)
            contrib = a.aggregated @ v[pre + "wo"]
            update = contrib if update is None else update + contrib
        attn.append(outs)
        p = p + update
        hidden = ad.tanh(ad.broadcast_add(p @ v[f"l{layer}.ffn_w1"], v[f"l{layer}.ffn_b1"], 1))
        p = p + ad.broadcast_add(hidden @ v[f"l{layer}.ffn_w2"], v[f"l{layer}.ffn_b2"], 1)

    m = ad.broadcast_add(h @ v["mask_w"], v["mask_b"], axis=1)
    logits = (p @ m.T) * (1.0 / math.sqrt(cfg.feature_dim))
    probs = ad.sigmoid(logits)

    ih = ad.tanh(ad.broadcast_add(p @ v["iou_w1"], v["iou_b1"], axis=1))
    iou = ad.sigmoid(ad.reshape(ad.broadcast_add(ih @ v["iou_w2"], v["iou_b2"], axis=1),
                                (cfg.num_classes,)))
    return DecoderOutput(logits, probs, iou, attn)


def decoder_forward(params: DecoderParams, features_raw, tape: Tape | None = None) -> DecoderOutput:
    """Convenience forward pass that binds ``params`` to a fresh (or given) tape."""
    tape = tape or Tape()
    v = bind(tape, params)
    return forward(params.config, v, features_raw, params.bias.values)


def count_parameters(params: DecoderParams) -> tuple[int, int]:
    """Return ``(total scalars, bias scalars)``; only a learnable bias counts."""
    bias_n = params.bias.num_classes if params.bias.learnable else 0
    return sum(a.size for a in params.arrays.values()) + bias_n, bias_n


# ---------------------------------------------------------------- checkpoints

def save_checkpoint(path, params: DecoderParams, epoch: int, rng_state_seed: int) -> None:
    doc = {
        "config": asdict(params.config),
        "params": {k: {"shape": list(a.shape), "data": a.reshape(-1).tolist()}
                   for k, a in params.arrays.items()},
        "bias": params.bias.to_dict(),
        "epoch": int(epoch),
        "rng_state_seed": int(rng_state_seed),
    }
    Path(path).write_text(json.dumps(doc))


def load_checkpoint(path) -> tuple[DecoderParams, dict]:
    doc = json.loads(Path(path).read_text())
    cfg = DecoderConfig(**doc["config"])
    arrays = {k: np.asarray(e["data"], dtype=np.float64).reshape(e["shape"])
              for k, e in doc["params"].items()}
    expected = _shapes(cfg)
    if set(arrays) != set(expected) or any(arrays[k].shape != s for k, s in expected.items()):
        raise ValueError(f"checkpoint {path} does not match its config")
    bias = BiasVector.from_dict(doc["bias"])
    if bias.strategy not in STRATEGIES:
        raise ValueError(f"unknown bias strategy in {path}")
    meta = {"epoch": doc["epoch"], "rng_state_seed": doc["rng_state_seed"]}
    return DecoderParams(cfg, arrays, bias), meta
