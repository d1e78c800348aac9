"""Scikit-learn style wrapper around the decoder and training loop.

A "scene" is an ``N x D`` feature array; ``X`` is a stack of scenes with shape
``(n_scenes, N, D)`` and ``y`` the matching integer label maps ``(n_scenes, N)``.
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .attention import STRATEGIES
from .decoder import DecoderConfig
from .objectives import LossWeights, dice_metric
from .synthgen import DatasetSplit, Sample
from .trainer import TrainConfig, hcfa_two_stage, predict_probs, train_run


def check_scenes(X, n_features: int | None = None) -> np.ndarray:
    """Coerce ``X`` to a finite float array of shape (n_scenes, N, D)."""
    arr = np.asarray(X, dtype=float)
    if arr.ndim == 2:
        arr = arr[None]
    if arr.ndim != 3:
        raise ValueError(f"expected scenes of shape (n_scenes, N, D), got {arr.shape}")
    if arr.shape[0] == 0 or arr.shape[1] == 0:
        raise ValueError("need at least one scene with at least one pixel")
    if not np.all(np.isfinite(arr)):
        raise ValueError("scene features contain NaN or inf")
    if n_features is not None and arr.shape[2] != n_features:
        raise ValueError(f"scenes have {arr.shape[2]} features, estimator was fit with {n_features}")
    return arr


def check_label_maps(y, X: np.ndarray) -> np.ndarray:
    """Integer label maps aligned with ``X``."""
    lab = np.asarray(y)
    if lab.ndim == 1:
        lab = lab[None]
    if lab.shape != X.shape[:2]:
        raise ValueError(f"label maps {lab.shape} do not match scenes {X.shape[:2]}")
    if not np.issubdtype(lab.dtype, np.integer):
        if not np.all(lab == np.round(lab)):
            raise ValueError("label maps must hold integer class ids")
        lab = lab.astype(int)
    return lab


def _one_hot(codes: np.ndarray, num_classes: int) -> np.ndarray:
    out = np.zeros((num_classes, codes.size))
    out[codes, np.arange(codes.size)] = 1.0
    return out


class FocalAttentionSegmenter(BaseEstimator):
    """Prompt-token mask decoder with a per-class attention bias.

    ``strategy`` picks the bias: ``"none"``, ``"cffa"`` (frequency prior),
    ``"hcfa"`` (two-stage hardness prior) or ``"dfa"`` (learned).
    The last ``val_fraction`` of the scenes is held out for model selection.
    """

    def __init__(self, strategy="dfa", epochs=40, batch_size=4, base_lr=1e-4, bias_lr=None,
                 warm_start=True, gamma=2.0, beta=0.8, alpha=0.25, mu=0.0625, lam=1e-4,
                 feature_dim=32, num_layers=2, num_heads=2, val_fraction=0.25, random_state=0):
        self.strategy = strategy
        self.epochs = epochs
        self.batch_size = batch_size
        self.base_lr = base_lr
        self.bias_lr = bias_lr
        self.warm_start = warm_start
        self.gamma = gamma
        self.beta = beta
        self.alpha = alpha
        self.mu = mu
        self.lam = lam
        self.feature_dim = feature_dim
        self.num_layers = num_layers
        self.num_heads = num_heads
        self.val_fraction = val_fraction
        self.random_state = random_state

    def _configs(self, num_classes, input_dim):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"strategy must be one of {STRATEGIES}, got {self.strategy!r}")
        dec = DecoderConfig(num_classes=num_classes, feature_dim=self.feature_dim,
                            input_dim=input_dim, num_layers=self.num_layers,
                            num_heads=self.num_heads, ffn_dim=2 * self.feature_dim,
                            iou_hidden_dim=self.feature_dim, seed=self.random_state)
        tc = TrainConfig(epochs=self.epochs, batch_size=self.batch_size, base_lr=self.base_lr,
                         bias_lr=self.bias_lr, strategy=self.strategy, warm_start=self.warm_start,
                         gamma=self.gamma, beta=self.beta, seed=self.random_state,
                         loss=LossWeights(alpha=self.alpha, mu=self.mu, lam=self.lam))
        return dec, tc

    def fit(self, X, y):
        X = check_scenes(X)
        lab = check_label_maps(y, X)
        self.classes_, codes = np.unique(lab, return_inverse=True)
        codes = codes.reshape(lab.shape)
        C = len(self.classes_)
        if C < 2:
            raise ValueError("need at least two classes in y")
        if not 0 <= self.val_fraction < 1:
            raise ValueError("val_fraction must lie in [0, 1)")
        self.n_features_in_ = X.shape[2]

        samples = [Sample(x, _one_hot(c, C), i, (1, x.shape[0])) for i, (x, c) in enumerate(zip(X, codes))]
        n_val = int(round(self.val_fraction * len(samples)))
        if n_val == 0 or n_val == len(samples):
            train, val = samples, samples
        else:
            train, val = samples[:-n_val], samples[-n_val:]
        freqs = np.mean([s.labels.mean(axis=1) for s in train], axis=0)
        if np.any(freqs <= 0):
            raise ValueError("every class must appear in the training scenes")
        ds = DatasetSplit(train, val, val, freqs)

        dec, tc = self._configs(C, self.n_features_in_)
        runner = hcfa_two_stage if self.strategy == "hcfa" else train_run
        self.params_, self.record_ = runner(ds, dec, tc)
        self.bias_ = self.params_.bias.values.copy()
        return self

    def transform(self, X):
        """Per-class mask probabilities, shape (n_scenes, C, N)."""
        check_is_fitted(self, "params_")
        X = check_scenes(X, self.n_features_in_)
        return np.stack([predict_probs(self.params_, x) for x in X])

    def predict_proba(self, X):
        """Mask probabilities normalised over classes, shape (n_scenes, N, C)."""
        p = self.transform(X)
        return np.transpose(p / p.sum(axis=1, keepdims=True), (0, 2, 1))

    def predict(self, X):
        """Label map per scene: the class with the highest mask probability."""
        codes = self.transform(X).argmax(axis=1)
        return self.classes_[codes]

    def score(self, X, y):
        """Mean per-class Dice of the predicted label maps."""
        check_is_fitted(self, "params_")
        X = check_scenes(X, self.n_features_in_)
        lab = check_label_maps(y, X)
        if not np.all(np.isin(lab, self.classes_)):
            raise ValueError("y contains classes not seen during fit")
        pred = self.predict(X)
        C = len(self.classes_)
        scores = []
        for p, t in zip(pred, lab):
            pc = np.searchsorted(self.classes_, p)
            tc = np.searchsorted(self.classes_, t)
            scores.append(dice_metric(_one_hot(pc, C), _one_hot(tc, C)))
        return float(np.mean(scores))
