"""Synthetic imbalanced segmentation scenes.

Class frequency and class difficulty are controlled separately.  Frequency
sets the area each class grows to in the layout.  Difficulty has three knobs:

* ``noise_sigma``: isotropic feature noise around the class prototype;
* ``confusability``: how close the prototype sits to its confuser's vertex;
* ``boundary_jitter``: label swaps along the class boundary, reached by short
  random walks, so labels and features disagree near edges.

Prototypes start from a regular simplex of circumradius ``SIMPLEX_RADIUS``.
Class ``c`` is placed at distance ``(1 - confusability) * R`` from the vertex
of its confuser, in the direction of its own vertex.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .objectives import dice_metric

SIMPLEX_RADIUS = 4.0
SPLIT_OFFSETS = {"train": 0, "val": 100_000, "test": 200_000}
_NEIGHBOURS = ((-1, 0), (1, 0), (0, -1), (0, 1))


@dataclass(frozen=True)
class ClassSpec:
    target_frequency: float
    noise_sigma: float = 0.0
    confusability: float = 0.0
    boundary_jitter: int = 0
    confuser: int | None = None   # default: the next class, cyclically
    name: str = ""

    def __post_init__(self):
        if not 0 < self.target_frequency < 1:
            raise ValueError("target_frequency must lie in (0, 1)")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be non-negative")
        if not 0 <= self.confusability <= 1:
            raise ValueError("confusability must lie in [0, 1]")
        if self.boundary_jitter < 0:
            raise ValueError("boundary_jitter must be non-negative")


@dataclass
class Sample:
    features: np.ndarray   # N x D_in
    labels: np.ndarray     # C x N one-hot
    scene_seed: int
    grid: tuple[int, int]

    @property
    def label_map(self) -> np.ndarray:
        return self.labels.argmax(axis=0)


@dataclass
class DatasetSplit:
    train: list[Sample]
    val: list[Sample]
    test: list[Sample]
    empirical_frequencies: np.ndarray
    specs: list[ClassSpec] = field(default_factory=list)
    master_seed: int = 0

    @property
    def num_classes(self) -> int:
        return self.train[0].labels.shape[0]

    @property
    def input_dim(self) -> int:
        return self.train[0].features.shape[1]


def _validate_specs(specs: Sequence[ClassSpec]) -> None:
    if len(specs) < 2:
        raise ValueError("need at least two classes")
    total = sum(s.target_frequency for s in specs)
    if abs(total - 1.0) > 1e-6:
        raise ValueError(f"target frequencies sum to {total:.6f}, expected 1")
    for c, s in enumerate(specs):
        if s.confuser is not None and not (0 <= s.confuser < len(specs) and s.confuser != c):
            raise ValueError(f"class {c}: confuser {s.confuser} is not another class")


def simplex_vertices(num_classes: int, dim: int, radius: float = SIMPLEX_RADIUS) -> np.ndarray:
    """Vertices of a regular simplex centred at the origin, one row per class."""
    if dim < num_classes - 1:
        raise ValueError(f"input_dim {dim} too small for a {num_classes}-class simplex")
    centred = np.eye(num_classes) - 1.0 / num_classes
    # orthonormal coordinates inside the (C-1)-dim subspace
    u, s, _ = np.linalg.svd(centred)
    coords = u[:, : num_classes - 1] * s[: num_classes - 1]
    coords *= radius / np.linalg.norm(coords[0])
    out = np.zeros((num_classes, dim))
    out[:, : num_classes - 1] = coords
    return out


def prototypes(specs: Sequence[ClassSpec], dim: int, radius: float = SIMPLEX_RADIUS) -> np.ndarray:
    verts = simplex_vertices(len(specs), dim, radius)
    protos = np.empty_like(verts)
    for c, s in enumerate(specs):
        k = s.confuser if s.confuser is not None else (c + 1) % len(specs)
        direction = verts[c] - verts[k]
        protos[c] = verts[k] + (1.0 - s.confusability) * radius * direction / np.linalg.norm(direction)
    return protos


def _target_counts(freqs: np.ndarray, n: int) -> np.ndarray:
    raw = freqs * n
    counts = np.floor(raw).astype(int)
    for idx in np.argsort(-(raw - counts), kind="stable")[: n - counts.sum()]:
        counts[idx] += 1
    return counts


def _grow_layout(counts: np.ndarray, grid: tuple[int, int], rng: np.random.Generator) -> np.ndarray:
    """Seeded region growth; every class reaches exactly its target pixel count."""
    H, W = grid
    n = H * W
    lab = np.full(n, -1, dtype=int)
    anchors = rng.choice(n, size=len(counts), replace=False)
    frontiers: list[list[int]] = [[int(a)] for a in anchors]
    filled = np.zeros(len(counts), dtype=int)

    def neighbours(p):
        r, c = divmod(p, W)
        for dr, dc in _NEIGHBOURS:
            rr, cc = r + dr, c + dc
            if 0 <= rr < H and 0 <= cc < W:
                yield rr * W + cc

    remaining = n
    while remaining:
        open_ = np.flatnonzero(filled < counts)
        k = int(open_[np.argmin(filled[open_] / counts[open_])])
        front = frontiers[k]
        pix = -1
        while front:
            j = int(rng.integers(len(front)))
            front[j], front[-1] = front[-1], front[j]
            cand = front.pop()
            if lab[cand] < 0:
                pix = cand
                break
        if pix < 0:
            # boxed in: re-anchor at a random free pixel
            pix = int(rng.choice(np.flatnonzero(lab < 0)))
        lab[pix] = k
        filled[k] += 1
        remaining -= 1
        front.extend(q for q in neighbours(pix) if lab[q] < 0)
    return lab


def _jitter_labels(layout: np.ndarray, specs: Sequence[ClassSpec], grid: tuple[int, int],
                   rng: np.random.Generator) -> np.ndarray:
    """Swap labels along jittered class boundaries; class counts are preserved."""
    H, W = grid
    lab2d = layout.reshape(H, W).copy()
    base = layout.reshape(H, W)
    for c, s in enumerate(specs):
        if s.boundary_jitter == 0:
            continue
        mask = base == c
        edge = np.zeros_like(mask)
        edge[1:, :] |= mask[1:, :] & ~mask[:-1, :]
        edge[:-1, :] |= mask[:-1, :] & ~mask[1:, :]
        edge[:, 1:] |= mask[:, 1:] & ~mask[:, :-1]
        edge[:, :-1] |= mask[:, :-1] & ~mask[:, 1:]
        for r, col in zip(*np.nonzero(edge)):
            if rng.random() >= 0.5 or lab2d[r, col] != c:
                continue
            rr, cc = r, col
            for _ in range(s.boundary_jitter):
                dr, dc = _NEIGHBOURS[int(rng.integers(4))]
                rr = min(max(rr + dr, 0), H - 1)
                cc = min(max(cc + dc, 0), W - 1)
            if lab2d[rr, cc] != c:
                lab2d[r, col], lab2d[rr, cc] = lab2d[rr, cc], c
    return lab2d.reshape(-1)


def generate_scene(specs: Sequence[ClassSpec], grid: tuple[int, int] = (32, 32),
                   input_dim: int = 8, seed: int = 0, scene_shift: float = 0.0) -> Sample:
    _validate_specs(specs)
    H, W = grid
    n = H * W
    freqs = np.array([s.target_frequency for s in specs])
    if np.any(freqs < 1.0 / n):
        raise ValueError(f"a target frequency is below one pixel of a {H}x{W} grid")
    rng = np.random.default_rng(seed)
    layout = _grow_layout(_target_counts(freqs, n), grid, rng)
    labels_flat = _jitter_labels(layout, specs, grid, rng)

    protos = prototypes(specs, input_dim)
    sigma = np.array([s.noise_sigma for s in specs])
    feats = protos[layout] + sigma[layout, None] * rng.standard_normal((n, input_dim))
    if scene_shift:
        feats += scene_shift * rng.standard_normal(input_dim)
    labels = np.zeros((len(specs), n))
    labels[labels_flat, np.arange(n)] = 1.0
    return Sample(feats, labels, int(seed), (H, W))


def generate_dataset(specs: Sequence[ClassSpec], grid: tuple[int, int] = (32, 32),
                     input_dim: int = 8, counts: dict | None = None,
                     master_seed: int = 0, scene_shift: float = 0.0) -> DatasetSplit:
    counts = counts or {"train": 16, "val": 8, "test": 8}
    splits = {}
    for name, offset in SPLIT_OFFSETS.items():
        k = int(counts.get(name, 0))
        if k < 1:
            raise ValueError(f"split {name!r} needs at least one scene")
        splits[name] = [generate_scene(specs, grid, input_dim, master_seed + offset + i,
                                                scene_shift)
                        for i in range(k)]
    freqs = np.mean([s.labels.mean(axis=1) for s in splits["train"]], axis=0)
    return DatasetSplit(splits["train"], splits["val"], splits["test"], freqs,
                        list(specs), master_seed)


def disconnect_preset() -> list[ClassSpec]:
    """Four classes whose rarity and difficulty rankings disagree.

    A common-easy, B common-hard, C rare-easy, D rare-hard.  Confusable pairs
    are (A, B) and (C, D).
    """
    return [
        ClassSpec(0.55, 0.3, 0.10, 0, confuser=1, name="A"),
        ClassSpec(0.30, 1.5, 0.85, 2, confuser=0, name="B"),
        ClassSpec(0.10, 0.3, 0.10, 0, confuser=3, name="C"),
        ClassSpec(0.05, 1.5, 0.85, 2, confuser=2, name="D"),
    ]


PRESETS = {"disconnect": disconnect_preset}


def nearest_prototype_predict(sample: Sample, specs: Sequence[ClassSpec]) -> np.ndarray:
    """One-hot C x N prediction by nearest class prototype."""
    protos = prototypes(specs, sample.features.shape[1])
    d2 = ((sample.features[:, None, :] - protos[None, :, :]) ** 2).sum(axis=-1)
    pred = np.zeros_like(sample.labels)
    pred[d2.argmin(axis=1), np.arange(sample.features.shape[0])] = 1.0
    return pred


def nearest_prototype_dice(samples: Sequence[Sample], specs: Sequence[ClassSpec]) -> np.ndarray:
    """Per-class Dice of the nearest-prototype classifier, averaged over scenes."""
    return np.mean([dice_metric(nearest_prototype_predict(s, specs), s.labels)
                    for s in samples], axis=0)


# ---------------------------------------------------------------- export

def export_dataset(ds: DatasetSplit, out_dir, grid: tuple[int, int] | None = None) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for name in SPLIT_OFFSETS:
        with open(out / f"{name}.ndjson", "w") as fh:
            for s in getattr(ds, name):
                fh.write(json.dumps({
                    "scene_seed": s.scene_seed,
                    "shape": {"grid": list(s.grid), "num_classes": s.labels.shape[0],
                              "input_dim": s.features.shape[1]},
                    "features": s.features.reshape(-1).tolist(),
                    "labels": s.labels.reshape(-1).tolist(),
                }) + "\n")
    manifest = {
        "specs": [asdict(s) for s in ds.specs],
        "master_seed": ds.master_seed,
        "seeds": {n: [s.scene_seed for s in getattr(ds, n)] for n in SPLIT_OFFSETS},
        "empirical_frequencies": ds.empirical_frequencies.tolist(),
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2))
    return out


def load_dataset(path) -> DatasetSplit:
    root = Path(path)
    manifest = json.loads((root / "manifest.json").read_text())
    splits = {}
    for name in SPLIT_OFFSETS:
        samples = []
        with open(root / f"{name}.ndjson") as fh:
            for line in fh:
                rec = json.loads(line)
                shp = rec["shape"]
                n = shp["grid"][0] * shp["grid"][1]
                samples.append(Sample(
                    np.asarray(rec["features"]).reshape(n, shp["input_dim"]),
                    np.asarray(rec["labels"]).reshape(shp["num_classes"], n),
                    rec["scene_seed"], tuple(shp["grid"])))
        splits[name] = samples
    specs = [ClassSpec(**s) for s in manifest["specs"]]
    return DatasetSplit(splits["train"], splits["val"], splits["test"],
                        np.asarray(manifest["empirical_frequencies"]), specs,
                        manifest["master_seed"])
