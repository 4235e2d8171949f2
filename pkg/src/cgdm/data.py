"""Synthetic domain-shift datasets and dataset CSV round-tripping.

Target labels, when present, are carried for evaluation only; training code
consumes :meth:`DomainSet.unlabeled` views so ground truth can never leak
into an update.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

__all__ = [
    "DomainSet",
    "ParseError",
    "make_two_moons_pair",
    "make_shifted_blobs",
    "rotate2d",
    "save_dataset_csv",
    "load_dataset_csv",
]


class ParseError(ValueError):
    """Malformed dataset file; carries the offending 1-based line number."""

    def __init__(self, message, line=None):
        super().__init__(message if line is None else f"line {line}: {message}")
        self.line = line


@dataclass
class DomainSet:
    features: np.ndarray  # n-by-d
    labels: np.ndarray | None  # int labels, or None for unlabeled data
    domain: str = "source"

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def take(self, indices) -> "DomainSet":
        idx = np.asarray(indices)
        labels = None if self.labels is None else self.labels[idx]
        return DomainSet(self.features[idx], labels, self.domain)

    def unlabeled(self) -> "DomainSet":
        return replace(self, labels=None)


def rotate2d(points: np.ndarray, degrees: float) -> np.ndarray:
    """Rotate 2-D points about the origin."""
    theta = np.deg2rad(degrees)
    rot = np.array(
        [[np.cos(theta), -np.sin(theta)], [np.sin(theta), np.cos(theta)]]
    )
    return points @ rot.T


def _moons(n: int, noise: float, rng) -> tuple[np.ndarray, np.ndarray]:
    n_out = n // 2
    n_in = n - n_out
    t_out = rng.uniform(0.0, np.pi, n_out)
    t_in = rng.uniform(0.0, np.pi, n_in)
    outer = np.column_stack([np.cos(t_out), np.sin(t_out)])
    inner = np.column_stack([1.0 - np.cos(t_in), 0.5 - np.sin(t_in)])
    x = np.vstack([outer, inner])
    if noise > 0:
        x = x + rng.normal(scale=noise, size=x.shape)
    y = np.concatenate([np.zeros(n_out, dtype=np.int64), np.ones(n_in, dtype=np.int64)])
    return x, y


def make_two_moons_pair(
    n: int, noise: float, rotation_deg: float, seed: int
) -> tuple[DomainSet, DomainSet]:
    """Two interleaved half circles; target is a fresh draw rotated about the
    origin by ``rotation_deg``.  Deterministic per seed."""
    ss = np.random.SeedSequence(seed)
    rng_src, rng_tgt = [np.random.default_rng(c) for c in ss.spawn(2)]
    xs, ys = _moons(n, noise, rng_src)
    xt, yt = _moons(n, noise, rng_tgt)
    xt = rotate2d(xt, rotation_deg)
    return DomainSet(xs, ys, "source"), DomainSet(xt, yt, "target")


def make_shifted_blobs(
    num_classes: int,
    dim: int,
    separation: float,
    shift,
    cov_scale: float,
    n_per_class: int,
    seed: int,
) -> tuple[DomainSet, DomainSet]:
    """Gaussian clusters; the target translates every cluster by ``shift``
    and rescales the within-cluster spread by ``cov_scale``.

    ``shift`` may be a d-vector or a scalar, in which case it is spread
    evenly over all coordinates with total Euclidean length ``shift``.
    """
    if num_classes < 2:
        raise ValueError("need at least 2 classes")
    shift = np.asarray(shift, dtype=np.float64)
    if shift.ndim == 0:
        shift = np.full(dim, float(shift) / np.sqrt(dim))
    ss = np.random.SeedSequence(seed)
    rng_c, rng_s, rng_t = [np.random.default_rng(c) for c in ss.spawn(3)]
    centers = rng_c.normal(size=(num_classes, dim))
    centers *= separation / np.linalg.norm(centers, axis=1, keepdims=True)

    def sample(rng, offset, scale):
        xs, ys = [], []
        for k in range(num_classes):
            pts = centers[k] + offset + scale * rng.normal(size=(n_per_class, dim))
            xs.append(pts)
            ys.append(np.full(n_per_class, k, dtype=np.int64))
        return np.vstack(xs), np.concatenate(ys)

    xs, ys = sample(rng_s, 0.0, 1.0)
    xt, yt = sample(rng_t, shift, cov_scale)
    return DomainSet(xs, ys, "source"), DomainSet(xt, yt, "target")


def save_dataset_csv(dset: DomainSet, path) -> None:
    """Features as decimal text with 17 significant digits (exact round trip)."""
    cols = [f"f{i}" for i in range(dset.dim)]
    if dset.labels is not None:
        cols.append("label")
    with open(path, "w") as fh:
        fh.write(",".join(cols) + "\n")
        for i in range(dset.n):
            row = [f"{v:.17g}" for v in dset.features[i]]
            if dset.labels is not None:
                row.append(str(int(dset.labels[i])))
            fh.write(",".join(row) + "\n")


def load_dataset_csv(path, domain: str = "source") -> DomainSet:
    with open(path) as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise ParseError(f"{path} is empty")
    header = lines[0].split(",")
    labeled = bool(header) and header[-1] == "label"
    n_feat = len(header) - (1 if labeled else 0)
    if n_feat < 1:
        raise ParseError("header declares no feature columns", line=1)
    feats, labels = [], []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split(",")
        if len(parts) != len(header):
            raise ParseError(
                f"expected {len(header)} fields, found {len(parts)}", line=lineno
            )
        try:
            feats.append([float(v) for v in parts[:n_feat]])
            if labeled:
                labels.append(int(parts[-1]))
        except ValueError as err:
            raise ParseError(f"non-numeric field ({err})", line=lineno) from None
    if not feats:
        raise ParseError(f"{path} has a header but no data rows")
    features = np.asarray(feats, dtype=np.float64)
    label_arr = np.asarray(labels, dtype=np.int64) if labeled else None
    return DomainSet(features, label_arr, domain)
