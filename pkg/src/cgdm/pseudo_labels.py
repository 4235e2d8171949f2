"""Clustering-based pseudo labels for the unlabeled target set.

Once per epoch: a full inference pass over the target set, softmax-weighted
class centroids in generator-feature space, nearest-centroid assignment
under cosine distance, and a per-sample confidence weight from prediction
entropy.  Everything here is plain numpy computed outside the graph.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from .tensor import ContractError, Tensor, no_grad

__all__ = [
    "CentroidSet",
    "PseudoLabelSet",
    "compute_centroids",
    "cosine_distance",
    "assign_pseudo_labels",
    "pseudo_label_epoch",
    "save_pseudo_csv",
    "softmax_rows",
]

EPS = 1e-12
_EMPTY_SUPPORT = 1e-8


def _as_array(x) -> np.ndarray:
    return x.values if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def softmax_rows(logits) -> np.ndarray:
    """Numerically stable row softmax (numpy, inference use)."""
    z = _as_array(logits)
    z = z - z.max(axis=1, keepdims=True)
    p = np.exp(z)
    return p / p.sum(axis=1, keepdims=True)


@dataclass
class CentroidSet:
    centroids: np.ndarray  # K-by-d_feat
    support_mass: np.ndarray  # per-class total softmax mass (both classifiers)


@dataclass
class PseudoLabelSet:
    """Per-target-sample pseudo label, confidence weight, and distance.

    ``epoch`` tags when the labels were computed so the trainer can reject a
    stale set.  Rows align with the target-set sample order.
    """

    labels: np.ndarray  # int, in [0, K)
    weights: np.ndarray  # in (1, 2]
    distances: np.ndarray  # cosine distance to the assigned centroid
    epoch: int | None = None

    def __len__(self) -> int:
        return len(self.labels)

    def take(self, indices) -> "PseudoLabelSet":
        idx = np.asarray(indices)
        return PseudoLabelSet(
            self.labels[idx], self.weights[idx], self.distances[idx], self.epoch
        )


def compute_centroids(features, probs1, probs2) -> CentroidSet:
    """Softmax-weighted class centroids over the target features.

    c_k = sum over samples and both classifiers of (class-k probability *
    feature) / total class-k probability.  A class with vanishing support
    borrows the feature of its single strongest sample so it stays
    assignable instead of going NaN.
    """
    feats = _as_array(features)
    w = _as_array(probs1) + _as_array(probs2)  # n-by-K
    mass = w.sum(axis=0)
    safe = np.where(mass > _EMPTY_SUPPORT, mass, 1.0)
    centroids = (w.T @ feats) / safe[:, None]
    for k in np.flatnonzero(mass <= _EMPTY_SUPPORT):
        centroids[k] = feats[np.argmax(w[:, k])]
    return CentroidSet(centroids, mass)


def cosine_distance(u, v) -> float:
    """1 - cos(u, v), in [0, 2]; epsilon-guarded against zero vectors."""
    u = _as_array(u)
    v = _as_array(v)
    denom = np.linalg.norm(u) * np.linalg.norm(v) + EPS
    return float(1.0 - u @ v / denom)


def assign_pseudo_labels(features, centroids: CentroidSet, probs1, probs2) -> PseudoLabelSet:
    """Nearest centroid under cosine distance; ties go to the lowest class.

    The confidence weight of each sample is 1 + exp(-H) of the mean of the
    two classifiers' probability rows.
    """
    feats = _as_array(features)
    c = centroids.centroids
    dots = feats @ c.T
    denom = np.linalg.norm(feats, axis=1)[:, None] * np.linalg.norm(c, axis=1)[None, :]
    dist = 1.0 - dots / (denom + EPS)
    labels = np.argmin(dist, axis=1)  # argmin takes the first (lowest) index
    p = 0.5 * (_as_array(probs1) + _as_array(probs2))
    plogp = np.where(p > 0, p * np.log(np.maximum(p, 1e-300)), 0.0)
    entropy = -plogp.sum(axis=1)
    weights = 1.0 + np.exp(-entropy)
    picked = dist[np.arange(len(labels)), labels]
    return PseudoLabelSet(labels.astype(np.int64), weights, picked)


def pseudo_label_epoch(gen, f1, f2, target_set, epoch: int | None = None) -> PseudoLabelSet:
    """One inference pass over the whole target set, then cluster and assign."""
    if target_set.n == 0:
        raise ContractError("pseudo labeling needs a non-empty target set")
    with no_grad():
        feats = nn.forward(gen, Tensor(target_set.features))
        p1 = softmax_rows(nn.forward(f1, feats))
        p2 = softmax_rows(nn.forward(f2, feats))
    centroids = compute_centroids(feats, p1, p2)
    pseudo = assign_pseudo_labels(feats, centroids, p1, p2)
    pseudo.epoch = epoch
    return pseudo


def save_pseudo_csv(pseudo: PseudoLabelSet, path) -> None:
    """Diagnostic export: one row per target sample."""
    with open(path, "w") as fh:
        fh.write("sample_id,pseudo_label,weight,distance\n")
        for i in range(len(pseudo)):
            fh.write(
                f"{i},{int(pseudo.labels[i])},{pseudo.weights[i]:.17g},"
                f"{pseudo.distances[i]:.17g}\n"
            )
