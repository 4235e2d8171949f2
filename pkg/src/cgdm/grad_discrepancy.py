"""Expected classifier-parameter gradients per domain and their cosine gap.

The source gradient is the gradient of the mean two-classifier cross-entropy
on labeled source samples with respect to all classifier parameters; the
target gradient is the same with entropy-weighted cross-entropy against
pseudo labels.  Both are flattened in a fixed order (all of classifier 1,
then all of classifier 2, layer by layer, weight before bias) so cosine
comparisons are reproducible.

Building these with ``create_graph=True`` keeps them differentiable with
respect to the generator parameters, which is what lets the alignment loss
be minimized by the generator via double backward.
"""
from __future__ import annotations

import logging

import numpy as np

from . import losses, nn
from .tensor import (
    ContractError,
    ShapeError,
    Tensor,
    concat,
    dot,
    flatten,
    mul,
    pow_const,
    sub,
    tsum,
    backward,
)

__all__ = [
    "classifier_parameters",
    "source_gradient",
    "target_gradient",
    "gradient_discrepancy_loss",
    "linear_head_gradient_oracle",
    "conditional_gradient_loss",
]

logger = logging.getLogger(__name__)

EPS = 1e-12


def classifier_parameters(f1: nn.Mlp, f2: nn.Mlp) -> list:
    """Fixed flattening order for gradient vectors."""
    return f1.parameters() + f2.parameters()


def _flat_gradient(loss: Tensor, params: list, create_graph: bool) -> Tensor:
    grads = backward(loss, params, create_graph=create_graph)
    return concat([flatten(grads[p]) for p in params], axis=0)


def source_gradient(gen, f1, f2, batch, create_graph: bool = False) -> Tensor:
    """Classifier-parameter gradient of the source classification loss."""
    if batch.n == 0:
        raise ContractError("source gradient needs a non-empty batch")
    loss = losses.source_classification_loss(gen, f1, f2, batch)
    return _flat_gradient(loss, classifier_parameters(f1, f2), create_graph)


def target_gradient(gen, f1, f2, batch, pseudo, create_graph: bool = False) -> Tensor:
    """Classifier-parameter gradient of the weighted pseudo-label loss."""
    if batch.n == 0:
        raise ContractError("target gradient needs a non-empty batch")
    if len(pseudo.labels) != batch.n:
        raise ContractError(
            f"pseudo set covers {len(pseudo.labels)} rows, batch has {batch.n}"
        )
    feats = nn.forward(gen, Tensor(batch.features))
    wce1 = losses.weighted_cross_entropy(nn.forward(f1, feats), pseudo)
    wce2 = losses.weighted_cross_entropy(nn.forward(f2, feats), pseudo)
    loss = mul(wce1 + wce2, 0.5)
    return _flat_gradient(loss, classifier_parameters(f1, f2), create_graph)


def gradient_discrepancy_loss(gs: Tensor, gt: Tensor) -> Tensor:
    """1 - cos(gs, gt), in [0, 2]; returns 0 when either norm is ~0.

    The zero-norm fallback is a constant (no gradient signal): a vanished
    gradient vector carries no alignment direction to push against.
    """
    if gs.shape != gt.shape or gs.values.ndim != 1:
        raise ShapeError(
            f"gradient vectors must be equal-length 1-D, got {gs.shape}, {gt.shape}"
        )
    ns = float(np.linalg.norm(gs.values))
    nt = float(np.linalg.norm(gt.values))
    if ns < EPS or nt < EPS:
        return Tensor(0.0)
    norm_s = pow_const(tsum(mul(gs, gs)), 0.5)
    norm_t = pow_const(tsum(mul(gt, gt)), 0.5)
    cos = dot(gs, gt) / (mul(norm_s, norm_t) + EPS)
    return sub(1.0, cos)


def linear_head_gradient_oracle(features, labels, weights, weight, bias):
    """Closed-form gradient of mean weighted CE for one linear head.

    dW = (1/b) sum_i w_i (softmax(W x_i + b) - onehot(y_i)) x_i^T, and the
    bias analog without the x_i^T factor.  Pure numpy, no autodiff involved;
    this is the independent test oracle for the autodiff gradients.
    """
    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels)
    w = np.asarray(weights, dtype=np.float64)
    wt = np.asarray(weight, dtype=np.float64)
    bs = np.asarray(bias, dtype=np.float64)
    b = x.shape[0]
    logits = x @ wt.T + bs
    shifted = logits - logits.max(axis=1, keepdims=True)
    p = np.exp(shifted)
    p /= p.sum(axis=1, keepdims=True)
    diff = p.copy()
    diff[np.arange(b), y] -= 1.0
    diff *= w[:, None]
    d_weight = diff.T @ x / b
    d_bias = diff.sum(axis=0) / b
    return d_weight, d_bias


def conditional_gradient_loss(
    gen, f1, f2, source_batch, target_batch, pseudo, create_graph: bool = False
) -> Tensor:
    """Per-category gradient alignment, averaged over classes present in both
    the source batch (true labels) and the target batch (pseudo labels).

    Returns a constant 0 with a logged warning when no class is shared.
    """
    src_classes = set(np.unique(np.asarray(source_batch.labels)).tolist())
    tgt_classes = set(np.unique(np.asarray(pseudo.labels)).tolist())
    shared = sorted(src_classes & tgt_classes)
    if not shared:
        logger.warning("conditional gradient loss: no shared classes in batch")
        return Tensor(0.0)
    total = None
    for k in shared:
        src_rows = np.flatnonzero(np.asarray(source_batch.labels) == k)
        tgt_rows = np.flatnonzero(np.asarray(pseudo.labels) == k)
        gs = source_gradient(gen, f1, f2, source_batch.take(src_rows), create_graph)
        gt = target_gradient(
            gen, f1, f2, target_batch.take(tgt_rows), pseudo.take(tgt_rows),
            create_graph,
        )
        term = gradient_discrepancy_loss(gs, gt)
        total = term if total is None else total + term
    return mul(total, 1.0 / len(shared))
