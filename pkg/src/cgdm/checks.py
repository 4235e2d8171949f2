"""Finite-difference and closed-form oracle suites.

Used both by the test suite and by the ``gradcheck`` CLI subcommand.  The
finite-difference side never touches reverse mode: losses are re-evaluated
forward-only per perturbation.  Models and batches are resampled until every
relu pre-activation clears a safety margin, because central differences are
meaningless across a kink.
"""
from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import grad_discrepancy, losses, nn
from .data import DomainSet
from .pseudo_labels import PseudoLabelSet
from .tensor import Tensor, backward, no_grad

__all__ = [
    "CheckResult",
    "finite_difference_gradient",
    "run_first_order_suite",
    "run_second_order_suite",
    "run_oracle_suite",
]

_MARGIN = 1e-2  # least |relu pre-activation| accepted for fd checks


@dataclass
class CheckResult:
    name: str
    max_err: float
    tolerance: float
    seconds: float

    @property
    def passed(self) -> bool:
        return self.max_err <= self.tolerance


def finite_difference_gradient(loss_fn, params, h: float = 1e-4):
    """Central-difference gradient of a scalar loss w.r.t. each parameter.

    ``loss_fn`` is re-evaluated from scratch per perturbation.  It runs with
    recording on, because a loss may legitimately contain an inner backward
    pass (the alignment loss does); plain forward losses just build a small
    throwaway graph.
    """
    grads = []
    for p in params:
        flat = p.values.reshape(-1)
        g = np.zeros(flat.size)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = loss_fn().item()
            flat[i] = orig - h
            down = loss_fn().item()
            flat[i] = orig
            g[i] = (up - down) / (2.0 * h)
        grads.append(g.reshape(p.values.shape))
    return grads


def _rel_err(approx: np.ndarray, reference: np.ndarray, floor: float) -> float:
    denom = np.maximum(np.abs(reference), floor)
    return float(np.max(np.abs(approx - reference) / denom))


def _relu_margins(net: nn.Mlp, x: np.ndarray) -> float:
    """Smallest |pre-activation| among the net's relu layers."""
    h = x
    margin = np.inf
    for layer in net.layers:
        pre = h @ layer.weight.values.T + layer.bias.values
        if layer.activation == "relu":
            margin = min(margin, float(np.min(np.abs(pre))))
            h = np.maximum(pre, 0.0)
        else:
            h = pre
    return margin


def _sample_mlp_case(rng):
    """A random small MLP + batch with all relu pre-activations off the kink."""
    while True:
        d_in = int(rng.integers(2, 5))
        hidden = int(rng.integers(3, 7))
        k = int(rng.integers(2, 4))
        b = int(rng.integers(2, 6))
        net = nn.init_mlp([d_in, hidden, k], int(rng.integers(0, 2**31)))
        x = rng.normal(size=(b, d_in))
        y = rng.integers(0, k, size=b)
        if _relu_margins(net, x) > _MARGIN:
            return net, x, y


def run_first_order_suite(n_models: int = 20, seed: int = 20240) -> CheckResult:
    """Autodiff vs central differences on random 2-layer classification models."""
    rng = np.random.default_rng(seed)
    t0 = time.perf_counter()
    worst = 0.0
    for _ in range(n_models):
        net, x, y = _sample_mlp_case(rng)
        params = net.parameters()

        def loss_fn():
            return losses.cross_entropy(nn.forward(net, Tensor(x)), y)

        auto = backward(loss_fn(), params)
        fd = finite_difference_gradient(loss_fn, params)
        for p, ref in zip(params, fd):
            worst = max(worst, _rel_err(auto[p].values, ref, floor=1e-2))
    return CheckResult(
        "first-order gradients vs finite differences",
        worst, 1e-4, time.perf_counter() - t0,
    )


def _tiny_alignment_case(rng):
    """A <= 50 parameter generator/classifier pair with safe relu margins."""
    while True:
        gen = nn.init_mlp([2, 3], int(rng.integers(0, 2**31)), final_activation="relu")
        f1 = nn.init_mlp([3, 2], int(rng.integers(0, 2**31)))
        f2 = nn.init_mlp([3, 2], int(rng.integers(0, 2**31)))
        xs = rng.normal(size=(3, 2))
        ys = rng.integers(0, 2, size=3)
        xt = rng.normal(size=(3, 2))
        pseudo = PseudoLabelSet(
            labels=rng.integers(0, 2, size=3).astype(np.int64),
            weights=rng.uniform(1.2, 1.9, size=3),
            distances=np.zeros(3),
        )
        if _relu_margins(gen, xs) > _MARGIN and _relu_margins(gen, xt) > _MARGIN:
            src = DomainSet(xs, ys, "source")
            tgt = DomainSet(xt, None, "target")
            return gen, f1, f2, src, tgt, pseudo


def run_second_order_suite(n_instances: int = 10, seed: int = 20241) -> CheckResult:
    """Double-backward generator gradient of the alignment loss vs central
    differences of the loss re-evaluated end to end per perturbation."""
    rng = np.random.default_rng(seed)
    t0 = time.perf_counter()
    worst = 0.0
    for _ in range(n_instances):
        gen, f1, f2, src, tgt, pseudo = _tiny_alignment_case(rng)
        gen_params = gen.parameters()

        def loss_gd():
            gs = grad_discrepancy.source_gradient(gen, f1, f2, src)
            gt = grad_discrepancy.target_gradient(gen, f1, f2, tgt, pseudo)
            return grad_discrepancy.gradient_discrepancy_loss(gs, gt)

        gs = grad_discrepancy.source_gradient(gen, f1, f2, src, create_graph=True)
        gt = grad_discrepancy.target_gradient(gen, f1, f2, tgt, pseudo, create_graph=True)
        loss = grad_discrepancy.gradient_discrepancy_loss(gs, gt)
        auto = backward(loss, gen_params)
        fd = finite_difference_gradient(loss_gd, gen_params)
        for p, ref in zip(gen_params, fd):
            worst = max(worst, _rel_err(auto[p].values, ref, floor=1e-5))
    return CheckResult(
        "double-backward alignment gradient vs finite differences",
        worst, 1e-3, time.perf_counter() - t0,
    )


def run_oracle_suite(n_batches: int = 20, seed: int = 20242) -> CheckResult:
    """Autodiff classifier gradients vs the closed-form linear-head oracle."""
    rng = np.random.default_rng(seed)
    t0 = time.perf_counter()
    worst = 0.0
    for _ in range(n_batches):
        d_in = int(rng.integers(2, 5))
        d_feat = int(rng.integers(2, 5))
        k = int(rng.integers(2, 5))
        b = int(rng.integers(2, 8))
        gen = nn.init_mlp([d_in, d_feat], int(rng.integers(0, 2**31)),
                          final_activation="relu")
        f1 = nn.init_mlp([d_feat, k], int(rng.integers(0, 2**31)))
        f2 = nn.init_mlp([d_feat, k], int(rng.integers(0, 2**31)))
        x = rng.normal(size=(b, d_in))
        y = rng.integers(0, k, size=b)
        weights = rng.uniform(1.0, 2.0, size=b)
        src = DomainSet(x, y, "source")
        tgt = DomainSet(x, None, "target")
        pseudo = PseudoLabelSet(y.astype(np.int64), weights, np.zeros(b))

        with no_grad():
            feats = nn.forward(gen, Tensor(x)).values

        # source gradient: oracle with unit weights, halved by the 1/2 factor
        gvec = grad_discrepancy.source_gradient(gen, f1, f2, src).values
        offset = 0
        for clf in (f1, f2):
            dw, db = grad_discrepancy.linear_head_gradient_oracle(
                feats, y, np.ones(b), clf.layers[0].weight.values,
                clf.layers[0].bias.values,
            )
            expected = 0.5 * np.concatenate([dw.reshape(-1), db.reshape(-1)])
            got = gvec[offset:offset + expected.size]
            worst = max(worst, float(np.max(np.abs(got - expected))))
            offset += expected.size

        # target gradient: entropy-weighted oracle
        gvec = grad_discrepancy.target_gradient(gen, f1, f2, tgt, pseudo).values
        offset = 0
        for clf in (f1, f2):
            dw, db = grad_discrepancy.linear_head_gradient_oracle(
                feats, y, weights, clf.layers[0].weight.values,
                clf.layers[0].bias.values,
            )
            expected = 0.5 * np.concatenate([dw.reshape(-1), db.reshape(-1)])
            got = gvec[offset:offset + expected.size]
            worst = max(worst, float(np.max(np.abs(got - expected))))
            offset += expected.size
    return CheckResult(
        "autodiff domain gradients vs closed-form linear-head oracle",
        worst, 1e-10, time.perf_counter() - t0,
    )
