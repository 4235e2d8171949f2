"""The three-step bi-classifier adversarial training cycle.

Per epoch: refresh pseudo labels once, then for every minibatch pair run

* step 1 - train generator and both classifiers on source cross-entropy plus
  the weighted pseudo-label loss (self-supervision),
* step 2 - with generator features frozen, train the classifiers to keep
  source accuracy while maximizing their output discrepancy on target,
* step 3 - with classifiers frozen, train the generator (several inner
  repeats) to minimize the discrepancy plus the cross-domain gradient
  alignment loss, whose generator gradient flows through double backward.

With self-supervision, gradient alignment, and class balance all disabled
the loop reduces exactly to the classic two-classifier minimax trajectory.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import grad_discrepancy, losses, nn, pseudo_labels
from .tensor import (
    ContractError,
    Tensor,
    backward,
    mul,
    no_grad,
    softmax,
)

__all__ = [
    "ConfigError",
    "TrainConfig",
    "EpochMetrics",
    "BiClassifierModel",
    "build_model",
    "epoch_batches",
    "CgdmTrainer",
    "train",
    "evaluate",
]


class ConfigError(ValueError):
    """Invalid training or experiment configuration."""


@dataclass
class TrainConfig:
    """All hyper-parameters and ablation switches for one run."""

    alpha: float = 0.1  # weight of the self-supervised pseudo-label loss
    beta: float = 0.01  # weight of the gradient alignment loss
    class_balance_weight: float = 0.1
    lr: float = 0.008
    lr_generator: float | None = None  # defaults to lr
    momentum: float = 0.9
    weight_decay: float = 5e-4
    batch_size: int = 64
    epochs: int = 30
    step3_repeats: int = 4
    warmup_epochs: int = 1  # source-only epochs before the adversarial cycle
    seed: int = 0
    enable_adversarial: bool = True  # steps 2 and 3 (off = source-only baseline)
    enable_selfsup: bool = True
    enable_gdm: bool = True
    enable_class_balance: bool = True
    conditional_gdm: bool = False  # per-category alignment variant
    generator_hidden: tuple = (64,)
    feature_dim: int = 32
    classifier_hidden: tuple = (32,)

    def validate(self) -> None:
        if self.alpha < 0 or self.beta < 0:
            raise ConfigError("alpha and beta must be nonnegative")
        if self.step3_repeats < 1:
            raise ConfigError("step3_repeats must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.epochs < 0 or self.warmup_epochs < 0:
            raise ConfigError("epoch counts must be nonnegative")
        if self.lr < 0 or self.momentum < 0 or self.weight_decay < 0:
            raise ConfigError("lr, momentum and weight_decay must be nonnegative")


@dataclass
class EpochMetrics:
    """Per-epoch means of the step losses plus evaluation results.

    ``loss_cls`` comes from step 1 (source term), ``loss_dis``/``loss_gd``
    from the first step-3 repeat, ``loss_cb`` from step 1.  Fields that a
    variant never computes are NaN.
    """

    epoch: int
    loss_cls: float
    loss_dis: float
    loss_gd: float
    loss_cb: float
    target_acc: float
    pseudo_acc: float
    seconds: float


@dataclass
class BiClassifierModel:
    generator: nn.Mlp
    classifier1: nn.Mlp
    classifier2: nn.Mlp

    @property
    def num_classes(self) -> int:
        return self.classifier1.out_dim

    def generator_parameters(self) -> list:
        return self.generator.parameters()

    def classifier_parameters(self) -> list:
        return grad_discrepancy.classifier_parameters(
            self.classifier1, self.classifier2
        )

    def all_parameters(self) -> list:
        return self.generator_parameters() + self.classifier_parameters()


def build_model(in_dim: int, num_classes: int, cfg: TrainConfig) -> BiClassifierModel:
    """Generator + two distinct classifiers; seeds derived from cfg.seed."""
    sg, s1, s2 = (int(s) for s in np.random.SeedSequence(cfg.seed).generate_state(3))
    gen_dims = [in_dim, *cfg.generator_hidden, cfg.feature_dim]
    clf_dims = [cfg.feature_dim, *cfg.classifier_hidden, num_classes]
    return BiClassifierModel(
        generator=nn.init_mlp(gen_dims, sg, final_activation="relu"),
        classifier1=nn.init_mlp(clf_dims, s1),
        classifier2=nn.init_mlp(clf_dims, s2),
    )


def _stream(n: int, total: int, rng) -> np.ndarray:
    """Shuffled indices, reshuffling and recycling until ``total`` are drawn."""
    chunks = []
    drawn = 0
    while drawn < total:
        perm = rng.permutation(n)
        chunks.append(perm)
        drawn += n
    return np.concatenate(chunks)[:total]


def epoch_batches(n_source: int, n_target: int | None, batch_size: int, rng):
    """Deterministic minibatch index plan for one epoch.

    Both domains contribute equally sized batches each iteration; the epoch
    has ceil(max(n_source, n_target)/batch_size) iterations and the shorter
    stream reshuffles and recycles.  With ``n_target=None`` (warmup) only
    source batches are returned.
    """
    n_max = max(n_source, n_target or 0)
    iters = -(-n_max // batch_size)
    total = iters * batch_size
    src = _stream(n_source, total, rng).reshape(iters, batch_size)
    if n_target is None:
        return [src[i] for i in range(iters)]
    tgt = _stream(n_target, total, rng).reshape(iters, batch_size)
    return [(src[i], tgt[i]) for i in range(iters)]


class CgdmTrainer:
    """Holds the model, the two optimizers, and the three step updates.

    The generator and the classifiers have separate optimizers so velocity
    state survives partial updates (step 2 touches only classifiers, step 3
    only the generator).
    """

    def __init__(self, cfg: TrainConfig, model: BiClassifierModel | None = None):
        cfg.validate()
        self.cfg = cfg
        self.model = model
        self.epoch = 0
        self.opt_g = None
        self.opt_f = None
        if model is not None:
            self._attach_optimizers()

    def _attach_optimizers(self) -> None:
        cfg = self.cfg
        lr_g = cfg.lr if cfg.lr_generator is None else cfg.lr_generator
        self.opt_g = nn.SgdOptimizer(
            self.model.generator_parameters(), lr_g, cfg.momentum, cfg.weight_decay
        )
        self.opt_f = nn.SgdOptimizer(
            self.model.classifier_parameters(), cfg.lr, cfg.momentum, cfg.weight_decay
        )

    def _check_pseudo(self, pseudo) -> None:
        if pseudo.epoch is not None and pseudo.epoch != self.epoch:
            raise ContractError(
                f"pseudo labels from epoch {pseudo.epoch} used in epoch {self.epoch}"
            )

    def _source_only_update(self, source_batch) -> dict:
        m = self.model
        loss = losses.source_classification_loss(
            m.generator, m.classifier1, m.classifier2, source_batch
        )
        grads = backward(loss, m.all_parameters())
        self.opt_g.step(grads)
        self.opt_f.step(grads)
        return {"loss_cls": loss.item()}

    def step1_update(self, source_batch, target_batch, pseudo) -> dict:
        """Train G, F1, F2 on source CE (+ weighted pseudo CE, + balance)."""
        cfg = self.cfg
        self._check_pseudo(pseudo)
        m = self.model
        use_selfsup = cfg.enable_selfsup and cfg.alpha > 0
        use_balance = cfg.enable_class_balance and cfg.class_balance_weight > 0
        if not (use_selfsup or use_balance):
            return self._source_only_update(source_batch)

        loss_cls = losses.source_classification_loss(
            m.generator, m.classifier1, m.classifier2, source_batch
        )
        total = loss_cls
        out = {"loss_cls": loss_cls.item()}
        feats_t = nn.forward(m.generator, Tensor(target_batch.features))
        logits_t1 = nn.forward(m.classifier1, feats_t)
        logits_t2 = nn.forward(m.classifier2, feats_t)
        if use_selfsup:
            selfsup = mul(
                losses.weighted_cross_entropy(logits_t1, pseudo)
                + losses.weighted_cross_entropy(logits_t2, pseudo),
                0.5,
            )
            total = total + mul(selfsup, cfg.alpha)
            out["loss_selfsup"] = selfsup.item()
        if use_balance:
            balance = losses.class_balance_loss(softmax(logits_t1), softmax(logits_t2))
            total = total + mul(balance, cfg.class_balance_weight)
            out["loss_cb"] = balance.item()
        grads = backward(total, m.all_parameters())
        self.opt_g.step(grads)
        self.opt_f.step(grads)
        return out

    def step2_update(self, source_batch, target_batch) -> dict:
        """Train F1, F2 to keep source accuracy while disagreeing on target.

        Generator features are computed outside the graph, so generator
        parameters are untouched by construction.
        """
        cfg = self.cfg
        m = self.model
        with no_grad():
            feats_s = nn.forward(m.generator, Tensor(source_batch.features))
            feats_t = nn.forward(m.generator, Tensor(target_batch.features))
        loss_cls = mul(
            losses.cross_entropy(
                nn.forward(m.classifier1, feats_s), source_batch.labels
            )
            + losses.cross_entropy(
                nn.forward(m.classifier2, feats_s), source_batch.labels
            ),
            0.5,
        )
        p1 = softmax(nn.forward(m.classifier1, feats_t))
        p2 = softmax(nn.forward(m.classifier2, feats_t))
        loss_dis = losses.l1_discrepancy(p1, p2)
        total = loss_cls - loss_dis
        out = {"loss_cls": loss_cls.item(), "loss_dis": loss_dis.item()}
        if cfg.enable_class_balance and cfg.class_balance_weight > 0:
            balance = losses.class_balance_loss(p1, p2)
            total = total + mul(balance, cfg.class_balance_weight)
            out["loss_cb"] = balance.item()
        grads = backward(total, m.classifier_parameters())
        self.opt_f.step(grads)
        return out

    def step3_update(self, source_batch, target_batch, pseudo) -> dict:
        """Train G to shrink classifier disagreement plus the gradient gap.

        Runs ``step3_repeats`` inner updates.  Only generator parameters move;
        the classifiers participate in the graph (their parameter gradients
        are what the alignment loss is made of) but are never stepped.
        """
        cfg = self.cfg
        self._check_pseudo(pseudo)
        m = self.model
        use_gdm = cfg.enable_gdm and cfg.beta > 0
        out = {}
        for rep in range(cfg.step3_repeats):
            feats_t = nn.forward(m.generator, Tensor(target_batch.features))
            p1 = softmax(nn.forward(m.classifier1, feats_t))
            p2 = softmax(nn.forward(m.classifier2, feats_t))
            loss_dis = losses.l1_discrepancy(p1, p2)
            total = loss_dis
            loss_gd = None
            if use_gdm:
                if cfg.conditional_gdm:
                    loss_gd = grad_discrepancy.conditional_gradient_loss(
                        m.generator, m.classifier1, m.classifier2,
                        source_batch, target_batch, pseudo, create_graph=True,
                    )
                else:
                    gs = grad_discrepancy.source_gradient(
                        m.generator, m.classifier1, m.classifier2,
                        source_batch, create_graph=True,
                    )
                    gt = grad_discrepancy.target_gradient(
                        m.generator, m.classifier1, m.classifier2,
                        target_batch, pseudo, create_graph=True,
                    )
                    loss_gd = grad_discrepancy.gradient_discrepancy_loss(gs, gt)
                total = total + mul(loss_gd, cfg.beta)
            grads = backward(total, m.generator_parameters())
            self.opt_g.step(grads)
            if rep == 0:
                out["loss_dis"] = loss_dis.item()
                if loss_gd is not None:
                    out["loss_gd"] = loss_gd.item()
        return out

    def fit(self, source, target, rng=None) -> list:
        """Run warmup plus the full three-step schedule; returns epoch metrics."""
        cfg = self.cfg
        num_classes = _check_class_counts(source, target)
        if self.model is None:
            self.model = build_model(source.dim, num_classes, cfg)
            self._attach_optimizers()
        elif self.model.num_classes < num_classes:
            raise ConfigError(
                f"model has {self.model.num_classes} outputs, data has "
                f"{num_classes} classes"
            )
        if cfg.epochs == 0:  # nothing runs, not even warmup
            return []
        if rng is None:
            shuffle_seed = int(np.random.SeedSequence(cfg.seed).generate_state(4)[3])
            rng = np.random.default_rng(shuffle_seed)
        target_train = target.unlabeled()
        m = self.model
        metrics = []
        for epoch in range(1, cfg.warmup_epochs + cfg.epochs + 1):
            t0 = time.perf_counter()
            self.epoch = epoch
            sums = {}
            counts = {}

            def tally(res):
                for key, val in res.items():
                    sums[key] = sums.get(key, 0.0) + val
                    counts[key] = counts.get(key, 0) + 1

            pseudo = None
            if epoch <= cfg.warmup_epochs:
                for src_idx in epoch_batches(source.n, None, cfg.batch_size, rng):
                    tally(self._source_only_update(source.take(src_idx)))
            else:
                pseudo = pseudo_labels.pseudo_label_epoch(
                    m.generator, m.classifier1, m.classifier2, target_train,
                    epoch=epoch,
                )
                plan = epoch_batches(source.n, target_train.n, cfg.batch_size, rng)
                for src_idx, tgt_idx in plan:
                    sb = source.take(src_idx)
                    tb = target_train.take(tgt_idx)
                    pb = pseudo.take(tgt_idx)
                    tally(self.step1_update(sb, tb, pb))
                    if cfg.enable_adversarial:
                        self.step2_update(sb, tb)
                        tally(self.step3_update(sb, tb, pb))

            def mean_of(key):
                return sums[key] / counts[key] if key in sums else float("nan")

            if target.labels is not None:
                target_acc, _ = evaluate(
                    m.generator, m.classifier1, m.classifier2, target
                )
                if pseudo is not None:
                    pseudo_acc = float(np.mean(pseudo.labels == target.labels))
                else:
                    pseudo_acc = float("nan")
            else:
                target_acc, pseudo_acc = float("nan"), float("nan")
            metrics.append(
                EpochMetrics(
                    epoch=epoch,
                    loss_cls=mean_of("loss_cls"),
                    loss_dis=mean_of("loss_dis"),
                    loss_gd=mean_of("loss_gd"),
                    loss_cb=mean_of("loss_cb"),
                    target_acc=target_acc,
                    pseudo_acc=pseudo_acc,
                    seconds=time.perf_counter() - t0,
                )
            )
        return metrics


def _check_class_counts(source, target) -> int:
    if source.labels is None:
        raise ConfigError("source set must be labeled")
    num_classes = int(source.labels.max()) + 1
    if source.labels.min() < 0:
        raise ConfigError("negative source label")
    if target.labels is not None and target.labels.size:
        if target.labels.min() < 0 or target.labels.max() >= num_classes:
            raise ConfigError(
                f"target labels outside source class range [0, {num_classes})"
            )
    return num_classes


def train(source, target, cfg: TrainConfig):
    """Full training per the configured schedule.

    Returns (metrics per epoch, trained model).  Fully deterministic for a
    given config, including the seed.
    """
    trainer = CgdmTrainer(cfg)
    metrics = trainer.fit(source, target)
    return metrics, trainer.model


def evaluate(gen, f1, f2, dset):
    """Accuracy of the averaged-softmax prediction, plus per-class accuracy."""
    if dset.n == 0:
        raise ContractError("evaluate needs a non-empty set")
    if dset.labels is None:
        raise ContractError("evaluate needs a labeled set")
    with no_grad():
        feats = nn.forward(gen, Tensor(dset.features))
        p1 = pseudo_labels.softmax_rows(nn.forward(f1, feats))
        p2 = pseudo_labels.softmax_rows(nn.forward(f2, feats))
    pred = np.argmax(0.5 * (p1 + p2), axis=1)
    correct = pred == dset.labels
    accuracy = float(np.mean(correct))
    num_classes = max(f1.out_dim, int(dset.labels.max()) + 1)
    per_class = np.full(num_classes, np.nan)
    for k in range(num_classes):
        mask = dset.labels == k
        if mask.any():
            per_class[k] = float(np.mean(correct[mask]))
    return accuracy, per_class
