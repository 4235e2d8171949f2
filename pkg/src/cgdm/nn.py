"""Small MLPs, Glorot-uniform init, momentum SGD, and text checkpoints."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import (
    ContractError,
    ShapeError,
    Tensor,
    add,
    matmul,
    relu,
    transpose,
)

__all__ = ["Layer", "Mlp", "init_mlp", "forward", "SgdOptimizer", "sgd_step",
           "save_params", "load_params"]


@dataclass
class Layer:
    weight: Tensor  # out-by-in
    bias: Tensor  # out
    activation: str  # "relu" or "none"


@dataclass
class Mlp:
    layers: list

    def parameters(self) -> list:
        params = []
        for layer in self.layers:
            params.append(layer.weight)
            params.append(layer.bias)
        return params

    @property
    def in_dim(self) -> int:
        return self.layers[0].weight.shape[1]

    @property
    def out_dim(self) -> int:
        return self.layers[-1].weight.shape[0]


def init_mlp(layer_dims, seed: int, final_activation: str = "none") -> Mlp:
    """Build an MLP with Glorot-uniform weights and zero biases.

    ``layer_dims`` is [in, hidden..., out]; hidden layers use relu and the
    final layer uses ``final_activation``.  Deterministic for a given seed.
    """
    dims = list(layer_dims)
    if len(dims) < 2:
        raise ContractError("init_mlp needs at least [in, out] dims")
    if any(d <= 0 for d in dims):
        raise ContractError(f"layer dims must be positive, got {dims}")
    rng = np.random.default_rng(seed)
    layers = []
    for i, (d_in, d_out) in enumerate(zip(dims[:-1], dims[1:])):
        bound = np.sqrt(6.0 / (d_in + d_out))
        w = rng.uniform(-bound, bound, size=(d_out, d_in))
        act = final_activation if i == len(dims) - 2 else "relu"
        layers.append(Layer(Tensor(w), Tensor(np.zeros(d_out)), act))
    return Mlp(layers)


def forward(net: Mlp, x: Tensor) -> Tensor:
    """Affine + activation per layer; recorded on the active graph."""
    if x.values.ndim != 2:
        raise ShapeError(f"forward expects a b-by-in batch, got {x.shape}")
    if x.shape[1] != net.in_dim:
        raise ShapeError(
            f"input dim {x.shape[1]} does not match first layer ({net.in_dim})"
        )
    h = x
    for layer in net.layers:
        h = add(matmul(h, transpose(layer.weight)), layer.bias)
        if layer.activation == "relu":
            h = relu(h)
    return h


@dataclass
class SgdOptimizer:
    """Momentum SGD with weight decay.

    Update per parameter: g <- g + wd*theta; v <- momentum*v + g;
    theta <- theta - lr*v.  Velocities persist across steps so partial
    updates (classifier-only / generator-only) keep their momentum state.
    """

    params: list
    lr: float
    momentum: float = 0.0
    weight_decay: float = 0.0
    velocities: dict = field(default_factory=dict)

    def step(self, grads: dict) -> None:
        for p in self.params:
            g = grads.get(p)
            g_vals = np.zeros_like(p.values) if g is None else g.values
            if g_vals.shape != p.values.shape:
                raise ContractError(
                    f"grad shape {g_vals.shape} != param shape {p.values.shape}"
                )
            if self.weight_decay:
                g_vals = g_vals + self.weight_decay * p.values
            v = self.velocities.get(id(p))
            if v is None:
                v = np.zeros_like(p.values)
            v = self.momentum * v + g_vals
            self.velocities[id(p)] = v
            p.values -= self.lr * v


def sgd_step(params, grads: dict, state: SgdOptimizer):
    """Functional view of :meth:`SgdOptimizer.step`; returns the params."""
    state.step(grads)
    return params


def save_params(named_nets: dict, path) -> None:
    """Write parameters as a stable text checkpoint.

    Format (one record per parameter, row-major values with 17 significant
    digits)::

        # cgdm checkpoint v1
        arch <net> <act0>,<act1>,...
        param <net>.layer<i>.weight <out> <in>
        <values on one line>
        param <net>.layer<i>.bias <out>
        <values on one line>
    """
    lines = ["# cgdm checkpoint v1"]
    for name, net in named_nets.items():
        acts = ",".join(layer.activation for layer in net.layers)
        lines.append(f"arch {name} {acts}")
    for name, net in named_nets.items():
        for i, layer in enumerate(net.layers):
            for kind, t in (("weight", layer.weight), ("bias", layer.bias)):
                dims = " ".join(str(d) for d in t.shape)
                lines.append(f"param {name}.layer{i}.{kind} {dims}")
                lines.append(" ".join(f"{v:.17g}" for v in t.values.reshape(-1)))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def load_params(path) -> dict:
    """Read a checkpoint written by :func:`save_params` into fresh Mlps."""
    with open(path) as fh:
        lines = [ln.rstrip("\n") for ln in fh]
    acts = {}
    weights = {}
    i = 0
    while i < len(lines):
        line = lines[i]
        if line.startswith("arch "):
            _, name, act_list = line.split(" ", 2)
            acts[name] = act_list.split(",")
        elif line.startswith("param "):
            parts = line.split()
            full = parts[1]
            shape = tuple(int(d) for d in parts[2:])
            i += 1
            vals = np.array([float(v) for v in lines[i].split()])
            weights[full] = vals.reshape(shape)
        i += 1

    nets = {}
    for name, act_list in acts.items():
        layers = []
        for j, act in enumerate(act_list):
            w = weights[f"{name}.layer{j}.weight"]
            b = weights[f"{name}.layer{j}.bias"]
            layers.append(Layer(Tensor(w), Tensor(b), act))
        nets[name] = Mlp(layers)
    return nets
