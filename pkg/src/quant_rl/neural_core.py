"""Feedforward networks with hand-written reverse-mode gradients.

Weights are stored as ``(fan_in, fan_out)`` matrices so a batch ``x`` of
shape ``(batch, fan_in)`` maps through ``x @ W + b``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import NumericError, ShapeError

HIDDEN_ACTIVATIONS = ("relu", "tanh")
OUTPUT_ACTIVATIONS = ("identity", "tanh", "softmax")
FORMAT_VERSION = 1


@dataclass
class Mlp:
    layer_sizes: list[int]
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    activations: list[str]
    output_activation: str = "identity"

    def __post_init__(self):
        self.layer_sizes = [int(s) for s in self.layer_sizes]
        n_layers = len(self.layer_sizes) - 1
        if n_layers < 1 or min(self.layer_sizes) <= 0:
            raise ShapeError(f"invalid layer sizes {self.layer_sizes}")
        if len(self.weights) != n_layers or len(self.biases) != n_layers:
            raise ShapeError("need one weight matrix and bias per layer")
        if len(self.activations) != n_layers - 1:
            raise ShapeError("need one activation per hidden layer")
        for a in self.activations:
            if a not in HIDDEN_ACTIVATIONS:
                raise ValueError(f"unknown hidden activation {a!r}")
        if self.output_activation not in OUTPUT_ACTIVATIONS:
            raise ValueError(f"unknown output activation {self.output_activation!r}")
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            shape = (self.layer_sizes[k], self.layer_sizes[k + 1])
            if w.shape != shape or b.shape != (shape[1],):
                raise ShapeError(f"layer {k}: weight {w.shape} / bias {b.shape}, expected {shape}")

    @property
    def n_inputs(self) -> int:
        return self.layer_sizes[0]

    @property
    def n_outputs(self) -> int:
        return self.layer_sizes[-1]

    def parameters(self) -> list[np.ndarray]:
        """Parameter arrays in a fixed order: W0, b0, W1, b1, ..."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    def n_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def copy(self) -> "Mlp":
        return Mlp(list(self.layer_sizes), [w.copy() for w in self.weights],
                   [b.copy() for b in self.biases], list(self.activations), self.output_activation)

    def __call__(self, x) -> np.ndarray:
        return forward(self, x)

    def to_dict(self) -> dict:
        return {
            "format_version": FORMAT_VERSION,
            "layer_sizes": self.layer_sizes,
            "activations": self.activations,
            "output_activation": self.output_activation,
            "weights": [w.reshape(-1).tolist() for w in self.weights],
            "biases": [b.tolist() for b in self.biases],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "Mlp":
        if data.get("format_version") != FORMAT_VERSION:
            raise ValueError(f"unsupported model format version {data.get('format_version')}")
        sizes = data["layer_sizes"]
        weights = [np.array(w, dtype=float).reshape(sizes[k], sizes[k + 1]) for k, w in enumerate(data["weights"])]
        biases = [np.array(b, dtype=float) for b in data["biases"]]
        return cls(sizes, weights, biases, list(data["activations"]), data["output_activation"])


@dataclass
class GradientSet:
    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def arrays(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    def __add__(self, other: "GradientSet") -> "GradientSet":
        return GradientSet([a + b for a, b in zip(self.weights, other.weights)],
                           [a + b for a, b in zip(self.biases, other.biases)])

    def scale(self, c: float) -> "GradientSet":
        return GradientSet([c * w for w in self.weights], [c * b for b in self.biases])

    def norm(self) -> float:
        return float(np.sqrt(sum(float((a * a).sum()) for a in self.arrays())))

    @classmethod
    def zeros_like(cls, net: Mlp) -> "GradientSet":
        return cls([np.zeros_like(w) for w in net.weights], [np.zeros_like(b) for b in net.biases])


def init_mlp(
    layer_sizes: Sequence[int],
    rng: np.random.Generator,
    activation: str = "relu",
    output_activation: str = "identity",
    output_scale: float = 1.0,
) -> Mlp:
    """He-style uniform fan-in initialization; biases start at zero."""
    sizes = [int(s) for s in layer_sizes]
    weights, biases = [], []
    for k in range(len(sizes) - 1):
        bound = np.sqrt(6.0 / sizes[k])
        w = rng.uniform(-bound, bound, size=(sizes[k], sizes[k + 1]))
        if k == len(sizes) - 2:
            w *= output_scale
        weights.append(w)
        biases.append(np.zeros(sizes[k + 1]))
    return Mlp(sizes, weights, biases, [activation] * (len(sizes) - 2), output_activation)


def _softmax(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def _as_batch(net: Mlp, x) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != net.n_inputs:
        raise ShapeError(f"input shape {x.shape} incompatible with {net.n_inputs} network inputs")
    return x, single


def _forward_cache(net: Mlp, x: np.ndarray) -> list[np.ndarray]:
    acts = [x]
    h = x
    last = len(net.weights) - 1
    for k, (w, b) in enumerate(zip(net.weights, net.biases)):
        z = h @ w + b
        if k < last:
            h = np.maximum(z, 0.0) if net.activations[k] == "relu" else np.tanh(z)
        elif net.output_activation == "tanh":
            h = np.tanh(z)
        elif net.output_activation == "softmax":
            h = _softmax(z)
        else:
            h = z
        acts.append(h)
    return acts


def forward(net: Mlp, x) -> np.ndarray:
    """Network output for one input vector or a batch of row vectors."""
    xb, single = _as_batch(net, x)
    out = _forward_cache(net, xb)[-1]
    return out[0] if single else out


def backward(net: Mlp, x, upstream, return_input_grad: bool = False):
    """Gradients of ``sum(output * upstream)`` with respect to every parameter.

    With a batch input the gradients are summed over the batch. If
    ``return_input_grad`` is set, also returns d(sum(output * upstream))/dx.
    """
    xb, single = _as_batch(net, x)
    g = np.asarray(upstream, dtype=float)
    if single:
        g = g[None, :] if g.ndim == 1 else g
    if g.shape != (xb.shape[0], net.n_outputs):
        raise ShapeError(f"upstream shape {g.shape} does not match output shape {(xb.shape[0], net.n_outputs)}")
    acts = _forward_cache(net, xb)
    last = len(net.weights) - 1
    out = acts[-1]
    if net.output_activation == "tanh":
        dz = g * (1.0 - out * out)
    elif net.output_activation == "softmax":
        dz = out * (g - (g * out).sum(axis=1, keepdims=True))
    else:
        dz = g
    gw = [None] * len(net.weights)
    gb = [None] * len(net.biases)
    for k in range(last, -1, -1):
        gw[k] = acts[k].T @ dz
        gb[k] = dz.sum(axis=0)
        dh = dz @ net.weights[k].T
        if k > 0:
            h = acts[k]
            if net.activations[k - 1] == "relu":
                dz = dh * (h > 0)
            else:
                dz = dh * (1.0 - h * h)
        else:
            dz = dh
    grads = GradientSet(gw, gb)
    if return_input_grad:
        dx = dz[0] if single else dz
        return grads, dx
    return grads


def input_gradient(net: Mlp, x, upstream) -> np.ndarray:
    return backward(net, x, upstream, return_input_grad=True)[1]


class Adam:
    """Adam with bias correction over a fixed list of parameter arrays."""

    def __init__(self, lr: float = 3e-4, betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8,
                 max_grad_norm: float | None = None):
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.max_grad_norm = max_grad_norm
        self.t = 0
        self.m: list[np.ndarray] | None = None
        self.v: list[np.ndarray] | None = None

    def step(self, params: list[np.ndarray], grads: list[np.ndarray]) -> None:
        if len(params) != len(grads) or any(p.shape != g.shape for p, g in zip(params, grads)):
            raise ShapeError("gradients are not congruent with parameters")
        if not all(np.isfinite(g).all() for g in grads):
            raise NumericError("non-finite gradient passed to Adam")
        if self.max_grad_norm is not None:
            total = np.sqrt(sum(float((g * g).sum()) for g in grads))
            if total > self.max_grad_norm:
                grads = [g * (self.max_grad_norm / total) for g in grads]
        if self.m is None:
            self.m = [np.zeros_like(p) for p in params]
            self.v = [np.zeros_like(p) for p in params]
        b1, b2 = self.betas
        self.t += 1
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def adam_step(net: Mlp, grads: GradientSet, state: Adam | None = None, lr: float = 3e-4,
              betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8) -> Mlp:
    """One in-place Adam update of ``net``. Pass the same ``state`` across calls."""
    if state is None:
        state = Adam(lr, betas, eps)
    state.step(net.parameters(), grads.arrays())
    return net


def soft_update(target: Mlp, online: Mlp, tau: float) -> Mlp:
    """In-place ``target <- tau * online + (1 - tau) * target``."""
    if target.layer_sizes != online.layer_sizes:
        raise ShapeError(f"architectures differ: {target.layer_sizes} vs {online.layer_sizes}")
    if not 0.0 <= tau <= 1.0:
        raise ValueError("tau must be in [0, 1]")
    for pt, po in zip(target.parameters(), online.parameters()):
        if tau == 1.0:
            pt[...] = po
        elif tau > 0.0:
            pt *= 1.0 - tau
            pt += tau * po
    return target


def save_mlp(net: Mlp, path) -> None:
    Path(path).write_text(json.dumps(net.to_dict()))


def load_mlp(path) -> Mlp:
    return Mlp.from_dict(json.loads(Path(path).read_text()))
