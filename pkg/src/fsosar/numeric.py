"""Numeric building blocks: probability losses, dense nets with manual backprop, Adam, seeded RNG.

Everything runs in float64. Functions accept arrays with arbitrary leading
batch dimensions; the last axis is the vector axis.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

PROB_FLOOR = 1e-12
NORM_FLOOR = 1e-12

ACTIVATIONS = ("relu", "sigmoid", "identity")


def make_rng(seed: int) -> np.random.Generator:
    """Seeded generator. Always PCG64 (64-bit state, 128-bit LCG + XSL-RR output)."""
    return np.random.Generator(np.random.PCG64(seed))


def spawn_rngs(seed: int, n: int) -> list[np.random.Generator]:
    """``n`` statistically independent PCG64 streams derived from one seed."""
    return [np.random.Generator(np.random.PCG64(s)) for s in np.random.SeedSequence(seed).spawn(n)]


def softmax(logits) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    if z.ndim == 0 or z.shape[-1] == 0:
        raise ValueError("softmax of an empty vector")
    if not np.all(np.isfinite(z)):
        raise ValueError("softmax input contains non-finite values")
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def cross_entropy(probs, label: int) -> float:
    p = np.asarray(probs, dtype=np.float64)
    if not 0 <= label < p.shape[-1]:
        raise IndexError(f"label {label} out of range for {p.shape[-1]} classes")
    return float(-np.log(max(p[label], PROB_FLOOR)))


def eos_loss(probs) -> float:
    """Entropic open-set loss: mean negative log-probability over all classes.

    Lower-bounded by ln K, reached only by the uniform distribution.
    """
    p = np.asarray(probs, dtype=np.float64)
    if p.size == 0:
        raise ValueError("eos_loss of an empty distribution")
    return float(-np.mean(np.log(np.maximum(p, PROB_FLOOR))))


def bce(score: float, target: int) -> float:
    if target not in (0, 1):
        raise ValueError(f"BCE target must be 0 or 1, got {target!r}")
    s = min(max(float(score), PROB_FLOOR), 1.0 - PROB_FLOOR)
    return -np.log(s) if target == 1 else -np.log1p(-s)


def cosine_similarity(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na <= NORM_FLOOR or nb <= NORM_FLOOR:
        raise ValueError("cosine similarity of a zero vector (degenerate feature)")
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def _sigmoid(x):
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


@dataclass
class Layer:
    W: np.ndarray  # (out, in)
    b: np.ndarray  # (out,)
    activation: str = "identity"

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        self.W = np.asarray(self.W, dtype=np.float64)
        self.b = np.asarray(self.b, dtype=np.float64)
        if self.W.ndim != 2 or self.b.shape != (self.W.shape[0],):
            raise ValueError(f"layer shapes W{self.W.shape} b{self.b.shape} do not match")


@dataclass
class DenseNet:
    layers: list[Layer]

    def __post_init__(self):
        for i, (a, b) in enumerate(zip(self.layers, self.layers[1:])):
            if a.W.shape[0] != b.W.shape[1]:
                raise ValueError(f"layer {i} outputs {a.W.shape[0]} but layer {i + 1} expects {b.W.shape[1]}")

    @property
    def input_dim(self) -> int:
        return self.layers[0].W.shape[1]

    @property
    def output_dim(self) -> int:
        return self.layers[-1].W.shape[0]

    def params(self, prefix: str = "") -> dict[str, np.ndarray]:
        """Named parameter arrays. These are the live arrays, so in-place updates stick."""
        out = {}
        for i, layer in enumerate(self.layers):
            out[f"{prefix}{i}.W"] = layer.W
            out[f"{prefix}{i}.b"] = layer.b
        return out

    def copy(self) -> DenseNet:
        return DenseNet([Layer(l.W.copy(), l.b.copy(), l.activation) for l in self.layers])

    @classmethod
    def build(cls, sizes, activations, rng: np.random.Generator, zero_last: bool = False) -> DenseNet:
        """He-style Gaussian init; ``zero_last`` zeroes the output layer."""
        layers = []
        for i, (n_in, n_out, act) in enumerate(zip(sizes[:-1], sizes[1:], activations)):
            W = rng.normal(0.0, np.sqrt(2.0 / n_in), size=(n_out, n_in))
            if zero_last and i == len(sizes) - 2:
                W = np.zeros((n_out, n_in))
            layers.append(Layer(W, np.zeros(n_out), act))
        return cls(layers)


@dataclass
class Tape:
    inputs: list[np.ndarray] = field(default_factory=list)
    outputs: list[np.ndarray] = field(default_factory=list)


def net_forward(net: DenseNet, x) -> tuple[np.ndarray, Tape]:
    """Forward pass over ``x`` of shape (d,) or (n, d)."""
    h = np.asarray(x, dtype=np.float64)
    if h.shape[-1] != net.input_dim:
        raise ValueError(f"net expects input dim {net.input_dim}, got {h.shape[-1]}")
    tape = Tape()
    for layer in net.layers:
        tape.inputs.append(h)
        z = h @ layer.W.T + layer.b
        if layer.activation == "relu":
            h = np.maximum(z, 0.0)
        elif layer.activation == "sigmoid":
            h = _sigmoid(z)
        else:
            h = z
        tape.outputs.append(h)
    return h, tape


def net_backward(
    net: DenseNet, tape: Tape, output_grad, prefix: str = "", pre_activation: bool = False
) -> tuple[dict[str, np.ndarray], np.ndarray]:
    """Backprop ``output_grad`` through the recorded pass.

    Parameter gradients are summed over batch rows. With ``pre_activation``
    the gradient is taken to be with respect to the last layer's input to its
    activation, which lets callers fold the activation into a stable loss.
    """
    g = np.asarray(output_grad, dtype=np.float64)
    if len(tape.outputs) != len(net.layers) or g.shape != tape.outputs[-1].shape:
        raise ValueError(f"output grad shape {g.shape} does not match the recorded pass")
    grads = {}
    for i in reversed(range(len(net.layers))):
        layer, h_in, h_out = net.layers[i], tape.inputs[i], tape.outputs[i]
        if pre_activation and i == len(net.layers) - 1:
            pass
        elif layer.activation == "relu":
            g = g * (h_out > 0)
        elif layer.activation == "sigmoid":
            g = g * h_out * (1.0 - h_out)
        g2 = g.reshape(-1, g.shape[-1])
        grads[f"{prefix}{i}.W"] = g2.T @ h_in.reshape(-1, h_in.shape[-1])
        grads[f"{prefix}{i}.b"] = g2.sum(axis=0)
        g = g @ layer.W
    return grads, g


class Adam:
    """Adam with bias correction. Moments are keyed by parameter name."""

    def __init__(self, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.step_count = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        for name, g in grads.items():
            if name not in params:
                raise KeyError(f"gradient for unknown parameter {name!r}")
            if g.shape != params[name].shape:
                raise ValueError(f"gradient shape {g.shape} != parameter shape {params[name].shape} for {name!r}")
            if not np.all(np.isfinite(g)):
                raise FloatingPointError(f"non-finite gradient for parameter {name!r}")
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.beta1**t
        c2 = 1.0 - self.beta2**t
        for name, g in grads.items():
            m = self.m.setdefault(name, np.zeros_like(g))
            v = self.v.setdefault(name, np.zeros_like(g))
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            params[name] -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def adam_step(state: Adam, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    state.step(params, grads)
    return params
