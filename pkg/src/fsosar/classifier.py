"""Prototype classifier: linear feature head, mean prototypes, cosine / negative-distance logits."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numeric import NORM_FLOOR, PROB_FLOOR, DenseNet, Layer, net_forward, softmax

HEADS = ("cosine", "neg_distance")
DEFAULT_TEMPERATURE = 10.0


@dataclass
class FeatureHead:
    net: DenseNet

    @property
    def d_feat(self) -> int:
        return self.net.output_dim

    @classmethod
    def init(cls, d_in: int, d_feat: int, rng: np.random.Generator) -> FeatureHead:
        """Identity when square, otherwise Gaussian with variance 1/d_in."""
        if d_in == d_feat:
            W = np.eye(d_in)
        else:
            W = rng.normal(0.0, 1.0 / np.sqrt(d_in), size=(d_feat, d_in))
        return cls(DenseNet([Layer(W, np.zeros(d_feat), "identity")]))


def embed(head: FeatureHead, x) -> np.ndarray:
    vec = getattr(x, "vector", x)
    out, _ = net_forward(head.net, vec)
    return out


@dataclass
class PrototypeSet:
    prototypes: np.ndarray  # (..., K, d) or (..., K+1, d) with garbage last
    head_kind: str = "cosine"
    temperature: float = DEFAULT_TEMPERATURE
    has_garbage: bool = False

    def __post_init__(self):
        if self.head_kind not in HEADS:
            raise ValueError(f"unknown head {self.head_kind!r}; expected one of {HEADS}")
        if not self.temperature > 0:
            raise ValueError("temperature must be positive")

    @property
    def k(self) -> int:
        return self.prototypes.shape[-2]


@dataclass
class LogitVector:
    values: np.ndarray  # (..., K)
    head_kind: str
    temperature: float = DEFAULT_TEMPERATURE

    @property
    def bounded(self) -> bool:
        return self.head_kind == "cosine"


def mean_prototypes(shot_feats: np.ndarray) -> np.ndarray:
    """(..., K, N, d) -> (..., K, d).

    Shots are sorted per coordinate before summing so the result is bitwise
    independent of shot order.
    """
    return np.sort(shot_feats, axis=-2).mean(axis=-2)


def compute_prototypes(head: FeatureHead, task, head_kind: str = "cosine", temperature: float = DEFAULT_TEMPERATURE) -> PrototypeSet:
    feats = embed(head, task.support)
    return PrototypeSet(mean_prototypes(feats), head_kind, temperature)


# -- array-level logits and their vector-Jacobian products ---------------------


def cosine_logits(P: np.ndarray, q: np.ndarray) -> np.ndarray:
    qn = np.linalg.norm(q, axis=-1)
    Pn = np.linalg.norm(P, axis=-1)
    if np.any(qn <= NORM_FLOOR):
        raise ValueError("zero query feature under the cosine head")
    if np.any(Pn <= NORM_FLOOR):
        raise ValueError("zero prototype under the cosine head (degenerate support)")
    s = np.einsum("...kd,...d->...k", P, q) / (Pn * qn[..., None])
    return np.clip(s, -1.0, 1.0)


def cosine_logits_backward(P, q, s, g):
    qn = np.linalg.norm(q, axis=-1, keepdims=True)
    Pn = np.linalg.norm(P, axis=-1, keepdims=True)
    qh = q / qn
    Ph = P / Pn
    dP = g[..., None] * (qh[..., None, :] - s[..., None] * Ph) / Pn
    dq = (np.einsum("...k,...kd->...d", g, Ph) - (g * s).sum(axis=-1, keepdims=True) * qh) / qn
    return dP, dq


def neg_distance_logits(P: np.ndarray, q: np.ndarray) -> np.ndarray:
    return -np.linalg.norm(q[..., None, :] - P, axis=-1)


def neg_distance_logits_backward(P, q, s, g):
    diff = q[..., None, :] - P
    dist = -s
    safe = np.where(dist > NORM_FLOOR, dist, 1.0)
    unit = np.where((dist > NORM_FLOOR)[..., None], diff / safe[..., None], 0.0)
    dP = g[..., None] * unit
    dq = -np.einsum("...k,...kd->...d", g, unit)
    return dP, dq


def raw_logits(P, q, head_kind: str) -> np.ndarray:
    if head_kind == "cosine":
        return cosine_logits(P, q)
    if head_kind == "neg_distance":
        return neg_distance_logits(P, q)
    raise ValueError(f"unknown head {head_kind!r}")


def raw_logits_backward(P, q, s, g, head_kind: str):
    if head_kind == "cosine":
        return cosine_logits_backward(P, q, s, g)
    return neg_distance_logits_backward(P, q, s, g)


def logit_scale(head_kind: str, temperature: float) -> float:
    """Multiplier applied to raw logits before the softmax."""
    return temperature if head_kind == "cosine" else 1.0


def compute_logits(protos: PrototypeSet, q_feat) -> LogitVector:
    values = raw_logits(protos.prototypes, np.asarray(q_feat, dtype=np.float64), protos.head_kind)
    return LogitVector(values, protos.head_kind, protos.temperature)


def class_probs(logits: LogitVector) -> np.ndarray:
    return softmax(logit_scale(logits.head_kind, logits.temperature) * logits.values)


def classify(logits) -> int | np.ndarray:
    """Argmax over classes; ties go to the lowest index."""
    v = getattr(logits, "values", logits)
    v = np.asarray(v)
    out = np.argmax(v, axis=-1)
    return int(out) if out.ndim == 0 else out


def ce_training_loss(protos: PrototypeSet, q_feat, target: int):
    """Cross-entropy of one query against its target prototype.

    Returns ``(loss, d_protos, d_q)``: gradients with respect to the
    prototype matrix and the query feature, ready to be pushed back through
    the feature head.
    """
    P = protos.prototypes
    q = np.asarray(q_feat, dtype=np.float64)
    if not 0 <= target < P.shape[-2]:
        raise IndexError(f"target {target} out of range for {P.shape[-2]} prototypes")
    scale = logit_scale(protos.head_kind, protos.temperature)
    s = raw_logits(P, q, protos.head_kind)
    p = softmax(scale * s)
    loss = -np.log(max(p[target], PROB_FLOOR))
    dz = p.copy()
    dz[target] -= 1.0
    dP, dq = raw_logits_backward(P, q, s, scale * dz, protos.head_kind)
    return float(loss), dP, dq
