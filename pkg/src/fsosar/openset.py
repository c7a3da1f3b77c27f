"""Open-set scoring and auxiliary losses: MLS/MSS, entropic open-set, garbage class, feature-residual discriminator."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from .classifier import LogitVector, PrototypeSet
from .numeric import PROB_FLOOR, DenseNet, eos_loss, net_backward, net_forward

log = logging.getLogger(__name__)

_LOGIT_CAP = math.log((1.0 - PROB_FLOOR) / PROB_FLOOR)

TECHNIQUES = ("softmax-mls", "softmax-mss", "eos", "gc", "fr-disc")


@dataclass
class OpenSetScore:
    """``raw`` is on the technique's native scale; ``normalized`` lies in [0, 1].

    Both are monotone in "how known" the query looks. Fields are floats for a
    single episode or arrays for a batch.
    """

    raw: float | np.ndarray
    normalized: float | np.ndarray
    technique: str


@dataclass
class LossWeights:
    alpha_eos: float = 0.5
    alpha_disc: float = 1.0

    def __post_init__(self):
        if self.alpha_eos < 0 or self.alpha_disc < 0:
            raise ValueError("loss weights must be non-negative")


@dataclass
class GarbageState:
    prototype: np.ndarray

    @classmethod
    def init(cls, d_feat: int, rng: np.random.Generator, scale: float = 0.02) -> GarbageState:
        return cls(rng.normal(0.0, scale, size=d_feat))


@dataclass
class DiscriminatorState:
    net: DenseNet

    @classmethod
    def init(cls, d_feat: int, rng: np.random.Generator) -> DiscriminatorState:
        # zero output layer: an untrained discriminator says 0.5 for everything
        hidden = max(1, d_feat // 2)
        return cls(DenseNet.build([d_feat, hidden, 1], ["relu", "sigmoid"], rng, zero_last=True))


def _max_or_scalar(x):
    m = np.max(x, axis=-1)
    return float(m) if np.ndim(m) == 0 else m


def score_mls(logits: LogitVector) -> OpenSetScore:
    if not logits.bounded:
        raise ValueError(
            "MLS needs bounded logits (cosine head); the neg_distance head is unbounded, use MSS instead"
        )
    raw = _max_or_scalar(logits.values)
    return OpenSetScore(raw, (raw + 1.0) / 2.0, "softmax-mls")


def score_mss(probs) -> OpenSetScore:
    m = _max_or_scalar(np.asarray(probs, dtype=np.float64))
    return OpenSetScore(m, m, "softmax-mss")


def eos_term(probs, known: bool, weights: LossWeights) -> float:
    if known or weights.alpha_eos == 0:
        return 0.0
    return weights.alpha_eos * eos_loss(probs)


def gc_augment(protos: PrototypeSet, gc: GarbageState) -> PrototypeSet:
    if protos.has_garbage:
        raise ValueError("prototype set already carries a garbage prototype")
    P = protos.prototypes
    g = np.broadcast_to(gc.prototype, P.shape[:-2] + (1, P.shape[-1]))
    return PrototypeSet(np.concatenate([P, g], axis=-2), protos.head_kind, protos.temperature, has_garbage=True)


def gc_decision(probs):
    """Accept unless the garbage entry (last) is the argmax; ties favour the lower index.

    Returns ``(accept, u, y_hat)`` with ``u = 1 - p_garbage`` and ``y_hat`` the
    argmax over the known entries only.
    """
    p = np.asarray(probs, dtype=np.float64)
    k = p.shape[-1] - 1
    accept = np.argmax(p, axis=-1) != k
    u = 1.0 - p[..., k]
    y_hat = np.argmax(p[..., :k], axis=-1)
    if p.ndim == 1:
        return bool(accept), float(u), int(y_hat)
    return accept, u, y_hat


def frdisc_residual(q_feat, protos, probs) -> np.ndarray:
    """Query feature minus the prototype of the most probable known class."""
    P = getattr(protos, "prototypes", protos)
    p = np.asarray(probs)
    idx = np.argmax(p, axis=-1)
    chosen = np.take_along_axis(P, idx[..., None, None], axis=-2)[..., 0, :]
    return np.asarray(q_feat) - chosen


def frdisc_score(disc: DiscriminatorState, residual) -> OpenSetScore:
    r = np.asarray(residual, dtype=np.float64)
    if r.shape[-1] != disc.net.input_dim:
        raise ValueError(f"residual dim {r.shape[-1]} != discriminator input dim {disc.net.input_dim}")
    out, _ = net_forward(disc.net, r)
    u = out[..., 0]
    if u.ndim == 0:
        u = float(u)
    return OpenSetScore(u, u, "fr-disc")


@dataclass
class DiscLoss:
    loss: float  # already scaled by alpha_disc
    disc_grads: dict[str, np.ndarray]
    d_residual: np.ndarray  # (B, d), zero for unselected rows
    n_pos: int
    n_neg: int

    @property
    def skipped(self) -> bool:
        return self.n_pos == 0


def frdisc_batch_loss(
    residuals: np.ndarray,
    known: np.ndarray,
    correct: np.ndarray,
    disc: DiscriminatorState,
    weights: LossWeights,
    rng: np.random.Generator,
    prefix: str = "disc.",
) -> DiscLoss:
    """Balanced BCE over one batch of residuals.

    Positives are known queries the classifier got right (target 1); an equal
    number of unknown queries is drawn without replacement as negatives
    (target 0). With no positives the discriminator contributes nothing.
    """
    residuals = np.asarray(residuals, dtype=np.float64)
    pos = np.flatnonzero(np.asarray(known) & np.asarray(correct))
    unk = np.flatnonzero(~np.asarray(known))
    n = min(len(pos), len(unk))
    zero_grads = {k: np.zeros_like(v) for k, v in disc.net.params(prefix).items()}
    if n == 0:
        log.debug("no correctly classified known queries in batch; discriminator update skipped")
        return DiscLoss(0.0, zero_grads, np.zeros_like(residuals), 0, 0)
    if len(pos) > n:
        pos = np.sort(rng.choice(pos, size=n, replace=False))
    neg = np.sort(rng.choice(unk, size=n, replace=False))
    rows = np.concatenate([pos, neg])
    target = np.concatenate([np.ones(n), np.zeros(n)])

    if disc.net.layers[-1].activation != "sigmoid":
        raise ValueError("discriminator must end in a sigmoid")
    _, tape = net_forward(disc.net, residuals[rows])
    last = disc.net.layers[-1]
    # BCE on the pre-sigmoid logit; clipping the logit is the same as
    # clamping the score to [PROB_FLOOR, 1 - PROB_FLOOR]
    z = (tape.inputs[-1] @ last.W.T + last.b)[:, 0]
    zc = np.clip(z, -_LOGIT_CAP, _LOGIT_CAP)
    bce_terms = np.logaddexp(0.0, np.where(target == 1, -zc, zc))
    scale = weights.alpha_disc / len(rows)
    loss = scale * float(bce_terms.sum())
    d_z = scale * (tape.outputs[-1][:, 0] - target) * (np.abs(z) <= _LOGIT_CAP)
    grads, d_in = net_backward(disc.net, tape, d_z[:, None], prefix, pre_activation=True)
    d_res = np.zeros_like(residuals)
    d_res[rows] = d_in
    return DiscLoss(loss, grads, d_res, n, n)
