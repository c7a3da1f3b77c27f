"""Closed-set, open-set and joint evaluation metrics over balanced known/unknown episodes."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .episodes import UNKNOWN

HIST_BINS = 20


class MetricsError(ValueError):
    pass


@dataclass
class EpisodeResult:
    """Outcome of one evaluation episode.

    ``score`` is the normalized open-set score in [0, 1] and ``raw`` the
    technique-native score used for the threshold-free metrics. ``accept`` is
    set only by techniques whose decision is not a threshold on ``score``
    (the garbage class); otherwise acceptance is ``score > tau``.
    """

    known: bool
    true_class: int
    predicted_class: int
    score: float
    raw: float
    accept: bool | None = None

    @property
    def correct(self) -> bool:
        return self.known and self.predicted_class == self.true_class

    def accepted(self, tau: float) -> bool:
        return self.accept if self.accept is not None else self.score > tau


def _split(results):
    known = [r for r in results if r.known]
    unknown = [r for r in results if not r.known]
    return known, unknown


def _check_balanced(n_known: int, n_unknown: int, what: str) -> None:
    if n_known == 0 or n_unknown == 0 or n_known != n_unknown:
        raise MetricsError(f"{what} is defined over a balanced set; got {n_known} known / {n_unknown} unknown")


def fs_accuracy(results) -> float:
    known = [r for r in results if r.known]
    if not known:
        raise MetricsError("FS ACC needs at least one known-query result")
    return sum(r.predicted_class == r.true_class for r in known) / len(known)


def os_accuracy(results, tau: float = 0.5) -> float:
    known, unknown = _split(results)
    _check_balanced(len(known), len(unknown), "OS ACC")
    hits = sum(r.accepted(tau) for r in known) + sum(not r.accepted(tau) for r in unknown)
    return hits / (len(known) + len(unknown))


def _as_scores(x, side: str) -> np.ndarray:
    a = np.asarray(x, dtype=np.float64).ravel()
    if a.size == 0:
        raise MetricsError(f"no {side} scores")
    if not np.all(np.isfinite(a)):
        raise MetricsError(f"non-finite {side} scores")
    return a


def _desc_counts(known: np.ndarray, unknown: np.ndarray, known_weights=None):
    """Per unique score (descending): known count (or weight sum) and unknown count."""
    uniq, inv = np.unique(np.concatenate([known, unknown]), return_inverse=True)
    nk = len(known)
    w = np.ones(nk) if known_weights is None else np.asarray(known_weights, dtype=np.float64)
    kc = np.bincount(inv[:nk], weights=w, minlength=len(uniq))[::-1]
    uc = np.bincount(inv[nk:], minlength=len(uniq))[::-1].astype(np.float64)
    return kc, uc


def _trapezoid(x: np.ndarray, y: np.ndarray) -> float:
    return float(np.sum((x[1:] - x[:-1]) * (y[1:] + y[:-1]) / 2.0))


def auroc(known_scores, unknown_scores) -> float:
    """Area under ROC with known as positive; ties count one half."""
    k = _as_scores(known_scores, "known")
    u = _as_scores(unknown_scores, "unknown")
    kc, uc = _desc_counts(k, u)
    tpr = np.concatenate([[0.0], np.cumsum(kc) / len(k)])
    fpr = np.concatenate([[0.0], np.cumsum(uc) / len(u)])
    return _trapezoid(fpr, tpr)


def aupr(known_scores, unknown_scores) -> float:
    """Average precision with known as positive (step interpolation)."""
    k = _as_scores(known_scores, "known")
    u = _as_scores(unknown_scores, "unknown")
    kc, uc = _desc_counts(k, u)
    tp = np.cumsum(kc)
    fp = np.cumsum(uc)
    precision = tp / (tp + fp)
    recall = tp / len(k)
    d_recall = np.diff(np.concatenate([[0.0], recall]))
    return float(np.sum(d_recall * precision))


def oscr(known_scores, known_correct, unknown_scores) -> float:
    """Area under correct-classification-rate vs false-positive-rate.

    A known query counts towards CCR at threshold t when it is correctly
    classified and its score exceeds t. The curve runs from (0, 0) above the
    largest score to (1, FS ACC) below the smallest.
    """
    k = _as_scores(known_scores, "known")
    u = _as_scores(unknown_scores, "unknown")
    c = np.asarray(known_correct, dtype=bool).ravel()
    if c.shape != k.shape:
        raise MetricsError(f"{len(c)} correctness bits for {len(k)} known scores")
    _check_balanced(len(k), len(u), "OSCR")
    cc, uc = _desc_counts(k, u, known_weights=c.astype(np.float64))
    ccr = np.concatenate([[0.0], np.cumsum(cc) / len(k)])
    fpr = np.concatenate([[0.0], np.cumsum(uc) / len(u)])
    return _trapezoid(fpr, ccr)


def score_histogram(scores, bins: int = HIST_BINS) -> np.ndarray:
    s = np.asarray(scores, dtype=np.float64).ravel()
    if np.any((s < 0) | (s > 1)) or not np.all(np.isfinite(s)):
        raise MetricsError("histogram scores must lie in [0, 1]")
    counts, _ = np.histogram(s, bins=bins, range=(0.0, 1.0))
    return counts


@dataclass
class MetricsReport:
    fs_acc: float
    os_acc: float
    auroc: float
    aupr: float
    oscr: float
    n_known: int
    n_unknown: int
    hist_known: list[int]
    hist_unknown: list[int]

    def to_dict(self) -> dict:
        return asdict(self)


def evaluate_results(results, tau: float = 0.5) -> MetricsReport:
    known, unknown = _split(results)
    _check_balanced(len(known), len(unknown), "evaluation")
    k_raw = [r.raw for r in known]
    u_raw = [r.raw for r in unknown]
    return MetricsReport(
        fs_acc=fs_accuracy(results),
        os_acc=os_accuracy(results, tau),
        auroc=auroc(k_raw, u_raw),
        aupr=aupr(k_raw, u_raw),
        oscr=oscr(k_raw, [r.correct for r in known], u_raw),
        n_known=len(known),
        n_unknown=len(unknown),
        hist_known=score_histogram([r.score for r in known]).tolist(),
        hist_unknown=score_histogram([r.score for r in unknown]).tolist(),
    )


def check_report(report: MetricsReport, tol: float = 1e-12) -> list[str]:
    """Structural invariants every report must satisfy."""
    problems = []
    for name in ("fs_acc", "os_acc", "auroc", "aupr", "oscr"):
        v = getattr(report, name)
        if not -tol <= v <= 1 + tol:
            problems.append(f"{name}={v} outside [0, 1]")
    if report.oscr > report.fs_acc + tol:
        problems.append(f"oscr {report.oscr} > fs_acc {report.fs_acc}")
    if report.oscr > report.auroc + tol:
        problems.append(f"oscr {report.oscr} > auroc {report.auroc}")
    if report.n_known != report.n_unknown:
        problems.append("unbalanced evaluation")
    return problems


def write_scores(results, path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write("episode_id,known_flag,true_class,predicted_class,score\n")
        for i, r in enumerate(results):
            true = r.true_class if r.known else UNKNOWN
            f.write(f"{i},{int(r.known)},{true},{r.predicted_class},{r.score:.17g}\n")
