"""Validation of proxy ratings against survey answers and purchase outcomes."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import diptest
from scipy import optimize, stats

from .clickstream import ActionVocab, Journey
from .encoder import EncoderParams, encode_batch, pad_batch
from .metrics import DEFAULT_LENGTH_BINS, PairScoreMatrix, ProxyTrace, lag_indicator, z_per_journey, z_prefix


class SurveyClass(str, enum.Enum):
    POOR = "poor"
    GOOD = "good"
    EXCLUDED = "excluded"


@dataclass(frozen=True)
class SurveyLabel:
    score: int

    @property
    def klass(self) -> SurveyClass:
        if not 0 <= self.score <= 10:
            raise ValueError(f"survey score {self.score} outside 0..10")
        if self.score <= 4:
            return SurveyClass.POOR
        if self.score >= 6:
            return SurveyClass.GOOD
        return SurveyClass.EXCLUDED


@dataclass
class ConfusionReport:
    tp: int = 0
    fp: int = 0
    tn: int = 0
    fn: int = 0
    excluded: dict[str, int] = field(default_factory=dict)

    @classmethod
    def from_predictions(cls, pred: Sequence[int], truth: Sequence[int], **kw) -> "ConfusionReport":
        p = np.asarray(pred, dtype=bool)
        t = np.asarray(truth, dtype=bool)
        return cls(int((p & t).sum()), int((p & ~t).sum()), int((~p & ~t).sum()), int((~p & t).sum()), **kw)

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    @staticmethod
    def _ratio(num: int, den: int) -> float:
        return num / den if den else 0.0

    @property
    def accuracy(self) -> float:
        return self._ratio(self.tp + self.tn, self.total)

    @property
    def precision(self) -> float:
        return self._ratio(self.tp, self.tp + self.fp)

    @property
    def recall(self) -> float:
        return self._ratio(self.tp, self.tp + self.fn)

    @property
    def f1(self) -> float:
        p, r = self.precision, self.recall
        return 2 * p * r / (p + r) if p + r else 0.0

    def to_json(self) -> dict:
        return {
            "tp": self.tp, "fp": self.fp, "tn": self.tn, "fn": self.fn,
            "accuracy": self.accuracy, "recall": self.recall,
            "precision": self.precision, "f1": self.f1,
            "n": self.total, "excluded": dict(self.excluded),
        }  # fmt: skip


def validate_against_survey(
    pairs: Sequence[tuple[Journey, ProxyTrace]], q: int = 1, positive: SurveyClass = SurveyClass.GOOD
) -> ConfusionReport:
    """Compare the lag(q) indicator at the last pre-survey action with the survey class.

    For a survey at 0-based position ``p`` the last action before it sits
    at ``p - 1``; the prediction is ``y[p-1] > y[p-1-q]`` read as "good".
    Only ratings at positions < p are read, so the trace may be truncated
    there. Journeys answering 5, with no score, or with ``p <= q`` are
    excluded and counted.
    """
    if positive is SurveyClass.EXCLUDED:
        raise ValueError("positive class must be good or poor")
    pred, truth = [], []
    excluded = {"score_5": 0, "too_early": 0, "no_score": 0}
    for journey, trace in pairs:
        if journey.survey_pos is None:
            raise ValueError(f"journey {journey.journey_id} has no survey response")
        p = journey.survey_pos
        score = journey.survey_score
        if score is None:
            excluded["no_score"] += 1
            continue
        klass = SurveyLabel(score).klass
        if klass is SurveyClass.EXCLUDED:
            excluded["score_5"] += 1
            continue
        if p <= q:
            excluded["too_early"] += 1
            continue
        if len(trace) < p:
            raise ValueError(f"trace for {journey.journey_id} stops before the survey")
        z = lag_indicator(trace, p - 1, q)
        if positive is not SurveyClass.GOOD:
            z = 1 - z
        pred.append(z)
        truth.append(klass is positive)
    return ConfusionReport.from_predictions(pred, truth, excluded=excluded)


# ---------------------------------------------------------------------------
# action identification


@dataclass
class ActionRow:
    source: str
    target: str
    stratum: str
    n: int
    z: float
    ci95: float


@dataclass
class ActionReport:
    rows: list[ActionRow]
    populated: dict[str, int]
    min_n: int


def action_identification_report(
    pairs: dict[str, PairScoreMatrix], vocab: ActionVocab, min_n: int = 1
) -> ActionReport:
    """Pair scores with at least ``min_n`` traversals, most discriminative first."""
    sizes = {m.n.shape for m in pairs.values()}
    if len(sizes) > 1 or (sizes and sizes.pop() != (vocab.size, vocab.size)):
        raise ValueError("pair matrices must share the vocabulary")
    rows = []
    for stratum, m in pairs.items():
        z, ci = m.z(), m.ci95()
        for u, w in zip(*np.nonzero(m.n >= max(min_n, 1))):
            rows.append(ActionRow(vocab.label(u), vocab.label(w), stratum, int(m.n[u, w]), float(z[u, w]), float(ci[u, w])))
    rows.sort(key=lambda r: (-abs(r.z - 0.5), r.source, r.target, r.stratum))
    return ActionReport(rows, {s: m.populated for s, m in pairs.items()}, min_n)


# ---------------------------------------------------------------------------
# purchase prediction


@dataclass
class HeadConfig:
    l2: float = 1e-4
    max_iter: int = 500
    allow_single_class: bool = False
    seed: int = 0


@dataclass
class PurchaseHead:
    w: np.ndarray
    b: float
    encoder_digest: str = ""

    def predict_proba(self, H: np.ndarray) -> np.ndarray:
        return _sigmoid(H @ self.w + self.b)


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _timestep_histories(encoder: EncoderParams, journeys: Sequence[Journey]) -> list[np.ndarray]:
    """h_1..h_m per journey (the state after each action)."""
    out: list[np.ndarray] = [None] * len(journeys)  # type: ignore[list-item]
    order = sorted(range(len(journeys)), key=lambda k: (len(journeys[k]), k))
    for lo in range(0, len(order), 64):
        idx = order[lo : lo + 64]
        X, lens = pad_batch([journeys[k].actions for k in idx])
        hist = encode_batch(encoder, X)
        for row, k in enumerate(idx):
            out[k] = hist[row, 1 : lens[row] + 1]
    return out


def train_purchase_head(
    journeys: Sequence[Journey], encoder: EncoderParams, cfg: HeadConfig | None = None
) -> PurchaseHead:
    """Logistic head on h_t predicting that the journey ends in a purchase.

    The journey label is broadcast to every timestep. Fitted by L-BFGS on
    the L2-regularized mean log loss, starting from zero weights.
    """
    cfg = cfg or HeadConfig()
    labels = np.array([j.has_purchase for j in journeys], dtype=float)
    if labels.size == 0:
        raise ValueError("no journeys to train on")
    if labels.min() == labels.max() and not cfg.allow_single_class:
        raise ValueError("purchase head needs both purchase and no-purchase journeys")
    hs = _timestep_histories(encoder, journeys)
    H = np.concatenate(hs)
    y = np.concatenate([np.full(len(h), lab) for h, lab in zip(hs, labels)])
    d = H.shape[1]

    def loss(theta):
        w, b = theta[:d], theta[d]
        z = H @ w + b
        # log(1 + e^z) - y z, computed stably
        ll = np.logaddexp(0.0, z) - y * z
        g = _sigmoid(z) - y
        val = ll.mean() + 0.5 * cfg.l2 * (w @ w)
        grad = np.concatenate([H.T @ g / y.size + cfg.l2 * w, [g.mean()]])
        return val, grad

    res = optimize.minimize(loss, np.zeros(d + 1), jac=True, method="L-BFGS-B", options={"maxiter": cfg.max_iter})
    return PurchaseHead(res.x[:d].copy(), float(res.x[d]), encoder.digest())


def purchase_probabilities(head: PurchaseHead, encoder: EncoderParams, journeys: Sequence[Journey]) -> list[np.ndarray]:
    return [head.predict_proba(h) for h in _timestep_histories(encoder, journeys)]


def _check_labels(labels: np.ndarray) -> None:
    if labels.sum() == 0 or labels.sum() == labels.size:
        raise ValueError("AUC needs at least one positive and one negative")


def purchase_auc(scores: Sequence[float], labels: Sequence[bool]) -> float:
    """ROC AUC as the Mann-Whitney rank statistic; tied scores count one half."""
    s = np.asarray(scores, dtype=float)
    lab = np.asarray(labels, dtype=bool)
    _check_labels(lab)
    ranks = stats.rankdata(s)
    n_pos = int(lab.sum())
    n_neg = lab.size - n_pos
    return float((ranks[lab].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def roc_points(scores: Sequence[float], labels: Sequence[bool]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(fpr, tpr, thresholds), thresholds descending and starting at +inf."""
    s = np.asarray(scores, dtype=float)
    lab = np.asarray(labels, dtype=bool)
    _check_labels(lab)
    thresholds = np.concatenate([[np.inf], np.unique(s)[::-1]])
    tpr = np.array([(s[lab] >= t).mean() for t in thresholds])
    fpr = np.array([(s[~lab] >= t).mean() for t in thresholds])
    return fpr, tpr, thresholds


# ---------------------------------------------------------------------------
# correlation study


def pearson(a: np.ndarray, b: np.ndarray) -> float | None:
    """Pearson correlation, or None when either series has zero variance."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.size < 2:
        return None
    da, db = a - a.mean(), b - b.mean()
    va, vb = float(da @ da), float(db @ db)
    if va <= 1e-24 * max(a.size, 1) or vb <= 1e-24 * max(b.size, 1):
        return None
    return float(np.clip(da @ db / math.sqrt(va * vb), -1.0, 1.0))


@dataclass
class CorrelationBin:
    max_length: int
    n: int
    hist_edges: list[float]
    hist_counts: list[int]
    dip: float | None
    dip_pvalue: float | None


@dataclass
class CorrelationStudy:
    corr_rating: list[float | None]  # corr(p_t, y_t) per journey
    corr_prefix_z: list[float | None]  # corr(p_t, running Z_t) per journey
    excluded_rating: int
    excluded_prefix_z: int
    bins_rating: list[CorrelationBin]
    bins_prefix_z: list[CorrelationBin]


def _corr_bins(corrs, lengths, length_bins, n_hist=20) -> list[CorrelationBin]:
    edges = np.linspace(-1.0, 1.0, n_hist + 1)
    c = np.array([np.nan if v is None else v for v in corrs], dtype=float)
    out = []
    for L in length_bins:
        sel = c[(lengths <= L) & ~np.isnan(c)]
        counts, _ = np.histogram(sel, bins=edges)
        dip = pval = None
        if sel.size >= 10:
            dip, pval = diptest.diptest(np.sort(sel))
            dip, pval = float(dip), float(pval)
        out.append(CorrelationBin(int(L), int(sel.size), edges.tolist(), counts.tolist(), dip, pval))
    return out


def correlation_study(
    traces: Sequence[ProxyTrace],
    purchase_probs: Sequence[np.ndarray],
    length_bins: Sequence[int] = DEFAULT_LENGTH_BINS,
) -> CorrelationStudy:
    """Per-journey correlation over timesteps of purchase probability with ratings.

    Running Z_t is defined from the second action on, so it is paired with
    ``p[1:]``. Journeys where either series is constant are excluded.
    """
    if len(traces) != len(purchase_probs):
        raise ValueError("need one probability series per trace")
    corr_y, corr_z = [], []
    for tr, p in zip(traces, purchase_probs):
        p = np.asarray(p, dtype=float)
        if p.size != len(tr):
            raise ValueError(f"probability series length {p.size} != trace length {len(tr)}")
        corr_y.append(pearson(p, tr.y))
        corr_z.append(pearson(p[1:], z_prefix(tr)) if len(tr) >= 3 else None)
    lengths = np.array([len(t) for t in traces], dtype=np.int64)
    return CorrelationStudy(
        corr_y,
        corr_z,
        sum(v is None for v in corr_y),
        sum(v is None for v in corr_z),
        _corr_bins(corr_y, lengths, length_bins),
        _corr_bins(corr_z, lengths, length_bins),
    )


def z_scores(traces: Sequence[ProxyTrace]) -> np.ndarray:
    return np.array([z_per_journey(t) for t in traces])
