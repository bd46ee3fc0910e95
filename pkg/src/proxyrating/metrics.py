"""Rating metrics built on the sign of successive proxy-rating differences.

All metrics here depend only on whether a rating strictly increased, so
they are unchanged by any strictly increasing transform of the traces.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .clickstream import ActionVocab, Journey

STRATA = ("purchase", "no-purchase")
DEFAULT_LENGTH_BINS = (25, 50, 75, 100)


@dataclass(frozen=True)
class ProxyTrace:
    journey_ref: str
    y: np.ndarray

    def __post_init__(self):
        y = np.asarray(self.y, dtype=float)
        if y.ndim != 1 or y.size < 1:
            raise ValueError("a proxy trace needs at least one rating")
        if not np.all(np.isfinite(y)):
            raise ValueError(f"non-finite proxy rating in trace {self.journey_ref}")
        object.__setattr__(self, "y", y)

    def __len__(self) -> int:
        return self.y.size

    def truncated(self, length: int) -> "ProxyTrace":
        return ProxyTrace(self.journey_ref, self.y[:length].copy())


def _values(trace: ProxyTrace | Sequence[float] | np.ndarray) -> np.ndarray:
    return trace.y if isinstance(trace, ProxyTrace) else np.asarray(trace, dtype=float)


def lag_indicator(trace, t: int, q: int = 1) -> int:
    """1 if the rating at 0-based position ``t`` strictly exceeds the one ``q`` steps earlier."""
    y = _values(trace)
    if q < 1:
        raise ValueError("q must be >= 1")
    if not q <= t < y.size:
        raise IndexError(f"need q <= t < {y.size}, got t={t}, q={q}")
    return int(y[t] - y[t - q] > 0)


def increases(trace) -> np.ndarray:
    """Lag-1 indicators for every successive pair, as an int array of length m - 1."""
    y = _values(trace)
    return (np.diff(y) > 0).astype(np.int64)


def z_per_journey(trace) -> float:
    y = _values(trace)
    if y.size < 2:
        raise ValueError("Z is undefined for a trace with fewer than two ratings")
    return float(increases(y).sum() / (y.size - 1))


def z_prefix(trace) -> np.ndarray:
    """Running proportion of increases: element t covers the first t + 1 successive pairs."""
    y = _values(trace)
    if y.size < 2:
        raise ValueError("prefix Z needs at least two ratings")
    inc = increases(y)
    return np.cumsum(inc) / np.arange(1, inc.size + 1)


@dataclass
class PairScoreMatrix:
    z_sum: np.ndarray  # (A, A) count of increases
    n: np.ndarray  # (A, A) traversals
    stratum: str = "all"

    @property
    def populated(self) -> int:
        return int((self.n > 0).sum())

    def z(self) -> np.ndarray:
        """Z per cell; NaN where the pair was never traversed."""
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(self.n > 0, self.z_sum / np.maximum(self.n, 1), np.nan)

    def ci95(self) -> np.ndarray:
        """Normal-approximation half-width 1.96 * sqrt(p (1 - p) / n)."""
        p = self.z()
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(self.n > 0, 1.96 * np.sqrt(p * (1 - p) / np.maximum(self.n, 1)), np.nan)

    def __add__(self, other: "PairScoreMatrix") -> "PairScoreMatrix":
        return PairScoreMatrix(self.z_sum + other.z_sum, self.n + other.n, "all")


def _accumulate(pairs: Iterable[tuple[np.ndarray, np.ndarray]], n_actions: int, stratum: str) -> PairScoreMatrix:
    z_sum = np.zeros((n_actions, n_actions), dtype=np.int64)
    n = np.zeros((n_actions, n_actions), dtype=np.int64)
    for actions, y in pairs:
        if actions.size < 2:
            continue
        src, dst = actions[:-1], actions[1:]
        np.add.at(n, (src, dst), 1)
        np.add.at(z_sum, (src, dst), increases(y))
    return PairScoreMatrix(z_sum, n, stratum)


def pair_scores(
    traces: Sequence[tuple[Journey, ProxyTrace]],
    vocab: ActionVocab,
    stratify_by_purchase: bool = True,
    exclude_survey: bool = False,
) -> dict[str, PairScoreMatrix]:
    """Aggregate lag-1 increases per successive action pair.

    Every traversal of a pair counts as its own instance. With
    ``stratify_by_purchase`` the result has ``"purchase"`` and
    ``"no-purchase"`` matrices; otherwise a single ``"all"`` matrix.
    ``exclude_survey`` blanks out rows and columns of the survey action
    after counting, for reporting only.
    """
    rows = []
    for journey, trace in traces:
        if len(trace) != len(journey):
            raise ValueError(f"trace length {len(trace)} != journey length {len(journey)} ({journey.journey_id})")
        rows.append((journey.has_purchase, journey.actions, trace.y))
    if stratify_by_purchase:
        out = {
            "purchase": _accumulate(((a, y) for p, a, y in rows if p), vocab.size, "purchase"),
            "no-purchase": _accumulate(((a, y) for p, a, y in rows if not p), vocab.size, "no-purchase"),
        }
    else:
        out = {"all": _accumulate(((a, y) for _, a, y in rows), vocab.size, "all")}
    if exclude_survey:
        s = vocab.survey_id
        for m in out.values():
            m.z_sum[s, :] = m.z_sum[:, s] = 0
            m.n[s, :] = m.n[:, s] = 0
    return out


@dataclass
class LengthBinSummary:
    max_length: int
    n_journeys: int
    hist_edges: list[float]
    hist_counts: list[int]
    below: float  # mass with Z < 0.4
    middle: float  # mass with 0.4 <= Z <= 0.6
    above: float  # mass with Z > 0.6

    def to_json(self) -> dict:
        return dict(self.__dict__)


def band_masses(z: np.ndarray, low: float = 0.4, high: float = 0.6) -> tuple[float, float, float]:
    z = np.asarray(z, dtype=float)
    if z.size == 0:
        return (0.0, 0.0, 0.0)
    below = float(np.mean(z < low))
    above = float(np.mean(z > high))
    return below, 1.0 - below - above, above


def z_distribution(
    traces: Sequence[ProxyTrace],
    length_bins: Sequence[int] = DEFAULT_LENGTH_BINS,
    n_hist: int = 10,
) -> list[LengthBinSummary]:
    """Distribution of per-journey Z for journeys of length up to each bin edge.

    Bins are cumulative (a journey of length 20 falls in every bin), reading
    each bin as "journeys up to L actions". Traces shorter than two are skipped.
    """
    lengths = np.array([len(t) for t in traces], dtype=np.int64)
    zs = np.array([z_per_journey(t) if len(t) >= 2 else np.nan for t in traces])
    edges = np.linspace(0.0, 1.0, n_hist + 1)
    out = []
    for L in length_bins:
        sel = zs[(lengths <= L) & ~np.isnan(zs)]
        counts, _ = np.histogram(sel, bins=edges)
        below, middle, above = band_masses(sel)
        out.append(LengthBinSummary(int(L), int(sel.size), edges.tolist(), counts.tolist(), below, middle, above))
    return out
