"""Synthetic clickstreams with latent satisfaction, and exact tabular value oracles.

The simulator stands in for proprietary survey-bearing logs: every journey
carries its hidden regime path so evaluation code can check that learned
proxy ratings track the construction. ``TabularMRP`` plus ``exact_values``
give closed-form targets for TD learning.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .clickstream import ActionVocab, ClickEvent, ConfigError, Journey, JourneyCategory

BASE_TS = 1_600_000_000_000
HOUR_MS = 3600 * 1000
DAY_MS = 24 * HOUR_MS


@dataclass
class SimConfig:
    vocab: ActionVocab
    transition: np.ndarray  # (regimes, A, A)
    purchase_hazard: np.ndarray  # (regimes,)
    survey_score_dist: np.ndarray  # (regimes, 11)
    n_regimes: int = 2
    start: np.ndarray | None = None  # (regimes, A)
    regime_switch_prob: float = 0.0
    stop_hazard: np.ndarray | None = None  # (regimes,)
    purchase_affinity: np.ndarray | None = None  # (A,) weight of the previous action
    survey_popup_prob: float = 0.0
    max_len: int | None = 210
    return_prob: float = 0.0
    regime_effects: dict[tuple[int, int], int] = field(default_factory=dict)
    mean_dwell_ms: float = 30_000.0
    seed: int = 0

    def __post_init__(self):
        self.transition = np.asarray(self.transition, dtype=float)
        self.purchase_hazard = np.asarray(self.purchase_hazard, dtype=float)
        self.survey_score_dist = np.asarray(self.survey_score_dist, dtype=float)
        if self.start is not None:
            self.start = np.asarray(self.start, dtype=float)
        if self.stop_hazard is not None:
            self.stop_hazard = np.asarray(self.stop_hazard, dtype=float)
        if self.purchase_affinity is not None:
            self.purchase_affinity = np.asarray(self.purchase_affinity, dtype=float)
        self.validate()

    @property
    def vocab_size(self) -> int:
        return self.vocab.size

    def validate(self) -> None:
        R, A = self.n_regimes, self.vocab.size
        problems = []

        def check_prob(name, arr, shape):
            if arr.shape != shape:
                problems.append(f"{name} has shape {arr.shape}, expected {shape}")
            elif not np.all((arr >= 0) & (arr <= 1)):
                problems.append(f"{name} entries must lie in [0, 1]")

        check_prob("transition", self.transition, (R, A, A))
        if self.transition.shape == (R, A, A) and not np.allclose(self.transition.sum(-1), 1.0, atol=1e-9, rtol=0):
            problems.append("transition rows must sum to 1")
        check_prob("purchase_hazard", self.purchase_hazard, (R,))
        check_prob("survey_score_dist", self.survey_score_dist, (R, 11))
        if self.survey_score_dist.shape == (R, 11) and not np.allclose(self.survey_score_dist.sum(-1), 1.0, atol=1e-9, rtol=0):
            problems.append("survey_score_dist rows must sum to 1")
        if self.start is not None:
            check_prob("start", self.start, (R, A))
            if self.start.shape == (R, A) and not np.allclose(self.start.sum(-1), 1.0, atol=1e-9, rtol=0):
                problems.append("start rows must sum to 1")
        if self.stop_hazard is not None:
            check_prob("stop_hazard", self.stop_hazard, (R,))
        if self.purchase_affinity is not None:
            check_prob("purchase_affinity", self.purchase_affinity, (A,))
        for name in ("regime_switch_prob", "survey_popup_prob", "return_prob"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                problems.append(f"{name}={getattr(self, name)} must lie in [0, 1]")
        if self.n_regimes < 1:
            problems.append("n_regimes must be >= 1")
        if self.return_prob >= 1.0:
            problems.append("return_prob must be < 1 or customers never leave")
        no_stop = self.stop_hazard is None or not np.any(self.stop_hazard > 0)
        if self.max_len is None and no_stop and not np.any(self.purchase_hazard > 0):
            problems.append("degenerate config: zero stop and purchase hazards with no max_len")
        for (u, w), reg in self.regime_effects.items():
            if not (0 <= u < A and 0 <= w < A and 0 <= reg < R):
                problems.append(f"regime_effects entry {(u, w)}->{reg} out of range")
        if problems:
            raise ConfigError(problems)


@dataclass(frozen=True)
class LabeledJourney:
    journey: Journey
    regime_path: tuple[int, ...]
    true_satisfaction: float


def _sample_journey(
    cfg: SimConfig, rng: np.random.Generator, cid: str, k: int, after_purchase: bool, t0: int
) -> tuple[Journey, list[int]]:
    vocab = cfg.vocab
    R = cfg.n_regimes
    regime = int(rng.integers(R))
    actions: list[int] = []
    regimes: list[int] = []
    scores: list[int | None] = []
    surveyed = False
    prev: int | None = None
    while True:
        if cfg.max_len is not None and len(actions) >= cfg.max_len:
            break
        if actions and R > 1 and rng.random() < cfg.regime_switch_prob:
            regime = int((regime + rng.integers(1, R)) % R)
        if actions and not surveyed and rng.random() < cfg.survey_popup_prob:
            surveyed = True
            actions.append(vocab.survey_id)
            regimes.append(regime)
            scores.append(int(rng.choice(11, p=cfg.survey_score_dist[regime])))
            if cfg.max_len is not None and len(actions) >= cfg.max_len:
                break
        weight = 1.0 if prev is None or cfg.purchase_affinity is None else cfg.purchase_affinity[prev]
        if rng.random() < cfg.purchase_hazard[regime] * weight:
            action = vocab.purchase_id
        elif prev is None:
            row = cfg.start[regime] if cfg.start is not None else _default_start(vocab)
            action = int(rng.choice(vocab.size, p=row))
        else:
            action = int(rng.choice(vocab.size, p=cfg.transition[regime, prev]))
        if prev is not None and (prev, action) in cfg.regime_effects:
            regime = cfg.regime_effects[(prev, action)]
        actions.append(action)
        regimes.append(regime)
        scores.append(None)
        if action == vocab.purchase_id:
            break
        prev = action
        if cfg.stop_hazard is not None and rng.random() < cfg.stop_hazard[regime]:
            break

    dwell = np.maximum(1000, rng.exponential(cfg.mean_dwell_ms, size=len(actions))).astype(np.int64)
    ts = t0 + np.concatenate([[0], np.cumsum(dwell[:-1])]) if actions else np.array([], dtype=np.int64)
    events = tuple(
        ClickEvent(cid, int(ts[i]), a, int(dwell[i]), scores[i]) for i, a in enumerate(actions)
    )
    has_purchase = bool(actions) and actions[-1] == vocab.purchase_id
    survey_pos = actions.index(vocab.survey_id) if vocab.survey_id in actions else None
    journey = Journey(
        cid, events, JourneyCategory.classify(after_purchase, has_purchase), has_purchase, survey_pos, f"{cid}/{k}"
    )
    return journey, regimes


def _default_start(vocab: ActionVocab) -> np.ndarray:
    row = np.ones(vocab.size)
    row[[vocab.purchase_id, vocab.survey_id]] = 0.0
    return row / row.sum()


def generate(cfg: SimConfig, n_journeys: int) -> list[LabeledJourney]:
    """Simulate ``n_journeys`` journeys, grouped into returning customers.

    Journey ``i`` draws from its own RNG stream seeded by ``(cfg.seed, i)``,
    so the corpus is a pure function of config and count. A purchase ends
    a journey; the customer may return (``return_prob``) one hour later,
    or more than 30 days later after a non-purchase ending, so that
    stitching the emitted events reproduces the same journeys.
    """
    if n_journeys < 0:
        raise ValueError("n_journeys must be >= 0")
    out: list[LabeledJourney] = []
    c = -1
    k = 0
    continuing = False
    after_purchase = False
    t_next = BASE_TS
    for i in range(n_journeys):
        rng = np.random.default_rng([cfg.seed, i])
        if not continuing:
            c += 1
            k, after_purchase = 0, False
            t_next = BASE_TS + c * 60_000
        cid = f"cust{c:06d}"
        journey, regimes = _sample_journey(cfg, rng, cid, k, after_purchase, t_next)
        sat = float(np.mean(regimes) / max(cfg.n_regimes - 1, 1)) if regimes else 0.0
        out.append(LabeledJourney(journey, tuple(regimes), sat))
        continuing = bool(rng.random() < cfg.return_prob)
        end = journey.events[-1].timestamp if journey.events else t_next
        after_purchase = journey.has_purchase
        t_next = end + (HOUR_MS if journey.has_purchase else 31 * DAY_MS)
        k += 1
    return out


# ---------------------------------------------------------------------------
# funnel preset

FUNNEL_ACTIONS = (
    "Home", "Search", "ProductCategory", "ProductDetail", "Customize",
    "AddToCart", "ViewCart", "Checkout", "Purchase", "Survey",
    "Promotion", "Reviews", "Compare", "Wishlist", "Account",
    "Login", "Help", "StoreLocator", "Support", "Deals",
)  # fmt: skip


def _rows(vocab: ActionVocab, by_source: dict[str, dict[str, float]], fallback: dict[str, float]) -> np.ndarray:
    A = vocab.size
    m = np.zeros((A, A))
    for src in range(A):
        weights = by_source.get(vocab.label(src), fallback)
        for dst, w in weights.items():
            m[src, vocab.index(dst)] += w
        m[src] /= m[src].sum()
    return m


def funnel_config(seed: int = 0, **overrides) -> SimConfig:
    """Two-regime e-commerce funnel over 20 actions.

    Regime 1 (satisfied) climbs the funnel Home -> ProductCategory ->
    ProductDetail -> Customize -> cart -> Checkout in small steps and
    purchases readily from Checkout. Regime 0 (frustrated) jumps from Home
    straight to ProductDetail, then backtracks and drifts to help pages.
    The skip Home -> ProductDetail pushes any customer into regime 0.
    Survey answers overlap heavily across regimes.
    """
    vocab = ActionVocab.from_labels(FUNNEL_ACTIONS)
    good = {
        "Home": {"ProductCategory": 5, "Search": 1.5, "Promotion": 1, "Deals": 0.5, "Login": 0.5, "ProductDetail": 3},
        "Search": {"ProductCategory": 3, "ProductDetail": 2, "Search": 1, "Home": 0.5},
        "Promotion": {"ProductCategory": 3, "Deals": 1, "Home": 1},
        "Deals": {"ProductCategory": 3, "Promotion": 1, "Home": 1},
        "Login": {"Account": 1, "Home": 2, "ProductCategory": 1},
        "Account": {"Home": 2, "ViewCart": 1, "Wishlist": 1},
        "ProductCategory": {"ProductDetail": 5, "ProductCategory": 1, "Compare": 1, "Search": 0.5, "Home": 0.5},
        "ProductDetail": {"Customize": 3, "Reviews": 1.5, "AddToCart": 2, "ProductDetail": 1, "Wishlist": 0.5, "ProductCategory": 1},
        "Reviews": {"ProductDetail": 2, "Customize": 2, "AddToCart": 1},
        "Compare": {"ProductDetail": 3, "ProductCategory": 1},
        "Wishlist": {"ProductDetail": 1, "AddToCart": 1, "Home": 1},
        "Customize": {"AddToCart": 4, "Customize": 1, "ProductDetail": 1, "ProductCategory": 0.3},
        "AddToCart": {"ViewCart": 5, "ProductCategory": 1, "Home": 0.5},
        "ViewCart": {"Checkout": 5, "ProductDetail": 1, "Home": 1},
        "Checkout": {"Checkout": 1, "ViewCart": 1, "Login": 0.5, "Home": 1},
        "Help": {"Home": 2, "Support": 1},
        "Support": {"Home": 2, "Help": 1},
        "StoreLocator": {"Home": 2},
    }
    # frustrated customers rarely go back to Home; they wander search and help pages
    poor = {
        "Home": {"Help": 1.5, "Search": 1.5, "Promotion": 1, "ProductCategory": 1, "StoreLocator": 1},
        "Search": {"Search": 2, "Help": 2, "ProductDetail": 1, "Deals": 1},
        "Promotion": {"Deals": 1, "Search": 1, "ProductDetail": 1},
        "Deals": {"Promotion": 1, "Search": 1, "Help": 1},
        "Login": {"Help": 1, "Account": 1},
        "Account": {"Support": 1, "Help": 1},
        "ProductCategory": {"Search": 2, "ProductCategory": 1, "ProductDetail": 1, "Help": 1},
        "ProductDetail": {"ProductCategory": 3, "Search": 2, "Reviews": 1, "Compare": 1, "ProductDetail": 1, "Customize": 0.5},
        "Reviews": {"ProductDetail": 1, "ProductCategory": 1, "Search": 1},
        "Compare": {"ProductCategory": 2, "Search": 1},
        "Wishlist": {"Search": 1},
        "Customize": {"ProductDetail": 2, "ProductCategory": 2, "AddToCart": 1},
        "AddToCart": {"ViewCart": 2, "ProductDetail": 1, "Help": 1},
        "ViewCart": {"Checkout": 1, "Help": 2, "Search": 1},
        "Checkout": {"Help": 1, "ViewCart": 1, "Support": 2},
        "Help": {"Support": 2, "Search": 1, "Help": 1},
        "Support": {"Help": 1, "StoreLocator": 0.5, "Search": 1},
        "StoreLocator": {"Help": 1, "Search": 1},
    }
    fallback = {"Home": 1.0}
    transition = np.stack([_rows(vocab, poor, fallback), _rows(vocab, good, fallback)])
    start = np.zeros((2, vocab.size))
    start[:, vocab.index("Home")] = 0.7
    start[:, vocab.index("Search")] = 0.2
    start[:, vocab.index("Promotion")] = 0.1
    affinity = np.zeros(vocab.size)
    affinity[vocab.index("Checkout")] = 1.0
    affinity[vocab.index("ViewCart")] = 0.1
    scores = np.arange(11)
    # heavy overlap: poor-regime respondents still answer high most of the time
    poor_dist = np.exp(-0.5 * ((scores - 6.5) / 2.6) ** 2)
    good_dist = np.exp(-0.5 * ((scores - 7.2) / 2.4) ** 2)
    params = dict(
        vocab=vocab,
        transition=transition,
        purchase_hazard=np.array([0.02, 0.5]),
        survey_score_dist=np.stack([poor_dist / poor_dist.sum(), good_dist / good_dist.sum()]),
        n_regimes=2,
        start=start,
        regime_switch_prob=0.03,
        stop_hazard=np.array([0.08, 0.01]),
        purchase_affinity=affinity,
        survey_popup_prob=0.03,
        max_len=210,
        return_prob=0.3,
        regime_effects={(vocab.index("Home"), vocab.index("ProductDetail")): 0},
        seed=seed,
    )
    params.update(overrides)
    return SimConfig(**params)


# ---------------------------------------------------------------------------
# tabular oracle


@dataclass
class TabularMRP:
    P: np.ndarray
    r: np.ndarray
    gamma: float
    terminal: np.ndarray | None = None  # bool mask; terminal states have value 0

    def __post_init__(self):
        self.P = np.asarray(self.P, dtype=float)
        self.r = np.asarray(self.r, dtype=float)
        n = self.P.shape[0]
        if self.terminal is None:
            self.terminal = np.zeros(n, dtype=bool)
        self.terminal = np.asarray(self.terminal, dtype=bool)
        problems = []
        if self.P.shape != (n, n) or self.r.shape != (n,) or self.terminal.shape != (n,):
            problems.append("P must be n x n with r and terminal of length n")
        elif np.any(self.P < 0) or not np.allclose(self.P.sum(1), 1.0, atol=1e-9, rtol=0):
            problems.append("P must be row-stochastic")
        if not 0.0 <= self.gamma < 1.0:
            problems.append(f"gamma={self.gamma} must lie in [0, 1)")
        if problems:
            raise ConfigError(problems)

    @property
    def n_states(self) -> int:
        return self.P.shape[0]


def exact_values(mrp: TabularMRP) -> np.ndarray:
    """Solve V = P (r + gamma * V) with V fixed at 0 on terminal states.

    Rewards are collected on entering a state, so terminal states still
    pay their reward to the predecessor but contribute no continuation.
    """
    live = ~mrp.terminal
    n = mrp.n_states
    A = np.eye(n) - mrp.gamma * mrp.P * live[None, :]
    b = mrp.P @ mrp.r
    A[~live] = 0.0
    A[~live, ~live] = 1.0
    b = np.where(live, b, 0.0)
    return np.linalg.solve(A, b)


def bellman_residual(mrp: TabularMRP, V: np.ndarray) -> float:
    backup = mrp.P @ (mrp.r + mrp.gamma * np.where(mrp.terminal, 0.0, V))
    return float(np.max(np.abs(np.where(mrp.terminal, V, V - backup))))


def random_mrp(
    n_states: int, rng: np.random.Generator, gamma: float = 0.9, n_terminal: int = 0
) -> TabularMRP:
    """Dirichlet(1) transition rows and uniform [0, 1) rewards.

    The last ``n_terminal`` states are absorbing terminals.
    """
    P = rng.dirichlet(np.ones(n_states), size=n_states)
    r = rng.random(n_states)
    terminal = np.zeros(n_states, dtype=bool)
    if n_terminal:
        terminal[-n_terminal:] = True
        P[terminal] = 0.0
        P[terminal, np.flatnonzero(terminal)] = 1.0
    return TabularMRP(P, r, gamma, terminal)


def mrp_vocab(mrp: TabularMRP) -> ActionVocab:
    """One action per state; the first terminal state is called Purchase."""
    names = [f"s{i}" for i in range(mrp.n_states)]
    term = np.flatnonzero(mrp.terminal)
    if term.size:
        names[term[0]] = "Purchase"
    else:
        names.append("Purchase")
    names.append("Survey")
    return ActionVocab.from_labels(names)


def sample_transitions(
    mrp: TabularMRP, n: int, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray]:
    """``n`` transitions with sources uniform over non-terminal states."""
    live = np.flatnonzero(~mrp.terminal)
    src = live[rng.integers(live.size, size=n)]
    cdf = np.cumsum(mrp.P[src], axis=1)
    u = rng.random((n, 1))
    dst = np.minimum((u > cdf).sum(axis=1), mrp.n_states - 1)
    return src, dst


def journeys_from_mrp(
    mrp: TabularMRP,
    n: int,
    seed: int,
    vocab: ActionVocab | None = None,
    max_len: int = 1000,
    start: np.ndarray | int | None = None,
) -> list[Journey]:
    """Sample trajectories whose action index equals the MRP state index.

    Each trajectory starts in ``start`` (a state, a distribution, or uniform
    over non-terminal states) and stops on a terminal state or at ``max_len``.
    """
    vocab = vocab or mrp_vocab(mrp)
    if mrp.n_states > vocab.size:
        raise ValueError("MRP has more states than the vocabulary has actions")
    rng = np.random.default_rng(seed)
    live = np.flatnonzero(~mrp.terminal)
    if start is None:
        p0 = np.zeros(mrp.n_states)
        p0[live] = 1.0 / live.size
    elif np.isscalar(start):
        p0 = np.eye(mrp.n_states)[int(start)]
    else:
        p0 = np.asarray(start, dtype=float)
    cdf = np.cumsum(mrp.P, axis=1)
    out = []
    for i in range(n):
        s = int(rng.choice(mrp.n_states, p=p0))
        path = [s]
        while not mrp.terminal[s] and len(path) < max_len:
            s = min(int(np.searchsorted(cdf[s], rng.random(), side="right")), mrp.n_states - 1)
            path.append(s)
        out.append(Journey.from_actions(path, vocab, customer_id=f"mrp{i:06d}", journey_id=f"mrp{i:06d}/0"))
    return out


def monte_carlo_returns(
    mrp: TabularMRP, state: int, n_episodes: int, horizon: int, rng: np.random.Generator
) -> np.ndarray:
    """Discounted returns G = sum_k gamma^k r(S_{t+k+1}) from ``state``, truncated at ``horizon``."""
    cdf = np.cumsum(mrp.P, axis=1)
    s = np.full(n_episodes, state)
    g = np.zeros(n_episodes)
    alive = ~mrp.terminal[s]
    disc = 1.0
    for _ in range(horizon):
        u = rng.random(n_episodes)
        nxt = np.minimum((u[:, None] > cdf[s]).sum(axis=1), mrp.n_states - 1)
        g += np.where(alive, disc * mrp.r[nxt], 0.0)
        alive &= ~mrp.terminal[nxt]
        s = nxt
        disc *= mrp.gamma
        if not alive.any():
            break
    return g


__all__: Sequence[str] = [
    "SimConfig", "LabeledJourney", "TabularMRP", "generate", "funnel_config",
    "exact_values", "bellman_residual", "random_mrp", "mrp_vocab",
    "sample_transitions", "journeys_from_mrp", "monte_carlo_returns",
]  # fmt: skip
