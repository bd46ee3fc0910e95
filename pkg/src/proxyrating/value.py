"""TD(0) value estimation over states (h_{t-1}, A_t) and proxy-rating scoring.

Rewards are collected on entering a state. Every event in a journey has
one outgoing transition: to the next event, or to a terminal sink after the
last event, whose bootstrap value is 0. Updates are semi-gradient: the
bootstrapped target is held constant when differentiating.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Mapping, NamedTuple, Sequence

import numpy as np

from ._io import atomic_write_text, sha256_bytes, write_npz
from .clickstream import ActionVocab, ConfigError, Journey
from .encoder import CheckpointMismatch, EncoderParams, encode_batch, pad_batch
from .metrics import ProxyTrace
from .sim import TabularMRP, sample_transitions

logger = logging.getLogger(__name__)

ESTIMATORS = ("tabular", "linear", "mlp")


class ValueLearningError(RuntimeError):
    pass


class StateRep(NamedTuple):
    history: np.ndarray  # h_{t-1}
    action: int  # A_t


@dataclass
class RewardMap:
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if not np.all(np.isfinite(self.values)):
            raise ValueError("rewards must be finite")

    @classmethod
    def purchase(cls, vocab: ActionVocab) -> "RewardMap":
        values = np.zeros(vocab.size)
        values[vocab.purchase_id] = 1.0
        return cls(values)

    @classmethod
    def from_labels(cls, vocab: ActionVocab, overrides: Mapping[str, float]) -> "RewardMap":
        """Purchase-only default with per-label overrides, e.g. ``{"AddToCart": 0.5}``."""
        rm = cls.purchase(vocab)
        for label, r in overrides.items():
            rm.values[vocab.index(label)] = float(r)
        return cls(rm.values)

    def __getitem__(self, action: int) -> float:
        return float(self.values[action])


def reward(rmap: RewardMap, state: StateRep) -> float:
    return rmap[state.action]


@dataclass
class ValueConfig:
    gamma: float = 0.9
    alpha: float = 1e-3
    alpha_decay: float = 0.0  # alpha_k = alpha / (1 + alpha_decay * k) ** alpha_power
    alpha_power: float = 1.0
    estimator: str = "mlp"
    width: int = 64
    max_sweeps: int = 100
    batch_size: int = 1
    tol: float | None = 1e-4
    patience: int = 3
    divergence_factor: float = 10.0
    average_after: float | None = None  # Polyak averaging once this fraction of max_sweeps has run
    seed: int = 0

    def __post_init__(self):
        problems = []
        if not (isinstance(self.gamma, (int, float)) and 0.0 <= self.gamma < 1.0):
            problems.append(f"gamma={self.gamma} outside the legal range [0, 1)")
        if not self.alpha > 0:
            problems.append(f"alpha={self.alpha} must be > 0")
        if self.alpha_decay < 0 or not 0 < self.alpha_power <= 1.0:
            problems.append("alpha_decay must be >= 0 and alpha_power in (0, 1]")
        if self.estimator not in ESTIMATORS:
            problems.append(f"estimator={self.estimator!r} must be one of {ESTIMATORS}")
        if self.average_after is not None and not 0.0 <= self.average_after < 1.0:
            problems.append(f"average_after={self.average_after} must lie in [0, 1)")
        if self.width <= 0 or self.max_sweeps <= 0 or self.batch_size <= 0:
            problems.append("width, max_sweeps and batch_size must be positive")
        if problems:
            raise ConfigError(problems)

    def step_size(self, k: int) -> float:
        if not self.alpha_decay:
            return self.alpha
        return self.alpha / (1.0 + self.alpha_decay * k) ** self.alpha_power


# ---------------------------------------------------------------------------
# estimators


@dataclass
class ValueParams:
    """Weights of f_theta. ``history_dim`` is 0 when states are bare actions."""

    estimator: str
    n_actions: int
    history_dim: int
    blocks: dict[str, np.ndarray]
    encoder_digest: str = ""
    config: dict = field(default_factory=dict)

    @property
    def input_dim(self) -> int:
        return self.history_dim + self.n_actions

    def copy(self) -> "ValueParams":
        return ValueParams(self.estimator, self.n_actions, self.history_dim,
                           {k: v.copy() for k, v in self.blocks.items()}, self.encoder_digest, dict(self.config))

    def digest(self) -> str:
        parts = [self.estimator.encode()] + [k.encode() + np.ascontiguousarray(self.blocks[k]).tobytes()
                                             for k in sorted(self.blocks)]
        return sha256_bytes(b"|".join(parts))

    # batched f_theta -------------------------------------------------------
    def features(self, H: np.ndarray, a: np.ndarray) -> np.ndarray:
        X = np.zeros((a.size, self.input_dim))
        if self.history_dim:
            X[:, : self.history_dim] = H
        X[np.arange(a.size), self.history_dim + a] = 1.0
        return X

    def predict(self, H: np.ndarray, a: np.ndarray) -> np.ndarray:
        a = np.asarray(a, dtype=np.int64)
        if self.estimator == "tabular":
            return self.blocks["table"][a].copy()
        X = self.features(H, a)
        if self.estimator == "linear":
            return X @ self.blocks["w"] + self.blocks["b"][0]
        hidden = np.tanh(X @ self.blocks["W1"] + self.blocks["b1"])
        return hidden @ self.blocks["w2"] + self.blocks["b2"][0]

    def gradients(self, H: np.ndarray, a: np.ndarray, weights: np.ndarray) -> dict[str, np.ndarray]:
        """sum_i weights_i * grad_theta f(x_i), per block."""
        a = np.asarray(a, dtype=np.int64)
        if self.estimator == "tabular":
            g = np.zeros_like(self.blocks["table"])
            np.add.at(g, a, weights)
            return {"table": g}
        X = self.features(H, a)
        if self.estimator == "linear":
            return {"w": X.T @ weights, "b": np.array([weights.sum()])}
        hidden = np.tanh(X @ self.blocks["W1"] + self.blocks["b1"])
        delta = (weights[:, None] * self.blocks["w2"][None, :]) * (1.0 - hidden ** 2)
        return {
            "W1": X.T @ delta,
            "b1": delta.sum(axis=0),
            "w2": hidden.T @ weights,
            "b2": np.array([weights.sum()]),
        }

    def step(self, grads: dict[str, np.ndarray], scale: float) -> None:
        for k, g in grads.items():
            self.blocks[k] += scale * g

    # persistence -------------------------------------------------------------
    def save(self, path: str | Path) -> Path:
        meta = {
            "kind": "value",
            "estimator": self.estimator,
            "n_actions": self.n_actions,
            "history_dim": self.history_dim,
            "encoder_digest": self.encoder_digest,
            "config": self.config,
        }
        return write_npz(path, {"meta": np.array(json.dumps(meta, sort_keys=True)), **self.blocks})

    @classmethod
    def load(cls, path: str | Path, encoder: EncoderParams | None = None) -> "ValueParams":
        with np.load(path, allow_pickle=False) as z:
            meta = json.loads(str(z["meta"]))
            if meta.get("kind") != "value":
                raise CheckpointMismatch(f"{path} is not a value checkpoint")
            blocks = {k: z[k].copy() for k in z.files if k != "meta"}
        params = cls(meta["estimator"], meta["n_actions"], meta["history_dim"], blocks,
                     meta["encoder_digest"], meta.get("config", {}))
        if encoder is not None and encoder.digest() != params.encoder_digest:
            raise CheckpointMismatch(f"{path} was trained against a different encoder")
        return params


def init_value_params(
    n_actions: int, history_dim: int, cfg: ValueConfig, encoder_digest: str = ""
) -> ValueParams:
    """Tabular starts at zero; linear and MLP weights start small and random."""
    rng = np.random.default_rng(cfg.seed)
    d = history_dim + n_actions
    if cfg.estimator == "tabular":
        blocks = {"table": np.zeros(n_actions)}
    elif cfg.estimator == "linear":
        blocks = {"w": rng.uniform(-0.01, 0.01, size=d), "b": np.zeros(1)}
    else:
        blocks = {
            "W1": rng.uniform(-1, 1, size=(d, cfg.width)) / math.sqrt(d),
            "b1": np.zeros(cfg.width),
            "w2": rng.uniform(-1, 1, size=cfg.width) / math.sqrt(cfg.width),
            "b2": np.zeros(1),
        }
    return ValueParams(cfg.estimator, n_actions, history_dim, blocks, encoder_digest, asdict(cfg))


def value(params: ValueParams, state: StateRep) -> float:
    H = np.asarray(state.history, dtype=float).reshape(1, -1)
    return float(params.predict(H, np.array([state.action]))[0])


def td_update(
    params: ValueParams,
    s_t: StateRep,
    s_next: StateRep | None,
    rmap: RewardMap,
    cfg: ValueConfig,
    alpha: float | None = None,
) -> float:
    """One semi-gradient TD(0) step, in place. ``s_next=None`` is the terminal sink.

    Returns the TD error ``r(s_next) + gamma * V(s_next) - V(s_t)``.
    """
    if s_next is None:
        target = 0.0
    else:
        target = reward(rmap, s_next) + cfg.gamma * value(params, s_next)
    td = target - value(params, s_t)
    if not math.isfinite(td):
        raise ValueLearningError(f"non-finite TD error at state action={s_t.action}")
    H = np.asarray(s_t.history, dtype=float).reshape(1, -1)
    grads = params.gradients(H, np.array([s_t.action]), np.array([td]))
    params.step(grads, cfg.alpha if alpha is None else alpha)
    return td


# ---------------------------------------------------------------------------
# sweeps


@dataclass
class SweepLog:
    sweep: int
    mean_abs_td: float
    alpha: float


class _StateTable(NamedTuple):
    H: np.ndarray  # (N, history_dim)
    a: np.ndarray  # (N,)


SweepSource = Callable[[int, np.random.Generator], tuple[np.ndarray, np.ndarray, np.ndarray]]


def run_sweeps(
    params: ValueParams, table: _StateTable, source: SweepSource, cfg: ValueConfig
) -> list[SweepLog]:
    """Apply batched semi-gradient TD over the transitions each sweep provides.

    ``source(sweep, rng)`` yields ``(src, nxt, reward)`` index arrays into
    ``table``; ``nxt == -1`` marks the terminal sink. With ``batch_size=1``
    this is plain online TD(0). With ``average_after`` set, the returned
    weights are the running mean of the iterates from that point on.
    """
    rng = np.random.default_rng(cfg.seed + 1)
    log: list[SweepLog] = []
    k = 0
    avg: dict[str, np.ndarray] | None = None
    n_avg = 0
    start_avg = None if cfg.average_after is None else int(cfg.average_after * cfg.max_sweeps)
    best = math.inf
    stale = 0
    for sweep in range(1, cfg.max_sweeps + 1):
        src, nxt, rew = source(sweep, rng)
        abs_td = 0.0
        for lo in range(0, src.size, cfg.batch_size):
            s = src[lo : lo + cfg.batch_size]
            n = nxt[lo : lo + cfg.batch_size]
            r = rew[lo : lo + cfg.batch_size]
            live = n >= 0
            boot = np.zeros(s.size)
            if live.any():
                boot[live] = params.predict(table.H[n[live]], table.a[n[live]])
            td = r + cfg.gamma * boot - params.predict(table.H[s], table.a[s])
            alpha = cfg.step_size(k)
            params.step(params.gradients(table.H[s], table.a[s], td), alpha / s.size)
            abs_td += float(np.abs(td).sum())
            k += 1
            if start_avg is not None and sweep > start_avg:
                n_avg += 1
                if avg is None:
                    avg = {name: b.copy() for name, b in params.blocks.items()}
                else:
                    for name, b in params.blocks.items():
                        avg[name] += (b - avg[name]) / n_avg
        mean_td = abs_td / max(src.size, 1)
        if not math.isfinite(mean_td):
            raise ValueLearningError(f"non-finite TD error in sweep {sweep} (alpha={alpha:g})")
        log.append(SweepLog(sweep, mean_td, alpha))
        if sweep > 1 and mean_td > cfg.divergence_factor * best:
            raise ValueLearningError(
                f"TD learning diverged: mean |TD| {mean_td:.4g} is more than "
                f"{cfg.divergence_factor:g}x its minimum {best:.4g} (alpha={cfg.alpha:g})"
            )
        if cfg.tol is not None and len(log) > 1:
            stale = stale + 1 if log[-2].mean_abs_td - mean_td < cfg.tol else 0
            if stale >= cfg.patience:
                break
        best = min(best, mean_td)
    if avg is not None:
        params.blocks = avg
    return log


def journey_states(
    encoder: EncoderParams | None, journeys: Sequence[Journey], batch_size: int = 64
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Flatten journeys into states. Returns ``(H, actions, offsets)``.

    Row ``offsets[k] + t`` holds ``(h_{t}, A_{t+1})`` for journey ``k`` (0-based t).
    """
    lengths = np.array([len(j) for j in journeys], dtype=np.int64)
    offsets = np.concatenate([[0], np.cumsum(lengths)])
    N = int(offsets[-1])
    actions = np.concatenate([j.actions for j in journeys]) if journeys else np.zeros(0, np.int64)
    d = encoder.hidden_dim if encoder is not None else 0
    H = np.zeros((N, d))
    if encoder is not None and N:
        order = sorted(range(len(journeys)), key=lambda k: (lengths[k], k))
        for lo in range(0, len(order), batch_size):
            idx = order[lo : lo + batch_size]
            X, lens = pad_batch([journeys[k].actions for k in idx])
            hist = encode_batch(encoder, X)
            for row, k in enumerate(idx):
                H[offsets[k] : offsets[k + 1]] = hist[row, : lens[row]]
    return H, actions, offsets


def train_values(
    journeys: Sequence[Journey],
    encoder: EncoderParams | None,
    cfg: ValueConfig | None,
    rmap: RewardMap,
) -> tuple[ValueParams, list[SweepLog]]:
    """Fit f_theta by TD(0) sweeps over every transition of every journey.

    The encoder is frozen. Each sweep visits all states in a seeded random
    order; the last event of a journey transitions to the terminal sink.
    """
    cfg = cfg or ValueConfig()
    n_actions = rmap.values.size
    if encoder is not None and encoder.n_actions != n_actions:
        raise ValueError("reward map size does not match the number of actions")
    if not journeys:
        raise ValueLearningError("no journeys to learn from")
    H, actions, offsets = journey_states(encoder, journeys)
    N = actions.size
    nxt = np.arange(1, N + 1)
    nxt[offsets[1:] - 1] = -1
    rew = np.where(nxt >= 0, rmap.values[actions[np.maximum(nxt, 0)]], 0.0)
    table = _StateTable(H, actions)
    params = init_value_params(n_actions, H.shape[1], cfg, encoder.digest() if encoder is not None else "")

    def source(sweep, rng):
        order = rng.permutation(N)
        return order, nxt[order], rew[order]

    log = run_sweeps(params, table, source, cfg)
    return params, log


def fit_mrp(
    mrp: TabularMRP,
    cfg: ValueConfig,
    transitions_per_sweep: int = 2000,
    seed: int = 0,
) -> tuple[ValueParams, list[SweepLog]]:
    """TD(0) on freshly sampled MRP transitions, states presented as one-hot actions.

    Transitions into terminal states bootstrap from 0.
    """
    n = mrp.n_states
    table = _StateTable(np.zeros((n, 0)), np.arange(n))
    params = init_value_params(n, 0, cfg)
    sample_rng = np.random.default_rng(seed)

    def source(sweep, rng):
        src, dst = sample_transitions(mrp, transitions_per_sweep, sample_rng)
        nxt = np.where(mrp.terminal[dst], -1, dst)
        return src, nxt, mrp.r[dst]

    log = run_sweeps(params, table, source, cfg)
    return params, log


def state_values(params: ValueParams) -> np.ndarray:
    """Values of the bare-action states 0..n_actions-1 (history_dim must be 0)."""
    if params.history_dim:
        raise ValueError("state_values needs an estimator without history input")
    return params.predict(np.zeros((params.n_actions, 0)), np.arange(params.n_actions))


# ---------------------------------------------------------------------------
# scoring


def _check_compat(encoder: EncoderParams | None, values: ValueParams) -> None:
    d = encoder.hidden_dim if encoder is not None else 0
    if d != values.history_dim:
        raise CheckpointMismatch(f"value estimator expects history dim {values.history_dim}, encoder gives {d}")
    if encoder is not None and encoder.n_actions != values.n_actions:
        raise CheckpointMismatch("encoder and value estimator disagree on the number of actions")
    if encoder is not None and values.encoder_digest and values.encoder_digest != encoder.digest():
        raise CheckpointMismatch("value estimator was trained against a different encoder")


def score_journey(encoder: EncoderParams | None, values: ValueParams, journey: Journey) -> ProxyTrace:
    """Proxy ratings y_t = f_theta(h_{t-1}, A_t) for t = 1..m."""
    return score_journeys(encoder, values, [journey])[0]


def score_journeys(
    encoder: EncoderParams | None, values: ValueParams, journeys: Sequence[Journey]
) -> list[ProxyTrace]:
    _check_compat(encoder, values)
    if any(len(j) < 1 for j in journeys):
        raise ValueError("cannot score an empty journey")
    if any(j.actions.max() >= values.n_actions for j in journeys):
        raise CheckpointMismatch("journey uses an action outside the model vocabulary")
    H, actions, offsets = journey_states(encoder, journeys)
    y = values.predict(H, actions) if actions.size else np.zeros(0)
    return [ProxyTrace(j.journey_id, y[offsets[k] : offsets[k + 1]]) for k, j in enumerate(journeys)]


def write_sweep_log(path: str | Path, log: Sequence[SweepLog]) -> None:
    rows = ["sweep,mean_abs_td"] + [f"{r.sweep},{r.mean_abs_td:.10g}" for r in log]
    atomic_write_text(path, "\n".join(rows) + "\n")
