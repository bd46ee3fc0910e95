"""Recurrent next-action encoder with hand-written forward and backward passes.

The hidden state after consuming ``A_1..A_t`` is the history vector ``h_t``
used by the value learner; ``h_0`` is all zeros. Two cells are available:
an LSTM (default) and a basic tanh recurrence.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np

from ._io import atomic_write_text, sha256_bytes, write_npz
from .clickstream import ActionVocab, ConfigError, Journey

logger = logging.getLogger(__name__)

CELLS = ("lstm", "rnn")
PARAM_BLOCKS = ("embedding", "W", "b", "W_out", "b_out")


class EncoderTrainingError(RuntimeError):
    pass


class CheckpointMismatch(ValueError):
    pass


@dataclass
class EncoderConfig:
    embed_dim: int = 150
    hidden_dim: int = 150
    cell: str = "lstm"
    learning_rate: float = 1.0
    batch_size: int = 32
    max_epochs: int = 20
    early_stop_patience: int = 3
    clip_norm: float | None = 5.0
    heldout_fraction: float = 0.1
    init_scale: float = 0.05
    seed: int = 0

    def __post_init__(self):
        problems = []
        if self.embed_dim <= 0 or self.hidden_dim <= 0:
            problems.append("embed_dim and hidden_dim must be positive")
        if self.cell not in CELLS:
            problems.append(f"cell={self.cell!r} must be one of {CELLS}")
        if not self.learning_rate > 0:
            problems.append(f"learning_rate={self.learning_rate} must be > 0")
        if self.batch_size <= 0 or self.max_epochs <= 0 or self.early_stop_patience < 0:
            problems.append("batch_size, max_epochs must be positive and early_stop_patience >= 0")
        if not 0.0 <= self.heldout_fraction < 1.0:
            problems.append(f"heldout_fraction={self.heldout_fraction} must lie in [0, 1)")
        if problems:
            raise ConfigError(problems)


@dataclass
class EncoderParams:
    cell: str
    embedding: np.ndarray  # (A, E)
    W: np.ndarray  # (E + H, G * H), gates in order i, f, o, g for the LSTM
    b: np.ndarray  # (G * H,)
    W_out: np.ndarray  # (H, A)
    b_out: np.ndarray  # (A,)
    vocab_digest: str = ""
    config: dict = field(default_factory=dict)

    @property
    def hidden_dim(self) -> int:
        return self.W_out.shape[0]

    @property
    def embed_dim(self) -> int:
        return self.embedding.shape[1]

    @property
    def n_actions(self) -> int:
        return self.embedding.shape[0]

    def blocks(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in PARAM_BLOCKS}

    def copy(self) -> "EncoderParams":
        return EncoderParams(self.cell, *(getattr(self, n).copy() for n in PARAM_BLOCKS),
                             vocab_digest=self.vocab_digest, config=dict(self.config))

    def digest(self) -> str:
        parts = [self.cell.encode()] + [np.ascontiguousarray(getattr(self, n)).tobytes() for n in PARAM_BLOCKS]
        return sha256_bytes(b"|".join(parts))

    def save(self, path: str | Path) -> Path:
        meta = {"kind": "encoder", "cell": self.cell, "vocab_digest": self.vocab_digest, "config": self.config}
        return write_npz(path, {"meta": np.array(json.dumps(meta, sort_keys=True)), **self.blocks()})

    @classmethod
    def load(cls, path: str | Path, vocab: ActionVocab | None = None) -> "EncoderParams":
        with np.load(path, allow_pickle=False) as z:
            meta = json.loads(str(z["meta"]))
            if meta.get("kind") != "encoder":
                raise CheckpointMismatch(f"{path} is not an encoder checkpoint")
            params = cls(meta["cell"], *(z[n].copy() for n in PARAM_BLOCKS),
                         vocab_digest=meta["vocab_digest"], config=meta.get("config", {}))
        if vocab is not None and vocab.digest() != params.vocab_digest:
            raise CheckpointMismatch(f"{path} was trained on a different action vocabulary")
        return params


class HistoryVector(NamedTuple):
    """Recurrent state; ``values`` is h_t, ``cell`` the LSTM memory (None for the basic cell)."""

    values: np.ndarray
    cell: np.ndarray | None = None


def init_params(n_actions: int, cfg: EncoderConfig, vocab_digest: str = "") -> EncoderParams:
    rng = np.random.default_rng(cfg.seed)
    E, H = cfg.embed_dim, cfg.hidden_dim
    G = 4 if cfg.cell == "lstm" else 1
    s = cfg.init_scale

    def u(*shape):
        return rng.uniform(-s, s, size=shape)

    return EncoderParams(cfg.cell, u(n_actions, E), u(E + H, G * H), u(G * H), u(H, n_actions), u(n_actions),
                         vocab_digest=vocab_digest, config=asdict(cfg))


def zero_state(params: EncoderParams, batch: int | None = None) -> HistoryVector:
    shape = (params.hidden_dim,) if batch is None else (batch, params.hidden_dim)
    h = np.zeros(shape)
    return HistoryVector(h, np.zeros(shape) if params.cell == "lstm" else None)


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _cell_forward(params: EncoderParams, x, h, c):
    """One step on a batch. Returns (h_new, c_new, cache)."""
    H = params.hidden_dim
    xh = np.concatenate([x, h], axis=-1)
    z = xh @ params.W + params.b
    if params.cell == "rnn":
        h_new = np.tanh(z)
        return h_new, None, (xh, h_new)
    i = _sigmoid(z[..., :H])
    f = _sigmoid(z[..., H:2 * H])
    o = _sigmoid(z[..., 2 * H:3 * H])
    g = np.tanh(z[..., 3 * H:])
    c_new = f * c + i * g
    tc = np.tanh(c_new)
    h_new = o * tc
    return h_new, c_new, (xh, c, i, f, o, g, tc)


def encode_step(params: EncoderParams, h_prev: HistoryVector, action: int) -> HistoryVector:
    if not 0 <= action < params.n_actions:
        raise IndexError(f"action {action} outside [0, {params.n_actions})")
    x = params.embedding[action]
    c = h_prev.cell if params.cell == "lstm" else None
    if params.cell == "lstm" and c is None:
        c = np.zeros(params.hidden_dim)
    h, c_new, _ = _cell_forward(params, x, h_prev.values, c)
    return HistoryVector(h, c_new)


def next_action_logits(params: EncoderParams, h: HistoryVector | np.ndarray) -> np.ndarray:
    values = h.values if isinstance(h, HistoryVector) else h
    return values @ params.W_out + params.b_out


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def pad_batch(seqs: Sequence[np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    lengths = np.array([len(s) for s in seqs], dtype=np.int64)
    T = int(lengths.max()) if len(seqs) else 0
    X = np.zeros((len(seqs), T), dtype=np.int64)
    for k, s in enumerate(seqs):
        X[k, : len(s)] = s
    return X, lengths


def encode_batch(params: EncoderParams, X: np.ndarray) -> np.ndarray:
    """History vectors for a right-padded batch: ``out[:, t] = h_t`` for t = 0..T."""
    B, T = X.shape
    if X.size and (X.min() < 0 or X.max() >= params.n_actions):
        raise IndexError("action index outside the encoder vocabulary")
    state = zero_state(params, B)
    h, c = state.values, state.cell
    out = np.zeros((B, T + 1, params.hidden_dim))
    for t in range(T):
        h, c, _ = _cell_forward(params, params.embedding[X[:, t]], h, c)
        out[:, t + 1] = h
    return out


def encode_sequence(params: EncoderParams, actions: Sequence[int]) -> np.ndarray:
    """``(m + 1, hidden_dim)`` array of h_0..h_m for one journey."""
    X = np.asarray(actions, dtype=np.int64)[None, :]
    return encode_batch(params, X)[0]


# ---------------------------------------------------------------------------
# loss and gradients


def loss_and_grads(
    params: EncoderParams, X: np.ndarray, lengths: np.ndarray, need_grads: bool = True
) -> tuple[float, int, dict[str, np.ndarray] | None]:
    """Mean next-action cross-entropy over a padded batch, and its gradients.

    Position t predicts ``X[:, t + 1]`` from ``h_{t+1}``; targets beyond a
    sequence's length are masked. Returns ``(mean_ce, n_targets, grads)``.
    """
    B, T = X.shape
    H = params.hidden_dim
    mask = (np.arange(1, T)[None, :] < lengths[:, None]).astype(float)  # (B, T-1)
    n_targets = int(mask.sum())
    if n_targets == 0:
        zeros = {k: np.zeros_like(v) for k, v in params.blocks().items()}
        return 0.0, 0, zeros if need_grads else None

    state = zero_state(params, B)
    h, c = state.values, state.cell
    caches, hs = [], []
    for t in range(T - 1):
        h, c, cache = _cell_forward(params, params.embedding[X[:, t]], h, c)
        caches.append(cache)
        hs.append(h)
    Hs = np.stack(hs, axis=1)  # (B, T-1, H)
    logits = Hs @ params.W_out + params.b_out
    logp = log_softmax(logits)
    targets = X[:, 1:]
    picked = np.take_along_axis(logp, targets[..., None], axis=-1)[..., 0]
    loss = float(-(picked * mask).sum() / n_targets)
    if not need_grads:
        return loss, n_targets, None

    dlogits = np.exp(logp)
    np.put_along_axis(dlogits, targets[..., None], np.take_along_axis(dlogits, targets[..., None], -1) - 1.0, -1)
    dlogits *= mask[..., None] / n_targets
    grads = {k: np.zeros_like(v) for k, v in params.blocks().items()}
    grads["W_out"] = np.einsum("bth,bta->ha", Hs, dlogits)
    grads["b_out"] = dlogits.sum(axis=(0, 1))
    dHs = dlogits @ params.W_out.T  # (B, T-1, H)
    E = params.embed_dim

    dh_next = np.zeros((B, H))
    dc_next = np.zeros((B, H))
    for t in reversed(range(T - 1)):
        dh = dHs[:, t] + dh_next
        if params.cell == "rnn":
            xh, h_new = caches[t]
            dz = dh * (1.0 - h_new ** 2)
        else:
            xh, c_prev, i, f, o, g, tc = caches[t]
            do = dh * tc
            dc = dh * o * (1.0 - tc ** 2) + dc_next
            di, dg, df = dc * g, dc * i, dc * c_prev
            dc_next = dc * f
            dz = np.concatenate(
                [di * i * (1 - i), df * f * (1 - f), do * o * (1 - o), dg * (1 - g ** 2)], axis=-1
            )
        grads["W"] += xh.T @ dz
        grads["b"] += dz.sum(axis=0)
        dxh = dz @ params.W.T
        np.add.at(grads["embedding"], X[:, t], dxh[:, :E])
        dh_next = dxh[:, E:]
    return loss, n_targets, grads


def global_norm(grads: dict[str, np.ndarray]) -> float:
    return math.sqrt(sum(float((g * g).sum()) for g in grads.values()))


# ---------------------------------------------------------------------------
# training


@dataclass
class EpochLog:
    epoch: int
    train_ce: float
    heldout_ce: float


def _batches(seqs: list[np.ndarray], batch_size: int) -> list[list[int]]:
    order = sorted(range(len(seqs)), key=lambda k: (len(seqs[k]), k))
    return [order[i : i + batch_size] for i in range(0, len(order), batch_size)]


def evaluate_ce(params: EncoderParams, seqs: Sequence[np.ndarray], batch_size: int = 64) -> float:
    """Mean next-action cross-entropy (nats per target) over journeys."""
    seqs = [np.asarray(s) for s in seqs]
    total, count = 0.0, 0
    for idx in _batches(seqs, batch_size):
        X, lengths = pad_batch([seqs[k] for k in idx])
        loss, n, _ = loss_and_grads(params, X, lengths, need_grads=False)
        total += loss * n
        count += n
    return total / count if count else float("nan")


def train_encoder(
    journeys: Sequence[Journey] | Sequence[Sequence[int]],
    n_actions: int,
    cfg: EncoderConfig | None = None,
    vocab_digest: str = "",
) -> tuple[EncoderParams, list[EpochLog]]:
    """Teacher-forced SGD on next-action prediction with early stopping.

    A seeded ``heldout_fraction`` slice of the journeys is kept out of
    training to drive early stopping; the parameters with the lowest
    held-out loss are returned. Accepts Journey objects or raw action lists.
    """
    cfg = cfg or EncoderConfig()
    seqs = [j.actions if isinstance(j, Journey) else np.asarray(j, dtype=np.int64) for j in journeys]
    if not seqs:
        raise EncoderTrainingError("empty training set")
    if min(len(s) for s in seqs) < 2:
        raise EncoderTrainingError("every training journey needs at least two actions")

    rng = np.random.default_rng(cfg.seed)
    perm = rng.permutation(len(seqs))
    n_held = int(round(cfg.heldout_fraction * len(seqs)))
    if 0 < n_held < len(seqs):
        held = [seqs[k] for k in perm[:n_held]]
        fit = [seqs[k] for k in sorted(perm[n_held:])]
    else:
        held, fit = seqs, seqs

    params = init_params(n_actions, cfg, vocab_digest)
    batches = _batches(fit, cfg.batch_size)
    best, best_ce, stale = params.copy(), evaluate_ce(params, held), 0
    log: list[EpochLog] = []
    for epoch in range(1, cfg.max_epochs + 1):
        total, count = 0.0, 0
        for step, b in enumerate(rng.permutation(len(batches))):
            X, lengths = pad_batch([fit[k] for k in batches[b]])
            loss, n, grads = loss_and_grads(params, X, lengths)
            if not math.isfinite(loss):
                raise EncoderTrainingError(f"non-finite loss at epoch {epoch}, step {step}")
            total += loss * n
            count += n
            scale = cfg.learning_rate
            if cfg.clip_norm is not None:
                norm = global_norm(grads)
                if norm > cfg.clip_norm:
                    scale *= cfg.clip_norm / norm
            for name, g in grads.items():
                getattr(params, name)[...] -= scale * g
        held_ce = evaluate_ce(params, held)
        log.append(EpochLog(epoch, total / max(count, 1), held_ce))
        logger.info("encoder epoch %d: train %.4f heldout %.4f", epoch, log[-1].train_ce, held_ce)
        if held_ce < best_ce:
            best, best_ce, stale = params.copy(), held_ce, 0
        else:
            stale += 1
            if stale > cfg.early_stop_patience:
                break
    return best, log


def write_log_csv(path: str | Path, log: Sequence[EpochLog]) -> None:
    rows = ["epoch,train_ce,heldout_ce"] + [f"{r.epoch},{r.train_ce:.10g},{r.heldout_ce:.10g}" for r in log]
    atomic_write_text(path, "\n".join(rows) + "\n")
