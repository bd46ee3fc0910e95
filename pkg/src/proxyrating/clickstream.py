"""Event and journey data model, JSONL ingestion, stitching and curation."""

from __future__ import annotations

import enum
import json
import logging
import warnings
from collections import defaultdict
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from ._io import atomic_write_json, atomic_write_text, canonical_json, sha256_bytes

logger = logging.getLogger(__name__)

DAY_MS = 24 * 3600 * 1000
DEFAULT_GAP_MS = 30 * DAY_MS


class IngestError(ValueError):
    """A raw event line could not be turned into a ClickEvent."""


class ConfigError(ValueError):
    """Raised with every violated field when a config fails validation."""

    def __init__(self, problems: Sequence[str]):
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


class CurationWarning(UserWarning):
    """The requested purchase ratio could not be met."""


class JourneyCategory(str, enum.Enum):
    P2P = "P2P"  # one purchase to another purchase
    START2P = "START2P"  # start of observation to a purchase
    AFTERP_NOP = "AFTERP_NOP"  # after a purchase, ending without one
    NOP = "NOP"  # no purchase at all

    @classmethod
    def classify(cls, after_purchase: bool, ends_in_purchase: bool) -> "JourneyCategory":
        if ends_in_purchase:
            return cls.P2P if after_purchase else cls.START2P
        return cls.AFTERP_NOP if after_purchase else cls.NOP


@dataclass(frozen=True)
class ActionVocab:
    names: tuple[str, ...]
    purchase_id: int
    survey_id: int

    def __post_init__(self):
        object.__setattr__(self, "names", tuple(self.names))
        if len(set(self.names)) != len(self.names):
            raise ValueError("action labels must be unique")
        for name, idx in (("purchase_id", self.purchase_id), ("survey_id", self.survey_id)):
            if not 0 <= idx < len(self.names):
                raise ValueError(f"{name}={idx} outside [0, {len(self.names)})")
        if self.purchase_id == self.survey_id:
            raise ValueError("purchase_id and survey_id must differ")
        object.__setattr__(self, "_lookup", {n: i for i, n in enumerate(self.names)})

    @property
    def size(self) -> int:
        return len(self.names)

    def __len__(self) -> int:
        return len(self.names)

    def index(self, label: str) -> int:
        try:
            return self._lookup[label]
        except KeyError:
            raise KeyError(label) from None

    def label(self, idx: int) -> str:
        return self.names[idx]

    @classmethod
    def from_labels(cls, names: Sequence[str], purchase: str = "Purchase", survey: str = "Survey") -> "ActionVocab":
        names = list(names)
        return cls(tuple(names), names.index(purchase), names.index(survey))

    def to_json(self) -> dict:
        return {
            "actions": list(self.names),
            "purchase": self.names[self.purchase_id],
            "survey": self.names[self.survey_id],
        }

    @classmethod
    def from_json(cls, obj: dict | list) -> "ActionVocab":
        if isinstance(obj, list):
            return cls.from_labels(obj)
        return cls.from_labels(obj["actions"], obj.get("purchase", "Purchase"), obj.get("survey", "Survey"))

    @classmethod
    def load(cls, path: str | Path) -> "ActionVocab":
        return cls.from_json(json.loads(Path(path).read_text()))

    def save(self, path: str | Path) -> None:
        atomic_write_json(path, self.to_json())

    def digest(self) -> str:
        return sha256_bytes(canonical_json(self.to_json()).encode())


@dataclass(frozen=True, slots=True)
class ClickEvent:
    customer_id: str
    timestamp: int  # UTC epoch ms
    action: int
    dwell_ms: int | None = None
    survey_score: int | None = None


@dataclass(frozen=True)
class Journey:
    customer_id: str
    events: tuple[ClickEvent, ...]
    category: JourneyCategory
    has_purchase: bool
    survey_pos: int | None = None
    journey_id: str = ""

    def __post_init__(self):
        object.__setattr__(self, "events", tuple(self.events))
        if not self.journey_id:
            object.__setattr__(self, "journey_id", f"{self.customer_id}/0")

    def __len__(self) -> int:
        return len(self.events)

    @property
    def actions(self) -> np.ndarray:
        return np.fromiter((e.action for e in self.events), dtype=np.int64, count=len(self.events))

    @property
    def survey_score(self) -> int | None:
        if self.survey_pos is None:
            return None
        return self.events[self.survey_pos].survey_score

    @classmethod
    def from_actions(
        cls,
        actions: Sequence[int],
        vocab: ActionVocab,
        customer_id: str = "c0",
        journey_id: str = "",
        after_purchase: bool = False,
        survey_score: int | None = None,
        start_ts: int = 1_600_000_000_000,
        step_ms: int = 1000,
    ) -> "Journey":
        """Build a journey from bare action indices (tests and simulators)."""
        events = []
        survey_pos = None
        for t, a in enumerate(actions):
            score = None
            if a == vocab.survey_id:
                if survey_pos is None:
                    survey_pos = t
                score = survey_score
            events.append(ClickEvent(customer_id, start_ts + t * step_ms, int(a), None, score))
        has_purchase = len(actions) > 0 and actions[-1] == vocab.purchase_id
        return cls(
            customer_id,
            tuple(events),
            JourneyCategory.classify(after_purchase, has_purchase),
            has_purchase,
            survey_pos,
            journey_id or f"{customer_id}/0",
        )


@dataclass
class CurationConfig:
    min_len: int = 10
    max_len: int = 210
    purchase_ratio: tuple[int, int] = (1, 2)
    per_category_targets: dict[str, int] | None = None
    train_fraction: float = 0.75
    seed: int = 0
    strict: bool = False

    def __post_init__(self):
        self.purchase_ratio = tuple(self.purchase_ratio)
        self.validate()

    def validate(self) -> None:
        problems = []
        if not 0.0 < self.train_fraction < 1.0:
            problems.append(f"train_fraction={self.train_fraction} must lie in (0, 1)")
        if self.min_len < 2:
            problems.append(f"min_len={self.min_len} must be >= 2")
        if self.max_len < self.min_len:
            problems.append(f"max_len={self.max_len} must be >= min_len={self.min_len}")
        if len(self.purchase_ratio) != 2 or min(self.purchase_ratio) <= 0:
            problems.append(f"purchase_ratio={self.purchase_ratio} must be two positive integers")
        if self.per_category_targets is not None:
            for key, val in self.per_category_targets.items():
                if key not in JourneyCategory.__members__:
                    problems.append(f"per_category_targets: unknown category {key!r}")
                elif val is not None and val < 0:
                    problems.append(f"per_category_targets[{key}]={val} must be >= 0")
        if problems:
            raise ConfigError(problems)


@dataclass
class CurationReport:
    counts: dict[str, int]
    n_purchase: int
    n_no_purchase: int
    ratio_requested: float
    ratio_achieved: float | None
    ratio_ok: bool
    dropped_by_length: int
    n_survey: int
    n_train: int
    n_test: int
    seed: int

    def to_json(self) -> dict:
        return dict(self.__dict__)


@dataclass
class Dataset:
    vocab: ActionVocab
    train: list[Journey]
    test: list[Journey]
    curation: CurationConfig = field(default_factory=CurationConfig)
    report: CurationReport | None = None

    @property
    def journeys(self) -> list[Journey]:
        return self.train + self.test


# ---------------------------------------------------------------------------
# ingestion


def parse_event(obj: dict, vocab: ActionVocab) -> ClickEvent:
    """Validate one decoded JSONL record; raises ValueError/KeyError on bad input."""
    if not isinstance(obj, dict):
        raise ValueError("record is not a JSON object")
    cid = obj["customer_id"]
    if not isinstance(cid, str):
        raise ValueError("customer_id must be a string")
    ts = obj["ts"]
    if not isinstance(ts, int) or isinstance(ts, bool):
        raise ValueError("ts must be an integer (epoch ms)")
    if ts <= 0:
        raise ValueError(f"ts={ts} must be positive")
    label = obj["action"]
    try:
        action = vocab.index(label)
    except KeyError:
        raise ValueError(f"unknown action label {label!r}") from None
    dwell = obj.get("dwell_ms")
    if dwell is not None and (not isinstance(dwell, int) or dwell < 0):
        raise ValueError(f"dwell_ms={dwell!r} must be a nonnegative integer")
    score = obj.get("survey_score")
    if score is not None:
        if action != vocab.survey_id:
            raise ValueError(f"survey_score given on non-survey action {label!r}")
        if not isinstance(score, int) or not 0 <= score <= 10:
            raise ValueError(f"survey_score={score!r} must be an integer in [0, 10]")
    return ClickEvent(cid, ts, action, dwell, score)


def ingest(path: str | Path, vocab: ActionVocab) -> list[ClickEvent]:
    """Read a JSONL event log in file order.

    Errors carry the offending 1-based line number. Blank lines are skipped.
    """
    events = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                events.append(parse_event(obj, vocab))
            except json.JSONDecodeError as exc:
                raise IngestError(f"line {lineno}: malformed JSON ({exc.msg})") from None
            except KeyError as exc:
                raise IngestError(f"line {lineno}: missing field {exc.args[0]!r}") from None
            except ValueError as exc:
                raise IngestError(f"line {lineno}: {exc}") from None
    return events


def event_to_json(event: ClickEvent, vocab: ActionVocab, with_customer: bool = True) -> dict:
    obj = {"ts": event.timestamp, "action": vocab.label(event.action)}
    if with_customer:
        obj = {"customer_id": event.customer_id, **obj}
    if event.dwell_ms is not None:
        obj["dwell_ms"] = event.dwell_ms
    if event.survey_score is not None:
        obj["survey_score"] = event.survey_score
    return obj


def write_events(path: str | Path, events: Iterable[ClickEvent], vocab: ActionVocab) -> None:
    lines = [canonical_json(event_to_json(e, vocab)) for e in events]
    atomic_write_text(path, "".join(line + "\n" for line in lines))


# ---------------------------------------------------------------------------
# stitching


def _close_journey(
    cid: str, chunk: list[ClickEvent], k: int, after_purchase: bool, vocab: ActionVocab
) -> Journey:
    has_purchase = chunk[-1].action == vocab.purchase_id
    survey_pos = next((i for i, e in enumerate(chunk) if e.action == vocab.survey_id), None)
    return Journey(
        cid,
        tuple(chunk),
        JourneyCategory.classify(after_purchase, has_purchase),
        has_purchase,
        survey_pos,
        f"{cid}/{k}",
    )


def stitch_journeys(
    events: Iterable[ClickEvent], vocab: ActionVocab, gap_ms: int | None = DEFAULT_GAP_MS
) -> list[Journey]:
    """Group events per customer and cut the stream into journeys.

    A purchase closes its journey. An inactivity gap longer than ``gap_ms``
    also closes the running journey (pass ``None`` to disable). Ties in
    timestamp keep file order. Output is ordered by customer id, then time.
    """
    per_customer: dict[str, list[ClickEvent]] = defaultdict(list)
    for e in events:
        per_customer[e.customer_id].append(e)

    journeys: list[Journey] = []
    for cid in sorted(per_customer):
        stream = sorted(per_customer[cid], key=lambda e: e.timestamp)
        chunk: list[ClickEvent] = []
        after_purchase = False
        k = 0
        for e in stream:
            if chunk and gap_ms is not None and e.timestamp - chunk[-1].timestamp > gap_ms:
                journeys.append(_close_journey(cid, chunk, k, after_purchase, vocab))
                after_purchase, chunk, k = False, [], k + 1
            chunk.append(e)
            if e.action == vocab.purchase_id:
                journeys.append(_close_journey(cid, chunk, k, after_purchase, vocab))
                after_purchase, chunk, k = True, [], k + 1
        if chunk:
            journeys.append(_close_journey(cid, chunk, k, after_purchase, vocab))
    return journeys


# ---------------------------------------------------------------------------
# curation


def _keep_with_surveys(rng: np.random.Generator, pool: list[Journey], n_keep: int) -> list[Journey]:
    """Random subset of size ``n_keep`` that always contains every survey journey."""
    surveyed = [j for j in pool if j.survey_pos is not None]
    others = [j for j in pool if j.survey_pos is None]
    n_others = max(n_keep - len(surveyed), 0)
    if n_others >= len(others):
        return pool
    picked = set(rng.choice(len(others), size=n_others, replace=False).tolist())
    keep_ids = {j.journey_id for j in surveyed} | {others[i].journey_id for i in picked}
    return [j for j in pool if j.journey_id in keep_ids]


def curate(journeys: Sequence[Journey], vocab: ActionVocab, cfg: CurationConfig | None = None) -> Dataset:
    cfg = cfg or CurationConfig()
    rng = np.random.default_rng(cfg.seed)
    pool = sorted(journeys, key=lambda j: (j.customer_id, j.events[0].timestamp if j.events else 0, j.journey_id))

    n_before = len(pool)
    pool = [j for j in pool if cfg.min_len <= len(j) <= cfg.max_len]
    dropped = n_before - len(pool)

    if cfg.per_category_targets:
        sampled = []
        for cat in JourneyCategory:
            members = [j for j in pool if j.category is cat]
            target = cfg.per_category_targets.get(cat.value)
            sampled.extend(members if target is None else _keep_with_surveys(rng, members, target))
        pool = sorted(sampled, key=lambda j: (j.customer_id, j.events[0].timestamp, j.journey_id))

    buy = [j for j in pool if j.has_purchase]
    nobuy = [j for j in pool if not j.has_purchase]
    ratio = Fraction(*cfg.purchase_ratio)
    if buy and nobuy:
        if len(nobuy) > len(buy) / ratio:
            nobuy = _keep_with_surveys(rng, nobuy, round(len(buy) / ratio))
        elif len(buy) > len(nobuy) * ratio:
            buy = _keep_with_surveys(rng, buy, round(len(nobuy) * ratio))
    keep = {j.journey_id for j in buy} | {j.journey_id for j in nobuy}
    pool = [j for j in pool if j.journey_id in keep]

    achieved = len(buy) / len(nobuy) if nobuy else None
    ratio_ok = achieved is not None and abs(achieved - float(ratio)) <= 0.1 * float(ratio)
    if not ratio_ok:
        msg = (
            f"purchase:no-purchase ratio {len(buy)}:{len(nobuy)} "
            f"(achieved {achieved}) misses requested {cfg.purchase_ratio[0]}:{cfg.purchase_ratio[1]} by more than 10%"
        )
        if cfg.strict:
            raise ValueError(msg)
        warnings.warn(msg, CurationWarning, stacklevel=2)

    order = rng.permutation(len(pool))
    n_train = int(round(cfg.train_fraction * len(pool)))
    train_idx = set(order[:n_train].tolist())
    train = [j for i, j in enumerate(pool) if i in train_idx]
    test = [j for i, j in enumerate(pool) if i not in train_idx]

    counts = {cat.value: sum(j.category is cat for j in pool) for cat in JourneyCategory}
    report = CurationReport(
        counts=counts,
        n_purchase=len(buy),
        n_no_purchase=len(nobuy),
        ratio_requested=float(ratio),
        ratio_achieved=achieved,
        ratio_ok=ratio_ok,
        dropped_by_length=dropped,
        n_survey=sum(j.survey_pos is not None for j in pool),
        n_train=len(train),
        n_test=len(test),
        seed=cfg.seed,
    )
    logger.info("curated %d journeys (%d train / %d test)", len(pool), len(train), len(test))
    return Dataset(vocab, train, test, cfg, report)


# ---------------------------------------------------------------------------
# persistence


def journey_to_json(j: Journey, vocab: ActionVocab) -> dict:
    return {
        "journey_id": j.journey_id,
        "customer_id": j.customer_id,
        "category": j.category.value,
        "has_purchase": j.has_purchase,
        "survey_pos": j.survey_pos,
        "events": [event_to_json(e, vocab, with_customer=False) for e in j.events],
    }


def journey_from_json(obj: dict, vocab: ActionVocab) -> Journey:
    cid = obj["customer_id"]
    events = tuple(parse_event({"customer_id": cid, **e}, vocab) for e in obj["events"])
    return Journey(
        cid,
        events,
        JourneyCategory(obj["category"]),
        bool(obj["has_purchase"]),
        obj.get("survey_pos"),
        obj["journey_id"],
    )


def write_journeys(path: str | Path, journeys: Iterable[Journey], vocab: ActionVocab) -> None:
    text = "".join(canonical_json(journey_to_json(j, vocab)) + "\n" for j in journeys)
    atomic_write_text(path, text)


def read_journeys(path: str | Path, vocab: ActionVocab) -> list[Journey]:
    with open(path, encoding="utf-8") as fh:
        return [journey_from_json(json.loads(line), vocab) for line in fh if line.strip()]


def save_dataset(directory: str | Path, ds: Dataset) -> list[Path]:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    ds.vocab.save(d / "vocab.json")
    write_journeys(d / "train.jsonl", ds.train, ds.vocab)
    write_journeys(d / "test.jsonl", ds.test, ds.vocab)
    summary = {
        "curation": {**ds.curation.__dict__, "purchase_ratio": list(ds.curation.purchase_ratio)},
        "report": ds.report.to_json() if ds.report else None,
    }
    atomic_write_json(d / "curation.json", summary)
    return [d / "vocab.json", d / "train.jsonl", d / "test.jsonl", d / "curation.json"]


def load_dataset(directory: str | Path) -> Dataset:
    d = Path(directory)
    vocab = ActionVocab.load(d / "vocab.json")
    train = read_journeys(d / "train.jsonl", vocab)
    test = read_journeys(d / "test.jsonl", vocab)
    cfg = CurationConfig()
    report = None
    meta = d / "curation.json"
    if meta.exists():
        obj = json.loads(meta.read_text())
        cfg = CurationConfig(**obj["curation"])
        if obj.get("report"):
            report = CurationReport(**obj["report"])
    return Dataset(vocab, train, test, cfg, report)
