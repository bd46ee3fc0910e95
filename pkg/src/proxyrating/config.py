"""Run configuration: one structured file (YAML or JSON) plus flag overrides.

The file has one section per stage. Unknown keys are rejected, and every
section is validated before any work starts so that a bad config reports
all of its problems at once.
"""

from __future__ import annotations

import copy
import json
from dataclasses import asdict, dataclass, field, fields
from importlib import resources
from pathlib import Path
from typing import Any

import yaml

from ._io import canonical_json, derive_seed, sha256_bytes
from .clickstream import ConfigError, CurationConfig
from .encoder import EncoderConfig
from .evaluation import HeadConfig
from .value import ValueConfig

SECTIONS = ("paths", "simulate", "curation", "encoder", "value", "rewards", "evaluation", "head")
SIM_KEYS = (
    "n_journeys", "preset", "purchase_hazard", "stop_hazard", "regime_switch_prob",
    "survey_popup_prob", "return_prob", "max_len",
)  # fmt: skip
EVAL_KEYS = ("q", "min_n", "length_bins", "split")
PATH_KEYS = ("data", "events", "vocab", "encoder", "values", "traces", "out")
BUNDLED = ("small",)

DEFAULTS: dict[str, Any] = {
    "seed": 0,
    "paths": {},
    "simulate": {"n_journeys": 5000, "preset": "funnel"},
    "curation": {},
    "encoder": {},
    "value": {},
    "rewards": {},
    "evaluation": {"q": [1, 2], "min_n": 20, "length_bins": [25, 50, 75, 100], "split": "test"},
    "head": {},
}


def bundled_config_path(name: str) -> Path:
    return Path(str(resources.files("proxyrating").joinpath("configs", f"{name}.yaml")))


def read_config_file(path: str | Path) -> dict:
    """Parse YAML or JSON. A bare bundled name such as ``small`` is also accepted."""
    p = Path(path)
    if not p.exists() and str(path) in BUNDLED:
        p = bundled_config_path(str(path))
    if not p.exists():
        raise ConfigError([f"config file {path} does not exist"])
    text = p.read_text(encoding="utf-8")
    try:
        obj = json.loads(text) if p.suffix == ".json" else yaml.safe_load(text)
    except (json.JSONDecodeError, yaml.YAMLError) as exc:
        raise ConfigError([f"cannot parse {path}: {exc}"]) from exc
    if obj is None:
        return {}
    if not isinstance(obj, dict):
        raise ConfigError([f"{path}: top level must be a mapping"])
    return obj


def _merge(base: dict, extra: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in extra.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict) and k != "rewards":
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def _dataclass_keys(cls) -> set[str]:
    return {f.name for f in fields(cls)} - {"seed"}


@dataclass
class RunConfig:
    seed: int = 0
    paths: dict[str, str] = field(default_factory=dict)
    simulate: dict[str, Any] = field(default_factory=dict)
    curation: CurationConfig = field(default_factory=CurationConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    value: ValueConfig = field(default_factory=ValueConfig)
    rewards: dict[str, float] = field(default_factory=dict)
    evaluation: dict[str, Any] = field(default_factory=dict)
    head: HeadConfig = field(default_factory=HeadConfig)

    @classmethod
    def from_dict(cls, raw: dict) -> "RunConfig":
        """Build and validate; stage seeds are derived from the global seed."""
        data = _merge(DEFAULTS, raw)
        problems: list[str] = []
        for key in data:
            if key != "seed" and key not in SECTIONS:
                problems.append(f"unknown config section {key!r}")
        seed = data.get("seed", 0)
        if not isinstance(seed, int) or isinstance(seed, bool) or seed < 0:
            problems.append(f"seed={seed!r} must be a nonnegative integer")
            seed = 0

        def unknown(section, allowed):
            for k in data.get(section) or {}:
                if k not in allowed:
                    problems.append(f"{section}: unknown key {k!r}")

        unknown("paths", PATH_KEYS)
        unknown("simulate", SIM_KEYS)
        unknown("evaluation", EVAL_KEYS)

        built = {}
        for name, klass in (("curation", CurationConfig), ("encoder", EncoderConfig),
                            ("value", ValueConfig), ("head", HeadConfig)):  # fmt: skip
            section = dict(data.get(name) or {})
            bad = [k for k in section if k not in _dataclass_keys(klass)]
            for k in bad:
                problems.append(f"{name}: unknown key {k!r}")
                section.pop(k)
            try:
                built[name] = klass(**section, seed=derive_seed(seed, name))
            except ConfigError as exc:
                problems.extend(f"{name}: {p}" for p in exc.problems)
            except (TypeError, ValueError) as exc:
                problems.append(f"{name}: {exc}")

        sim = data["simulate"]
        n = sim.get("n_journeys")
        if not isinstance(n, int) or n < 1:
            problems.append(f"simulate: n_journeys={n!r} must be a positive integer")
        if sim.get("preset") != "funnel":
            problems.append(f"simulate: preset={sim.get('preset')!r} must be 'funnel'")
        ev = data["evaluation"]
        qs = ev.get("q")
        qs = [qs] if isinstance(qs, int) else qs
        if not qs or not all(isinstance(q, int) and q >= 1 for q in qs):
            problems.append(f"evaluation: q={ev.get('q')!r} must be a positive integer or a list of them")
        if ev.get("split") not in ("train", "test", "all"):
            problems.append(f"evaluation: split={ev.get('split')!r} must be train, test or all")
        rewards = data.get("rewards") or {}
        for label, r in rewards.items():
            if not isinstance(r, (int, float)) or isinstance(r, bool):
                problems.append(f"rewards: reward for {label!r} must be a number")
        if problems:
            raise ConfigError(problems)
        ev = {**ev, "q": list(qs)}
        return cls(seed, dict(data["paths"]), dict(sim), built["curation"], built["encoder"],
                   built["value"], {k: float(v) for k, v in rewards.items()}, ev, built["head"])  # fmt: skip

    def to_dict(self) -> dict:
        out = asdict(self)
        out["curation"]["purchase_ratio"] = list(self.curation.purchase_ratio)
        return json.loads(canonical_json(out))

    def digest(self) -> str:
        return sha256_bytes(canonical_json(self.to_dict()).encode())

    def stage_seeds(self) -> dict[str, int]:
        return {
            "simulate": derive_seed(self.seed, "simulate"),
            "curation": self.curation.seed,
            "encoder": self.encoder.seed,
            "value": self.value.seed,
            "head": self.head.seed,
        }


def set_path(raw: dict, dotted: str, value: Any) -> None:
    """Assign ``raw[a][b] = value`` for ``dotted == "a.b"``, creating sections."""
    parts = dotted.split(".")
    cur = raw
    for p in parts[:-1]:
        cur = cur.setdefault(p, {})
        if not isinstance(cur, dict):
            raise ConfigError([f"cannot set {dotted}: {p} is not a section"])
    cur[parts[-1]] = value


def parse_override(text: str) -> tuple[str, Any]:
    """``key.sub=value`` with the value parsed as YAML (so numbers and lists work)."""
    if "=" not in text:
        raise ConfigError([f"override {text!r} must look like section.key=value"])
    key, val = text.split("=", 1)
    try:
        return key.strip(), yaml.safe_load(val)
    except yaml.YAMLError as exc:
        raise ConfigError([f"cannot parse override {text!r}: {exc}"]) from exc
