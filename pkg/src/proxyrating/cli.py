"""Command-line entry point: ``proxyrating <subcommand> [flags]``.

Each subcommand reads its inputs, writes its artifacts atomically and
records a manifest next to them. Heavy imports happen after argument
parsing so that ``--threads`` can cap the BLAS thread pools first.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import traceback
from pathlib import Path
from typing import Any, Callable, Sequence

SUBCOMMANDS = (
    "ingest", "curate", "simulate", "train-encoder", "train-value",
    "score", "metrics", "validate", "predict", "report",
)  # fmt: skip
THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS", "NUMEXPR_NUM_THREADS")
MANIFEST_VERSION = 1


class UsageError(Exception):
    pass


class CommandError(Exception):
    """Runtime failure with a stable machine-readable kind."""

    def __init__(self, kind: str, message: str, problems: Sequence[str] = ()):
        super().__init__(message)
        self.kind = kind
        self.problems = list(problems)


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # route argparse failures through our error reporting
        raise UsageError(message)


# ---------------------------------------------------------------------------
# argument parsing

# flag dest -> dotted config key
OVERRIDES = {
    "n_journeys": "simulate.n_journeys",
    "gamma": "value.gamma",
    "alpha": "value.alpha",
    "estimator": "value.estimator",
    "sweeps": "value.max_sweeps",
    "epochs": "encoder.max_epochs",
    "hidden_dim": "encoder.hidden_dim",
    "cell": "encoder.cell",
    "min_n": "evaluation.min_n",
    "split": "evaluation.split",
}


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="YAML or JSON run config, or a bundled name such as 'small'")
    common.add_argument("--seed", type=int, help="global seed; every stage seed derives from it")
    common.add_argument("--threads", type=int, help="cap BLAS/OpenMP threads")
    common.add_argument("--out", help="output file or directory")
    common.add_argument("--json-errors", action="store_true", help="print failures as one JSON object on stderr")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override any config key, e.g. value.alpha=0.1 (repeatable)")  # fmt: skip

    parser = _Parser(prog="proxyrating", description="Proxy experience ratings from clickstream journeys.")
    sub = parser.add_subparsers(dest="command", metavar="SUBCOMMAND", parser_class=_Parser)
    sub.required = True

    def add(name, help_text):
        return sub.add_parser(name, parents=[common], help=help_text, description=help_text)

    p = add("simulate", "Generate a synthetic funnel event log (events.jsonl, regimes.jsonl, vocab.json).")
    p.add_argument("--n-journeys", type=int, dest="n_journeys")

    p = add("ingest", "Parse a JSONL event log and stitch it into journeys.jsonl.")
    p.add_argument("--events")
    p.add_argument("--vocab")

    p = add("curate", "Length-filter, rebalance and split journeys into a dataset directory.")
    p.add_argument("--data", help="directory with vocab.json and events.jsonl or journeys.jsonl")

    p = add("train-encoder", "Train the next-action recurrent encoder.")
    p.add_argument("--data")
    p.add_argument("--epochs", type=int)
    p.add_argument("--hidden-dim", type=int, dest="hidden_dim")
    p.add_argument("--cell", choices=("lstm", "rnn"))

    p = add("train-value", "Fit the value estimator by TD(0) over training journeys.")
    p.add_argument("--data")
    p.add_argument("--encoder")
    p.add_argument("--gamma", type=float)
    p.add_argument("--alpha", type=float)
    p.add_argument("--estimator")
    p.add_argument("--sweeps", type=int)

    p = add("score", "Write proxy ratings per journey and timestep as CSV.")
    p.add_argument("--data")
    p.add_argument("--encoder")
    p.add_argument("--values")
    p.add_argument("--split", choices=("train", "test", "all"), default=None)

    p = add("metrics", "Per-journey Z, pair-score matrices and Z distributions.")
    p.add_argument("--data")
    p.add_argument("--traces")
    p.add_argument("--min-n", type=int, dest="min_n")

    p = add("validate", "Compare lag indicators with survey classes.")
    p.add_argument("--data")
    p.add_argument("--traces")
    p.add_argument("--q", type=int, choices=(1, 2), action="append")
    p.add_argument("--split", choices=("train", "test", "all"), default=None)

    p = add("predict", "Purchase-prediction ROC curves for Z, survey score and a supervised head.")
    p.add_argument("--data")
    p.add_argument("--traces")
    p.add_argument("--encoder", help="enables the supervised purchase-probability head")
    p.add_argument("--split", choices=("train", "test", "all"), default=None)

    p = add("report", "Score a dataset and render every evaluation output into one directory.")
    p.add_argument("--data")
    p.add_argument("--encoder")
    p.add_argument("--values")
    p.add_argument("--split", choices=("train", "test", "all"), default=None)
    return parser


def _effective_config(args):
    from .config import RunConfig, parse_override, read_config_file, set_path

    raw = read_config_file(args.config) if args.config else {}
    for text in args.set:
        key, val = parse_override(text)
        set_path(raw, key, val)
    for dest, key in OVERRIDES.items():
        val = getattr(args, dest, None)
        if val is not None:
            set_path(raw, key, val)
    if getattr(args, "q", None):
        set_path(raw, "evaluation.q", args.q)
    if args.seed is not None:
        raw["seed"] = args.seed
    return RunConfig.from_dict(raw)


# ---------------------------------------------------------------------------
# manifests and shared helpers


class Run:
    """Collects inputs and artifacts for one subcommand and writes its manifest."""

    def __init__(self, command: str, cfg, threads: int | None):
        self.command = command
        self.cfg = cfg
        self.threads = threads
        self.inputs: dict[str, dict] = {}
        self.artifacts: list[Path] = []

    def add_input(self, name: str, path: str | Path) -> Path:
        from ._io import sha256_path

        p = Path(path)
        if not p.exists():
            raise CommandError("missing_input", f"{name} path {p} does not exist")
        self.inputs[name] = {"name": p.name, "sha256": sha256_path(p)}
        return p

    def add_artifacts(self, *paths: str | Path) -> None:
        self.artifacts.extend(Path(p) for p in paths)

    def write_manifest(self, path: Path, root: Path) -> Path:
        from ._io import atomic_write_json, sha256_file

        arts = []
        for p in sorted(set(self.artifacts), key=lambda q: q.as_posix()):
            rel = os.path.relpath(p, root)
            arts.append({"path": Path(rel).as_posix(), "sha256": sha256_file(p)})
        manifest = {
            "version": MANIFEST_VERSION,
            "command": self.command,
            "config": self.cfg.to_dict(),
            "config_hash": self.cfg.digest(),
            "seed": self.cfg.seed,
            "seeds": self.cfg.stage_seeds(),
            "threads": self.threads,
            "inputs": self.inputs,
            "artifacts": arts,
        }
        atomic_write_json(path, manifest)
        return path


def _out_dir(args, default: str) -> Path:
    out = Path(args.out or default)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _out_file(args, default: str) -> Path:
    out = Path(args.out or default)
    out.parent.mkdir(parents=True, exist_ok=True)
    return out


def _sidecar(path: Path, suffix: str) -> Path:
    """``model.npz`` -> ``model.<suffix>``."""
    return path.with_name(path.stem + "." + suffix)


def _load_data(run: Run, path: str):
    from .clickstream import load_dataset

    d = run.add_input("data", path)
    if not (d / "train.jsonl").exists():
        raise CommandError("missing_input", f"{d} is not a curated dataset (no train.jsonl); run curate first")
    return load_dataset(d)


def _split(ds, name: str):
    return {"train": ds.train, "test": ds.test, "all": ds.train + ds.test}[name]


def _split_name(args, cfg) -> str:
    return getattr(args, "split", None) or cfg.evaluation["split"]


def _load_encoder(run: Run, path: str, vocab):
    from .encoder import EncoderParams

    return EncoderParams.load(run.add_input("encoder", path), vocab)


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def _csv(rows: list[Sequence[Any]]) -> str:
    return "\n".join(",".join(str(c) for c in r) for r in rows) + "\n"


def write_traces_csv(path: Path, journeys, traces, vocab) -> Path:
    from ._io import atomic_write_text

    rows: list[Sequence[Any]] = [("customer_id", "journey_id", "t", "action_label", "y")]
    for j, tr in zip(journeys, traces):
        for t, (a, y) in enumerate(zip(j.actions, tr.y), start=1):
            rows.append((j.customer_id, j.journey_id, t, vocab.label(int(a)), _fmt(y)))
    return atomic_write_text(path, _csv(rows))


def read_traces_csv(path: Path) -> dict[str, Any]:
    """journey_id -> ProxyTrace, checking that timesteps run 1..m in order."""
    import csv

    import numpy as np

    from .metrics import ProxyTrace

    series: dict[str, list[float]] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = {"journey_id", "t", "y"} - set(reader.fieldnames or ())
        if missing:
            raise CommandError("bad_input", f"{path}: missing columns {sorted(missing)}")
        for line, row in enumerate(reader, start=2):
            ys = series.setdefault(row["journey_id"], [])
            if int(row["t"]) != len(ys) + 1:
                raise CommandError("bad_input", f"{path} line {line}: timesteps of {row['journey_id']} out of order")
            ys.append(float(row["y"]))
    return {jid: ProxyTrace(jid, np.array(ys)) for jid, ys in series.items()}


def _pair_traces(journeys, traces: dict, source: str):
    missing = [j.journey_id for j in journeys if j.journey_id not in traces]
    if missing:
        raise CommandError("bad_input", f"{source} has no ratings for {len(missing)} journeys, e.g. {missing[0]}")
    out = []
    for j in journeys:
        tr = traces[j.journey_id]
        if len(tr) != len(j):
            raise CommandError("bad_input", f"{source}: trace for {j.journey_id} has {len(tr)} ratings, journey has {len(j)}")
        out.append((j, tr))
    return out


# ---------------------------------------------------------------------------
# subcommands


def cmd_simulate(args, cfg, run: Run) -> Path:
    from ._io import atomic_write_text, canonical_json
    from .clickstream import write_events
    from .sim import funnel_config, generate

    import numpy as np

    out = _out_dir(args, "sim")
    sim_over = {k: v for k, v in cfg.simulate.items() if k not in ("n_journeys", "preset")}
    for k in ("purchase_hazard", "stop_hazard"):
        if k in sim_over:
            sim_over[k] = np.asarray(sim_over[k], dtype=float)
    scfg = funnel_config(seed=cfg.stage_seeds()["simulate"], **sim_over)
    labeled = generate(scfg, int(cfg.simulate["n_journeys"]))
    events = [e for lj in labeled for e in lj.journey.events]
    write_events(out / "events.jsonl", events, scfg.vocab)
    side = "".join(
        canonical_json({"journey_id": lj.journey.journey_id, "regimes": list(lj.regime_path),
                        "true_satisfaction": lj.true_satisfaction}) + "\n"
        for lj in labeled
    )  # fmt: skip
    atomic_write_text(out / "regimes.jsonl", side)
    scfg.vocab.save(out / "vocab.json")
    run.add_artifacts(out / "events.jsonl", out / "regimes.jsonl", out / "vocab.json")
    return run.write_manifest(out / "manifest.json", out)


def cmd_ingest(args, cfg, run: Run) -> Path:
    from .clickstream import ActionVocab, ingest, stitch_journeys, write_journeys

    vocab = ActionVocab.load(run.add_input("vocab", args.vocab))
    events = ingest(run.add_input("events", args.events), vocab)
    journeys = stitch_journeys(events, vocab)
    out = _out_dir(args, "ingested")
    write_journeys(out / "journeys.jsonl", journeys, vocab)
    vocab.save(out / "vocab.json")
    run.add_artifacts(out / "journeys.jsonl", out / "vocab.json")
    return run.write_manifest(out / "manifest.json", out)


def cmd_curate(args, cfg, run: Run) -> Path:
    import warnings

    from .clickstream import ActionVocab, CurationWarning, curate, ingest, read_journeys, save_dataset, stitch_journeys

    d = run.add_input("data", args.data)
    vocab = ActionVocab.load(d / "vocab.json")
    if (d / "journeys.jsonl").exists():
        journeys = read_journeys(d / "journeys.jsonl", vocab)
    elif (d / "events.jsonl").exists():
        journeys = stitch_journeys(ingest(d / "events.jsonl", vocab), vocab)
    else:
        raise CommandError("missing_input", f"{d} has neither journeys.jsonl nor events.jsonl")
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", CurationWarning)
        ds = curate(journeys, vocab, cfg.curation)
    for w in caught:
        print(f"warning: {w.message}", file=sys.stderr)
    out = _out_dir(args, "dataset")
    run.add_artifacts(*save_dataset(out, ds))
    return run.write_manifest(out / "manifest.json", out)


def cmd_train_encoder(args, cfg, run: Run) -> Path:
    from .encoder import train_encoder, write_log_csv

    ds = _load_data(run, args.data)
    params, log = train_encoder(ds.train, ds.vocab.size, cfg.encoder, ds.vocab.digest())
    out = _out_file(args, "encoder.npz")
    params.save(out)
    write_log_csv(_sidecar(out, "log.csv"), log)
    run.add_artifacts(out, _sidecar(out, "log.csv"))
    return run.write_manifest(_sidecar(out, "manifest.json"), out.parent)


def cmd_train_value(args, cfg, run: Run) -> Path:
    from .value import RewardMap, train_values, write_sweep_log

    ds = _load_data(run, args.data)
    enc = _load_encoder(run, args.encoder, ds.vocab)
    try:
        rmap = RewardMap.from_labels(ds.vocab, cfg.rewards)
    except KeyError as exc:
        raise CommandError("config_error", f"rewards: {exc}") from exc
    params, log = train_values(ds.train, enc, cfg.value, rmap)
    out = _out_file(args, "values.npz")
    params.save(out)
    write_sweep_log(_sidecar(out, "log.csv"), log)
    run.add_artifacts(out, _sidecar(out, "log.csv"))
    return run.write_manifest(_sidecar(out, "manifest.json"), out.parent)


def _score(run: Run, args, ds):
    from .value import ValueParams, score_journeys

    enc = _load_encoder(run, args.encoder, ds.vocab)
    vp = ValueParams.load(run.add_input("values", args.values), enc)
    return enc, vp, score_journeys


def cmd_score(args, cfg, run: Run) -> Path:
    ds = _load_data(run, args.data)
    enc, vp, score_journeys = _score(run, args, ds)
    journeys = _split(ds, args.split or "all")
    traces = score_journeys(enc, vp, journeys)
    out = _out_file(args, "scores.csv")
    write_traces_csv(out, journeys, traces, ds.vocab)
    run.add_artifacts(out)
    return run.write_manifest(_sidecar(out, "manifest.json"), out.parent)


def _write_metrics(out: Path, pairs, vocab, cfg) -> list[Path]:
    from ._io import atomic_write_json, atomic_write_text
    from .evaluation import action_identification_report
    from .metrics import pair_scores, z_distribution, z_per_journey

    rows: list[Sequence[Any]] = [("customer_id", "journey_id", "length", "Z")]
    for j, tr in pairs:
        rows.append((j.customer_id, j.journey_id, len(j), _fmt(z_per_journey(tr)) if len(tr) >= 2 else ""))
    atomic_write_text(out / "journeys.csv", _csv(rows))

    strat = pair_scores(pairs, vocab, stratify_by_purchase=True)
    mats = {**strat, "all": strat["purchase"] + strat["no-purchase"]}
    rows = [("source", "target", "stratum", "n", "Z", "ci95")]
    for stratum in ("purchase", "no-purchase", "all"):
        m = mats[stratum]
        z, ci = m.z(), m.ci95()
        for u in range(vocab.size):
            for w in range(vocab.size):
                if m.n[u, w]:
                    rows.append((vocab.label(u), vocab.label(w), stratum, int(m.n[u, w]), _fmt(z[u, w]), _fmt(ci[u, w])))
    atomic_write_text(out / "pairs.csv", _csv(rows))

    report = action_identification_report(strat, vocab, min_n=int(cfg.evaluation["min_n"]))
    rows = [("source", "target", "stratum", "n", "Z", "ci95")]
    rows += [(r.source, r.target, r.stratum, r.n, _fmt(r.z), _fmt(r.ci95)) for r in report.rows]
    atomic_write_text(out / "action_report.csv", _csv(rows))

    dist = z_distribution([tr for _, tr in pairs], cfg.evaluation["length_bins"])
    atomic_write_json(out / "distribution.json", {
        "bins": [b.to_json() for b in dist],
        "populated_cells": {**report.populated, "all": mats["all"].populated},
        "min_n": report.min_n,
    })  # fmt: skip
    return [out / n for n in ("journeys.csv", "pairs.csv", "action_report.csv", "distribution.json")]


def cmd_metrics(args, cfg, run: Run) -> Path:
    ds = _load_data(run, args.data)
    traces = read_traces_csv(run.add_input("traces", args.traces))
    journeys = [j for j in ds.journeys if j.journey_id in traces]
    if not journeys:
        raise CommandError("bad_input", f"{args.traces} matches no journey of {args.data}")
    pairs = _pair_traces(journeys, traces, args.traces)
    out = _out_dir(args, "metrics")
    run.add_artifacts(*_write_metrics(out, pairs, ds.vocab, cfg))
    return run.write_manifest(out / "manifest.json", out)


def _validation(pairs, qs) -> dict:
    from .evaluation import validate_against_survey

    surveyed = [(j, tr) for j, tr in pairs if j.survey_pos is not None]
    return {f"lag{q}": validate_against_survey(surveyed, q).to_json() for q in qs}


def cmd_validate(args, cfg, run: Run) -> Path:
    from ._io import atomic_write_json

    ds = _load_data(run, args.data)
    traces = read_traces_csv(run.add_input("traces", args.traces))
    journeys = [j for j in _split(ds, _split_name(args, cfg)) if j.survey_pos is not None]
    pairs = _pair_traces(journeys, traces, args.traces)
    out = _out_file(args, "report.json")
    split = _split_name(args, cfg)
    atomic_write_json(out, {"split": split, "n_surveyed": len(journeys), **_validation(pairs, cfg.evaluation["q"])})
    run.add_artifacts(out)
    return run.write_manifest(_sidecar(out, "manifest.json"), out.parent)


def _roc_rows(fpr, tpr, thr) -> list[Sequence[Any]]:
    rows: list[Sequence[Any]] = [("threshold", "fpr", "tpr")]
    rows += [(_fmt(t) if t != float("inf") else "inf", _fmt(f), _fmt(p)) for f, p, t in zip(fpr, tpr, thr)]
    return rows


def _split_aucs(pairs) -> dict:
    from .evaluation import purchase_auc, z_scores

    def safe(scores, labels):
        labels = [bool(x) for x in labels]
        return purchase_auc(scores, labels) if labels and 0 < sum(labels) < len(labels) else None

    resp = [(j.survey_score, j.has_purchase) for j, _ in pairs if j.survey_score is not None]
    return {
        "n_journeys": len(pairs),
        "auc_z": safe(z_scores([tr for _, tr in pairs]), [j.has_purchase for j, _ in pairs]),
        "auc_survey": safe([s for s, _ in resp], [p for _, p in resp]),
    }


def _predictions(out: Path, pairs, ds, cfg, encoder, traces: dict) -> list[Path]:
    """ROC CSVs and AUCs for Z (all journeys), survey score (respondents) and the head.

    ``by_split`` repeats the Z and survey AUCs for train and test whenever
    ``traces`` covers that whole split.
    """
    import numpy as np

    from ._io import atomic_write_json, atomic_write_text
    from .evaluation import purchase_auc, purchase_probabilities, roc_points, train_purchase_head, z_scores

    written = []
    labels = np.array([j.has_purchase for j, _ in pairs])
    z = z_scores([tr for _, tr in pairs])
    resp = [(j.survey_score, j.has_purchase) for j, _ in pairs if j.survey_score is not None]
    result: dict[str, Any] = {"n_journeys": len(pairs), "n_purchase": int(labels.sum()), "n_respondents": len(resp)}

    def one(name, scores, labs):
        labs = np.asarray(labs, dtype=bool)
        if labs.size == 0 or labs.all() or not labs.any():
            result[f"auc_{name}"] = None
            return
        result[f"auc_{name}"] = purchase_auc(scores, labs)
        path = out / f"roc_{name}.csv"
        atomic_write_text(path, _csv(_roc_rows(*roc_points(scores, labs))))
        written.append(path)

    one("z", z, labels)
    one("survey", [s for s, _ in resp], [p for _, p in resp])
    if resp:
        mask = np.array([j.survey_score is not None for j, _ in pairs])
        one("z_respondents", z[mask], labels[mask])
    if encoder is not None:
        head = train_purchase_head(ds.train, encoder, cfg.head)
        probs = purchase_probabilities(head, encoder, [j for j, _ in pairs])
        # h_m has already read the Purchase action itself; score the state before it
        one("head", np.array([p[-2] if p.size > 1 else p[-1] for p in probs]), labels)
    by_split = {}
    for name in ("train", "test"):
        scored = [(j, traces[j.journey_id]) for j in _split(ds, name) if j.journey_id in traces]
        if scored and len(scored) == len(_split(ds, name)):
            by_split[name] = _split_aucs(scored)
    result["by_split"] = by_split
    atomic_write_json(out / "auc.json", result)
    written.append(out / "auc.json")
    return written


def cmd_predict(args, cfg, run: Run) -> Path:
    ds = _load_data(run, args.data)
    traces = read_traces_csv(run.add_input("traces", args.traces))
    pairs = _pair_traces(_split(ds, _split_name(args, cfg)), traces, args.traces)
    enc = _load_encoder(run, args.encoder, ds.vocab) if args.encoder else None
    out = _out_dir(args, "predict")
    run.add_artifacts(*_predictions(out, pairs, ds, cfg, enc, traces))
    return run.write_manifest(out / "manifest.json", out)


def cmd_report(args, cfg, run: Run) -> Path:
    import numpy as np

    from ._io import atomic_write_json
    from .evaluation import correlation_study, purchase_probabilities, train_purchase_head

    ds = _load_data(run, args.data)
    enc, vp, score_journeys = _score(run, args, ds)
    split = _split_name(args, cfg)
    journeys = _split(ds, split)
    traces = score_journeys(enc, vp, journeys)
    pairs = list(zip(journeys, traces))
    out = _out_dir(args, "report")
    write_traces_csv(out / "scores.csv", journeys, traces, ds.vocab)
    files = [out / "scores.csv", *_write_metrics(out, pairs, ds.vocab, cfg)]
    atomic_write_json(out / "validation.json", {"split": split, **_validation(pairs, cfg.evaluation["q"])})
    files.append(out / "validation.json")
    files += _predictions(out, pairs, ds, cfg, enc, {tr.journey_ref: tr for tr in traces})

    head = train_purchase_head(ds.train, enc, cfg.head)
    probs = purchase_probabilities(head, enc, journeys)
    study = correlation_study(traces, probs, cfg.evaluation["length_bins"])

    def summary(corrs):
        c = np.array([v for v in corrs if v is not None])
        return {"n": int(c.size), "mean": float(c.mean()) if c.size else None,
                "median": float(np.median(c)) if c.size else None}  # fmt: skip

    atomic_write_json(out / "correlation.json", {
        "rating": {**summary(study.corr_rating), "excluded": study.excluded_rating,
                   "bins": [b.__dict__ for b in study.bins_rating]},
        "prefix_z": {**summary(study.corr_prefix_z), "excluded": study.excluded_prefix_z,
                     "bins": [b.__dict__ for b in study.bins_prefix_z]},
    })  # fmt: skip
    files.append(out / "correlation.json")
    if ds.report is not None:
        atomic_write_json(out / "curation.json", ds.report.to_json())
        files.append(out / "curation.json")
    run.add_artifacts(*files)
    return run.write_manifest(out / "manifest.json", out)


# inputs each subcommand needs, from flags or the config's paths section
REQUIRED = {
    "ingest": ("events", "vocab"),
    "curate": ("data",),
    "train-encoder": ("data",),
    "train-value": ("data", "encoder"),
    "score": ("data", "encoder", "values"),
    "metrics": ("data", "traces"),
    "validate": ("data", "traces"),
    "predict": ("data", "traces"),
    "report": ("data", "encoder", "values"),
}


def _resolve_paths(args, cfg) -> None:
    for key, val in cfg.paths.items():
        if hasattr(args, key) and getattr(args, key) is None:
            setattr(args, key, val)
    missing = [f"--{k}" for k in REQUIRED.get(args.command, ()) if getattr(args, k, None) is None]
    if missing:
        raise CommandError("usage", f"{args.command} needs {', '.join(missing)} (flag or paths section)")


COMMANDS: dict[str, Callable] = {
    "simulate": cmd_simulate,
    "ingest": cmd_ingest,
    "curate": cmd_curate,
    "train-encoder": cmd_train_encoder,
    "train-value": cmd_train_value,
    "score": cmd_score,
    "metrics": cmd_metrics,
    "validate": cmd_validate,
    "predict": cmd_predict,
    "report": cmd_report,
}


# ---------------------------------------------------------------------------
# entry point


def _report_error(kind: str, message: str, problems: Sequence[str], as_json: bool) -> None:
    if as_json:
        print(json.dumps({"error": kind, "message": message, "problems": list(problems)}), file=sys.stderr)
        return
    print(f"error: {message}", file=sys.stderr)
    for p in problems:
        print(f"  - {p}", file=sys.stderr)


def main(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    as_json = "--json-errors" in argv
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        _report_error("usage", str(exc), [], as_json)
        return 2
    if args.threads is not None:
        if args.threads < 1:
            _report_error("usage", "--threads must be >= 1", [], as_json)
            return 2
        for var in THREAD_VARS:
            os.environ[var] = str(args.threads)

    from .clickstream import ConfigError, IngestError
    from .encoder import CheckpointMismatch, EncoderTrainingError
    from .value import ValueLearningError

    try:
        cfg = _effective_config(args)
        _resolve_paths(args, cfg)
        run = Run(args.command, cfg, args.threads)
        manifest = COMMANDS[args.command](args, cfg, run)
    except ConfigError as exc:
        _report_error("config_error", "invalid configuration", exc.problems, as_json)
        return 2
    except CommandError as exc:
        _report_error(exc.kind, str(exc), exc.problems, as_json)
        return 1
    except IngestError as exc:
        _report_error("ingest_error", str(exc), [], as_json)
        return 1
    except CheckpointMismatch as exc:
        _report_error("checkpoint_mismatch", str(exc), [], as_json)
        return 1
    except (EncoderTrainingError, ValueLearningError) as exc:
        _report_error("training_error", str(exc), [], as_json)
        return 1
    except (OSError, ValueError, KeyError) as exc:
        _report_error(type(exc).__name__, str(exc), [], as_json)
        if os.environ.get("PROXYRATING_DEBUG"):
            traceback.print_exc()
        return 1
    print(manifest)
    return 0


if __name__ == "__main__":
    sys.exit(main())
