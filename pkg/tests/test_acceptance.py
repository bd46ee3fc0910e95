"""Acceptance criteria 1-10, one test per criterion.

Each test records a PASS/FAIL line; the lines are printed together at the
end of the pytest run (see ``pytest_terminal_summary`` in conftest.py).
"""

import contextlib
import csv
import itertools
import json
import time
from fractions import Fraction
from pathlib import Path

import numpy as np
import pytest

from proxyrating.cli import main, read_traces_csv
from proxyrating.clickstream import ActionVocab, Journey, load_dataset
from proxyrating.encoder import EncoderConfig, init_params, loss_and_grads, pad_batch
from proxyrating.evaluation import purchase_auc, validate_against_survey
from proxyrating.metrics import ProxyTrace, lag_indicator, pair_scores, z_per_journey, z_prefix
from proxyrating.sim import exact_values, random_mrp
from proxyrating.value import RewardMap, StateRep, ValueConfig, fit_mrp, init_value_params, state_values, td_update, value

from conftest import SMALL_LABELS, random_journeys

RESULTS: dict[int, str] = {}


@contextlib.contextmanager
def criterion(number: int, title: str):
    """Record PASS when the block completes, FAIL with the reason otherwise."""
    details: list[str] = []
    try:
        yield details
    except BaseException as exc:
        RESULTS[number] = f"criterion {number:>2} FAIL  {title}: {type(exc).__name__}: {str(exc).splitlines()[0] if str(exc) else ''}"
        raise
    RESULTS[number] = f"criterion {number:>2} PASS  {title}" + (f" ({'; '.join(details)})" if details else "")


def mrps():
    return [random_mrp(5, np.random.default_rng(1000 + s), gamma=0.9) for s in range(10)]


# ---------------------------------------------------------------------------
# 1-3: learning and gradients


def test_c01_tabular_td_matches_oracle():
    with criterion(1, "tabular TD vs exact values, max error <= 0.02, < 10 s") as d:
        cfg = dict(gamma=0.9, alpha=2.5, estimator="tabular", batch_size=50, max_sweeps=200, tol=None, average_after=0.2)
        t0 = time.perf_counter()
        errs = []
        for s, mrp in enumerate(mrps()):
            params, log = fit_mrp(mrp, ValueConfig(seed=s, **cfg), transitions_per_sweep=2000, seed=s)
            assert len(log) <= 200
            errs.append(float(np.max(np.abs(state_values(params) - exact_values(mrp)))))
        elapsed = time.perf_counter() - t0
        d += [f"worst {max(errs):.4f}", f"{elapsed:.1f} s"]
        assert max(errs) <= 0.02, errs
        assert elapsed < 10.0


def test_c02_function_approximation_td():
    with criterion(2, "default (mlp) estimator TD on one-hot states, max error <= 0.05") as d:
        errs = []
        for s, mrp in enumerate(mrps()):
            cfg = ValueConfig(gamma=0.9, alpha=0.2, batch_size=50, max_sweeps=200, tol=None, average_after=0.5, seed=s)
            assert cfg.estimator == ValueConfig().estimator
            params, _ = fit_mrp(mrp, cfg, transitions_per_sweep=2000, seed=s)
            errs.append(float(np.max(np.abs(state_values(params) - exact_values(mrp)))))
        d.append(f"worst {max(errs):.4f}")
        assert max(errs) <= 0.05, errs


def _relative(num, ana):
    return abs(num - ana) / max(abs(num), abs(ana), 1e-7)


def _encoder_fd(cell, rng, n_coords=20, eps=1e-5):
    p = init_params(8, EncoderConfig(embed_dim=8, hidden_dim=8, cell=cell, seed=2))
    for b in p.blocks().values():
        b += rng.normal(0, 0.3, size=b.shape)
    X, lengths = pad_batch([rng.integers(0, 8, size=L) for L in (6, 5, 3)])
    _, _, grads = loss_and_grads(p, X, lengths)
    inputs = np.unique(np.concatenate([X[k, : lengths[k] - 1] for k in range(len(lengths))]))
    worst = 0.0
    names = sorted(grads)
    for k in range(n_coords):
        name = names[k % len(names)]
        block = getattr(p, name)
        if name == "embedding":
            idx = (int(rng.choice(inputs)), int(rng.integers(block.shape[1])))
        else:
            idx = tuple(int(rng.integers(s)) for s in block.shape)
        old = block[idx]
        block[idx] = old + eps
        up = loss_and_grads(p, X, lengths, need_grads=False)[0]
        block[idx] = old - eps
        down = loss_and_grads(p, X, lengths, need_grads=False)[0]
        block[idx] = old
        worst = max(worst, _relative((up - down) / (2 * eps), grads[name][idx]))
    return worst


def _value_fd(estimator, rng, n_coords=20, eps=1e-6):
    p = init_value_params(8, 8, ValueConfig(estimator=estimator, width=8, seed=3))
    for b in p.blocks.values():
        b += rng.normal(0, 0.3, size=b.shape)
    H, a, w = rng.normal(size=(5, 8)), rng.integers(0, 8, size=5), rng.normal(size=5)
    grads = p.gradients(H, a, w)
    names = sorted(p.blocks)
    worst = 0.0
    for k in range(n_coords):
        name = names[k % len(names)]
        block = p.blocks[name]
        idx = tuple(int(rng.integers(s)) for s in block.shape)
        old = block[idx]
        block[idx] = old + eps
        up = float(w @ p.predict(H, a))
        block[idx] = old - eps
        down = float(w @ p.predict(H, a))
        block[idx] = old
        worst = max(worst, _relative((up - down) / (2 * eps), grads[name][idx]))
    return worst


def test_c03_gradient_correctness():
    with criterion(3, "analytic vs central-difference gradients, rel error <= 1e-4, < 5 s") as d:
        rng = np.random.default_rng(31)
        t0 = time.perf_counter()
        worst = {
            "lstm": _encoder_fd("lstm", rng),
            "rnn": _encoder_fd("rnn", rng),
            "linear value": _value_fd("linear", rng),
            "mlp value": _value_fd("mlp", rng),
        }
        elapsed = time.perf_counter() - t0
        d += [f"worst {max(worst.values()):.1e}", f"{elapsed:.2f} s"]
        assert all(v <= 1e-4 for v in worst.values()), worst
        assert elapsed < 5.0


# ---------------------------------------------------------------------------
# 4-6: metric fixtures, oracles and invariances


def test_c04_worked_examples():
    with criterion(4, "worked metric fixtures 11/19 and 0.35, single TD step 0.1"):
        ups = [1] * 11 + [0] * 8
        y = np.concatenate([[0.0], np.cumsum(np.where(ups, 1.0, -0.5))])
        assert y.size == 20
        assert z_per_journey(y) == 11 / 19

        v = ActionVocab.from_labels(SMALL_LABELS)
        pairs = []
        for k in range(1000):
            j = Journey.from_actions([0, 2], v, customer_id=f"c{k}")
            pairs.append((j, ProxyTrace(j.journey_id, [0.0, 1.0 if k < 350 else -1.0])))
        m = pair_scores(pairs, v, stratify_by_purchase=False)["all"]
        assert (m.n[0, 2], m.z_sum[0, 2]) == (1000, 350)
        assert m.z()[0, 2] == 0.35

        p = init_value_params(v.size, 0, ValueConfig(estimator="tabular"))
        s = StateRep(np.zeros(0), 0)
        td_update(p, s, StateRep(np.zeros(0), v.purchase_id), RewardMap.purchase(v), ValueConfig(gamma=0.9, alpha=0.1, estimator="tabular"))
        assert value(p, s) == 0.1


def _naive_confusion(pairs, q):
    counts = {"tp": 0, "fp": 0, "tn": 0, "fn": 0}
    for j, tr in pairs:
        p, score = j.survey_pos, j.survey_score
        if score == 5 or p <= q:
            continue
        pred = tr.y[p - 1] > tr.y[p - 1 - q]
        good = score >= 6
        counts[("t" if pred == good else "f") + ("p" if pred else "n")] += 1
    return counts


def _brute_auc(scores, labels):
    pos = [s for s, l in zip(scores, labels) if l]
    neg = [s for s, l in zip(scores, labels) if not l]
    wins = sum(Fraction(1) if a > b else Fraction(1, 2) if a == b else Fraction(0) for a, b in itertools.product(pos, neg))
    return float(wins / (len(pos) * len(neg)))


@pytest.fixture(scope="module")
def synthetic():
    rng = np.random.default_rng(2024)
    v = ActionVocab.from_labels(SMALL_LABELS)
    journeys = random_journeys(rng, v, 1000, max_len=40)
    traces = [ProxyTrace(j.journey_id, rng.integers(0, 5, size=len(j)).astype(float)) for j in journeys]
    return v, journeys, traces


def test_c05_brute_force_equivalence(synthetic):
    with criterion(5, "Z, pair matrices, confusion metrics and AUC equal naive recomputation"):
        v, journeys, traces = synthetic
        for tr in traces:
            ups = sum(tr.y[t] > tr.y[t - 1] for t in range(1, len(tr)))
            assert abs(z_per_journey(tr) - ups / (len(tr) - 1)) <= 1e-12

        n = np.zeros((v.size, v.size), int)
        up = np.zeros((v.size, v.size), int)
        for j, tr in zip(journeys, traces):
            for t in range(1, len(j)):
                n[j.actions[t - 1], j.actions[t]] += 1
                up[j.actions[t - 1], j.actions[t]] += int(tr.y[t] > tr.y[t - 1])
        m = pair_scores(list(zip(journeys, traces)), v, stratify_by_purchase=False)["all"]
        np.testing.assert_array_equal(m.n, n)
        np.testing.assert_array_equal(m.z_sum, up)
        with np.errstate(invalid="ignore", divide="ignore"):
            assert np.nanmax(np.abs(m.z() - up / n)) <= 1e-12

        surveyed = [(j, tr) for j, tr in zip(journeys, traces) if j.survey_pos is not None]
        for q in (1, 2):
            rep = validate_against_survey(surveyed, q)
            c = _naive_confusion(surveyed, q)
            assert (rep.tp, rep.fp, rep.tn, rep.fn) == (c["tp"], c["fp"], c["tn"], c["fn"])
            tot = sum(c.values())
            assert abs(rep.accuracy - (c["tp"] + c["tn"]) / tot) <= 1e-12
            assert abs(rep.precision - c["tp"] / (c["tp"] + c["fp"])) <= 1e-12
            assert abs(rep.recall - c["tp"] / (c["tp"] + c["fn"])) <= 1e-12
            prec, rec = c["tp"] / (c["tp"] + c["fp"]), c["tp"] / (c["tp"] + c["fn"])
            assert abs(rep.f1 - 2 * prec * rec / (prec + rec)) <= 1e-12

        zs = [z_per_journey(tr) for tr in traces[:500]]
        labels = [j.has_purchase for j in journeys[:500]]
        assert abs(purchase_auc(zs, labels) - _brute_auc(zs, labels)) <= 1e-12


def test_c06_invariances(synthetic):
    with criterion(6, "metrics and AUC invariant under increasing transforms; strata sum"):
        v, journeys, traces = synthetic
        transforms = [lambda y: 2.0 * y + 3.0, lambda y: np.exp(y), lambda y: np.arctan(y - 2.0), lambda y: y**3]
        pairs = list(zip(journeys, traces))
        base_pairs = pair_scores(pairs, v)
        surveyed = [(j, tr) for j, tr in pairs if j.survey_pos is not None]
        base_val = [validate_against_survey(surveyed, q).to_json() for q in (1, 2)]
        zs = np.array([z_per_journey(tr) for tr in traces])
        labels = [j.has_purchase for j in journeys]
        for f in transforms:
            warped = [(j, ProxyTrace(tr.journey_ref, f(tr.y))) for j, tr in pairs]
            for (_, a), (_, b) in zip(pairs, warped):
                assert z_per_journey(a) == z_per_journey(b)
                np.testing.assert_array_equal(z_prefix(a), z_prefix(b))
                assert all(lag_indicator(a, t, 1) == lag_indicator(b, t, 1) for t in range(1, len(a)))
            for k, mat in pair_scores(warped, v).items():
                np.testing.assert_array_equal(mat.z_sum, base_pairs[k].z_sum)
                np.testing.assert_array_equal(mat.n, base_pairs[k].n)
            w_surveyed = [(j, tr) for j, tr in warped if j.survey_pos is not None]
            assert [validate_against_survey(w_surveyed, q).to_json() for q in (1, 2)] == base_val
            assert purchase_auc(f(zs), labels) == purchase_auc(zs, labels)
        total = pair_scores(pairs, v, stratify_by_purchase=False)["all"]
        both = base_pairs["purchase"] + base_pairs["no-purchase"]
        np.testing.assert_array_equal(both.n, total.n)
        np.testing.assert_array_equal(both.z_sum, total.z_sum)


# ---------------------------------------------------------------------------
# 7-10: the synthetic end-to-end pipeline


def _pipeline(root: Path) -> float:
    t0 = time.perf_counter()
    c = ["--config", "small"]
    steps = [
        ["simulate", *c, "--out", root / "sim"],
        ["curate", *c, "--data", root / "sim", "--out", root / "data"],
        ["train-encoder", *c, "--data", root / "data", "--out", root / "model" / "encoder.npz"],
        ["train-value", *c, "--data", root / "data", "--encoder", root / "model" / "encoder.npz",
         "--out", root / "model" / "values.npz"],
        ["score", *c, "--data", root / "data", "--encoder", root / "model" / "encoder.npz",
         "--values", root / "model" / "values.npz", "--out", root / "scores" / "scores.csv"],
        ["metrics", *c, "--data", root / "data", "--traces", root / "scores" / "scores.csv", "--out", root / "metrics"],
        ["validate", *c, "--data", root / "data", "--traces", root / "scores" / "scores.csv",
         "--out", root / "validate" / "report.json"],
        ["predict", *c, "--data", root / "data", "--traces", root / "scores" / "scores.csv", "--out", root / "predict"],
    ]  # fmt: skip
    for argv in steps:
        code = main([str(a) for a in argv])
        assert code == 0, f"{argv[0]} exited with {code}"
    return time.perf_counter() - t0


@pytest.fixture(scope="session")
def pipeline_runs(tmp_path_factory):
    roots = [tmp_path_factory.mktemp(f"acceptance_run{k}") for k in (1, 2)]
    times = [_pipeline(r) for r in roots]
    return roots, times


def _pair_z(path: Path, source: str, target: str, stratum: str = "all"):
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            if (row["source"], row["target"], row["stratum"]) == (source, target, stratum):
                return float(row["Z"]), int(row["n"])
    return None, 0


@pytest.mark.slow
def test_c07_end_to_end_synthetic(pipeline_runs):
    with criterion(7, "5000-journey pipeline: Z AUC > 0.60 and above survey AUC, < 10 min") as d:
        (root, _), (elapsed, _) = pipeline_runs
        sim_manifest = json.loads((root / "sim" / "manifest.json").read_text())
        assert sim_manifest["config"]["simulate"]["n_journeys"] == 5000
        assert len(json.loads((root / "sim" / "vocab.json").read_text())["actions"]) == 20
        auc = json.loads((root / "predict" / "auc.json").read_text())
        d += [f"AUC Z {auc['auc_z']:.3f}", f"AUC survey {auc['auc_survey']:.3f}", f"{elapsed:.0f} s"]
        assert auc["auc_z"] > 0.60
        assert auc["auc_z"] > auc["auc_survey"]
        assert elapsed < 600
        # the planted funnel skip lands among the lowest pair scores
        z_skip, n_skip = _pair_z(root / "metrics" / "pairs.csv", "Home", "ProductDetail")
        z_funnel, _ = _pair_z(root / "metrics" / "pairs.csv", "Home", "ProductCategory")
        d.append(f"Z(Home,ProductDetail) {z_skip:.3f} over {n_skip}")
        assert n_skip >= 20 and z_skip <= 0.1
        assert z_funnel > 0.5


@pytest.mark.slow
def test_c08_curation_invariants(pipeline_runs):
    with criterion(8, "curated lengths in [10, 210], purchase ratio 1:2 +-10%, train split 75% +-2%") as d:
        (root, _), _ = pipeline_runs
        ds = load_dataset(root / "data")
        journeys = ds.train + ds.test
        assert all(10 <= len(j) <= 210 for j in journeys)
        n_purchase = sum(j.has_purchase for j in journeys)
        ratio = n_purchase / (len(journeys) - n_purchase)
        frac = len(ds.train) / len(journeys)
        d += [f"ratio {ratio:.3f}", f"train {frac:.3f}", f"n {len(journeys)}"]
        assert abs(ratio - 0.5) <= 0.05
        assert abs(frac - 0.75) <= 0.02


@pytest.mark.slow
def test_c09_determinism(pipeline_runs):
    with criterion(9, "two seeded pipeline runs give byte-identical metric CSVs and manifests") as d:
        (a, b), _ = pipeline_runs
        metric_files = sorted(p.relative_to(a) for p in (a / "metrics").glob("*.csv"))
        manifests = sorted(p.relative_to(a) for p in a.rglob("*manifest.json"))
        assert len(metric_files) == 3 and len(manifests) == 8
        for rel in metric_files + manifests:
            assert (a / rel).read_bytes() == (b / rel).read_bytes(), rel
        d.append(f"{len(metric_files)} CSVs, {len(manifests)} manifests")


@pytest.mark.slow
def test_c10_truncation_invariance(pipeline_runs, synthetic):
    with criterion(10, "survey validation unchanged when traces are cut after the last pre-survey action") as d:
        (root, _), _ = pipeline_runs
        ds = load_dataset(root / "data")
        traces = read_traces_csv(root / "scores" / "scores.csv")
        real = [(j, traces[j.journey_id]) for j in ds.test if j.survey_pos is not None]
        _, sj, st = synthetic
        fake = [(j, tr) for j, tr in zip(sj, st) if j.survey_pos is not None]
        for pairs in (real, fake):
            cut = [(j, tr.truncated(j.survey_pos)) for j, tr in pairs]
            noisy = [(j, ProxyTrace(tr.journey_ref, np.concatenate([tr.y[: j.survey_pos], -tr.y[j.survey_pos :] * 1e3])))
                     for j, tr in pairs]  # fmt: skip
            for q in (1, 2):
                full = validate_against_survey(pairs, q).to_json()
                assert validate_against_survey(cut, q).to_json() == full
                assert validate_against_survey(noisy, q).to_json() == full
        d.append(f"{len(real)} simulated respondents, {len(fake)} random")
