import numpy as np
import pytest

from proxyrating.clickstream import ConfigError, stitch_journeys
from proxyrating.sim import (
    FUNNEL_ACTIONS,
    TabularMRP,
    bellman_residual,
    exact_values,
    funnel_config,
    generate,
    journeys_from_mrp,
    monte_carlo_returns,
    mrp_vocab,
    random_mrp,
    sample_transitions,
)


@pytest.fixture(scope="module")
def funnel():
    return funnel_config(seed=3)


@pytest.fixture(scope="module")
def corpus(funnel):
    return generate(funnel, 800)


class TestSimConfig:
    def test_rows_must_sum_to_one(self, funnel):
        bad = funnel.transition.copy()
        bad[0, 0, 0] += 1e-6
        with pytest.raises(ConfigError, match="sum to 1"):
            funnel_config(transition=bad)

    def test_probabilities_in_range(self):
        with pytest.raises(ConfigError):
            funnel_config(purchase_hazard=np.array([0.2, 1.2]))
        with pytest.raises(ConfigError):
            funnel_config(regime_switch_prob=-0.1)

    def test_degenerate_hazards(self, funnel):
        with pytest.raises(ConfigError, match="degenerate"):
            funnel_config(purchase_hazard=np.zeros(2), stop_hazard=None, max_len=None)

    def test_funnel_shape(self, funnel):
        assert funnel.vocab.names == FUNNEL_ACTIONS and funnel.vocab.size == 20
        assert funnel.purchase_hazard[1] > funnel.purchase_hazard[0]


class TestGenerate:
    def test_forced_purchase(self, funnel):
        cfg = funnel_config(purchase_hazard=np.ones(2), purchase_affinity=None)
        out = generate(cfg, 50)
        assert all(len(lj.journey) == 1 and lj.journey.has_purchase for lj in out)

    def test_no_popups_no_surveys(self):
        out = generate(funnel_config(survey_popup_prob=0.0), 300)
        assert all(lj.journey.survey_pos is None for lj in out)

    def test_journey_invariants(self, corpus, funnel):
        v = funnel.vocab
        for lj in corpus:
            j = lj.journey
            acts = list(j.actions)
            assert len(lj.regime_path) == len(j)
            assert 0.0 <= lj.true_satisfaction <= 1.0
            assert v.purchase_id not in acts[:-1]
            assert j.has_purchase == (acts[-1] == v.purchase_id)
            ts = [e.timestamp for e in j.events]
            assert ts == sorted(ts)
            assert acts.count(v.survey_id) <= 1
            if j.survey_pos is not None:
                assert 0 <= j.survey_score <= 10
            assert len(j) <= funnel.max_len

    def test_deterministic_and_prefix_stable(self, funnel, corpus):
        again = generate(funnel, 800)
        assert [lj.journey for lj in again] == [lj.journey for lj in corpus]
        head = generate(funnel, 100)
        assert [lj.journey for lj in head] == [lj.journey for lj in corpus[:100]]

    def test_stitching_recovers_journeys(self, corpus, funnel):
        events = [e for lj in corpus for e in lj.journey.events]
        stitched = stitch_journeys(events, funnel.vocab)
        by_id = {j.journey_id: j for j in stitched}
        assert len(stitched) == len(corpus)
        for lj in corpus:
            assert by_id[lj.journey.journey_id] == lj.journey

    def test_survey_score_tracks_regime(self):
        cfg = funnel_config(seed=11, survey_popup_prob=0.3)
        scores = {0: [], 1: []}
        for lj in generate(cfg, 4000):
            j = lj.journey
            if j.survey_pos is not None:
                scores[lj.regime_path[j.survey_pos]].append(j.survey_score)
        means = cfg.survey_score_dist @ np.arange(11)
        assert np.mean(scores[1]) > np.mean(scores[0])
        for r in (0, 1):
            se = np.std(scores[r]) / np.sqrt(len(scores[r]))
            assert abs(np.mean(scores[r]) - means[r]) < 4 * se

    def test_skip_forces_poor_regime(self, corpus, funnel):
        v = funnel.vocab
        home, detail = v.index("Home"), v.index("ProductDetail")
        seen = 0
        for lj in corpus:
            a = lj.journey.actions
            for t in range(1, len(a)):
                if a[t - 1] == home and a[t] == detail:
                    assert lj.regime_path[t] == 0
                    seen += 1
        assert seen > 0

    def test_purchase_rate_by_regime(self, corpus):
        start = {0: [], 1: []}
        for lj in corpus:
            start[lj.regime_path[0]].append(lj.journey.has_purchase)
        assert np.mean(start[1]) > np.mean(start[0]) + 0.2


class TestExactValues:
    def test_zero_reward(self):
        mrp = random_mrp(5, np.random.default_rng(0))
        mrp.r[:] = 0
        np.testing.assert_array_equal(exact_values(mrp), 0.0)

    def test_two_state_chain(self):
        P = np.array([[0.0, 1.0], [0.0, 1.0]])
        r = np.array([0.0, 1.0])
        # episodic: entering the terminal pays 1, nothing after
        ep = exact_values(TabularMRP(P, r, 0.9, np.array([False, True])))
        np.testing.assert_allclose(ep, [1.0, 0.0], atol=1e-12)
        # continuing absorbing state: V1 = 1 / (1 - 0.9) = 10, V0 = 1 + 0.9 * 10 = 10
        cont = exact_values(TabularMRP(P, r, 0.9))
        np.testing.assert_allclose(cont, [10.0, 10.0], atol=1e-10)

    @pytest.mark.parametrize("seed", range(5))
    def test_fixed_point(self, seed):
        rng = np.random.default_rng(seed)
        mrp = random_mrp(6, rng, n_terminal=seed % 3)
        assert bellman_residual(mrp, exact_values(mrp)) < 1e-9

    def test_monte_carlo_agreement(self):
        rng = np.random.default_rng(7)
        mrp = random_mrp(5, rng, gamma=0.9)
        V = exact_values(mrp)
        for s in range(5):
            g = monte_carlo_returns(mrp, s, 10_000, 200, rng)
            assert abs(g.mean() - V[s]) < 3 * g.std() / np.sqrt(g.size) + 0.9**200 * 10

    def test_gamma_validation(self):
        with pytest.raises(ConfigError):
            TabularMRP(np.eye(2), np.zeros(2), 1.0)


class TestMrpJourneys:
    def test_absorbing_chain_ends_absorbed(self):
        P = np.array([[0.0, 1.0, 0.0], [0.0, 0.0, 1.0], [0.0, 0.0, 1.0]])
        mrp = TabularMRP(P, np.array([0.0, 0.0, 1.0]), 0.9, np.array([False, False, True]))
        js = journeys_from_mrp(mrp, 20, seed=0)
        v = mrp_vocab(mrp)
        assert all(j.actions[-1] == 2 and j.has_purchase for j in js)
        assert v.label(2) == "Purchase"

    def test_empty(self):
        assert journeys_from_mrp(random_mrp(4, np.random.default_rng(0)), 0, seed=1) == []

    def test_transition_frequencies(self):
        mrp = random_mrp(5, np.random.default_rng(2))
        js = journeys_from_mrp(mrp, 50, seed=3, max_len=1001)
        counts = np.zeros((5, 5))
        for j in js:
            np.add.at(counts, (j.actions[:-1], j.actions[1:]), 1)
        assert counts.sum() >= 50_000
        freq = counts / counts.sum(axis=1, keepdims=True)
        assert np.max(np.abs(freq - mrp.P)) < 0.02

    def test_sampled_transitions_follow_P(self):
        mrp = random_mrp(4, np.random.default_rng(5), n_terminal=1)
        src, dst = sample_transitions(mrp, 60_000, np.random.default_rng(6))
        assert not mrp.terminal[src].any()
        for s in range(3):
            freq = np.bincount(dst[src == s], minlength=4) / (src == s).sum()
            assert np.max(np.abs(freq - mrp.P[s])) < 0.02

    def test_vocab_too_small(self):
        from proxyrating.clickstream import ActionVocab

        with pytest.raises(ValueError):
            journeys_from_mrp(random_mrp(5, np.random.default_rng(0)), 3, 0, vocab=ActionVocab.from_labels(["Purchase", "Survey"]))
