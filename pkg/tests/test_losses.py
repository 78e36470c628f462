import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.special import expit

from prefclass import losses
from prefclass.data import Pair, RankedList, ScoredPair
from prefclass.errors import InvalidRecordError, MissingScoreError, UnsupportedFormError
from prefclass.losses import (ClassProb, LabelSpec, ce_excess, ce_loss, classifier_prob_list,
                              classifier_prob_pair, list_loss_pl, make_labels, preset,
                              preset_loss, slr_loss)
from prefclass.model import ModelPair, PolicyModel

from conftest import worked_pair


def random_pair(rng, k=6, n=1, spread=1.0):
    ref = rng.normal(size=(n, k))
    return ModelPair(PolicyModel.tabular(ref + spread * rng.normal(size=(n, k))),
                     PolicyModel.tabular(ref))


def explicit_ratios(pair):
    return pair.theta.probs() / pair.ref.probs()


def model_from_probs(p):
    p = np.asarray(p, dtype=float)
    return ClassProb(np.log(p), np.log(p))


class TestClassifierProbPair:
    def test_equal_policies(self, rng):
        ref = PolicyModel.tabular(rng.normal(size=(1, 4)))
        p = classifier_prob_pair(ModelPair.from_reference(ref), 0.3, Pair(0, 0, 1))
        assert (p.p_w, p.p_l) == (0.5, 0.5)

    def test_worked_example(self):
        p = classifier_prob_pair(worked_pair(), 1.0, Pair(0, 0, 1))
        assert p.p_w == pytest.approx(10 / 11, rel=1e-12)
        assert p.p_l == pytest.approx(1 / 11, rel=1e-12)

    def test_naive_formula(self, rng):
        for _ in range(200):
            pair = random_pair(rng)
            beta = float(rng.uniform(0.1, 3))
            w, l = rng.choice(6, 2, replace=False)
            a = explicit_ratios(pair)[0]
            want = a[w] ** beta / (a[w] ** beta + a[l] ** beta)
            got = classifier_prob_pair(pair, beta, Pair(0, int(w), int(l)))
            assert got.p_w == pytest.approx(want, rel=1e-10)
            assert got.p_l == pytest.approx(1 - want, rel=1e-9)

    def test_loser_probability_not_from_subtraction(self):
        # with a huge margin p_l must stay positive and accurate rather than 1 - 1 = 0
        pair = ModelPair(PolicyModel.tabular([[40.0, -40.0]]), PolicyModel.tabular([[0.0, 0.0]]))
        p = classifier_prob_pair(pair, 1.0, Pair(0, 0, 1))
        assert p.p_l > 0
        assert p.log_p[1] == pytest.approx(-80.0, rel=1e-12)

    def test_beta_positive(self):
        with pytest.raises(ValueError):
            classifier_prob_pair(worked_pair(), 0.0, Pair(0, 0, 1))


class TestClassifierProbList:
    def test_equal_policies_uniform(self, rng):
        pair = ModelPair.from_reference(PolicyModel.tabular(rng.normal(size=(1, 5))))
        np.testing.assert_allclose(classifier_prob_list(pair, 1.0, (0, [0, 2, 4])).probs,
                                   1 / 3, rtol=1e-14)

    def test_two_candidates_match_pair(self, rng):
        pair = random_pair(rng)
        a = classifier_prob_list(pair, 0.7, (0, [3, 1])).probs
        b = classifier_prob_pair(pair, 0.7, Pair(0, 3, 1)).probs
        np.testing.assert_allclose(a, b, rtol=1e-14)

    def test_naive_softmax(self, rng):
        for _ in range(100):
            pair = random_pair(rng)
            beta = float(rng.uniform(0.1, 3))
            ys = rng.choice(6, 5, replace=False)
            powered = explicit_ratios(pair)[0, ys] ** beta
            got = classifier_prob_list(pair, beta, RankedList(0, tuple(ys))).probs
            np.testing.assert_allclose(got, powered / powered.sum(), rtol=1e-10)
            assert got.sum() == pytest.approx(1.0, abs=1e-12)

    def test_duplicates(self, rng):
        with pytest.raises(InvalidRecordError):
            classifier_prob_list(random_pair(rng), 1.0, (0, [1, 1]))


class TestMakeLabels:
    def test_hard(self):
        np.testing.assert_array_equal(make_labels(LabelSpec.hard(), None).probs, [1.0, 0.0])

    def test_ipo(self):
        t = make_labels(LabelSpec.ipo(), None)
        np.testing.assert_allclose(t.probs, [0.6224593, 0.3775407], atol=1e-7)
        assert t.log_odds == 0.5

    def test_soft(self):
        np.testing.assert_allclose(make_labels(LabelSpec.soft(1 / 11), None).probs,
                                   [10 / 11, 1 / 11], rtol=1e-15)

    def test_soft_eps_range(self):
        with pytest.raises(ValueError):
            LabelSpec.soft(0.5)
        with pytest.raises(ValueError):
            LabelSpec.soft(0.0)

    def test_score_equal(self):
        t = make_labels(LabelSpec.score_derived(), ScoredPair(0, 0, 1, 0.3, 0.3))
        np.testing.assert_array_equal(t.probs, [0.5, 0.5])

    def test_score_either_order(self):
        t = make_labels(LabelSpec.score_derived(), ScoredPair(0, 0, 1, -1.0, 1.0))
        assert t.probs[0] < t.probs[1]
        assert t.log_odds == -2.0

    def test_score_needs_scores(self):
        with pytest.raises(MissingScoreError):
            make_labels(LabelSpec.score_derived(), Pair(0, 0, 1))

    @settings(max_examples=50, deadline=None)
    @given(st.floats(1e-6, 0.5 - 1e-6, exclude_max=True))
    def test_on_simplex(self, eps):
        for spec in (LabelSpec.hard(), LabelSpec.soft(eps), LabelSpec.ipo()):
            p = make_labels(spec, None).probs
            assert p.sum() == pytest.approx(1.0, abs=1e-15) and p[0] >= p[1]


class TestCrossEntropy:
    def test_half_half_hard(self):
        assert ce_loss(model_from_probs([0.5, 0.5]), [1.0, 0.0]) == pytest.approx(
            0.6931472, abs=1e-7)

    def test_hard_is_dpo_summand(self, rng):
        for _ in range(200):
            pair = random_pair(rng)
            beta = float(rng.uniform(0.01, 5))
            a = explicit_ratios(pair)[0]
            want = math.log1p((a[1] / a[0]) ** beta)
            got = ce_loss(classifier_prob_pair(pair, beta, Pair(0, 0, 1)), [1.0, 0.0])
            assert got == pytest.approx(want, rel=1e-12)

    def test_soft_is_two_term_form(self, rng):
        for _ in range(200):
            pair = random_pair(rng)
            beta, eps = float(rng.uniform(0.01, 5)), float(rng.uniform(0.01, 0.49))
            a = explicit_ratios(pair)[0]
            z = beta * math.log(a[0] / a[1])
            want = (1 - eps) * math.log1p(math.exp(-z)) + eps * math.log1p(math.exp(z))
            p = classifier_prob_pair(pair, beta, Pair(0, 0, 1))
            assert ce_loss(p, [1 - eps, eps]) == pytest.approx(want, rel=1e-12)

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            ce_loss(model_from_probs([0.5, 0.5]), [1.0, 0.0, 0.0])

    @settings(max_examples=200, deadline=None)
    @given(st.lists(st.floats(0.01, 1.0), min_size=2, max_size=5),
           st.lists(st.floats(0.01, 1.0), min_size=5, max_size=5))
    def test_gibbs_inequality(self, raw_t, raw_p):
        t = np.array(raw_t) / np.sum(raw_t)
        p = np.array(raw_p[:len(t)]) / np.sum(raw_p[:len(t)])
        target = losses.Target(t)
        assert ce_loss(model_from_probs(p), t) >= target.entropy() - 1e-10
        assert ce_loss(model_from_probs(t), t) == pytest.approx(target.entropy(), abs=1e-10)
        assert ce_excess(model_from_probs(t), target) == pytest.approx(0.0, abs=1e-10)

    def test_soft_labels_minimum_is_entropy_not_zero(self):
        t = make_labels(LabelSpec.soft(0.2), None)
        m = model_from_probs([0.8, 0.2])
        assert ce_loss(m, t) == pytest.approx(t.entropy(), rel=1e-12) and ce_loss(m, t) > 0
        assert ce_excess(m, t) == pytest.approx(0.0, abs=1e-15)


class TestSquaredLogRatio:
    def test_equal_is_zero(self):
        assert slr_loss(model_from_probs([0.7, 0.3]), [0.7, 0.3]) == pytest.approx(0, abs=1e-28)

    def test_ipo_at_equal_rewards(self, rng):
        pair = ModelPair.from_reference(PolicyModel.tabular(rng.normal(size=(1, 3))))
        for beta in (0.1, 1.0, 7.0):
            p = classifier_prob_pair(pair, beta, Pair(0, 0, 1))
            assert slr_loss(p, make_labels(LabelSpec.ipo(), None)) == 0.25

    def test_ipo_identity(self, rng):
        for _ in range(200):
            pair = random_pair(rng)
            beta = float(rng.uniform(0.05, 5))
            a = explicit_ratios(pair)[0]
            rho = a[0] / a[1]
            want = beta**2 * (math.log(rho) - 1 / (2 * beta)) ** 2
            p = classifier_prob_pair(pair, beta, Pair(0, 0, 1))
            assert slr_loss(p, make_labels(LabelSpec.ipo(), None)) == pytest.approx(want,
                                                                                     rel=1e-10)

    def test_zero_iff_log_odds_agree(self, rng):
        for _ in range(100):
            pair = random_pair(rng)
            p = classifier_prob_pair(pair, 1.3, Pair(0, 2, 4))
            target = ScoredPair(0, 2, 4, p.log_odds + 0.25, 0.25)
            t = make_labels(LabelSpec.score_derived(), target)
            assert slr_loss(p, t) == pytest.approx(0.0, abs=1e-10)
            shifted = ScoredPair(0, 2, 4, p.log_odds + 0.5, 0.25)
            assert slr_loss(p, make_labels(LabelSpec.score_derived(), shifted)) > 1e-3

    def test_list_form_rejected(self):
        with pytest.raises(UnsupportedFormError):
            slr_loss(model_from_probs([0.2, 0.3, 0.5]), [0.2, 0.3, 0.5])


class TestPlackettLuce:
    def test_two_items_match_pair(self, rng):
        pair = random_pair(rng)
        a = list_loss_pl(pair, 0.8, RankedList(0, (4, 1)))
        b = ce_loss(classifier_prob_pair(pair, 0.8, Pair(0, 4, 1)), [1.0, 0.0])
        assert a == pytest.approx(b, rel=1e-14)

    def test_uniform(self, rng):
        pair = ModelPair.from_reference(PolicyModel.tabular(rng.normal(size=(1, 4))))
        assert list_loss_pl(pair, 2.0, RankedList(0, (0, 1, 2))) == pytest.approx(
            1.7917595, abs=1e-7)

    def test_product_form(self, rng):
        for _ in range(100):
            pair = random_pair(rng)
            beta = float(rng.uniform(0.1, 3))
            ys = tuple(int(y) for y in rng.choice(6, 4, replace=False))
            powered = explicit_ratios(pair)[0, list(ys)] ** beta
            prod = np.prod([powered[n] / powered[n:].sum() for n in range(3)])
            assert list_loss_pl(pair, beta, RankedList(0, ys)) == pytest.approx(-math.log(prod),
                                                                                rel=1e-10)

    def test_needs_list(self, rng):
        with pytest.raises(InvalidRecordError):
            list_loss_pl(random_pair(rng), 1.0, Pair(0, 0, 1))


class TestPresets:
    @pytest.mark.parametrize("name,labels,loss,variant", [
        ("dpo", losses.HARD, losses.CROSS_ENTROPY, "pair"),
        ("cdpo", losses.SOFT_EPS, losses.CROSS_ENTROPY, "pair"),
        ("ipo", losses.IPO_LABELS, losses.SQUARED_LOG_RATIO, "pair"),
        ("dpo_pl", losses.HARD, losses.CROSS_ENTROPY, "list"),
        ("rpo", losses.SCORE_DERIVED, losses.CROSS_ENTROPY, "scored_pair"),
        ("distilled_dpo", losses.SCORE_DERIVED, losses.SQUARED_LOG_RATIO, "scored_pair"),
    ])
    def test_table(self, name, labels, loss, variant):
        spec = preset(name)
        assert (spec.labels.kind, spec.loss, spec.variant) == (labels, loss, variant)

    def test_unknown(self):
        with pytest.raises(ValueError):
            preset("kto")

    def test_distilled(self, rng):
        for _ in range(100):
            pair = random_pair(rng)
            beta = float(rng.uniform(0.1, 3))
            s = rng.normal(size=2)
            rec = ScoredPair(0, 1, 3, float(s[0]), float(s[1]))
            a = explicit_ratios(pair)[0]
            want = (beta * math.log(a[1] / a[3]) - (s[0] - s[1])) ** 2
            assert preset_loss(pair, beta, rec, preset("distilled_dpo")) == pytest.approx(
                want, rel=1e-12)

    def test_rpo_kl_plus_entropy(self, rng):
        for _ in range(100):
            pair = random_pair(rng)
            beta = float(rng.uniform(0.1, 3))
            s = rng.normal(size=2)
            rec = ScoredPair(0, 1, 3, float(s[0]), float(s[1]))
            a = explicit_ratios(pair)[0]
            qa, b = expit(beta * math.log(a[1] / a[3])), expit(s[0] - s[1])
            kl = b * math.log(b / qa) + (1 - b) * math.log((1 - b) / (1 - qa))
            entropy = -(b * math.log(b) + (1 - b) * math.log(1 - b))
            p = classifier_prob_pair(pair, beta, rec)
            t = make_labels(LabelSpec.score_derived(), rec)
            # both values are exposed: raw CE and the KL form without the constant
            assert preset_loss(pair, beta, rec, preset("rpo")) == pytest.approx(kl + entropy,
                                                                               rel=1e-10)
            assert ce_excess(p, t) == pytest.approx(kl, rel=1e-8, abs=1e-14)

    def test_wrong_record_variant(self, rng):
        with pytest.raises(UnsupportedFormError):
            preset_loss(random_pair(rng), 1.0, Pair(0, 0, 1), preset("rpo"))
        with pytest.raises(UnsupportedFormError):
            preset_loss(random_pair(rng), 1.0, Pair(0, 0, 1), preset("dpo_pl"))

    def test_translation_invariance(self, rng):
        recs = {"dpo": Pair(0, 0, 1), "cdpo": Pair(0, 0, 1), "ipo": Pair(0, 0, 1),
                "dpo_pl": RankedList(0, (0, 1, 2)), "rpo": ScoredPair(0, 0, 1, 0.4, -0.2),
                "distilled_dpo": ScoredPair(0, 0, 1, 0.4, -0.2)}
        for _ in range(50):
            pair = random_pair(rng, k=4)
            c = float(rng.normal(scale=20))
            moved = ModelPair(PolicyModel.tabular(pair.theta.logits() + c),
                              PolicyModel.tabular(pair.ref.logits() + c))
            for name, rec in recs.items():
                a = preset_loss(pair, 0.9, rec, preset(name))
                b = preset_loss(moved, 0.9, rec, preset(name))
                assert abs(a - b) <= 1e-10

    def test_extreme_margins_finite(self):
        pair = ModelPair(PolicyModel.tabular([[300.0, -300.0, 0.0]]),
                         PolicyModel.tabular([[0.0, 0.0, 0.0]]))
        for name in ("dpo", "cdpo", "ipo"):
            for rec in (Pair(0, 0, 1), Pair(0, 1, 0)):
                assert math.isfinite(preset_loss(pair, 5.0, rec, preset(name)))
        assert math.isfinite(list_loss_pl(pair, 5.0, RankedList(0, (1, 2, 0))))
