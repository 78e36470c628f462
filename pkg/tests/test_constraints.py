import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.special import log_expit

from prefclass import constraints, losses
from prefclass.constraints import (ConstraintSpec, c3dpo_loss, check_lemma1, implicit_reward_form,
                                   penalty, penalty_grad, residual_identity, residual_log)
from prefclass.data import Pair, RankedList
from prefclass.errors import UnsupportedFormError
from prefclass.model import ModelPair, PolicyModel

from conftest import worked_pair

REC = Pair(0, 0, 1)


def random_pair(rng, k=5):
    ref = rng.normal(size=(1, k))
    return ModelPair(PolicyModel.tabular(ref + rng.normal(size=(1, k))), PolicyModel.tabular(ref))


class TestResiduals:
    def test_log_worked_example(self):
        assert residual_log(worked_pair(), REC) == pytest.approx(3.6888795, abs=1e-7)
        assert residual_log(worked_pair(), REC) == pytest.approx(math.log(40), rel=1e-12)

    def test_identity_worked_example(self):
        assert residual_identity(worked_pair(), REC) == pytest.approx(2.6390573, abs=1e-7)
        assert residual_identity(worked_pair(), REC) == pytest.approx(math.log(14), rel=1e-12)

    def test_zero_at_reference(self, rng):
        ref = PolicyModel.tabular(rng.normal(size=(2, 6)))
        pair = ModelPair.from_reference(ref)
        for rec in (Pair(0, 1, 2), Pair(1, 5, 0)):
            assert residual_log(pair, rec) == 0.0
            assert residual_identity(pair, rec) == 0.0

    def test_naive_values(self, rng):
        for _ in range(200):
            pair = random_pair(rng)
            pt, pr = pair.theta.probs()[0], pair.ref.probs()[0]
            want_log = math.log(pt[2] * pt[4] / (pr[2] * pr[4]))
            want_id = math.log((pt[2] + pt[4]) / (pr[2] + pr[4]))
            assert residual_log(pair, Pair(0, 2, 4)) == pytest.approx(want_log, rel=1e-9,
                                                                      abs=1e-12)
            assert residual_identity(pair, Pair(0, 2, 4)) == pytest.approx(want_id, rel=1e-9,
                                                                           abs=1e-12)

    def test_identity_tiny_probabilities(self):
        # the pair's mass is ~1e-300; a direct sum of probabilities would underflow to log(0)
        pair = ModelPair(PolicyModel.tabular([[-700.0, -705.0, 0.0]]),
                         PolicyModel.tabular([[-690.0, -690.0, 0.0]]))
        r = residual_identity(pair, REC)
        want = (-700 + math.log1p(math.exp(-5))) - (-690 + math.log(2))
        assert r == pytest.approx(want, rel=1e-12)

    def test_needs_pair(self, rng):
        with pytest.raises(UnsupportedFormError):
            residual_log(random_pair(rng), RankedList(0, (0, 1, 2)))


class TestLogSpaceSum:
    def test_extreme_against_high_precision(self):
        a, b = 1e8, 1e-8
        with mpmath.workdps(50):
            exact = mpmath.log(mpmath.mpf(a) + mpmath.mpf(b))
        la, lb = math.log(a), math.log(b)
        ours = la - float(log_expit(la - lb))
        assert abs(ours - float(exact)) <= 1e-12
        assert check_lemma1(a, b) <= 1e-12

    @settings(max_examples=300, deadline=None)
    @given(st.floats(-8, 8), st.floats(-8, 8))
    def test_random(self, ea, eb):
        assert check_lemma1(10.0**ea, 10.0**eb) <= 1e-12

    def test_positive_only(self):
        with pytest.raises(ValueError):
            check_lemma1(0.0, 1.0)


class TestPenalty:
    def test_values(self):
        r = np.array([-2.0, 0.0, 0.5])
        np.testing.assert_array_equal(penalty(r, constraints.L1), [2.0, 0.0, 0.5])
        np.testing.assert_array_equal(penalty(r, constraints.L2), [4.0, 0.0, 0.25])
        np.testing.assert_array_equal(penalty_grad(r, constraints.L1), [-1.0, 0.0, 1.0])
        np.testing.assert_array_equal(penalty_grad(r, constraints.L2), [-4.0, 0.0, 1.0])

    def test_unknown_norm(self):
        with pytest.raises(ValueError):
            penalty(np.zeros(1), "l3")
        with pytest.raises(ValueError):
            ConstraintSpec(norm="l3")

    def test_lambda_domain(self):
        with pytest.raises(ValueError):
            ConstraintSpec(lam=-1.0)
        with pytest.raises(ValueError):
            ConstraintSpec(lam=float("nan"))

    def test_variant_names(self):
        # *_l1 is the absolute value and *_l2 the square
        assert ConstraintSpec.from_variant("c3dpo_log_l1").norm == constraints.L1
        assert ConstraintSpec.from_variant("c3dpo_i_l2") == ConstraintSpec(constraints.IDENTITY,
                                                                          constraints.L2)
        for name in constraints.VARIANTS:
            assert ConstraintSpec.from_variant(name).variant == name
        with pytest.raises(ValueError):
            ConstraintSpec.from_variant("c3dpo_sqrt_l2")


class TestC3DPOLoss:
    def test_worked_log_l2(self):
        got = c3dpo_loss(worked_pair(), 1.0, REC, cons=ConstraintSpec(lam=2e-4))
        assert got == pytest.approx(0.0980318, abs=1e-7)
        assert got == pytest.approx(-math.log(10 / 11) + 2e-4 * math.log(40) ** 2, rel=1e-12)

    def test_zero_lambda_is_base(self, rng):
        for _ in range(50):
            pair = random_pair(rng)
            for name in constraints.VARIANTS:
                cons = ConstraintSpec.from_variant(name, 0.0)
                assert c3dpo_loss(pair, 0.7, REC, cons=cons) == losses.preset_loss(
                    pair, 0.7, REC, losses.preset("dpo"))

    def test_monotone_in_lambda(self, rng):
        lams = np.geomspace(1e-4, 10, 30)
        for _ in range(20):
            pair = random_pair(rng)
            for name in constraints.VARIANTS:
                vals = [c3dpo_loss(pair, 0.5, REC, cons=ConstraintSpec.from_variant(name, lam))
                        for lam in lams]
                assert np.all(np.diff(vals) >= 0)

    def test_over_other_pair_bases(self, rng):
        pair = random_pair(rng)
        cons = ConstraintSpec(lam=0.3)
        r = residual_log(pair, REC)
        for base in ("cdpo", "ipo"):
            want = losses.preset_loss(pair, 0.4, REC, losses.preset(base)) + 0.3 * r * r
            assert c3dpo_loss(pair, 0.4, REC, base=base, cons=cons) == pytest.approx(want,
                                                                                    rel=1e-14)

    def test_list_base_rejected(self, rng):
        with pytest.raises(UnsupportedFormError):
            c3dpo_loss(random_pair(rng), 1.0, REC, base="dpo_pl")


class TestImplicitRewardForm:
    def test_matches_log_l2(self, rng):
        for _ in range(1000):
            pair = random_pair(rng)
            beta = float(np.exp(rng.uniform(math.log(0.05), math.log(5))))
            lam = float(rng.uniform(0, 1))
            a = c3dpo_loss(pair, beta, REC, cons=ConstraintSpec(lam=lam))
            b = implicit_reward_form(pair, beta, REC, lam)
            assert abs(a - b) <= 1e-10 * max(1.0, abs(a))
