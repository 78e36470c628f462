"""Self-verification suite behind the ``verify`` command.

Each check returns ``{"check_name", "status", "detail"}`` with status
``"pass"`` or ``"fail"``. The loss-equivalence oracles deliberately work from
explicitly exponentiated probability ratios (``a = pi_theta / pi_ref``) so they
share no code path with the log-space implementations they check.
"""

from __future__ import annotations

import math
import time

import numpy as np

from . import constraints, gradcheck, losses, oracle
from .data import Pair, RankedList, ScoredPair
from .model import ModelPair, PolicyModel, PromptSpace
from .objective import LOSS_NAMES

EQUIV_RTOL = 1e-10
SUM_TOL = 1e-12
LINE_RTOL = 0.02


def _rel(a, b):
    scale = max(abs(a), abs(b))
    return 0.0 if scale == 0.0 else abs(a - b) / scale


def _random_setup(rng, k=6):
    """One prompt with random reference and trained logits; ratios stay moderate."""
    space = PromptSpace(1, k)
    ref_logits = rng.normal(size=(1, k))
    ref = PolicyModel.tabular(ref_logits)
    theta = PolicyModel.tabular(ref_logits + rng.normal(size=(1, k)))
    pair = ModelPair(theta, ref)
    beta = float(np.exp(rng.uniform(math.log(0.01), math.log(10.0))))
    # plain probabilities for the oracle side
    p_theta = np.exp(theta.logits()[0]) / np.exp(theta.logits()[0]).sum()
    p_ref = np.exp(ref_logits[0]) / np.exp(ref_logits[0]).sum()
    return space, pair, beta, p_theta / p_ref


def _pair_case(rng):
    space, pair, beta, ratio = _random_setup(rng)
    w, l = (int(y) for y in rng.choice(space.k, size=2, replace=False))
    return pair, beta, Pair(0, w, l), ratio[w], ratio[l]


def _equiv_dpo(rng):
    pair, beta, rec, a, b = _pair_case(rng)
    # -log sigma(beta log(a/b)) = log(1 + (b/a)^beta)
    want = math.log1p((b / a) ** beta)
    got = losses.preset_loss(pair, beta, rec, losses.preset("dpo"))
    return _rel(got, want)


def _equiv_cdpo(rng):
    pair, beta, rec, a, b = _pair_case(rng)
    eps = float(rng.uniform(0.01, 0.49))
    want = (1 - eps) * math.log1p((b / a) ** beta) + eps * math.log1p((a / b) ** beta)
    got = losses.preset_loss(pair, beta, rec, losses.preset("cdpo", eps))
    return _rel(got, want)


def _equiv_ipo(rng):
    pair, beta, rec, a, b = _pair_case(rng)
    rho = a / b
    want = beta**2 * (math.log(rho) - 1.0 / (2.0 * beta)) ** 2
    got = losses.preset_loss(pair, beta, rec, losses.preset("ipo"))
    return _rel(got, want)


def _equiv_pl(rng):
    space, pair, beta, ratio = _random_setup(rng)
    n = int(rng.integers(2, 6))
    ranking = tuple(int(y) for y in rng.choice(space.k, size=n, replace=False))
    powered = ratio[list(ranking)] ** beta
    # -log prod_n powered[n] / sum_{i >= n} powered[i], one log1p per factor
    want = sum(math.log1p(powered[i + 1:].sum() / powered[i]) for i in range(n - 1))
    got = losses.list_loss_pl(pair, beta, RankedList(0, ranking))
    return _rel(got, want)


def _scored_case(rng):
    pair, beta, rec, a, b = _pair_case(rng)
    s_w, s_l = (float(v) for v in rng.normal(size=2))
    return pair, beta, ScoredPair(0, rec.winner, rec.loser, s_w, s_l), a, b


def _equiv_distilled(rng):
    pair, beta, rec, a, b = _scored_case(rng)
    want = (beta * math.log(a / b) - (rec.score_w - rec.score_l)) ** 2
    got = losses.preset_loss(pair, beta, rec, losses.preset("distilled_dpo"))
    return _rel(got, want)


def _equiv_rpo(rng):
    pair, beta, rec, a, b = _scored_case(rng)
    aw, bl = a**beta, b**beta
    q_w, q_l = aw / (aw + bl), bl / (aw + bl)
    p_w = math.exp(rec.score_w) / (math.exp(rec.score_w) + math.exp(rec.score_l))
    p_l = math.exp(rec.score_l) / (math.exp(rec.score_w) + math.exp(rec.score_l))
    kl = p_w * math.log(p_w / q_w) + p_l * math.log(p_l / q_l)
    want = kl - (p_w * math.log(p_w) + p_l * math.log(p_l))
    got = losses.preset_loss(pair, beta, rec, losses.preset("rpo"))
    return _rel(got, want)


EQUIVALENCES = {
    "dpo": _equiv_dpo,
    "cdpo": _equiv_cdpo,
    "ipo": _equiv_ipo,
    "dpo_pl": _equiv_pl,
    "distilled_dpo": _equiv_distilled,
    "rpo": _equiv_rpo,
}


def loss_equivalence(name, instances=1000, seed=0):
    rng = np.random.default_rng(seed)
    worst = max(EQUIVALENCES[name](rng) for _ in range(instances))
    return worst <= EQUIV_RTOL, {"instances": instances, "max_rel_error": worst,
                                 "tolerance": EQUIV_RTOL}


def log_space_sum(samples=10000, seed=0):
    rng = np.random.default_rng(seed)
    ab = np.exp(rng.uniform(math.log(1e-8), math.log(1e8), size=(samples, 2)))
    worst = max(constraints.check_lemma1(float(a), float(b)) for a, b in ab)
    return worst <= SUM_TOL, {"samples": samples, "max_defect": worst, "tolerance": SUM_TOL}


def gradients(instances=50, seed=0):
    rng = np.random.default_rng(seed)
    errors, ok = {}, True
    for name in LOSS_NAMES:
        for kind in ("tabular", "linear"):
            res = gradcheck.check_loss_gradient(name, kind, instances, rng)
            errors[f"{name}/{kind}"] = res.max_error
            ok = ok and res.passed and res.instances >= 1
    return ok, {"max_rel_error": max(errors.values()), "per_loss": errors,
                "tolerance": gradcheck.GRAD_RTOL, "step": gradcheck.FD_STEP}


def zero_loss_line(resolution=1000):
    inst = oracle.WORKED_EXAMPLE
    slope = oracle.eta(inst)
    cases = oracle.verify_remark3(inst)
    res = oracle.grid_solve(inst, resolution=resolution, tol=1e-6)
    ratios = res.near_optimal[:, 0] / res.near_optimal[:, 1]
    dev = float(np.max(np.abs(ratios - slope) / slope))
    decades = res.q_w_decades()
    ok = (slope == 20.0 and cases[0]["consistent"] and not cases[1]["consistent"]
          and math.isclose(cases[1]["ratio"], 5.0) and cases[2]["consistent"]
          and decades >= 2.0 and dev <= LINE_RTOL)
    return ok, {"eta": slope,
                "candidates": [{k: c[k] for k in ("q_w", "q_l", "ratio", "consistent")}
                               for c in cases],
                "near_optimal_points": int(len(ratios)), "q_w_decades": decades,
                "max_line_deviation": dev}


def _constrained_report(trials, seed, _cache={}):
    # the direction and identity-conservation checks share one (expensive) set of solves
    key = (trials, seed)
    if key not in _cache:
        _cache.clear()
        _cache[key] = oracle.verify_proposition(trials, np.random.default_rng(seed))
    return _cache[key]


def constrained_optimum(trials=100, seed=0):
    rep = _constrained_report(trials, seed)
    rows = rep.trials
    detail = {
        "trials": trials, "solves": len(rows),
        "violations": [{k: (repr(v) if k == "instance" else v) for k, v in r.items()}
                       for r in rep.violations[:10]],
        "all_winner_up": all(r["winner_up"] for r in rows),
        "all_loser_down": all(r["loser_down"] for r in rows),
        "all_unique": all(r.get("unique", True) for r in rows),
        "max_diameter_ratio": max(r["diameter_finer"] / r["diameter"] for r in rows),
        "max_analytic_rel_error": max(r.get("analytic_rel_err", 0.0) for r in rows),
    }
    return rep.passed, detail


def identity_conservation(trials=100, seed=0):
    rows = [r for r in _constrained_report(trials, seed).trials if r["phi"] == "identity"]
    defect = max(r["mass_defect"] for r in rows)
    bound = all(r["gain_bound"] for r in rows)
    return defect <= 1e-10 and bound, {"instances": len(rows), "max_mass_defect": defect,
                                       "gain_bound_holds": bound}


CHECKS = {
    **{f"loss_equivalence_{name}": (lambda n=name: loss_equivalence(n)) for name in EQUIVALENCES},
    "log_space_sum_identity": log_space_sum,
    "gradients_vs_finite_differences": gradients,
    "zero_loss_line": zero_loss_line,
    "constrained_optimum_direction": constrained_optimum,
    "identity_constraint_conservation": identity_conservation,
}


def run_check(name):
    if name not in CHECKS:
        raise KeyError(f"unknown check {name!r}")
    start = time.perf_counter()
    ok, detail = CHECKS[name]()
    detail["runtime_s"] = round(time.perf_counter() - start, 3)
    return {"check_name": name, "status": "pass" if ok else "fail", "detail": detail}


def run_checks(names=None):
    return [run_check(n) for n in (names or CHECKS)]
