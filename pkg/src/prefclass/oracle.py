"""Brute-force checks on the two-response probability plane.

Works directly with the pair probabilities ``(q_w, q_l) = (pi(y_w|x), pi(y_l|x))``
rather than with any policy parameterization, so every statement here is
independent of the model and trainer code.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import brentq, minimize_scalar
from scipy.special import log_expit

GRID_LO = 1e-8
GRID_HI = 1.0 - 1e-8

PHI_FUNCTIONS = {
    "log": np.log,
    "identity": lambda q: np.asarray(q, dtype=np.float64) * 1.0,
    "cube": lambda q: np.asarray(q, dtype=np.float64) ** 3,
    "neg_reciprocal": lambda q: -1.0 / np.asarray(q, dtype=np.float64),
}


@dataclass(frozen=True)
class PairInstance:
    ref_w: float
    ref_l: float
    beta: float
    eps: float

    def __post_init__(self):
        if not (0 < self.ref_w < 1 and 0 < self.ref_l < 1 and self.ref_w + self.ref_l <= 1):
            raise ValueError(f"invalid reference probabilities ({self.ref_w}, {self.ref_l})")
        if not self.beta > 0:
            raise ValueError(f"beta must be positive, got {self.beta}")
        if not 0 < self.eps < 0.5:
            raise ValueError(f"eps must lie in (0, 1/2), got {self.eps}")


WORKED_EXAMPLE = PairInstance(ref_w=0.02, ref_l=0.01, beta=1.0, eps=1 / 11)


def eta(inst):
    """Slope of the zero-loss line ``q_w = eta * q_l`` for soft labels (1-eps, eps)."""
    odds = (1.0 - inst.eps) / inst.eps
    return odds ** (1.0 / inst.beta) * inst.ref_w / inst.ref_l


def verify_remark3(inst=WORKED_EXAMPLE, candidates=((0.4, 0.02), (0.001, 0.0002), (0.004, 0.0002)),
                   rtol=1e-9):
    """Check candidate optima against the zero-loss line; one dict per candidate."""
    slope = eta(inst)
    out = []
    for q_w, q_l in candidates:
        ratio = q_w / q_l
        out.append({
            "q_w": q_w, "q_l": q_l, "ratio": ratio, "eta": slope,
            "consistent": math.isclose(ratio, slope, rel_tol=rtol),
            "winner_up": q_w > inst.ref_w, "loser_up": q_l > inst.ref_l,
        })
    return out


def soft_label_kl(inst, q_w, q_l):
    """KL((1-eps, eps) || p_theta) at pair probabilities (q_w, q_l): the excess CE loss."""
    m = inst.beta * ((np.log(q_w) - math.log(inst.ref_w)) - (np.log(q_l) - math.log(inst.ref_l)))
    e = inst.eps
    return ((1 - e) * (math.log(1 - e) - log_expit(m))
            + e * (math.log(e) - log_expit(-m)))


def check_monotone(phi, lo=GRID_LO, hi=GRID_HI, n=4097):
    """+1 if ``phi`` is strictly increasing on [lo, hi], -1 if strictly decreasing."""
    vals = np.asarray(phi(np.geomspace(lo, hi, n)), dtype=np.float64)
    d = np.diff(vals)
    if not np.all(np.isfinite(vals)):
        raise ValueError("phi is not finite on the probability grid")
    if np.all(d > 0):
        return 1
    if np.all(d < 0):
        return -1
    raise ValueError("phi must be strictly monotone on (0, 1)")


def _curve_points_at_odds(phi, sign, target, s, iters=200):
    """Points on the constraint curve along the rays log(q_w / q_l) = s.

    Bisection in t = log q_l, vectorized over ``s``. Returns (q_w, q_l, ok)
    where ``ok`` marks rays whose root lies in the feasible triangle with both
    coordinates at least GRID_LO.
    """
    s = np.atleast_1d(np.asarray(s, dtype=np.float64))
    a = math.log(GRID_LO) + np.maximum(0.0, -s)
    b = -np.logaddexp(0.0, s) - 1e-15  # q_w + q_l < 1

    def g(t):
        return sign * (phi(np.exp(s + t)) + phi(np.exp(t)) - target)

    ok = (a < b) & (g(a) <= 0) & (g(b) >= 0)
    for _ in range(iters):
        mid = 0.5 * (a + b)
        right = g(mid) >= 0
        b = np.where(right, mid, b)
        a = np.where(right, a, mid)
        if np.all(b - a <= 1e-15 * np.maximum(1.0, np.abs(a))):
            break
    t = 0.5 * (a + b)
    return np.exp(s + t), np.exp(t), ok


def _curve_point_at_odds(phi, sign, target, s):
    q_w, q_l, ok = _curve_points_at_odds(phi, sign, target, s)
    return (float(q_w[0]), float(q_l[0])) if ok[0] else None


@dataclass
class GridSolveResult:
    best: tuple
    best_objective: float
    near_optimal: np.ndarray  # rows of (q_w, q_l)
    resolution: int
    log_step: float
    constrained: bool
    grid_best: tuple = field(default=None)

    def q_w_decades(self):
        qw = self.near_optimal[:, 0]
        return float(np.log10(qw.max() / qw.min()))

    def shrinks_with(self, finer):
        """True if ``finer`` (a solve at higher resolution) localizes the optimum
        at least proportionally better, up to one of its own grid steps."""
        ratio = self.log_step / finer.log_step
        return finer.diameter() <= self.diameter() / ratio + finer.log_step

    def diameter(self):
        """Max-norm extent of the near-optimal set in (log q_w, log q_l)."""
        logs = np.log(self.near_optimal)
        return float((logs.max(axis=0) - logs.min(axis=0)).max())


def grid_solve(inst, loss=soft_label_kl, phi=None, resolution=1000, tol=1e-6,
               polish=True):
    """Minimize a pair loss over a log-spaced grid of the feasible triangle.

    Without ``phi`` every grid point (q_w, q_l) with q_w + q_l < 1 is scored.
    With a strictly monotone ``phi`` (a callable or a name from PHI_FUNCTIONS)
    the search rays are the grid diagonals log(q_w / q_l) = k * log_step; on
    each one the point satisfying phi(q_w) + phi(q_l) = phi(ref_w) + phi(ref_l)
    is found by bisection and scored, and the best ray is refined by a bounded
    1-D search along the curve.

    ``tol=None`` sets the near-optimal tolerance to the largest loss increase
    from the grid minimizer to one of its immediate grid neighbors.
    """
    if resolution < 100:
        raise ValueError("resolution must be at least 100 per axis")
    grid = np.geomspace(GRID_LO, GRID_HI, resolution)
    log_step = float(np.log(grid[1] / grid[0]))

    if phi is None:
        qw, ql = np.meshgrid(grid, grid, indexing="ij")
        feasible = qw + ql < 1.0
        vals = np.where(feasible, loss(inst, qw, ql), np.inf)
        i, j = np.unravel_index(np.argmin(vals), vals.shape)
        best_val = float(vals[i, j])
        if tol is None:
            nb = vals[max(i - 1, 0):i + 2, max(j - 1, 0):j + 2]
            tol = float(nb[np.isfinite(nb)].max() - best_val)
        near = feasible & (vals <= best_val + tol)
        pts = np.column_stack([qw[near], ql[near]])
        best = (float(qw[i, j]), float(ql[i, j]))
        return GridSolveResult(best, best_val, pts, resolution, log_step, False, best)

    if isinstance(phi, str):
        phi = PHI_FUNCTIONS[phi]
    sign = check_monotone(phi)
    target = float(phi(inst.ref_w) + phi(inst.ref_l))
    # search rays are the diagonals of the log grid (constant log-odds, one grid
    # step apart); the curve point on each is found by bisection
    k = np.arange(-(resolution - 1), resolution)
    odds = k * log_step
    qw, ql, ok = _curve_points_at_odds(phi, sign, target, odds)
    if not ok.any():
        raise ValueError("constraint curve does not meet the feasible triangle")
    qw, ql, odds = qw[ok], ql[ok], odds[ok]
    vals = loss(inst, qw, ql)
    i = int(np.argmin(vals))
    best_val = float(vals[i])
    if tol is None:
        tol = float(vals[max(i - 1, 0):i + 2].max() - best_val)
    near = vals <= best_val + tol
    pts = np.column_stack([qw[near], ql[near]])
    grid_best = (float(qw[i]), float(ql[i]))
    best = grid_best
    if polish:
        lo_s, hi_s = odds[max(i - 1, 0)], odds[min(i + 1, odds.size - 1)]

        def along_curve(s):
            pt = _curve_point_at_odds(phi, sign, target, s)
            return math.inf if pt is None else float(loss(inst, *pt))

        if hi_s > lo_s:
            res = minimize_scalar(along_curve, bounds=(lo_s, hi_s), method="bounded",
                                  options={"xatol": 1e-13})
            pt = _curve_point_at_odds(phi, sign, target, res.x)
            if pt is not None and res.fun <= best_val:
                best, best_val = pt, float(res.fun)
    return GridSolveResult(best, best_val, pts, resolution, log_step, True, grid_best)


def analytic_constrained_solution(inst, phi):
    """Intersection of the zero-loss line with the constraint curve, or None.

    Solves phi(eta * q_l) + phi(q_l) = phi(ref_w) + phi(ref_l) for q_l by
    bracketed root finding.
    """
    if isinstance(phi, str):
        phi = PHI_FUNCTIONS[phi]
    slope = eta(inst)
    target = float(phi(inst.ref_w) + phi(inst.ref_l))

    def f(t):
        q_l = math.exp(t)
        return float(phi(slope * q_l) + phi(q_l)) - target

    lo, hi = math.log(1e-300), math.log(1.0 / (1.0 + slope)) - 1e-15
    if f(lo) * f(hi) > 0:
        return None
    t = brentq(f, lo, hi, xtol=1e-15, rtol=4 * np.finfo(float).eps, maxiter=500)
    q_l = math.exp(t)
    return slope * q_l, q_l


def random_instance(rng):
    return PairInstance(
        ref_w=float(rng.uniform(1e-4, 0.4)),
        ref_l=float(rng.uniform(1e-4, 0.4)),
        beta=float(rng.uniform(0.1, 5.0)),
        eps=float(rng.uniform(0.01, 0.45)),
    )


@dataclass
class ConstrainedOptimaReport:
    trials: list
    violations: list

    @property
    def passed(self):
        return not self.violations


def verify_proposition(trials=100, rng=None, phis=tuple(PHI_FUNCTIONS), resolution=1000,
                       uniqueness=True, analytic_rtol=1e-3):
    """Constrained optima move the winner up and the loser down, for every phi.

    Each trial draws a random instance and solves it under each monotone phi.
    For ``identity`` the conservation of q_w + q_l and the bound
    ``q_w - ref_w <= ref_l`` are checked as well. With ``uniqueness`` the
    near-optimal set (adaptive tolerance) must shrink in proportion when the
    resolution doubles. Where the line/curve intersection lies inside the grid
    domain the optimum must match its root-finding solution to ``analytic_rtol``.
    """
    if trials < 1:
        raise ValueError("need at least one trial")
    rng = rng if rng is not None else np.random.default_rng(0)
    rows, bad = [], []
    for t in range(trials):
        inst = random_instance(rng)
        for name in phis:
            res = grid_solve(inst, phi=name, resolution=resolution, tol=None)
            q_w, q_l = res.best
            row = {"trial": t, "phi": name, "instance": inst, "q_w": q_w, "q_l": q_l,
                   "winner_up": q_w > inst.ref_w, "loser_down": q_l < inst.ref_l}
            ok = row["winner_up"] and row["loser_down"]
            if name == "identity":
                row["mass_defect"] = abs((q_w + q_l) - (inst.ref_w + inst.ref_l))
                row["gain_bound"] = q_w - inst.ref_w <= inst.ref_l
                ok = ok and row["mass_defect"] <= 1e-10 and row["gain_bound"]
            if uniqueness:
                finer = grid_solve(inst, phi=name, resolution=2 * resolution, tol=None,
                                   polish=False)
                row["diameter"] = res.diameter()
                row["diameter_finer"] = finer.diameter()
                row["unique"] = res.shrinks_with(finer)
                ok = ok and row["unique"]
            exact = analytic_constrained_solution(inst, name)
            # intersections outside the grid's domain cannot be reproduced by it
            if exact is not None and min(exact) >= GRID_LO:
                row["analytic_rel_err"] = max(abs(q_w - exact[0]) / exact[0],
                                              abs(q_l - exact[1]) / exact[1])
                ok = ok and row["analytic_rel_err"] <= analytic_rtol
            rows.append(row)
            if not ok:
                bad.append(row)
    return ConstrainedOptimaReport(rows, bad)
