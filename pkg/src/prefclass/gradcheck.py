"""Central finite-difference checks of the analytic gradients."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import constraints
from .data import Pair, RankedList, ScoredPair
from .model import ModelPair, PolicyModel, PromptSpace
from .objective import Batch, build_objective, evaluate

FD_STEP = 1e-5
GRAD_RTOL = 1e-6
# an l1 penalty is not differentiable where the residual crosses zero
L1_KINK_GUARD = 1e-8


def numerical_gradient(f, x, step=FD_STEP):
    x = np.array(x, dtype=np.float64)
    g = np.empty_like(x)
    for i in range(x.size):
        orig = x[i]
        x[i] = orig + step
        up = f(x)
        x[i] = orig - step
        down = f(x)
        x[i] = orig
        g[i] = (up - down) / (2.0 * step)
    return g


def relative_error(analytic, numeric):
    """||a - n|| / max(||a||, ||n||), or 0 when both vanish."""
    scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric))
    if scale == 0.0:
        return 0.0
    return float(np.linalg.norm(analytic - numeric) / scale)


def random_model(kind, space, rng, dim=4, scale=1.0):
    if kind == "tabular":
        return PolicyModel.tabular(scale * rng.standard_normal((space.num_prompts, space.k)))
    feats = rng.standard_normal((space.num_prompts, space.k, dim))
    return PolicyModel.linear(feats, scale * rng.standard_normal(dim))


def random_pair(kind, space, rng, dim=4):
    """Random reference plus a trainable copy moved away from it."""
    ref = random_model(kind, space, rng, dim)
    theta = ref.with_params(ref.params + rng.standard_normal(ref.params.size))
    return ModelPair(theta, ref)


def random_records(variant, space, rng, count=4, list_size=3):
    out = []
    for _ in range(count):
        x = int(rng.integers(space.num_prompts))
        ys = rng.choice(space.k, size=list_size if variant == "list" else 2, replace=False)
        if variant == "list":
            out.append(RankedList(x, tuple(int(y) for y in ys)))
        elif variant == "scored_pair":
            s = rng.normal(size=2)
            out.append(ScoredPair(x, int(ys[0]), int(ys[1]), float(s[0]), float(s[1])))
        else:
            out.append(Pair(x, int(ys[0]), int(ys[1])))
    return out


@dataclass
class GradCheck:
    loss: str
    kind: str
    max_error: float
    instances: int
    skipped: int

    @property
    def passed(self):
        return self.max_error <= GRAD_RTOL


def check_loss_gradient(loss, kind, instances=50, rng=None, space=PromptSpace(3, 5)):
    """Worst relative error over random instances for one loss name and model kind."""
    rng = rng if rng is not None else np.random.default_rng(0)
    worst, skipped = 0.0, 0
    for _ in range(instances):
        beta = float(np.exp(rng.uniform(np.log(0.05), np.log(5.0))))
        lam = float(np.exp(rng.uniform(np.log(1e-3), np.log(1.0))))
        objective = build_objective(loss, beta, eps=float(rng.uniform(0.01, 0.49)), lam=lam)
        pair = random_pair(kind, space, rng)
        batch = Batch(random_records(objective.preset.variant, space, rng))
        cons = objective.constraint
        if cons is not None and cons.norm == constraints.L1:
            lt, lr = pair.theta.log_probs(), pair.ref_log_probs()
            x, w, l = batch.pair_x, batch.pair_w, batch.pair_l
            r = constraints.residual_terms(cons.phi, lt[x, w], lt[x, l], lr[x, w], lr[x, l])[0]
            if np.any(np.abs(r) < L1_KINK_GUARD):
                skipped += 1
                continue
        analytic = evaluate(pair, objective, batch).grad

        def f(p):
            return evaluate(pair.with_theta_params(p), objective, batch, with_grad=False).loss

        worst = max(worst, relative_error(analytic, numerical_gradient(f, pair.theta.params)))
    return GradCheck(loss, kind, worst, instances - skipped, skipped)
