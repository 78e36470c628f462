"""A linear-feature instance where plain DPO pushes winners below the reference.

Construction, per seed: a random permutation of the ``k`` responses picks one
winner ``W[x]`` and one loser ``L[x]`` for each prompt (all distinct), and the
sink of prompt ``x`` is the loser of prompt ``x + 1`` (cyclically). Features are
``Phi[x][y] = e_y`` plus ``gamma * e_sink(x)`` on the winner and loser rows of
prompt ``x``. Training prompt ``x + 1`` drives the sink weight down, which drags
the winner and loser of prompt ``x`` down together; with one pair per prompt
the pairwise loss still falls while ``pi(W[x]|x)`` drops below the reference.
"""

from __future__ import annotations

import csv
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import constraints
from .data import Pair
from .model import ModelPair, PolicyModel, PromptSpace
from .train import TrainConfig, collapse_metrics, train

SWEEP_LAMBDAS = (1e-3, 1e-2, 1e-1, 1.0)
SWEEP_VARIANTS = tuple(constraints.VARIANTS)

# toy-scale defaults for the experiment; see the README for how they were chosen
DEFAULT_K = 8
DEFAULT_GAMMA = 1.5
DEFAULT_BETA = 0.5
DEFAULT_LR = 0.05
DEFAULT_STEPS = 2000
DEFAULT_SAMPLES = 20000


@dataclass
class CouplingInstance:
    space: PromptSpace
    gamma: float
    features: np.ndarray  # (num_prompts, k, k)
    ref: PolicyModel
    winners: np.ndarray
    losers: np.ndarray
    sinks: np.ndarray
    r_star: np.ndarray  # latent reward consistent with every training pair
    seed: int

    @property
    def records(self):
        return [Pair(x, int(w), int(l))
                for x, (w, l) in enumerate(zip(self.winners, self.losers))]

    def model_pair(self):
        return ModelPair.from_reference(self.ref)


def build_coupling_instance(k=DEFAULT_K, gamma=DEFAULT_GAMMA, seed=0, num_prompts=None):
    if k < 3:
        raise ValueError(f"the coupling instance needs k >= 3 for a sink response, got {k}")
    if num_prompts is None:
        num_prompts = min(4, k // 2)
    if num_prompts < 1 or (num_prompts > 1 and 2 * num_prompts > k):
        raise ValueError(f"num_prompts must lie in [1, {max(1, k // 2)}] for k={k}")
    rng = np.random.default_rng(seed)
    perm = rng.permutation(k)
    winners = perm[:num_prompts]
    losers = perm[num_prompts:2 * num_prompts]
    # a single prompt has no neighbour whose loser could act as sink
    sinks = np.roll(losers, -1) if num_prompts > 1 else perm[2:3]

    features = np.broadcast_to(np.eye(k), (num_prompts, k, k)).copy()
    for x in range(num_prompts):
        features[x, winners[x], sinks[x]] += gamma
        features[x, losers[x], sinks[x]] += gamma
    ref = PolicyModel.linear(features, rng.standard_normal(k))

    r_star = rng.standard_normal((num_prompts, k))
    for x in range(num_prompts):
        row = r_star[x]
        hi = int(np.argmax(row))
        row[[winners[x], hi]] = row[[hi, winners[x]]]
        lo = int(np.argmin(row))
        row[[losers[x], lo]] = row[[lo, losers[x]]]
    return CouplingInstance(PromptSpace(num_prompts, k), float(gamma), features, ref,
                            winners, losers, sinks, r_star, seed)


def _probs(model):
    return model.probs() if isinstance(model, PolicyModel) else np.asarray(model, dtype=float)


def _inverse_cdf(probs, u):
    cdf = np.cumsum(probs, axis=1)
    cdf[:, -1] = np.inf  # guard against rounding in the final cumulative sum
    return np.array([np.searchsorted(c, row, side="right") for c, row in zip(cdf, u)])


def win_rate_proxy(model_a, model_b, r_star, samples, rng):
    """Monte-Carlo P(r*(Y_A) > r*(Y_B)) + P(tie)/2 averaged over prompts.

    Each model is a PolicyModel or an array of per-prompt probabilities. Two
    uniform streams drive inverse-CDF sampling and both assignments of streams
    to models are scored, so swapping the models under the same RNG state
    yields exactly ``1 - result``.
    """
    if samples < 1:
        raise ValueError(f"samples must be positive, got {samples}")
    pa, pb = _probs(model_a), _probs(model_b)
    r_star = np.asarray(r_star, dtype=float)
    n = r_star.shape[0]
    u1 = rng.random((n, samples))
    u2 = rng.random((n, samples))
    rows = np.arange(n)[:, None]

    def half_points(ya, yb):
        ra, rb = r_star[rows, ya], r_star[rows, yb]
        return 2 * np.count_nonzero(ra > rb) + np.count_nonzero(ra == rb)

    total = (half_points(_inverse_cdf(pa, u1), _inverse_cdf(pb, u2))
             + half_points(_inverse_cdf(pa, u2), _inverse_cdf(pb, u1)))
    return total / (4 * n * samples)


def expected_reward(model, r_star):
    """Mean over prompts of E_{y ~ model}[r*(x, y)], computed exactly."""
    return float((_probs(model) * r_star).sum(axis=1).mean())


def mass_shift(inst, model):
    """Change in probability from the reference, per prompt and response.

    Returns ``(shift, unseen)``: the ``(num_prompts, k)`` difference
    ``pi_theta - pi_ref`` and a boolean mask of the responses that appear in
    no training pair of that prompt. This is descriptive only: it shows where
    the mass drained from a collapsing pair ends up.
    """
    shift = _probs(model) - inst.ref.probs()
    unseen = np.ones_like(shift, dtype=bool)
    rows = np.arange(inst.space.num_prompts)
    unseen[rows, inst.winners] = False
    unseen[rows, inst.losers] = False
    return shift, unseen


@dataclass
class RunResult:
    variant: str
    lam: float
    seed: int
    min_winner_ratio: float
    final_winner_ratio: float  # worst (smallest) over tracked pairs
    final_loser_ratio: float  # largest over tracked pairs
    collapsed: bool
    expected_reward: float
    win_rate_vs_dpo: float
    params: np.ndarray

    @property
    def loser_below_ref(self):
        return self.final_loser_ratio < 1.0

    @property
    def mitigated(self):
        return not self.collapsed and self.loser_below_ref

    def row(self):
        return {
            "variant": self.variant, "lam": repr(self.lam), "seed": self.seed,
            "min_winner_ratio": repr(self.min_winner_ratio),
            "final_winner_ratio": repr(self.final_winner_ratio),
            "final_loser_ratio": repr(self.final_loser_ratio),
            "collapsed": int(self.collapsed),
            "expected_reward": repr(self.expected_reward),
            "win_rate_vs_dpo": repr(self.win_rate_vs_dpo),
        }


SWEEP_COLUMNS = ("variant", "lam", "seed", "min_winner_ratio", "final_winner_ratio",
                 "final_loser_ratio", "collapsed", "expected_reward", "win_rate_vs_dpo")


@dataclass(frozen=True)
class ExperimentSettings:
    k: int = DEFAULT_K
    gamma: float = DEFAULT_GAMMA
    beta: float = DEFAULT_BETA
    learning_rate: float = DEFAULT_LR
    steps: int = DEFAULT_STEPS
    samples: int = DEFAULT_SAMPLES
    num_prompts: int | None = None


def run_variant(settings, seed, variant, lam, dpo_params=None):
    """Train one (variant, lam) on the seed's instance and score it against DPO.

    ``variant`` is ``"dpo"`` or a C-3DPO variant name. ``dpo_params`` are the
    trained DPO weights for the win-rate comparison; when omitted the win rate
    is against the run itself (0.5).
    """
    inst = build_coupling_instance(settings.k, settings.gamma, seed, settings.num_prompts)
    pair = inst.model_pair()
    config = TrainConfig(loss=variant, beta=settings.beta, lam=lam,
                         learning_rate=settings.learning_rate, steps=settings.steps,
                         seed=seed, log_every=max(1, settings.steps // 100))
    report = train(pair, inst.records, config)
    summary = collapse_metrics(report)
    theta = pair.theta
    baseline = theta if dpo_params is None else inst.ref.with_params(dpo_params)
    win = win_rate_proxy(theta, baseline, inst.r_star, settings.samples,
                         np.random.default_rng([seed, 1]))
    return RunResult(variant, float(lam), seed,
                     float(summary.min_winner_ratio.min()),
                     float(summary.final_winner_ratio.min()),
                     float(summary.final_loser_ratio.max()),
                     summary.collapsed, expected_reward(theta, inst.r_star), float(win),
                     theta.params.copy())


def _star_run(args):
    return run_variant(*args)


def run_sweep(settings=ExperimentSettings(), seeds=(0, 1, 2), variants=SWEEP_VARIANTS,
              lambdas=SWEEP_LAMBDAS, jobs=1):
    """DPO baseline plus every (variant, lambda) for each seed.

    Returns a list of RunResult: the DPO rows (``lam = 0``) first, then the
    constrained runs in (seed, variant, lambda) order. Results do not depend on
    ``jobs``.
    """
    jobs = max(1, int(jobs))

    def run_all(tasks):
        if jobs == 1 or len(tasks) == 1:
            return [_star_run(t) for t in tasks]
        with ProcessPoolExecutor(max_workers=min(jobs, len(tasks), os.cpu_count() or 1)) as ex:
            return list(ex.map(_star_run, tasks))

    baselines = run_all([(settings, s, "dpo", 0.0, None) for s in seeds])
    by_seed = {r.seed: r.params for r in baselines}
    tasks = [(settings, s, v, lam, by_seed[s]) for s in seeds for v in variants for lam in lambdas]
    return baselines + run_all(tasks)


def best_constrained(results, seed):
    """The mitigating constrained run with the highest expected latent reward, or None."""
    cands = [r for r in results if r.seed == seed and r.variant != "dpo" and r.mitigated]
    return max(cands, key=lambda r: r.expected_reward, default=None)


def write_sweep_csv(results, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        out = csv.DictWriter(fh, SWEEP_COLUMNS, lineterminator="\n")
        out.writeheader()
        for r in results:
            out.writerow(r.row())
