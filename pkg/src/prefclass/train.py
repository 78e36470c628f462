"""Gradient descent on a policy's parameters with collapse diagnostics."""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import constraints
from .data import Pair, RankedList
from .errors import ConfigError, NumericalFailure
from .objective import BATCH_MEAN, LOSS_NAMES, PER_EXAMPLE, Batch, build_objective, evaluate

CSV_COLUMNS = ("step", "loss", "mean_residual", "pair_id", "prob_w", "prob_l", "rhat_w", "rhat_l")


@dataclass
class TrainConfig:
    loss: str = "dpo"
    beta: float = 0.1
    eps: float = 0.1
    lam: float = constraints.DEFAULT_LAMBDA
    base: str = "dpo"
    learning_rate: float = 0.1
    steps: int = 100
    batch_size: int | None = None  # None trains on the full dataset every step
    seed: int = 0
    early_stop: tuple | None = None  # ("loss", patience in logging intervals)
    penalty_reduction: str = PER_EXAMPLE
    momentum: float = 0.0
    log_every: int = 10
    max_tracked: int = 64

    def __post_init__(self):
        if self.loss not in LOSS_NAMES:
            raise ConfigError(f"unknown loss {self.loss!r}")
        for name in ("beta", "learning_rate"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v > 0):
                raise ConfigError(f"{name} must be finite and positive, got {v}")
        if not (math.isfinite(self.lam) and self.lam >= 0):
            raise ConfigError(f"lam must be finite and >= 0, got {self.lam}")
        if not 0 < self.eps < 0.5:
            raise ConfigError(f"eps must lie in (0, 1/2), got {self.eps}")
        if not 0 <= self.momentum < 1:
            raise ConfigError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.steps < 0 or self.log_every < 1 or self.max_tracked < 0:
            raise ConfigError("steps >= 0, log_every >= 1 and max_tracked >= 0 required")
        if self.batch_size is not None and self.batch_size < 1:
            raise ConfigError(f"batch_size must be positive, got {self.batch_size}")
        if self.penalty_reduction not in (PER_EXAMPLE, BATCH_MEAN):
            raise ConfigError(f"unknown penalty_reduction {self.penalty_reduction!r}")
        if self.early_stop is not None:
            metric, patience = self.early_stop
            if metric != "loss" or int(patience) < 1:
                raise ConfigError("early_stop must be ('loss', patience >= 1)")
            self.early_stop = (metric, int(patience))

    def objective(self):
        return build_objective(self.loss, self.beta, self.eps, self.lam, self.base,
                               self.penalty_reduction)

    def to_dict(self):
        d = asdict(self)
        d["early_stop"] = list(self.early_stop) if self.early_stop else None
        return d


@dataclass
class LogRow:
    step: int
    loss: float
    mean_residual: float
    prob_w: np.ndarray
    prob_l: np.ndarray
    rhat_w: np.ndarray
    rhat_l: np.ndarray


@dataclass
class TrainReport:
    tracked: list  # (prompt, winner, loser) per tracked pair
    ref_w: np.ndarray
    ref_l: np.ndarray
    rows: list = field(default_factory=list)
    final_params: np.ndarray | None = None
    best_step: int | None = None
    stopped_early: bool = False

    @property
    def steps(self):
        return [r.step for r in self.rows]

    def prob_w(self):
        return np.array([r.prob_w for r in self.rows])

    def prob_l(self):
        return np.array([r.prob_l for r in self.rows])

    def write_csv(self, path):
        with open(path, "w", newline="", encoding="utf-8") as fh:
            out = csv.writer(fh, lineterminator="\n")
            out.writerow(CSV_COLUMNS)
            for row in self.rows:
                for i in range(len(self.tracked)):
                    out.writerow([row.step, repr(row.loss), repr(row.mean_residual), i,
                                  repr(float(row.prob_w[i])), repr(float(row.prob_l[i])),
                                  repr(float(row.rhat_w[i])), repr(float(row.rhat_l[i]))])


def tracked_pairs(records, limit):
    seen = []
    for r in records:
        if isinstance(r, Pair):
            key = (r.prompt, r.winner, r.loser)
        elif isinstance(r, RankedList):
            key = (r.prompt, r.ranking[0], r.ranking[-1])
        else:
            continue
        if key not in seen:
            seen.append(key)
        if len(seen) >= limit:
            break
    return seen


def _log_row(step, pair, beta, ev, idx):
    lt = pair.theta.log_probs()
    lr = pair.ref_log_probs()
    x, w, l = idx
    return LogRow(step, ev.loss, ev.mean_residual,
                  np.exp(lt[x, w]), np.exp(lt[x, l]),
                  beta * (lt[x, w] - lr[x, w]), beta * (lt[x, l] - lr[x, l]))


def train(pair, records, config):
    """Run ``config.steps`` descent updates on ``pair.theta`` in place.

    Returns a TrainReport with one row at step 0, every ``log_every`` steps and
    at the last step.
    """
    records = list(records)
    if not records:
        raise ConfigError("training data is empty")
    objective = config.objective()
    bad = [r for r in records if not objective.accepts(r)]
    if bad:
        raise ConfigError(f"loss {config.loss} cannot train on {bad[0].variant} records")
    full = Batch(records)
    tracked = tracked_pairs(records, config.max_tracked)
    idx = tuple(np.array(c, dtype=np.int64) for c in zip(*tracked)) if tracked else (
        np.zeros(0, np.int64),) * 3
    lr_mat = pair.ref_log_probs()
    report = TrainReport(tracked, np.exp(lr_mat[idx[0], idx[1]]), np.exp(lr_mat[idx[0], idx[2]]))

    rng = np.random.default_rng(config.seed)
    order = np.arange(len(records))
    cursor = len(records)
    velocity = np.zeros_like(pair.theta.params)
    best = (math.inf, pair.theta.params.copy(), 0)
    stale = 0

    def log(step, ev):
        nonlocal best, stale
        if config.batch_size is not None:
            ev = evaluate(pair, objective, full, with_grad=False)
        report.rows.append(_log_row(step, pair, config.beta, ev, idx))
        if not math.isfinite(ev.loss):
            report.final_params = pair.theta.params.copy()
            raise NumericalFailure(f"non-finite loss at step {step}", report)
        if ev.loss < best[0] - 1e-12:
            best = (ev.loss, pair.theta.params.copy(), step)
            stale = 0
        else:
            stale += 1

    for step in range(config.steps + 1):
        if config.batch_size is None:
            batch = full
        else:
            if cursor + config.batch_size > len(records):
                order = rng.permutation(len(records))
                cursor = 0
            batch = full.take(order[cursor:cursor + config.batch_size])
            cursor += config.batch_size
        is_last = step == config.steps
        need_grad = not is_last
        ev = evaluate(pair, objective, batch, with_grad=need_grad)
        if step % config.log_every == 0 or is_last:
            log(step, ev)
            if config.early_stop and stale >= config.early_stop[1]:
                report.stopped_early = True
                break
        if is_last:
            break
        if not (math.isfinite(ev.loss) and np.all(np.isfinite(ev.grad))):
            report.final_params = pair.theta.params.copy()
            raise NumericalFailure(f"non-finite loss or gradient at step {step}", report)
        velocity = config.momentum * velocity + ev.grad
        pair.theta.params -= config.learning_rate * velocity

    if config.early_stop:
        pair.theta.params[:] = best[1]
        report.best_step = best[2]
    report.final_params = pair.theta.params.copy()
    return report


@dataclass
class CollapseSummary:
    min_winner_ratio: np.ndarray
    final_winner_ratio: np.ndarray
    final_loser_ratio: np.ndarray

    @property
    def collapsed(self):
        return bool(np.any(self.final_winner_ratio < 1.0))


def collapse_metrics(report, refs=None):
    """Winner/loser probability ratios against the reference, per tracked pair.

    ``refs`` optionally overrides the reference probabilities stored in the
    report as a ``(ref_w, ref_l)`` tuple of arrays.
    """
    if not report.rows:
        raise ValueError("empty report")
    ref_w, ref_l = refs if refs is not None else (report.ref_w, report.ref_l)
    pw = report.prob_w() / ref_w
    return CollapseSummary(pw.min(axis=0), pw[-1], report.rows[-1].prob_l / ref_l)
