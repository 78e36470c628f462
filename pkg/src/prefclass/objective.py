"""Batched loss and analytic gradient for any preset, with or without a constraint.

Every loss here depends on the trainable policy only through the log-probs of
the responses named in each record, so the gradient is assembled as
``sum_i dL/dlog pi(y_i|x) * grad log pi(y_i|x)`` and chained through the
softmax once per batch.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from . import constraints, losses
from .data import Pair, RankedList, ScoredPair
from .errors import ConfigError, UnsupportedFormError

PER_EXAMPLE = "per_example"
BATCH_MEAN = "batch_mean"

LOSS_NAMES = losses.PRESET_NAMES + tuple(constraints.VARIANTS)


@dataclass(frozen=True)
class Objective:
    preset: losses.Preset
    beta: float
    constraint: constraints.ConstraintSpec | None = None
    penalty_reduction: str = PER_EXAMPLE

    def __post_init__(self):
        if not self.beta > 0:
            raise ConfigError(f"beta must be positive, got {self.beta}")
        if self.penalty_reduction not in (PER_EXAMPLE, BATCH_MEAN):
            raise ConfigError(f"unknown penalty_reduction {self.penalty_reduction!r}")
        if self.constraint is not None and self.preset.variant == "list":
            raise ConfigError("constraints apply to pair presets only")

    def accepts(self, record):
        return self.preset.accepts(record)


def build_objective(loss, beta, eps=0.1, lam=constraints.DEFAULT_LAMBDA, base="dpo",
                    penalty_reduction=PER_EXAMPLE):
    """Objective from a config name: a preset name or a ``c3dpo_*`` variant over ``base``."""
    try:
        if loss in losses.PRESET_NAMES:
            return Objective(losses.preset(loss, eps), beta, None, penalty_reduction)
        if loss in constraints.VARIANTS:
            cons = constraints.ConstraintSpec.from_variant(loss, lam)
            return Objective(losses.preset(base, eps), beta, cons, penalty_reduction)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    raise ConfigError(f"unknown loss {loss!r}; expected one of {LOSS_NAMES}")


class Batch:
    """Array view of a list of records, ready for vectorized evaluation."""

    def __init__(self, records):
        records = list(records)
        if not records:
            raise ValueError("empty batch")
        self.records = records
        self.size = len(records)
        pairs = [r for r in records if isinstance(r, Pair)]
        self.pair_x = np.array([r.prompt for r in pairs], dtype=np.int64)
        self.pair_w = np.array([r.winner for r in pairs], dtype=np.int64)
        self.pair_l = np.array([r.loser for r in pairs], dtype=np.int64)
        self.scored = bool(pairs) and all(isinstance(r, ScoredPair) for r in pairs)
        if self.scored:
            self.score_w = np.array([r.score_w for r in pairs])
            self.score_l = np.array([r.score_l for r in pairs])
        groups = {}
        for r in records:
            if isinstance(r, RankedList):
                groups.setdefault(len(r.ranking), []).append(r)
        self.lists = {
            n: (np.array([r.prompt for r in rs], dtype=np.int64),
                np.array([r.ranking for r in rs], dtype=np.int64))
            for n, rs in sorted(groups.items())
        }

    @property
    def num_pairs(self):
        return self.pair_x.size

    def take(self, idx):
        return Batch([self.records[i] for i in idx])


@dataclass
class Evaluation:
    loss: float
    grad: np.ndarray | None
    mean_residual: float
    losses: np.ndarray


def _pair_targets(objective, batch):
    labels = objective.preset.labels
    if labels.kind == losses.SCORE_DERIVED:
        if not batch.scored:
            raise UnsupportedFormError("score-derived labels need scored_pair records")
        d = batch.score_w - batch.score_l
        return expit(d), expit(-d), d
    t = losses.make_labels(labels, None)
    return t.probs[0], t.probs[1], t.log_odds


def evaluate(pair, objective, batch, with_grad=True):
    """Mean loss over ``batch`` (and its gradient w.r.t. the theta parameters)."""
    for r in batch.records:
        if not objective.accepts(r):
            raise UnsupportedFormError(
                f"loss {objective.preset.name} cannot use a {r.variant} record"
            )
    beta = objective.beta
    lt = pair.theta.log_probs()
    lr = pair.ref_log_probs()
    acc = np.zeros_like(lt)  # d loss / d log pi_theta, summed over the batch
    per_record = []
    mean_residual = float("nan")

    if batch.num_pairs:
        x, w, l = batch.pair_x, batch.pair_w, batch.pair_l
        lt_w, lt_l, lr_w, lr_l = lt[x, w], lt[x, l], lr[x, w], lr[x, l]
        h_w = beta * (lt_w - lr_w)
        h_l = beta * (lt_l - lr_l)
        t_w, t_l, t_odds = _pair_targets(objective, batch)
        loss, dmargin = losses.pair_loss_from_margin(objective.preset.loss, h_w - h_l,
                                                     t_w, t_l, t_odds)
        g_w = beta * dmargin
        g_l = -beta * dmargin
        cons = objective.constraint
        phi = cons.phi if cons is not None else constraints.LOG
        r, dr_w, dr_l = constraints.residual_terms(phi, lt_w, lt_l, lr_w, lr_l)
        mean_residual = float(r.mean())
        if cons is not None:
            pen = constraints.penalty(r, cons.norm)
            if objective.penalty_reduction == BATCH_MEAN:
                pen = np.full_like(pen, pen.mean())
            loss = loss + cons.lam * pen
            pg = constraints.penalty_grad(r, cons.norm)
            g_w = g_w + cons.lam * pg * dr_w
            g_l = g_l + cons.lam * pg * dr_l
        per_record.append(loss)
        if with_grad:
            np.add.at(acc, (x, w), g_w)
            np.add.at(acc, (x, l), g_l)

    for n, (x, rank) in batch.lists.items():
        h = beta * (lt[x[:, None], rank] - lr[x[:, None], rank])
        loss, dh = losses.pl_loss_from_scores(h)
        per_record.append(loss)
        if with_grad:
            np.add.at(acc, (np.repeat(x, n), rank.ravel()), (beta * dh).ravel())

    all_losses = np.concatenate(per_record)
    mean_loss = float(all_losses.sum() / batch.size)
    grad = None
    if with_grad:
        acc /= batch.size
        probs = np.exp(lt)
        logit_grad = acc - probs * acc.sum(axis=1, keepdims=True)
        grad = pair.theta.params_grad(logit_grad)
    return Evaluation(mean_loss, grad, mean_residual, all_losses)


def loss_and_grad(pair, objective, records):
    ev = evaluate(pair, objective, records if isinstance(records, Batch) else Batch(records))
    return ev.loss, ev.grad
