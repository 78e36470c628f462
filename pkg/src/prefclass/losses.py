"""DPO-style objectives as classification over implicit rewards.

A record's responses are scored by their implicit rewards
``h_y = beta * (log pi_theta(y|x) - log pi_ref(y|x))``; the softmax of those
scores is the model's class distribution. A label strategy supplies the target
distribution and a classification loss compares the two. The named presets
(``dpo``, ``cdpo``, ``ipo``, ``dpo_pl``, ``rpo``, ``distilled_dpo``) are
particular (labels, loss, record-variant) combinations.

Everything is evaluated from score differences through log-sigmoid and
log-sum-exp; probabilities are never exponentiated and re-logged.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit, log_expit, log_softmax, softmax

from .data import Pair, RankedList, ScoredPair
from .errors import InvalidRecordError, MissingScoreError, UnsupportedFormError

HARD = "hard"
SOFT_EPS = "soft_eps"
IPO_LABELS = "ipo"
SCORE_DERIVED = "score"

CROSS_ENTROPY = "ce"
SQUARED_LOG_RATIO = "slr"


@dataclass(frozen=True)
class LabelSpec:
    kind: str
    eps: float | None = None

    def __post_init__(self):
        if self.kind not in (HARD, SOFT_EPS, IPO_LABELS, SCORE_DERIVED):
            raise ValueError(f"unknown label kind {self.kind!r}")
        if self.kind == SOFT_EPS and not (self.eps is not None and 0.0 < self.eps < 0.5):
            raise ValueError(f"soft labels need 0 < eps < 1/2, got {self.eps}")

    @classmethod
    def hard(cls):
        return cls(HARD)

    @classmethod
    def soft(cls, eps):
        return cls(SOFT_EPS, eps)

    @classmethod
    def ipo(cls):
        return cls(IPO_LABELS)

    @classmethod
    def score_derived(cls):
        return cls(SCORE_DERIVED)


@dataclass(frozen=True)
class Target:
    """Target class distribution with its exact log-odds (pair form only)."""

    probs: np.ndarray
    log_odds: float | None = None

    def __array__(self, dtype=None, copy=None):
        return np.asarray(self.probs, dtype=dtype)

    def entropy(self):
        p = self.probs[self.probs > 0]
        return float(-(p * np.log(p)).sum())


@dataclass(frozen=True)
class ClassProb:
    """Model class distribution kept in log space, plus the scores it came from."""

    log_p: np.ndarray
    scores: np.ndarray

    @property
    def probs(self):
        return np.exp(self.log_p)

    @property
    def is_pair(self):
        return self.log_p.size == 2

    @property
    def p_w(self):
        return float(np.exp(self.log_p[0]))

    @property
    def p_l(self):
        return float(np.exp(self.log_p[-1]))

    @property
    def log_odds(self):
        if not self.is_pair:
            raise UnsupportedFormError("log-odds are defined for pairs only")
        return float(self.scores[0] - self.scores[1])


def _check_beta(beta):
    if not beta > 0:
        raise ValueError(f"beta must be positive, got {beta}")


def _log_ratios(pair, x, ys):
    lt = pair.theta.log_probs()[x, list(ys)]
    lr = pair.ref_log_probs()[x, list(ys)]
    return lt, lr


def classifier_prob_pair(pair, beta, record):
    _check_beta(beta)
    lt, lr = _log_ratios(pair, record.prompt, (record.winner, record.loser))
    h = beta * (lt - lr)
    m = h[0] - h[1]
    return ClassProb(np.array([log_expit(m), log_expit(-m)]), h)


def classifier_prob_list(pair, beta, candidates):
    _check_beta(beta)
    if isinstance(candidates, RankedList):
        x, ys = candidates.prompt, candidates.ranking
    else:
        x, ys = candidates
    ys = [int(y) for y in ys]
    if len(ys) < 2 or len(set(ys)) != len(ys):
        raise InvalidRecordError(f"need at least two distinct candidates, got {ys}")
    lt, lr = _log_ratios(pair, x, ys)
    h = beta * (lt - lr)
    return ClassProb(log_softmax(h), h)


def make_labels(spec, record):
    if spec.kind == HARD:
        return Target(np.array([1.0, 0.0]), np.inf)
    if spec.kind == SOFT_EPS:
        eps = spec.eps
        return Target(np.array([1.0 - eps, eps]), float(np.log1p(-eps) - np.log(eps)))
    if spec.kind == IPO_LABELS:
        return Target(np.array([expit(0.5), expit(-0.5)]), 0.5)
    if not isinstance(record, ScoredPair):
        raise MissingScoreError("score-derived labels need a scored_pair record")
    d = record.score_w - record.score_l
    return Target(np.array([expit(d), expit(-d)]), float(d))


def ce_loss(p_model, p_target):
    t = np.asarray(p_target, dtype=np.float64)
    if t.shape != p_model.log_p.shape:
        raise ValueError(f"dimension mismatch: model {p_model.log_p.shape}, target {t.shape}")
    nz = t > 0
    return float(-(t[nz] * p_model.log_p[nz]).sum())


def ce_excess(p_model, p_target):
    """Cross-entropy minus target entropy, i.e. KL(target || model); zero iff equal."""
    t = p_target if isinstance(p_target, Target) else Target(np.asarray(p_target, float))
    return ce_loss(p_model, t) - t.entropy()


def slr_loss(p_model, p_target):
    if not p_model.is_pair:
        raise UnsupportedFormError("squared log-ratio loss is defined for pairs only")
    if isinstance(p_target, Target) and p_target.log_odds is not None:
        target_odds = p_target.log_odds
    else:
        t = np.asarray(p_target, dtype=np.float64)
        target_odds = float(np.log(t[0]) - np.log(t[1]))
    return float((p_model.log_odds - target_odds) ** 2)


def list_loss_pl(pair, beta, record):
    """Plackett-Luce loss: hard-label CE summed over the ranking's suffixes."""
    if not isinstance(record, RankedList):
        raise InvalidRecordError("list loss needs a ranked-list record")
    _check_beta(beta)
    lt, lr = _log_ratios(pair, record.prompt, record.ranking)
    loss, _ = pl_loss_from_scores((beta * (lt - lr))[None, :])
    return float(loss[0])


# array kernels shared with the batched objective ----------------------------

def pair_loss_from_margin(kind, margin, t_w, t_l, t_log_odds):
    """Loss and d loss / d margin for pair classification, elementwise.

    ``margin`` is ``h_w - h_l``; the targets are broadcastable arrays.
    """
    if kind == CROSS_ENTROPY:
        loss = -(t_w * log_expit(margin)) - t_l * log_expit(-margin)
        dmargin = t_l * expit(margin) - t_w * expit(-margin)
    elif kind == SQUARED_LOG_RATIO:
        diff = margin - t_log_odds
        loss = diff * diff
        dmargin = 2.0 * diff
    else:
        raise ValueError(f"unknown loss kind {kind!r}")
    return loss, dmargin


def pl_loss_from_scores(h):
    """Plackett-Luce loss per row of ``h`` (shape (B, N), best first) and its score gradient."""
    h = np.atleast_2d(h)
    b, n = h.shape
    loss = np.zeros(b)
    grad = np.zeros_like(h)
    for i in range(n - 1):
        tail = h[:, i:]
        # log(1 + sum_j exp(d_j)) with d_j = h_j - h_i; log1p keeps precision
        # when item i dominates and the term is tiny
        d = h[:, i + 1:] - h[:, i:i + 1]
        top = np.maximum(d.max(axis=1), 0.0)
        with np.errstate(over="ignore"):
            small = np.log1p(np.exp(d).sum(axis=1))
        big = top + np.log(np.exp(-top) + np.exp(d - top[:, None]).sum(axis=1))
        loss += np.where(top > 0, big, small)
        grad[:, i:] += softmax(tail, axis=1)
        grad[:, i] -= 1.0
    return loss, grad


@dataclass(frozen=True)
class Preset:
    name: str
    labels: LabelSpec
    loss: str
    variant: str

    def accepts(self, record):
        if self.variant == "list":
            return isinstance(record, RankedList)
        if self.variant == "scored_pair":
            return isinstance(record, ScoredPair)
        return isinstance(record, Pair)


PRESET_NAMES = ("dpo", "cdpo", "ipo", "dpo_pl", "rpo", "distilled_dpo")


def preset(name, eps=0.1):
    """Look up a named DPO-style algorithm; ``eps`` only matters for ``cdpo``."""
    table = {
        "dpo": (LabelSpec.hard, CROSS_ENTROPY, "pair"),
        "cdpo": (lambda: LabelSpec.soft(eps), CROSS_ENTROPY, "pair"),
        "ipo": (LabelSpec.ipo, SQUARED_LOG_RATIO, "pair"),
        "dpo_pl": (LabelSpec.hard, CROSS_ENTROPY, "list"),
        "rpo": (LabelSpec.score_derived, CROSS_ENTROPY, "scored_pair"),
        "distilled_dpo": (LabelSpec.score_derived, SQUARED_LOG_RATIO, "scored_pair"),
    }
    if name not in table:
        raise ValueError(f"unknown preset {name!r}; expected one of {PRESET_NAMES}")
    labels, loss, variant = table[name]
    return Preset(name, labels(), loss, variant)


def preset_loss(pair, beta, record, spec):
    """Loss of one record under a Preset."""
    if not spec.accepts(record):
        raise UnsupportedFormError(f"preset {spec.name} cannot use a {record.variant} record")
    if spec.variant == "list":
        return list_loss_pl(pair, beta, record)
    p_model = classifier_prob_pair(pair, beta, record)
    target = make_labels(spec.labels, record)
    if spec.loss == CROSS_ENTROPY:
        return ce_loss(p_model, target)
    return slr_loss(p_model, target)
