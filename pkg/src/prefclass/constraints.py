"""Probability-mass constraints between the trained and reference policy.

For a pair (y_w, y_l) a monotone ``phi`` defines the conservation law
``phi(pi_theta(y_w)) + phi(pi_theta(y_l)) = phi(pi_ref(y_w)) + phi(pi_ref(y_l))``.
Two instances are shipped: ``phi = log`` and ``phi = identity``. The training
path enforces them softly with an l1 (``|r|``) or l2 (``r**2``) penalty on the
residual ``r``, added with weight ``lam`` to a pair preset's loss.

Variant names follow the usual identifiers but with the mathematical meaning
of the norm: ``*_l1`` is the absolute value, ``*_l2`` the square.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import expit, log_expit

from . import losses
from .data import Pair
from .errors import UnsupportedFormError

LOG = "log"
IDENTITY = "identity"
L1 = "l1"
L2 = "l2"

DEFAULT_LAMBDA = 2e-4

VARIANTS = {
    "c3dpo_log_l1": (LOG, L1),
    "c3dpo_log_l2": (LOG, L2),
    "c3dpo_i_l1": (IDENTITY, L1),
    "c3dpo_i_l2": (IDENTITY, L2),
}


@dataclass(frozen=True)
class ConstraintSpec:
    phi: str = LOG
    norm: str = L2
    lam: float = DEFAULT_LAMBDA

    def __post_init__(self):
        if self.phi not in (LOG, IDENTITY):
            raise ValueError(f"phi must be 'log' or 'identity', got {self.phi!r}")
        if self.norm not in (L1, L2):
            raise ValueError(f"norm must be 'l1' or 'l2', got {self.norm!r}")
        if not (math.isfinite(self.lam) and self.lam >= 0):
            raise ValueError(f"lambda must be finite and >= 0, got {self.lam}")

    @classmethod
    def from_variant(cls, name, lam=DEFAULT_LAMBDA):
        if name not in VARIANTS:
            raise ValueError(f"unknown constraint variant {name!r}")
        phi, norm = VARIANTS[name]
        return cls(phi, norm, lam)

    @property
    def variant(self):
        return "c3dpo_" + ("log" if self.phi == LOG else "i") + "_" + self.norm


# array kernels -------------------------------------------------------------

def log_residual_terms(lt_w, lt_l, lr_w, lr_l):
    """Residual of the log constraint and its partials w.r.t. the two theta log-probs."""
    r = (lt_w + lt_l) - (lr_w + lr_l)
    ones = np.ones_like(r)
    return r, ones, ones


def identity_residual_terms(lt_w, lt_l, lr_w, lr_l):
    """Residual of the identity constraint, written in log space.

    Uses ``log(a + b) = log a - log sigmoid(log a - log b)`` on both policies.
    """
    d_theta = lt_w - lt_l
    r = (lt_w - log_expit(d_theta)) - (lr_w - log_expit(lr_w - lr_l))
    return r, expit(d_theta), expit(-d_theta)


def residual_terms(phi, lt_w, lt_l, lr_w, lr_l):
    if phi == LOG:
        return log_residual_terms(lt_w, lt_l, lr_w, lr_l)
    if phi == IDENTITY:
        return identity_residual_terms(lt_w, lt_l, lr_w, lr_l)
    raise ValueError(f"unknown phi {phi!r}")


def penalty(residual, norm):
    if norm == L1:
        return np.abs(residual)
    if norm == L2:
        return residual * residual
    raise ValueError(f"unknown norm {norm!r}")


def penalty_grad(residual, norm):
    # np.sign(0) == 0 gives the zero subgradient at the kink
    if norm == L1:
        return np.sign(residual)
    if norm == L2:
        return 2.0 * residual
    raise ValueError(f"unknown norm {norm!r}")


# per-record API ------------------------------------------------------------

def _pair_logps(pair, record):
    if not isinstance(record, Pair):
        raise UnsupportedFormError(f"constraints need a pair record, got {record.variant}")
    lt = pair.theta.log_probs()[record.prompt]
    lr = pair.ref_log_probs()[record.prompt]
    return lt[record.winner], lt[record.loser], lr[record.winner], lr[record.loser]


def residual_log(pair, record):
    return float(log_residual_terms(*_pair_logps(pair, record))[0])


def residual_identity(pair, record):
    return float(identity_residual_terms(*_pair_logps(pair, record))[0])


def check_lemma1(a, b):
    """|log(a+b) - (log a - log sigmoid(log a - log b))| for positive a, b."""
    if not (a > 0 and b > 0):
        raise ValueError(f"need a, b > 0, got a={a}, b={b}")
    la, lb = math.log(a), math.log(b)
    return abs(math.log(a + b) - (la - float(log_expit(la - lb))))


def c3dpo_loss(pair, beta, record, base="dpo", cons=None, eps=0.1):
    """Pair-preset loss plus ``lam * penalty(residual_phi)``."""
    cons = cons or ConstraintSpec()
    spec = losses.preset(base, eps) if isinstance(base, str) else base
    if spec.variant == "list":
        raise UnsupportedFormError("the pair constraint cannot be attached to a list preset")
    base_loss = losses.preset_loss(pair, beta, record, spec)
    r = residual_terms(cons.phi, *_pair_logps(pair, record))[0]
    return float(base_loss + cons.lam * penalty(r, cons.norm))


def implicit_reward_form(pair, beta, record, lam=DEFAULT_LAMBDA):
    """DPO + log-l2 penalty rewritten in terms of the implicit rewards r_w, r_l."""
    lt_w, lt_l, lr_w, lr_l = _pair_logps(pair, record)
    r_w = beta * (lt_w - lr_w)
    r_l = beta * (lt_l - lr_l)
    return float(-log_expit(r_w - r_l) + (lam / beta**2) * (r_w + r_l) ** 2)
