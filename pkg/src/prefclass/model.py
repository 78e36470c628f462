"""Softmax policies over finite prompt/response spaces.

Two parameterizations are supported:

* ``tabular``: one free logit per (prompt, response).
* ``linear``: logits ``Phi[x, y] @ w`` with a fixed feature tensor ``Phi`` of
  shape ``(num_prompts, k, d)`` and shared trainable weights ``w``.

Every model exposes its trainable parameters as one flat float64 vector so the
trainer and the gradient checks can treat both kinds uniformly.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.special import log_softmax

TABULAR = "tabular"
LINEAR = "linear"


@dataclass(frozen=True)
class PromptSpace:
    num_prompts: int
    k: int

    def __post_init__(self):
        if self.num_prompts < 1:
            raise ValueError(f"num_prompts must be positive, got {self.num_prompts}")
        if self.k < 2:
            raise ValueError(f"need at least two responses per prompt, got k={self.k}")

    def check(self, x, y=None):
        if not 0 <= x < self.num_prompts:
            raise IndexError(f"prompt {x} out of range [0, {self.num_prompts})")
        if y is not None and not 0 <= y < self.k:
            raise IndexError(f"response {y} out of range [0, {self.k})")


class PolicyModel:
    """Conditional distribution pi(y|x) = softmax_y(logits[x, y])."""

    def __init__(self, kind, space, params, features=None):
        if kind not in (TABULAR, LINEAR):
            raise ValueError(f"unknown model kind {kind!r}")
        self.kind = kind
        self.space = space
        self.params = np.array(params, dtype=np.float64).ravel()
        if kind == TABULAR:
            if features is not None:
                raise ValueError("tabular models take no features")
            if self.params.size != space.num_prompts * space.k:
                raise ValueError("tabular params must have num_prompts * k entries")
            self.features = None
        else:
            features = np.array(features, dtype=np.float64)
            if features.ndim != 3 or features.shape[:2] != (space.num_prompts, space.k):
                raise ValueError(
                    f"features must have shape ({space.num_prompts}, {space.k}, d), "
                    f"got {features.shape}"
                )
            if features.shape[2] != self.params.size:
                raise ValueError("weights length must match feature dimension")
            features.setflags(write=False)
            self.features = features

    @classmethod
    def tabular(cls, logits):
        logits = np.asarray(logits, dtype=np.float64)
        if logits.ndim != 2:
            raise ValueError("logits must be a (num_prompts, k) matrix")
        return cls(TABULAR, PromptSpace(*logits.shape), logits)

    @classmethod
    def linear(cls, features, weights):
        features = np.asarray(features, dtype=np.float64)
        return cls(LINEAR, PromptSpace(features.shape[0], features.shape[1]), weights, features)

    @property
    def num_params(self):
        return self.params.size

    def with_params(self, params):
        """Same model structure, different parameter vector (features are shared)."""
        return PolicyModel(self.kind, self.space, params, self.features)

    def copy(self):
        return self.with_params(self.params.copy())

    def logits(self):
        if self.kind == TABULAR:
            return self.params.reshape(self.space.num_prompts, self.space.k)
        return self.features @ self.params

    def log_probs(self):
        """Matrix of log pi(y|x), shape (num_prompts, k)."""
        return log_softmax(self.logits(), axis=1)

    def probs(self):
        return np.exp(self.log_probs())

    def log_prob(self, x, y):
        self.space.check(x, y)
        if self.kind == TABULAR:
            row = self.logits()[x]
        else:
            row = self.features[x] @ self.params
        return float(log_softmax(row)[y])

    def params_grad(self, logit_grad):
        """Chain a gradient w.r.t. the logit matrix down to the flat parameters."""
        if self.kind == TABULAR:
            return np.asarray(logit_grad, dtype=np.float64).ravel().copy()
        return np.einsum("xy,xyd->d", logit_grad, self.features)

    def grad_log_prob(self, x, y):
        self.space.check(x, y)
        logits = self.features[x] @ self.params if self.kind == LINEAR else self.logits()[x]
        row = -np.exp(log_softmax(logits))
        row[y] += 1.0
        if self.kind == TABULAR:
            g = np.zeros((self.space.num_prompts, self.space.k))
            g[x] = row
            return g.ravel()
        return row @ self.features[x]

    def to_dict(self):
        out = {"kind": self.kind, "num_prompts": self.space.num_prompts, "k": self.space.k}
        if self.kind == TABULAR:
            out["logits"] = self.logits().tolist()
        else:
            out["features"] = self.features.tolist()
            out["weights"] = self.params.tolist()
        return out

    @classmethod
    def from_dict(cls, data):
        allowed = {"kind", "num_prompts", "k", "logits", "features", "weights"}
        unknown = set(data) - allowed
        if unknown:
            raise ValueError(f"unknown model keys: {sorted(unknown)}")
        space = PromptSpace(int(data["num_prompts"]), int(data["k"]))
        if data["kind"] == TABULAR:
            logits = np.array(data["logits"], dtype=np.float64)
            if logits.shape != (space.num_prompts, space.k):
                raise ValueError("logits shape does not match num_prompts/k")
            return cls(TABULAR, space, logits)
        if data["kind"] == LINEAR:
            return cls(LINEAR, space, data["weights"], data["features"])
        raise ValueError(f"unknown model kind {data['kind']!r}")

    def save(self, path):
        # json emits the shortest repr of each float, which round-trips bit-exactly
        Path(path).write_text(json.dumps(self.to_dict()) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path):
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))

    def __repr__(self):
        return (
            f"PolicyModel(kind={self.kind!r}, num_prompts={self.space.num_prompts}, "
            f"k={self.space.k}, num_params={self.num_params})"
        )


class ModelPair:
    """A trainable policy together with its frozen reference."""

    def __init__(self, theta, ref):
        if theta.space != ref.space:
            raise ValueError("theta and ref must share a prompt space")
        self.theta = theta
        # ref must never move; freeze the parameter buffer
        ref.params.setflags(write=False)
        self.ref = ref
        self._ref_log_probs = ref.log_probs()
        self._ref_log_probs.setflags(write=False)

    @classmethod
    def from_reference(cls, ref):
        """Start training from a copy of the reference parameters."""
        return cls(ref.copy(), ref)

    @property
    def space(self):
        return self.ref.space

    def ref_log_probs(self):
        return self._ref_log_probs

    def with_theta_params(self, params):
        return ModelPair(self.theta.with_params(params), self.ref)


def log_prob(model, x, y):
    return model.log_prob(x, y)


def grad_log_prob(model, x, y):
    return model.grad_log_prob(x, y)


def implicit_reward(pair, beta, x, y):
    """beta * log(pi_theta(y|x) / pi_ref(y|x))."""
    if beta <= 0:
        raise ValueError(f"beta must be positive, got {beta}")
    return beta * (pair.theta.log_prob(x, y) - pair.ref.log_prob(x, y))
