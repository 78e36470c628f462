"""Preference records, JSONL persistence and synthetic preference sampling.

Synthetic preferences come from a latent reward table ``r_star[x, y]``:
pairs follow the Bradley-Terry model and rankings the Plackett-Luce model.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from itertools import combinations
from pathlib import Path

import numpy as np
from scipy.special import expit

from .errors import InvalidRecordError, RecordParseError

RNG_ALGORITHM = "numpy.random.Generator(PCG64)"


@dataclass(frozen=True)
class Pair:
    prompt: int
    winner: int
    loser: int

    variant = "pair"

    def __post_init__(self):
        if self.winner == self.loser:
            raise InvalidRecordError(f"winner and loser are both {self.winner}")

    @property
    def responses(self):
        return (self.winner, self.loser)

    def to_dict(self):
        return {"variant": self.variant, "prompt": self.prompt,
                "winner": self.winner, "loser": self.loser}


@dataclass(frozen=True)
class ScoredPair(Pair):
    score_w: float = 0.0
    score_l: float = 0.0

    variant = "scored_pair"

    def to_dict(self):
        out = super().to_dict()
        out.update(variant=self.variant, score_w=self.score_w, score_l=self.score_l)
        return out


@dataclass(frozen=True)
class RankedList:
    """A full ranking ``ranking[0] > ranking[1] > ...`` (best first)."""

    prompt: int
    ranking: tuple

    variant = "list"

    def __post_init__(self):
        object.__setattr__(self, "ranking", tuple(int(y) for y in self.ranking))
        if len(self.ranking) < 2:
            raise InvalidRecordError("a ranking needs at least two responses")
        if len(set(self.ranking)) != len(self.ranking):
            raise InvalidRecordError(f"duplicate responses in ranking {self.ranking}")

    @property
    def responses(self):
        return self.ranking

    def to_dict(self):
        return {"variant": self.variant, "prompt": self.prompt, "ranking": list(self.ranking)}


_KEYS = {
    "pair": {"variant", "prompt", "winner", "loser"},
    "scored_pair": {"variant", "prompt", "winner", "loser", "score_w", "score_l"},
    "list": {"variant", "prompt", "ranking"},
}


def validate_record(record, space):
    """Check every id of ``record`` against a PromptSpace."""
    if not 0 <= record.prompt < space.num_prompts:
        raise InvalidRecordError(f"prompt {record.prompt} out of range")
    for y in record.responses:
        if not 0 <= y < space.k:
            raise InvalidRecordError(f"response {y} out of range [0, {space.k})")
    if isinstance(record, RankedList) and len(record.ranking) > space.k:
        raise InvalidRecordError("ranking longer than the response set")


def record_from_dict(data):
    variant = data.get("variant")
    if variant not in _KEYS:
        raise InvalidRecordError(f"unknown variant {variant!r}")
    keys = set(data)
    if keys != _KEYS[variant]:
        extra, missing = keys - _KEYS[variant], _KEYS[variant] - keys
        raise InvalidRecordError(
            f"bad keys for {variant}: unexpected {sorted(extra)}, missing {sorted(missing)}"
        )
    for key in ("prompt", "winner", "loser"):
        if key in data and (not isinstance(data[key], int) or isinstance(data[key], bool)):
            raise InvalidRecordError(f"{key} must be an integer")
    if variant == "pair":
        return Pair(data["prompt"], data["winner"], data["loser"])
    if variant == "scored_pair":
        return ScoredPair(data["prompt"], data["winner"], data["loser"],
                          float(data["score_w"]), float(data["score_l"]))
    ranking = data["ranking"]
    if not isinstance(ranking, list) or not all(
        isinstance(y, int) and not isinstance(y, bool) for y in ranking
    ):
        raise InvalidRecordError("ranking must be a list of integers")
    return RankedList(data["prompt"], tuple(ranking))


def write_jsonl(records, path):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for rec in records:
            fh.write(json.dumps(rec.to_dict()) + "\n")


def read_jsonl(path, space=None):
    """Read records; errors carry the 1-based line number."""
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                data = json.loads(line)
            except json.JSONDecodeError as exc:
                raise RecordParseError(lineno, f"invalid JSON ({exc.msg})") from None
            if not isinstance(data, dict):
                raise RecordParseError(lineno, "expected a JSON object")
            try:
                rec = record_from_dict(data)
                if space is not None:
                    validate_record(rec, space)
            except InvalidRecordError as exc:
                raise InvalidRecordError(f"line {lineno}: {exc}") from None
            records.append(rec)
    return records


def sample_pair(r_star, x, y_a, y_b, rng):
    """Bradley-Terry draw: ``y_a`` wins with probability sigmoid(r*(x,y_a) - r*(x,y_b))."""
    if y_a == y_b:
        raise InvalidRecordError(f"cannot compare response {y_a} with itself")
    p_a = expit(r_star[x, y_a] - r_star[x, y_b])
    if rng.random() < p_a:
        return Pair(int(x), int(y_a), int(y_b))
    return Pair(int(x), int(y_b), int(y_a))


def sample_list(r_star, x, candidates, rng):
    """Plackett-Luce draw: repeatedly pick the next item from softmax(r*) of the remainder."""
    remaining = [int(y) for y in candidates]
    if len(remaining) < 2:
        raise InvalidRecordError("need at least two candidates")
    if len(set(remaining)) != len(remaining):
        raise InvalidRecordError(f"duplicate candidates {remaining}")
    ranking = []
    while len(remaining) > 1:
        r = r_star[x, remaining]
        w = np.exp(r - r.max())
        i = int(rng.choice(len(remaining), p=w / w.sum()))
        ranking.append(remaining.pop(i))
    ranking.append(remaining[0])
    return RankedList(int(x), tuple(ranking))


def sample_scored_pair(r_star, x, y_a, y_b, rng, score_noise=0.5):
    """BT pair plus noisy ratings ``s = r* + N(0, score_noise^2)`` for both responses."""
    pair = sample_pair(r_star, x, y_a, y_b, rng)
    s_w = float(r_star[x, pair.winner] + score_noise * rng.standard_normal())
    s_l = float(r_star[x, pair.loser] + score_noise * rng.standard_normal())
    return ScoredPair(pair.prompt, pair.winner, pair.loser, s_w, s_l)


def latent_rewards(num_prompts, k, rng, scale=1.0):
    return scale * rng.standard_normal((num_prompts, k))


def generate_dataset(r_star, per_prompt, rng, variant="pair", list_size=3, score_noise=0.5):
    """Sample ``per_prompt`` records for every prompt of ``r_star``.

    Pair candidates are distinct unordered pairs drawn uniformly without
    replacement; list candidates are ``list_size`` distinct responses.
    """
    num_prompts, k = r_star.shape
    records = []
    if variant in ("pair", "scored_pair"):
        all_pairs = list(combinations(range(k), 2))
        if per_prompt > len(all_pairs):
            raise ValueError(
                f"pairs_per_prompt={per_prompt} exceeds the {len(all_pairs)} distinct pairs for k={k}"
            )
        for x in range(num_prompts):
            for i in rng.choice(len(all_pairs), size=per_prompt, replace=False):
                y_a, y_b = all_pairs[i]
                if variant == "pair":
                    records.append(sample_pair(r_star, x, y_a, y_b, rng))
                else:
                    records.append(sample_scored_pair(r_star, x, y_a, y_b, rng, score_noise))
    elif variant == "list":
        if not 2 <= list_size <= k:
            raise ValueError(f"list_size must lie in [2, {k}], got {list_size}")
        for x in range(num_prompts):
            for _ in range(per_prompt):
                cands = rng.choice(k, size=list_size, replace=False)
                records.append(sample_list(r_star, x, cands, rng))
    else:
        raise ValueError(f"unknown variant {variant!r}")
    return records
