import json
import math
from itertools import permutations

import numpy as np
import pytest
from scipy.special import expit, softmax

from prefclass.data import (Pair, RankedList, ScoredPair, generate_dataset, latent_rewards,
                            read_jsonl, record_from_dict, sample_list, sample_pair,
                            sample_scored_pair, validate_record, write_jsonl)
from prefclass.errors import InvalidRecordError, RecordParseError
from prefclass.model import PromptSpace


def winner_freq(r, n, rng, y_a=0, y_b=1):
    return np.mean([sample_pair(r, 0, y_a, y_b, rng).winner == y_a for _ in range(n)])


class TestRecords:
    def test_winner_equals_loser(self):
        with pytest.raises(InvalidRecordError):
            Pair(0, 1, 1)

    def test_list_needs_two_distinct(self):
        with pytest.raises(InvalidRecordError):
            RankedList(0, (1,))
        with pytest.raises(InvalidRecordError):
            RankedList(0, (1, 2, 1))

    def test_validate_against_space(self):
        space = PromptSpace(2, 3)
        validate_record(Pair(1, 0, 2), space)
        with pytest.raises(InvalidRecordError):
            validate_record(Pair(2, 0, 1), space)
        with pytest.raises(InvalidRecordError):
            validate_record(RankedList(0, (0, 3)), space)

    def test_variants(self):
        assert Pair(0, 0, 1).variant == "pair"
        assert ScoredPair(0, 0, 1, 1.0, 0.0).variant == "scored_pair"
        assert RankedList(0, (0, 1)).variant == "list"


class TestSamplePair:
    def test_equal_rewards_fair_coin(self, rng):
        assert winner_freq(np.zeros((1, 2)), 10000, rng) == pytest.approx(0.5, abs=0.02)

    def test_saturated_gap(self, rng):
        assert winner_freq(np.array([[50.0, 0.0]]), 10000, rng) == 1.0

    def test_unit_gap(self, rng):
        assert winner_freq(np.array([[1.0, 0.0]]), 10000, rng) == pytest.approx(0.7310586, abs=0.02)

    def test_same_response_rejected(self, rng):
        with pytest.raises(InvalidRecordError):
            sample_pair(np.zeros((1, 2)), 0, 1, 1, rng)

    def test_frequencies_within_three_standard_errors(self, rng):
        n = 10000
        for gap in rng.uniform(-3, 3, size=20):
            p = expit(gap)
            se = math.sqrt(p * (1 - p) / n)
            assert abs(winner_freq(np.array([[gap, 0.0]]), n, rng) - p) <= 3 * se


class TestSampleList:
    def test_two_candidates_is_bradley_terry(self, rng):
        r = np.array([[1.0, 0.0]])
        freq = np.mean([sample_list(r, 0, [0, 1], rng).ranking[0] == 0 for _ in range(10000)])
        assert freq == pytest.approx(expit(1.0), abs=0.02)

    def test_equal_rewards_uniform_orderings(self, rng):
        r = np.zeros((1, 3))
        counts = {p: 0 for p in permutations(range(3))}
        for _ in range(60000):
            counts[sample_list(r, 0, [0, 1, 2], rng).ranking] += 1
        for c in counts.values():
            assert c / 60000 == pytest.approx(1 / 6, abs=0.02)

    def test_closed_form_ranking_probability(self, rng):
        r = np.array([[2.0, 1.0, 0.0]])
        e = math.e
        want = (e**2 / (e**2 + e + 1)) * (e / (e + 1))
        # the first factor is 0.6652, so the product is 0.4863 (not 0.4707)
        assert want == pytest.approx(0.4863301, abs=1e-7)
        freq = np.mean([sample_list(r, 0, [0, 1, 2], rng).ranking == (0, 1, 2)
                        for _ in range(20000)])
        assert freq == pytest.approx(want, abs=0.02)

    def test_top1_marginal_is_softmax(self, rng):
        r = rng.normal(size=(1, 4))
        n = 20000
        tops = np.bincount([sample_list(r, 0, range(4), rng).ranking[0] for _ in range(n)],
                           minlength=4) / n
        p = softmax(r[0])
        np.testing.assert_array_less(np.abs(tops - p), 3 * np.sqrt(p * (1 - p) / n))

    def test_duplicates_rejected(self, rng):
        with pytest.raises(InvalidRecordError):
            sample_list(np.zeros((1, 3)), 0, [0, 0, 1], rng)


class TestScoredPair:
    def test_scores_are_noisy_rewards(self, rng):
        r = np.array([[1.0, -1.0]])
        recs = [sample_scored_pair(r, 0, 0, 1, rng, score_noise=0.5) for _ in range(4000)]
        resid = [rec.score_w - r[0, rec.winner] for rec in recs]
        assert np.std(resid) == pytest.approx(0.5, rel=0.05)
        assert abs(np.mean(resid)) < 0.05


class TestJsonl:
    def test_empty_file(self, tmp_path):
        p = tmp_path / "e.jsonl"
        p.write_text("")
        assert read_jsonl(p) == []

    def test_round_trip(self, tmp_path, rng):
        r = latent_rewards(5, 6, rng)
        recs = (generate_dataset(r, 8, rng, "pair") + generate_dataset(r, 8, rng, "scored_pair")
                + generate_dataset(r, 4, rng, "list", list_size=4))
        recs = [recs[i] for i in rng.permutation(len(recs))][:100]
        p = tmp_path / "d.jsonl"
        write_jsonl(recs, p)
        assert read_jsonl(p, PromptSpace(5, 6)) == recs
        raw = p.read_bytes()
        assert raw.endswith(b"\n") and b"\r" not in raw

    def test_exact_keys(self, tmp_path):
        rec = json.loads(json.dumps(ScoredPair(0, 1, 2, 0.5, -0.5).to_dict()))
        assert set(rec) == {"variant", "prompt", "winner", "loser", "score_w", "score_l"}
        assert set(RankedList(0, (1, 0)).to_dict()) == {"variant", "prompt", "ranking"}

    def test_unknown_field_rejected(self):
        with pytest.raises(InvalidRecordError):
            record_from_dict({"variant": "pair", "prompt": 0, "winner": 0, "loser": 1, "x": 1})

    def test_irrelevant_field_rejected(self):
        with pytest.raises(InvalidRecordError):
            record_from_dict({"variant": "pair", "prompt": 0, "winner": 0, "loser": 1,
                              "ranking": [0, 1]})

    def test_invalid_line_names_line(self, tmp_path):
        p = tmp_path / "bad.jsonl"
        p.write_text('{"variant": "pair", "prompt": 0, "winner": 0, "loser": 1}\n'
                     '{"variant": "pair", "prompt": 0, "winner": 2, "loser": 2}\n')
        with pytest.raises(InvalidRecordError, match="line 2"):
            read_jsonl(p)

    def test_malformed_json_names_line(self, tmp_path):
        p = tmp_path / "bad.jsonl"
        p.write_text('{"variant": "pair", "prompt": 0, "winner": 0, "loser": 1}\n{oops\n')
        with pytest.raises(RecordParseError, match="line 2") as info:
            read_jsonl(p)
        assert info.value.line_number == 2


class TestGenerateDataset:
    def test_pairs_without_replacement(self, rng):
        recs = generate_dataset(latent_rewards(3, 4, rng), 6, rng)
        for x in range(3):
            keys = {frozenset((r.winner, r.loser)) for r in recs if r.prompt == x}
            assert len(keys) == 6

    def test_too_many_pairs(self, rng):
        with pytest.raises(ValueError):
            generate_dataset(latent_rewards(1, 4, rng), 7, rng)

    def test_deterministic_given_seed(self):
        a = generate_dataset(latent_rewards(4, 5, np.random.default_rng(3)), 3,
                             np.random.default_rng(4))
        b = generate_dataset(latent_rewards(4, 5, np.random.default_rng(3)), 3,
                             np.random.default_rng(4))
        assert a == b

    def test_aggregate_bradley_terry_agreement(self, rng):
        # every (prompt, pair) is drawn; the winner count matches sum of sigmoids
        r = latent_rewards(200, 4, rng)
        recs = generate_dataset(r, 6, rng)
        wins = sum(r[rec.prompt, rec.winner] > r[rec.prompt, rec.loser] for rec in recs)
        expected = sum(expit(abs(r[rec.prompt, rec.winner] - r[rec.prompt, rec.loser]))
                       for rec in recs)
        assert abs(wins - expected) <= 3 * math.sqrt(len(recs) * 0.25)
