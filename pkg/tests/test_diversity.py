import math
import random

import pytest
from hypothesis import given, settings, strategies as st

from codesign.diversity import (
    AllParamsDegenerate,
    EmptyDocument,
    TooFewSamples,
    coefficient_of_variation,
    report,
    self_bleu,
    tokenize_code,
)
from codesign.errors import MissingParameter
from codesign.model import MorphologySchema, ParamSpec


def schema_of(*names):
    return MorphologySchema(
        name="t",
        params=tuple(ParamSpec(n, -1e9, 1e9) for n in names),
        structure_template=" ".join("{%s}" % n for n in names),
    )


L1 = schema_of("l1")
L1R1 = schema_of("l1", "r1")


class TestCoefficientOfVariation:
    def test_identical_samples_zero(self):
        per, agg = coefficient_of_variation([{"l1": 1.0}, {"l1": 1.0}], L1)
        assert per == {"l1": 0.0}
        assert agg == 0.0

    def test_hand_arithmetic_one_two(self):
        per, agg = coefficient_of_variation([{"l1": 1.0}, {"l1": 2.0}], L1)
        # mean 1.5, population sd 0.5
        assert abs(per["l1"] - 1.0 / 3.0) <= 1e-12
        assert abs(agg - 1.0 / 3.0) <= 1e-12

    def test_hand_arithmetic_two_params(self):
        per, agg = coefficient_of_variation(
            [{"l1": 1.0, "r1": 2.0}, {"l1": 3.0, "r1": 2.0}], L1R1
        )
        assert abs(per["l1"] - 0.5) <= 1e-12
        assert per["r1"] == 0.0
        assert abs(agg - 0.25) <= 1e-12

    def test_too_few_samples(self):
        with pytest.raises(TooFewSamples):
            coefficient_of_variation([{"l1": 1.0}], L1)

    def test_incomplete_sample(self):
        with pytest.raises(MissingParameter):
            coefficient_of_variation([{"l1": 1.0}, {}], L1)

    def test_near_zero_mean_excluded(self):
        per, agg = coefficient_of_variation(
            [{"l1": 1e-12, "r1": 1.0}, {"l1": -1e-12, "r1": 3.0}], L1R1
        )
        assert per["l1"] is None
        assert per["r1"] == agg

    def test_all_params_degenerate(self):
        with pytest.raises(AllParamsDegenerate):
            coefficient_of_variation([{"l1": 1e-12}, {"l1": -1e-12}], L1)

    def test_scale_invariance_100_instances(self):
        rng = random.Random(99)
        for _ in range(100):
            n = rng.randint(2, 8)
            xs = [{"l1": rng.uniform(0.1, 5.0)} for _ in range(n)]
            c = rng.uniform(0.1, 1000.0)
            scaled = [{"l1": c * s["l1"]} for s in xs]
            _, base = coefficient_of_variation(xs, L1)
            _, after = coefficient_of_variation(scaled, L1)
            assert abs(after - base) <= 1e-12 * max(1.0, abs(base))


class TestTokenizeCode:
    def test_hand_tokenization(self):
        assert tokenize_code("v - 0.5*ctrl") == ["v", "-", "0.5", "*", "ctrl"]

    def test_empty(self):
        assert tokenize_code("") == []

    def test_identifier_with_digits(self):
        assert tokenize_code("x1+x1") == ["x1", "+", "x1"]

    def test_comment_lines_dropped(self):
        assert tokenize_code("# a comment\nv + 1\n  # another\n") == ["v", "+", "1"]

    def test_case_preserved(self):
        assert tokenize_code("Foo fOO") == ["Foo", "fOO"]

    def test_numbers(self):
        assert tokenize_code("1e-3 2.5") == ["1e-3", "2.5"]


# ------------------------------------------------- independent reference

EPS = 1e-9


def ref_bleu(cand, refs):
    """Reference BLEU-4 written with explicit loops and no shared helpers."""
    logs = []
    for n in (1, 2, 3, 4):
        total = len(cand) - n + 1
        if total <= 0:
            logs.append(math.log(EPS))
            continue
        counts = {}
        for i in range(total):
            g = tuple(cand[i : i + n])
            counts[g] = counts.get(g, 0) + 1
        clipped = 0
        for g, c in counts.items():
            best = 0
            for ref in refs:
                rc = 0
                for i in range(len(ref) - n + 1):
                    if tuple(ref[i : i + n]) == g:
                        rc += 1
                if rc > best:
                    best = rc
            clipped += c if c < best else best
        logs.append(math.log((clipped if clipped > 0 else EPS) / total))
    c = len(cand)
    best_r = None
    for ref in refs:
        r = len(ref)
        if best_r is None or abs(r - c) < abs(best_r - c) or (
            abs(r - c) == abs(best_r - c) and r < best_r
        ):
            best_r = r
    bp = 1.0 if c > best_r else math.exp(1.0 - best_r / c)
    return bp * math.exp(sum(logs) / 4.0)


def ref_self_bleu(corpus):
    docs = [tokenize_code(d) for d in corpus]
    scores = []
    for i, cand in enumerate(docs):
        refs = [d for j, d in enumerate(docs) if j != i]
        scores.append(ref_bleu(cand, refs))
    return sum(scores) / len(scores)


FIXED_CORPUS = [
    "v - 0.5*ctrl",
    "dist + 0.1*v - 0.01*ctrl",
    "tanh(v) * exp(-0.1*t)",
    "clamp(v, -1, 1) - 0.05*ctrl",
    "v - 0.5*ctrl + 0.2*u1",
]


class TestSelfBleu:
    def test_identical_documents_score_one(self):
        assert self_bleu(["a b c d e", "a b c d e"]) == 1.0

    def test_disjoint_documents_near_zero(self):
        assert self_bleu(["a b c d e", "v w x y z"]) <= 1e-6

    def test_matches_reference_on_fixed_corpus(self):
        got = self_bleu(FIXED_CORPUS)
        expected = ref_self_bleu(FIXED_CORPUS)
        assert abs(got - expected) <= 1e-9

    def test_matches_reference_on_three_mixed_documents(self):
        corpus = ["a b c d e f", "a b c x y z", "x y z a b"]
        assert abs(self_bleu(corpus) - ref_self_bleu(corpus)) <= 1e-9

    def test_too_few_documents(self):
        with pytest.raises(TooFewSamples):
            self_bleu(["a b c"])

    def test_empty_document(self):
        with pytest.raises(EmptyDocument):
            self_bleu(["a b", "# only a comment"])

    def test_permutation_invariance(self):
        rng = random.Random(4)
        corpus = list(FIXED_CORPUS)
        base = self_bleu(corpus)
        for _ in range(5):
            rng.shuffle(corpus)
            assert self_bleu(corpus) == base

    def test_duplicate_never_decreases(self):
        rng = random.Random(12)
        words = ["v", "ctrl", "dist", "u1", "t", "speed"]
        for _ in range(20):
            corpus = [
                " ".join(rng.choices(words, k=rng.randint(3, 8))) for _ in range(3)
            ]
            base = self_bleu(corpus)
            extended = corpus + [corpus[0]]
            assert self_bleu(extended) >= base - 1e-12

    @settings(max_examples=50, deadline=None)
    @given(seed=st.integers(0, 99999))
    def test_random_corpora_match_reference(self, seed):
        rng = random.Random(seed)
        words = ["v", "ctrl", "x", "+", "-", "0.5", "1", "tanh"]
        corpus = [
            " ".join(rng.choices(words, k=rng.randint(2, 10)))
            for _ in range(rng.randint(2, 5))
        ]
        assert abs(self_bleu(corpus) - ref_self_bleu(corpus)) <= 1e-9


class TestReport:
    def test_bundles_both_metrics(self):
        rep = report(
            [{"l1": 1.0}, {"l1": 2.0}],
            ["v - ctrl", "dist + v"],
            L1,
        )
        assert rep.sample_count == 2
        assert rep.self_bleu is not None
        assert abs(rep.aggregate_cv - 1.0 / 3.0) <= 1e-12

    def test_single_reward_leaves_bleu_undefined(self):
        rep = report([{"l1": 1.0}, {"l1": 2.0}], ["v"], L1)
        assert rep.self_bleu is None
