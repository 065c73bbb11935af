"""Lexical metrics, judge scoring, and report assembly.

Golden values below were computed once with the independent reference
implementations in tests/oracles.py and frozen; the library computes the
same quantities through a different route (log-space BLEU, rolling-row
LCS), so agreement is meaningful.
"""

from __future__ import annotations

import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import METRIC_VOCAB, random_token_pairs
from oracles import oracle_bleu4, oracle_micro_f1, oracle_rouge_l, oracle_rouge_n
from gsi_engine.gateway import EmbeddingVector
from gsi_engine.metrics import (
    AllSamplesUnparseable,
    EmptyInput,
    LabelPair,
    MetricReport,
    MetricError,
    OutOfScale,
    SampleScores,
    UnknownLabel,
    bleu4,
    default_judge_rubric,
    embed_similarity,
    g_eval,
    human_mean,
    micro_f1,
    micro_f1_from_counts,
    parse_judge_score,
    rouge_l,
    rouge_l_fmeasure,
    rouge_n,
    score_pair,
    tokenize,
)

# (candidate, reference, bleu4, rouge1, rouge2, rougeL)
GOLDEN_PAIRS = [
    (
        "The quick brown fox jumps over the lazy dog today",
        "The quick brown fox jumped over the lazy dog",
        0.5253819788848316,
        0.8888888888888888,
        0.75,
        0.8888888888888888,
    ),
    (
        "the cat sat on the mat",
        "a cat sat on the mat",
        0.7598356856515925,
        0.8333333333333334,
        0.8,
        0.8333333333333334,
    ),
    (
        "Inspect the inlet for debris after each storm event.",
        "Inspect the inlet for debris following every storm event.",
        0.5253819788848316,
        0.8,
        0.6666666666666666,
        0.8,
    ),
    (
        "Permeable pavement allows runoff to infiltrate through the surface",
        "Permeable pavement lets stormwater runoff infiltrate through its surface",
        0.0,
        0.6666666666666666,
        0.25,
        0.6666666666666666,
    ),
]


def toks(text: str) -> list[str]:
    return tokenize(text)


class TestTokenize:
    def test_lowercases_and_splits_punctuation(self):
        assert tokenize("Inspect the INLET, then report.") == [
            "inspect", "the", "inlet", ",", "then", "report", ".",
        ]

    def test_numbers_and_units(self):
        assert tokenize("Store 95% of 1.5-inch events") == [
            "store", "95", "%", "of", "1", ".", "5", "-", "inch", "events",
        ]

    def test_empty_and_whitespace(self):
        assert tokenize("") == []
        assert tokenize("   \n\t ") == []


class TestBleu4:
    @pytest.mark.parametrize("candidate,reference,expected", [(c, r, b) for c, r, b, *_ in GOLDEN_PAIRS])
    def test_golden_values(self, candidate, reference, expected):
        assert bleu4(toks(candidate), toks(reference)) == pytest.approx(expected, abs=1e-12)

    def test_identical_is_one(self):
        tokens = toks("rain gardens capture roof runoff and let it soak into soil beds")
        assert bleu4(tokens, tokens) == 1.0

    def test_disjoint_is_zero(self):
        assert bleu4(toks("alpha beta gamma delta epsilon"), toks("one two three four five")) == 0.0

    def test_short_candidate_brevity_penalty(self):
        # A candidate strictly shorter than the reference must score below
        # the full-length identical pair.
        short = bleu4(toks("the basin drains slowly"), toks("the basin drains slowly today now"))
        full = bleu4(toks("the basin drains slowly today now"), toks("the basin drains slowly today now"))
        assert short < full

    def test_fewer_than_four_tokens_is_zero_even_when_identical(self):
        assert bleu4(["basin", "drains"], ["basin", "drains"]) == 0.0
        # Smoothing substitutes for zero precisions, not for missing
        # n-grams, so sub-4-token candidates stay at zero.
        assert bleu4(["basin", "drains"], ["basin", "drains"], smoothing_epsilon=0.1) == 0.0

    def test_smoothing_rescues_zero_precision_pairs(self):
        cand, ref = GOLDEN_PAIRS[3][0], GOLDEN_PAIRS[3][1]
        assert bleu4(toks(cand), toks(ref)) == 0.0
        assert bleu4(toks(cand), toks(ref), smoothing_epsilon=0.1) > 0.0

    def test_empty_candidate_scores_zero(self):
        assert bleu4([], toks("reference text here")) == 0.0

    def test_matches_oracle_on_goldens(self):
        for candidate, reference, *_ in GOLDEN_PAIRS:
            assert bleu4(toks(candidate), toks(reference)) == pytest.approx(
                oracle_bleu4(toks(candidate), toks(reference)), abs=1e-9
            )


class TestRouge:
    @pytest.mark.parametrize(
        "candidate,reference,r1,r2,rl",
        [(c, r, r1, r2, rl) for c, r, _, r1, r2, rl in GOLDEN_PAIRS],
    )
    def test_golden_values(self, candidate, reference, r1, r2, rl):
        assert rouge_n(toks(candidate), toks(reference), 1) == pytest.approx(r1, abs=1e-12)
        assert rouge_n(toks(candidate), toks(reference), 2) == pytest.approx(r2, abs=1e-12)
        assert rouge_l(toks(candidate), toks(reference)) == pytest.approx(rl, abs=1e-12)

    def test_identity_anchors(self):
        tokens = toks("overflow structures route excess volume to the sewer")
        assert rouge_n(tokens, tokens, 1) == 1.0
        assert rouge_n(tokens, tokens, 2) == 1.0
        assert rouge_l(tokens, tokens) == 1.0

    def test_disjoint_anchors(self):
        a, b = toks("alpha beta gamma delta"), toks("one two three four")
        assert rouge_n(a, b, 1) == 0.0
        assert rouge_n(a, b, 2) == 0.0
        assert rouge_l(a, b) == 0.0

    def test_recall_oriented(self):
        # A candidate containing the whole reference gets full recall.
        assert rouge_n(toks("the deep basin drains slowly"), toks("basin drains slowly"), 1) == 1.0

    def test_subsequence_not_substring(self):
        # "a c" is a subsequence of "a b c" though not contiguous.
        assert rouge_l(["a", "c"], ["a", "b", "c"]) == pytest.approx(2 / 3)

    def test_reference_shorter_than_n(self):
        assert rouge_n(toks("basin drains slowly"), ["basin"], 2) == 0.0

    def test_fmeasure_combines_precision_and_recall(self):
        cand, ref = toks("the basin drains"), toks("the basin drains slowly today")
        assert rouge_l_fmeasure(cand, ref, beta=1.0) == pytest.approx(2 * 1.0 * 0.6 / 1.6)
        # The default beta weighs recall more heavily than precision.
        assert rouge_l_fmeasure(cand, ref) < rouge_l_fmeasure(ref, cand)

    def test_bad_n(self):
        with pytest.raises(MetricError):
            rouge_n(["a"], ["a"], 0)
        with pytest.raises(MetricError):
            rouge_n(["a"], ["a"], 3)

    def test_empty_reference_scores_zero(self):
        assert rouge_n(toks("x"), [], 1) == 0.0
        assert rouge_l(toks("x"), []) == 0.0
        assert rouge_l_fmeasure([], toks("x")) == 0.0


class TestMicroF1:
    def test_counts_anchor(self):
        assert micro_f1_from_counts(3, 1, 2) == pytest.approx(2 / 3, abs=1e-12)

    def test_all_correct(self):
        pairs = [LabelPair("qa", "qa"), LabelPair("tf", "tf")]
        assert micro_f1(pairs) == 1.0

    def test_all_wrong(self):
        pairs = [LabelPair("qa", "tf"), LabelPair("tf", "qa")]
        assert micro_f1(pairs) == 0.0

    def test_matches_oracle(self):
        labels = ["qa", "tf", "mc", "sum"]
        rng = random.Random(11)
        pairs = [
            LabelPair(rng.choice(labels), rng.choice(labels)) for _ in range(100)
        ]
        assert micro_f1(pairs) == pytest.approx(
            oracle_micro_f1([(p.predicted, p.gold) for p in pairs]), abs=1e-12
        )

    def test_single_label_degenerate(self):
        # With predictions drawn from the gold class plus one stray label,
        # micro-F1 equals plain accuracy.
        pairs = [LabelPair("qa", "qa")] * 3 + [LabelPair("other", "qa")]
        assert micro_f1(pairs) == pytest.approx(
            oracle_micro_f1([(p.predicted, p.gold) for p in pairs])
        )

    def test_declared_class_set_enforced(self):
        pairs = [LabelPair("qa", "qa"), LabelPair("junk", "tf")]
        with pytest.raises(UnknownLabel):
            micro_f1(pairs, classes={"qa", "tf"})
        assert micro_f1(pairs, classes={"qa", "tf", "junk"}) == pytest.approx(0.5)

    def test_empty_rejected(self):
        with pytest.raises(EmptyInput):
            micro_f1([])

    def test_zero_denominator(self):
        assert micro_f1_from_counts(0, 0, 0) == 0.0

    def test_empty_label_rejected(self):
        with pytest.raises(MetricError):
            LabelPair("", "qa")


class TestEmbedSimilarity:
    def test_identical_text_is_one(self, stub):
        assert embed_similarity("rain garden", "rain garden", stub) == pytest.approx(1.0, abs=1e-9)

    def test_clamped_at_zero(self):
        class OppositeGateway:
            embed_model_name = "fake"

            def embed(self, texts):
                table = {
                    "up": EmbeddingVector((1.0, 0.0)),
                    "down": EmbeddingVector((-1.0, 0.0)),
                }
                return [table[t] for t in texts]

        assert embed_similarity("up", "down", OppositeGateway()) == 0.0
        assert embed_similarity("up", "down", OppositeGateway(), clamp=False) == -1.0

    def test_empty_rejected(self, stub):
        with pytest.raises(EmptyInput):
            embed_similarity("", "x", stub)
        with pytest.raises(EmptyInput):
            embed_similarity("x", "", stub)


class TestJudgeParsing:
    @pytest.mark.parametrize(
        "reply,expected",
        [
            ("3", 3),
            ("Score: 4", 4),
            ("I'd rate it 4/5", 4),
            ("5 - excellent coverage", 5),
            ("  2  ", 2),
            ("rating: 1 overall", 1),
        ],
    )
    def test_accepts(self, reply, expected):
        assert parse_judge_score(reply) == expected

    @pytest.mark.parametrize(
        "reply",
        ["", "no digits here", "10", "0", "6", "score of 42", "999", "sixty-six"],
    )
    def test_rejects(self, reply):
        assert parse_judge_score(reply) is None

    def test_first_valid_digit_wins(self):
        assert parse_judge_score("between 2 and 4") == 2


class TestGEval:
    def make_samples(self, n):
        return [(f"q{i}", f"p{i}", f"r{i}") for i in range(n)]

    def test_scores_normalized_to_unit_interval(self, scripted_gateway_factory):
        gateway = scripted_gateway_factory(["1", "3", "5"])
        result = g_eval(self.make_samples(3), gateway)
        assert result.scores == [0.0, 0.5, 1.0]
        assert result.mean == pytest.approx(0.5)
        assert result.unparsed == 0

    def test_retry_once_then_success(self, scripted_gateway_factory):
        gateway = scripted_gateway_factory(["no score here", "4"])
        result = g_eval(self.make_samples(1), gateway)
        assert result.scores == [0.75]
        assert result.unparsed == 0
        assert len(gateway.chat_requests) == 2
        retry_text = gateway.chat_requests[1].messages[-1][1]
        assert "ONLY one integer between 1 and 5" in retry_text

    def test_unparsed_leaves_gap(self, scripted_gateway_factory):
        gateway = scripted_gateway_factory(["junk", "still junk", "5", "5"])
        result = g_eval(self.make_samples(2), gateway)
        assert result.scores == [None, 1.0]
        assert result.unparsed == 1
        assert result.mean == pytest.approx(1.0)

    def test_all_unparseable_raises(self, scripted_gateway_factory):
        gateway = scripted_gateway_factory(["junk"])
        with pytest.raises(AllSamplesUnparseable):
            g_eval(self.make_samples(2), gateway)

    def test_rubric_embeds_sample_fields(self, scripted_gateway_factory):
        gateway = scripted_gateway_factory(["4"])
        g_eval(self.make_samples(1), gateway)
        sent = gateway.chat_requests[0].messages[-1][1]
        assert "q0" in sent and "p0" in sent and "r0" in sent
        assert "1-5" in default_judge_rubric() or "1 and 5" in default_judge_rubric()

    def test_custom_judge_prompt(self, scripted_gateway_factory):
        gateway = scripted_gateway_factory(["2"])
        g_eval(
            self.make_samples(1),
            gateway,
            judge_prompt="Rate {question} {answer} {reference}",
        )
        assert gateway.chat_requests[0].messages[-1][1] == "Rate q0 p0 r0"


class TestHumanMean:
    def test_unit_scale(self):
        assert human_mean([0.0, 0.5, 1.0]) == pytest.approx(0.5)

    def test_1_5_scale(self):
        assert human_mean([1, 5], scale="1-5") == pytest.approx(0.5)
        assert human_mean([5, 5], scale="1-5") == 1.0

    def test_out_of_range(self):
        with pytest.raises(OutOfScale):
            human_mean([1.5])
        with pytest.raises(OutOfScale):
            human_mean([0], scale="1-5")

    def test_bad_scale_and_empty(self):
        with pytest.raises(MetricError):
            human_mean([0.5], scale="percent")
        with pytest.raises(EmptyInput):
            human_mean([])


class TestScorePairAndReport:
    def test_score_pair_fields(self):
        candidate, reference = GOLDEN_PAIRS[0][0], GOLDEN_PAIRS[0][1]
        scores = score_pair("s1", candidate, reference)
        assert scores.sample_id == "s1"
        assert scores.bleu4 == pytest.approx(GOLDEN_PAIRS[0][2], abs=1e-12)
        assert scores.rouge1 == pytest.approx(GOLDEN_PAIRS[0][3], abs=1e-12)
        assert scores.embed_sim is None and scores.geval is None and scores.human is None

    def test_report_aggregates_skip_gaps(self):
        rows = [
            SampleScores("a", bleu4=0.5, rouge1=0.6, rouge2=0.4, rougeL=0.6, geval=0.8),
            SampleScores("b", bleu4=0.7, rouge1=0.8, rouge2=0.6, rougeL=0.8, geval=None),
        ]
        report = MetricReport.from_rows(rows)
        assert report.aggregates["bleu4"] == pytest.approx(0.6)
        assert report.aggregates["geval"] == pytest.approx(0.8)
        assert report.counts["geval"] == 1
        assert report.counts["bleu4"] == 2
        assert "human" not in report.aggregates
        assert report.counts["human"] == 0

    def test_report_json_shape(self):
        report = MetricReport.from_rows([SampleScores("a", bleu4=1.0)])
        payload = report.to_json_dict()
        assert payload["aggregates"]["bleu4"] == 1.0
        assert payload["rows"][0]["sample_id"] == "a"
        assert payload["rows"][0]["geval"] is None

    def test_empty_report_has_no_aggregates(self):
        report = MetricReport.from_rows([])
        assert report.aggregates == {}
        assert all(count == 0 for count in report.counts.values())


class TestProperties:
    @given(
        st.lists(st.sampled_from(METRIC_VOCAB), min_size=1, max_size=25),
        st.lists(st.sampled_from(METRIC_VOCAB), min_size=1, max_size=25),
    )
    @settings(max_examples=60, deadline=None)
    def test_ranges_and_oracle_agreement(self, cand_tokens, ref_tokens):
        b = bleu4(cand_tokens, ref_tokens)
        r1 = rouge_n(cand_tokens, ref_tokens, 1)
        r2 = rouge_n(cand_tokens, ref_tokens, 2)
        rl = rouge_l(cand_tokens, ref_tokens)
        for value in (b, r1, r2, rl):
            assert 0.0 <= value <= 1.0
        # An LCS match is also a unigram match, so ROUGE-L recall cannot
        # exceed ROUGE-1 recall.
        assert rl <= r1 + 1e-12
        assert b == pytest.approx(oracle_bleu4(cand_tokens, ref_tokens), abs=1e-9)
        assert r1 == pytest.approx(oracle_rouge_n(cand_tokens, ref_tokens, 1), abs=1e-12)
        assert rl == pytest.approx(oracle_rouge_l(cand_tokens, ref_tokens), abs=1e-12)

    @given(st.lists(st.sampled_from(METRIC_VOCAB), min_size=4, max_size=25))
    @settings(max_examples=30, deadline=None)
    def test_identity_is_perfect(self, tokens):
        assert bleu4(tokens, tokens) == pytest.approx(1.0, abs=1e-12)
        assert rouge_l(tokens, tokens) == 1.0

    def test_fifty_random_pairs_match_oracle(self):
        for cand, ref in random_token_pairs(50, seed=123):
            assert bleu4(cand, ref) == pytest.approx(oracle_bleu4(cand, ref), abs=1e-9)
            assert rouge_n(cand, ref, 2) == pytest.approx(oracle_rouge_n(cand, ref, 2), abs=1e-12)
            assert rouge_l(cand, ref) == pytest.approx(oracle_rouge_l(cand, ref), abs=1e-12)
