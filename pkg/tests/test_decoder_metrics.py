import numpy as np
import pandas as pd
import pytest

from decoder_metrics import (
    LabelSchema,
    bioes_decode,
    bioes_encode,
    brute_force_decode,
    corpus_prf,
    entity_prf,
    valid_sequences,
    validate_tags,
    viterbi,
    write_prf_report,
)
from doc_model import EntitySpan
from errors import DecodeError, InvalidInputError

SCHEMA = LabelSchema(["question", "answer"])


class TestSchema:
    def test_tag_layout(self):
        assert SCHEMA.tags == [
            "O",
            "B-question", "I-question", "E-question", "S-question",
            "B-answer", "I-answer", "E-answer", "S-answer",
        ]
        assert SCHEMA.num_tags == 9
        assert SCHEMA.tag("S", "answer") == 8

    def test_duplicate_types(self):
        with pytest.raises(InvalidInputError):
            LabelSchema(["header", "header"])

    def test_transitions(self):
        b_q, i_q, e_q = SCHEMA.tag("B", "question"), SCHEMA.tag("I", "question"), SCHEMA.tag("E", "question")
        assert SCHEMA.transitions[b_q, i_q] and SCHEMA.transitions[i_q, e_q]
        assert not SCHEMA.transitions[b_q, SCHEMA.tag("E", "answer")]
        assert not SCHEMA.transitions[0, i_q]
        assert not SCHEMA.start_allowed[i_q] and not SCHEMA.end_allowed[b_q]


class TestBioes:
    def test_encode(self):
        spans = [EntitySpan("question", 0, 1), EntitySpan("answer", 3, 3)]
        assert bioes_encode(spans, 5, SCHEMA) == [1, 3, 0, 8, 0]

    def test_encode_long_span(self):
        assert bioes_encode([EntitySpan("answer", 1, 4)], 5, SCHEMA) == [0, 5, 6, 6, 7]

    def test_roundtrip(self):
        spans = [EntitySpan("answer", 0, 0), EntitySpan("question", 1, 3), EntitySpan("answer", 5, 6)]
        assert bioes_decode(bioes_encode(spans, 8, SCHEMA), SCHEMA) == spans

    def test_overlap_rejected(self):
        with pytest.raises(InvalidInputError):
            bioes_encode([EntitySpan("question", 0, 2), EntitySpan("answer", 2, 3)], 5, SCHEMA)

    def test_unknown_label(self):
        with pytest.raises(InvalidInputError):
            bioes_encode([EntitySpan("header", 0, 0)], 2, SCHEMA)

    def test_strict_decode_rejects_invalid(self):
        with pytest.raises(DecodeError):
            bioes_decode([SCHEMA.tag("I", "question")], SCHEMA)
        with pytest.raises(DecodeError):
            bioes_decode([SCHEMA.tag("B", "question"), 0], SCHEMA)

    def test_lenient_decode_drops_fragments(self):
        tags = [SCHEMA.tag("B", "question"), 0, SCHEMA.tag("S", "answer"), SCHEMA.tag("E", "answer")]
        assert bioes_decode(tags, SCHEMA, strict=False) == [EntitySpan("answer", 2, 2)]

    def test_empty(self):
        assert bioes_encode([], 0, SCHEMA) == []
        assert bioes_decode([], SCHEMA) == []
        assert validate_tags([], SCHEMA)


class TestViterbi:
    def test_all_zero_logits_prefer_lowest_ids(self):
        assert viterbi(np.zeros((3, SCHEMA.num_tags)), SCHEMA) == [0, 0, 0]

    def test_output_is_always_valid(self):
        rng = np.random.default_rng(0)
        for n in range(1, 9):
            tags = viterbi(rng.standard_normal((n, SCHEMA.num_tags)) * 3, SCHEMA)
            assert len(tags) == n and validate_tags(tags, SCHEMA)

    def test_invalid_argmax_is_repaired(self):
        logits = np.zeros((2, SCHEMA.num_tags))
        logits[0, SCHEMA.tag("I", "question")] = 10.0
        logits[1, SCHEMA.tag("E", "question")] = 10.0
        assert viterbi(logits, SCHEMA) == [SCHEMA.tag("B", "question"), SCHEMA.tag("E", "question")]

    @pytest.mark.parametrize("seed", range(5))
    def test_matches_enumeration(self, seed):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(1, 6))
        logits = rng.standard_normal((n, SCHEMA.num_tags))
        assert viterbi(logits, SCHEMA) == brute_force_decode(logits, SCHEMA)

    def test_integer_ties_match_enumeration(self):
        rng = np.random.default_rng(7)
        for _ in range(20):
            logits = rng.integers(0, 2, size=(4, SCHEMA.num_tags)).astype(float)
            assert viterbi(logits, SCHEMA) == brute_force_decode(logits, SCHEMA)

    def test_per_token_constant_does_not_change_path(self):
        rng = np.random.default_rng(11)
        logits = rng.standard_normal((7, SCHEMA.num_tags))
        shifted = logits + rng.integers(-5, 6, size=(7, 1)).astype(float)
        assert viterbi(shifted, SCHEMA) == viterbi(logits, SCHEMA)

    def test_wrong_width(self):
        with pytest.raises(InvalidInputError):
            viterbi(np.zeros((2, 4)), SCHEMA)

    def test_empty(self):
        assert viterbi(np.zeros((0, SCHEMA.num_tags)), SCHEMA) == []

    def test_valid_sequence_count(self):
        # O, S-question, S-answer
        assert len(list(valid_sequences(1, SCHEMA))) == 3
        assert all(validate_tags(list(s), SCHEMA) for s in valid_sequences(3, SCHEMA))


class TestScoring:
    def test_perfect(self):
        gold = [EntitySpan("question", 0, 1), EntitySpan("answer", 2, 2)]
        scores = entity_prf(gold, gold)
        assert scores.micro.f1 == 1.0 and scores.macro_f1 == 1.0

    def test_partial_match_counts_as_wrong(self):
        pred = [EntitySpan("question", 0, 1), EntitySpan("answer", 3, 3)]
        gold = [EntitySpan("question", 0, 1), EntitySpan("answer", 2, 3)]
        scores = entity_prf(pred, gold)
        assert (scores.micro.precision, scores.micro.recall, scores.micro.f1) == (0.5, 0.5, 0.5)
        assert scores.per_type["question"].f1 == 1.0
        assert scores.per_type["answer"].f1 == 0.0
        assert scores.macro_f1 == 0.5

    def test_label_must_match(self):
        scores = entity_prf([EntitySpan("answer", 0, 1)], [EntitySpan("question", 0, 1)])
        assert scores.micro.f1 == 0.0

    def test_nothing_predicted_nothing_gold(self):
        m = entity_prf([], []).micro
        assert (m.precision, m.recall, m.f1) == (1.0, 1.0, 1.0)

    def test_predictions_without_gold(self):
        m = entity_prf([EntitySpan("answer", 0, 0)], []).micro
        assert (m.precision, m.recall, m.f1) == (0.0, 0.0, 0.0)

    def test_nothing_predicted(self):
        m = entity_prf([], [EntitySpan("answer", 0, 0)]).micro
        assert (m.precision, m.recall, m.f1) == (0.0, 0.0, 0.0)

    def test_corpus_pools_counts(self):
        gold = [[EntitySpan("question", 0, 0)], [EntitySpan("answer", 1, 2), EntitySpan("answer", 4, 4)]]
        pred = [[EntitySpan("question", 0, 0)], [EntitySpan("answer", 1, 2)]]
        m = corpus_prf(pred, gold).micro
        assert (m.correct, m.predicted, m.support) == (2, 2, 3)
        assert m.precision == 1.0
        assert m.recall == pytest.approx(2 / 3)
        assert m.f1 == pytest.approx(0.8)

    def test_corpus_length_mismatch(self):
        with pytest.raises(InvalidInputError):
            corpus_prf([[]], [[], []])

    def test_report(self, tmp_path):
        gold = [EntitySpan("question", 0, 1), EntitySpan("answer", 2, 2)]
        path = write_prf_report(entity_prf(gold, gold), str(tmp_path / "eval.csv"))
        table = pd.read_csv(path)
        assert list(table.columns) == ["type", "precision", "recall", "f1", "support"]
        assert list(table["type"]) == ["answer", "question", "micro", "macro"]
        assert table.loc[table["type"] == "micro", "f1"].item() == 1.0
