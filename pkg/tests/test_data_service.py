import dataclasses
import math

import numpy as np
import pytest

import data_service
from conftest import make_document
from data_service import (
    cache_size,
    cached_prepare,
    check_schema,
    clear_cache,
    load_split,
    open_vocabulary,
    prepare_corpus,
    prepare_document,
)
from decoder_metrics import LabelSchema
from doc_model import EntitySpan, write_corpus
from errors import ConfigError
from utils import mean_spread, merge_counts, sample_batch, step_rng, token_accuracy, warmup_lr

SCHEMA = LabelSchema(["question", "answer"])


class TestPrepare:
    def test_tags_in_reading_order(self, two_line_doc):
        prepared = prepare_document(two_line_doc, SCHEMA)
        assert prepared.order == list(range(6))
        assert prepared.tags.tolist() == [1, 3, 8, 0, 0, 0]
        assert prepared.gold == list(two_line_doc.gold_spans)
        assert prepared.graph.n == 6

    def test_gold_follows_serialization(self, vocab):
        rows = [("date", (0.1, 0.5, 0.2, 0.55)), ("name", (0.1, 0.1, 0.2, 0.15))]
        doc = make_document(vocab, rows, spans=[EntitySpan("answer", 0, 0), EntitySpan("question", 1, 1)])
        prepared = prepare_document(doc, SCHEMA)
        assert prepared.order == [1, 0]
        assert prepared.tags.tolist() == [SCHEMA.tag("S", "question"), SCHEMA.tag("S", "answer")]
        assert prepared.gold == [EntitySpan("question", 0, 0), EntitySpan("answer", 1, 1)]
        np.testing.assert_array_equal(prepared.ids_serialized, [vocab.id_of("name"), vocab.id_of("date")])

    def test_split_entity_is_kept_as_fragments(self, vocab):
        rows = [
            ("name", (0.1, 0.1, 0.2, 0.15)),
            ("date", (0.3, 0.1, 0.4, 0.15)),
            ("total", (0.1, 0.3, 0.2, 0.35)),
            ("phone", (0.6, 0.1, 0.7, 0.15)),
        ]
        doc = make_document(vocab, rows, spans=[EntitySpan("question", 0, 2)])
        prepared = prepare_document(doc, SCHEMA)
        assert prepared.order == [0, 1, 3, 2]
        assert prepared.gold == [EntitySpan("question", 0, 1), EntitySpan("question", 3, 3)]
        assert prepared.split_entities == 1
        assert prepared.tags.tolist() == [
            SCHEMA.tag("B", "question"),
            SCHEMA.tag("E", "question"),
            SCHEMA.tag_ids["O"],
            SCHEMA.tag("S", "question"),
        ]

    def test_without_schema(self, two_line_doc):
        assert prepare_document(two_line_doc).tags is None

    def test_schema_mismatch(self, vocab):
        doc = make_document(vocab, [("name", (0.1, 0.1, 0.2, 0.2))], spans=[EntitySpan("header", 0, 0)])
        with pytest.raises(ConfigError):
            prepare_document(doc, SCHEMA)


class TestCache:
    def setup_method(self):
        clear_cache()

    def teardown_method(self):
        clear_cache()

    def test_reuses_prepared_document(self, two_line_doc):
        first = cached_prepare(two_line_doc, SCHEMA)
        assert cached_prepare(two_line_doc, SCHEMA) is first
        assert cache_size() == 1
        cached_prepare(two_line_doc)
        assert cache_size() == 2

    def test_expired_entry_is_rebuilt(self, two_line_doc, monkeypatch):
        first = cached_prepare(two_line_doc, SCHEMA)
        monkeypatch.setattr(data_service, "CACHE_TTL", -1)
        assert cached_prepare(two_line_doc, SCHEMA) is not first

    def test_moved_boxes_miss_the_cache(self, vocab):
        before = make_document(vocab, [("name", (0.1, 0.1, 0.2, 0.15)), ("date", (0.5, 0.1, 0.6, 0.15))], doc_id="d1")
        after = make_document(vocab, [("name", (0.1, 0.1, 0.2, 0.15)), ("date", (0.1, 0.8, 0.2, 0.85))], doc_id="d1")
        first = cached_prepare(before)
        second = cached_prepare(after)
        assert second is not first
        assert second.doc.tokens[1].box == prepare_document(after).doc.tokens[1].box
        assert second.graph.edge_set() == prepare_document(after).graph.edge_set()

    def test_changed_spans_miss_the_cache(self, two_line_doc):
        first = cached_prepare(two_line_doc, SCHEMA)
        relabeled = dataclasses.replace(two_line_doc, gold_spans=(EntitySpan("answer", 0, 0),))
        assert cached_prepare(relabeled, SCHEMA).gold == [EntitySpan("answer", 0, 0)]
        assert cached_prepare(two_line_doc, SCHEMA) is first

    def test_expired_entries_are_evicted(self, vocab, two_line_doc, monkeypatch):
        cached_prepare(two_line_doc)
        monkeypatch.setattr(data_service, "CACHE_TTL", -1)
        cached_prepare(make_document(vocab, [("name", (0.1, 0.1, 0.2, 0.2))], doc_id="other"))
        assert cache_size() == 1

    def test_documents_without_id_are_not_cached(self, vocab):
        doc = make_document(vocab, [("name", (0.1, 0.1, 0.2, 0.2))], doc_id="")
        cached_prepare(doc)
        assert cache_size() == 0

    def test_prepare_corpus(self, two_line_doc):
        assert len(prepare_corpus([two_line_doc, two_line_doc], SCHEMA)) == 2
        assert prepare_corpus([]) == []


class TestSplits:
    def test_missing_required_split(self, tmp_path, vocab):
        with pytest.raises(ConfigError):
            load_split(str(tmp_path), "train", vocab)

    def test_missing_optional_split(self, tmp_path, vocab):
        assert load_split(str(tmp_path), "dev", vocab, required=False) == []

    def test_file_path_is_used_directly(self, tmp_path, vocab, two_line_doc):
        path = tmp_path / "any.jsonl"
        write_corpus(str(path), [two_line_doc])
        assert load_split(str(path), "test", vocab) == [two_line_doc]

    def test_check_schema(self, two_line_doc):
        check_schema([two_line_doc], SCHEMA)
        with pytest.raises(ConfigError, match="question"):
            check_schema([two_line_doc], LabelSchema(["answer"]))

    def test_missing_vocabulary(self, tmp_path):
        with pytest.raises(ConfigError):
            open_vocabulary(str(tmp_path / "vocab.txt"))


class TestUtils:
    def test_warmup(self):
        assert warmup_lr(0, 100, 1.0, 0.1) == pytest.approx(0.1)
        assert warmup_lr(9, 100, 1.0, 0.1) == pytest.approx(1.0)
        assert warmup_lr(50, 100, 1.0, 0.1) == 1.0
        assert warmup_lr(0, 100, 0.5, 0.0) == 0.5

    def test_step_rng_depends_only_on_inputs(self):
        assert step_rng(3, 7).integers(0, 1000) == step_rng(3, 7).integers(0, 1000)
        assert step_rng(3, 7, stream=1).random() != step_rng(3, 7).random()

    def test_sample_batch(self, rng):
        batch = sample_batch(rng, 10, 4)
        assert len(set(batch)) == 4 and all(0 <= i < 10 for i in batch)
        assert len(sample_batch(rng, 2, 5)) == 5
        assert sample_batch(rng, 0, 3) == []

    def test_merge_counts(self):
        assert merge_counts([{"answer": 2}, None, {"answer": 1, "header": 3, "other": 0}]) == {
            "answer": 3,
            "header": 3,
            "other": 0,
        }
        assert merge_counts([]) == {}

    def test_mean_spread(self):
        assert mean_spread([1.0, 3.0]) == (2.0, 1.0)
        mean, spread = mean_spread([])
        assert math.isnan(mean) and math.isnan(spread)

    def test_token_accuracy(self):
        assert token_accuracy([1, 0, 2], [1, 1, 2]) == (2, 3)
        with pytest.raises(ValueError):
            token_accuracy([1], [1, 2])

