import logging
import time
import warnings

import numpy as np
import pytest

from config_helpers import RunConfig, model_config
from conftest import WORDS, line_document, make_document
from data_service import prepare_document
from decoder_metrics import LabelSchema
from errors import ConfigError, InvalidInputError
from etc_backbone import BackboneConfig, attention_cost, build_mask, forward, forward_details
from harness import model_grad_error, new_model

SCHEMA = LabelSchema(["question", "answer"])


def tiny(vocab, **overrides):
    base = dict(num_layers=1, hidden_dim=8, num_heads=2, local_radius=1, embed_dim=8, gcn_hidden_dim=8, init_std=0.3)
    base.update(overrides)
    return model_config(RunConfig(**base), len(vocab), SCHEMA.num_tags)


class TestMask:
    def test_band_plus_global(self):
        mask = build_mask(5, 1)
        assert mask.size == 6
        assert mask.allowed[0].all() and mask.allowed[:, 0].all()
        local = mask.allowed[1:, 1:]
        expected = np.abs(np.subtract.outer(np.arange(5), np.arange(5))) <= 1
        np.testing.assert_array_equal(local, expected)
        assert mask.allowed_pairs() == 11 + 13
        assert mask.local_pairs() == 13

    def test_radius_beyond_length(self):
        mask = build_mask(3, 10)
        assert mask.allowed.all()

    def test_empty_sequence(self):
        with pytest.raises(InvalidInputError):
            build_mask(0, 2)

    def test_cost_is_linear_in_length(self):
        r = 4
        costs = [attention_cost(n, r) for n in (100, 200, 400)]
        assert costs[1] - costs[0] == (costs[2] - costs[1]) // 2
        assert costs[2] <= (2 * r + 1) * 400 + 2 * 400 + 1

    def test_doubling_length_at_most_doubles_cost(self):
        assert attention_cost(1024, 8) <= 2.2 * attention_cost(512, 8)


class TestConfig:
    def test_heads_must_divide_hidden(self):
        with pytest.raises(ConfigError):
            BackboneConfig(hidden_dim=10, num_heads=3)

    def test_single_global_token(self):
        with pytest.raises(ConfigError):
            BackboneConfig(num_global=2)

    def test_radius_positive(self):
        with pytest.raises(ConfigError):
            BackboneConfig(local_radius=0)


class TestForward:
    @pytest.mark.parametrize("use_gcn,use_rich", [(False, False), (True, False), (False, True), (True, True)])
    def test_shapes_for_every_variant(self, vocab, use_gcn, use_rich):
        bconfig = tiny(vocab, use_gcn=use_gcn, use_rich_attention=use_rich)
        store = new_model(bconfig, seed=0)
        prepared = prepare_document(line_document(vocab, 8), SCHEMA)
        tags = forward(prepared.doc, prepared.graph, store, bconfig, mode="tagging")
        mlm = forward(prepared.doc, prepared.graph, store, bconfig, mode="mlm")
        assert tags.shape == (8, SCHEMA.num_tags)
        assert mlm.shape == (8, len(vocab))
        assert np.all(np.isfinite(tags.values))

    def test_gcn_width_differs_from_hidden(self, vocab):
        bconfig = tiny(vocab, gcn_hidden_dim=6)
        store = new_model(bconfig, seed=1)
        assert "etc/input/proj" in store
        prepared = prepare_document(line_document(vocab, 6))
        assert forward(prepared.doc, prepared.graph, store, bconfig).shape == (6, SCHEMA.num_tags)

    def test_unknown_mode(self, vocab):
        bconfig = tiny(vocab)
        prepared = prepare_document(line_document(vocab, 4))
        with pytest.raises(ConfigError):
            forward(prepared.doc, prepared.graph, new_model(bconfig, 0), bconfig, mode="classify")

    def test_missing_tagger_head(self, vocab):
        bconfig = model_config(RunConfig(num_layers=1, hidden_dim=8, num_heads=2, embed_dim=8, gcn_hidden_dim=8), len(vocab))
        prepared = prepare_document(line_document(vocab, 4))
        with pytest.raises(ConfigError):
            forward(prepared.doc, prepared.graph, new_model(bconfig, 0), bconfig, mode="tagging")

    def test_too_long(self, vocab):
        bconfig = tiny(vocab, max_seq=5)
        prepared = prepare_document(line_document(vocab, 6))
        with pytest.raises(InvalidInputError):
            forward(prepared.doc, prepared.graph, new_model(bconfig, 0), bconfig)

    def test_deterministic(self, vocab):
        bconfig = tiny(vocab)
        prepared = prepare_document(line_document(vocab, 6))
        a = forward(prepared.doc, prepared.graph, new_model(bconfig, 3), bconfig).values
        b = forward(prepared.doc, prepared.graph, new_model(bconfig, 3), bconfig).values
        np.testing.assert_array_equal(a, b)


class TestLocality:
    """One layer without the GCN: a token only sees positions within the radius and the global token."""

    def test_far_token_does_not_change_output(self, vocab):
        bconfig = tiny(vocab, local_radius=2, use_gcn=False)
        store = new_model(bconfig, seed=4)
        prepared = prepare_document(line_document(vocab, 12))
        ids = list(prepared.doc.vocab_ids)
        changed = list(ids)
        changed[11] = vocab.id_of("invoice") if ids[11] != vocab.id_of("invoice") else vocab.id_of("total")
        base = forward_details(prepared.doc, prepared.graph, store, bconfig, ids=ids)
        moved = forward_details(prepared.doc, prepared.graph, store, bconfig, ids=changed)
        pos = base.order.index(11)
        far = [i for i in range(12) if abs(i - pos) > 2]
        near = [i for i in range(12) if abs(i - pos) <= 2]
        np.testing.assert_array_equal(base.logits.values[far], moved.logits.values[far])
        assert np.abs(base.logits.values[near] - moved.logits.values[near]).max() > 0

    def test_two_layers_reach_through_global(self, vocab):
        bconfig = tiny(vocab, local_radius=1, use_gcn=False, num_layers=2)
        store = new_model(bconfig, seed=5)
        prepared = prepare_document(line_document(vocab, 10))
        ids = list(prepared.doc.vocab_ids)
        changed = list(ids)
        changed[prepared.order[9]] = vocab.id_of("invoice") if ids[prepared.order[9]] != vocab.id_of("invoice") else vocab.id_of("total")
        a = forward(prepared.doc, prepared.graph, store, bconfig, ids=ids).values
        b = forward(prepared.doc, prepared.graph, store, bconfig, ids=changed).values
        assert np.abs(a[0] - b[0]).max() > 0


@pytest.mark.parametrize("seed", [0, 1])
def test_model_gradients(vocab, seed):
    assert model_grad_error(vocab, seed) < 1e-4


def grid_document(vocab, n, per_line=32):
    rows = []
    for i in range(n):
        line, slot = divmod(i, per_line)
        x0, y0 = 0.005 + slot * 0.031, 0.005 + line * 0.03
        rows.append((WORDS[i % len(WORDS)], (x0, y0, x0 + 0.02, y0 + 0.015)))
    return make_document(vocab, rows, doc_id=f"grid{n}")


@pytest.mark.slow
def test_wall_clock_when_length_doubles(vocab):
    """Recorded only: masked scores are evaluated as dense matrices at this scale."""
    bconfig = tiny(vocab, local_radius=8, use_gcn=False)
    store = new_model(bconfig, seed=0)
    seconds = {}
    for n in (512, 1024):
        prepared = prepare_document(grid_document(vocab, n))
        start = time.perf_counter()
        forward(prepared.doc, prepared.graph, store, bconfig)
        seconds[n] = time.perf_counter() - start
    ratio = seconds[1024] / seconds[512]
    logging.getLogger(__name__).info("forward 512: %.3fs, 1024: %.3fs (x%.2f)", seconds[512], seconds[1024], ratio)
    if ratio > 2.6:
        warnings.warn(f"forward time grew x{ratio:.2f} when the length doubled")
