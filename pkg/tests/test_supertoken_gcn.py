import numpy as np
import pytest

import autodiff as ad
from autodiff import ParameterStore
from conftest import make_document
from data_service import prepare_document
from errors import ConfigError, ShapeError
from graph_builder import build_layout_graph
from harness import supertoken_permutation_deviation
from supertoken_gcn import GcnConfig, aggregate, encode_supertokens, init_gcn_params


def small_gcn(vocab, seed=0, **overrides):
    config = GcnConfig(**{"num_layers": 2, "hidden_dim": 8, "vocab_size": len(vocab), "embed_dim": 6, "init_std": 0.3, **overrides})
    store = ParameterStore()
    init_gcn_params(store, config, np.random.default_rng(seed))
    return config, store


def test_config_validation():
    with pytest.raises(ConfigError):
        GcnConfig(hidden_dim=0)
    with pytest.raises(ConfigError):
        GcnConfig(num_layers=0)


def test_init_needs_vocab_size():
    with pytest.raises(ConfigError):
        init_gcn_params(ParameterStore(), GcnConfig(), np.random.default_rng(0))


def test_output_shape(vocab, two_line_doc):
    config, store = small_gcn(vocab)
    graph = build_layout_graph(two_line_doc)
    out = encode_supertokens(two_line_doc, graph, config, store)
    assert out.shape == (6, 8)
    assert np.all(np.isfinite(out.values))


def test_graph_size_must_match(vocab, two_line_doc):
    config, store = small_gcn(vocab)
    other = make_document(vocab, [("name", (0.1, 0.1, 0.2, 0.2))])
    with pytest.raises(ShapeError):
        encode_supertokens(two_line_doc, build_layout_graph(other), config, store)


def test_isolated_vertex_gets_zero_aggregate():
    rng = np.random.default_rng(1)
    store = ParameterStore()
    store.create("gcn/layer0/attn/wq", (4, 4), rng, std=0.5)
    store.create("gcn/layer0/attn/wk", (4, 4), rng, std=0.5)
    states = ad.constant(rng.standard_normal((3, 4)))
    messages = ad.constant(rng.standard_normal((2, 4)))
    out = aggregate(messages, states, np.array([0, 0]), store, 0).values
    np.testing.assert_array_equal(out[1:], np.zeros((2, 4)))
    assert np.abs(out[0]).sum() > 0


def test_single_incoming_message_passes_through():
    rng = np.random.default_rng(2)
    store = ParameterStore()
    store.create("gcn/layer0/attn/wq", (4, 4), rng, std=0.5)
    store.create("gcn/layer0/attn/wk", (4, 4), rng, std=0.5)
    messages = rng.standard_normal((1, 4))
    out = aggregate(ad.constant(messages), ad.constant(rng.standard_normal((2, 4))), np.array([1]), store, 0).values
    np.testing.assert_allclose(out[1], messages[0])


def test_single_token_document(vocab):
    config, store = small_gcn(vocab)
    doc = make_document(vocab, [("total", (0.2, 0.2, 0.4, 0.3))])
    out = encode_supertokens(doc, build_layout_graph(doc), config, store)
    assert out.shape == (1, 8)
    # layer norm of a single row with unit gamma and zero beta
    assert out.values.mean() == pytest.approx(0.0, abs=1e-9)


def test_rows_follow_reading_order(vocab, two_line_doc):
    config, store = small_gcn(vocab, seed=3)
    flipped = make_document(vocab, [(t.text, tuple(t.box.as_list())) for t in reversed(two_line_doc.tokens)])
    a = encode_supertokens(two_line_doc, build_layout_graph(two_line_doc), config, store).values
    b = encode_supertokens(flipped, build_layout_graph(flipped), config, store).values
    np.testing.assert_allclose(a, b, atol=1e-10)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_permutation_equivariance(vocab, seed):
    assert supertoken_permutation_deviation(vocab, seed) < 1e-9


def test_gradients(vocab, two_line_doc):
    config, store = small_gcn(vocab, seed=4)
    prepared = prepare_document(two_line_doc)
    target = np.random.default_rng(5).standard_normal((6, 8))

    def build(s):
        return ad.squared_error(encode_supertokens(prepared.doc, prepared.graph, config, s), target)

    assert ad.grad_check(build, store, max_coords=150) < 1e-4
