"""
Super-Token encoder: message passing over the layout graph.

Each layer builds one message per directed edge (k, l) from
[state_k; state_l; edge features] with a two-layer ReLU MLP, lets vertex k
attend over its incoming messages with a single head, and finishes with a
skip connection and layer normalization.
"""

import logging
import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

import autodiff as ad
from autodiff import ParameterStore, Tensor
from doc_model import Document, serialize
from errors import ConfigError, ShapeError
from graph_builder import EDGE_DIM, GEOMETRY_NAMES, LayoutGraph

logger = logging.getLogger(__name__)

PREFIX = "gcn"


@dataclass(frozen=True)
class GcnConfig:
    num_layers: int = 2
    hidden_dim: int = 32
    max_neighbors: int = 8
    vocab_size: int = 0
    embed_dim: int = 32
    init_std: float = 0.02

    def __post_init__(self):
        if self.hidden_dim <= 0:
            raise ConfigError(f"gcn hidden_dim must be positive, got {self.hidden_dim}")
        if self.num_layers < 1:
            raise ConfigError(f"gcn num_layers must be >= 1, got {self.num_layers}")
        if self.embed_dim <= 0:
            raise ConfigError(f"gcn embed_dim must be positive, got {self.embed_dim}")
        if self.max_neighbors < 0:
            raise ConfigError(f"max_neighbors must be >= 0, got {self.max_neighbors}")


def layer_prefix(layer: int) -> str:
    return f"{PREFIX}/layer{layer}"


def init_gcn_params(store: ParameterStore, config: GcnConfig, rng: np.random.Generator) -> None:
    if config.vocab_size <= 0:
        raise ConfigError("gcn vocab_size must be set before creating parameters")
    h, std = config.hidden_dim, config.init_std
    store.create(f"{PREFIX}/embed", (config.vocab_size, config.embed_dim), rng, std=std)
    store.create(f"{PREFIX}/input/w", (config.embed_dim + len(GEOMETRY_NAMES), h), rng, std=std)
    store.create(f"{PREFIX}/input/b", (h,), init="zeros")
    for layer in range(config.num_layers):
        p = layer_prefix(layer)
        store.create(f"{p}/mlp1/w", (2 * h + EDGE_DIM, h), rng, std=std)
        store.create(f"{p}/mlp1/b", (h,), init="zeros")
        store.create(f"{p}/mlp2/w", (h, h), rng, std=std)
        store.create(f"{p}/mlp2/b", (h,), init="zeros")
        store.create(f"{p}/attn/wq", (h, h), rng, std=std)
        store.create(f"{p}/attn/wk", (h, h), rng, std=std)
        store.create(f"{p}/ln/gamma", (h,), init="ones")
        store.create(f"{p}/ln/beta", (h,), init="zeros")


def embed_nodes(
    doc: Document, graph: LayoutGraph, store: ParameterStore, config: GcnConfig, ids: Optional[Sequence[int]] = None
) -> Tensor:
    """Input state per vertex: affine([word embedding; x0, y0, x1, y1, height, width])."""
    if graph.n != len(doc):
        raise ShapeError("embed_nodes", (len(doc),), (graph.n,), "document and graph sizes differ")
    vocab_ids = graph.vocab_ids if ids is None else np.asarray(ids, dtype=np.int64)
    words = ad.take_rows(store[f"{PREFIX}/embed"], vocab_ids)
    geometry = ad.constant(graph.geometry)
    return ad.affine(ad.concat([words, geometry], axis=1), store[f"{PREFIX}/input/w"], store[f"{PREFIX}/input/b"])


def message(state_k: Tensor, state_l: Tensor, edge_features: Tensor, store: ParameterStore, layer: int) -> Tensor:
    """Row-wise messages for a batch of edges; each row of the inputs is one (k, l) pair."""
    p = layer_prefix(layer)
    x = ad.concat([state_k, state_l, edge_features], axis=1)
    hidden = ad.relu(ad.affine(x, store[f"{p}/mlp1/w"], store[f"{p}/mlp1/b"]))
    return ad.affine(hidden, store[f"{p}/mlp2/w"], store[f"{p}/mlp2/b"])


def aggregate(messages: Tensor, states: Tensor, receivers: np.ndarray, store: ParameterStore, layer: int) -> Tensor:
    """
    Receiver-as-query attention over incoming messages.
    Vertices without incoming messages get a zero vector.
    """
    p = layer_prefix(layer)
    n, h = states.shape
    if messages.shape[0] == 0:
        return ad.constant(np.zeros((n, h)))
    query = states @ store[f"{p}/attn/wq"]
    key = messages @ store[f"{p}/attn/wk"]
    scores = (query @ key.T) * (1.0 / math.sqrt(h))
    incoming = np.arange(n)[:, None] == np.asarray(receivers)[None, :]
    weights = ad.masked_softmax(scores, incoming)
    return weights @ messages


def gcn_layer(states: Tensor, graph: LayoutGraph, store: ParameterStore, layer: int) -> Tensor:
    p = layer_prefix(layer)
    if graph.num_edges:
        receivers, senders = graph.edges[:, 0], graph.edges[:, 1]
        msgs = message(
            ad.take_rows(states, receivers),
            ad.take_rows(states, senders),
            ad.constant(graph.edge_features),
            store,
            layer,
        )
        agg = aggregate(msgs, states, receivers, store, layer)
        mixed = states + agg
    else:
        mixed = states
    return ad.layer_norm(mixed) * store[f"{p}/ln/gamma"] + store[f"{p}/ln/beta"]


def encode_supertokens(
    doc: Document,
    graph: LayoutGraph,
    config: GcnConfig,
    store: ParameterStore,
    ids: Optional[Sequence[int]] = None,
) -> Tensor:
    """Super-Token rows in serialized order of ``doc.tokens``."""
    states = embed_nodes(doc, graph, store, config, ids)
    for layer in range(config.num_layers):
        states = gcn_layer(states, graph, store, layer)
    order = serialize(doc.tokens)
    if order == list(range(len(order))):
        return states
    return ad.take_rows(states, order)
