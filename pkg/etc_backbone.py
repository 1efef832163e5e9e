"""
Local-global transformer over Super-Tokens.

Local tokens see neighbors within ``local_radius`` serialized positions plus
the global token; the global token sees and is seen by everything. Attention
is computed densely under the boolean mask, so masked pairs get exactly zero
weight and zero gradient.
"""

import logging
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np

import autodiff as ad
import rich_attention as ra
from autodiff import ParameterStore, Tensor
from doc_model import Document, serialize
from errors import ConfigError, InvalidInputError, ShapeError
from graph_builder import GEOMETRY_NAMES, LayoutGraph
from supertoken_gcn import GcnConfig, encode_supertokens, init_gcn_params

logger = logging.getLogger(__name__)

PREFIX = "etc"
MODES = ("mlm", "tagging")


@dataclass(frozen=True)
class BackboneConfig:
    num_layers: int = 2
    hidden_dim: int = 32
    num_heads: int = 4
    local_radius: int = 8
    num_global: int = 1
    max_seq: int = 1024
    use_rich_attention: bool = True
    use_gcn: bool = True
    vocab_size: int = 0
    embed_dim: int = 32
    num_tags: int = 0
    init_std: float = 0.02
    gcn: GcnConfig = field(default_factory=GcnConfig)

    def __post_init__(self):
        if self.local_radius < 1:
            raise ConfigError(f"local_radius must be >= 1, got {self.local_radius}")
        if self.num_heads < 1 or self.hidden_dim % self.num_heads:
            raise ConfigError(f"hidden_dim {self.hidden_dim} not divisible by num_heads {self.num_heads}")
        if self.num_global != 1:
            raise ConfigError("exactly one global token is supported")
        if self.num_layers < 1:
            raise ConfigError(f"num_layers must be >= 1, got {self.num_layers}")

    @property
    def head_dim(self) -> int:
        return self.hidden_dim // self.num_heads


@dataclass
class AttentionMask:
    allowed: np.ndarray  # [g + n, g + n] bool
    num_global: int

    @property
    def size(self) -> int:
        return int(self.allowed.shape[0])

    def allowed_pairs(self) -> int:
        return int(self.allowed.sum())

    def local_pairs(self) -> int:
        g = self.num_global
        return int(self.allowed[g:, g:].sum())


@dataclass
class ForwardResult:
    logits: Tensor
    mask: AttentionMask
    features: ra.PairFeatures
    inputs: Tensor  # local input rows, serialized order
    order: List[int]


def build_mask(n: int, r: int, num_global: int = 1) -> AttentionMask:
    if n <= 0:
        raise InvalidInputError("cannot build an attention mask for an empty sequence")
    idx = np.arange(n)
    m = n + num_global
    allowed = np.zeros((m, m), dtype=bool)
    allowed[:num_global, :] = True
    allowed[:, :num_global] = True
    allowed[num_global:, num_global:] = np.abs(idx[:, None] - idx[None, :]) <= r
    return AttentionMask(allowed=allowed, num_global=num_global)


# ---------------------------------------------------------------------------
# Parameters
# ---------------------------------------------------------------------------
def layer_prefix(layer: int) -> str:
    return f"{PREFIX}/layer{layer}"


def init_model(store: ParameterStore, config: BackboneConfig, rng: np.random.Generator) -> None:
    """Create every parameter the configuration needs: input path, layers and heads."""
    if config.vocab_size <= 0:
        raise ConfigError("vocab_size must be set before creating parameters")
    h, std = config.hidden_dim, config.init_std
    store.create(f"{PREFIX}/global", (config.num_global, h), rng, std=std)
    if config.use_gcn:
        init_gcn_params(store, config.gcn, rng)
        if config.gcn.hidden_dim != h:
            store.create(f"{PREFIX}/input/proj", (config.gcn.hidden_dim, h), rng, std=std)
    else:
        store.create(f"{PREFIX}/input/embed", (config.vocab_size, config.embed_dim), rng, std=std)
        store.create(f"{PREFIX}/input/w", (config.embed_dim + len(GEOMETRY_NAMES), h), rng, std=std)
        store.create(f"{PREFIX}/input/b", (h,), init="zeros")
    for layer in range(config.num_layers):
        p = layer_prefix(layer)
        for head in range(config.num_heads):
            for role in ("query", "key", "value"):
                store.create(f"{p}/head{head}/{role}/w", (h, config.head_dim), rng, std=std)
                store.create(f"{p}/head{head}/{role}/b", (config.head_dim,), init="zeros")
            if config.use_rich_attention:
                ra.init_head_params(store, layer, head, config.head_dim, rng, std=std)
        store.create(f"{p}/attn_out/w", (h, h), rng, std=std)
        store.create(f"{p}/attn_out/b", (h,), init="zeros")
        store.create(f"{p}/ln1/gamma", (h,), init="ones")
        store.create(f"{p}/ln1/beta", (h,), init="zeros")
        store.create(f"{p}/ffn/w1", (h, 4 * h), rng, std=std)
        store.create(f"{p}/ffn/b1", (4 * h,), init="zeros")
        store.create(f"{p}/ffn/w2", (4 * h, h), rng, std=std)
        store.create(f"{p}/ffn/b2", (h,), init="zeros")
        store.create(f"{p}/ln2/gamma", (h,), init="ones")
        store.create(f"{p}/ln2/beta", (h,), init="zeros")
    store.create(f"{PREFIX}/mlm/w", (h, config.vocab_size), rng, std=std)
    store.create(f"{PREFIX}/mlm/b", (config.vocab_size,), init="zeros")
    if config.num_tags > 0:
        store.create(f"{PREFIX}/tagger/w", (h, config.num_tags), rng, std=std)
        store.create(f"{PREFIX}/tagger/b", (config.num_tags,), init="zeros")
    logger.debug("Initialized %d parameters (%d values)", len(store), store.num_values())


def _head_params(store: ParameterStore, config: BackboneConfig, layer: int, head: int) -> ra.RichAttnHeadParams:
    p = f"{layer_prefix(layer)}/head{head}"
    query = (store[f"{p}/query/w"], store[f"{p}/query/b"])
    key = (store[f"{p}/key/w"], store[f"{p}/key/b"])
    if config.use_rich_attention:
        return ra.gather_head_params(store, query, key, layer, head)
    return ra.RichAttnHeadParams(query[0], query[1], key[0], key[1], affines={}, theta={})


# ---------------------------------------------------------------------------
# Layers
# ---------------------------------------------------------------------------
def transformer_layer(
    states: Tensor,
    mask: AttentionMask,
    features: Optional[ra.PairFeatures],
    store: ParameterStore,
    layer: int,
    config: BackboneConfig,
    distance_fn: ra.DistanceFn = ra.distance_score,
) -> Tensor:
    if states.shape != (mask.size, config.hidden_dim):
        raise ShapeError("transformer_layer", states.shape, (mask.size, config.hidden_dim))
    p = layer_prefix(layer)
    heads = []
    for head in range(config.num_heads):
        params = _head_params(store, config, layer, head)
        scores = ra.rich_scores(
            states,
            features if config.use_rich_attention else None,
            mask.allowed,
            params,
            mask.num_global,
            distance_fn,
        )
        weights = ad.masked_softmax(scores, mask.allowed)
        value = ad.affine(states, store[f"{p}/head{head}/value/w"], store[f"{p}/head{head}/value/b"])
        heads.append(weights @ value)
    attended = ad.affine(ad.concat(heads, axis=1), store[f"{p}/attn_out/w"], store[f"{p}/attn_out/b"])
    x = ad.layer_norm(states + attended) * store[f"{p}/ln1/gamma"] + store[f"{p}/ln1/beta"]
    inner = ad.gelu(ad.affine(x, store[f"{p}/ffn/w1"], store[f"{p}/ffn/b1"]))
    ffn = ad.affine(inner, store[f"{p}/ffn/w2"], store[f"{p}/ffn/b2"])
    return ad.layer_norm(x + ffn) * store[f"{p}/ln2/gamma"] + store[f"{p}/ln2/beta"]


def input_rows(
    doc: Document,
    graph: LayoutGraph,
    store: ParameterStore,
    config: BackboneConfig,
    order: Sequence[int],
    ids: Optional[Sequence[int]] = None,
) -> Tensor:
    """Local input rows in serialized order: Super-Tokens, or word embedding + geometry when the GCN is off."""
    if config.use_gcn:
        rows = encode_supertokens(doc, graph, config.gcn, store, ids)
        if f"{PREFIX}/input/proj" in store:
            rows = rows @ store[f"{PREFIX}/input/proj"]
        return rows
    vocab_ids = graph.vocab_ids if ids is None else np.asarray(ids, dtype=np.int64)
    vocab_ids = vocab_ids[list(order)]
    words = ad.take_rows(store[f"{PREFIX}/input/embed"], vocab_ids)
    geometry = ad.constant(graph.geometry[list(order)])
    return ad.affine(ad.concat([words, geometry], axis=1), store[f"{PREFIX}/input/w"], store[f"{PREFIX}/input/b"])


def forward_details(
    doc: Document,
    graph: LayoutGraph,
    store: ParameterStore,
    config: BackboneConfig,
    mode: str = "tagging",
    ids: Optional[Sequence[int]] = None,
    distance_fn: ra.DistanceFn = ra.distance_score,
) -> ForwardResult:
    """
    Full model pass. ``ids`` replaces the document's vocab ids (masked input for MLM)
    and follows ``doc.tokens`` order; logits follow serialized order.
    """
    if mode not in MODES:
        raise ConfigError(f"unknown mode {mode!r}; expected one of {MODES}")
    n = len(doc)
    if n > config.max_seq:
        raise InvalidInputError(f"document has {n} tokens; max_seq is {config.max_seq}")
    if graph.n != n:
        raise ShapeError("forward", (n,), (graph.n,), "document and graph sizes differ")
    mask = build_mask(n, config.local_radius, config.num_global)
    order = serialize(doc.tokens)
    features = ra.pair_features([doc.tokens[i] for i in order])
    inputs = input_rows(doc, graph, store, config, order, ids)
    states = ad.concat([store[f"{PREFIX}/global"], inputs], axis=0)
    for layer in range(config.num_layers):
        states = transformer_layer(states, mask, features, store, layer, config, distance_fn)
    local = states[config.num_global :]
    head = "mlm" if mode == "mlm" else "tagger"
    if f"{PREFIX}/{head}/w" not in store:
        raise ConfigError(f"model has no {head} head")
    logits = ad.affine(local, store[f"{PREFIX}/{head}/w"], store[f"{PREFIX}/{head}/b"])
    return ForwardResult(logits=logits, mask=mask, features=features, inputs=inputs, order=order)


def forward(
    doc: Document,
    graph: LayoutGraph,
    store: ParameterStore,
    config: BackboneConfig,
    mode: str = "tagging",
    ids: Optional[Sequence[int]] = None,
) -> Tensor:
    return forward_details(doc, graph, store, config, mode, ids).logits


def attention_cost(n: int, r: int, num_global: int = 1) -> int:
    """Allowed-pair count of the mask for ``n`` local tokens."""
    return build_mask(n, r, num_global).allowed_pairs()
