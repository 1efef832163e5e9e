"""
Corpus loading and the prepared-document layer.
Documents are normalized once, get their layout graph and serialized tag ids,
and are kept in a TTL dict cache so training epochs and evaluation passes
skip graph construction.
"""

import logging
import os
import time
from dataclasses import dataclass
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from decoder_metrics import LabelSchema, bioes_encode
from doc_model import (
    Document,
    EntitySpan,
    Vocabulary,
    load_vocabulary,
    normalize_coords,
    read_corpus,
    serialize,
    spans_from_groups,
)
from errors import ConfigError, FormGraphError, InvalidInputError
from graph_builder import LayoutGraph, build_layout_graph

logger = logging.getLogger(__name__)

SPLITS = ("train", "dev", "test")


@dataclass
class PreparedDoc:
    doc: Document  # normalized coordinates
    graph: LayoutGraph
    order: List[int]  # serialized position -> index into doc.tokens
    tags: Optional[np.ndarray]  # gold tag ids, serialized order
    gold: List[EntitySpan]  # gold spans over serialized positions
    split_entities: int = 0  # gold entities the reading order broke into fragments

    @property
    def n(self) -> int:
        return len(self.doc)

    @property
    def ids_serialized(self) -> np.ndarray:
        return np.asarray(self.doc.vocab_ids, dtype=np.int64)[self.order]


# ---------------------------------------------------------------------------
# TTL cache
# ---------------------------------------------------------------------------
_cache: Dict[Tuple[Any, ...], Tuple[float, PreparedDoc]] = {}
CACHE_TTL = 3600  # 1 hour


def clear_cache():
    _cache.clear()


def cache_size() -> int:
    return len(_cache)


def _evict_expired(now: float) -> None:
    for key in [k for k, (ts, _) in _cache.items() if now - ts >= CACHE_TTL]:
        del _cache[key]


def serialized_gold(spans: Sequence[EntitySpan], order: Sequence[int]) -> Tuple[List[EntitySpan], int]:
    """Gold spans over serialized positions; an entity the order breaks up becomes one span per contiguous run."""
    position = {tok: pos for pos, tok in enumerate(order)}
    groups = [(s.label, [position[t] for t in range(s.start, s.end + 1)]) for s in spans]
    gold, splits = spans_from_groups(groups, len(order))
    return gold, len(splits)


def prepare_document(doc: Document, schema: Optional[LabelSchema] = None, max_neighbors: int = 8) -> PreparedDoc:
    normalized = normalize_coords(doc)
    graph = build_layout_graph(normalized, max_neighbors)
    order = serialize(normalized.tokens)
    gold, split_entities = serialized_gold(normalized.gold_spans, order)
    if split_entities:
        logger.debug("Document %s: %d gold entities split by the reading order", doc.doc_id or "?", split_entities)
    tags = None
    if schema is not None:
        try:
            tags = np.asarray(bioes_encode(gold, len(normalized), schema), dtype=np.int64)
        except InvalidInputError as e:
            raise ConfigError(f"document {doc.doc_id or '?'} does not match the label schema: {e}") from e
    return PreparedDoc(doc=normalized, graph=graph, order=order, tags=tags, gold=gold, split_entities=split_entities)


def cached_prepare(doc: Document, schema: Optional[LabelSchema] = None, max_neighbors: int = 8) -> PreparedDoc:
    if not doc.doc_id:
        return prepare_document(doc, schema, max_neighbors)
    # the whole document is part of the key, so a reused id with new boxes or spans misses
    key = (doc, max_neighbors, tuple(schema.tags) if schema else None)
    now = time.time()
    if key in _cache:
        ts, prepared = _cache[key]
        if now - ts < CACHE_TTL:
            return prepared
    _evict_expired(now)
    prepared = prepare_document(doc, schema, max_neighbors)
    _cache[key] = (now, prepared)
    return prepared


def prepare_corpus(
    docs: Sequence[Document], schema: Optional[LabelSchema] = None, max_neighbors: int = 8
) -> List[PreparedDoc]:
    prepared = [cached_prepare(d, schema, max_neighbors) for d in docs]
    if prepared:
        edges = sum(p.graph.num_edges for p in prepared)
        tokens = sum(p.n for p in prepared)
        logger.info("Prepared %d documents (%d tokens, %.2f edges per token)", len(prepared), tokens, edges / max(tokens, 1))
        split = sum(p.split_entities for p in prepared)
        if split:
            logger.info("%d gold entities are split by the reading order and scored as fragments", split)
    return prepared


# ---------------------------------------------------------------------------
# Corpus files
# ---------------------------------------------------------------------------
def open_vocabulary(path: str, lowercase: bool = True) -> Vocabulary:
    if not os.path.isfile(path):
        raise ConfigError(f"vocabulary not found: {path}")
    return load_vocabulary(path, lowercase=lowercase)


def split_path(corpus_dir: str, split: str) -> str:
    if os.path.isfile(corpus_dir):
        return corpus_dir
    return os.path.join(corpus_dir, f"{split}.jsonl")


def load_split(corpus_dir: str, split: str, vocab: Vocabulary, required: bool = True) -> List[Document]:
    """Documents of one split; a missing file is a startup error unless ``required`` is False."""
    path = split_path(corpus_dir, split)
    if not os.path.isfile(path):
        if required:
            raise ConfigError(f"corpus split {split!r} not found at {path}")
        logger.warning("No %s split at %s", split, path)
        return []
    try:
        return read_corpus(path, vocab)
    except FormGraphError:
        logger.error("Failed to load %s split from %s", split, path, exc_info=True)
        raise


def corpus_labels(docs: Sequence[Document]) -> List[str]:
    return sorted({s.label for d in docs for s in d.gold_spans})


def check_schema(docs: Sequence[Document], schema: LabelSchema) -> None:
    unknown = sorted(set(corpus_labels(docs)) - set(schema.entity_types))
    if unknown:
        raise ConfigError(f"corpus labels {unknown} are not in the configured entity types {schema.entity_types}")
