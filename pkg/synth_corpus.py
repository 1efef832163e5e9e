"""
Synthetic multi-column forms with gold entities.

The page is cut into columns; each column holds a stack of text blocks (one
entity or one unlabeled block each). Blocks are placed band by band: with
probability ``interleave_prob`` a band holds the next block of every column
side by side, so their lines share y positions and reading-order
serialization interleaves them; otherwise the band holds a single block.
"""

import json
import logging
import math
import os
from dataclasses import asdict, dataclass, field
from functools import lru_cache
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from doc_model import (
    BoundingBox,
    Document,
    Token,
    Vocabulary,
    load_vocabulary,
    normalize_coords,
    reorder,
    serialize,
    spans_from_groups,
    write_corpus,
)
from errors import ConfigError, GenerationError, ParseError
from graph_builder import build_layout_graph, graph_distances

logger = logging.getLogger(__name__)

DEFAULT_VOCAB_PATH = os.path.join(os.path.dirname(os.path.abspath(__file__)), "data", "toy_vocab.txt")
NULL_LABEL = "other"
SPLIT_OFFSETS = {"train": 0, "dev": 1_000_000, "test": 2_000_000}


@dataclass(frozen=True)
class GenConfig:
    n_docs: int = 100
    entity_types: Tuple[str, ...] = ("header", "question", "answer")
    label_weights: Tuple[float, ...] = (0.1, 0.35, 0.35, 0.2)  # entity types, then the null class
    columns: int = 2
    rows_per_column: int = 6
    entity_len: Tuple[int, int] = (1, 5)
    words_per_line: int = 2
    interleave_prob: float = 0.8
    type_word_prob: float = 0.8
    seed: int = 0
    page_width: float = 1000.0
    page_height: float = 1400.0
    margin: float = 40.0
    line_height: float = 30.0
    token_height: float = 20.0
    jitter: float = 3.0
    word_gap: float = 10.0
    block_gap: float = 20.0
    char_width: float = 10.0
    vocab_path: str = DEFAULT_VOCAB_PATH
    split_ratio: Tuple[float, float, float] = (0.8, 0.1, 0.1)

    def __post_init__(self):
        object.__setattr__(self, "entity_types", tuple(self.entity_types))
        object.__setattr__(self, "label_weights", tuple(self.label_weights))
        object.__setattr__(self, "entity_len", tuple(self.entity_len))
        object.__setattr__(self, "split_ratio", tuple(self.split_ratio))
        if self.n_docs <= 0 or self.rows_per_column <= 0 or self.words_per_line <= 0:
            raise ConfigError("n_docs, rows_per_column and words_per_line must be positive")
        if not 1 <= self.columns <= 3:
            raise ConfigError(f"columns must be 1..3, got {self.columns}")
        lo, hi = self.entity_len
        if not 1 <= lo <= hi:
            raise ConfigError(f"bad entity length range {self.entity_len}")
        if not 0.0 <= self.interleave_prob <= 1.0:
            raise ConfigError(f"interleave_prob must be in [0, 1], got {self.interleave_prob}")
        if len(self.label_weights) != len(self.entity_types) + 1:
            raise ConfigError("label_weights needs one weight per entity type plus one for the null class")
        if self.jitter > 0.1 * self.line_height:
            raise ConfigError("jitter above 10% of the line height breaks line grouping")

    @property
    def labels(self) -> Tuple[str, ...]:
        return self.entity_types + (NULL_LABEL,)

    def as_dict(self) -> Dict:
        return asdict(self)


@dataclass
class Layout:
    doc: Document
    groups: List[Tuple[str, List[int]]]  # labeled entities, serialized positions
    blocks: List[List[int]]  # every block, serialized positions
    splits: List[Tuple[int, int]]  # (group index, fragments) for entities broken by serialization


@lru_cache(maxsize=8)
def _cached_vocabulary(path: str) -> Vocabulary:
    return load_vocabulary(path)


def word_pools(vocab: Vocabulary, labels: Sequence[str]) -> Dict[str, List[int]]:
    """Type-correlated word lists: plain pieces dealt round-robin over the labels."""
    plain = [i for i in vocab.regular_ids if not vocab.piece(i).startswith("##")]
    if len(plain) < len(labels):
        raise ConfigError(f"vocabulary has only {len(plain)} plain pieces for {len(labels)} labels")
    return {label: plain[k :: len(labels)] for k, label in enumerate(labels)}


def _block_words(rng: np.random.Generator, config: GenConfig, label: str, pools: Dict[str, List[int]], everything: List[int]) -> List[int]:
    lo, hi = config.entity_len
    length = int(rng.integers(lo, hi + 1))
    own = pools[label]
    return [
        int(own[rng.integers(len(own))]) if rng.random() < config.type_word_prob else int(everything[rng.integers(len(everything))])
        for _ in range(length)
    ]


def generate_layout(config: GenConfig, doc_seed: int, vocab: Optional[Vocabulary] = None) -> Layout:
    vocab = vocab or _cached_vocabulary(config.vocab_path)
    rng = np.random.default_rng(doc_seed)
    labels = config.labels
    pools = word_pools(vocab, labels)
    everything = [i for pool in pools.values() for i in pool]
    weights = np.asarray(config.label_weights, dtype=np.float64)
    weights = weights / weights.sum()

    column_width = (config.page_width - 2 * config.margin) / config.columns
    queues: List[List[Tuple[str, List[int]]]] = []
    for _ in range(config.columns):
        column = []
        for _ in range(config.rows_per_column):
            label = labels[int(rng.choice(len(labels), p=weights))]
            column.append((label, _block_words(rng, config, label, pools, everything)))
        queues.append(column)

    tokens: List[Token] = []
    block_members: List[List[int]] = []
    block_labels: List[str] = []
    bottom_limit = config.page_height - config.margin
    y = config.margin

    def place(column: int, label: str, words: List[int], top: float) -> float:
        members = []
        for k, vocab_id in enumerate(words):
            line, slot = divmod(k, config.words_per_line)
            if slot == 0:
                x = config.margin + column * column_width
            text = vocab.piece(vocab_id)
            width = config.char_width * len(text)
            if x + width > config.margin + (column + 1) * column_width:
                raise GenerationError(f"line of block in column {column} is wider than the column")
            dx, dy = rng.uniform(-config.jitter, config.jitter, size=2)
            y0 = top + line * config.line_height + dy
            box = BoundingBox(max(0.0, x + dx), max(0.0, y0), max(0.0, x + dx) + width, max(0.0, y0) + config.token_height)
            members.append(len(tokens))
            tokens.append(Token(text, vocab_id, box, word_index=len(tokens)))
            x += width + config.word_gap
        block_members.append(members)
        block_labels.append(label)
        lines = math.ceil(len(words) / config.words_per_line)
        return top + (lines - 1) * config.line_height + config.token_height

    while any(queues):
        if config.columns > 1 and rng.random() < config.interleave_prob:
            active = [c for c in range(config.columns) if queues[c]]
        else:
            # the fullest column goes next
            active = [max(range(config.columns), key=lambda c: (len(queues[c]), -c))]
        band_bottom = y
        for c in active:
            label, words = queues[c].pop(0)
            band_bottom = max(band_bottom, place(c, label, words, y))
        if band_bottom + config.jitter > bottom_limit:
            raise GenerationError(
                f"layout overflows the page: band ends at {band_bottom:.0f}px, limit {bottom_limit:.0f}px"
            )
        y = band_bottom + config.block_gap

    order = serialize(tokens)
    position = {old: new for new, old in enumerate(order)}
    ordered = [
        Token(t.text, t.vocab_id, t.box, word_index=new) for new, t in enumerate(reorder(tokens, order))
    ]
    blocks = [sorted(position[i] for i in members) for members in block_members]
    groups = [(label, blocks[b]) for b, label in enumerate(block_labels) if label != NULL_LABEL]
    spans, splits = spans_from_groups(groups, len(ordered))
    doc = Document(
        tokens=tuple(ordered),
        page_width=config.page_width,
        page_height=config.page_height,
        gold_spans=tuple(spans),
        doc_id=f"synth-{doc_seed}",
    )
    return Layout(doc=doc, groups=groups, blocks=blocks, splits=splits)


def generate_document(config: GenConfig, doc_seed: int, vocab: Optional[Vocabulary] = None) -> Document:
    return generate_layout(config, doc_seed, vocab).doc


def split_sizes(n_docs: int, ratio: Sequence[float]) -> Dict[str, int]:
    train = int(round(n_docs * ratio[0]))
    dev = int(round(n_docs * ratio[1]))
    return {"train": train, "dev": dev, "test": max(0, n_docs - train - dev)}


def split_seeds(config: GenConfig) -> Dict[str, List[int]]:
    sizes = split_sizes(config.n_docs, config.split_ratio)
    return {name: [config.seed + SPLIT_OFFSETS[name] + i for i in range(size)] for name, size in sizes.items()}


def generate_corpus(config: GenConfig, out_dir: str, vocab: Optional[Vocabulary] = None) -> Dict[str, str]:
    """Write train/dev/test corpora plus a manifest; returns the split -> path map."""
    vocab = vocab or _cached_vocabulary(config.vocab_path)
    paths: Dict[str, str] = {}
    sizes: Dict[str, int] = {}
    for name, seeds in split_seeds(config).items():
        docs = [generate_document(config, s, vocab) for s in seeds]
        path = os.path.join(out_dir, f"{name}.jsonl")
        write_corpus(path, docs)
        paths[name] = path
        sizes[name] = len(docs)
    manifest = {"generator": config.as_dict(), "splits": sizes, "files": {k: os.path.basename(v) for k, v in paths.items()}}
    manifest_path = os.path.join(out_dir, "manifest.json")
    try:
        with open(manifest_path, "w", encoding="utf-8") as fh:
            json.dump(manifest, fh, indent=2)
    except OSError as e:
        logger.error("Could not write corpus manifest %s: %s", manifest_path, e, exc_info=True)
        raise ParseError(manifest_path, "file", str(e)) from e
    logger.info("Generated corpus in %s: %s", out_dir, sizes)
    return paths


# ---------------------------------------------------------------------------
# Corpus statistics
# ---------------------------------------------------------------------------
def split_rate(layouts: Sequence[Layout]) -> float:
    """Fraction of documents with at least one entity broken by serialization."""
    if not layouts:
        return 0.0
    return sum(1 for layout in layouts if layout.splits) / len(layouts)


def fragment_connectivity_rate(layouts: Sequence[Layout], max_hops: int = 3, max_neighbors: int = 8) -> float:
    """
    Share of split entities whose consecutive fragments are joined within
    ``max_hops`` edges of the capped layout graph.
    """
    total, connected = 0, 0
    for layout in layouts:
        if not layout.splits:
            continue
        graph = build_layout_graph(normalize_coords(layout.doc), max_neighbors)
        edges = [tuple(e) for e in graph.edges]
        for group_index, _ in layout.splits:
            _, members = layout.groups[group_index]
            runs = spans_from_groups([("x", members)], len(layout.doc))[0]
            total += 1
            ok = True
            for a, b in zip(runs, runs[1:]):
                dist = graph_distances(graph.n, edges, a.end)
                if dist[b.start] is None or dist[b.start] > max_hops:
                    ok = False
                    break
            connected += ok
    return connected / total if total else 1.0


def label_distribution(docs: Sequence[Document]) -> pd.DataFrame:
    rows: Dict[str, Dict[str, int]] = {}
    for doc in docs:
        for span in doc.gold_spans:
            row = rows.setdefault(span.label, {"label": span.label, "spans": 0, "tokens": 0})
            row["spans"] += 1
            row["tokens"] += span.length
    return pd.DataFrame(sorted(rows.values(), key=lambda r: r["label"]), columns=["label", "spans", "tokens"])
