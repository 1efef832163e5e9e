"""
BIOES tag space, constrained Viterbi decoding and entity-level P/R/F1.

Tag ids: 0 is O, then B, I, E, S for each entity type in schema order.
"""

import logging
import os
from dataclasses import dataclass, field
from typing import Dict, Iterable, Iterator, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from doc_model import EntitySpan, check_spans
from errors import DecodeError, InvalidInputError

logger = logging.getLogger(__name__)

PREFIXES = ("B", "I", "E", "S")
OUTSIDE = "O"


class LabelSchema:
    def __init__(self, entity_types: Sequence[str]):
        types = list(entity_types)
        if len(set(types)) != len(types):
            raise InvalidInputError(f"duplicate entity types in {types}")
        self.entity_types = types
        self.tags: List[str] = [OUTSIDE] + [f"{p}-{t}" for t in types for p in PREFIXES]
        self.tag_ids: Dict[str, int] = {tag: i for i, tag in enumerate(self.tags)}
        k = len(self.tags)
        allowed = np.zeros((k, k), dtype=bool)
        openers = [self.tag_ids[OUTSIDE]] + [self.tag_ids[f"{p}-{t}"] for t in types for p in ("B", "S")]
        closed_states = [self.tag_ids[OUTSIDE]] + [self.tag_ids[f"{p}-{t}"] for t in types for p in ("E", "S")]
        for src in closed_states:
            allowed[src, openers] = True
        for t in types:
            inner = [self.tag_ids[f"I-{t}"], self.tag_ids[f"E-{t}"]]
            allowed[self.tag_ids[f"B-{t}"], inner] = True
            allowed[self.tag_ids[f"I-{t}"], inner] = True
        self.transitions = allowed
        self.start_allowed = np.zeros(k, dtype=bool)
        self.start_allowed[openers] = True
        self.end_allowed = np.zeros(k, dtype=bool)
        self.end_allowed[closed_states] = True

    @property
    def num_tags(self) -> int:
        return len(self.tags)

    def tag(self, prefix: str, entity_type: str) -> int:
        return self.tag_ids[f"{prefix}-{entity_type}"]

    def split(self, tag_id: int) -> Tuple[str, Optional[str]]:
        tag = self.tags[tag_id]
        if tag == OUTSIDE:
            return OUTSIDE, None
        prefix, _, entity_type = tag.partition("-")
        return prefix, entity_type


# ---------------------------------------------------------------------------
# Encoding / decoding
# ---------------------------------------------------------------------------
def bioes_encode(spans: Sequence[EntitySpan], n: int, schema: LabelSchema) -> List[int]:
    check_spans(spans, n)
    tags = [schema.tag_ids[OUTSIDE]] * n
    for span in spans:
        if span.label not in schema.entity_types:
            raise InvalidInputError(f"label {span.label!r} is not in the schema {schema.entity_types}")
        if span.start == span.end:
            tags[span.start] = schema.tag("S", span.label)
            continue
        tags[span.start] = schema.tag("B", span.label)
        for i in range(span.start + 1, span.end):
            tags[i] = schema.tag("I", span.label)
        tags[span.end] = schema.tag("E", span.label)
    return tags


def validate_tags(tags: Sequence[int], schema: LabelSchema) -> bool:
    if not len(tags):
        return True
    if not schema.start_allowed[tags[0]] or not schema.end_allowed[tags[-1]]:
        return False
    return all(schema.transitions[a, b] for a, b in zip(tags, tags[1:]))


def bioes_decode(tags: Sequence[int], schema: LabelSchema, strict: bool = True) -> List[EntitySpan]:
    """
    Spans from a tag sequence. In strict mode an invalid sequence raises DecodeError;
    otherwise incomplete fragments (B/I without a closing E, stray I/E) are dropped.
    """
    if strict and not validate_tags(tags, schema):
        raise DecodeError(f"invalid BIOES sequence: {[schema.tags[t] for t in tags]}")
    spans: List[EntitySpan] = []
    open_start: Optional[int] = None
    open_type: Optional[str] = None
    for i, tag_id in enumerate(tags):
        prefix, entity_type = schema.split(tag_id)
        if prefix in ("I", "E") and (open_type is None or entity_type != open_type):
            open_start, open_type = None, None
            continue
        if prefix == "S":
            spans.append(EntitySpan(entity_type, i, i))
            open_start, open_type = None, None
        elif prefix == "B":
            open_start, open_type = i, entity_type
        elif prefix == "E":
            spans.append(EntitySpan(open_type, open_start, i))
            open_start, open_type = None, None
        elif prefix == OUTSIDE:
            open_start, open_type = None, None
    return spans


# ---------------------------------------------------------------------------
# Viterbi
# ---------------------------------------------------------------------------
def viterbi(logits: np.ndarray, schema: LabelSchema) -> List[int]:
    """
    Highest-scoring valid tag sequence; ties go to the lexicographically smallest id sequence.

    A backward pass computes the best achievable suffix score for every
    (position, tag); the forward pass then picks, at each step, the smallest
    allowed tag whose prefix + suffix total equals the optimum.
    """
    scores = np.asarray(logits, dtype=np.float64)
    n, k = scores.shape
    if k != schema.num_tags:
        raise InvalidInputError(f"logits have {k} columns; schema has {schema.num_tags} tags")
    if n == 0:
        return []
    neg = -np.inf
    trans = np.where(schema.transitions, 0.0, neg)
    suffix = np.full((n, k), neg)
    suffix[-1] = np.where(schema.end_allowed, scores[-1], neg)
    for t in range(n - 2, -1, -1):
        suffix[t] = scores[t] + (trans + suffix[t + 1][None, :]).max(axis=1)
    start_totals = np.where(schema.start_allowed, suffix[0], neg)
    best = start_totals.max()
    tags = [int(np.flatnonzero(start_totals == best)[0])]
    for t in range(1, n):
        candidates = trans[tags[-1]] + suffix[t]
        target = candidates.max()
        tags.append(int(np.flatnonzero(candidates == target)[0]))
    return tags


def sequence_score(logits: np.ndarray, tags: Sequence[int]) -> float:
    return float(sum(logits[t, tag] for t, tag in enumerate(tags)))


def valid_sequences(n: int, schema: LabelSchema) -> Iterator[Tuple[int, ...]]:
    """Every valid tag sequence of length n, in lexicographic order of tag ids."""
    if n == 0:
        yield ()
        return
    for first in np.flatnonzero(schema.start_allowed):
        yield from _extend((int(first),), n, schema)


def _extend(prefix: Tuple[int, ...], n: int, schema: LabelSchema) -> Iterator[Tuple[int, ...]]:
    if len(prefix) == n:
        if schema.end_allowed[prefix[-1]]:
            yield prefix
        return
    for nxt in np.flatnonzero(schema.transitions[prefix[-1]]):
        yield from _extend(prefix + (int(nxt),), n, schema)


def brute_force_decode(logits: np.ndarray, schema: LabelSchema) -> List[int]:
    """Exhaustive search over every valid sequence; the first best in lexicographic order wins."""
    logits = np.asarray(logits, dtype=np.float64)
    n, _ = logits.shape
    best_tags: Optional[Tuple[int, ...]] = None
    best_score = -np.inf
    for tags in valid_sequences(n, schema):
        score = sequence_score(logits, tags)
        if score > best_score:
            best_tags, best_score = tags, score
    return list(best_tags) if best_tags is not None else []


# ---------------------------------------------------------------------------
# Scoring
# ---------------------------------------------------------------------------
@dataclass
class PRF:
    precision: float
    recall: float
    f1: float
    support: int = 0
    predicted: int = 0
    correct: int = 0


def _prf(correct: int, predicted: int, gold: int) -> PRF:
    if predicted == 0:
        precision = 1.0 if gold == 0 else 0.0
    else:
        precision = correct / predicted
    if gold == 0:
        recall = 1.0 if predicted == 0 else 0.0
    else:
        recall = correct / gold
    f1 = 0.0 if precision + recall == 0 else 2 * precision * recall / (precision + recall)
    return PRF(precision, recall, f1, support=gold, predicted=predicted, correct=correct)


@dataclass
class EntityScores:
    micro: PRF
    macro_f1: float
    per_type: Dict[str, PRF] = field(default_factory=dict)


def _key(span: EntitySpan) -> Tuple[str, int, int]:
    return span.label, span.start, span.end


def _count(
    pred_docs: Iterable[Sequence[EntitySpan]], gold_docs: Iterable[Sequence[EntitySpan]]
) -> Dict[str, List[int]]:
    counts: Dict[str, List[int]] = {}  # label -> [correct, predicted, gold]
    for pred, gold in zip(pred_docs, gold_docs):
        gold_keys = {_key(s) for s in gold}
        for s in pred:
            c = counts.setdefault(s.label, [0, 0, 0])
            c[1] += 1
            if _key(s) in gold_keys:
                c[0] += 1
        for s in gold:
            counts.setdefault(s.label, [0, 0, 0])[2] += 1
    return counts


def _scores_from_counts(counts: Dict[str, List[int]]) -> EntityScores:
    per_type = {label: _prf(*c) for label, c in sorted(counts.items())}
    total = [sum(c[i] for c in counts.values()) for i in range(3)]
    micro = _prf(*total)
    in_gold = [prf.f1 for prf in per_type.values() if prf.support > 0]
    macro = float(np.mean(in_gold)) if in_gold else micro.f1
    return EntityScores(micro=micro, macro_f1=macro, per_type=per_type)


def entity_prf(pred: Sequence[EntitySpan], gold: Sequence[EntitySpan]) -> EntityScores:
    """Exact-match (label, start, end) scoring for one document."""
    return _scores_from_counts(_count([pred], [gold]))


def corpus_prf(pred_docs: Sequence[Sequence[EntitySpan]], gold_docs: Sequence[Sequence[EntitySpan]]) -> EntityScores:
    if len(pred_docs) != len(gold_docs):
        raise InvalidInputError(f"{len(pred_docs)} predicted documents vs {len(gold_docs)} gold documents")
    return _scores_from_counts(_count(pred_docs, gold_docs))


def prf_frame(scores: EntityScores) -> pd.DataFrame:
    rows = [
        {"type": label, "precision": s.precision, "recall": s.recall, "f1": s.f1, "support": s.support}
        for label, s in scores.per_type.items()
    ]
    m = scores.micro
    rows.append({"type": "micro", "precision": m.precision, "recall": m.recall, "f1": m.f1, "support": m.support})
    rows.append({"type": "macro", "precision": np.nan, "recall": np.nan, "f1": scores.macro_f1, "support": m.support})
    return pd.DataFrame(rows, columns=["type", "precision", "recall", "f1", "support"])


def write_prf_report(scores: EntityScores, path: str) -> str:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    prf_frame(scores).to_csv(path, index=False, float_format="%.6f")
    logger.info("Wrote evaluation report %s (micro F1 %.4f)", path, scores.micro.f1)
    return path
