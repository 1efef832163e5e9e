"""
Form documents: boxes, tokens, entity spans, the vocabulary, reading-order
serialization, coordinate normalization and the FUNSD / corpus readers.
"""

import json
import logging
import math
import os
from dataclasses import dataclass, field, replace
from typing import Any, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from errors import InvalidInputError, ParseError

logger = logging.getLogger(__name__)

UNK = "[UNK]"
MASK = "[MASK]"
CONTINUATION = "##"
NULL_LABEL = "other"
COORD_TOLERANCE = 1e-9
LINE_THRESHOLD = 0.5  # fraction of the median token height


# ---------------------------------------------------------------------------
# Domain types
# ---------------------------------------------------------------------------
@dataclass(frozen=True)
class BoundingBox:
    x0: float
    y0: float
    x1: float
    y1: float

    def __post_init__(self):
        coords = (self.x0, self.y0, self.x1, self.y1)
        if not all(math.isfinite(c) for c in coords):
            raise InvalidInputError(f"non-finite box {coords}")
        if min(coords) < 0:
            raise InvalidInputError(f"negative coordinate in box {coords}")
        if self.x0 > self.x1 or self.y0 > self.y1:
            raise InvalidInputError(f"degenerate box {coords}")

    @classmethod
    def from_seq(cls, values: Sequence[float]) -> "BoundingBox":
        if len(values) != 4:
            raise InvalidInputError(f"box needs 4 coordinates, got {len(values)}")
        return cls(*(float(v) for v in values))

    @property
    def width(self) -> float:
        return self.x1 - self.x0

    @property
    def height(self) -> float:
        return self.y1 - self.y0

    @property
    def center(self) -> Tuple[float, float]:
        return (self.x0 + self.x1) / 2.0, (self.y0 + self.y1) / 2.0

    def as_list(self) -> List[float]:
        return [self.x0, self.y0, self.x1, self.y1]

    def scaled(self, factor: float) -> "BoundingBox":
        return BoundingBox(self.x0 / factor, self.y0 / factor, self.x1 / factor, self.y1 / factor)

    def translated(self, dx: float, dy: float) -> "BoundingBox":
        return BoundingBox(self.x0 + dx, self.y0 + dy, self.x1 + dx, self.y1 + dy)


@dataclass(frozen=True)
class Token:
    text: str
    vocab_id: int
    box: BoundingBox
    word_index: int = 0

    def __post_init__(self):
        if not self.text:
            raise InvalidInputError("token text must be non-empty")
        if self.vocab_id < 0:
            raise InvalidInputError(f"negative vocab id {self.vocab_id}")


@dataclass(frozen=True)
class EntitySpan:
    label: str
    start: int
    end: int  # inclusive

    @property
    def length(self) -> int:
        return self.end - self.start + 1


def check_spans(spans: Sequence[EntitySpan], n: int) -> None:
    """Raise InvalidInputError unless spans are in range and pairwise non-overlapping."""
    last_end = -1
    for span in sorted(spans, key=lambda s: (s.start, s.end)):
        if not (0 <= span.start <= span.end < n):
            raise InvalidInputError(f"span {span} out of range for {n} tokens")
        if span.start <= last_end:
            raise InvalidInputError(f"span {span} overlaps a previous span")
        last_end = span.end


@dataclass(frozen=True)
class Document:
    tokens: Tuple[Token, ...]
    page_width: float
    page_height: float
    gold_spans: Tuple[EntitySpan, ...] = ()
    doc_id: str = ""

    def __post_init__(self):
        object.__setattr__(self, "tokens", tuple(self.tokens))
        object.__setattr__(self, "gold_spans", tuple(sorted(self.gold_spans, key=lambda s: s.start)))
        if self.page_width < 0 or self.page_height < 0:
            raise InvalidInputError(f"negative page size {self.page_width}x{self.page_height}")
        for tok in self.tokens:
            if tok.box.x1 > self.page_width + COORD_TOLERANCE or tok.box.y1 > self.page_height + COORD_TOLERANCE:
                raise InvalidInputError(
                    f"token {tok.text!r} box {tok.box.as_list()} outside page {self.page_width}x{self.page_height}"
                )
        check_spans(self.gold_spans, len(self.tokens))

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def vocab_ids(self) -> List[int]:
        return [t.vocab_id for t in self.tokens]

    def span_text(self, span: EntitySpan) -> str:
        return "".join(t.text for t in self.tokens[span.start : span.end + 1])


# ---------------------------------------------------------------------------
# Vocabulary
# ---------------------------------------------------------------------------
class Vocabulary:
    """One piece per line; line number is the id and line 0 is the unknown fallback."""

    def __init__(self, pieces: Sequence[str], lowercase: bool = False):
        pieces = [p for p in pieces]
        if not pieces:
            raise InvalidInputError("vocabulary is empty")
        self.pieces = pieces
        self.lowercase = lowercase
        self._ids: Dict[str, int] = {}
        for i, piece in enumerate(pieces):
            self._ids.setdefault(piece, i)
        self.unk_id = 0
        self.mask_id: Optional[int] = self._ids.get(MASK)
        self.special_ids = {i for i, p in enumerate(pieces) if p.startswith("[") and p.endswith("]")}
        self.special_ids.add(self.unk_id)

    def __len__(self) -> int:
        return len(self.pieces)

    def __contains__(self, piece: str) -> bool:
        return piece in self._ids

    def id_of(self, piece: str) -> int:
        return self._ids.get(piece, self.unk_id)

    def piece(self, vocab_id: int) -> str:
        return self.pieces[vocab_id]

    @property
    def regular_ids(self) -> List[int]:
        return [i for i in range(len(self.pieces)) if i not in self.special_ids]

    def require_mask(self) -> int:
        if self.mask_id is None:
            raise InvalidInputError(f"vocabulary has no {MASK} entry")
        return self.mask_id

    def segment(self, word: str) -> List[Tuple[str, int]]:
        """
        Greedy longest-match piece segmentation.
        Non-initial pieces try the "##" continuation form first, then the bare piece.
        Returns (surface, id) pairs; a word that cannot be fully covered is one fallback piece.
        """
        key = word.lower() if self.lowercase else word
        if len(key) != len(word):
            word = key
        out: List[Tuple[str, int]] = []
        start = 0
        while start < len(key):
            match = None
            for end in range(len(key), start, -1):
                piece = key[start:end]
                candidates = [CONTINUATION + piece, piece] if start > 0 else [piece]
                for cand in candidates:
                    if cand in self._ids and self._ids[cand] not in self.special_ids:
                        match = (word[start:end], self._ids[cand], end)
                        break
                if match:
                    break
            if match is None:
                return [(word, self.unk_id)]
            out.append(match[:2])
            start = match[2]
        return out


def load_vocabulary(path: str, lowercase: bool = False) -> Vocabulary:
    try:
        with open(path, encoding="utf-8") as fh:
            pieces = [line.rstrip("\n") for line in fh]
    except OSError as e:
        logger.error("Could not read vocabulary %s: %s", path, e, exc_info=True)
        raise ParseError(path, "vocabulary", str(e)) from e
    pieces = [p for p in pieces if p.strip()]
    if not pieces or pieces[0] != UNK:
        raise ParseError(path, "line 0", f"first line must be {UNK}")
    logger.info("Loaded vocabulary %s (%d pieces)", path, len(pieces))
    return Vocabulary(pieces, lowercase=lowercase)


# ---------------------------------------------------------------------------
# Tokenization and serialization
# ---------------------------------------------------------------------------
WordInput = Tuple[str, Union[BoundingBox, Sequence[float]]]


def tokenize_words(words: Sequence[WordInput], vocab: Vocabulary) -> List[Token]:
    """Split OCR words into vocabulary pieces; every piece keeps the full word box and word index."""
    tokens: List[Token] = []
    for word_index, (text, box) in enumerate(words):
        if not isinstance(box, BoundingBox):
            box = BoundingBox.from_seq(box)
        if not text or not text.strip():
            raise InvalidInputError(f"word {word_index} has empty text")
        for part in text.split():
            for surface, vocab_id in vocab.segment(part):
                tokens.append(Token(surface, vocab_id, box, word_index))
    return tokens


def _box_of(item: Union[Token, BoundingBox]) -> BoundingBox:
    return item.box if isinstance(item, Token) else item


def serialize(items: Sequence[Union[Token, BoundingBox]]) -> List[int]:
    """
    Reading order over tokens: left-to-right within a line, lines top-to-bottom.

    A token joins the current line when its vertical center lies closer than
    half the median token height to the line's mean center; lines are then
    ordered by mean center y and tokens within a line by center x.
    """
    n = len(items)
    if n == 0:
        return []
    boxes = [_box_of(t) for t in items]
    xc = np.array([b.center[0] for b in boxes])
    yc = np.array([b.center[1] for b in boxes])
    heights = np.array([b.height for b in boxes])
    threshold = LINE_THRESHOLD * float(np.median(heights))

    by_y = sorted(range(n), key=lambda i: (yc[i], xc[i], i))
    lines: List[List[int]] = []
    line_sum = 0.0
    for i in by_y:
        if lines and abs(yc[i] - line_sum / len(lines[-1])) < threshold:
            lines[-1].append(i)
            line_sum += yc[i]
        else:
            lines.append([i])
            line_sum = yc[i]

    def line_key(line: List[int]):
        mean_y = sum(yc[i] for i in line) / len(line)
        return mean_y, min(xc[i] for i in line), min(line)

    order: List[int] = []
    for line in sorted(lines, key=line_key):
        order.extend(sorted(line, key=lambda i: (xc[i], yc[i], i)))
    return order


def spans_from_groups(
    groups: Sequence[Tuple[str, Iterable[int]]], n: int
) -> Tuple[List[EntitySpan], List[Tuple[int, int]]]:
    """
    Turn per-entity token index sets into maximal contiguous spans.
    Returns the spans (sorted by start) and (group index, fragment count) for every group that split.
    """
    spans: List[EntitySpan] = []
    splits: List[Tuple[int, int]] = []
    for g, (label, indices) in enumerate(groups):
        idx = sorted(set(int(i) for i in indices))
        if not idx:
            continue
        runs = [[idx[0], idx[0]]]
        for i in idx[1:]:
            if i == runs[-1][1] + 1:
                runs[-1][1] = i
            else:
                runs.append([i, i])
        if len(runs) > 1:
            splits.append((g, len(runs)))
        spans.extend(EntitySpan(label, a, b) for a, b in runs)
    spans.sort(key=lambda s: s.start)
    check_spans(spans, n)
    return spans, splits


def reorder(tokens: Sequence[Token], order: Sequence[int]) -> List[Token]:
    return [tokens[i] for i in order]


def normalize_coords(doc: Document) -> Document:
    """Divide every coordinate by max(page width, page height)."""
    if doc.page_width <= 0 or doc.page_height <= 0:
        raise InvalidInputError(f"page size must be positive, got {doc.page_width}x{doc.page_height}")
    scale = max(doc.page_width, doc.page_height)
    if scale == 1.0:
        return doc
    tokens = tuple(replace(t, box=t.box.scaled(scale)) for t in doc.tokens)
    return replace(doc, tokens=tokens, page_width=doc.page_width / scale, page_height=doc.page_height / scale)


# ---------------------------------------------------------------------------
# FUNSD ingestion
# ---------------------------------------------------------------------------
@dataclass
class LoadReport:
    path: str
    n_entities: int = 0
    n_words: int = 0
    n_tokens: int = 0
    n_links: int = 0
    skipped_words: int = 0
    split_entities: List[Tuple[int, int]] = field(default_factory=list)
    label_counts: Dict[str, int] = field(default_factory=dict)

    def as_dict(self) -> Dict[str, Any]:
        return {
            "path": self.path,
            "entities": self.n_entities,
            "words": self.n_words,
            "tokens": self.n_tokens,
            "links": self.n_links,
            "skipped_words": self.skipped_words,
            "split_entities": len(self.split_entities),
            "labels": dict(self.label_counts),
        }


def _require(entry: Dict[str, Any], key: str, where: str, path: str) -> Any:
    if not isinstance(entry, dict) or key not in entry:
        raise ParseError(path, f"{where}.{key}")
    return entry[key]


def _parse_box(values: Any, where: str, path: str) -> BoundingBox:
    if not isinstance(values, (list, tuple)) or len(values) != 4:
        raise ParseError(path, where, "expected [x0, y0, x1, y1]")
    try:
        x0, y0, x1, y1 = (float(v) for v in values)
    except (TypeError, ValueError):
        raise ParseError(path, where, "non-numeric coordinate") from None
    # a few official annotations list corners in the wrong order
    try:
        return BoundingBox(min(x0, x1), min(y0, y1), max(x0, x1), max(y0, y1))
    except InvalidInputError as e:
        raise ParseError(path, where, str(e)) from e


def read_funsd(path: str, vocab: Vocabulary) -> Tuple[Document, LoadReport]:
    try:
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
    except OSError as e:
        logger.error("Could not read FUNSD file %s: %s", path, e, exc_info=True)
        raise ParseError(path, "file", str(e)) from e
    except json.JSONDecodeError as e:
        raise ParseError(path, "json", str(e)) from e
    if not isinstance(data, dict) or not isinstance(data.get("form"), list):
        raise ParseError(path, "form", "top-level 'form' array missing")

    report = LoadReport(path=str(path))
    words: List[Tuple[str, BoundingBox]] = []
    word_entity: List[int] = []
    entity_labels: List[str] = []
    for e_idx, entry in enumerate(data["form"]):
        where = f"form[{e_idx}]"
        label = str(_require(entry, "label", where, path)).strip().lower()
        _parse_box(_require(entry, "box", where, path), f"{where}.box", path)
        _require(entry, "text", where, path)
        entry_words = _require(entry, "words", where, path)
        links = entry.get("linking", [])
        if not isinstance(links, list) or any(not isinstance(p, list) or len(p) != 2 for p in links):
            raise ParseError(path, f"{where}.linking", "expected a list of id pairs")
        report.n_links += len(links)
        if not isinstance(entry_words, list):
            raise ParseError(path, f"{where}.words", "expected a list")
        entity_labels.append(label)
        report.label_counts[label] = report.label_counts.get(label, 0) + 1
        for w_idx, word in enumerate(entry_words):
            w_where = f"{where}.words[{w_idx}]"
            text = _require(word, "text", w_where, path)
            box = _parse_box(_require(word, "box", w_where, path), f"{w_where}.box", path)
            if not isinstance(text, str) or not text.strip():
                report.skipped_words += 1
                continue
            words.append((text, box))
            word_entity.append(e_idx)
    report.n_entities = len(entity_labels)
    report.n_words = len(words)
    if report.skipped_words:
        logger.warning("%s: skipped %d empty words", path, report.skipped_words)

    tokens = tokenize_words(words, vocab)
    order = serialize(tokens)
    ordered = reorder(tokens, order)
    members: Dict[int, List[int]] = {}
    for pos, tok in enumerate(ordered):
        members.setdefault(word_entity[tok.word_index], []).append(pos)
    groups = [
        (entity_labels[e_idx], members.get(e_idx, []))
        for e_idx in range(len(entity_labels))
        if entity_labels[e_idx] != NULL_LABEL
    ]
    group_entity = [e for e in range(len(entity_labels)) if entity_labels[e] != NULL_LABEL]
    spans, splits = spans_from_groups(groups, len(ordered))
    report.split_entities = [(group_entity[g], count) for g, count in splits]
    if splits:
        logger.warning("%s: %d entities are not contiguous after serialization", path, len(splits))
    report.n_tokens = len(ordered)

    page_w = max([b.x1 for _, b in words], default=0.0)
    page_h = max([b.y1 for _, b in words], default=0.0)
    doc = Document(
        tokens=tuple(ordered),
        page_width=max(page_w, 1.0),
        page_height=max(page_h, 1.0),
        gold_spans=tuple(spans),
        doc_id=os.path.splitext(os.path.basename(str(path)))[0],
    )
    return doc, report


def load_funsd(path: str, vocab: Vocabulary) -> Document:
    doc, _ = read_funsd(path, vocab)
    return doc


# ---------------------------------------------------------------------------
# Internal corpus: one JSON record per line
# ---------------------------------------------------------------------------
def document_to_record(doc: Document) -> Dict[str, Any]:
    return {
        "doc_id": doc.doc_id,
        "page_w": doc.page_width,
        "page_h": doc.page_height,
        "tokens": [
            {"text": t.text, "id": t.vocab_id, "word": t.word_index, "box": t.box.as_list()} for t in doc.tokens
        ],
        "entities": [{"label": s.label, "start": s.start, "end": s.end} for s in doc.gold_spans],
    }


def document_from_record(record: Dict[str, Any], vocab: Vocabulary, where: str = "record", path: str = "") -> Document:
    try:
        tokens = []
        for i, t in enumerate(record["tokens"]):
            vocab_id = int(t["id"]) if "id" in t else vocab.id_of(t["text"])
            if not 0 <= vocab_id < len(vocab):
                raise ParseError(path, f"{where}.tokens[{i}].id", f"{vocab_id} outside vocabulary of {len(vocab)}")
            tokens.append(Token(t["text"], vocab_id, BoundingBox.from_seq(t["box"]), int(t.get("word", i))))
        spans = [EntitySpan(str(e["label"]), int(e["start"]), int(e["end"])) for e in record.get("entities", [])]
        return Document(
            tokens=tuple(tokens),
            page_width=float(record["page_w"]),
            page_height=float(record["page_h"]),
            gold_spans=tuple(spans),
            doc_id=str(record.get("doc_id", "")),
        )
    except KeyError as e:
        raise ParseError(path, f"{where}.{e.args[0]}") from e
    except (TypeError, ValueError) as e:
        raise ParseError(path, where, str(e)) from e


def write_corpus(path: str, documents: Iterable[Document]) -> int:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    count = 0
    try:
        with open(path, "w", encoding="utf-8") as fh:
            for doc in documents:
                fh.write(json.dumps(document_to_record(doc), separators=(",", ":")) + "\n")
                count += 1
    except OSError as e:
        logger.error("Could not write corpus %s: %s", path, e, exc_info=True)
        raise ParseError(path, "file", str(e)) from e
    logger.info("Wrote %d documents to %s", count, path)
    return count


def read_corpus(path: str, vocab: Vocabulary) -> List[Document]:
    docs: List[Document] = []
    try:
        with open(path, encoding="utf-8") as fh:
            for line_no, line in enumerate(fh, start=1):
                if not line.strip():
                    continue
                try:
                    record = json.loads(line)
                except json.JSONDecodeError as e:
                    raise ParseError(path, f"line {line_no}", str(e)) from e
                docs.append(document_from_record(record, vocab, where=f"line {line_no}", path=path))
    except OSError as e:
        logger.error("Could not read corpus %s: %s", path, e, exc_info=True)
        raise ParseError(path, "file", str(e)) from e
    logger.info("Read %d documents from %s", len(docs), path)
    return docs
