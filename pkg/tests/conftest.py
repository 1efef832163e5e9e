import os
import sys

import numpy as np
import pytest

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
if ROOT not in sys.path:
    sys.path.insert(0, ROOT)

from doc_model import BoundingBox, Document, EntitySpan, Token, load_vocabulary  # noqa: E402
from synth_corpus import DEFAULT_VOCAB_PATH  # noqa: E402


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run training and timing tests")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture(scope="session")
def vocab():
    return load_vocabulary(DEFAULT_VOCAB_PATH, lowercase=True)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def make_document(vocab, rows, page=(1.0, 1.0), spans=(), doc_id="doc"):
    """``rows`` are (word, (x0, y0, x1, y1)); one token per word, ids looked up in ``vocab``."""
    tokens = tuple(
        Token(word, vocab.id_of(word), BoundingBox(*box), i) for i, (word, box) in enumerate(rows)
    )
    return Document(tokens, page[0], page[1], gold_spans=tuple(spans), doc_id=doc_id)


@pytest.fixture
def two_line_doc(vocab):
    """Six tokens on two lines of a unit page, already in reading order."""
    rows = [
        ("name", (0.0625, 0.125, 0.25, 0.1875)),
        ("date", (0.3125, 0.125, 0.5, 0.1875)),
        ("total", (0.5625, 0.125, 0.75, 0.1875)),
        ("phone", (0.0625, 0.375, 0.25, 0.4375)),
        ("address", (0.3125, 0.375, 0.5, 0.4375)),
        ("city", (0.5625, 0.375, 0.75, 0.4375)),
    ]
    spans = (EntitySpan("question", 0, 1), EntitySpan("answer", 2, 2))
    return make_document(vocab, rows, spans=spans, doc_id="two-line")


WORDS = ["name", "date", "total", "phone", "address", "city", "invoice", "amount", "company", "street", "state", "zip"]


def line_document(vocab, n, per_line=6, doc_id="lines"):
    """``n`` tokens, ``per_line`` to a line, well separated on a unit page; reading order is the identity."""
    rows = []
    for i in range(n):
        line, slot = divmod(i, per_line)
        x0, y0 = 0.02 + slot * 0.15, 0.05 + line * 0.1
        rows.append((WORDS[i % len(WORDS)], (x0, y0, x0 + 0.1, y0 + 0.04)))
    spans = (EntitySpan("question", 0, 1), EntitySpan("answer", 2, 2)) if n >= 3 else ()
    return make_document(vocab, rows, spans=spans, doc_id=doc_id)
