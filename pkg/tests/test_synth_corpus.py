import json
import os

import pytest

from doc_model import document_to_record, read_corpus
from errors import ConfigError, GenerationError
from synth_corpus import (
    GenConfig,
    fragment_connectivity_rate,
    generate_corpus,
    generate_document,
    generate_layout,
    label_distribution,
    split_rate,
    split_seeds,
    split_sizes,
)


class TestGenConfig:
    @pytest.mark.parametrize(
        "overrides",
        [
            {"columns": 4},
            {"columns": 0},
            {"interleave_prob": 1.5},
            {"n_docs": 0},
            {"entity_len": (3, 2)},
            {"label_weights": (0.5, 0.5)},
            {"jitter": 10.0},
        ],
    )
    def test_rejects(self, overrides):
        with pytest.raises(ConfigError):
            GenConfig(**overrides)

    def test_labels_include_null(self):
        assert GenConfig().labels == ("header", "question", "answer", "other")


class TestGenerateDocument:
    def test_deterministic(self, vocab):
        config = GenConfig()
        a = generate_document(config, 17, vocab)
        b = generate_document(config, 17, vocab)
        assert json.dumps(document_to_record(a)) == json.dumps(document_to_record(b))
        assert a != generate_document(config, 18, vocab)

    def test_no_interleave_keeps_entities_contiguous(self, vocab):
        config = GenConfig(interleave_prob=0.0)
        for seed in range(30):
            layout = generate_layout(config, seed, vocab)
            assert layout.splits == []
            for _, members in layout.groups:
                assert members == list(range(members[0], members[-1] + 1))

    def test_full_interleave_splits_entities(self, vocab):
        config = GenConfig(interleave_prob=1.0, columns=2, entity_len=(2, 5))
        layouts = [generate_layout(config, seed, vocab) for seed in range(100)]
        assert split_rate(layouts) >= 0.9

    def test_single_column_never_interleaves(self, vocab):
        config = GenConfig(columns=1, interleave_prob=1.0)
        assert split_rate([generate_layout(config, s, vocab) for s in range(20)]) == 0.0

    def test_boxes_inside_page_and_disjoint_within_blocks(self, vocab):
        config = GenConfig()
        for seed in range(10):
            layout = generate_layout(config, seed, vocab)
            doc = layout.doc
            for t in doc.tokens:
                assert t.box.x1 <= doc.page_width and t.box.y1 <= doc.page_height
            for members in layout.blocks:
                boxes = [doc.tokens[i].box for i in members]
                for i, a in enumerate(boxes):
                    for b in boxes[i + 1 :]:
                        overlap_x = min(a.x1, b.x1) - max(a.x0, b.x0)
                        overlap_y = min(a.y1, b.y1) - max(a.y0, b.y0)
                        assert overlap_x <= 0 or overlap_y <= 0

    def test_tokens_in_reading_order(self, vocab):
        doc = generate_document(GenConfig(), 3, vocab)
        assert [t.word_index for t in doc.tokens] == list(range(len(doc)))

    def test_overflow(self, vocab):
        with pytest.raises(GenerationError):
            generate_document(GenConfig(columns=1, rows_per_column=40), 0, vocab)

    @pytest.mark.slow
    def test_split_fragments_stay_close_in_layout_graph(self, vocab):
        layouts = [generate_layout(GenConfig(), seed, vocab) for seed in range(100)]
        assert split_rate(layouts) > 0
        assert fragment_connectivity_rate(layouts, max_hops=3) >= 0.95

    def test_connectivity_without_splits(self, vocab):
        layouts = [generate_layout(GenConfig(interleave_prob=0.0), s, vocab) for s in range(3)]
        assert fragment_connectivity_rate(layouts) == 1.0


class TestCorpus:
    def test_split_sizes(self):
        assert split_sizes(10, (0.8, 0.1, 0.1)) == {"train": 8, "dev": 1, "test": 1}

    def test_seeds_are_disjoint(self):
        seeds = split_seeds(GenConfig(n_docs=50, seed=5))
        assert seeds["train"][0] == 5 and seeds["dev"][0] == 1_000_005 and seeds["test"][0] == 2_000_005
        flat = [s for group in seeds.values() for s in group]
        assert len(flat) == len(set(flat)) == 50

    def test_generate_corpus(self, tmp_path, vocab):
        paths = generate_corpus(GenConfig(n_docs=10, rows_per_column=3), str(tmp_path), vocab)
        counts = {name: len(read_corpus(path, vocab)) for name, path in paths.items()}
        assert counts == {"train": 8, "dev": 1, "test": 1}
        with open(os.path.join(tmp_path, "manifest.json")) as fh:
            manifest = json.load(fh)
        assert manifest["splits"] == counts
        assert manifest["generator"]["rows_per_column"] == 3
        ids = [d.doc_id for path in paths.values() for d in read_corpus(path, vocab)]
        assert len(ids) == len(set(ids))

    def test_label_distribution_covers_types(self, vocab):
        docs = [generate_document(GenConfig(), s, vocab) for s in range(50)]
        table = label_distribution(docs)
        assert set(table["label"]) == {"header", "question", "answer"}
        assert (table["spans"] > 0).all()
