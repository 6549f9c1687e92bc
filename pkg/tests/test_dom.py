"""Tree ingestion, subject derivation, featurization, and corpus stats."""
from __future__ import annotations

import math
import xml.etree.ElementTree as ET
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nominator.dom import (
    DEFAULT_TAG_VOCABULARY, ClassId, DimensionMismatch, DomNode, DomTree,
    EmptyCorpus, EmptyDocument, FeatureConfig, InvariantError, SchemaError,
    SubjectMismatch, compute_subject_node, corpus_stats, featurize,
    featurize_page, load_page_json, parse_html, save_page_json,
)
from oracles import ancestor_set_lca

FIXTURES = Path(__file__).parent / "fixtures"


def chain(*labels: str | None, page_id: str = "p") -> DomTree:
    nodes = [
        DomNode(id=i, parent=None if i == 0 else i - 1, tag="div", label=lab)
        for i, lab in enumerate(labels)
    ]
    return DomTree.build(page_id, nodes)


def random_tree(rng: np.random.Generator, max_nodes: int = 50,
                n_labels: int = 5) -> DomTree:
    n = int(rng.integers(2, max_nodes + 1))
    nodes = [DomNode(id=0, parent=None, tag="html")]
    for i in range(1, n):
        nodes.append(DomNode(id=i, parent=int(rng.integers(0, i)), tag="div"))
    labeled = rng.choice(n, size=min(n_labels, n), replace=False)
    label_names = ["price", "name", "image", "buy", "cart"]
    for slot, node_id in enumerate(labeled):
        old = nodes[node_id]
        nodes[node_id] = DomNode(id=old.id, parent=old.parent, tag=old.tag,
                                 label=label_names[slot])
    return DomTree.build("rand", nodes)


class TestParseHtml:
    def test_three_node_structure(self):
        tree = parse_html(b"<html><body><p>hi</p></body></html>")
        assert len(tree.nodes) == 3
        assert tree.nodes[0].tag == "html" and tree.nodes[0].parent is None
        assert tree.nodes[1].tag == "body" and tree.nodes[1].parent == 0
        assert tree.nodes[2].tag == "p" and tree.nodes[2].parent == 1
        assert tree.nodes[2].text == "hi"

    def test_subtree_image_counts(self):
        tree = parse_html(b"<div><img/><span><img/></span></div>")
        by_tag = {n.tag: n for n in tree.nodes}
        assert by_tag["div"].num_images_subtree == 2
        assert by_tag["span"].num_images_subtree == 1
        assert all(n.num_images_subtree == 1 for n in tree.nodes if n.tag == "img")

    def test_unclosed_tags_close_with_ancestor(self):
        tree = parse_html(b"<div><span>a<b>bold</div>")
        assert [n.tag for n in tree.nodes] == ["div", "span", "b"]
        assert tree.nodes[2].parent == 1

    def test_stray_end_tag_ignored(self):
        tree = parse_html(b"<div></span><p>x</p></div>")
        assert [n.tag for n in tree.nodes] == ["div", "p"]

    def test_script_content_kept_as_text(self):
        tree = parse_html(b"<html><script>if (a < b) { go(); }</script></html>")
        script = tree.nodes[1]
        assert script.tag == "script"
        assert "a < b" in script.text

    def test_multiple_top_level_elements_get_synthetic_root(self):
        tree = parse_html(b"<p>a</p><p>b</p>")
        assert tree.nodes[0].tag == "html"
        assert [n.parent for n in tree.nodes] == [None, 0, 0]

    def test_empty_document_rejected(self):
        with pytest.raises(EmptyDocument):
            parse_html(b"just some text, no elements")

    def test_geometry_stays_absent(self):
        tree = parse_html(b"<div><p>x</p></div>")
        assert all(n.bbox is None and n.font_size is None for n in tree.nodes)

    @pytest.mark.parametrize("fixture", sorted(FIXTURES.glob("*.html")),
                             ids=lambda p: p.stem)
    def test_node_count_matches_independent_parser(self, fixture):
        # ElementTree (expat) walks the same well-formed markup independently.
        data = fixture.read_text("utf-8")
        body = data.split("\n", 1)[1] if data.startswith("<!DOCTYPE") else data
        oracle_count = sum(1 for _ in ET.fromstring(body).iter())
        tree = parse_html(data.encode())
        assert len(tree.nodes) == oracle_count >= 30

    def test_parent_precedes_child_everywhere(self):
        for fixture in FIXTURES.glob("*.html"):
            tree = parse_html(fixture.read_bytes())
            for node in tree.nodes:
                assert node.parent is None or node.parent < node.id

    def test_image_counts_monotone_along_edges(self):
        for fixture in FIXTURES.glob("*.html"):
            tree = parse_html(fixture.read_bytes())
            for node in tree.nodes:
                if node.parent is not None:
                    parent = tree.nodes[node.parent]
                    assert parent.num_images_subtree >= node.num_images_subtree


class TestPageJson:
    def test_minimal_single_node(self):
        tree = load_page_json(b'{"page_id": "x", "nodes": [{"id": 0, "parent": null, "tag": "html"}]}')
        assert len(tree.nodes) == 1
        assert tree.subject_id is None

    def test_duplicate_label_rejected(self):
        payload = {
            "page_id": "x",
            "nodes": [
                {"id": 0, "parent": None, "tag": "html"},
                {"id": 1, "parent": 0, "tag": "span", "label": "price"},
                {"id": 2, "parent": 0, "tag": "span", "label": "price"},
            ],
        }
        import json
        with pytest.raises(InvariantError, match="duplicate label"):
            load_page_json(json.dumps(payload))

    def test_parent_not_less_than_id_rejected(self):
        with pytest.raises(InvariantError):
            load_page_json(b'{"page_id": "x", "nodes": ['
                           b'{"id": 0, "parent": null, "tag": "html"},'
                           b'{"id": 1, "parent": 1, "tag": "div"}]}')

    def test_multiple_roots_rejected(self):
        with pytest.raises(InvariantError, match="root"):
            load_page_json(b'{"page_id": "x", "nodes": ['
                           b'{"id": 0, "parent": null, "tag": "html"},'
                           b'{"id": 1, "parent": null, "tag": "div"}]}')

    def test_schema_errors(self):
        with pytest.raises(SchemaError):
            load_page_json(b"[1, 2]")
        with pytest.raises(SchemaError):
            load_page_json(b'{"page_id": "x", "nodes": []}')
        with pytest.raises(SchemaError):
            load_page_json(b'{"page_id": "x", "nodes": [{"id": "0", "parent": null, "tag": "a"}]}')
        with pytest.raises(SchemaError, match="unknown keys"):
            load_page_json(b'{"page_id": "x", "nodes": [{"id": 0, "parent": null, "tag": "a", "zap": 1}]}')

    def test_subject_mismatch_detected(self):
        payload = (b'{"page_id": "x", "subject_id": 2, "nodes": ['
                   b'{"id": 0, "parent": null, "tag": "html"},'
                   b'{"id": 1, "parent": 0, "tag": "span", "label": "price"},'
                   b'{"id": 2, "parent": 0, "tag": "span", "label": "name"}]}')
        with pytest.raises(SubjectMismatch):
            load_page_json(payload)

    def test_round_trip_is_byte_identical(self):
        tree = parse_html((FIXTURES / "shop-lamp.html").read_bytes())
        blob = save_page_json(tree)
        assert save_page_json(load_page_json(blob)) == blob


class TestSubjectNode:
    def test_labels_on_ancestor_chain(self):
        tree = chain(None, "price", "name")  # root -> a -> b, labels on a and b
        assert tree.subject_id == 1

    def test_root_with_two_labeled_children(self):
        nodes = [
            DomNode(id=0, parent=None, tag="html"),
            DomNode(id=1, parent=0, tag="div", label="price"),
            DomNode(id=2, parent=0, tag="div", label="name"),
        ]
        assert DomTree.build("p", nodes).subject_id == 0

    def test_single_label_is_its_own_subject(self):
        tree = chain(None, None, "buy")
        assert tree.subject_id == 2

    def test_no_labels_no_subject(self):
        assert chain(None, None).subject_id is None

    def test_matches_ancestor_set_oracle_on_random_trees(self):
        rng = np.random.default_rng(7)
        for _ in range(1000):
            tree = random_tree(rng)
            parents = [n.parent for n in tree.nodes]
            labeled = [n.id for n in tree.nodes if n.label is not None]
            assert compute_subject_node(tree) == ancestor_set_lca(parents, labeled)

    def test_children_roundtrip_identity(self):
        rng = np.random.default_rng(3)
        for _ in range(50):
            tree = random_tree(rng)
            rederived = [None] * len(tree.nodes)
            for parent, kids in enumerate(tree.children):
                for kid in kids:
                    rederived[kid] = parent
            assert rederived == [n.parent for n in tree.nodes]


class TestFeaturize:
    def test_all_absent_div(self):
        cfg = FeatureConfig(text_dim=0)
        vec = featurize(DomNode(id=0, parent=None, tag="html"), cfg)
        assert vec.shape == (cfg.dim,)
        assert not vec[:8].any()
        assert vec[8] == 1.0  # html sits at vocabulary slot 0
        assert not vec[9:].any()

    def test_viewport_normalization(self):
        cfg = FeatureConfig()
        node = DomNode(id=0, parent=None, tag="div", bbox=(0, 0, 375, 812))
        assert featurize(node, cfg)[:4].tolist() == [0.0, 0.0, 1.0, 1.0]

    def test_unknown_tag_goes_to_other_bucket(self):
        cfg = FeatureConfig()
        vec = featurize(DomNode(id=0, parent=None, tag="customtag123"), cfg)
        tag_slots = vec[8:8 + len(cfg.tag_vocabulary) + 1]
        assert tag_slots[-1] == 1.0 and tag_slots.sum() == 1.0

    def test_numeric_scalings(self):
        cfg = FeatureConfig()
        node = DomNode(id=0, parent=None, tag="span", font_size=32, font_weight=800,
                       visible=True, num_images_subtree=3)
        vec = featurize(node, cfg)
        assert vec[4] == 2.0 and vec[5] == 2.0 and vec[6] == 1.0
        assert vec[7] == pytest.approx(math.log(4))

    def test_text_channel(self):
        cfg = FeatureConfig(text_dim=3)
        node = DomNode(id=0, parent=None, tag="span", text="hi",
                       text_embedding=(0.5, -1.0, 2.0))
        vec = featurize(node, cfg)
        assert vec.shape == (cfg.dim,)
        assert vec[-4] == 1.0  # has_text
        assert vec[-3:].tolist() == [0.5, -1.0, 2.0]
        absent = DomNode(id=0, parent=None, tag="span")
        assert not featurize(absent, cfg)[-4:].any()

    def test_wrong_embedding_width_rejected(self):
        cfg = FeatureConfig(text_dim=4)
        node = DomNode(id=0, parent=None, tag="span", text_embedding=(1.0, 2.0))
        with pytest.raises(DimensionMismatch):
            featurize(node, cfg)

    def test_default_vocabulary_dimensions(self):
        cfg = FeatureConfig()
        assert len(DEFAULT_TAG_VOCABULARY) == 41
        assert cfg.dim == 8 + 41 + 1 + 1

    @given(
        tag=st.text(alphabet="abcdefgh", min_size=1, max_size=8),
        bbox=st.one_of(st.none(), st.tuples(*[st.floats(-1e5, 1e5) for _ in range(4)])),
        font_size=st.one_of(st.none(), st.floats(allow_nan=True, allow_infinity=True)),
        visible=st.one_of(st.none(), st.booleans()),
        n_img=st.one_of(st.none(), st.integers(0, 10**6)),
    )
    @settings(max_examples=200, deadline=None)
    def test_total_and_finite(self, tag, bbox, font_size, visible, n_img):
        cfg = FeatureConfig()
        node = DomNode(id=0, parent=None, tag=tag, bbox=bbox, font_size=font_size,
                       visible=visible, num_images_subtree=n_img)
        vec = featurize(node, cfg)
        assert vec.shape == (cfg.dim,)
        assert np.isfinite(vec).all()

    def test_depends_only_on_own_fields(self):
        cfg = FeatureConfig()
        a = chain(None, "price", "name")
        b = DomTree.build("q", [
            DomNode(id=0, parent=None, tag="section"),
            DomNode(id=1, parent=0, tag="div", label="price"),
            DomNode(id=2, parent=1, tag="div", label="name", text="zzz"),
        ])
        node = DomNode(id=1, parent=0, tag="div", label="price")
        assert np.array_equal(featurize(node, cfg), featurize_page(a, cfg)[1])
        assert np.array_equal(featurize(node, cfg), featurize_page(b, cfg)[1])


class TestCorpusStats:
    def make(self, sizes):
        pages = []
        for pi, size in enumerate(sizes):
            nodes = [DomNode(id=0, parent=None, tag="html")]
            for i in range(1, size):
                nodes.append(DomNode(id=i, parent=i - 1, tag="div"))
            pages.append(DomTree.build(f"site{pi}/page{pi}", nodes))
        return pages

    def test_median_and_extremes(self):
        stats = corpus_stats(self.make([5, 9, 100]))
        assert stats.median_nodes == 9
        assert stats.min_nodes == 5 and stats.max_nodes == 100
        assert stats.n_pages == 3 and stats.n_sites == 3

    def test_label_coverage(self):
        pages = self.make([4, 4])
        nodes = list(pages[0].nodes)
        nodes[2] = DomNode(id=2, parent=1, tag="span", label="price")
        pages[0] = DomTree.build(pages[0].page_id, nodes)
        stats = corpus_stats(pages)
        assert stats.label_coverage["price"] == 0.5
        assert stats.label_coverage["name"] == 0.0
        assert stats.label_coverage["subject"] == 0.5

    def test_empty_corpus_rejected(self):
        with pytest.raises(EmptyCorpus):
            corpus_stats([])
