"""DOM tree data model: ingestion, validation, subject derivation, featurization.

Trees are immutable after construction. Node ids follow document order, so a
parent's id is always smaller than its children's; this makes the id sequence
a topological order that the rest of the package relies on.
"""
from __future__ import annotations

import json
import math
import statistics
from dataclasses import dataclass, field
from enum import IntEnum
from functools import cached_property
from html.parser import HTMLParser
from pathlib import Path

import numpy as np

LABELS = ("price", "name", "image", "buy", "cart")

DEFAULT_TAG_VOCABULARY = (
    "html", "body", "div", "span", "a", "img", "button", "input", "p",
    "h1", "h2", "h3", "h4", "h5", "h6", "ul", "ol", "li", "table", "tr",
    "td", "th", "form", "label", "select", "option", "nav", "header",
    "footer", "section", "article", "main", "aside", "i", "b", "strong",
    "em", "svg", "picture", "figure", "iframe",
)


class ClassId(IntEnum):
    """Classifier classes: five stored labels, the derived subject, and negative."""

    PRICE = 0
    NAME = 1
    IMAGE = 2
    BUY = 3
    CART = 4
    SUBJECT = 5
    NEGATIVE = 6


POSITIVE_CLASSES = tuple(c for c in ClassId if c is not ClassId.NEGATIVE)
NUM_CLASSES = len(ClassId)
LABEL_TO_CLASS = {name: ClassId(i) for i, name in enumerate(LABELS)}
CLASS_TO_NAME = {c: c.name.lower() for c in ClassId}


class DomError(Exception):
    """Base class for DOM ingestion and validation errors."""


class EmptyDocument(DomError):
    """Raised when HTML input contains no element node."""


class SchemaError(DomError):
    """Raised when a page file does not match the canonical JSON schema."""


class InvariantError(DomError):
    """Raised when node data violates a tree invariant."""


class SubjectMismatch(DomError):
    """Raised when a stored subject id disagrees with the derived one."""


class EmptyCorpus(DomError):
    """Raised when an operation requires at least one page."""


class DimensionMismatch(DomError):
    """Raised when a stored text embedding does not match the configured width."""


@dataclass(frozen=True)
class DomNode:
    """One DOM element with its locally rendered style features."""

    id: int
    parent: int | None
    tag: str
    text: str | None = None
    bbox: tuple[float, float, float, float] | None = None
    font_size: float | None = None
    font_weight: float | None = None
    visible: bool | None = None
    num_images_subtree: int | None = None
    label: str | None = None
    text_embedding: tuple[float, ...] | None = None


@dataclass(frozen=True)
class DomTree:
    """A rooted, document-ordered DOM tree with at most one node per label."""

    page_id: str
    nodes: tuple[DomNode, ...]
    subject_id: int | None

    @classmethod
    def build(cls, page_id: str, nodes: tuple[DomNode, ...] | list[DomNode]) -> "DomTree":
        """Validate invariants, derive the subject node, and construct the tree."""
        nodes = tuple(nodes)
        if not nodes:
            raise InvariantError(f"{page_id}: page has no nodes")
        roots = 0
        seen_labels: dict[str, int] = {}
        for i, node in enumerate(nodes):
            if node.id != i:
                raise InvariantError(f"{page_id}: node ids must be dense from 0, got {node.id} at {i}")
            if node.parent is None:
                roots += 1
            elif not 0 <= node.parent < node.id:
                raise InvariantError(f"{page_id}: node {i} parent {node.parent} must satisfy 0 <= parent < id")
            if node.label is not None:
                if node.label not in LABEL_TO_CLASS:
                    raise InvariantError(f"{page_id}: unknown label {node.label!r} on node {i}")
                if node.label in seen_labels:
                    raise InvariantError(
                        f"{page_id}: duplicate label {node.label!r} on nodes {seen_labels[node.label]} and {i}"
                    )
                seen_labels[node.label] = i
        if roots != 1:
            raise InvariantError(f"{page_id}: expected exactly one root, found {roots}")
        tree = cls(page_id=page_id, nodes=nodes, subject_id=None)
        object.__setattr__(tree, "subject_id", compute_subject_node(tree))
        return tree

    def __len__(self) -> int:
        return len(self.nodes)

    @cached_property
    def children(self) -> tuple[tuple[int, ...], ...]:
        """Child id lists in document order, indexed by node id."""
        out: list[list[int]] = [[] for _ in self.nodes]
        for node in self.nodes:
            if node.parent is not None:
                out[node.parent].append(node.id)
        return tuple(tuple(c) for c in out)

    @cached_property
    def depths(self) -> tuple[int, ...]:
        """Root distance per node; computable in one pass because parent < id."""
        depths = [0] * len(self.nodes)
        for node in self.nodes:
            if node.parent is not None:
                depths[node.id] = depths[node.parent] + 1
        return tuple(depths)

    @cached_property
    def labeled_nodes(self) -> dict[ClassId, int]:
        """Map from positive class to node id, including the derived subject."""
        out = {LABEL_TO_CLASS[n.label]: n.id for n in self.nodes if n.label is not None}
        if self.subject_id is not None:
            out.setdefault(ClassId.SUBJECT, self.subject_id)
        return out

    def unlabeled_ids(self) -> list[int]:
        """Ids of nodes carrying no class, subject included among the labeled."""
        labeled = set(self.labeled_nodes.values())
        return [n.id for n in self.nodes if n.id not in labeled]


def compute_subject_node(tree: DomTree) -> int | None:
    """Lowest common ancestor of all nodes carrying a stored label.

    Returns None when no node is labeled; the single labeled node when only
    one exists.
    """
    labeled = [n.id for n in tree.nodes if n.label is not None]
    if not labeled:
        return None
    parents = [n.parent for n in tree.nodes]
    depths = tree.depths
    lca = labeled[0]
    for v in labeled[1:]:
        a, b = lca, v
        while depths[a] > depths[b]:
            a = parents[a]
        while depths[b] > depths[a]:
            b = parents[b]
        while a != b:
            a = parents[a]
            b = parents[b]
        lca = a
    return lca


# --- HTML ingestion --------------------------------------------------------

VOID_TAGS = frozenset(
    "area base br col embed hr img input link meta param source track wbr".split()
)


class _TempNode:
    __slots__ = ("tag", "chunks", "children")

    def __init__(self, tag: str):
        self.tag = tag
        self.chunks: list[str] = []
        self.children: list[_TempNode] = []


class _LenientParser(HTMLParser):
    """Stack-based element-tree builder; unclosed tags close with their ancestor."""

    def __init__(self):
        super().__init__(convert_charrefs=True)
        self.top_level: list[_TempNode] = []
        self.stack: list[_TempNode] = []

    def _attach(self, node: _TempNode) -> None:
        if self.stack:
            self.stack[-1].children.append(node)
        else:
            self.top_level.append(node)

    def handle_starttag(self, tag, attrs):
        node = _TempNode(tag.lower())
        self._attach(node)
        if tag.lower() not in VOID_TAGS:
            self.stack.append(node)

    def handle_startendtag(self, tag, attrs):
        self._attach(_TempNode(tag.lower()))

    def handle_endtag(self, tag):
        tag = tag.lower()
        if tag in VOID_TAGS:
            return
        # Pop up to and including the matching open tag; ignore stray closers.
        open_tags = [n.tag for n in self.stack]
        if tag in open_tags:
            while self.stack:
                if self.stack.pop().tag == tag:
                    break

    def handle_data(self, data):
        if self.stack and data:
            self.stack[-1].chunks.append(data)


def parse_html(data: bytes | str, page_id: str = "page") -> DomTree:
    """Parse raw HTML into a geometry-absent DomTree.

    Structural fields (tag, parent, text, subtree image counts) are populated;
    bbox, fonts, and visibility require rendering and stay absent. A synthetic
    html root is added if the markup has several top-level elements.
    """
    if isinstance(data, bytes):
        data = data.decode("utf-8", errors="replace")
    parser = _LenientParser()
    parser.feed(data)
    parser.close()
    tops = parser.top_level
    if not tops:
        raise EmptyDocument("no element node found")
    if len(tops) == 1:
        root = tops[0]
    else:
        root = _TempNode("html")
        root.children = tops

    nodes: list[DomNode] = []
    img_counts: list[int] = []

    def visit(tmp: _TempNode, parent: int | None) -> int:
        idx = len(nodes)
        nodes.append(None)  # placeholder, replaced after children are known
        img_counts.append(0)
        count = 1 if tmp.tag == "img" else 0
        for child in tmp.children:
            count += img_counts[visit(child, idx)]
        img_counts[idx] = count
        text = "".join(tmp.chunks).strip() or None
        nodes[idx] = DomNode(
            id=idx, parent=parent, tag=tmp.tag, text=text, num_images_subtree=count
        )
        return idx

    visit(root, None)
    return DomTree.build(page_id, nodes)


# --- Canonical JSON format ---------------------------------------------------

_FORMAT_KEYS = (
    "id", "parent", "tag", "text", "bbox", "font_size", "font_weight",
    "visible", "num_images_subtree", "label", "text_embedding",
)


def _check(cond: bool, msg: str):
    if not cond:
        raise SchemaError(msg)


def _number(value, where: str) -> float:
    _check(isinstance(value, (int, float)) and not isinstance(value, bool), f"{where}: expected number")
    return value


def load_page_json(data: bytes | str) -> DomTree:
    """Deserialize one canonical page file, checking schema and invariants."""
    try:
        obj = json.loads(data)
    except json.JSONDecodeError as exc:
        raise SchemaError(f"invalid JSON: {exc}") from None
    _check(isinstance(obj, dict), "top level must be an object")
    _check(isinstance(obj.get("page_id"), str), "page_id must be a string")
    raw_nodes = obj.get("nodes")
    _check(isinstance(raw_nodes, list) and raw_nodes, "nodes must be a non-empty array")

    nodes = []
    for i, raw in enumerate(raw_nodes):
        where = f"nodes[{i}]"
        _check(isinstance(raw, dict), f"{where}: expected object")
        unknown = set(raw) - set(_FORMAT_KEYS)
        _check(not unknown, f"{where}: unknown keys {sorted(unknown)}")
        _check(isinstance(raw.get("id"), int), f"{where}: id must be an integer")
        parent = raw.get("parent")
        _check(parent is None or isinstance(parent, int), f"{where}: parent must be int or null")
        _check(isinstance(raw.get("tag"), str), f"{where}: tag must be a string")
        text = raw.get("text")
        _check(text is None or isinstance(text, str), f"{where}: text must be string or null")
        bbox = raw.get("bbox")
        if bbox is not None:
            _check(isinstance(bbox, list) and len(bbox) == 4, f"{where}: bbox must have 4 entries")
            bbox = tuple(_number(v, f"{where}.bbox") for v in bbox)
        font_size = raw.get("font_size")
        if font_size is not None:
            font_size = _number(font_size, f"{where}.font_size")
        font_weight = raw.get("font_weight")
        if font_weight is not None:
            font_weight = _number(font_weight, f"{where}.font_weight")
        visible = raw.get("visible")
        _check(visible is None or isinstance(visible, bool), f"{where}: visible must be bool or null")
        n_img = raw.get("num_images_subtree")
        if n_img is not None:
            _check(isinstance(n_img, int) and n_img >= 0, f"{where}: num_images_subtree must be a non-negative int")
        label = raw.get("label")
        if label is not None:
            _check(label in LABEL_TO_CLASS, f"{where}: label must be one of {LABELS}")
        emb = raw.get("text_embedding")
        if emb is not None:
            _check(isinstance(emb, list), f"{where}: text_embedding must be an array")
            emb = tuple(_number(v, f"{where}.text_embedding") for v in emb)
        nodes.append(DomNode(
            id=raw["id"], parent=parent, tag=raw["tag"], text=text, bbox=bbox,
            font_size=font_size, font_weight=font_weight, visible=visible,
            num_images_subtree=n_img, label=label, text_embedding=emb,
        ))

    tree = DomTree.build(obj["page_id"], nodes)
    stored_subject = obj.get("subject_id")
    if stored_subject is not None and stored_subject != tree.subject_id:
        raise SubjectMismatch(
            f"{tree.page_id}: stored subject_id {stored_subject} != derived {tree.subject_id}"
        )
    return tree


def save_page_json(tree: DomTree) -> bytes:
    """Serialize a tree to canonical bytes (fixed key order, compact, newline-terminated)."""
    obj: dict = {"page_id": tree.page_id, "subject_id": tree.subject_id, "nodes": []}
    for n in tree.nodes:
        obj["nodes"].append({
            "id": n.id,
            "parent": n.parent,
            "tag": n.tag,
            "text": n.text,
            "bbox": list(n.bbox) if n.bbox is not None else None,
            "font_size": n.font_size,
            "font_weight": n.font_weight,
            "visible": n.visible,
            "num_images_subtree": n.num_images_subtree,
            "label": n.label,
            "text_embedding": list(n.text_embedding) if n.text_embedding is not None else None,
        })
    return (json.dumps(obj, ensure_ascii=False, separators=(",", ":"), allow_nan=False) + "\n").encode("utf-8")


def load_corpus(path: str | Path) -> list[DomTree]:
    """Load every page file in a corpus directory, sorted by filename."""
    path = Path(path)
    if not path.is_dir():
        raise EmptyCorpus(f"{path} is not a directory")
    pages = []
    for file in sorted(path.glob("*.json")):
        if file.name == "manifest.json":
            continue
        pages.append(load_page_json(file.read_bytes()))
    if not pages:
        raise EmptyCorpus(f"no page files in {path}")
    return pages


def load_manifest(path: str | Path) -> dict[str, list[str]] | None:
    """Read the optional train/val/test manifest from a corpus directory."""
    file = Path(path) / "manifest.json"
    if not file.exists():
        return None
    obj = json.loads(file.read_text("utf-8"))
    _check(isinstance(obj, dict), "manifest must be an object")
    out = {}
    for split in ("train", "val", "test"):
        ids = obj.get(split, [])
        _check(isinstance(ids, list) and all(isinstance(i, str) for i in ids),
               f"manifest.{split} must be a list of page ids")
        out[split] = ids
    return out


def write_manifest(path: str | Path, splits: dict[str, list[str]]) -> None:
    obj = {split: list(splits.get(split, [])) for split in ("train", "val", "test")}
    file = Path(path) / "manifest.json"
    file.write_text(json.dumps(obj, ensure_ascii=False, indent=1) + "\n", "utf-8")


# --- Featurization -----------------------------------------------------------

@dataclass(frozen=True)
class FeatureConfig:
    """Layout of the per-node feature vector.

    The vector is 8 numeric style slots, a tag one-hot over the vocabulary
    plus an OTHER bucket, a has-text flag, then the optional text channel.
    """

    viewport_w: float = 375.0
    viewport_h: float = 812.0
    tag_vocabulary: tuple[str, ...] = DEFAULT_TAG_VOCABULARY
    text_dim: int = 0
    missing_value: float = 0.0

    def __post_init__(self):
        deduped = tuple(dict.fromkeys(self.tag_vocabulary))
        object.__setattr__(self, "tag_vocabulary", deduped)

    @property
    def dim(self) -> int:
        return 8 + len(self.tag_vocabulary) + 1 + 1 + self.text_dim

    @cached_property
    def _tag_slots(self) -> dict[str, int]:
        return {tag: i for i, tag in enumerate(self.tag_vocabulary)}


def _fill(value: float | None, scale: float, missing: float) -> float:
    if value is None or not math.isfinite(value):
        return missing
    return value / scale


def featurize(node: DomNode, cfg: FeatureConfig) -> np.ndarray:
    """Encode one node's local fields as a finite float64 vector of cfg.dim entries."""
    vec = np.zeros(cfg.dim)
    m = cfg.missing_value
    if node.bbox is not None:
        x, y, w, h = node.bbox
        vec[0] = _fill(x, cfg.viewport_w, m)
        vec[1] = _fill(y, cfg.viewport_h, m)
        vec[2] = _fill(w, cfg.viewport_w, m)
        vec[3] = _fill(h, cfg.viewport_h, m)
    else:
        vec[0:4] = m
    vec[4] = _fill(node.font_size, 16.0, m)
    vec[5] = _fill(node.font_weight, 400.0, m)
    vec[6] = float(node.visible) if node.visible is not None else m
    if node.num_images_subtree is not None:
        vec[7] = math.log1p(node.num_images_subtree)
    else:
        vec[7] = m
    slot = cfg._tag_slots.get(node.tag, len(cfg.tag_vocabulary))
    vec[8 + slot] = 1.0
    has_text_at = 8 + len(cfg.tag_vocabulary) + 1
    vec[has_text_at] = 1.0 if node.text else 0.0
    if cfg.text_dim > 0 and node.text_embedding is not None:
        if len(node.text_embedding) != cfg.text_dim:
            raise DimensionMismatch(
                f"node {node.id}: text_embedding has {len(node.text_embedding)} entries, expected {cfg.text_dim}"
            )
        emb = np.asarray(node.text_embedding, dtype=np.float64)
        vec[has_text_at + 1:] = np.where(np.isfinite(emb), emb, m)
    return vec


def featurize_page(tree: DomTree, cfg: FeatureConfig) -> np.ndarray:
    """Stack per-node feature vectors into an (n, dim) matrix in document order."""
    out = np.empty((len(tree.nodes), cfg.dim))
    for node in tree.nodes:
        out[node.id] = featurize(node, cfg)
    return out


# --- Corpus statistics --------------------------------------------------------

@dataclass(frozen=True)
class CorpusStats:
    n_pages: int
    n_sites: int | None
    median_nodes: float
    min_nodes: int
    max_nodes: int
    label_coverage: dict[str, float] = field(default_factory=dict)


def corpus_stats(pages: list[DomTree]) -> CorpusStats:
    """Summarize page sizes and per-class label coverage over a corpus."""
    if not pages:
        raise EmptyCorpus("corpus_stats requires at least one page")
    sizes = [len(p.nodes) for p in pages]
    if all("/" in p.page_id for p in pages):
        n_sites = len({p.page_id.split("/", 1)[0] for p in pages})
    else:
        n_sites = None
    coverage = {}
    for label in LABELS:
        coverage[label] = sum(any(n.label == label for n in p.nodes) for p in pages) / len(pages)
    coverage["subject"] = sum(p.subject_id is not None for p in pages) / len(pages)
    return CorpusStats(
        n_pages=len(pages),
        n_sites=n_sites,
        median_nodes=float(statistics.median(sizes)),
        min_nodes=min(sizes),
        max_nodes=max(sizes),
        label_coverage=coverage,
    )
