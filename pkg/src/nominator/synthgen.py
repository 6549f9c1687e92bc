"""Seeded generator of synthetic product pages with planted labels.

Each page plants the five labeled elements in separate subtrees under one
container, which therefore becomes the derived subject. Every class gets
near-duplicate distractors elsewhere on the page, and by default the subject
container's local features are copied onto decoy containers so only tree
context can tell them apart. Buy/cart keep strongly separable local profiles
while the subject is context-only, giving each class a distinct difficulty.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .dom import DomNode, DomTree, save_page_json, write_manifest


class ConfigError(Exception):
    """Raised for inconsistent generator settings."""


@dataclass(frozen=True)
class GenConfig:
    seed: int = 0
    n_pages: int = 100
    min_nodes: int = 60
    max_nodes: int = 300
    branching_mean: float = 3.0
    distractors_per_class: int = 3
    distractor_jitter: float = 30.0   # px noise added on top of the class profile
    duplicate_containers: int = 2     # feature-identical decoys for the subject
    context_only_subject: bool = True
    text_dim: int = 0

    def __post_init__(self):
        if self.n_pages < 1:
            raise ConfigError("n_pages must be positive")
        if not 1 <= self.min_nodes <= self.max_nodes:
            raise ConfigError("need 1 <= min_nodes <= max_nodes")
        if self.branching_mean <= 0:
            raise ConfigError("branching_mean must be positive")
        if self.distractors_per_class < 0 or self.duplicate_containers < 0:
            raise ConfigError("counts must be non-negative")
        if self.text_dim < 0:
            raise ConfigError("text_dim must be non-negative")


# (tag, font_size, font_weight, (x, y, w, h) profile means, text)
_CLASS_PROFILES = {
    "price": ("span", 22.0, 700.0, (20.0, 430.0, 120.0, 28.0), "$%d.99"),
    "name": ("h1", 24.0, 600.0, (16.0, 250.0, 330.0, 34.0), "Product %d"),
    "image": ("img", None, None, (37.0, 90.0, 300.0, 300.0), None),
    "buy": ("button", 18.0, 700.0, (20.0, 610.0, 335.0, 48.0), "Buy now"),
    "cart": ("button", 16.0, 500.0, (200.0, 680.0, 150.0, 40.0), "Add to cart"),
}

_FILLER_TAGS = ("div", "span", "a", "p", "li", "ul", "section", "i", "b", "td")


class _Builder:
    """Accumulates nodes in creation order, which is document order."""

    def __init__(self, rng: np.random.Generator, text_means: dict[str, np.ndarray] | None):
        self.rng = rng
        self.text_means = text_means
        self.rows: list[dict] = []

    def node(self, parent: int | None, tag: str, **fields) -> int:
        idx = len(self.rows)
        self.rows.append({"id": idx, "parent": parent, "tag": tag, **fields})
        return idx

    def styled(self, parent: int | None, tag: str, *, font_size=None, font_weight=None,
               bbox=None, visible=True, text=None, label=None, text_class=None) -> int:
        fields = {
            "font_size": font_size, "font_weight": font_weight, "bbox": bbox,
            "visible": visible, "text": text, "label": label,
        }
        if self.text_means is not None and text is not None:
            mean = self.text_means.get(text_class or "", self.text_means["_generic"])
            emb = mean + 0.3 * self.rng.standard_normal(mean.shape)
            fields["text_embedding"] = tuple(round(float(v), 4) for v in emb)
        return self.node(parent, tag, **fields)

    def filler_style(self) -> dict:
        rng = self.rng
        w = float(rng.uniform(20, 320))
        h = float(rng.uniform(10, 200))
        return {
            "font_size": float(rng.choice([12.0, 14.0, 16.0, 18.0])),
            "font_weight": float(rng.choice([400.0, 400.0, 400.0, 700.0])),
            "bbox": (
                round(float(rng.uniform(0, 375 - min(w, 375))), 2),
                round(float(rng.uniform(0, 1200)), 2),
                round(w, 2),
                round(h, 2),
            ),
            "visible": bool(rng.random() < 0.9),
        }

    def profile_style(self, label: str, jitter: float, page_index: int) -> dict:
        tag, fs, fw, (x, y, w, h) = _CLASS_PROFILES[label][:4]
        text = _CLASS_PROFILES[label][4]
        if text is not None and "%d" in text:
            text = text % (page_index % 97 + 1)
        rng = self.rng
        box = (
            round(x + float(rng.normal(0, jitter)), 2),
            round(y + float(rng.normal(0, jitter)), 2),
            round(max(8.0, w + float(rng.normal(0, jitter / 2))), 2),
            round(max(8.0, h + float(rng.normal(0, jitter / 4))), 2),
        )
        return {
            "tag": tag,
            "font_size": fs if fs is None else round(fs + float(rng.normal(0, jitter / 10)), 2),
            "font_weight": fw,
            "bbox": box,
            "visible": True,
            "text": text,
        }


def _count_images(rows: list[dict]) -> None:
    counts = [1 if row["tag"] == "img" else 0 for row in rows]
    for row in reversed(rows):
        if row["parent"] is not None:
            counts[row["parent"]] += counts[row["id"]]
    for row, count in zip(rows, counts):
        row["num_images_subtree"] = count


def generate_page(cfg: GenConfig, page_index: int) -> DomTree:
    """Build one page deterministically from (cfg.seed, page_index)."""
    rng = np.random.default_rng([cfg.seed, 4, page_index])
    text_means = None
    if cfg.text_dim > 0:
        mean_rng = np.random.default_rng([cfg.seed, 7])
        text_means = {label: mean_rng.standard_normal(cfg.text_dim) for label in _CLASS_PROFILES}
        text_means["_generic"] = np.zeros(cfg.text_dim)
    b = _Builder(rng, text_means)

    html = b.node(None, "html")
    body = b.styled(html, "body", bbox=(0.0, 0.0, 375.0, 812.0), visible=True)
    header = b.styled(body, "header", **b.filler_style())
    nav = b.styled(header, "nav", **b.filler_style())
    main = b.styled(body, "main", **b.filler_style())

    # The subject container and its feature-identical decoys are created in
    # shuffled order so the true one has no systematic id advantage.
    container_style = {
        "font_size": 14.0,
        "font_weight": 400.0,
        "bbox": (
            round(float(rng.uniform(0, 30)), 2),
            round(float(rng.uniform(60, 500)), 2),
            round(float(rng.uniform(300, 360)), 2),
            round(float(rng.uniform(300, 600)), 2),
        ),
        "visible": True,
    }
    slots = ["subject"] + ["decoy"] * cfg.duplicate_containers
    rng.shuffle(slots)
    subject = -1
    decoys = []
    for slot in slots:
        if slot == "subject" and not cfg.context_only_subject:
            cid = b.styled(main, "section", font_size=13.0, font_weight=400.0,
                           bbox=(8.0, 70.0, 360.0, 640.0), visible=True)
        else:
            cid = b.styled(main, "div", **container_style)
        if slot == "subject":
            subject = cid
        else:
            decoys.append(cid)

    # Five labeled elements, each in its own child subtree of the container.
    for label in _CLASS_PROFILES:
        style = b.profile_style(label, jitter=8.0, page_index=page_index)
        tag = style.pop("tag")
        wrapper = b.styled(subject, "div", **b.filler_style())
        if rng.random() < 0.5:
            inner = b.styled(wrapper, "div", **b.filler_style())
        else:
            inner = wrapper
        b.styled(inner, tag, label=label, text_class=label, **style)

    # Decoys mirror the container shape but hold only an image and filler,
    # matching the subject's one-image subtree count.
    for decoy in decoys:
        b.styled(decoy, "img", bbox=(40.0, 100.0, 280.0, 280.0), visible=True)
        for _ in range(2):
            b.styled(decoy, "span", text="related", **b.filler_style())

    footer = b.styled(body, "footer", **b.filler_style())
    sections = [header, nav, main, footer]

    # Class distractors: same profiles, perturbed geometry, never inside the
    # subject or a decoy (img counts there must stay equal).
    for label in _CLASS_PROFILES:
        for _ in range(cfg.distractors_per_class):
            style = b.profile_style(label, jitter=cfg.distractor_jitter, page_index=page_index)
            tag = style.pop("tag")
            parent = int(rng.choice(sections))
            b.styled(parent, tag, text_class=label, **style)

    # Random filler grown with geometric child quotas (img excluded so the
    # subject/decoy image counts stay planted).
    n_target = int(rng.integers(cfg.min_nodes, cfg.max_nodes + 1))
    p = 1.0 / (1.0 + cfg.branching_mean)
    open_slots = list(sections)
    while len(b.rows) < n_target:
        parent = int(rng.choice(open_slots)) if open_slots else body
        if open_slots:
            open_slots.remove(parent)
        tag = str(rng.choice(_FILLER_TAGS))
        text = "item" if rng.random() < 0.3 else None
        node = b.styled(parent, tag, text=text, **b.filler_style())
        quota = int(rng.geometric(p)) - 1
        open_slots.extend([node] * quota)
        if not open_slots:
            open_slots.append(int(rng.choice(sections)))

    _count_images(b.rows)
    nodes = [DomNode(**{k: row.get(k) for k in (
        "id", "parent", "tag", "text", "bbox", "font_size", "font_weight",
        "visible", "num_images_subtree", "label", "text_embedding",
    )}) for row in b.rows]
    tree = DomTree.build(f"site{page_index:05d}/page{page_index:05d}", nodes)
    assert tree.subject_id == subject, "planted container must be the derived subject"
    return tree


def generate_corpus(cfg: GenConfig, out_dir: str | Path) -> dict[str, list[str]]:
    """Write n_pages canonical files plus an 80/10/10 train/val/test manifest."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ids = []
    for index in range(cfg.n_pages):
        tree = generate_page(cfg, index)
        (out / f"page-{index:05d}.json").write_bytes(save_page_json(tree))
        ids.append(tree.page_id)
    n_train = math.floor(cfg.n_pages * 0.8)
    n_val = math.floor(cfg.n_pages * 0.9) - n_train
    splits = {
        "train": ids[:n_train],
        "val": ids[n_train:n_train + n_val],
        "test": ids[n_train + n_val:],
    }
    write_manifest(out, splits)
    return splits
