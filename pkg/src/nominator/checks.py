"""End-to-end gradient verification for every embedder architecture.

Builds tiny random trees with raw feature matrices, composes each embedder
with the classifier head and cross-entropy, and compares tape gradients
against central finite differences.
"""
from __future__ import annotations

import numpy as np

from . import tensor as T
from .dom import DomNode, DomTree
from .embedders import (
    EMBEDDER_KINDS, EmbedderConfig, PageGraph, build_embedder, head_logits, init_head,
)

NUM_CLASSES = 7


class GradcheckFailure(Exception):
    """Raised when an architecture's gradient error exceeds the tolerance."""


def random_tiny_tree(rng: np.random.Generator, max_nodes: int = 9) -> DomTree:
    """A small random tree; each node attaches to a uniformly random earlier node."""
    n = int(rng.integers(3, max_nodes + 1))
    nodes = [DomNode(id=0, parent=None, tag="html")]
    for i in range(1, n):
        nodes.append(DomNode(id=i, parent=int(rng.integers(0, i)), tag="div"))
    return DomTree.build("tiny", nodes)


def random_tiny_graph(rng: np.random.Generator, input_dim: int,
                      max_nodes: int = 9) -> PageGraph:
    tree = random_tiny_tree(rng, max_nodes)
    x = rng.standard_normal((len(tree.nodes), input_dim))
    return PageGraph(tree, x)


def embedder_gradcheck(kind: str, seed: int, input_dim: int = 6, dim: int = 5,
                       max_nodes: int = 9) -> float:
    """Max relative gradient error of embedder + head + cross-entropy on one tree."""
    rng = np.random.default_rng([seed, EMBEDDER_KINDS.index(kind)])
    cfg = EmbedderConfig(
        kind=kind, input_dim=input_dim, dim=dim,
        heads=1 if dim % 2 else 2,
    )
    graph = random_tiny_graph(rng, input_dim, max_nodes)
    embedder = build_embedder(cfg)
    params = embedder.init_params(rng)
    params.update(init_head(rng, cfg.out_dim))
    n_targets = min(4, graph.n)
    ids = rng.choice(graph.n, size=n_targets, replace=False)
    targets = rng.integers(0, NUM_CLASSES, size=n_targets)

    def loss_fn():
        z = embedder.embed(graph, ids, params)
        return T.mean_all(T.softmax_cross_entropy(head_logits(z, params), targets))

    return T.gradcheck(loss_fn, params)


def gradient_suite(seed: int = 0, seeds_per_kind: int = 5, input_dim: int = 6,
                   dim: int = 5, tolerance: float = 1e-4,
                   kinds: tuple[str, ...] = EMBEDDER_KINDS) -> dict[str, float]:
    """Worst gradient error per architecture over several random tiny problems.

    Raises GradcheckFailure if any architecture exceeds the tolerance.
    """
    results = {}
    for kind in kinds:
        worst = 0.0
        for s in range(seeds_per_kind):
            worst = max(worst, embedder_gradcheck(kind, seed + s, input_dim, dim))
        results[kind] = worst
    failing = {k: v for k, v in results.items() if v >= tolerance}
    if failing:
        raise GradcheckFailure(
            f"gradient error above {tolerance:g}: "
            + ", ".join(f"{k}={v:.3e}" for k, v in failing.items())
        )
    return results
