"""Node embedding architectures over DOM trees, plus the shared classifier head.

Each embedder maps (page graph, node ids) to a fixed-width representation
matrix with one row per requested node. Graph-convolutional models run
vectorized over all nodes of a page; the tree LSTMs memoize per-node states
so a full page costs one cell evaluation per node.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy import sparse

from . import tensor as T
from .dom import ClassId, DomTree, FeatureConfig, featurize_page
from .tensor import Tensor

NUM_CLASSES = len(ClassId)

EMBEDDER_KINDS = (
    "gcn-mean", "gcn-gru", "te", "lstm-td", "lstm-bu", "lstm-bi", "lstm-bie", "fcn",
)


@dataclass(frozen=True)
class EmbedderConfig:
    """Architecture selection and dimensions shared by all embedders."""

    kind: str
    input_dim: int
    dim: int = 150
    layers: int = 2            # gcn-mean stack depth
    heads: int = 2             # te attention heads
    ff_dim: int | None = None  # te feed-forward width, defaults to 2 * dim
    include_parent: bool = True
    max_neighbors: int = 64    # te sequence truncation

    def __post_init__(self):
        if self.kind not in EMBEDDER_KINDS:
            raise ValueError(f"unknown embedder kind {self.kind!r}")
        if self.dim <= 0 or self.input_dim <= 0:
            raise ValueError("dimensions must be positive")
        if self.kind == "te" and self.dim % self.heads != 0:
            raise ValueError(f"dim {self.dim} not divisible by heads {self.heads}")
        if self.kind == "gcn-mean" and self.layers < 1:
            raise ValueError("gcn-mean needs at least one layer")
        if self.ff_dim is None:
            object.__setattr__(self, "ff_dim", 2 * self.dim)

    @property
    def out_dim(self) -> int:
        return 2 * self.dim if self.kind in ("lstm-bi", "lstm-bie") else self.dim


class PageGraph:
    """Featurized page: node feature matrix, tree adjacency, and neighbor lists."""

    def __init__(self, tree: DomTree, x: np.ndarray, include_parent: bool = True):
        self.tree = tree
        self.n = len(tree.nodes)
        self.x = np.asarray(x, dtype=np.float64)
        if self.x.shape[0] != self.n:
            raise T.ShapeMismatch(f"{self.x.shape[0]} feature rows for {self.n} nodes")
        self.parents = np.array(
            [-1 if n.parent is None else n.parent for n in tree.nodes], dtype=np.intp
        )
        self.children = [np.asarray(c, dtype=np.intp) for c in tree.children]
        self.neighbors = []
        for v in range(self.n):
            nbrs = []
            if include_parent and self.parents[v] >= 0:
                nbrs.append(self.parents[v])
            nbrs.extend(tree.children[v])
            self.neighbors.append(np.asarray(nbrs, dtype=np.intp))
        rows, cols, vals = [], [], []
        for v, nbrs in enumerate(self.neighbors):
            if len(nbrs):
                rows.extend([v] * len(nbrs))
                cols.extend(nbrs)
                vals.extend([1.0 / len(nbrs)] * len(nbrs))
        self.adj_mean = sparse.csr_matrix(
            (vals, (rows, cols)), shape=(self.n, self.n)
        )
        # Canonical column order makes neighbor aggregation exactly
        # permutation-invariant (float sums happen in a fixed order).
        self.adj_mean.sort_indices()


def build_page_graph(tree: DomTree, features: FeatureConfig,
                     include_parent: bool = True) -> PageGraph:
    return PageGraph(tree, featurize_page(tree, features), include_parent)


# --- Shared cells ----------------------------------------------------------------

_GATES = ("i", "f", "g", "o")


def _init_lstm(params: dict[str, Tensor], prefix: str, in_dim: int, dim: int,
               rng: np.random.Generator) -> None:
    for gate in _GATES:
        params[f"{prefix}.W{gate}"] = T.glorot(rng, in_dim, dim)
        params[f"{prefix}.U{gate}"] = T.glorot(rng, dim, dim)
        # Forget gates start open so early training does not wash out state.
        params[f"{prefix}.b{gate}"] = (
            T.const_param(1.0, dim) if gate == "f" else T.zeros_param(dim)
        )


def _lstm_cell(p: dict[str, Tensor], pre: str, x: Tensor, h: Tensor, c: Tensor):
    i = T.sigmoid(T.add(T.add(T.matmul(x, p[f"{pre}.Wi"]), T.matmul(h, p[f"{pre}.Ui"])), p[f"{pre}.bi"]))
    f = T.sigmoid(T.add(T.add(T.matmul(x, p[f"{pre}.Wf"]), T.matmul(h, p[f"{pre}.Uf"])), p[f"{pre}.bf"]))
    g = T.tanh(T.add(T.add(T.matmul(x, p[f"{pre}.Wg"]), T.matmul(h, p[f"{pre}.Ug"])), p[f"{pre}.bg"]))
    o = T.sigmoid(T.add(T.add(T.matmul(x, p[f"{pre}.Wo"]), T.matmul(h, p[f"{pre}.Uo"])), p[f"{pre}.bo"]))
    c2 = T.add(T.mul(f, c), T.mul(i, g))
    h2 = T.mul(o, T.tanh(c2))
    return h2, c2


def _child_sum_cell(p: dict[str, Tensor], pre: str, x: Tensor,
                    child_h: Tensor | None, child_c: Tensor | None, dim: int):
    """Child-sum tree cell: summed child hidden state, one forget gate per child."""
    if child_h is None:
        h_tilde = Tensor(np.zeros((1, dim)))
    else:
        h_tilde = T.sum_rows(child_h)
    i = T.sigmoid(T.add(T.add(T.matmul(x, p[f"{pre}.Wi"]), T.matmul(h_tilde, p[f"{pre}.Ui"])), p[f"{pre}.bi"]))
    g = T.tanh(T.add(T.add(T.matmul(x, p[f"{pre}.Wg"]), T.matmul(h_tilde, p[f"{pre}.Ug"])), p[f"{pre}.bg"]))
    o = T.sigmoid(T.add(T.add(T.matmul(x, p[f"{pre}.Wo"]), T.matmul(h_tilde, p[f"{pre}.Uo"])), p[f"{pre}.bo"]))
    c = T.mul(i, g)
    if child_h is not None:
        fk = T.sigmoid(T.add(T.add(T.matmul(x, p[f"{pre}.Wf"]), T.matmul(child_h, p[f"{pre}.Uf"])), p[f"{pre}.bf"]))
        c = T.add(c, T.sum_rows(T.mul(fk, child_c)))
    h = T.mul(o, T.tanh(c))
    return h, c


def _zeros_state(dim: int) -> tuple[Tensor, Tensor]:
    return Tensor(np.zeros((1, dim))), Tensor(np.zeros((1, dim)))


# --- Embedders --------------------------------------------------------------------

class EmbedderBase:
    """Common bookkeeping: config access and a cell/aggregation evaluation counter."""

    def __init__(self, cfg: EmbedderConfig):
        self.cfg = cfg
        self.eval_count = 0  # cell or per-node aggregation evaluations, for cost tests

    @property
    def out_dim(self) -> int:
        return self.cfg.out_dim

    def init_params(self, rng: np.random.Generator) -> dict[str, Tensor]:
        raise NotImplementedError

    def embed(self, graph: PageGraph, node_ids, params: dict[str, Tensor]) -> Tensor:
        raise NotImplementedError


class GcnMean(EmbedderBase):
    """Stacked mean-aggregation convolutions with unit-normalized layer outputs."""

    kind = "gcn-mean"

    def init_params(self, rng):
        params = {}
        d_prev = self.cfg.input_dim
        for layer in range(1, self.cfg.layers + 1):
            params[f"layer{layer}.V"] = T.glorot(rng, d_prev, self.cfg.dim)
            params[f"layer{layer}.b"] = T.zeros_param(self.cfg.dim)
            params[f"layer{layer}.W"] = T.glorot(rng, d_prev + self.cfg.dim, self.cfg.dim)
            params[f"layer{layer}.w"] = T.zeros_param(self.cfg.dim)
            d_prev = self.cfg.dim
        return params

    def layer_outputs(self, graph: PageGraph, params) -> list[Tensor]:
        """All-node representations after each convolution layer."""
        z = Tensor(graph.x)
        outs = []
        for layer in range(1, self.cfg.layers + 1):
            r = T.relu(T.add(T.matmul(z, params[f"layer{layer}.V"]), params[f"layer{layer}.b"]))
            h = T.const_matmul(graph.adj_mean, r)
            k = T.relu(T.add(
                T.matmul(T.concat([z, h], axis=1), params[f"layer{layer}.W"]),
                params[f"layer{layer}.w"],
            ))
            z = T.l2_normalize(k)
            outs.append(z)
            self.eval_count += graph.n
        return outs

    def embed(self, graph, node_ids, params):
        z = self.layer_outputs(graph, params)[-1]
        return T.gather_rows(z, node_ids)


class GcnGru(EmbedderBase):
    """One gated recurrent step over the mean-encoded neighborhood."""

    kind = "gcn-gru"

    def init_params(self, rng):
        d, din = self.cfg.dim, self.cfg.input_dim
        params = {
            "nbr.V": T.glorot(rng, din, d),
            "nbr.b": T.zeros_param(d),
        }
        for gate in ("r", "z", "n"):
            params[f"gru.W{gate}"] = T.glorot(rng, din, d)
            params[f"gru.U{gate}"] = T.glorot(rng, d, d)
            params[f"gru.b{gate}"] = T.zeros_param(d)
        params["out.W"] = T.glorot(rng, din + d, d)
        params["out.b"] = T.zeros_param(d)
        return params

    def embed(self, graph, node_ids, params):
        x = Tensor(graph.x)
        m = T.const_matmul(graph.adj_mean, T.add(T.matmul(x, params["nbr.V"]), params["nbr.b"]))
        r = T.sigmoid(T.add(T.add(T.matmul(x, params["gru.Wr"]), T.matmul(m, params["gru.Ur"])), params["gru.br"]))
        zg = T.sigmoid(T.add(T.add(T.matmul(x, params["gru.Wz"]), T.matmul(m, params["gru.Uz"])), params["gru.bz"]))
        n = T.tanh(T.add(T.add(T.matmul(x, params["gru.Wn"]), T.matmul(T.mul(r, m), params["gru.Un"])), params["gru.bn"]))
        # h = (1 - zg) * n + zg * m, written as n + zg * (m - n)
        h = T.add(n, T.mul(zg, T.add(m, T.scale(n, -1.0))))
        z = T.add(T.matmul(T.concat([x, h], axis=1), params["out.W"]), params["out.b"])
        self.eval_count += graph.n
        return T.gather_rows(z, node_ids)


class TransformerEncoderEmbedder(EmbedderBase):
    """Single encoder layer over the node-plus-neighbors sequence, no positions."""

    kind = "te"

    def init_params(self, rng):
        d, din, ff = self.cfg.dim, self.cfg.input_dim, self.cfg.ff_dim
        dk = d // self.cfg.heads
        params = {
            "proj.W": T.glorot(rng, din, d),
            "proj.b": T.zeros_param(d),
        }
        for h in range(self.cfg.heads):
            params[f"attn.q{h}"] = T.glorot(rng, d, dk)
            params[f"attn.k{h}"] = T.glorot(rng, d, dk)
            params[f"attn.v{h}"] = T.glorot(rng, d, dk)
        params["attn.out"] = T.glorot(rng, d, d)
        params["attn.out_b"] = T.zeros_param(d)
        params["ln1.g"] = T.const_param(1.0, d)
        params["ln1.b"] = T.zeros_param(d)
        params["ff.W1"] = T.glorot(rng, d, ff)
        params["ff.b1"] = T.zeros_param(ff)
        params["ff.W2"] = T.glorot(rng, ff, d)
        params["ff.b2"] = T.zeros_param(d)
        params["ln2.g"] = T.const_param(1.0, d)
        params["ln2.b"] = T.zeros_param(d)
        return params

    def _encode(self, graph: PageGraph, v: int, params) -> Tensor:
        ids = np.concatenate(([v], graph.neighbors[v][: self.cfg.max_neighbors]))
        dk = self.cfg.dim // self.cfg.heads
        s = T.add(T.matmul(Tensor(graph.x[ids]), params["proj.W"]), params["proj.b"])
        heads = []
        for h in range(self.cfg.heads):
            q = T.matmul(s, params[f"attn.q{h}"])
            k = T.matmul(s, params[f"attn.k{h}"])
            val = T.matmul(s, params[f"attn.v{h}"])
            att = T.softmax(T.scale(T.matmul(q, T.transpose(k)), 1.0 / np.sqrt(dk)))
            heads.append(T.matmul(att, val))
        mixed = T.add(T.matmul(T.concat(heads, axis=1), params["attn.out"]), params["attn.out_b"])
        s1 = T.layer_norm(T.add(s, mixed), params["ln1.g"], params["ln1.b"])
        inner = T.relu(T.add(T.matmul(s1, params["ff.W1"]), params["ff.b1"]))
        ffn = T.add(T.matmul(inner, params["ff.W2"]), params["ff.b2"])
        s2 = T.layer_norm(T.add(s1, ffn), params["ln2.g"], params["ln2.b"])
        self.eval_count += 1
        return T.gather_rows(s2, [0])

    def embed(self, graph, node_ids, params):
        return T.concat([self._encode(graph, v, params) for v in node_ids], axis=0)


class LstmTopDown(EmbedderBase):
    """LSTM along the root-to-node path; states memoized parent-first."""

    kind = "lstm-td"

    def init_params(self, rng):
        params: dict[str, Tensor] = {}
        _init_lstm(params, "td", self.cfg.input_dim, self.cfg.dim, rng)
        return params

    def _states(self, graph: PageGraph, node_ids, params, prefix: str = "td",
                inputs: Tensor | None = None) -> dict[int, tuple[Tensor, Tensor]]:
        memo: dict[int, tuple[Tensor, Tensor]] = {}
        for v in node_ids:
            path = []
            u = v
            while u != -1 and u not in memo:
                path.append(u)
                u = graph.parents[u]
            for w in reversed(path):
                parent = graph.parents[w]
                h_prev, c_prev = memo[parent] if parent != -1 else _zeros_state(self.cfg.dim)
                x = T.gather_rows(inputs, [w]) if inputs is not None else Tensor(graph.x[w][None])
                memo[w] = _lstm_cell(params, prefix, x, h_prev, c_prev)
                self.eval_count += 1
        return memo

    def embed(self, graph, node_ids, params):
        memo = self._states(graph, node_ids, params)
        return T.concat([memo[v][0] for v in node_ids], axis=0)


class LstmBottomUp(EmbedderBase):
    """Child-sum tree cell, evaluated leaves-first over the whole page."""

    kind = "lstm-bu"

    def init_params(self, rng):
        params: dict[str, Tensor] = {}
        _init_lstm(params, "bu", self.cfg.input_dim, self.cfg.dim, rng)
        return params

    def _all_states(self, graph: PageGraph, params, prefix: str = "bu"):
        h_states: list[Tensor | None] = [None] * graph.n
        c_states: list[Tensor | None] = [None] * graph.n
        for v in range(graph.n - 1, -1, -1):
            # Fixed child order keeps the child sums exactly permutation-invariant.
            kids = np.sort(graph.children[v])
            if len(kids):
                child_h = T.concat([h_states[c] for c in kids], axis=0)
                child_c = T.concat([c_states[c] for c in kids], axis=0)
            else:
                child_h = child_c = None
            h_states[v], c_states[v] = _child_sum_cell(
                params, prefix, Tensor(graph.x[v][None]), child_h, child_c, self.cfg.dim
            )
            self.eval_count += 1
        return h_states, c_states

    def embed(self, graph, node_ids, params):
        h_states, _ = self._all_states(graph, params)
        return T.concat([h_states[v] for v in node_ids], axis=0)


class LstmBidirectional(EmbedderBase):
    """Concatenation of the top-down and bottom-up embeddings, trained jointly."""

    kind = "lstm-bi"

    def __init__(self, cfg: EmbedderConfig):
        super().__init__(cfg)
        self._td = LstmTopDown(cfg)
        self._bu = LstmBottomUp(cfg)

    def init_params(self, rng):
        params: dict[str, Tensor] = {}
        _init_lstm(params, "td", self.cfg.input_dim, self.cfg.dim, rng)
        _init_lstm(params, "bu", self.cfg.input_dim, self.cfg.dim, rng)
        return params

    def embed(self, graph, node_ids, params):
        down = self._td.embed(graph, node_ids, params)
        up = self._bu.embed(graph, node_ids, params)
        self.eval_count = self._td.eval_count + self._bu.eval_count
        return T.concat([down, up], axis=1)


class LstmBidirectionalEmbeddings(EmbedderBase):
    """Bottom-up states for every node, re-encoded top-down along root paths."""

    kind = "lstm-bie"

    def __init__(self, cfg: EmbedderConfig):
        super().__init__(cfg)
        self._bu = LstmBottomUp(cfg)
        self._down = LstmTopDown(replace(cfg, input_dim=cfg.dim))

    def init_params(self, rng):
        params: dict[str, Tensor] = {}
        _init_lstm(params, "bu", self.cfg.input_dim, self.cfg.dim, rng)
        _init_lstm(params, "down", self.cfg.dim, self.cfg.dim, rng)
        return params

    def embed(self, graph, node_ids, params):
        h_up, _ = self._bu._all_states(graph, params)
        up_all = T.concat(h_up, axis=0)  # (n, d), node id order
        memo = self._down._states(graph, node_ids, params, prefix="down", inputs=up_all)
        down = T.concat([memo[v][0] for v in node_ids], axis=0)
        up = T.gather_rows(up_all, node_ids)
        self.eval_count = self._bu.eval_count + self._down.eval_count
        return T.concat([down, up], axis=1)


class Fcn(EmbedderBase):
    """Two-layer perceptron on local features only; sees no tree context."""

    kind = "fcn"

    def init_params(self, rng):
        d, din = self.cfg.dim, self.cfg.input_dim
        return {
            "fc1.W": T.glorot(rng, din, d),
            "fc1.b": T.zeros_param(d),
            "fc2.W": T.glorot(rng, d, d),
            "fc2.b": T.zeros_param(d),
        }

    def embed(self, graph, node_ids, params):
        x = Tensor(graph.x[np.asarray(node_ids, dtype=np.intp)])
        hidden = T.relu(T.add(T.matmul(x, params["fc1.W"]), params["fc1.b"]))
        self.eval_count += len(node_ids)
        return T.relu(T.add(T.matmul(hidden, params["fc2.W"]), params["fc2.b"]))


_EMBEDDER_CLASSES = {
    cls.kind: cls
    for cls in (
        GcnMean, GcnGru, TransformerEncoderEmbedder, LstmTopDown, LstmBottomUp,
        LstmBidirectional, LstmBidirectionalEmbeddings, Fcn,
    )
}


def build_embedder(cfg: EmbedderConfig) -> EmbedderBase:
    return _EMBEDDER_CLASSES[cfg.kind](cfg)


# --- Classifier head and model bundle ----------------------------------------------

def init_head(rng: np.random.Generator, in_dim: int) -> dict[str, Tensor]:
    return {"head.W": T.glorot(rng, in_dim, NUM_CLASSES), "head.b": T.zeros_param(NUM_CLASSES)}


def head_logits(z: Tensor, params: dict[str, Tensor]) -> Tensor:
    return T.add(T.matmul(z, params["head.W"]), params["head.b"])


def classify(z: Tensor, params: dict[str, Tensor]) -> Tensor:
    """Class probability rows for a batch of embeddings."""
    return T.softmax(head_logits(z, params))


@dataclass
class Model:
    """An embedder, its feature layout, and one flat parameter dictionary."""

    embedder_config: EmbedderConfig
    feature_config: FeatureConfig
    params: dict[str, Tensor] = field(default_factory=dict)

    def __post_init__(self):
        self.embedder = build_embedder(self.embedder_config)

    def graph(self, tree: DomTree) -> PageGraph:
        return build_page_graph(tree, self.feature_config, self.embedder_config.include_parent)

    def logits(self, graph: PageGraph, node_ids) -> Tensor:
        z = self.embedder.embed(graph, node_ids, self.params)
        return head_logits(z, self.params)

    def node_probabilities(self, page: DomTree | PageGraph) -> np.ndarray:
        """(n, 7) class probabilities for every node; no gradients recorded."""
        graph = self.graph(page) if isinstance(page, DomTree) else page
        logits = self.logits(graph, np.arange(graph.n))
        return T.softmax(logits).data


def init_model(embedder_cfg: EmbedderConfig, feature_cfg: FeatureConfig,
               seed: int) -> Model:
    """Seeded parameter initialization for the embedder plus classifier head."""
    if embedder_cfg.input_dim != feature_cfg.dim:
        raise T.ShapeMismatch(
            f"embedder input_dim {embedder_cfg.input_dim} != feature dim {feature_cfg.dim}"
        )
    rng = np.random.default_rng([seed, 0])
    model = Model(embedder_cfg, feature_cfg)
    model.params = model.embedder.init_params(rng)
    model.params.update(init_head(rng, embedder_cfg.out_dim))
    return model
