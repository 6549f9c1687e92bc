"""Training loops: per-page element sampling, hard-example augmentation,
validation-based checkpointing.

Every epoch trains on all labeled nodes of each page plus a fresh uniform
sample of unlabeled nodes as negatives. Optionally, once a trigger epoch is
reached, the per-class top-ranked unlabeled nodes are added as permanent
negative examples so the classifier learns to push down exactly the nodes
it would otherwise nominate.
"""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import evaluation
from . import tensor as T
from .dom import ClassId, DomTree, FeatureConfig
from .embedders import EmbedderConfig, Model, PageGraph, init_model
from .tensor import AdamState, Tensor

NUM_POSITIVE = 6


class TrainingError(Exception):
    """Base class for training failures."""


class EmptyTrainSet(TrainingError):
    """Raised when no training pages are available."""


class NonFiniteLoss(TrainingError):
    """Raised when a loss or gradient stops being finite."""


@dataclass(frozen=True)
class TrainConfig:
    """Knobs for the training loop and the hard-example augmentation step."""

    epochs: int = 50
    M: int = 10                  # unlabeled samples per page per epoch
    K: int = 5                   # hard examples kept per label at augmentation
    T: int = 50                  # augmentation trigger epoch
    augment: str = "off"         # off | once | every
    seed: int = 0
    batch_pages: int = 8
    lr: float = 1e-3
    val_fraction: float = 0.1
    include_subject: bool = True

    def __post_init__(self):
        if self.M < 0 or self.K < 0:
            raise ValueError("M and K must be non-negative")
        if self.augment not in ("off", "once", "every"):
            raise ValueError(f"augment must be off/once/every, got {self.augment!r}")
        if self.augment != "off" and not 1 <= self.T <= self.epochs:
            raise ValueError(f"T={self.T} must lie in [1, epochs={self.epochs}]")
        if self.epochs < 1 or self.batch_pages < 1:
            raise ValueError("epochs and batch_pages must be positive")


@dataclass
class TrainState:
    """Mutable loop state: the model, optimizer moments, and per-page hard sets."""

    model: Model
    adam: AdamState
    hard_sets: dict[str, tuple[int, ...]] = field(default_factory=dict)
    epoch: int = 0
    best_val_loss: float = float("inf")
    best_epoch: int = 0
    best_params: dict[str, np.ndarray] = field(default_factory=dict)


def labeled_elements(tree: DomTree, include_subject: bool = True) -> tuple[list[int], list[int]]:
    """All labeled node ids with their class targets.

    A node that is both the derived subject and a stored label trains with
    the stored label; the subject class then has no positive example here.
    """
    ids, targets = [], []
    for cls in ClassId:
        if cls is ClassId.NEGATIVE:
            continue
        if cls is ClassId.SUBJECT and not include_subject:
            continue
        node = tree.labeled_nodes.get(cls)
        if node is not None and node not in ids:
            ids.append(node)
            targets.append(int(cls))
    return ids, targets


def sample_training_elements(tree: DomTree, M: int, rng: np.random.Generator,
                             include_subject: bool = True) -> tuple[list[int], list[int]]:
    """Labeled nodes plus min(M, available) unlabeled nodes drawn without replacement."""
    ids, targets = labeled_elements(tree, include_subject)
    unlabeled = tree.unlabeled_ids()
    take = min(M, len(unlabeled))
    if take:
        picks = rng.choice(len(unlabeled), size=take, replace=False)
        for i in np.sort(picks):
            ids.append(unlabeled[i])
            targets.append(int(ClassId.NEGATIVE))
    return ids, targets


def assemble_page_elements(tree: DomTree, hard_ids: tuple[int, ...], M: int,
                           rng: np.random.Generator,
                           include_subject: bool = True) -> tuple[list[int], list[int]]:
    """Per-epoch training elements: labeled + fresh negatives + hard negatives, deduplicated."""
    ids, targets = sample_training_elements(tree, M, rng, include_subject)
    seen = set(ids)
    for h in hard_ids:
        if h not in seen:
            ids.append(h)
            targets.append(int(ClassId.NEGATIVE))
            seen.add(h)
    return ids, targets


def _epoch_rng(seed: int, epoch: int, page_index: int) -> np.random.Generator:
    return np.random.default_rng([seed, 2, epoch, page_index])


def train_epoch(state: TrainState, pages: list[DomTree], cfg: TrainConfig,
                graphs: dict[str, PageGraph] | None = None) -> float:
    """One pass over all pages; Adam steps per page batch. Returns the mean loss."""
    model = state.model
    if graphs is None:
        graphs = {p.page_id: model.graph(p) for p in pages}
    state.epoch += 1
    total_loss = 0.0
    total_elems = 0
    order = list(range(len(pages)))
    for start in range(0, len(order), cfg.batch_pages):
        batch = order[start:start + cfg.batch_pages]
        grad_sums: dict[str, np.ndarray] = {}
        batch_elems = 0
        batch_loss = 0.0
        try:
            for page_index in batch:
                page = pages[page_index]
                rng = _epoch_rng(cfg.seed, state.epoch, page_index)
                ids, targets = assemble_page_elements(
                    page, state.hard_sets.get(page.page_id, ()), cfg.M, rng,
                    cfg.include_subject,
                )
                if not ids:
                    continue
                with T.Tape() as tape:
                    logits = model.logits(graphs[page.page_id], ids)
                    losses = T.softmax_cross_entropy(logits, targets)
                    page_loss = T.scale(T.mean_all(losses), float(len(ids)))
                grads = tape.gradients(page_loss, list(model.params.values()))
                for name, g in zip(model.params, grads):
                    if name in grad_sums:
                        grad_sums[name] += g
                    else:
                        grad_sums[name] = g
                batch_loss += page_loss.item()
                batch_elems += len(ids)
        except T.NonFiniteValue as exc:
            raise NonFiniteLoss(f"epoch {state.epoch}: {exc}") from exc
        if not batch_elems:
            continue
        for name in grad_sums:
            grad_sums[name] /= batch_elems
        T.adam_step(model.params, grad_sums, state.adam)
        total_loss += batch_loss
        total_elems += batch_elems
    if not total_elems:
        raise EmptyTrainSet("no trainable elements in any page")
    return total_loss / total_elems


def cntp_augment(state: TrainState, pages: list[DomTree], cfg: TrainConfig,
                 graphs: dict[str, PageGraph] | None = None) -> dict[str, tuple[int, ...]]:
    """Refresh per-page hard sets: the top-K unlabeled nodes per positive class.

    Rankings use the current model; hard ids train as negatives afterwards.
    """
    model = state.model
    if graphs is None:
        graphs = {p.page_id: model.graph(p) for p in pages}
    for page in pages:
        unlabeled = np.asarray(page.unlabeled_ids(), dtype=np.intp)
        if not len(unlabeled):
            state.hard_sets[page.page_id] = ()
            continue
        probs = model.node_probabilities(graphs[page.page_id])[unlabeled]
        hard: set[int] = set()
        for cls in range(NUM_POSITIVE):
            # Stable sort on descending probability keeps ties in id order.
            ranked = np.argsort(-probs[:, cls], kind="stable")[: cfg.K]
            hard.update(int(unlabeled[i]) for i in ranked)
        state.hard_sets[page.page_id] = tuple(sorted(hard))
    return state.hard_sets


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    val_nom_acc: float
    conf_gap: dict[ClassId, float]


@dataclass
class Checkpoint:
    """Best-validation-epoch parameters plus everything needed to rebuild the model."""

    embedder_config: EmbedderConfig
    feature_config: FeatureConfig
    train_config: TrainConfig
    best_epoch: int
    best_val_loss: float
    params: dict[str, np.ndarray]

    def to_model(self) -> Model:
        model = Model(self.embedder_config, self.feature_config)
        model.params = {name: Tensor(data.copy(), requires_grad=True)
                        for name, data in self.params.items()}
        return model


def _val_samples(pages: list[DomTree], cfg: TrainConfig) -> list[tuple[str, list[int], list[int]]]:
    # One fixed draw per run keeps validation losses comparable across epochs.
    out = []
    for page_index, page in enumerate(pages):
        rng = np.random.default_rng([cfg.seed, 1, page_index])
        ids, targets = sample_training_elements(page, cfg.M, rng, cfg.include_subject)
        if ids:
            out.append((page.page_id, ids, targets))
    return out


def _should_augment(cfg: TrainConfig, epoch: int) -> bool:
    if cfg.augment == "once":
        return epoch == cfg.T
    if cfg.augment == "every":
        return epoch % cfg.T == 0
    return False


def fit(train_pages: list[DomTree], val_pages: list[DomTree],
        embedder_cfg: EmbedderConfig, feature_cfg: FeatureConfig,
        cfg: TrainConfig) -> tuple[Checkpoint, list[EpochRecord]]:
    """Train for cfg.epochs, tracking metrics per epoch and the best-validation model.

    Confidence gaps are measured on the training split (they diagnose how the
    ranking behind nomination evolves); loss and nomination accuracy on the
    validation split drive checkpoint selection.
    """
    if not train_pages:
        raise EmptyTrainSet("fit requires at least one training page")
    model = init_model(embedder_cfg, feature_cfg, cfg.seed)
    state = TrainState(model=model, adam=T.adam_init(model.params, lr=cfg.lr))
    graphs = {p.page_id: model.graph(p) for p in [*train_pages, *val_pages]}
    val_samples = _val_samples(val_pages, cfg)

    history: list[EpochRecord] = []
    for epoch in range(1, cfg.epochs + 1):
        if _should_augment(cfg, epoch):
            cntp_augment(state, train_pages, cfg, graphs)
        train_loss = train_epoch(state, train_pages, cfg, graphs)

        val_loss = _validation_loss(model, graphs, val_samples)
        val_acc, gaps = _validation_diagnostics(model, graphs, train_pages, val_pages)
        history.append(EpochRecord(
            epoch=epoch, train_loss=train_loss, val_loss=val_loss,
            val_nom_acc=val_acc, conf_gap=gaps,
        ))
        if val_loss < state.best_val_loss:
            state.best_val_loss = val_loss
            state.best_epoch = epoch
            state.best_params = {n: t.data.copy() for n, t in model.params.items()}

    if not state.best_params:  # no validation pages: keep the final parameters
        state.best_epoch = cfg.epochs
        state.best_val_loss = float("nan")
        state.best_params = {n: t.data.copy() for n, t in model.params.items()}
    checkpoint = Checkpoint(
        embedder_config=embedder_cfg, feature_config=feature_cfg, train_config=cfg,
        best_epoch=state.best_epoch, best_val_loss=state.best_val_loss,
        params=state.best_params,
    )
    return checkpoint, history


def _validation_loss(model: Model, graphs: dict[str, PageGraph],
                     val_samples: list[tuple[str, list[int], list[int]]]) -> float:
    total, count = 0.0, 0
    try:
        for page_id, ids, targets in val_samples:
            losses = T.softmax_cross_entropy(model.logits(graphs[page_id], ids), targets)
            total += float(losses.data.sum())
            count += len(ids)
    except T.NonFiniteValue as exc:
        raise NonFiniteLoss(f"validation: {exc}") from exc
    return total / count if count else float("nan")


def _validation_diagnostics(model: Model, graphs: dict[str, PageGraph],
                            train_pages: list[DomTree],
                            val_pages: list[DomTree]) -> tuple[float, dict[ClassId, float]]:
    acc = float("nan")
    if val_pages:
        report = evaluation.nomination_accuracy(
            model, val_pages, graphs={p.page_id: graphs[p.page_id] for p in val_pages}
        )
        acc = report.average
    gaps = evaluation.mean_confidence_gaps(
        model, train_pages, graphs={p.page_id: graphs[p.page_id] for p in train_pages}
    )
    return acc, gaps


# --- Checkpoint serialization ---------------------------------------------------

CHECKPOINT_VERSION = 1


def save_checkpoint(checkpoint: Checkpoint, path: str | Path) -> None:
    obj = {
        "format_version": CHECKPOINT_VERSION,
        "embedder_config": dataclasses.asdict(checkpoint.embedder_config),
        "feature_config": dataclasses.asdict(checkpoint.feature_config),
        "train_config": dataclasses.asdict(checkpoint.train_config),
        "best_epoch": checkpoint.best_epoch,
        "best_val_loss": checkpoint.best_val_loss,
        "params": {
            name: {"shape": list(arr.shape), "data": arr.reshape(-1).tolist()}
            for name, arr in checkpoint.params.items()
        },
    }
    Path(path).write_text(json.dumps(obj, ensure_ascii=False, separators=(",", ":")) + "\n", "utf-8")


def load_checkpoint(path: str | Path) -> Checkpoint:
    obj = json.loads(Path(path).read_text("utf-8"))
    if obj.get("format_version") != CHECKPOINT_VERSION:
        raise TrainingError(f"unsupported checkpoint version {obj.get('format_version')!r}")
    fcfg_raw = dict(obj["feature_config"])
    fcfg_raw["tag_vocabulary"] = tuple(fcfg_raw["tag_vocabulary"])
    params = {
        name: np.asarray(spec["data"], dtype=np.float64).reshape(spec["shape"])
        for name, spec in obj["params"].items()
    }
    return Checkpoint(
        embedder_config=EmbedderConfig(**obj["embedder_config"]),
        feature_config=FeatureConfig(**fcfg_raw),
        train_config=TrainConfig(**obj["train_config"]),
        best_epoch=obj["best_epoch"],
        best_val_loss=obj["best_val_loss"],
        params=params,
    )


def split_pages(pages: list[DomTree], manifest: dict[str, list[str]] | None,
                val_fraction: float) -> tuple[list[DomTree], list[DomTree], list[DomTree]]:
    """Split a corpus by manifest when present, else by trailing fractions."""
    if manifest is not None:
        by_id = {p.page_id: p for p in pages}
        return tuple(  # type: ignore[return-value]
            [by_id[i] for i in manifest.get(split, []) if i in by_id]
            for split in ("train", "val", "test")
        )
    n = len(pages)
    n_val = int(n * val_fraction)
    n_train = n - n_val
    return pages[:n_train], pages[n_train:], []
