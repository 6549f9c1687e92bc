"""Nomination and diagnostics: per-class argmax selection over page nodes,
accuracy, precision/recall, and the labeled-vs-best-unlabeled confidence gap.

Evaluation is read-only: model parameters are never touched, and pages can
be processed in parallel.
"""
from __future__ import annotations

import csv
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .dom import ClassId, DomTree, POSITIVE_CLASSES
from .embedders import Model, PageGraph


class EvaluationError(Exception):
    """Base class for evaluation failures."""


class EmptyPage(EvaluationError):
    """Raised when a page has no nodes to score."""


class MissingLabel(EvaluationError):
    """Raised when a requested class has no ground-truth node on the page."""


class NoLabeledPages(EvaluationError):
    """Raised when accuracy is requested but no page carries any label."""


@dataclass(frozen=True)
class Nomination:
    node_id: int
    probability: float
    correct: bool | None  # None when the page has no ground truth for the class


@dataclass(frozen=True)
class NominationResult:
    """Exactly one nominated node per positive class for one page."""

    page_id: str
    entries: dict[ClassId, Nomination]


@dataclass(frozen=True)
class NominationAccuracy:
    per_class: dict[ClassId, float | None]
    average: float
    pages_per_class: dict[ClassId, int]


@dataclass(frozen=True)
class ClassificationReport:
    precision: dict[ClassId, float | None]
    recall: dict[ClassId, float | None]
    confusion: np.ndarray  # (7, 7), rows = true class, cols = predicted


@dataclass(frozen=True)
class MetricReport:
    """Per-class nomination accuracy, classification view, and mean confidence gap."""

    per_class_accuracy: dict[ClassId, float | None]
    average_accuracy: float
    pages_per_class: dict[ClassId, int]
    precision: dict[ClassId, float | None]
    recall: dict[ClassId, float | None]
    mean_confidence_gap: dict[ClassId, float]


def _page_probs(model: Model, page: DomTree | PageGraph) -> np.ndarray:
    if isinstance(page, DomTree):
        if not page.nodes:
            raise EmptyPage("page has no nodes")
        graph = model.graph(page)
    else:
        if page.n == 0:
            raise EmptyPage("page has no nodes")
        graph = page
    return model.node_probabilities(graph)


def _all_probs(model: Model, pages: list[DomTree],
               graphs: dict[str, PageGraph] | None, workers: int = 1) -> list[np.ndarray]:
    def one(page: DomTree) -> np.ndarray:
        return _page_probs(model, graphs[page.page_id] if graphs else page)

    if workers > 1 and len(pages) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(one, pages))
    return [one(p) for p in pages]


def _nominate_from_probs(page: DomTree, probs: np.ndarray) -> NominationResult:
    entries = {}
    for cls in POSITIVE_CLASSES:
        col = probs[:, int(cls)]
        node_id = int(np.argmax(col))  # first max wins: smallest id on ties
        truth = page.labeled_nodes.get(cls)
        entries[cls] = Nomination(
            node_id=node_id,
            probability=float(col[node_id]),
            correct=None if truth is None else node_id == truth,
        )
    return NominationResult(page_id=page.page_id, entries=entries)


def nominate(model: Model, page: DomTree,
             graph: PageGraph | None = None) -> NominationResult:
    """Pick, per positive class, the node with the highest predicted probability."""
    return _nominate_from_probs(page, _page_probs(model, graph or page))


def nomination_accuracy(model: Model, pages: list[DomTree],
                        graphs: dict[str, PageGraph] | None = None,
                        workers: int = 1) -> NominationAccuracy:
    """Fraction of pages whose nominee is the ground-truth node, per class.

    Pages missing a class's label are excluded from that class's denominator;
    the average is the unweighted mean over classes with at least one page.
    """
    hits = {cls: 0 for cls in POSITIVE_CLASSES}
    counts = {cls: 0 for cls in POSITIVE_CLASSES}
    for page, probs in zip(pages, _all_probs(model, pages, graphs, workers)):
        result = _nominate_from_probs(page, probs)
        for cls, nom in result.entries.items():
            if nom.correct is not None:
                counts[cls] += 1
                hits[cls] += nom.correct
    if not any(counts.values()):
        raise NoLabeledPages("no page carries any ground-truth label")
    per_class = {
        cls: (hits[cls] / counts[cls] if counts[cls] else None)
        for cls in POSITIVE_CLASSES
    }
    present = [v for v in per_class.values() if v is not None]
    return NominationAccuracy(
        per_class=per_class,
        average=float(np.mean(present)),
        pages_per_class=counts,
    )


def _gaps_from_probs(page: DomTree, probs: np.ndarray,
                     classes) -> dict[ClassId, float]:
    labeled = page.labeled_nodes
    labeled_ids = sorted(labeled.values())
    mask = np.ones(probs.shape[0], dtype=bool)
    mask[labeled_ids] = False
    gaps = {}
    for cls in classes:
        truth = labeled.get(cls)
        if truth is None:
            raise MissingLabel(f"{page.page_id}: no ground truth for {cls.name.lower()}")
        best_unlabeled = float(probs[mask, int(cls)].max()) if mask.any() else 0.0
        gaps[cls] = float(probs[truth, int(cls)]) - best_unlabeled
    return gaps


def confidence_gap(model: Model, page: DomTree,
                   classes=None, graph: PageGraph | None = None) -> dict[ClassId, float]:
    """Ground-truth probability minus the best unlabeled probability, per class."""
    if classes is None:
        classes = POSITIVE_CLASSES
    return _gaps_from_probs(page, _page_probs(model, graph or page), classes)


def mean_confidence_gaps(model: Model, pages: list[DomTree],
                         graphs: dict[str, PageGraph] | None = None,
                         workers: int = 1) -> dict[ClassId, float]:
    """Per-class gap averaged over the pages that carry that class's label."""
    sums = {cls: 0.0 for cls in POSITIVE_CLASSES}
    counts = {cls: 0 for cls in POSITIVE_CLASSES}
    for page, probs in zip(pages, _all_probs(model, pages, graphs, workers)):
        present = [cls for cls in POSITIVE_CLASSES if cls in page.labeled_nodes]
        for cls, gap in _gaps_from_probs(page, probs, present).items():
            sums[cls] += gap
            counts[cls] += 1
    return {
        cls: (sums[cls] / counts[cls] if counts[cls] else float("nan"))
        for cls in POSITIVE_CLASSES
    }


def classification_report(model: Model, pages: list[DomTree], M: int = 10,
                          seed: int = 0, include_subject: bool = True,
                          graphs: dict[str, PageGraph] | None = None,
                          workers: int = 1) -> ClassificationReport:
    """Confusion counts over labeled nodes plus training-style sampled negatives."""
    from .training import sample_training_elements  # local import avoids a cycle

    n_classes = len(ClassId)
    confusion = np.zeros((n_classes, n_classes), dtype=np.int64)
    for page_index, (page, probs) in enumerate(
        zip(pages, _all_probs(model, pages, graphs, workers))
    ):
        rng = np.random.default_rng([seed, 3, page_index])
        ids, targets = sample_training_elements(page, M, rng, include_subject)
        preds = probs[ids].argmax(axis=1)
        for truth, pred in zip(targets, preds):
            confusion[truth, pred] += 1
    precision, recall = {}, {}
    for cls in ClassId:
        col = confusion[:, int(cls)].sum()
        row = confusion[int(cls), :].sum()
        tp = confusion[int(cls), int(cls)]
        precision[cls] = float(tp / col) if col else None
        recall[cls] = float(tp / row) if row else None
    return ClassificationReport(precision=precision, recall=recall, confusion=confusion)


def evaluate_model(model: Model, pages: list[DomTree], M: int = 10, seed: int = 0,
                   graphs: dict[str, PageGraph] | None = None,
                   workers: int = 1) -> MetricReport:
    """All evaluation views in one pass over the corpus."""
    accuracy = nomination_accuracy(model, pages, graphs, workers)
    gaps = mean_confidence_gaps(model, pages, graphs, workers)
    cls_report = classification_report(model, pages, M, seed, graphs=graphs, workers=workers)
    return MetricReport(
        per_class_accuracy=accuracy.per_class,
        average_accuracy=accuracy.average,
        pages_per_class=accuracy.pages_per_class,
        precision={cls: cls_report.precision[cls] for cls in POSITIVE_CLASSES},
        recall={cls: cls_report.recall[cls] for cls in POSITIVE_CLASSES},
        mean_confidence_gap=gaps,
    )


# --- CSV emission -----------------------------------------------------------------

GAP_COLUMNS = tuple(f"conf_gap_{cls.name.lower()}" for cls in POSITIVE_CLASSES)
HISTORY_COLUMNS = ("epoch", "train_loss", "val_loss", "val_nom_acc") + GAP_COLUMNS
METRIC_COLUMNS = (
    "class", "nomination_accuracy", "pages", "precision", "recall", "mean_confidence_gap",
)


def write_history_csv(records, path: str | Path) -> None:
    """One row per epoch; an empty history writes the header only."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(HISTORY_COLUMNS)
        for rec in records:
            row = [rec.epoch, repr(rec.train_loss), repr(rec.val_loss), repr(rec.val_nom_acc)]
            row.extend(repr(rec.conf_gap[cls]) for cls in POSITIVE_CLASSES)
            writer.writerow(row)


def read_history_csv(path: str | Path) -> list[dict[str, float]]:
    with open(path, newline="", encoding="utf-8") as fh:
        return [
            {key: float(value) for key, value in row.items()}
            for row in csv.DictReader(fh)
        ]


def write_metrics_csv(report: MetricReport, path: str | Path) -> None:
    """One row per positive class plus an average row; absent values stay empty."""

    def cell(value):
        return "" if value is None else repr(value)

    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(METRIC_COLUMNS)
        for cls in POSITIVE_CLASSES:
            writer.writerow([
                cls.name.lower(),
                cell(report.per_class_accuracy[cls]),
                report.pages_per_class[cls],
                cell(report.precision[cls]),
                cell(report.recall[cls]),
                repr(report.mean_confidence_gap[cls]),
            ])
        writer.writerow(["average", repr(report.average_accuracy), "", "", "", ""])


def emit_report(obj, path: str | Path) -> None:
    """Write a metric report or an epoch history to CSV, by shape of the input."""
    if isinstance(obj, MetricReport):
        write_metrics_csv(obj, path)
    else:
        write_history_csv(obj, path)
