"""Web element nomination over DOM trees: graph embedders, training, evaluation."""

from .dom import (
    ClassId, DomNode, DomTree, FeatureConfig, compute_subject_node, corpus_stats,
    featurize, featurize_page, load_corpus, load_page_json, parse_html, save_page_json,
)
from .embedders import EmbedderConfig, Model, build_page_graph, init_model
from .evaluation import (
    MetricReport, confidence_gap, evaluate_model, nominate, nomination_accuracy,
)
from .synthgen import GenConfig, generate_corpus, generate_page
from .training import Checkpoint, TrainConfig, fit, load_checkpoint, save_checkpoint

__all__ = [
    "ClassId", "DomNode", "DomTree", "FeatureConfig", "compute_subject_node",
    "corpus_stats", "featurize", "featurize_page", "load_corpus", "load_page_json",
    "parse_html", "save_page_json", "EmbedderConfig", "Model", "build_page_graph",
    "init_model", "MetricReport", "confidence_gap", "evaluate_model", "nominate",
    "nomination_accuracy", "GenConfig", "generate_corpus", "generate_page",
    "Checkpoint", "TrainConfig", "fit", "load_checkpoint", "save_checkpoint",
]

__version__ = "0.1.0"
