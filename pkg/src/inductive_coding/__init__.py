"""Inductive qualitative coding with language models.

Segments a corpus, has a chat model label each segment, clusters the labels
into themes over repeated rounds, assigns themes back to segments and scores
the result against human themes.
"""

from .assignment import ThemeAssignment, assign_all, parse_assignment
from .config import RunConfig, load_config
from .corpus import Document, Segment, SegmentationPolicy, load_corpus, segment_corpus, segment_document
from .gateway import ChatRequest, ChatResponse, EmbeddingVector, Gateway, GatewayConfig
from .hierarchy import ClusterConfig, HierarchyRun, Theme, run_hierarchical_clustering, trace_theme
from .incremental import IncrementalConfig, IncrementalRun, run_incremental
from .labeling import SegmentAnnotation, TaskSpec, generate_labels, label_pool, parse_label_lines
from .metrics import (
    ThemeSet,
    evaluate,
    match_themes,
    segment_level_precision,
    segment_level_recall,
    theme_level_scores,
)

__version__ = "0.1.0"

__all__ = [
    "ChatRequest", "ChatResponse", "ClusterConfig", "Document", "EmbeddingVector", "Gateway",
    "GatewayConfig", "HierarchyRun", "IncrementalConfig", "IncrementalRun", "RunConfig", "Segment",
    "SegmentAnnotation", "SegmentationPolicy", "TaskSpec", "Theme", "ThemeAssignment", "ThemeSet",
    "assign_all", "evaluate", "generate_labels", "label_pool", "load_config", "load_corpus",
    "match_themes", "parse_assignment", "parse_label_lines", "run_hierarchical_clustering",
    "run_incremental", "segment_corpus", "segment_document", "segment_level_precision",
    "segment_level_recall", "theme_level_scores", "trace_theme",
]
