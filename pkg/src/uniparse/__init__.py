"""uniparse: a multimodal document parsing and consolidation engine.

Converts a detected-page intermediate representation into ordered,
consolidated structured output (JSON/Markdown/HTML/chunks) via a two-layer
layout tree, placeholder-based multimodal reintegration, reading-order
recovery, cross-page consolidation, and a pipeline-parallel runtime.
"""

from .config import EngineConfig
from .corpus import CorpusSpec, gen_corpus, grouping_f1, order_edit_distance
from .docmodel import (
    BoundingBox,
    Detection,
    DocumentIR,
    PageIR,
    SemanticCategory,
    load_document,
    save_document,
    validate_document,
)
from .engine import process_document
from .formats import ParsedDocument, chunk, to_html, to_markdown, to_structured
from .runtime import Mode, PipelineConfig, run_pipeline, simulate_scaling

__version__ = "0.1.0"

__all__ = [
    "BoundingBox",
    "CorpusSpec",
    "Detection",
    "DocumentIR",
    "EngineConfig",
    "Mode",
    "PageIR",
    "ParsedDocument",
    "PipelineConfig",
    "SemanticCategory",
    "chunk",
    "gen_corpus",
    "grouping_f1",
    "load_document",
    "order_edit_distance",
    "process_document",
    "run_pipeline",
    "save_document",
    "simulate_scaling",
    "to_html",
    "to_markdown",
    "to_structured",
    "validate_document",
    "__version__",
]
