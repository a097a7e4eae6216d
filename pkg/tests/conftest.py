from __future__ import annotations

import pytest

from uniparse.config import EngineConfig
from uniparse.corpus import CorpusSpec, gen_corpus
from uniparse.docmodel import BoundingBox, Detection, DocumentIR, PageIR, SemanticCategory


def det(
    det_id: str,
    box: tuple[float, float, float, float],
    category: SemanticCategory = SemanticCategory.PARAGRAPH,
    page: int = 0,
    **kw,
) -> Detection:
    return Detection(
        id=det_id,
        page_index=page,
        box=BoundingBox(*box),
        category=category,
        confidence=kw.pop("confidence", 0.9),
        **kw,
    )


def one_page_doc(detections, doc_id: str = "doc", outline=()) -> DocumentIR:
    return DocumentIR(
        doc_id=doc_id,
        pages=(PageIR(page_index=0, width_pt=612.0, height_pt=792.0,
                      detections=tuple(detections)),),
        outline=tuple(outline),
    )


@pytest.fixture(scope="session")
def cfg() -> EngineConfig:
    return EngineConfig()


@pytest.fixture(scope="session")
def small_corpus():
    spec = CorpusSpec(seed=11, n_docs=6, pages_min=1, pages_max=3)
    return gen_corpus(spec)
