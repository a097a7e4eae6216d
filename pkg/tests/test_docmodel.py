from __future__ import annotations

import json

import pytest

from uniparse.corpus import CorpusSpec, gen_corpus
from uniparse.dispatch import ROUTE_TABLE
from uniparse.docmodel import (
    BoundingBox,
    Detection,
    DocumentIR,
    DuplicateId,
    OutlineEntry,
    PageIR,
    SchemaViolation,
    SemanticCategory,
    Severity,
    category_layer,
    document_bytes,
    load_document,
    save_document,
    validate_document,
)

from conftest import det, one_page_doc


def write_ir(tmp_path, data) -> str:
    path = tmp_path / "doc.ir.json"
    path.write_text(json.dumps(data), encoding="utf-8")
    return str(path)


def minimal_ir(**overrides) -> dict:
    data = {
        "version": "1",
        "doc_id": "t1",
        "language_tag": "en",
        "outline": [],
        "pages": [
            {"page_index": 0, "width_pt": 612.0, "height_pt": 792.0, "detections": []}
        ],
    }
    data.update(overrides)
    return data


def test_load_minimal_empty_page(tmp_path):
    doc = load_document(write_ir(tmp_path, minimal_ir()))
    assert doc.page_count == 1
    assert sum(1 for _ in doc.iter_detections()) == 0


def test_load_duplicate_id_rejected(tmp_path):
    d = {"id": "b1", "box": [0.1, 0.1, 0.5, 0.2], "category": "paragraph", "confidence": 0.9}
    data = minimal_ir()
    data["pages"][0]["detections"] = [d, dict(d)]
    with pytest.raises(DuplicateId) as err:
        load_document(write_ir(tmp_path, data))
    assert err.value.detection_id == "b1"


def test_missing_file_raises_not_found(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_document(tmp_path / "nope.ir.json")


def test_malformed_json_rejected(tmp_path):
    path = tmp_path / "bad.ir.json"
    path.write_text("{not json", encoding="utf-8")
    with pytest.raises(SchemaViolation):
        load_document(path)


def test_unknown_category_rejected(tmp_path):
    data = minimal_ir()
    data["pages"][0]["detections"] = [
        {"id": "b1", "box": [0.1, 0.1, 0.5, 0.2], "category": "hologram", "confidence": 0.9}
    ]
    with pytest.raises(SchemaViolation) as err:
        load_document(write_ir(tmp_path, data))
    assert "category" in err.value.field


def test_wrong_version_rejected(tmp_path):
    with pytest.raises(SchemaViolation):
        load_document(write_ir(tmp_path, minimal_ir(version="2")))


def test_invalid_box_rejected_at_load(tmp_path):
    data = minimal_ir()
    data["pages"][0]["detections"] = [
        {"id": "b1", "box": [0.5, 0.1, 0.5, 0.2], "category": "paragraph", "confidence": 0.9}
    ]
    with pytest.raises(SchemaViolation):
        load_document(write_ir(tmp_path, data))


def test_corpus_roundtrip_byte_identical(tmp_path):
    # save -> load -> save is the identity on canonical serialization
    docs, _ = gen_corpus(CorpusSpec(seed=7, n_docs=2, pages_min=1, pages_max=2,
                                    cross_page_split_prob=0.5))
    for doc in docs:
        first = tmp_path / f"{doc.doc_id}.a.json"
        save_document(doc, first)
        loaded = load_document(first)
        second = tmp_path / f"{doc.doc_id}.b.json"
        save_document(loaded, second)
        assert first.read_bytes() == second.read_bytes()
        assert document_bytes(doc) == first.read_bytes()


def test_validate_clean_document():
    doc = one_page_doc([det("b1", (0.1, 0.1, 0.5, 0.2))])
    assert validate_document(doc).ok


def test_validate_degenerate_box_is_error():
    doc = one_page_doc([det("b1", (0.5, 0.1, 0.5, 0.2))])
    report = validate_document(doc)
    assert [f.code for f in report.errors] == ["degenerate_box"]


def test_validate_out_of_bounds_box_is_error():
    doc = one_page_doc([det("b1", (0.1, 0.1, 1.5, 0.2))])
    assert [f.code for f in validate_document(doc).errors] == ["box_bounds"]


def test_validate_confidence_out_of_range():
    doc = one_page_doc([det("b1", (0.1, 0.1, 0.5, 0.2), confidence=1.2)])
    assert [f.code for f in validate_document(doc).errors] == ["confidence"]


def test_validate_orphan_group_hint_warns():
    doc = one_page_doc([det("b1", (0.1, 0.1, 0.5, 0.2), group_hint="g9")])
    report = validate_document(doc)
    assert not report.errors
    assert [f.code for f in report.warnings] == ["orphan_group_hint"]


def test_validate_outline_level_jump():
    doc = DocumentIR(
        doc_id="t",
        pages=(PageIR(0, 612.0, 792.0, ()),),
        outline=(OutlineEntry(1, "Intro", 0), OutlineEntry(3, "Deep", 0)),
    )
    assert any(f.code == "outline_level" for f in validate_document(doc).errors)


def test_corpus_documents_validate_clean(small_corpus):
    docs, _ = small_corpus
    for doc in docs:
        report = validate_document(doc)
        assert not report.errors, report.errors


def test_every_category_has_one_layer_and_route():
    for category in SemanticCategory:
        assert category_layer(category) is not None
        assert category in ROUTE_TABLE


def test_bounding_box_geometry():
    a = BoundingBox(0.1, 0.1, 0.5, 0.3)
    b = BoundingBox(0.3, 0.2, 0.7, 0.4)
    assert a.intersection_area(b) == pytest.approx(0.2 * 0.1)
    assert a.union(b).as_list() == [0.1, 0.1, 0.7, 0.4]
    assert a.distance_to_point(0.3, 0.2) == 0.0
    assert a.distance_to_point(0.5, 0.5) == pytest.approx(0.2)
    assert not BoundingBox(0.1, 0.1, 0.1, 0.3).is_valid()
    assert not BoundingBox(-0.1, 0.1, 0.5, 0.3).is_valid()
