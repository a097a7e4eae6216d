from __future__ import annotations

import json
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import pytest

from uniparse.corpus import CorpusSpec, gen_corpus
from uniparse.docmodel import SemanticCategory as C
from uniparse.experts import (
    DocumentStore,
    ExpertDescriptor,
    ExpertRequest,
    ExpertTimeout,
    FatalExpertError,
    LatencyModel,
    MODALITIES,
    MockExpert,
    ProtocolError,
    RemoteExpert,
    RetryableExpertError,
    batch_to_wire,
    mock_payload,
    remote_expert_call,
)
from uniparse.payloads import Caption, ESmiles, Latex, Reaction, TableGrid, Text
from uniparse.server import EchoServerThread

from conftest import det, one_page_doc


def store_with(detections):
    return DocumentStore([one_page_doc(detections)])


def request_for(detection_id, modality, placeholders=()):
    return ExpertRequest(
        task_id=f"doc/{detection_id}",
        modality=modality,
        doc_id="doc",
        page_index=0,
        detection_id=detection_id,
        placeholders=placeholders,
    )


def test_ocr_mock_passes_truth_text_through():
    store = store_with([det("b1", (0.1, 0.1, 0.5, 0.2), truth_text="Introduction")])
    expert = MockExpert(ExpertDescriptor("ocr"), store)
    [response] = expert.process_batch([request_for("b1", "ocr")])
    assert response.payload == Text("Introduction")


def test_formula_mock_passes_payload_through():
    d = det("f1", (0.1, 0.1, 0.3, 0.15), C.FORMULA, truth_payload=Latex("E=mc^2"))
    expert = MockExpert(ExpertDescriptor("formula"), store_with([d]))
    [response] = expert.process_batch([request_for("f1", "formula")])
    assert response.payload == Latex("E=mc^2")


def test_latency_model_arithmetic():
    # 20 base + 2/item * 8 items, no jitter -> exactly 36 ms
    model = LatencyModel(base_ms=20.0, per_item_ms=2.0, jitter_seed=0)
    ids = tuple(f"t{i}" for i in range(8))
    assert model.latency_ms(ids) == pytest.approx(20.0 + 2.0 * 8)


def test_latency_monotone_in_batch_size():
    # jitter stays strictly below one per-item cost, so the model is
    # nondecreasing in batch size even across different jitter draws
    model = LatencyModel(base_ms=10.0, per_item_ms=3.0, jitter_seed=5)
    ids = tuple(f"t{i}" for i in range(16))
    values = [model.latency_ms(ids[:n]) for n in range(1, 17)]
    assert all(b >= a for a, b in zip(values, values[1:]))
    assert values[-1] > values[0]


def test_jitter_determinism_and_attempt_reroll():
    model = LatencyModel(base_ms=10.0, per_item_ms=2.0, jitter_seed=42)
    ids = ("a", "b")
    assert model.latency_ms(ids, attempt=0) == model.latency_ms(ids, attempt=0)
    assert model.latency_ms(ids, attempt=0) != model.latency_ms(ids, attempt=1)


def test_mock_failure_is_whole_batch_and_deterministic():
    d1 = det("b1", (0.1, 0.1, 0.5, 0.2), truth_text="x")
    d2 = det("b2", (0.1, 0.3, 0.5, 0.4), truth_text="y")
    desc = ExpertDescriptor("ocr", latency=LatencyModel(jitter_seed=3), failure_rate=1.0)
    expert = MockExpert(desc, store_with([d1, d2]))
    batch = [request_for("b1", "ocr"), request_for("b2", "ocr")]
    with pytest.raises(RetryableExpertError):
        expert.process_batch(batch, attempt=0)
    with pytest.raises(RetryableExpertError):
        expert.process_batch(batch, attempt=1)


def test_mock_rejects_oversize_and_misrouted_batches():
    d = det("b1", (0.1, 0.1, 0.5, 0.2), truth_text="x")
    expert = MockExpert(ExpertDescriptor("ocr", max_batch=1), store_with([d]))
    with pytest.raises(FatalExpertError):
        expert.process_batch([request_for("b1", "ocr"), request_for("b1", "ocr")])
    with pytest.raises(FatalExpertError):
        expert.process_batch([request_for("b1", "formula")])


def test_reaction_mock_parses_triplet_text():
    d = det("r1", (0.1, 0.1, 0.5, 0.2), C.CHEMICAL_REACTION, truth_text="CCO.CC>heat>OCC")
    payload = mock_payload("reaction", d)
    assert payload == Reaction(reactants=("CCO", "CC"), conditions=("heat",), products=("OCC",))


def test_order_preservation_conformance(small_corpus):
    """Responses come back in request order for mocks and the remote adapter."""
    docs, _ = small_corpus
    store = DocumentStore(docs)
    doc = docs[0]
    by_modality: dict[str, list] = {m: [] for m in MODALITIES}
    for d in doc.iter_detections():
        from uniparse.dispatch import route

        modality = route(d.category)
        if modality:
            by_modality[modality].append(
                ExpertRequest(f"{doc.doc_id}/{d.id}", modality, doc.doc_id, d.page_index, d.id)
            )
    with EchoServerThread(docs) as srv:
        for modality, batch in sorted(by_modality.items()):
            if not batch:
                continue
            batch = batch[:16]
            mock = MockExpert(ExpertDescriptor(modality), store)
            got_mock = mock.process_batch(batch)
            assert [r.task_id for r in got_mock] == [r.task_id for r in batch]
            got_remote = remote_expert_call(srv.endpoint, modality, batch)
            assert [r.task_id for r in got_remote] == [r.task_id for r in batch]


def test_echo_server_payloads_match_mock(small_corpus):
    docs, _ = small_corpus
    store = DocumentStore(docs)
    doc = docs[0]
    requests = []
    for d in list(doc.iter_detections())[:10]:
        from uniparse.dispatch import route

        if route(d.category) == "ocr" and not _has_children(doc, d):
            requests.append(ExpertRequest(f"{doc.doc_id}/{d.id}", "ocr", doc.doc_id,
                                          d.page_index, d.id))
    assert requests
    with EchoServerThread(docs) as srv:
        remote = remote_expert_call(srv.endpoint, "ocr", requests)
    mock = MockExpert(ExpertDescriptor("ocr"), store).process_batch(requests)
    assert [r.payload for r in remote] == [r.payload for r in mock]


def _has_children(doc, d):
    from uniparse.payloads import INLINE_MARKER

    return bool(d.truth_text and INLINE_MARKER in d.truth_text)


class _StubHandler(BaseHTTPRequestHandler):
    status = 503
    body = b'{"error": "down"}'

    def log_message(self, fmt, *args):
        pass

    def do_POST(self):
        self.rfile.read(int(self.headers.get("Content-Length", 0)))
        self.send_response(self.status)
        self.send_header("Content-Length", str(len(self.body)))
        self.end_headers()
        self.wfile.write(self.body)


def _stub_server(status, body=b"{}"):
    handler = type("H", (_StubHandler,), {"status": status, "body": body})
    server = ThreadingHTTPServer(("127.0.0.1", 0), handler)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    return server


def test_remote_503_is_retryable():
    server = _stub_server(503)
    try:
        expert = RemoteExpert(f"http://127.0.0.1:{server.server_address[1]}", "ocr")
        with pytest.raises(RetryableExpertError):
            expert.process_batch([request_for("b1", "ocr")])
    finally:
        server.shutdown()


def test_remote_400_is_fatal():
    server = _stub_server(400)
    try:
        expert = RemoteExpert(f"http://127.0.0.1:{server.server_address[1]}", "ocr")
        with pytest.raises(FatalExpertError):
            expert.process_batch([request_for("b1", "ocr")])
    finally:
        server.shutdown()


def test_remote_truncated_body_is_protocol_error():
    server = _stub_server(200, body=b'{"items": [{"task_id"')
    try:
        expert = RemoteExpert(f"http://127.0.0.1:{server.server_address[1]}", "ocr")
        with pytest.raises(ProtocolError):
            expert.process_batch([request_for("b1", "ocr")])
    finally:
        server.shutdown()


def test_remote_unexpected_status_is_protocol_error():
    server = _stub_server(418)
    try:
        expert = RemoteExpert(f"http://127.0.0.1:{server.server_address[1]}", "ocr")
        with pytest.raises(ProtocolError):
            expert.process_batch([request_for("b1", "ocr")])
    finally:
        server.shutdown()


def test_timeout_is_retryable_subclass():
    assert issubclass(ExpertTimeout, RetryableExpertError)


def test_wire_request_schema_field_names():
    wire = batch_to_wire("ocsr", [request_for("m1", "ocsr")])
    assert set(wire) == {"modality", "items"}
    assert set(wire["items"][0]) == {"task_id", "detection_id", "doc_id", "page_index"}


def test_ocr_profiles_fast_and_hq():
    from uniparse.experts import OCR_PROFILES

    assert set(OCR_PROFILES) == {"fast", "hq"}
    ids = tuple(f"t{i}" for i in range(4))
    assert OCR_PROFILES["hq"].latency_ms(ids) > OCR_PROFILES["fast"].latency_ms(ids)


def test_payload_kind_strings_are_pinned():
    from uniparse.payloads import PAYLOAD_KINDS

    assert PAYLOAD_KINDS == (
        "text", "latex", "table_grid", "e_smiles", "reaction", "chart_table", "caption"
    )
    assert Text("x").kind == "text"
    assert ESmiles("C").kind == "e_smiles"
    assert Caption("c").kind == "caption"
    assert TableGrid(1, 1).kind == "table_grid"
