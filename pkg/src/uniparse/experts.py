"""Modality experts: the uniform service interface, deterministic mocks,
and the HTTP adapter speaking the batch wire schema.

Wire schema (bit-exact): POST /v1/experts/{modality}:batch with body
{"modality": ..., "items": [{"task_id", "detection_id", "doc_id",
"page_index"}]}; response {"items": [{"task_id", "payload": {"kind", ...}}]}.
HTTP 200 on success, 503 retryable, 400 fatal.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import requests

from .docmodel import Detection, DocumentIR
from .payloads import (
    INLINE_MARKER,
    Caption,
    Cell,
    ChartTable,
    ContentPayload,
    ESmiles,
    Latex,
    Reaction,
    TableGrid,
    Text,
    payload_from_dict,
    payload_to_dict,
)

MODALITIES = ("ocr", "formula", "table_structure", "ocsr", "reaction", "chart", "caption")


class ExpertError(Exception):
    pass


class RetryableExpertError(ExpertError):
    """The whole batch failed but may succeed on retry."""


class ExpertTimeout(RetryableExpertError):
    pass


class FatalExpertError(ExpertError):
    """Malformed request; retrying cannot help."""


class ProtocolError(ExpertError):
    def __init__(self, status: int, body: str):
        self.status = status
        self.body = body
        super().__init__(f"unexpected response (status {status}): {body[:200]}")


@dataclass(frozen=True)
class LatencyModel:
    base_ms: float = 10.0
    per_item_ms: float = 2.0
    jitter_seed: int = 0

    def latency_ms(self, task_ids: tuple[str, ...], attempt: int = 0) -> float:
        """base + per-item cost, plus seeded jitter in [0, per_item_ms).

        jitter_seed 0 disables jitter entirely. Jitter depends only on the
        seed, the batch composition and the attempt, never on wall time.
        """
        latency = self.base_ms + self.per_item_ms * len(task_ids)
        if self.jitter_seed:
            latency += _unit_roll(self.jitter_seed, "jitter", task_ids, attempt) * self.per_item_ms
        return latency


@dataclass(frozen=True)
class ExpertDescriptor:
    modality: str
    max_batch: int = 16
    latency: LatencyModel = field(default_factory=LatencyModel)
    replicas: int = 2
    failure_rate: float = 0.0


@dataclass(frozen=True)
class ExpertRequest:
    task_id: str
    modality: str
    doc_id: str
    page_index: int
    detection_id: str
    # Placeholder tokens for this detection's inline children, in reading
    # order; consumed by text- and table-producing experts.
    placeholders: tuple[str, ...] = ()


@dataclass(frozen=True)
class ExpertResponse:
    task_id: str
    payload: ContentPayload | None = None
    error: str | None = None


def _unit_roll(seed: int, salt: str, task_ids: tuple[str, ...], attempt: int) -> float:
    """Deterministic pseudo-random value in [0, 1), stable across machines."""
    payload = json.dumps([seed, salt, list(task_ids), attempt]).encode("utf-8")
    digest = hashlib.sha256(payload).digest()
    return int.from_bytes(digest[:8], "big") / float(1 << 64)


# Default latency models per modality, in virtual milliseconds. The two OCR
# profiles mirror a fast default engine and a slower high-quality one.
DEFAULT_LATENCIES: dict[str, LatencyModel] = {
    "ocr": LatencyModel(base_ms=12.0, per_item_ms=3.0),
    "formula": LatencyModel(base_ms=18.0, per_item_ms=6.0),
    "table_structure": LatencyModel(base_ms=25.0, per_item_ms=10.0),
    "ocsr": LatencyModel(base_ms=22.0, per_item_ms=8.0),
    "reaction": LatencyModel(base_ms=30.0, per_item_ms=12.0),
    "chart": LatencyModel(base_ms=28.0, per_item_ms=10.0),
    "caption": LatencyModel(base_ms=20.0, per_item_ms=6.0),
}

OCR_PROFILES: dict[str, LatencyModel] = {
    "fast": DEFAULT_LATENCIES["ocr"],
    "hq": LatencyModel(base_ms=45.0, per_item_ms=14.0),
}


def default_descriptors(
    max_batch: int = 16, replicas: int = 2, seed: int = 0, failure_rate: float = 0.0
) -> dict[str, ExpertDescriptor]:
    out = {}
    for modality in MODALITIES:
        lat = DEFAULT_LATENCIES[modality]
        out[modality] = ExpertDescriptor(
            modality=modality,
            max_batch=max_batch,
            latency=LatencyModel(lat.base_ms, lat.per_item_ms, jitter_seed=seed),
            replicas=replicas,
            failure_rate=failure_rate,
        )
    return out


class DocumentStore:
    """Registry giving experts access to ground-truth channels by reference."""

    def __init__(self, docs: list[DocumentIR] | None = None):
        self._docs: dict[str, DocumentIR] = {}
        self._detections: dict[tuple[str, str], Detection] = {}
        for doc in docs or ():
            self.add(doc)

    def add(self, doc: DocumentIR) -> None:
        self._docs[doc.doc_id] = doc
        for det in doc.iter_detections():
            self._detections[(doc.doc_id, det.id)] = det

    def document(self, doc_id: str) -> DocumentIR:
        return self._docs[doc_id]

    def doc_ids(self) -> list[str]:
        return sorted(self._docs)

    def detection(self, doc_id: str, detection_id: str) -> Detection:
        try:
            return self._detections[(doc_id, detection_id)]
        except KeyError:
            raise FatalExpertError(f"unknown detection {doc_id}/{detection_id}") from None


class MockExpert:
    """Deterministic stand-in for one modality service.

    Returns the detection's ground-truth payload (or a fixed transform of its
    ground-truth text) and simulates latency from the descriptor's model.
    Failures, when enabled, hit whole batches and re-roll per attempt.
    """

    def __init__(self, descriptor: ExpertDescriptor, store: DocumentStore):
        self.descriptor = descriptor
        self.store = store

    def batch_latency_ms(self, batch: list[ExpertRequest], attempt: int = 0) -> float:
        return self.descriptor.latency.latency_ms(tuple(r.task_id for r in batch), attempt)

    def process_batch(self, batch: list[ExpertRequest], attempt: int = 0) -> list[ExpertResponse]:
        if len(batch) > self.descriptor.max_batch:
            raise FatalExpertError(
                f"batch of {len(batch)} exceeds max_batch {self.descriptor.max_batch}"
            )
        for request in batch:
            if request.modality != self.descriptor.modality:
                raise FatalExpertError(
                    f"request {request.task_id} routed to wrong expert "
                    f"({request.modality} != {self.descriptor.modality})"
                )
        if self.descriptor.failure_rate > 0.0:
            roll = _unit_roll(
                self.descriptor.latency.jitter_seed,
                "fail",
                tuple(r.task_id for r in batch),
                attempt,
            )
            if roll < self.descriptor.failure_rate:
                raise RetryableExpertError("injected batch failure")
        return [
            ExpertResponse(task_id=r.task_id, payload=self._resolve(r)) for r in batch
        ]

    def _resolve(self, request: ExpertRequest) -> ContentPayload:
        det = self.store.detection(request.doc_id, request.detection_id)
        return mock_payload(self.descriptor.modality, det, request.placeholders)


def mock_payload(
    modality: str, det: Detection, placeholders: tuple[str, ...] = ()
) -> ContentPayload:
    """What the mock expert answers for one detection."""
    text = det.truth_text or ""
    payload = det.truth_payload
    if modality == "ocr":
        if isinstance(payload, Text):
            text = payload.value
        return Text(substitute_markers(text, placeholders))
    if modality == "formula":
        if isinstance(payload, Latex):
            return payload
        return Latex(text)
    if modality == "ocsr":
        if isinstance(payload, ESmiles):
            return payload
        return ESmiles(text)
    if modality == "reaction":
        if isinstance(payload, Reaction):
            return payload
        # "A.B>cond>C" reads as a reactant>condition>product triplet.
        parts = text.split(">")
        if len(parts) == 3:
            return Reaction(
                reactants=tuple(p for p in parts[0].split(".") if p),
                conditions=tuple(p for p in parts[1].split(".") if p),
                products=tuple(p for p in parts[2].split(".") if p),
            )
        return Reaction(reactants=(text,), conditions=(), products=(text,))
    if modality == "chart":
        if isinstance(payload, ChartTable):
            return payload
        if isinstance(payload, TableGrid):
            return ChartTable(grid=payload)
        return ChartTable(grid=TableGrid(rows=1, cols=1, cells=(Cell(0, 0, content=(text,)),)))
    if modality == "caption":
        if isinstance(payload, Caption):
            return payload
        return Caption(text)
    if modality == "table_structure":
        if isinstance(payload, TableGrid):
            return _substitute_grid_markers(payload, placeholders)
        return TableGrid(rows=1, cols=1, cells=(Cell(0, 0, content=(text,)),))
    raise FatalExpertError(f"unknown modality {modality!r}")


def substitute_markers(text: str, placeholders: tuple[str, ...]) -> str:
    """Replace inline markers with placeholder tokens, in order.

    Extra markers (no token left) are dropped; extra tokens (no marker left)
    are appended, space-separated, so no inline element is ever lost.
    """
    out: list[str] = []
    remaining = list(placeholders)
    for ch in text:
        if ch == INLINE_MARKER:
            out.append(remaining.pop(0) if remaining else "")
        else:
            out.append(ch)
    result = "".join(out)
    for token in remaining:
        result = f"{result} {token}" if result else token
    return result


def _substitute_grid_markers(grid: TableGrid, placeholders: tuple[str, ...]) -> TableGrid:
    """Markers inside cells map to tokens in row-major cell scan order."""
    remaining = list(placeholders)
    new_cells = []
    for cell in sorted(grid.cells, key=lambda c: (c.row, c.col)):
        content = []
        for run in cell.content:
            if INLINE_MARKER not in run:
                content.append(run)
                continue
            parts = []
            for ch in run:
                if ch == INLINE_MARKER:
                    parts.append(remaining.pop(0) if remaining else "")
                else:
                    parts.append(ch)
            content.append("".join(parts))
        new_cells.append(
            Cell(cell.row, cell.col, cell.row_span, cell.col_span, tuple(content))
        )
    new_cells.sort(key=lambda c: (c.row, c.col))
    return TableGrid(rows=grid.rows, cols=grid.cols, cells=tuple(new_cells))


# ---------------------------------------------------------------------------
# Wire adapter
# ---------------------------------------------------------------------------


def batch_to_wire(modality: str, batch: list[ExpertRequest]) -> dict:
    return {
        "modality": modality,
        "items": [
            {
                "task_id": r.task_id,
                "detection_id": r.detection_id,
                "doc_id": r.doc_id,
                "page_index": r.page_index,
            }
            for r in batch
        ],
    }


def responses_from_wire(data: dict) -> list[ExpertResponse]:
    items = data.get("items")
    if not isinstance(items, list):
        raise ValueError("response body missing items[]")
    out = []
    for item in items:
        out.append(
            ExpertResponse(
                task_id=str(item["task_id"]),
                payload=payload_from_dict(item["payload"]),
            )
        )
    return out


def responses_to_wire(responses: list[ExpertResponse]) -> dict:
    return {
        "items": [
            {"task_id": r.task_id, "payload": payload_to_dict(r.payload)} for r in responses
        ]
    }


class RemoteExpert:
    """Speaks the batch wire schema against a remote expert service."""

    def __init__(self, endpoint: str, modality: str, timeout_s: float = 10.0, max_batch: int = 16):
        self.endpoint = endpoint.rstrip("/")
        self.modality = modality
        self.timeout_s = timeout_s
        self.max_batch = max_batch
        self._session = requests.Session()

    def process_batch(self, batch: list[ExpertRequest], attempt: int = 0) -> list[ExpertResponse]:
        url = f"{self.endpoint}/v1/experts/{self.modality}:batch"
        try:
            response = self._session.post(
                url, json=batch_to_wire(self.modality, batch), timeout=self.timeout_s
            )
        except requests.Timeout as exc:
            raise ExpertTimeout(str(exc)) from exc
        except requests.RequestException as exc:
            raise RetryableExpertError(str(exc)) from exc
        if response.status_code == 503:
            raise RetryableExpertError("service unavailable")
        if response.status_code == 400:
            raise FatalExpertError(response.text)
        if response.status_code != 200:
            raise ProtocolError(response.status_code, response.text)
        try:
            return responses_from_wire(response.json())
        except (ValueError, KeyError, TypeError) as exc:
            raise ProtocolError(response.status_code, response.text) from exc


def remote_expert_call(
    endpoint: str, modality: str, batch: list[ExpertRequest], timeout_s: float = 10.0
) -> list[ExpertResponse]:
    return RemoteExpert(endpoint, modality, timeout_s=timeout_s).process_batch(batch)
