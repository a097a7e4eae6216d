"""End-to-end document processing assembled from the stage primitives.

This is the synchronous path used by the CLI and by tests; the runtime module
drives the same primitives under a simulated clock for benchmarking.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .config import EngineConfig
from .consolidate import FlowItem, Partner, SectionNode, consolidate
from .dispatch import (
    Batch,
    BatchReason,
    DispatchPlan,
    GatherResult,
    Task,
    TaskFailure,
    gather,
    plan_document,
)
from .docmodel import DocumentIR, hull_of
from .experts import (
    DocumentStore,
    ExpertDescriptor,
    ExpertResponse,
    FatalExpertError,
    MockExpert,
    RemoteExpert,
    RetryableExpertError,
    default_descriptors,
)
from .formats import ParsedDocument
from .layout import LayoutTree, RelationKind, build_page_tree, relation_for
from .ordering import OrderUnit, order_units
from .payloads import ContentPayload


class StrictModeFailure(Exception):
    def __init__(self, doc_id: str, failed: list[str]):
        self.doc_id = doc_id
        self.failed = failed
        super().__init__(f"{doc_id}: {len(failed)} task(s) failed fatally")


@dataclass
class PageAnalysis:
    tree: LayoutTree
    units: list[OrderUnit]


def analyze_pages(doc: DocumentIR, cfg: EngineConfig | None = None) -> list[PageAnalysis]:
    """Layout tree and ordered units for every page."""
    cfg = cfg or EngineConfig()
    out = []
    for page in doc.pages:
        tree = build_page_tree(page.page_index, list(page.detections), cfg)
        out.append(PageAnalysis(tree=tree, units=order_units(tree, cfg)))
    return out


class MockBackend:
    """Runs batches against in-process mock experts."""

    def __init__(self, store: DocumentStore, descriptors: dict[str, ExpertDescriptor] | None = None):
        self.store = store
        self.descriptors = descriptors or default_descriptors()
        self._experts = {
            modality: MockExpert(desc, store) for modality, desc in self.descriptors.items()
        }

    def swap_descriptors(self, descriptors: dict[str, ExpertDescriptor]) -> None:
        self.descriptors = descriptors
        self._experts = {
            modality: MockExpert(desc, self.store) for modality, desc in descriptors.items()
        }

    def process(self, modality: str, batch: list[Task], attempt: int = 0) -> list[ExpertResponse]:
        expert = self._experts[modality]
        return expert.process_batch([t.to_request() for t in batch], attempt=attempt)


class RemoteBackend:
    """Runs batches against a remote service speaking the wire schema."""

    def __init__(self, endpoint: str, timeout_s: float = 10.0):
        self.endpoint = endpoint
        self.timeout_s = timeout_s
        self._experts: dict[str, RemoteExpert] = {}

    def process(self, modality: str, batch: list[Task], attempt: int = 0) -> list[ExpertResponse]:
        if modality not in self._experts:
            self._experts[modality] = RemoteExpert(self.endpoint, modality, self.timeout_s)
        return self._experts[modality].process_batch(
            [t.to_request() for t in batch], attempt=attempt
        )


def form_batches(
    tasks: list[Task], max_batch: int, caps: dict[str, int] | None = None
) -> list[Batch]:
    """FIFO per-modality batches; the trailing partial flushes as a timeout.

    The effective batch size per modality never exceeds the serving expert's
    own max_batch cap.
    """
    by_modality: dict[str, list[Task]] = {}
    for task in tasks:
        by_modality.setdefault(task.modality, []).append(task)
    batches = []
    for modality in sorted(by_modality):
        queue = by_modality[modality]
        size = min(max_batch, caps.get(modality, max_batch)) if caps else max_batch
        size = max(size, 1)
        for i in range(0, len(queue), size):
            part = queue[i : i + size]
            reason = BatchReason.FULL if len(part) == size else BatchReason.TIMEOUT
            batches.append(Batch(modality, part, formed_at=0.0, reason=reason))
    return batches


def backend_batch_caps(backend) -> dict[str, int]:
    descriptors = getattr(backend, "descriptors", None)
    if not descriptors:
        return {}
    return {modality: d.max_batch for modality, d in descriptors.items()}


def run_batches(
    batches: list[Batch],
    backend,
    max_retries: int = 3,
) -> dict[str, ExpertResponse | TaskFailure]:
    """Execute batches with whole-batch retry on retryable errors."""
    outcomes: dict[str, ExpertResponse | TaskFailure] = {}
    for batch in batches:
        attempt = 0
        while True:
            try:
                responses = backend.process(batch.modality, batch.tasks, attempt=attempt)
            except RetryableExpertError as exc:
                if attempt < max_retries:
                    attempt += 1
                    continue
                for task in batch.tasks:
                    outcomes[task.task_id] = TaskFailure(
                        task.task_id, task.modality, task.detection_id, str(exc)
                    )
                break
            except FatalExpertError as exc:
                for task in batch.tasks:
                    outcomes[task.task_id] = TaskFailure(
                        task.task_id, task.modality, task.detection_id, str(exc)
                    )
                break
            else:
                for response in responses:
                    outcomes[response.task_id] = response
                break
    return outcomes


def build_flow_items(
    doc: DocumentIR,
    analyses: list[PageAnalysis],
    gathered: GatherResult,
) -> list[FlowItem]:
    """Ordered FlowItems across pages from resolved unit content."""
    detections = doc.detection_index()
    items: list[FlowItem] = []
    for analysis in analyses:
        nodes = {n.id: n for n in analysis.tree.iter_nodes()}
        for unit in analysis.units:
            anchor_id = unit.unit_id
            anchor = nodes[anchor_id]
            partners = []
            for member_id in unit.member_ids:
                if member_id == anchor_id:
                    continue
                member = nodes[member_id]
                partners.append(
                    Partner(
                        relation=_relation_between(anchor, member),
                        category=member.category,
                        detection_id=member_id,
                        payload=gathered.resolved.get(member_id),
                    )
                )
            items.append(
                FlowItem(
                    item_id=anchor_id,
                    page_index=analysis.tree.page_index,
                    category=anchor.category,
                    box=hull_of(unit.boxes),
                    payload=gathered.resolved.get(anchor_id),
                    partners=tuple(partners),
                    group_hint=detections[anchor_id].group_hint,
                )
            )
    return items


def _relation_between(anchor, member) -> RelationKind:
    for kind, other in anchor.group_links:
        if other == member.id:
            return kind
    from .docmodel import PARTNER_CATEGORIES

    if member.category in PARTNER_CATEGORIES:
        return relation_for(member.category, anchor.category)
    return RelationKind.CAPTION


@dataclass
class ProcessResult:
    parsed: ParsedDocument
    analyses: list[PageAnalysis]
    plan: DispatchPlan
    gathered: GatherResult


def process_document(
    doc: DocumentIR,
    cfg: EngineConfig | None = None,
    backend=None,
    only_modality: str | None = None,
    strict: bool = False,
) -> ProcessResult:
    """The full pipeline for one document with a synchronous backend."""
    cfg = cfg or EngineConfig()
    if backend is None:
        backend = MockBackend(DocumentStore([doc]))
    analyses = analyze_pages(doc, cfg)
    plan = plan_document(doc, [a.tree for a in analyses], cfg, only_modality=only_modality)
    batches = form_batches(plan.tasks, cfg.max_batch, backend_batch_caps(backend))
    outcomes = run_batches(batches, backend, max_retries=cfg.max_retries)
    gathered = gather(plan, outcomes)
    items = build_flow_items(doc, analyses, gathered)
    root = consolidate(items, doc.outline, cfg, doc.language_tag)
    parsed = ParsedDocument(
        doc_id=doc.doc_id,
        root=root,
        language_tag=doc.language_tag,
        tokens_emitted=plan.tokens_emitted,
        tokens_resolved=gathered.tokens_resolved,
        tokens_failed=gathered.tokens_failed,
        failed_tasks=tuple(sorted(f.task_id for f in gathered.failures)),
    )
    if strict and parsed.failed_tasks:
        raise StrictModeFailure(doc.doc_id, list(parsed.failed_tasks))
    return ProcessResult(parsed=parsed, analyses=analyses, plan=plan, gathered=gathered)
