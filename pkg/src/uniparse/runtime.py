"""Pipeline execution engine and simulator.

A virtual (discrete-event) clock drives three execution modes over the same
document stream:

- sequential: every stage strictly serial, one document at a time;
- parallel gather: per-document fan-out to the expert pool, then a join;
- pipeline parallel: all stages overlap, documents stream through bounded
  queues, experts are fed by greedy batch stacking and dynamic balancing.

Document outputs are byte-identical across modes and worker counts (content
is pure); only the schedule, and therefore the metrics, differ. With failure
injection enabled, batching composition differs between modes, so tasks that
exhaust retries can diverge; keep failure_rate at 0 when comparing outputs.
"""

from __future__ import annotations

import heapq
import time
from collections import deque
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Mapping

from .config import EngineConfig
from .consolidate import consolidate
from .dispatch import Batch, BatchReason, QueueState, TaskFailure, batch_stack, gather
from .docmodel import DocumentIR
from .engine import (
    MockBackend,
    StrictModeFailure,
    analyze_pages,
    build_flow_items,
    form_batches,
    plan_document,
)
from .experts import DocumentStore, ExpertDescriptor, RetryableExpertError, default_descriptors
from .formats import ParsedDocument

EXPERT_STAGE = "experts"
CPU_STAGES = ("preprocess", "layout", "dispatch", "gather", "consolidate", "format")


class Mode(Enum):
    SEQUENTIAL = "seq"
    PARALLEL_GATHER = "par"
    PIPELINE_PARALLEL = "pipe"


@dataclass
class PipelineConfig:
    mode: Mode = Mode.PIPELINE_PARALLEL
    engine: EngineConfig = field(default_factory=EngineConfig)
    experts: dict[str, ExpertDescriptor] | None = None
    seed: int = 0
    strict: bool = False
    # (admitted-doc index, descriptor table): table swaps in for documents
    # admitted at or after that index; never mid-document.
    descriptor_updates: tuple[tuple[int, dict[str, ExpertDescriptor]], ...] = ()

    def resolved_experts(self) -> dict[str, ExpertDescriptor]:
        if self.experts is not None:
            return self.experts
        return default_descriptors(max_batch=self.engine.max_batch, seed=self.seed)


@dataclass
class StageMetrics:
    stage: str
    busy_ms: float
    idle_ms: float
    bubble_fraction: float


@dataclass
class ExpertStageMetrics:
    modality: str
    busy_ms: float
    batches: int
    tasks: int
    retries: int
    utilization: float


@dataclass
class PipelineMetrics:
    mode: str
    workers: int
    wall_ms: float
    docs: int
    pages: int
    throughput_pps: float
    bubble_fraction: float  # expert-stage idle fraction
    per_stage: list[StageMetrics]
    per_expert: list[ExpertStageMetrics]
    queue_depth_hist: dict[str, dict[int, int]]
    max_queue_depth: dict[str, int]
    doc_latency_ms: dict[str, float]
    tasks_dispatched: int
    tasks_completed: int
    tasks_failed: int
    retries: int

    def to_report(self) -> dict:
        return {
            "mode": self.mode,
            "workers": self.workers,
            "wall_ms": round(self.wall_ms, 6),
            "docs": self.docs,
            "pages": self.pages,
            "throughput_pps": round(self.throughput_pps, 6),
            "bubble_fraction": round(self.bubble_fraction, 6),
            "per_stage": [
                {
                    "stage": s.stage,
                    "busy_ms": round(s.busy_ms, 6),
                    "idle_ms": round(s.idle_ms, 6),
                    "bubble_fraction": round(s.bubble_fraction, 6),
                }
                for s in self.per_stage
            ],
            "per_expert": [
                {
                    "modality": e.modality,
                    "busy_ms": round(e.busy_ms, 6),
                    "batches": e.batches,
                    "tasks": e.tasks,
                    "retries": e.retries,
                    "utilization": round(e.utilization, 6),
                }
                for e in self.per_expert
            ],
            "max_queue_depth": dict(sorted(self.max_queue_depth.items())),
            "tasks": {
                "dispatched": self.tasks_dispatched,
                "completed": self.tasks_completed,
                "failed": self.tasks_failed,
                "retries": self.retries,
            },
        }


def balance(
    queue_depths: Mapping[str, int],
    replicas: Mapping[str, int],
    in_flight: Mapping[str, int] | None = None,
    serves: set[str] | None = None,
) -> str | None:
    """Pick the modality with the greatest depth/replicas ratio.

    Ties go to the lexicographically first modality; queues whose replica cap
    is exhausted are skipped.
    """
    best_ratio = -1.0
    best = None
    for modality in sorted(queue_depths):
        depth = queue_depths[modality]
        if depth <= 0:
            continue
        if serves is not None and modality not in serves:
            continue
        cap = replicas.get(modality, 1)
        if in_flight is not None and in_flight.get(modality, 0) >= cap:
            continue
        ratio = depth / cap
        if ratio > best_ratio:
            best_ratio = ratio
            best = modality
    return best


# ---------------------------------------------------------------------------
# Discrete-event core
# ---------------------------------------------------------------------------


class _Sim:
    def __init__(self):
        self.now = 0.0
        self._heap: list[tuple[float, int, Callable[[], None]]] = []
        self._seq = 0

    def at(self, t: float, fn: Callable[[], None]) -> None:
        heapq.heappush(self._heap, (max(t, self.now), self._seq, fn))
        self._seq += 1

    def after(self, dt: float, fn: Callable[[], None]) -> None:
        self.at(self.now + dt, fn)

    def run(self) -> None:
        while self._heap:
            t, _seq, fn = heapq.heappop(self._heap)
            self.now = t
            fn()


class _DocJob:
    def __init__(self, index: int, doc: DocumentIR):
        self.index = index
        self.doc = doc
        self.analyses = None
        self.plan = None
        self.outcomes: dict = {}
        self.pending = 0
        self.dispatch_done = False
        self.gathering = False
        self.parsed: ParsedDocument | None = None
        self.done_at = 0.0


class _Collector:
    def __init__(self, workers: int):
        self.workers = workers
        self.stage_busy: dict[str, float] = {s: 0.0 for s in CPU_STAGES}
        self.worker_busy: list[float] = [0.0] * workers
        self.expert_busy: dict[str, float] = {}
        self.expert_batches: dict[str, int] = {}
        self.expert_tasks: dict[str, int] = {}
        self.expert_retries: dict[str, int] = {}
        self.queue_hist: dict[str, dict[int, int]] = {}
        self.max_depth: dict[str, int] = {}
        self.doc_latency: dict[str, float] = {}
        self.tasks_dispatched = 0
        self.tasks_completed = 0
        self.tasks_failed = 0
        self.retries = 0

    def charge_stage(self, stage: str, ms: float) -> None:
        self.stage_busy[stage] = self.stage_busy.get(stage, 0.0) + ms

    def charge_expert(self, worker: int, modality: str, ms: float, tasks: int) -> None:
        self.worker_busy[worker] += ms
        self.expert_busy[modality] = self.expert_busy.get(modality, 0.0) + ms
        self.expert_batches[modality] = self.expert_batches.get(modality, 0) + 1
        self.expert_tasks[modality] = self.expert_tasks.get(modality, 0) + tasks

    def record_depth(self, modality: str, depth: int) -> None:
        hist = self.queue_hist.setdefault(modality, {})
        hist[depth] = hist.get(depth, 0) + 1
        if depth > self.max_depth.get(modality, 0):
            self.max_depth[modality] = depth

    def finish(self, mode: Mode, wall_ms: float, docs: int, pages: int) -> PipelineMetrics:
        # A zero-cost run has no wall time and, by definition, no idle time.
        degenerate = wall_ms <= 0.0
        wall = max(wall_ms, 1e-9)
        per_stage = []
        for stage in CPU_STAGES:
            busy = self.stage_busy.get(stage, 0.0)
            idle = 0.0 if degenerate else max(wall - busy, 0.0)
            per_stage.append(StageMetrics(stage, busy, idle, idle / wall if not degenerate else 0.0))
        expert_capacity = wall * self.workers
        expert_total = sum(self.worker_busy)
        expert_idle = 0.0 if degenerate else max(expert_capacity - expert_total, 0.0)
        bubble = 0.0 if degenerate else expert_idle / expert_capacity
        per_stage.append(StageMetrics(EXPERT_STAGE, expert_total, expert_idle, bubble))
        per_expert = [
            ExpertStageMetrics(
                modality=m,
                busy_ms=self.expert_busy[m],
                batches=self.expert_batches.get(m, 0),
                tasks=self.expert_tasks.get(m, 0),
                retries=self.expert_retries.get(m, 0),
                utilization=self.expert_busy[m] / wall,
            )
            for m in sorted(self.expert_busy)
        ]
        return PipelineMetrics(
            mode=mode.value,
            workers=self.workers,
            wall_ms=wall_ms,
            docs=docs,
            pages=pages,
            throughput_pps=0.0 if degenerate else pages / (wall / 1000.0),
            bubble_fraction=bubble,
            per_stage=per_stage,
            per_expert=per_expert,
            queue_depth_hist=self.queue_hist,
            max_queue_depth=self.max_depth,
            doc_latency_ms=self.doc_latency,
            tasks_dispatched=self.tasks_dispatched,
            tasks_completed=self.tasks_completed,
            tasks_failed=self.tasks_failed,
            retries=self.retries,
        )


class _ExpertPool:
    """Shared worker pool with per-modality replica caps and retry logic."""

    def __init__(self, sim, config: PipelineConfig, backend: MockBackend, collector: _Collector,
                 on_task_done: Callable):
        self.sim = sim
        self.config = config
        self.backend = backend
        self.collector = collector
        self.on_task_done = on_task_done
        self.descriptors = config.resolved_experts()
        self.free: list[int] = list(range(config.engine.workers))
        self.in_flight: dict[str, int] = {m: 0 for m in self.descriptors}
        self.ready: dict[str, deque] = {m: deque() for m in self.descriptors}
        # invoked whenever a batch leaves the ready queue (backpressure relief)
        self.on_drain: Callable[[], None] | None = None

    def ready_tasks(self, modality: str) -> int:
        return sum(len(b.tasks) for b in self.ready.get(modality, ()))

    def swap_descriptors(self, table: dict[str, ExpertDescriptor]) -> None:
        # Between-documents hot swap; the modality set must stay the same.
        self.descriptors = table
        self.backend.swap_descriptors(table)

    def offer(self, batch: Batch) -> None:
        self.ready[batch.modality].append(batch)
        self.kick()

    def kick(self) -> None:
        while self.free:
            depths = {m: len(q) for m, q in self.ready.items()}
            modality = balance(depths, {m: d.replicas for m, d in self.descriptors.items()},
                               self.in_flight)
            if modality is None:
                return
            worker = heapq.heappop(self.free)
            batch = self.ready[modality].popleft()
            self.in_flight[modality] += 1
            descriptor = self.descriptors[modality]
            task_ids = tuple(t.task_id for t in batch.tasks)
            latency = descriptor.latency.latency_ms(task_ids, batch.attempt)
            self.collector.charge_expert(worker, modality, latency, len(batch.tasks))
            self.sim.after(latency, lambda w=worker, b=batch: self._complete(w, b))
            if self.on_drain is not None:
                self.on_drain()

    def _complete(self, worker: int, batch: Batch) -> None:
        heapq.heappush(self.free, worker)
        self.in_flight[batch.modality] -= 1
        try:
            responses = self.backend.process(batch.modality, batch.tasks, attempt=batch.attempt)
        except RetryableExpertError as exc:
            if batch.attempt < self.config.engine.max_retries:
                self.collector.retries += 1
                self.collector.expert_retries[batch.modality] = (
                    self.collector.expert_retries.get(batch.modality, 0) + 1
                )
                retry = Batch(batch.modality, batch.tasks, self.sim.now, batch.reason,
                              attempt=batch.attempt + 1)
                backoff = self.config.engine.backoff_ms * (2 ** batch.attempt)
                self.sim.after(backoff, lambda b=retry: self.offer(b))
                self.kick()
                return
            for task in batch.tasks:
                self.collector.tasks_failed += 1
                self.on_task_done(
                    task, TaskFailure(task.task_id, task.modality, task.detection_id, str(exc))
                )
        else:
            by_id = {r.task_id: r for r in responses}
            for task in batch.tasks:
                self.collector.tasks_completed += 1
                self.on_task_done(task, by_id[task.task_id])
        self.kick()

    def idle(self) -> bool:
        return all(not q for q in self.ready.values()) and len(self.free) == self.config.engine.workers


# ---------------------------------------------------------------------------
# run_pipeline
# ---------------------------------------------------------------------------


def run_pipeline(
    docs: list[DocumentIR], config: PipelineConfig
) -> tuple[list[ParsedDocument], PipelineMetrics]:
    """Run the document stream under the configured mode and virtual clock."""
    store = DocumentStore(docs)
    backend = MockBackend(store, config.resolved_experts())
    collector = _Collector(config.engine.workers)
    sim = _Sim()
    jobs = [_DocJob(i, doc) for i, doc in enumerate(docs)]

    if config.mode is Mode.SEQUENTIAL:
        _drive_sequential(sim, jobs, config, backend, collector)
    elif config.mode is Mode.PARALLEL_GATHER:
        _drive_parallel_gather(sim, jobs, config, backend, collector)
    else:
        _drive_pipeline(sim, jobs, config, backend, collector)
    sim.run()

    wall = sim.now
    pages = sum(len(j.doc.pages) for j in jobs)
    metrics = collector.finish(config.mode, wall, len(jobs), pages)
    outputs = []
    failed_doc = None
    for job in jobs:
        if job.parsed is None:
            raise RuntimeError(f"document {job.doc.doc_id} never completed")
        outputs.append(job.parsed)
        if job.parsed.failed_tasks and failed_doc is None:
            failed_doc = job.parsed
    if config.strict and failed_doc is not None:
        raise StrictModeFailure(failed_doc.doc_id, list(failed_doc.failed_tasks))
    return outputs, metrics


def _finish_job(job: _DocJob, config: PipelineConfig, collector: _Collector, now: float) -> None:
    gathered = gather(job.plan, job.outcomes)
    items = build_flow_items(job.doc, job.analyses, gathered)
    root = consolidate(items, job.doc.outline, config.engine, job.doc.language_tag)
    job.parsed = ParsedDocument(
        doc_id=job.doc.doc_id,
        root=root,
        language_tag=job.doc.language_tag,
        tokens_emitted=job.plan.tokens_emitted,
        tokens_resolved=gathered.tokens_resolved,
        tokens_failed=gathered.tokens_failed,
        failed_tasks=tuple(sorted(f.task_id for f in gathered.failures)),
    )
    job.done_at = now
    collector.doc_latency[job.doc.doc_id] = now


def _prepare(job: _DocJob, config: PipelineConfig) -> None:
    job.analyses = analyze_pages(job.doc, config.engine)
    job.plan = plan_document(job.doc, [a.tree for a in job.analyses], config.engine)
    job.pending = len(job.plan.tasks)


def _cpu_costs(job: _DocJob, engine: EngineConfig) -> dict[str, float]:
    pages = max(len(job.doc.pages), 1)
    tasks = len(job.plan.tasks) if job.plan else 0
    return {
        "preprocess": engine.preprocess_ms_per_page * pages,
        "layout": engine.layout_ms_per_page * pages,
        "dispatch": engine.dispatch_ms_per_task * tasks,
        "gather": engine.gather_ms_per_doc + engine.gather_ms_per_task * tasks,
        "consolidate": engine.consolidate_ms_per_doc,
        "format": engine.format_ms_per_doc,
    }


def _drive_sequential(sim, jobs, config, backend, collector) -> None:
    """One logical worker walks every stage of every document in order."""
    engine = config.engine
    queue = deque(jobs)

    def next_doc() -> None:
        if not queue:
            return
        job = queue.popleft()
        _prepare(job, config)
        costs = _cpu_costs(job, engine)
        pre = costs["preprocess"] + costs["layout"] + costs["dispatch"]
        collector.charge_stage("preprocess", costs["preprocess"])
        collector.charge_stage("layout", costs["layout"])
        collector.charge_stage("dispatch", costs["dispatch"])
        collector.tasks_dispatched += len(job.plan.tasks)
        batches = deque(form_batches(job.plan.tasks, engine.max_batch))
        sim.after(pre, lambda: run_batch(job, batches, 0))

    def run_batch(job, batches, attempt: int) -> None:
        if not batches:
            finish(job)
            return
        batch = batches[0]
        descriptor = config.resolved_experts()[batch.modality]
        latency = descriptor.latency.latency_ms(tuple(t.task_id for t in batch.tasks), attempt)
        collector.charge_expert(0, batch.modality, latency, len(batch.tasks))

        def complete() -> None:
            try:
                responses = backend.process(batch.modality, batch.tasks, attempt=attempt)
            except RetryableExpertError as exc:
                if attempt < engine.max_retries:
                    collector.retries += 1
                    collector.expert_retries[batch.modality] = (
                        collector.expert_retries.get(batch.modality, 0) + 1
                    )
                    backoff = engine.backoff_ms * (2 ** attempt)
                    sim.after(backoff, lambda: run_batch(job, batches, attempt + 1))
                    return
                for task in batch.tasks:
                    collector.tasks_failed += 1
                    job.outcomes[task.task_id] = TaskFailure(
                        task.task_id, task.modality, task.detection_id, str(exc)
                    )
            else:
                for r in responses:
                    collector.tasks_completed += 1
                    job.outcomes[r.task_id] = r
            batches.popleft()
            run_batch(job, batches, 0)

        sim.after(latency, complete)

    def finish(job) -> None:
        costs = _cpu_costs(job, engine)
        post = costs["gather"] + costs["consolidate"] + costs["format"]
        collector.charge_stage("gather", costs["gather"])
        collector.charge_stage("consolidate", costs["consolidate"])
        collector.charge_stage("format", costs["format"])

        def done() -> None:
            _finish_job(job, config, collector, sim.now)
            next_doc()

        sim.after(post, done)

    sim.at(0.0, next_doc)


def _drive_parallel_gather(sim, jobs, config, backend, collector) -> None:
    """Per-document fan-out to the worker pool, join, then post-processing."""
    engine = config.engine
    queue = deque(jobs)
    current: dict = {}

    def on_task_done(task, outcome) -> None:
        job = current["job"]
        job.outcomes[task.task_id] = outcome
        job.pending -= 1
        if job.pending == 0:
            finish(job)

    pool = _ExpertPool(sim, config, backend, collector, on_task_done)

    def next_doc() -> None:
        if not queue:
            return
        job = queue.popleft()
        current["job"] = job
        _prepare(job, config)
        costs = _cpu_costs(job, engine)
        pre = costs["preprocess"] + costs["layout"] + costs["dispatch"]
        collector.charge_stage("preprocess", costs["preprocess"])
        collector.charge_stage("layout", costs["layout"])
        collector.charge_stage("dispatch", costs["dispatch"])
        collector.tasks_dispatched += len(job.plan.tasks)

        def fan_out() -> None:
            if not job.plan.tasks:
                finish(job)
                return
            for batch in form_batches(job.plan.tasks, engine.max_batch):
                pool.offer(batch)

        sim.after(pre, fan_out)

    def finish(job) -> None:
        costs = _cpu_costs(job, engine)
        post = costs["gather"] + costs["consolidate"] + costs["format"]
        collector.charge_stage("gather", costs["gather"])
        collector.charge_stage("consolidate", costs["consolidate"])
        collector.charge_stage("format", costs["format"])

        def done() -> None:
            _finish_job(job, config, collector, sim.now)
            next_doc()

        sim.after(post, done)

    sim.at(0.0, next_doc)


class _StageWorker:
    """Single-threaded stage with a FIFO of jobs and a modeled cost."""

    def __init__(self, sim, collector, name: str, cost_fn, work_fn, done_fn):
        self.sim = sim
        self.collector = collector
        self.name = name
        self.cost_fn = cost_fn
        self.work_fn = work_fn
        self.done_fn = done_fn
        self.queue: deque = deque()
        self.busy = False

    def submit(self, job) -> None:
        self.queue.append(job)
        self._try_next()

    def _try_next(self) -> None:
        if self.busy or not self.queue:
            return
        job = self.queue.popleft()
        self.busy = True
        if self.work_fn is not None:
            self.work_fn(job)
        cost = self.cost_fn(job)
        self.collector.charge_stage(self.name, cost)

        def complete() -> None:
            self.busy = False
            self.done_fn(job)
            self._try_next()

        self.sim.after(cost, complete)


def _drive_pipeline(sim, jobs, config, backend, collector) -> None:
    """All stages overlap; documents stream through bounded queues."""
    engine = config.engine
    effective_batch = min(engine.max_batch, engine.queue_capacity)
    descriptors = config.resolved_experts()
    jobs_by_doc = {j.doc.doc_id: j for j in jobs}
    admission = deque(jobs)
    state = {"in_flight": 0, "admitted": 0}
    updates = deque(sorted(config.descriptor_updates))

    task_queues: dict[str, QueueState] = {m: QueueState(m) for m in descriptors}
    timer_armed: dict[str, float] = {}
    waiting_dispatch: deque = deque()

    def on_task_done(task, outcome) -> None:
        job = jobs_by_doc[task.doc_id]
        job.outcomes[task.task_id] = outcome
        job.pending -= 1
        maybe_gather(job)

    pool = _ExpertPool(sim, config, backend, collector, on_task_done)

    def maybe_gather(job) -> None:
        if job.dispatch_done and job.pending == 0 and not job.gathering:
            job.gathering = True
            gather_worker.submit(job)

    pool.on_drain = lambda: wake_dispatchers()

    # --- batching over bounded task queues ---------------------------------

    def try_form(modality: str) -> None:
        queue = task_queues[modality]
        while True:
            batch = batch_stack(queue, sim.now, effective_batch, engine.max_wait_ms)
            if batch is None:
                break
            pool.offer(batch)
            wake_dispatchers()
        arm_timer(modality)

    def arm_timer(modality: str) -> None:
        queue = task_queues[modality]
        if not queue.entries:
            return
        head_time = queue.entries[0][1]
        deadline = head_time + engine.max_wait_ms
        if timer_armed.get(modality) == deadline:
            return
        timer_armed[modality] = deadline

        def fire() -> None:
            if timer_armed.get(modality) != deadline:
                return
            timer_armed.pop(modality, None)
            try_form(modality)

        sim.at(deadline, fire)

    def wake_dispatchers() -> None:
        # Drain a snapshot: a still-blocked producer re-registers itself and
        # must wait for the next wake, not spin here.
        pending = list(waiting_dispatch)
        waiting_dispatch.clear()
        for resume in pending:
            resume()

    # --- stage workers ------------------------------------------------------

    def admit_next() -> None:
        if not admission:
            return
        if state["in_flight"] >= engine.max_in_flight_docs:
            return
        while updates and updates[0][0] <= state["admitted"]:
            _idx, table = updates.popleft()
            pool.swap_descriptors(table)
        job = admission.popleft()
        state["in_flight"] += 1
        state["admitted"] += 1
        preprocess_worker.submit(job)

    preprocess_worker = _StageWorker(
        sim, collector, "preprocess",
        cost_fn=lambda j: engine.preprocess_ms_per_page * max(len(j.doc.pages), 1),
        work_fn=None,
        done_fn=lambda j: layout_worker.submit(j),
    )

    layout_worker = _StageWorker(
        sim, collector, "layout",
        cost_fn=lambda j: engine.layout_ms_per_page * max(len(j.doc.pages), 1),
        work_fn=lambda j: _prepare(j, config),
        done_fn=lambda j: dispatcher.submit(j),
    )

    class _Dispatcher:
        def __init__(self):
            self.queue: deque = deque()
            self.job = None
            self.idx = 0

        def submit(self, job) -> None:
            self.queue.append(job)
            self._try_next()

        def _try_next(self) -> None:
            if self.job is not None or not self.queue:
                return
            self.job = self.queue.popleft()
            self.idx = 0
            self._step()

        def _step(self) -> None:
            job = self.job
            if self.idx >= len(job.plan.tasks):
                job.dispatch_done = True
                self.job = None
                maybe_gather(job)
                self._try_next()
                return
            collector.charge_stage("dispatch", engine.dispatch_ms_per_task)
            self.sim_after_enqueue()

        def sim_after_enqueue(self) -> None:
            sim.after(engine.dispatch_ms_per_task, self._enqueue)

        def _enqueue(self) -> None:
            job = self.job
            task = job.plan.tasks[self.idx]
            queue = task_queues[task.modality]
            # Backpressure: all admitted-but-unstarted work for the modality
            # (queued tasks plus formed batches) counts against capacity.
            pending = len(queue) + pool.ready_tasks(task.modality)
            if pending >= engine.queue_capacity:
                waiting_dispatch.append(self._enqueue)
                return
            queue.push(task, sim.now)
            collector.tasks_dispatched += 1
            collector.record_depth(task.modality, len(queue))
            self.idx += 1
            try_form(task.modality)
            self._step()

    dispatcher = _Dispatcher()

    gather_worker = _StageWorker(
        sim, collector, "gather",
        cost_fn=lambda j: engine.gather_ms_per_doc
        + engine.gather_ms_per_task * len(j.plan.tasks),
        work_fn=None,
        done_fn=lambda j: consolidate_worker.submit(j),
    )

    consolidate_worker = _StageWorker(
        sim, collector, "consolidate",
        cost_fn=lambda j: engine.consolidate_ms_per_doc,
        work_fn=None,
        done_fn=lambda j: format_worker.submit(j),
    )

    def complete(job) -> None:
        _finish_job(job, config, collector, sim.now)
        state["in_flight"] -= 1
        admit_next()

    format_worker = _StageWorker(
        sim, collector, "format",
        cost_fn=lambda j: engine.format_ms_per_doc,
        work_fn=None,
        done_fn=complete,
    )

    def start() -> None:
        for _ in range(engine.max_in_flight_docs):
            admit_next()

    sim.at(0.0, start)


# ---------------------------------------------------------------------------
# Scaling and reports
# ---------------------------------------------------------------------------


@dataclass
class ScalingPoint:
    workers: int
    throughput_pps: float


@dataclass
class ScalingReport:
    points: list[ScalingPoint]
    slope: float
    intercept: float
    r_squared: float
    efficiency: float  # per-worker efficiency at the largest count

    def to_report(self) -> dict:
        return {
            "points": [
                {"workers": p.workers, "throughput_pps": round(p.throughput_pps, 6)}
                for p in self.points
            ],
            "slope": round(self.slope, 6),
            "intercept": round(self.intercept, 6),
            "r_squared": round(self.r_squared, 6),
            "efficiency": round(self.efficiency, 6),
        }


def contention_free_config(seed: int = 0, max_workers: int = 8,
                           engine: EngineConfig | None = None) -> PipelineConfig:
    """Scaling-benchmark preset: no replica cap binds below max_workers and
    enough documents stay in flight to keep every worker fed."""
    base = engine or EngineConfig()
    return PipelineConfig(
        mode=Mode.PIPELINE_PARALLEL,
        engine=base.copy(max_in_flight_docs=max(base.max_in_flight_docs, 2 * max_workers)),
        experts=default_descriptors(max_batch=base.max_batch, replicas=max_workers, seed=seed),
        seed=seed,
    )


def simulate_scaling(
    docs: list[DocumentIR], worker_counts: list[int], config: PipelineConfig
) -> ScalingReport:
    """Same seeded workload under each worker count, with a least-squares fit."""
    if not worker_counts or sorted(worker_counts) != list(worker_counts):
        raise ValueError("worker_counts must be nonempty and ascending")
    points = []
    for n in worker_counts:
        cfg = PipelineConfig(
            mode=config.mode,
            engine=config.engine.copy(workers=n),
            experts=config.experts,
            seed=config.seed,
            strict=config.strict,
        )
        _outputs, metrics = run_pipeline(docs, cfg)
        points.append(ScalingPoint(workers=n, throughput_pps=metrics.throughput_pps))
    xs = [p.workers for p in points]
    ys = [p.throughput_pps for p in points]
    slope, intercept, r2 = _least_squares(xs, ys)
    base = points[0]
    top = points[-1]
    efficiency = (top.throughput_pps / base.throughput_pps) / (top.workers / base.workers)
    return ScalingReport(points=points, slope=slope, intercept=intercept, r_squared=r2,
                         efficiency=efficiency)


def _least_squares(xs: list[float], ys: list[float]) -> tuple[float, float, float]:
    n = len(xs)
    mean_x = sum(xs) / n
    mean_y = sum(ys) / n
    sxx = sum((x - mean_x) ** 2 for x in xs)
    sxy = sum((x - mean_x) * (y - mean_y) for x, y in zip(xs, ys))
    slope = sxy / sxx if sxx else 0.0
    intercept = mean_y - slope * mean_x
    ss_res = sum((y - (slope * x + intercept)) ** 2 for x, y in zip(xs, ys))
    ss_tot = sum((y - mean_y) ** 2 for y in ys)
    r2 = 1.0 if ss_tot == 0 else 1.0 - ss_res / ss_tot
    return slope, intercept, r2


def bubble_report(metrics: PipelineMetrics) -> dict:
    """Per-stage idle fractions for one completed run."""
    return {
        "mode": metrics.mode,
        "wall_ms": round(metrics.wall_ms, 6),
        "throughput_pps": round(metrics.throughput_pps, 6),
        "expert_bubble_fraction": round(metrics.bubble_fraction, 6),
        "per_stage": [
            {"stage": s.stage, "bubble_fraction": round(s.bubble_fraction, 6)}
            for s in metrics.per_stage
        ],
    }


def compare_modes(docs: list[DocumentIR], config: PipelineConfig) -> dict:
    """The three-way mode comparison on one workload."""
    rows = []
    for mode in (Mode.SEQUENTIAL, Mode.PARALLEL_GATHER, Mode.PIPELINE_PARALLEL):
        cfg = PipelineConfig(mode=mode, engine=config.engine, experts=config.experts,
                             seed=config.seed, strict=config.strict)
        _outputs, metrics = run_pipeline(docs, cfg)
        rows.append(bubble_report(metrics))
    return {"workload_docs": len(docs), "modes": rows}


def run_wall_clock(docs: list[DocumentIR], config: PipelineConfig):
    """Wall-clock mode: sequential execution with measured (real) times.

    Exists for sanity checks against live backends; benchmarks and acceptance
    use the virtual clock.
    """
    from .engine import process_document

    store = DocumentStore(docs)
    backend = MockBackend(store, config.resolved_experts())
    collector = _Collector(config.engine.workers)
    outputs = []
    t0 = time.perf_counter()
    for doc in docs:
        start = time.perf_counter()
        result = process_document(doc, config.engine, backend, strict=config.strict)
        outputs.append(result.parsed)
        collector.doc_latency[doc.doc_id] = (time.perf_counter() - start) * 1000.0
    wall_ms = (time.perf_counter() - t0) * 1000.0
    pages = sum(len(d.pages) for d in docs)
    metrics = collector.finish(Mode.SEQUENTIAL, wall_ms, len(docs), pages)
    return outputs, metrics
