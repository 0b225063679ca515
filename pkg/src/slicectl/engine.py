"""The reconciler: plans applied slices and executes them in virtual time.

Execution is discrete-event: every task whose graph predecessors completed
and whose twin permits it starts immediately, completions drive the twin
state machines, failures schedule retries with exponential backoff, and all
of it advances a virtual clock. Each state change is a single record that
is applied through one reducer both live and on replay, which is what makes
logs byte-reproducible and kill-and-replay exact.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Any, Iterable, Mapping

from . import appcatalog, descriptor, infra, lifecycle, planner
from .appcatalog import ArtifactStore, PeeringTopology
from .descriptor import CompatibilityMatrix, SliceRequest, ValidationReport
from .infra import DomainInventory, FaultSpec, InfraManager, NodeHandle, OpOutcome
from .lifecycle import (
    AppStatus,
    ClusterPhase,
    NodeState,
    NodeTwin,
    Role,
    SlicePhase,
    TwinEvent,
    backoff,
    derive_cluster_phase,
    derive_slice_phase,
)
from .planner import PlacementMap, Task, TaskGraph, TaskKind
from .store import EventLog, EventRecord, LogContents, MemoryLog, Subject

DEFAULT_MAX_VIRTUAL_TIME = 1_000_000


class EngineError(Exception):
    pass


class AlreadyExists(EngineError):
    pass


class NotFound(EngineError):
    pass


class ValidationFailed(EngineError):
    def __init__(self, report: ValidationReport):
        self.report = report
        msgs = "; ".join(f"{f.locator}: {f.message}" for f in report.errors)
        super().__init__(f"validation failed: {msgs}")


class PlanningFailed(EngineError):
    pass


class Deadlock(EngineError):
    """No runnable task and no scheduled event while slices are unsettled."""


class TimeExceeded(EngineError):
    pass


_FAIL_EVENTS = {
    TaskKind.ALLOCATE: TwinEvent.ALLOC_FAIL,
    TaskKind.INSTALL_OS: TwinEvent.OS_FAIL,
    TaskKind.SETUP_MASTER: TwinEvent.K8S_FAIL,
    TaskKind.JOIN_WORKER: TwinEvent.K8S_FAIL,
    TaskKind.INSTALL_FABRIC: TwinEvent.K8S_FAIL,
}

_OK_EVENTS = {
    TaskKind.ALLOCATE: TwinEvent.ALLOC_OK,
    TaskKind.INSTALL_OS: TwinEvent.OS_OK,
    TaskKind.SETUP_MASTER: TwinEvent.K8S_OK,
    TaskKind.JOIN_WORKER: TwinEvent.K8S_OK,
}

_OP_FOR_KIND = {
    TaskKind.ALLOCATE: "allocate",
    TaskKind.INSTALL_OS: "install_os",
    TaskKind.SETUP_MASTER: "run_step",
    TaskKind.JOIN_WORKER: "run_step",
    TaskKind.INSTALL_FABRIC: "run_step",
}


@dataclass
class Inflight:
    task_id: str
    started_at: int
    ends_at: int
    status: str  # ok | fault | error:<Reason>
    seq: int
    op: dict[str, Any] | None = None


@dataclass
class SliceState:
    slice_id: str
    document: str
    request: SliceRequest
    placements: PlacementMap
    graph: TaskGraph
    created_at: int
    twins: dict[str, NodeTwin] = field(default_factory=dict)
    done: set[str] = field(default_factory=set)
    inflight: dict[str, Inflight] = field(default_factory=dict)
    app_status: dict[tuple[str, str], AppStatus] = field(default_factory=dict)
    artifacts: ArtifactStore | None = None
    peering: PeeringTopology = field(default_factory=PeeringTopology)
    alloc_order: list[tuple[str, str]] = field(default_factory=list)

    def __post_init__(self):
        if self.artifacts is None:
            self.artifacts = ArtifactStore(slice_id=self.slice_id)
        self._preds = self.graph.predecessors()

    def predecessors(self, task_id: str) -> list[str]:
        return self._preds[task_id]

    def cluster_twins(self, cluster: str) -> list[NodeTwin]:
        return [t for t in self.twins.values() if t.cluster == cluster]

    def cluster_apps(self, cluster: str) -> dict[str, AppStatus]:
        return {
            app: status for (cl, app), status in self.app_status.items() if cl == cluster
        }

    def cluster_phase(self, cluster: str) -> ClusterPhase:
        return derive_cluster_phase(self.cluster_twins(cluster), self.cluster_apps(cluster))

    def slice_phase(self) -> SlicePhase:
        return derive_slice_phase(
            self.cluster_phase(c.name) for c in self.request.clusters
        )

    def settled(self) -> bool:
        terminal = {ClusterPhase.READY, ClusterPhase.FAILED}
        return not self.inflight and all(
            self.cluster_phase(c.name) in terminal for c in self.request.clusters
        )


@dataclass
class NodeRow:
    node_id: str
    cluster: str
    role: str
    domain: str
    host: str
    state: str
    attempts: int
    age: int


@dataclass
class SliceStatus:
    slice_id: str
    namespace: str
    name: str
    phase: str
    clock: int
    created_at: int
    nodes: list[NodeRow]
    clusters: list[dict[str, Any]]
    peering: list[tuple[str, str]]
    artifacts: list[dict[str, Any]]

    def to_dict(self) -> dict[str, Any]:
        return {
            "slice": self.slice_id,
            "namespace": self.namespace,
            "name": self.name,
            "phase": self.phase,
            "clock": self.clock,
            "created_at": self.created_at,
            "nodes": [vars(n) for n in self.nodes],
            "clusters": self.clusters,
            "peering": [list(e) for e in self.peering],
            "artifacts": self.artifacts,
        }


class Engine:
    """Single serialized command surface over one simulated world."""

    def __init__(
        self,
        log: EventLog | None = None,
        seed: int = 42,
        matrix: CompatibilityMatrix | None = None,
        _fresh: bool = True,
    ):
        self.log = log if log is not None else MemoryLog()
        if self.log.snapshot_provider is None:
            self.log.snapshot_provider = self.snapshot_state
        self.matrix = matrix or CompatibilityMatrix.default()
        self.seed = seed
        self.infra = InfraManager(seed=seed)
        self.clock = 0
        self.next_seq = 1
        self.slices: dict[str, SliceState] = {}
        if _fresh:
            self._emit("world-init", Subject(), {"seed": seed})

    # ------------------------------------------------------------------
    # command surface

    def register_domain(self, inv: DomainInventory) -> None:
        if inv.domain in self.infra.domains:
            raise infra.DuplicateDomain(inv.domain)
        infra.check_inventory(inv)
        self._emit(
            "domain-registered", Subject(), {"inventory": infra.inventory_to_dict(inv)}
        )

    def register_fault(self, spec: FaultSpec) -> None:
        self._emit(
            "fault-registered",
            Subject(),
            {
                "target": spec.target,
                "domain": spec.domain,
                "probability": spec.probability,
                "fire_on_nth": spec.fire_on_nth,
                "seed_scoped": spec.seed_scoped,
            },
        )

    def validate_request(self, req: SliceRequest) -> ValidationReport:
        return descriptor.validate(req, self.matrix, self.infra.domains)

    def apply(self, document: str | SliceRequest) -> str:
        """Validate, plan, and schedule a slice; returns its id immediately."""
        if isinstance(document, SliceRequest):
            req, text = document, descriptor.serialize(document)
        else:
            req, text = descriptor.parse_slice_request(document), document
        sid = req.slice_id
        if sid in self.slices:
            raise AlreadyExists(sid)
        report = self.validate_request(req)
        if not report.ok:
            raise ValidationFailed(report)
        try:
            planner.plan_slice(req, self._inventories())
        except planner.PlanningError as exc:
            raise PlanningFailed(str(exc)) from exc
        self._emit("slice-applied", Subject(slice=sid), {"document": text})
        return sid

    def delete(self, sid: str) -> None:
        if sid not in self.slices:
            raise NotFound(sid)
        self._emit("slice-deleted", Subject(slice=sid), {})

    def status(self, sid: str) -> SliceStatus:
        if sid not in self.slices:
            raise NotFound(sid)
        s = self.slices[sid]
        by_node = s.placements.by_node()
        rows = []
        for node_id in sorted(s.twins):
            twin = s.twins[node_id]
            p = by_node[node_id]
            rows.append(
                NodeRow(
                    node_id=node_id,
                    cluster=twin.cluster,
                    role=twin.role.value,
                    domain=p.domain,
                    host=p.host_id,
                    state=twin.state.value,
                    attempts=twin.attempts,
                    age=self.clock - s.created_at,
                )
            )
        clusters = []
        for c in s.request.clusters:
            clusters.append(
                {
                    "name": c.name,
                    "domain": c.deploymentdomain,
                    "phase": s.cluster_phase(c.name).value,
                    "apps": {
                        app: status.value for app, status in sorted(s.cluster_apps(c.name).items())
                    },
                }
            )
        artifacts = [
            {
                "filename": a.filename,
                "producer": list(a.producer),
                "created_at": a.created_at,
            }
            for a in s.artifacts.listing()
        ]
        return SliceStatus(
            slice_id=sid,
            namespace=s.request.namespace,
            name=s.request.name,
            phase=s.slice_phase().value,
            clock=self.clock,
            created_at=s.created_at,
            nodes=rows,
            clusters=clusters,
            peering=s.peering.sorted_edges(),
            artifacts=artifacts,
        )

    def list_slices(self) -> list[SliceStatus]:
        return [self.status(sid) for sid in sorted(self.slices)]

    def peering_report(self, sid: str) -> PeeringTopology:
        if sid not in self.slices:
            raise NotFound(sid)
        return self.slices[sid].peering

    # ------------------------------------------------------------------
    # execution

    def run_until_settled(self, max_virtual_time: int = DEFAULT_MAX_VIRTUAL_TIME) -> None:
        """Drive the world to completion; raises if the horizon is hit."""
        settled = self._run(until=max_virtual_time)
        if not settled:
            raise TimeExceeded(f"not settled by virtual t={max_virtual_time}")

    def advance_to(self, target: int) -> None:
        """Advance virtual time to ``target``, processing everything due."""
        self._run(until=target, strict=False)
        if self.clock < target:
            self._emit("clock-advanced", Subject(), {}, at=target)

    def settled(self) -> bool:
        return all(s.settled() for s in self.slices.values())

    def _run(self, until: int | None = None, strict: bool = True) -> bool:
        while True:
            self._start_ready_tasks()
            if self.settled():
                return True
            nxt = self._next_event_time()
            if nxt is None:
                if strict:
                    raise Deadlock(
                        "no runnable task or scheduled event while slices are unsettled"
                    )
                return False
            if until is not None and nxt > until:
                return False
            self._process_instant(nxt)

    def _start_ready_tasks(self) -> None:
        for sid in sorted(self.slices):
            s = self.slices[sid]
            failed = {
                c.name
                for c in s.request.clusters
                if s.cluster_phase(c.name) is ClusterPhase.FAILED
            }
            for task in s.graph.tasks:
                tid = task.task_id
                if tid in s.done or tid in s.inflight or task.cluster in failed:
                    continue
                if any(p not in s.done for p in s.predecessors(tid)):
                    continue
                if not self._twin_permits(s, task):
                    continue
                self._start_task(s, task)

    def _twin_permits(self, s: SliceState, task: Task) -> bool:
        if task.kind is TaskKind.ALLOCATE:
            return s.twins[task.node_id].state is NodeState.REQUESTED
        if task.kind is TaskKind.INSTALL_OS:
            return s.twins[task.node_id].state is NodeState.ALLOCATED
        if task.kind in (TaskKind.SETUP_MASTER, TaskKind.JOIN_WORKER):
            return s.twins[task.node_id].state is NodeState.IMAGE_INSTALLED
        if task.kind is TaskKind.INSTALL_FABRIC:
            executor = s.twins[task.payload["executor"]]
            return (
                executor.state is NodeState.KUBERNETES_CONFIGURED
                and executor.handle is not None
            )
        return True

    def _start_task(self, s: SliceState, task: Task) -> None:
        tid = task.task_id
        if task.kind is TaskKind.DEPLOY_APP:
            status, duration = self._preview_deploy(s, task)
            op = None
        else:
            out = self._preview_infra(s, task)
            status, duration, op = out.status, out.duration, out.to_dict()
        detail = {
            "task": tid,
            "status": status,
            "duration": duration,
            "ends_at": self.clock + duration,
            "op": op,
        }
        self._emit("task-started", self._task_subject(s, task), detail)

    def _preview_infra(self, s: SliceState, task: Task) -> OpOutcome:
        payload = task.payload
        domain = payload["domain"]
        if task.kind is TaskKind.ALLOCATE:
            return self.infra.preview(
                "allocate",
                domain,
                host_id=payload["host_id"],
                nodetype=payload["nodetype"],
            )
        executor = task.node_id or payload["executor"]
        handle = s.twins[executor].handle
        if task.kind is TaskKind.INSTALL_OS:
            return self.infra.preview(
                "install_os",
                domain,
                handle_id=handle.handle_id,
                osimage=payload["osimage"],
                osaccount=payload.get("osaccount"),
            )
        return self.infra.preview(
            "run_step", domain, handle_id=handle.handle_id, step=payload["step"]
        )

    def _preview_deploy(self, s: SliceState, task: Task) -> tuple[str, int]:
        app = self._app_spec(s, task)
        duration = appcatalog.deploy_duration(app)
        if app.is_consumer:
            artifact = s.artifacts.get(app.sharefile)
            if artifact is None:
                return "error:ShareTimeout", appcatalog.SHARE_TIMEOUT
            try:
                appcatalog.verify_share(artifact, task.cluster, s.slice_id)
            except appcatalog.ShareTokenMismatch:
                return "error:ShareTokenMismatch", duration
        return "ok", duration

    def _next_event_time(self) -> int | None:
        best: int | None = None
        for s in self.slices.values():
            for inf in s.inflight.values():
                if best is None or inf.ends_at < best:
                    best = inf.ends_at
            for twin in s.twins.values():
                if twin.state is NodeState.FAILED and twin.attempts < lifecycle.MAX_ATTEMPTS:
                    grant = twin.last_transition + backoff(twin.attempts)
                    if best is None or grant < best:
                        best = grant
        return best

    def _process_instant(self, t: int) -> None:
        completions: list[tuple[int, str, str]] = []
        grants: list[tuple[str, str]] = []
        for sid in sorted(self.slices):
            s = self.slices[sid]
            for tid, inf in s.inflight.items():
                if inf.ends_at == t:
                    completions.append((inf.seq, sid, tid))
            for node_id in sorted(s.twins):
                twin = s.twins[node_id]
                if (
                    twin.state is NodeState.FAILED
                    and twin.attempts < lifecycle.MAX_ATTEMPTS
                    and twin.last_transition + backoff(twin.attempts) == t
                ):
                    grants.append((sid, node_id))
        for _seq, sid, tid in sorted(completions):
            self._finish_task(self.slices[sid], tid, t)
        for sid, node_id in grants:
            s = self.slices[sid]
            self._emit(
                "retry-granted",
                Subject(slice=sid, cluster=s.twins[node_id].cluster, node=node_id),
                {"attempts": s.twins[node_id].attempts},
                at=t,
            )

    def _finish_task(self, s: SliceState, tid: str, t: int) -> None:
        task = s.graph.task(tid)
        inf = s.inflight[tid]
        subject = self._task_subject(s, task)
        if inf.status != "ok":
            self._fail_task(s, task, inf, t)
            return
        if task.kind is TaskKind.ALLOCATE:
            handle = {
                "handle_id": inf.op["handle_id"],
                "domain": inf.op["domain"],
                "host_id": inf.op["host_id"],
                "nodetype": inf.op["nodetype"],
                "address": inf.op["address"],
            }
            self._emit_transition(s, task.node_id, TwinEvent.ALLOC_OK, t, handle=handle)
            self._emit("task-completed", subject, {"task": tid}, at=t)
        elif task.kind is TaskKind.INSTALL_OS:
            self._emit_transition(s, task.node_id, TwinEvent.OS_OK, t)
            self._emit("task-completed", subject, {"task": tid}, at=t)
        elif task.kind is TaskKind.SETUP_MASTER:
            self._emit_transition(s, task.node_id, TwinEvent.K8S_OK, t)
            self._emit("task-completed", subject, {"task": tid}, at=t)
        elif task.kind is TaskKind.JOIN_WORKER:
            self._emit_transition(s, task.node_id, TwinEvent.K8S_OK, t)
            self._emit_transition(s, task.node_id, TwinEvent.READY_CONFIRMED, t)
            self._emit("task-completed", subject, {"task": tid}, at=t)
        elif task.kind is TaskKind.INSTALL_FABRIC:
            self._emit("task-completed", subject, {"task": tid}, at=t)
            for node_id, role in planner.node_ids(s.request.cluster(task.cluster)):
                if role is Role.MASTER:
                    self._emit_transition(s, node_id, TwinEvent.READY_CONFIRMED, t)
        else:  # DeployApp
            self._finish_deploy(s, task, t)
            self._emit("task-completed", subject, {"task": tid}, at=t)

    def _finish_deploy(self, s: SliceState, task: Task, t: int) -> None:
        app = self._app_spec(s, task)
        subject = Subject(slice=s.slice_id, cluster=task.cluster, app=app.name)
        if app.is_producer:
            for filename, content in appcatalog.producer_artifacts(
                app, task.cluster, s.slice_id
            ):
                self._emit(
                    "artifact-written",
                    subject,
                    {"filename": filename, "token": json.loads(content.decode())},
                    at=t,
                )
        elif app.is_consumer:
            artifact = s.artifacts.get(app.sharefile)
            master = appcatalog.verify_share(artifact, task.cluster, s.slice_id)
            a, b = appcatalog.edge(master, task.cluster)
            self._emit("peering-established", subject, {"a": a, "b": b}, at=t)
        self._emit("app-status", subject, {"status": AppStatus.DEPLOYED.value}, at=t)

    def _fail_task(self, s: SliceState, task: Task, inf: Inflight, t: int) -> None:
        subject = self._task_subject(s, task)
        if inf.status == "fault":
            reason = f"injected-fault:{_OP_FOR_KIND[task.kind]}"
        else:
            reason = inf.status.split(":", 1)[1] if ":" in inf.status else inf.status
        if task.kind is TaskKind.DEPLOY_APP:
            app = self._app_spec(s, task)
            self._emit(
                "app-status",
                Subject(slice=s.slice_id, cluster=task.cluster, app=app.name),
                {"status": AppStatus.FAILED.value, "reason": reason},
                at=t,
            )
        else:
            node_id = task.node_id or task.payload["executor"]
            self._emit_transition(
                s, node_id, _FAIL_EVENTS[task.kind], t, reason=reason
            )
        self._emit(
            "task-failed", subject, {"task": task.task_id, "reason": reason}, at=t
        )

    def _emit_transition(
        self,
        s: SliceState,
        node_id: str,
        event: TwinEvent,
        at: int,
        handle: dict[str, Any] | None = None,
        reason: str | None = None,
    ) -> None:
        twin = s.twins[node_id]
        detail: dict[str, Any] = {"event": event.value, "from": twin.state.value}
        if handle is not None:
            detail["handle"] = handle
        if reason is not None:
            detail["reason"] = reason
        self._emit(
            "transition",
            Subject(slice=s.slice_id, cluster=twin.cluster, node=node_id),
            detail,
            at=at,
        )

    def _task_subject(self, s: SliceState, task: Task) -> Subject:
        return Subject(
            slice=s.slice_id,
            cluster=task.cluster,
            node=task.node_id,
            app=task.payload.get("app"),
        )

    def _app_spec(self, s: SliceState, task: Task) -> descriptor.ApplicationSpec:
        cluster = s.request.cluster(task.cluster)
        for app in cluster.applications:
            if app.name == task.payload["app"]:
                return app
        raise appcatalog.UnknownApplication(task.payload["app"])

    def _inventories(self) -> dict[str, DomainInventory]:
        return {d: self.infra.inventory(d) for d in self.infra.domains}

    # ------------------------------------------------------------------
    # record emission and reduction

    def _emit(
        self, kind: str, subject: Subject, detail: Mapping[str, Any], at: int | None = None
    ) -> EventRecord:
        record = EventRecord(
            seq=self.next_seq,
            at=self.clock if at is None else at,
            subject=subject,
            kind=kind,
            detail=json.dumps(detail, sort_keys=True, separators=(",", ":")),
        )
        self._apply_record(record)
        self.log.append(record)
        return record

    def _apply_record(self, record: EventRecord) -> None:
        payload = record.payload()
        reducer = getattr(self, "_reduce_" + record.kind.replace("-", "_"))
        reducer(record, payload)
        self.clock = max(self.clock, record.at)
        self.next_seq = record.seq + 1

    def _reduce_world_init(self, record: EventRecord, payload: dict[str, Any]) -> None:
        self.seed = payload["seed"]
        self.infra = InfraManager(seed=self.seed)

    def _reduce_clock_advanced(self, record: EventRecord, payload: dict[str, Any]) -> None:
        pass

    def _reduce_domain_registered(self, record: EventRecord, payload: dict[str, Any]) -> None:
        self.infra.register_domain(infra.inventory_from_dict(payload["inventory"]))

    def _reduce_fault_registered(self, record: EventRecord, payload: dict[str, Any]) -> None:
        self.infra.register_fault(
            FaultSpec(
                target=payload["target"],
                domain=payload["domain"],
                probability=payload["probability"],
                fire_on_nth=payload["fire_on_nth"],
                seed_scoped=payload["seed_scoped"],
            )
        )

    def _reduce_slice_applied(self, record: EventRecord, payload: dict[str, Any]) -> None:
        text = payload["document"]
        req = descriptor.parse_slice_request(text)
        sid = req.slice_id
        placements = planner.plan_slice(req, self._inventories())
        graph = planner.build_plan(req, placements)
        s = SliceState(
            slice_id=sid,
            document=text,
            request=req,
            placements=placements,
            graph=graph,
            created_at=record.at,
        )
        for p in placements.entries:
            s.twins[p.node_id] = NodeTwin(
                node_id=p.node_id,
                cluster=p.cluster,
                role=p.role,
                last_transition=record.at,
            )
        for cluster in req.clusters:
            for app in cluster.applications:
                s.app_status[(cluster.name, app.name)] = AppStatus.PENDING
        self.slices[sid] = s

    def _reduce_task_started(self, record: EventRecord, payload: dict[str, Any]) -> None:
        s = self.slices[record.subject.slice]
        if payload["op"] is not None:
            out = OpOutcome.from_dict(payload["op"])
            self.infra.commit(out)
            if out.op == "allocate" and out.ok:
                s.alloc_order.append((out.domain, out.handle_id))
        s.inflight[payload["task"]] = Inflight(
            task_id=payload["task"],
            started_at=record.at,
            ends_at=payload["ends_at"],
            status=payload["status"],
            seq=record.seq,
            op=payload["op"],
        )

    def _reduce_transition(self, record: EventRecord, payload: dict[str, Any]) -> None:
        s = self.slices[record.subject.slice]
        node_id = record.subject.node
        twin = s.twins[node_id]
        event = TwinEvent(payload["event"])
        handle = None
        if "handle" in payload:
            handle = NodeHandle(**payload["handle"])
        if event in (TwinEvent.ALLOC_FAIL, TwinEvent.OS_FAIL, TwinEvent.K8S_FAIL):
            if twin.handle is not None:
                self.infra.release(twin.handle)
        s.twins[node_id] = lifecycle.transition(
            twin, event, at=record.at, handle=handle, reason=payload.get("reason")
        )

    def _reduce_task_completed(self, record: EventRecord, payload: dict[str, Any]) -> None:
        s = self.slices[record.subject.slice]
        tid = payload["task"]
        inf = s.inflight.pop(tid)
        s.done.add(tid)
        task = s.graph.task(tid)
        if task.kind is TaskKind.INSTALL_OS:
            self.infra.finalize_install(inf.op["domain"], inf.op["handle_id"])

    def _reduce_task_failed(self, record: EventRecord, payload: dict[str, Any]) -> None:
        s = self.slices[record.subject.slice]
        tid = payload["task"]
        s.inflight.pop(tid)
        task = s.graph.task(tid)
        node_id = task.node_id or task.payload.get("executor")
        if task.kind is not TaskKind.DEPLOY_APP and node_id is not None:
            # the node restarts its chain from Allocate on retry
            for t in s.graph.tasks:
                if t.node_id == node_id:
                    s.done.discard(t.task_id)

    def _reduce_retry_granted(self, record: EventRecord, payload: dict[str, Any]) -> None:
        s = self.slices[record.subject.slice]
        node_id = record.subject.node
        s.twins[node_id] = lifecycle.transition(
            s.twins[node_id], TwinEvent.RETRY_GRANTED, at=record.at
        )

    def _reduce_app_status(self, record: EventRecord, payload: dict[str, Any]) -> None:
        s = self.slices[record.subject.slice]
        key = (record.subject.cluster, record.subject.app)
        s.app_status[key] = AppStatus(payload["status"])

    def _reduce_artifact_written(self, record: EventRecord, payload: dict[str, Any]) -> None:
        s = self.slices[record.subject.slice]
        token = payload["token"]
        content = json.dumps(token, sort_keys=True).encode()
        s.artifacts.write(
            payload["filename"],
            content,
            (record.subject.slice, record.subject.cluster, record.subject.app),
            record.at,
        )

    def _reduce_peering_established(self, record: EventRecord, payload: dict[str, Any]) -> None:
        s = self.slices[record.subject.slice]
        s.peering.add(payload["a"], payload["b"])

    def _reduce_slice_deleted(self, record: EventRecord, payload: dict[str, Any]) -> None:
        s = self.slices[record.subject.slice]
        for domain, handle_id in reversed(s.alloc_order):
            self.infra.release_by_id(domain, handle_id)
        del self.slices[record.subject.slice]

    # ------------------------------------------------------------------
    # dry-run helpers

    def plan_preview(
        self, req: SliceRequest
    ) -> tuple[PlacementMap, TaskGraph, list[str], dict[str, float]]:
        placements = planner.plan_slice(req, self._inventories())
        graph = planner.build_plan(req, placements)
        durations = self.expected_durations(req, graph)
        path = planner.critical_path(graph, durations)
        return placements, graph, path, durations

    def expected_durations(self, req: SliceRequest, graph: TaskGraph) -> dict[str, float]:
        durations: dict[str, float] = {}
        for task in graph.tasks:
            if task.kind is TaskKind.DEPLOY_APP:
                app = next(
                    a
                    for a in req.cluster(task.cluster).applications
                    if a.name == task.payload["app"]
                )
                durations[task.task_id] = float(appcatalog.deploy_duration(app))
            else:
                kind = self.infra.domain_kind(task.payload["domain"])
                durations[task.task_id] = infra.expected_duration(
                    _OP_FOR_KIND[task.kind], kind
                )
        return durations

    # ------------------------------------------------------------------
    # snapshot / restore

    def snapshot_state(self) -> dict[str, Any]:
        return {
            "clock": self.clock,
            "next_seq": self.next_seq,
            "seed": self.seed,
            "matrix": sorted([kt.value, nf.value] for kt, nf in self.matrix.allowed),
            "infra": self.infra.to_state(),
            "slices": {sid: _slice_to_state(s) for sid, s in sorted(self.slices.items())},
        }

    @classmethod
    def from_state(cls, state: Mapping[str, Any], log: EventLog | None = None) -> "Engine":
        matrix = CompatibilityMatrix(
            frozenset(
                (descriptor.KubernetesType(kt), descriptor.NetworkFabric(nf))
                for kt, nf in state["matrix"]
            )
        )
        eng = cls(log=log, seed=state["seed"], matrix=matrix, _fresh=False)
        eng.clock = state["clock"]
        eng.next_seq = state["next_seq"]
        eng.infra = InfraManager.from_state(state["infra"])
        for sid, sstate in state["slices"].items():
            eng.slices[sid] = _slice_from_state(sid, sstate)
        return eng

    @classmethod
    def from_contents(
        cls,
        contents: LogContents,
        log: EventLog | None = None,
        use_snapshot: bool = True,
    ) -> "Engine":
        snap = contents.last_snapshot_before() if use_snapshot else None
        if snap is not None:
            after_seq, state = snap
            eng = cls.from_state(state, log=log)
            records = [r for r in contents.records if r.seq > after_seq]
        else:
            eng = cls(log=log, _fresh=False)
            records = contents.records
        for record in records:
            eng._apply_record(record)
        if eng.log.last_seq == 0:
            eng.log.last_seq = eng.next_seq - 1
        return eng

    @classmethod
    def replay_records(cls, records: Iterable[EventRecord]) -> "Engine":
        return cls.from_contents(LogContents(records=list(records)), use_snapshot=False)


def _slice_to_state(s: SliceState) -> dict[str, Any]:
    return {
        "document": s.document,
        "created_at": s.created_at,
        "placements": [
            {
                "node_id": p.node_id,
                "cluster": p.cluster,
                "role": p.role.value,
                "domain": p.domain,
                "host_id": p.host_id,
                "nodetype": p.nodetype,
                "osimage": p.osimage,
                "osaccount": p.osaccount,
            }
            for p in s.placements.entries
        ],
        "twins": {
            nid: {
                "cluster": t.cluster,
                "role": t.role.value,
                "state": t.state.value,
                "attempts": t.attempts,
                "last_transition": t.last_transition,
                "failure_reason": t.failure_reason,
                "handle": vars(t.handle) if t.handle else None,
            }
            for nid, t in sorted(s.twins.items())
        },
        "done": sorted(s.done),
        "inflight": {
            tid: {
                "started_at": inf.started_at,
                "ends_at": inf.ends_at,
                "status": inf.status,
                "seq": inf.seq,
                "op": inf.op,
            }
            for tid, inf in sorted(s.inflight.items())
        },
        "app_status": [
            [cluster, app, status.value]
            for (cluster, app), status in sorted(s.app_status.items())
        ],
        "artifacts": [
            {
                "filename": a.filename,
                "token": a.token,
                "producer": list(a.producer),
                "created_at": a.created_at,
            }
            for a in s.artifacts.listing()
        ],
        "peering": [list(e) for e in s.peering.sorted_edges()],
        "alloc_order": [list(x) for x in s.alloc_order],
    }


def _slice_from_state(sid: str, state: Mapping[str, Any]) -> SliceState:
    req = descriptor.parse_slice_request(state["document"])
    placements = PlacementMap(
        entries=tuple(
            planner.Placement(
                node_id=p["node_id"],
                cluster=p["cluster"],
                role=Role(p["role"]),
                domain=p["domain"],
                host_id=p["host_id"],
                nodetype=p["nodetype"],
                osimage=p["osimage"],
                osaccount=p["osaccount"],
            )
            for p in state["placements"]
        )
    )
    graph = planner.build_plan(req, placements)
    s = SliceState(
        slice_id=sid,
        document=state["document"],
        request=req,
        placements=placements,
        graph=graph,
        created_at=state["created_at"],
    )
    for nid, t in state["twins"].items():
        s.twins[nid] = NodeTwin(
            node_id=nid,
            cluster=t["cluster"],
            role=Role(t["role"]),
            state=NodeState(t["state"]),
            handle=NodeHandle(**t["handle"]) if t["handle"] else None,
            attempts=t["attempts"],
            last_transition=t["last_transition"],
            failure_reason=t["failure_reason"],
        )
    for tid, inf in state["inflight"].items():
        s.inflight[tid] = Inflight(
            task_id=tid,
            started_at=inf["started_at"],
            ends_at=inf["ends_at"],
            status=inf["status"],
            seq=inf["seq"],
            op=inf["op"],
        )
    s.done = set(state["done"])
    for cluster, app, status in state["app_status"]:
        s.app_status[(cluster, app)] = AppStatus(status)
    for a in state["artifacts"]:
        s.artifacts.write(
            a["filename"],
            json.dumps(a["token"], sort_keys=True).encode(),
            tuple(a["producer"]),
            a["created_at"],
        )
    for a, b in state["peering"]:
        s.peering.add(a, b)
    s.alloc_order = [tuple(x) for x in state["alloc_order"]]
    return s
