"""Node placement (embedding) and compilation into a dependency task graph.

The balanced strategy assigns each node to the least-loaded eligible host,
ties broken by lexicographic host id; for identical slot costs this greedy
order achieves the minimum possible maximum per-host load. Packed fills
hosts in lexicographic order instead. Masters are placed before workers so
equal-load ties land masters on earlier hosts, which keeps plan output
stable.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Mapping, Sequence

from .appcatalog import share_filename
from .descriptor import ClusterSpec, DeploymentStrategy, SliceRequest
from .infra import DomainInventory, UnsupportedNodeType
from .lifecycle import Role


class PlanningError(Exception):
    pass


class InsufficientCapacity(PlanningError):
    def __init__(self, domain: str, shortfall: int):
        self.domain = domain
        self.shortfall = shortfall
        super().__init__(f"domain {domain!r} short {shortfall} slot(s)")


class IncompletePlacement(PlanningError):
    pass


class CycleDetected(PlanningError):
    pass


@dataclass(frozen=True)
class Placement:
    node_id: str
    cluster: str
    role: Role
    domain: str
    host_id: str
    nodetype: str
    osimage: str
    osaccount: str | None = None


@dataclass(frozen=True)
class PlacementMap:
    entries: tuple[Placement, ...]

    def for_cluster(self, cluster: str) -> list[Placement]:
        return [p for p in self.entries if p.cluster == cluster]

    def by_node(self) -> dict[str, Placement]:
        return {p.node_id: p for p in self.entries}


class TaskKind(str, Enum):
    ALLOCATE = "Allocate"
    INSTALL_OS = "InstallOS"
    SETUP_MASTER = "SetupMaster"
    JOIN_WORKER = "JoinWorker"
    INSTALL_FABRIC = "InstallFabric"
    DEPLOY_APP = "DeployApp"


@dataclass(frozen=True)
class Task:
    task_id: str
    kind: TaskKind
    subject: str  # node id for node tasks, cluster name otherwise
    cluster: str
    node_id: str | None = None
    payload: Mapping[str, str | None] = field(default_factory=dict)


@dataclass
class TaskGraph:
    tasks: list[Task] = field(default_factory=list)
    edges: list[tuple[str, str]] = field(default_factory=list)

    def __post_init__(self):
        self._by_id = {t.task_id: t for t in self.tasks}

    def task(self, task_id: str) -> Task:
        return self._by_id[task_id]

    def add(self, task: Task) -> Task:
        if task.task_id in self._by_id:
            raise PlanningError(f"duplicate task id {task.task_id!r}")
        self.tasks.append(task)
        self._by_id[task.task_id] = task
        return task

    def link(self, before: Task | str, after: Task | str) -> None:
        b = before if isinstance(before, str) else before.task_id
        a = after if isinstance(after, str) else after.task_id
        self.edges.append((b, a))

    def predecessors(self) -> dict[str, list[str]]:
        preds: dict[str, list[str]] = {t.task_id: [] for t in self.tasks}
        for b, a in self.edges:
            preds[a].append(b)
        return preds

    def successors(self) -> dict[str, list[str]]:
        succs: dict[str, list[str]] = {t.task_id: [] for t in self.tasks}
        for b, a in self.edges:
            succs[b].append(a)
        return succs

    def topological_order(self) -> list[str]:
        """Kahn's algorithm; deterministic (plan order among ready tasks)."""
        preds = self.predecessors()
        remaining = {tid: len(ps) for tid, ps in preds.items()}
        succs = self.successors()
        order: list[str] = []
        ready = [t.task_id for t in self.tasks if remaining[t.task_id] == 0]
        while ready:
            tid = ready.pop(0)
            order.append(tid)
            for nxt in succs[tid]:
                remaining[nxt] -= 1
                if remaining[nxt] == 0:
                    ready.append(nxt)
        if len(order) != len(self.tasks):
            raise CycleDetected("task graph contains a cycle")
        return order

    def counts(self) -> dict[str, int]:
        out: dict[str, int] = {}
        for t in self.tasks:
            out[t.kind.value] = out.get(t.kind.value, 0) + 1
        return out


# --------------------------------------------------------------------------
# embedding


def node_ids(cluster: ClusterSpec) -> list[tuple[str, Role]]:
    ids = [(f"{cluster.name}-master-{i}", Role.MASTER) for i in range(cluster.masters.count)]
    ids += [(f"{cluster.name}-worker-{i}", Role.WORKER) for i in range(cluster.workers.count)]
    return ids


def embed(
    cluster: ClusterSpec,
    inv: DomainInventory,
    strategy: DeploymentStrategy,
    extra_load: Mapping[str, int] | None = None,
) -> list[Placement]:
    """Place one cluster's nodes onto a domain's hosts.

    ``extra_load`` carries per-host occupancy from earlier clusters of the
    same plan, so planning-time capacity stays honest within one slice.
    """
    extra = dict(extra_load or {})
    loads = {h.host_id: h.allocated + extra.get(h.host_id, 0) for h in inv.hosts}
    caps = {h.host_id: h.capacity_slots for h in inv.hosts}
    support = {h.host_id: h.supported_nodetypes for h in inv.hosts}

    requested: list[tuple[str, Role, str, str, str | None]] = []
    for node_id, role in node_ids(cluster):
        group = cluster.masters if role is Role.MASTER else cluster.workers
        requested.append((node_id, role, group.nodetype, group.osimage, group.osaccount))

    nodetypes = {r[2] for r in requested}
    for nodetype in sorted(nodetypes):
        if not any(nodetype in support[h] for h in support):
            raise UnsupportedNodeType(f"{inv.domain}: no host supports {nodetype!r}")

    eligible_free = sum(
        caps[h] - loads[h] for h in caps if any(t in support[h] for t in nodetypes)
    )
    if len(requested) > eligible_free:
        raise InsufficientCapacity(inv.domain, len(requested) - eligible_free)

    placements: list[Placement] = []
    for i, (node_id, role, nodetype, osimage, osaccount) in enumerate(requested):
        candidates = [
            h for h in loads if nodetype in support[h] and loads[h] < caps[h]
        ]
        if not candidates:
            raise InsufficientCapacity(inv.domain, len(requested) - i)
        if strategy is DeploymentStrategy.BALANCED:
            host = min(candidates, key=lambda h: (loads[h], h))
        else:
            host = min(candidates)
        loads[host] += 1
        placements.append(
            Placement(
                node_id=node_id,
                cluster=cluster.name,
                role=role,
                domain=inv.domain,
                host_id=host,
                nodetype=nodetype,
                osimage=osimage,
                osaccount=osaccount,
            )
        )
    return placements


def plan_slice(req: SliceRequest, inventories: Mapping[str, DomainInventory]) -> PlacementMap:
    """Embed every cluster, threading interim loads through shared domains."""
    entries: list[Placement] = []
    pending: dict[str, dict[str, int]] = {}
    for cluster in req.clusters:
        if cluster.deploymentdomain not in inventories:
            raise PlanningError(f"unknown domain {cluster.deploymentdomain!r}")
        inv = inventories[cluster.deploymentdomain]
        extra = pending.setdefault(cluster.deploymentdomain, {})
        fragment = embed(cluster, inv, req.deploymentstrategy, extra)
        for p in fragment:
            extra[p.host_id] = extra.get(p.host_id, 0) + 1
        entries.extend(fragment)
    return PlacementMap(entries=tuple(entries))


# --------------------------------------------------------------------------
# task graph construction


def build_plan(req: SliceRequest, placements: PlacementMap) -> TaskGraph:
    """Compile request plus placements into the dependency-ordered graph.

    Per node: Allocate -> InstallOS; masters continue to SetupMaster, workers
    to JoinWorker (also gated on every SetupMaster of the cluster). One
    InstallFabric per cluster follows the SetupMasters; each application's
    DeployApp waits on the fabric and all JoinWorkers. The only cross-cluster
    edges are sharefile producer -> consumer pairs.
    """
    graph = TaskGraph()
    app_tasks: dict[tuple[str, str], Task] = {}

    for cluster in req.clusters:
        cluster_placements = placements.for_cluster(cluster.name)
        expected = {nid for nid, _ in node_ids(cluster)}
        placed = {p.node_id for p in cluster_placements}
        if expected != placed:
            missing = sorted(expected - placed)
            raise IncompletePlacement(
                f"cluster {cluster.name!r} missing placements for {missing}"
            )
        by_node = {p.node_id: p for p in cluster_placements}

        setup_tasks: list[Task] = []
        join_tasks: list[Task] = []
        primary_master: str | None = None
        for node_id, role in node_ids(cluster):
            p = by_node[node_id]
            alloc = graph.add(
                Task(
                    task_id=f"allocate:{node_id}",
                    kind=TaskKind.ALLOCATE,
                    subject=node_id,
                    cluster=cluster.name,
                    node_id=node_id,
                    payload={
                        "domain": p.domain,
                        "host_id": p.host_id,
                        "nodetype": p.nodetype,
                    },
                )
            )
            inst = graph.add(
                Task(
                    task_id=f"install-os:{node_id}",
                    kind=TaskKind.INSTALL_OS,
                    subject=node_id,
                    cluster=cluster.name,
                    node_id=node_id,
                    payload={
                        "domain": p.domain,
                        "osimage": p.osimage,
                        "osaccount": p.osaccount,
                    },
                )
            )
            graph.link(alloc, inst)
            if role is Role.MASTER:
                if primary_master is None:
                    primary_master = node_id
                setup = graph.add(
                    Task(
                        task_id=f"setup-master:{node_id}",
                        kind=TaskKind.SETUP_MASTER,
                        subject=node_id,
                        cluster=cluster.name,
                        node_id=node_id,
                        payload={
                            "domain": p.domain,
                            "step": f"setup-master-{cluster.kubernetestype.value}",
                        },
                    )
                )
                graph.link(inst, setup)
                setup_tasks.append(setup)
            else:
                join = graph.add(
                    Task(
                        task_id=f"join-worker:{node_id}",
                        kind=TaskKind.JOIN_WORKER,
                        subject=node_id,
                        cluster=cluster.name,
                        node_id=node_id,
                        payload={
                            "domain": p.domain,
                            "step": f"join-worker-{cluster.kubernetestype.value}",
                        },
                    )
                )
                graph.link(inst, join)
                join_tasks.append(join)
        for join in join_tasks:
            for setup in setup_tasks:
                graph.link(setup, join)

        fabric_domain = by_node[primary_master].domain if primary_master else None
        fabric = graph.add(
            Task(
                task_id=f"install-fabric:{cluster.name}",
                kind=TaskKind.INSTALL_FABRIC,
                subject=cluster.name,
                cluster=cluster.name,
                payload={
                    "domain": fabric_domain,
                    "executor": primary_master,
                    "step": f"install-fabric-{cluster.networkfabric.value}",
                },
            )
        )
        for setup in setup_tasks:
            graph.link(setup, fabric)

        for app in cluster.applications:
            task = graph.add(
                Task(
                    task_id=f"deploy-app:{cluster.name}/{app.name}",
                    kind=TaskKind.DEPLOY_APP,
                    subject=cluster.name,
                    cluster=cluster.name,
                    payload={"app": app.name},
                )
            )
            graph.link(fabric, task)
            for join in join_tasks:
                graph.link(join, task)
            app_tasks[(cluster.name, app.name)] = task

    # producer -> consumer sharefile edges
    for cluster in req.clusters:
        for app in cluster.applications:
            if not app.is_producer:
                continue
            producer = app_tasks[(cluster.name, app.name)]
            expected_files = {share_filename(peer) for peer in app.peers}
            for other in req.clusters:
                for capp in other.applications:
                    if capp.is_consumer and capp.sharefile in expected_files:
                        graph.link(producer, app_tasks[(other.name, capp.name)])
    return graph


# --------------------------------------------------------------------------
# critical path


def critical_path(graph: TaskGraph, durations: Mapping[str, float]) -> list[str]:
    """Longest path by summed expected duration; deterministic tie-breaks."""
    order = graph.topological_order()  # raises CycleDetected
    if not order:
        return []
    preds = graph.predecessors()
    dist: dict[str, float] = {}
    back: dict[str, str | None] = {}
    for tid in order:
        best: str | None = None
        base = 0.0
        for p in sorted(preds[tid]):
            if dist[p] > base:
                base, best = dist[p], p
        dist[tid] = base + float(durations.get(tid, 1.0))
        back[tid] = best
    end = max(sorted(dist), key=lambda t: dist[t])
    path = []
    cursor: str | None = end
    while cursor is not None:
        path.append(cursor)
        cursor = back[cursor]
    return list(reversed(path))


def brute_force_min_max_load(
    counts_by_type: Sequence[str],
    hosts: Sequence[tuple[str, int, int, Iterable[str]]],
) -> int | None:
    """Exhaustive min-max-load oracle for small embedding instances.

    ``hosts`` rows are (host_id, capacity, preload, supported types); returns
    the optimal maximum load, or None when no feasible assignment exists.
    Exponential; intended for tests.
    """
    best: int | None = None

    def rec(i: int, loads: list[int]) -> None:
        nonlocal best
        if i == len(counts_by_type):
            peak = max(loads) if loads else 0
            if best is None or peak < best:
                best = peak
            return
        nodetype = counts_by_type[i]
        for j, (host_id, cap, _pre, types) in enumerate(hosts):
            if nodetype not in types or loads[j] >= cap:
                continue
            loads[j] += 1
            rec(i + 1, loads)
            loads[j] -= 1

    rec(0, [pre for (_h, _c, pre, _t) in hosts])
    return best
