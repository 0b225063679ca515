"""Digital-twin state machines for nodes and clusters.

Each compute resource is mirrored by a NodeTwin that walks the chain
Requested -> Allocated -> ImageInstalled -> KubernetesConfigured -> Ready,
with Failed reachable from any non-terminal state and re-enterable via
retry until the attempt budget is spent. Cluster and slice phases are pure
functions of the twin states and application statuses, so any snapshot of
the world derives the same status view.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from enum import Enum
from typing import Iterable, Mapping

from .infra import NodeHandle

MAX_ATTEMPTS = 3

# Exponential backoff in virtual time before the nth retry.
BACKOFF_UNITS = (1, 2, 4)


class Role(str, Enum):
    MASTER = "master"
    WORKER = "worker"


class NodeState(str, Enum):
    REQUESTED = "Requested"
    ALLOCATED = "Allocated"
    IMAGE_INSTALLED = "ImageInstalled"
    KUBERNETES_CONFIGURED = "KubernetesConfigured"
    READY = "Ready"
    FAILED = "Failed"


class TwinEvent(str, Enum):
    ALLOC_OK = "AllocOk"
    ALLOC_FAIL = "AllocFail"
    OS_OK = "OsOk"
    OS_FAIL = "OsFail"
    K8S_OK = "K8sOk"
    K8S_FAIL = "K8sFail"
    READY_CONFIRMED = "ReadyConfirmed"
    RETRY_GRANTED = "RetryGranted"


class ClusterPhase(str, Enum):
    PENDING = "Pending"
    PROVISIONING = "Provisioning"
    INSTALLING_KUBERNETES = "InstallingKubernetes"
    CLUSTER_READY = "ClusterReady"
    DEPLOYING_APPS = "DeployingApps"
    READY = "Ready"
    FAILED = "Failed"


class AppStatus(str, Enum):
    PENDING = "Pending"
    WAITING_SHARE = "WaitingShare"
    DEPLOYED = "Deployed"
    FAILED = "Failed"


class SlicePhase(str, Enum):
    PENDING = "Pending"
    DEPLOYING = "Deploying"
    READY = "Ready"
    FAILED = "Failed"
    DELETING = "Deleting"
    DELETED = "Deleted"


class IllegalTransition(Exception):
    """The event does not apply to the twin's state; an engine bug."""


@dataclass(frozen=True)
class NodeTwin:
    node_id: str
    cluster: str
    role: Role
    state: NodeState = NodeState.REQUESTED
    handle: NodeHandle | None = None
    attempts: int = 0
    last_transition: int = 0
    failure_reason: str | None = None

    @property
    def exhausted(self) -> bool:
        return self.state is NodeState.FAILED and self.attempts >= MAX_ATTEMPTS


_CHAIN = {
    (NodeState.REQUESTED, TwinEvent.ALLOC_OK): NodeState.ALLOCATED,
    (NodeState.ALLOCATED, TwinEvent.OS_OK): NodeState.IMAGE_INSTALLED,
    (NodeState.IMAGE_INSTALLED, TwinEvent.K8S_OK): NodeState.KUBERNETES_CONFIGURED,
    (NodeState.KUBERNETES_CONFIGURED, TwinEvent.READY_CONFIRMED): NodeState.READY,
}

_FAIL_FROM = {
    TwinEvent.ALLOC_FAIL: {NodeState.REQUESTED},
    TwinEvent.OS_FAIL: {NodeState.ALLOCATED},
    TwinEvent.K8S_FAIL: {NodeState.IMAGE_INSTALLED, NodeState.KUBERNETES_CONFIGURED},
}

_RANK = {
    NodeState.REQUESTED: 0,
    NodeState.ALLOCATED: 1,
    NodeState.IMAGE_INSTALLED: 2,
    NodeState.KUBERNETES_CONFIGURED: 3,
    NodeState.READY: 4,
}


def backoff(attempts: int) -> int:
    """Virtual-time delay before the retry that follows the given failure count."""
    return BACKOFF_UNITS[min(attempts, len(BACKOFF_UNITS)) - 1]


def transition(
    twin: NodeTwin,
    event: TwinEvent,
    at: int = 0,
    handle: NodeHandle | None = None,
    reason: str | None = None,
) -> NodeTwin:
    """Apply one event, returning the updated twin; illegal events raise."""
    if event in _FAIL_FROM:
        if twin.state not in _FAIL_FROM[event]:
            raise IllegalTransition(f"{twin.node_id}: {event.value} in {twin.state.value}")
        return replace(
            twin,
            state=NodeState.FAILED,
            handle=None,
            attempts=twin.attempts + 1,
            last_transition=at,
            failure_reason=reason or event.value,
        )
    if event is TwinEvent.RETRY_GRANTED:
        if twin.state is not NodeState.FAILED or twin.attempts >= MAX_ATTEMPTS:
            raise IllegalTransition(f"{twin.node_id}: retry in {twin.state.value}")
        return replace(
            twin,
            state=NodeState.REQUESTED,
            handle=None,
            last_transition=at,
            failure_reason=None,
        )
    key = (twin.state, event)
    if key not in _CHAIN:
        raise IllegalTransition(f"{twin.node_id}: {event.value} in {twin.state.value}")
    next_state = _CHAIN[key]
    if event is TwinEvent.ALLOC_OK:
        return replace(twin, state=next_state, handle=handle, last_transition=at)
    return replace(twin, state=next_state, last_transition=at)


def derive_cluster_phase(
    nodes: Iterable[NodeTwin], apps: Mapping[str, AppStatus]
) -> ClusterPhase:
    twins = list(nodes)
    if not twins:
        raise ValueError("cluster has no nodes")
    statuses = list(apps.values())
    if any(t.exhausted for t in twins) or AppStatus.FAILED in statuses:
        return ClusterPhase.FAILED
    if all(t.state is NodeState.REQUESTED for t in twins):
        return ClusterPhase.PENDING
    ranks = [_RANK.get(t.state) for t in twins]
    if all(r is not None and r >= _RANK[NodeState.IMAGE_INSTALLED] for r in ranks):
        if any(r < _RANK[NodeState.READY] for r in ranks):
            return ClusterPhase.INSTALLING_KUBERNETES
    else:
        return ClusterPhase.PROVISIONING
    # all nodes Ready from here on
    if all(s is AppStatus.DEPLOYED for s in statuses):
        return ClusterPhase.READY
    if AppStatus.WAITING_SHARE in statuses or AppStatus.DEPLOYED in statuses:
        return ClusterPhase.DEPLOYING_APPS
    return ClusterPhase.CLUSTER_READY


def derive_slice_phase(phases: Iterable[ClusterPhase]) -> SlicePhase:
    cluster_phases = list(phases)
    if not cluster_phases:
        raise ValueError("slice has no clusters")
    if all(p is ClusterPhase.PENDING for p in cluster_phases):
        return SlicePhase.PENDING
    if ClusterPhase.FAILED in cluster_phases:
        return SlicePhase.FAILED
    if all(p is ClusterPhase.READY for p in cluster_phases):
        return SlicePhase.READY
    return SlicePhase.DEPLOYING
