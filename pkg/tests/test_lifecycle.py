"""Twin state machine transitions and phase derivation rules."""

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from slicectl.infra import NodeHandle
from slicectl.lifecycle import (
    MAX_ATTEMPTS,
    AppStatus,
    ClusterPhase,
    IllegalTransition,
    NodeState,
    NodeTwin,
    Role,
    SlicePhase,
    TwinEvent,
    backoff,
    derive_cluster_phase,
    derive_slice_phase,
    transition,
)

HANDLE = NodeHandle("d-0000", "d", "h", "vm", "10.0.0.1")


def _twin(state=NodeState.REQUESTED, attempts=0, handle=None, role=Role.MASTER):
    return NodeTwin(
        node_id="n0",
        cluster="c0",
        role=role,
        state=state,
        attempts=attempts,
        handle=handle,
    )


# ---------------------------------------------------------------------------
# transitions


def test_first_legal_step():
    twin = transition(_twin(), TwinEvent.ALLOC_OK, at=3, handle=HANDLE)
    assert twin.state is NodeState.ALLOCATED
    assert twin.handle == HANDLE
    assert twin.last_transition == 3


def test_full_chain_to_ready():
    twin = _twin()
    twin = transition(twin, TwinEvent.ALLOC_OK, handle=HANDLE)
    twin = transition(twin, TwinEvent.OS_OK)
    twin = transition(twin, TwinEvent.K8S_OK)
    assert twin.state is NodeState.KUBERNETES_CONFIGURED
    twin = transition(twin, TwinEvent.READY_CONFIRMED)
    assert twin.state is NodeState.READY
    assert twin.attempts == 0


def test_terminal_state_guard():
    twin = _twin(state=NodeState.READY)
    with pytest.raises(IllegalTransition):
        transition(twin, TwinEvent.ALLOC_OK)


def test_fail_clears_handle_and_counts_attempt():
    twin = _twin(state=NodeState.ALLOCATED, handle=HANDLE)
    failed = transition(twin, TwinEvent.OS_FAIL, at=9, reason="injected-fault:install_os")
    assert failed.state is NodeState.FAILED
    assert failed.handle is None
    assert failed.attempts == 1
    assert failed.failure_reason == "injected-fault:install_os"


def test_fail_events_respect_origin_states():
    with pytest.raises(IllegalTransition):
        transition(_twin(state=NodeState.REQUESTED), TwinEvent.OS_FAIL)
    with pytest.raises(IllegalTransition):
        transition(_twin(state=NodeState.ALLOCATED), TwinEvent.ALLOC_FAIL)
    # K8s work spans setup and fabric, so both origin states are legal
    transition(_twin(state=NodeState.IMAGE_INSTALLED), TwinEvent.K8S_FAIL)
    transition(_twin(state=NodeState.KUBERNETES_CONFIGURED), TwinEvent.K8S_FAIL)


def test_retry_resets_to_requested():
    twin = _twin(state=NodeState.FAILED, attempts=1)
    retried = transition(twin, TwinEvent.RETRY_GRANTED, at=5)
    assert retried.state is NodeState.REQUESTED
    assert retried.attempts == 1
    assert retried.failure_reason is None


def test_retry_denied_after_exhaustion():
    twin = _twin(state=NodeState.FAILED, attempts=MAX_ATTEMPTS)
    assert twin.exhausted
    with pytest.raises(IllegalTransition):
        transition(twin, TwinEvent.RETRY_GRANTED)


def test_backoff_doubles():
    assert [backoff(n) for n in (1, 2, 3)] == [1, 2, 4]


@settings(max_examples=200, deadline=None)
@given(
    state=st.sampled_from(list(NodeState)),
    event=st.sampled_from(list(TwinEvent)),
    attempts=st.integers(0, MAX_ATTEMPTS),
)
def test_attempts_monotone_and_bounded(state, event, attempts):
    twin = _twin(state=state, attempts=attempts)
    try:
        after = transition(twin, event, handle=HANDLE)
    except IllegalTransition:
        return
    assert after.attempts >= twin.attempts
    assert after.attempts <= MAX_ATTEMPTS


# ---------------------------------------------------------------------------
# cluster phase


def _nodes(*states, attempts=0):
    return [
        NodeTwin(node_id=f"n{i}", cluster="c0", role=Role.WORKER, state=s, attempts=attempts)
        for i, s in enumerate(states)
    ]


def test_cluster_ready_when_everything_done():
    phase = derive_cluster_phase(
        _nodes(NodeState.READY, NodeState.READY), {"app": AppStatus.DEPLOYED}
    )
    assert phase is ClusterPhase.READY


def test_cluster_installing_kubernetes_rule():
    phase = derive_cluster_phase(
        _nodes(NodeState.READY, NodeState.IMAGE_INSTALLED), {}
    )
    assert phase is ClusterPhase.INSTALLING_KUBERNETES


def test_cluster_failed_on_exhausted_worker():
    phase = derive_cluster_phase(
        _nodes(NodeState.READY) + _nodes(NodeState.FAILED, attempts=MAX_ATTEMPTS), {}
    )
    assert phase is ClusterPhase.FAILED


def test_cluster_pending_then_provisioning():
    assert derive_cluster_phase(_nodes(NodeState.REQUESTED, NodeState.REQUESTED), {}) is (
        ClusterPhase.PENDING
    )
    assert derive_cluster_phase(_nodes(NodeState.REQUESTED, NodeState.ALLOCATED), {}) is (
        ClusterPhase.PROVISIONING
    )


def test_cluster_retryable_failure_is_provisioning():
    phase = derive_cluster_phase(
        _nodes(NodeState.READY) + _nodes(NodeState.FAILED, attempts=1), {}
    )
    assert phase is ClusterPhase.PROVISIONING


def test_cluster_app_progression():
    ready = _nodes(NodeState.READY)
    assert derive_cluster_phase(ready, {"a": AppStatus.PENDING}) is ClusterPhase.CLUSTER_READY
    assert (
        derive_cluster_phase(ready, {"a": AppStatus.WAITING_SHARE})
        is ClusterPhase.DEPLOYING_APPS
    )
    assert (
        derive_cluster_phase(ready, {"a": AppStatus.DEPLOYED, "b": AppStatus.PENDING})
        is ClusterPhase.DEPLOYING_APPS
    )
    assert derive_cluster_phase(ready, {"a": AppStatus.FAILED}) is ClusterPhase.FAILED
    assert derive_cluster_phase(ready, {}) is ClusterPhase.READY


# ---------------------------------------------------------------------------
# slice phase


def test_slice_all_ready():
    phases = [ClusterPhase.READY] * 3
    assert derive_slice_phase(phases) is SlicePhase.READY


def test_slice_any_failed():
    assert (
        derive_slice_phase([ClusterPhase.READY, ClusterPhase.FAILED, ClusterPhase.READY])
        is SlicePhase.FAILED
    )


def test_slice_mixed_is_deploying():
    assert (
        derive_slice_phase(
            [ClusterPhase.PENDING, ClusterPhase.PROVISIONING, ClusterPhase.READY]
        )
        is SlicePhase.DEPLOYING
    )


def test_slice_all_pending():
    assert derive_slice_phase([ClusterPhase.PENDING] * 2) is SlicePhase.PENDING


def test_slice_phase_needs_clusters():
    with pytest.raises(ValueError):
        derive_slice_phase([])


@settings(max_examples=200, deadline=None)
@given(
    states=st.lists(st.sampled_from(list(NodeState)), min_size=1, max_size=5),
    attempts=st.integers(0, MAX_ATTEMPTS),
    apps=st.dictionaries(
        st.sampled_from(["a", "b", "c"]), st.sampled_from(list(AppStatus)), max_size=3
    ),
)
def test_phase_functions_total_and_pure(states, attempts, apps):
    nodes = _nodes(*states, attempts=attempts)
    first = derive_cluster_phase(nodes, apps)
    second = derive_cluster_phase(nodes, apps)
    assert first is second
    assert isinstance(first, ClusterPhase)
    slice_phase = derive_slice_phase([first])
    assert isinstance(slice_phase, SlicePhase)
