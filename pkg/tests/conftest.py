"""Shared fixtures: golden documents, demo domains, audited engine runs."""

from __future__ import annotations

from pathlib import Path

import pytest

from slicectl import infra
from slicectl.engine import Engine
from slicectl.store import MemoryLog

FIXTURES = Path(__file__).resolve().parent.parent / "fixtures"


@pytest.fixture(scope="session")
def fig_text() -> str:
    return (FIXTURES / "liqo.yaml").read_text()


@pytest.fixture(scope="session")
def domains_text() -> str:
    return (FIXTURES / "domains.yaml").read_text()


@pytest.fixture(scope="session")
def campaign_text() -> str:
    return (FIXTURES / "campaign.yaml").read_text()


@pytest.fixture()
def demo_inventories(domains_text):
    return infra.load_inventories(domains_text)


def make_engine(domains_text: str, seed: int = 42, log=None) -> Engine:
    engine = Engine(log=log if log is not None else MemoryLog(), seed=seed)
    for inv in infra.load_inventories(domains_text):
        engine.register_domain(inv)
    return engine


@pytest.fixture()
def engine(domains_text) -> Engine:
    return make_engine(domains_text)


class AuditLog(MemoryLog):
    """Asserts infra capacity invariants after every appended record."""

    def __init__(self):
        super().__init__()
        self.engine: Engine | None = None
        self.checked = 0

    def append(self, record):
        super().append(record)
        if self.engine is None:
            return
        mgr = self.engine.infra
        for domain in mgr.domains:
            inv = mgr.inventory(domain)
            live_by_host: dict[str, int] = {}
            for handle in mgr.live_handles(domain):
                live_by_host[handle.host_id] = live_by_host.get(handle.host_id, 0) + 1
            for host in inv.hosts:
                assert 0 <= host.allocated <= host.capacity_slots, (
                    f"capacity violated on {domain}/{host.host_id} at seq {record.seq}"
                )
                assert live_by_host.get(host.host_id, 0) == host.allocated, (
                    f"handle/slot bookkeeping drift on {domain}/{host.host_id}"
                )
        for s in self.engine.slices.values():
            for twin in s.twins.values():
                assert twin.attempts <= 3
        self.checked += 1


def make_audited_engine(domains_text: str, seed: int = 42) -> tuple[Engine, AuditLog]:
    log = AuditLog()
    engine = Engine(log=log, seed=seed)
    log.engine = engine
    for inv in infra.load_inventories(domains_text):
        engine.register_domain(inv)
    return engine, log


def node_transition_chains(engine: Engine) -> dict[str, list[str]]:
    """Per-node (slice-qualified) sequence of state transitions from the log."""
    chains: dict[str, list[str]] = {}
    for record in engine.log.records():
        if record.kind != "transition":
            continue
        payload = record.payload()
        key = f"{record.subject.slice}:{record.subject.node}"
        chains.setdefault(key, []).append(payload["event"])
    return chains


def task_intervals(engine: Engine) -> dict[str, list[tuple[int, int, str]]]:
    """task id -> [(start, end, status)] attempts, from the event log."""
    spans: dict[str, list[tuple[int, int, str]]] = {}
    for record in engine.log.records():
        if record.kind != "task-started":
            continue
        payload = record.payload()
        spans.setdefault(payload["task"], []).append(
            (record.at, payload["ends_at"], payload["status"])
        )
    return spans


def completion_times(engine: Engine, kind_prefix: str = "") -> dict[str, int]:
    """task id -> completion time for completed tasks matching the prefix."""
    out: dict[str, int] = {}
    for record in engine.log.records():
        if record.kind != "task-completed":
            continue
        tid = record.payload()["task"]
        if tid.startswith(kind_prefix):
            out[tid] = record.at
    return out
