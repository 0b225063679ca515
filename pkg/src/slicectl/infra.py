"""Uniform infrastructure-manager interface over simulated deployment domains.

Three backend kinds (cloud, testbed, workstation) differ only in their
latency envelopes and in whether an OS account is meaningful. All durations
and fault decisions are counter-based hashes of (seed, domain, op, n), so a
given inventory, operation sequence, and seed always reproduce the same
handles, durations, and fault firings without any hidden RNG state.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Iterable, Mapping

import yaml


class InfraError(Exception):
    pass


class InvalidInventory(InfraError):
    pass


class DuplicateDomain(InfraError):
    pass


class UnknownDomain(InfraError):
    pass


class UnknownHost(InfraError):
    pass


class CapacityExhausted(InfraError):
    pass


class UnsupportedNodeType(InfraError):
    pass


class UnknownImage(InfraError):
    pass


class UnknownHandle(InfraError):
    pass


class OsNotInstalled(InfraError):
    """A configuration step ran before the node had an OS image."""


class InjectedFault(InfraError):
    def __init__(self, target: str, domain: str, duration: int):
        self.target = target
        self.domain = domain
        self.duration = duration
        super().__init__(f"injected fault: {target} in {domain}")


class DomainKind(str, Enum):
    CLOUD = "cloud"
    TESTBED = "testbed"
    WORKSTATION = "workstation"


@dataclass
class HostRecord:
    host_id: str
    capacity_slots: int
    supported_nodetypes: frozenset[str]
    available_osimages: frozenset[str]
    allocated: int = 0

    @property
    def free_slots(self) -> int:
        return self.capacity_slots - self.allocated


@dataclass
class DomainInventory:
    domain: str
    kind: DomainKind
    hosts: list[HostRecord]

    def host(self, host_id: str) -> HostRecord:
        for h in self.hosts:
            if h.host_id == host_id:
                return h
        raise KeyError(host_id)


@dataclass(frozen=True)
class NodeHandle:
    handle_id: str
    domain: str
    host_id: str
    nodetype: str
    address: str


@dataclass(frozen=True)
class FaultSpec:
    """Deterministic fault injection for one (target op, domain) pair.

    Exactly one of ``probability`` / ``fire_on_nth`` is set. Probability
    draws are hashed from the world seed when ``seed_scoped`` (the default),
    so a fault profile reshuffles with the seed rather than with wall clock.
    """

    target: str  # allocate | install_os | run_step
    domain: str
    probability: float | None = None
    fire_on_nth: int | None = None
    seed_scoped: bool = True

    def __post_init__(self):
        if (self.probability is None) == (self.fire_on_nth is None):
            raise ValueError("exactly one of probability / fire_on_nth must be set")
        if self.target not in ("allocate", "install_os", "run_step"):
            raise ValueError(f"unknown fault target {self.target!r}")
        if self.probability is not None and not 0.0 <= self.probability <= 1.0:
            raise ValueError("probability must be in [0, 1]")
        if self.fire_on_nth is not None and self.fire_on_nth < 1:
            raise ValueError("fire_on_nth must be positive")


@dataclass(frozen=True)
class StepResult:
    step: str
    duration: int


@dataclass(frozen=True)
class AllocationResult:
    handle: NodeHandle
    duration: int


# Latency envelopes per backend kind, in virtual time units. Testbed
# provisioning dominates by design (physical-node imaging is slow).
DURATION_RANGES: dict[str, dict[DomainKind, tuple[int, int]]] = {
    "allocate": {
        DomainKind.CLOUD: (2, 5),
        DomainKind.TESTBED: (20, 60),
        DomainKind.WORKSTATION: (3, 8),
    },
    "install_os": {
        DomainKind.CLOUD: (5, 10),
        DomainKind.TESTBED: (30, 90),
        DomainKind.WORKSTATION: (6, 12),
    },
    "run_step": {
        DomainKind.CLOUD: (1, 4),
        DomainKind.TESTBED: (5, 15),
        DomainKind.WORKSTATION: (2, 5),
    },
}


def expected_duration(op: str, kind: DomainKind) -> float:
    lo, hi = DURATION_RANGES[op][kind]
    return (lo + hi) / 2


def _digest(*key: Any) -> int:
    blob = "|".join(str(k) for k in key).encode()
    return int.from_bytes(hashlib.sha256(blob).digest()[:8], "big")


def draw_int(lo: int, hi: int, *key: Any) -> int:
    return lo + _digest(*key) % (hi - lo + 1)


def draw_unit(*key: Any) -> float:
    return _digest(*key) / 2**64


# --------------------------------------------------------------------------
# registry files


def load_inventories(text: str) -> list[DomainInventory]:
    """Load a domain registry file: one YAML document per domain."""
    inventories = []
    for doc in yaml.safe_load_all(text):
        if doc is None:
            continue
        inventories.append(inventory_from_dict(doc))
    return inventories


def inventory_from_dict(doc: Mapping[str, Any]) -> DomainInventory:
    try:
        kind = DomainKind(doc["kind"])
        hosts = [
            HostRecord(
                host_id=h["host_id"],
                capacity_slots=int(h["capacity_slots"]),
                supported_nodetypes=frozenset(h["supported_nodetypes"]),
                available_osimages=frozenset(h["available_osimages"]),
                allocated=int(h.get("allocated", 0)),
            )
            for h in doc["hosts"]
        ]
        return DomainInventory(domain=doc["domain"], kind=kind, hosts=hosts)
    except (KeyError, TypeError, ValueError) as exc:
        raise InvalidInventory(f"bad inventory document: {exc}") from exc


def inventory_to_dict(inv: DomainInventory) -> dict[str, Any]:
    return {
        "domain": inv.domain,
        "kind": inv.kind.value,
        "hosts": [
            {
                "host_id": h.host_id,
                "capacity_slots": h.capacity_slots,
                "supported_nodetypes": sorted(h.supported_nodetypes),
                "available_osimages": sorted(h.available_osimages),
                "allocated": h.allocated,
            }
            for h in inv.hosts
        ],
    }


def check_inventory(inv: DomainInventory) -> None:
    seen: set[str] = set()
    for h in inv.hosts:
        if h.host_id in seen:
            raise InvalidInventory(f"duplicate host id {h.host_id!r} in {inv.domain}")
        seen.add(h.host_id)
        if h.capacity_slots < 1:
            raise InvalidInventory(f"host {h.host_id!r} must have positive capacity")
        if not 0 <= h.allocated <= h.capacity_slots:
            raise InvalidInventory(f"host {h.host_id!r} allocated exceeds capacity")
    if not inv.hosts:
        raise InvalidInventory(f"domain {inv.domain!r} has no hosts")
    if inv.kind is DomainKind.WORKSTATION and len(inv.hosts) != 1:
        raise InvalidInventory(
            f"workstation domain {inv.domain!r} must have exactly one host"
        )


# --------------------------------------------------------------------------
# the manager

_OPS = ("allocate", "install_os", "run_step")


@dataclass
class _HandleState:
    handle: NodeHandle
    os_installed: bool = False


@dataclass
class _DomainState:
    inventory: DomainInventory
    index: int
    op_counts: dict[str, int] = field(default_factory=lambda: {op: 0 for op in _OPS})
    handle_seq: int = 0
    live: dict[str, _HandleState] = field(default_factory=dict)


@dataclass(frozen=True)
class OpOutcome:
    """Result of previewing one infra operation; committed as a unit.

    ``status`` is "ok", "fault", or "error:<Reason>"; the preview never
    mutates, so the engine can persist the outcome before applying it.
    """

    op: str
    domain: str
    status: str
    duration: int
    host_id: str | None = None
    nodetype: str | None = None
    handle_id: str | None = None
    address: str | None = None
    osimage: str | None = None
    step: str | None = None

    @property
    def ok(self) -> bool:
        return self.status == "ok"

    def to_dict(self) -> dict[str, Any]:
        return {k: v for k, v in self.__dict__.items() if v is not None}

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "OpOutcome":
        return cls(**data)


class InfraManager:
    """Holds every registered domain and serializes operations against it."""

    def __init__(self, seed: int = 0):
        self.seed = seed
        self._domains: dict[str, _DomainState] = {}
        self._fault_specs: list[FaultSpec] = []
        self._fault_counts: list[int] = []

    # -- registration

    def register_domain(self, inv: DomainInventory) -> None:
        if inv.domain in self._domains:
            raise DuplicateDomain(inv.domain)
        check_inventory(inv)
        self._domains[inv.domain] = _DomainState(inventory=inv, index=len(self._domains))

    def register_fault(self, spec: FaultSpec) -> None:
        self._fault_specs.append(spec)
        self._fault_counts.append(0)

    @property
    def domains(self) -> list[str]:
        return list(self._domains)

    def inventory(self, domain: str) -> DomainInventory:
        if domain not in self._domains:
            raise UnknownDomain(domain)
        return self._domains[domain].inventory

    def domain_kind(self, domain: str) -> DomainKind:
        return self.inventory(domain).kind

    def live_handles(self, domain: str) -> list[NodeHandle]:
        return [hs.handle for hs in self._domains[domain].live.values()]

    # -- preview/commit core (used by the engine's record-driven loop)

    def preview(
        self,
        op: str,
        domain: str,
        *,
        host_id: str | None = None,
        nodetype: str | None = None,
        handle_id: str | None = None,
        osimage: str | None = None,
        osaccount: str | None = None,
        step: str | None = None,
    ) -> OpOutcome:
        state = self._domain_state(domain)
        kind = state.inventory.kind
        n = state.op_counts[op]
        lo, hi = DURATION_RANGES[op][kind]
        duration = draw_int(lo, hi, self.seed, domain, op, n)
        status = self._fault_status(op, domain, n) or self._check(
            op, state, host_id, nodetype, handle_id, osimage
        )
        out = OpOutcome(
            op=op,
            domain=domain,
            status=status,
            duration=duration,
            host_id=host_id,
            nodetype=nodetype,
            handle_id=handle_id,
            osimage=osimage,
            step=step,
        )
        if op == "allocate" and status == "ok":
            seq = state.handle_seq
            handle_id = f"{domain}-{seq:04d}"
            address = f"10.{state.index}.{seq // 250}.{seq % 250 + 1}"
            out = OpOutcome(**{**out.__dict__, "handle_id": handle_id, "address": address})
        return out

    def commit(self, out: OpOutcome) -> None:
        """Apply a previewed outcome: counters always advance, state only on ok."""
        state = self._domain_state(out.domain)
        state.op_counts[out.op] += 1
        for i, spec in enumerate(self._fault_specs):
            if spec.target == out.op and spec.domain == out.domain:
                self._fault_counts[i] += 1
        if not out.ok:
            return
        if out.op == "allocate":
            host = state.inventory.host(out.host_id)
            host.allocated += 1
            state.handle_seq += 1
            handle = NodeHandle(
                handle_id=out.handle_id,
                domain=out.domain,
                host_id=out.host_id,
                nodetype=out.nodetype,
                address=out.address,
            )
            state.live[out.handle_id] = _HandleState(handle=handle)

    def finalize_install(self, domain: str, handle_id: str) -> None:
        self._live_state(domain, handle_id).os_installed = True

    def _fault_status(self, op: str, domain: str, n: int) -> str | None:
        for i, spec in enumerate(self._fault_specs):
            if spec.target != op or spec.domain != domain:
                continue
            count = self._fault_counts[i]
            if spec.fire_on_nth is not None:
                if count + 1 == spec.fire_on_nth:
                    return "fault"
            else:
                scope = self.seed if spec.seed_scoped else "unscoped"
                if draw_unit(scope, "fault", domain, op, i, count) < spec.probability:
                    return "fault"
        return None

    def _check(
        self,
        op: str,
        state: _DomainState,
        host_id: str | None,
        nodetype: str | None,
        handle_id: str | None,
        osimage: str | None,
    ) -> str:
        inv = state.inventory
        if op == "allocate":
            try:
                host = inv.host(host_id)
            except KeyError:
                return "error:UnknownHost"
            if nodetype not in host.supported_nodetypes:
                return "error:UnsupportedNodeType"
            if host.free_slots < 1:
                return "error:CapacityExhausted"
            return "ok"
        if handle_id not in state.live:
            return "error:UnknownHandle"
        if op == "install_os":
            domain_images = set().union(*(h.available_osimages for h in inv.hosts))
            if osimage not in domain_images:
                return "error:UnknownImage"
            return "ok"
        # run_step
        if not state.live[handle_id].os_installed:
            return "error:OsNotInstalled"
        return "ok"

    # -- direct synchronous API

    def allocate(
        self, domain: str, nodetype: str, host_id: str, clock: int = 0
    ) -> AllocationResult:
        out = self.preview("allocate", domain, host_id=host_id, nodetype=nodetype)
        self.commit(out)
        self._raise_if_bad(out)
        return AllocationResult(
            handle=self._domain_state(domain).live[out.handle_id].handle,
            duration=out.duration,
        )

    def install_os(
        self, handle: NodeHandle, osimage: str, osaccount: str | None = None
    ) -> int:
        out = self.preview(
            "install_os",
            handle.domain,
            handle_id=handle.handle_id,
            osimage=osimage,
            osaccount=osaccount,
        )
        self.commit(out)
        self._raise_if_bad(out)
        self.finalize_install(handle.domain, handle.handle_id)
        return out.duration

    def run_step(self, handle: NodeHandle, step: str) -> StepResult:
        out = self.preview(
            "run_step", handle.domain, handle_id=handle.handle_id, step=step
        )
        self.commit(out)
        self._raise_if_bad(out)
        return StepResult(step=step, duration=out.duration)

    def release(self, handle: NodeHandle) -> None:
        state = self._domain_state(handle.domain)
        if handle.handle_id not in state.live:
            raise UnknownHandle(handle.handle_id)
        del state.live[handle.handle_id]
        state.inventory.host(handle.host_id).allocated -= 1

    def release_by_id(self, domain: str, handle_id: str) -> None:
        state = self._domain_state(domain)
        if handle_id in state.live:
            self.release(state.live[handle_id].handle)

    def _raise_if_bad(self, out: OpOutcome) -> None:
        if out.status == "fault":
            raise InjectedFault(out.op, out.domain, out.duration)
        if out.status.startswith("error:"):
            reason = out.status.split(":", 1)[1]
            exc_cls = {
                "UnknownHost": UnknownHost,
                "UnsupportedNodeType": UnsupportedNodeType,
                "CapacityExhausted": CapacityExhausted,
                "UnknownImage": UnknownImage,
                "UnknownHandle": UnknownHandle,
                "OsNotInstalled": OsNotInstalled,
            }[reason]
            raise exc_cls(f"{out.op} in {out.domain}: {reason}")

    def _domain_state(self, domain: str) -> _DomainState:
        if domain not in self._domains:
            raise UnknownDomain(domain)
        return self._domains[domain]

    def _live_state(self, domain: str, handle_id: str) -> _HandleState:
        state = self._domain_state(domain)
        if handle_id not in state.live:
            raise UnknownHandle(handle_id)
        return state.live[handle_id]

    def handle(self, domain: str, handle_id: str) -> NodeHandle:
        return self._live_state(domain, handle_id).handle

    # -- snapshot support

    def to_state(self) -> dict[str, Any]:
        return {
            "seed": self.seed,
            "domains": {
                name: {
                    "inventory": inventory_to_dict(ds.inventory),
                    "index": ds.index,
                    "op_counts": dict(ds.op_counts),
                    "handle_seq": ds.handle_seq,
                    "live": {
                        hid: {
                            "host_id": hs.handle.host_id,
                            "nodetype": hs.handle.nodetype,
                            "address": hs.handle.address,
                            "os_installed": hs.os_installed,
                        }
                        for hid, hs in ds.live.items()
                    },
                }
                for name, ds in self._domains.items()
            },
            "faults": [
                {
                    "target": s.target,
                    "domain": s.domain,
                    "probability": s.probability,
                    "fire_on_nth": s.fire_on_nth,
                    "seed_scoped": s.seed_scoped,
                    "count": c,
                }
                for s, c in zip(self._fault_specs, self._fault_counts)
            ],
        }

    @classmethod
    def from_state(cls, state: Mapping[str, Any]) -> "InfraManager":
        mgr = cls(seed=state["seed"])
        ordered = sorted(state["domains"].items(), key=lambda kv: kv[1]["index"])
        for name, ds in ordered:
            mgr._domains[name] = _DomainState(
                inventory=inventory_from_dict(ds["inventory"]),
                index=ds["index"],
                op_counts=dict(ds["op_counts"]),
                handle_seq=ds["handle_seq"],
                live={
                    hid: _HandleState(
                        handle=NodeHandle(
                            handle_id=hid,
                            domain=name,
                            host_id=h["host_id"],
                            nodetype=h["nodetype"],
                            address=h["address"],
                        ),
                        os_installed=h["os_installed"],
                    )
                    for hid, h in ds["live"].items()
                },
            )
        for f in state["faults"]:
            mgr._fault_specs.append(
                FaultSpec(
                    target=f["target"],
                    domain=f["domain"],
                    probability=f["probability"],
                    fire_on_nth=f["fire_on_nth"],
                    seed_scoped=f["seed_scoped"],
                )
            )
            mgr._fault_counts.append(f["count"])
        return mgr
