"""Application-module deployment, including multi-cluster peering.

A peering master writes one join artifact per peer; each peer application
reads its artifact, checks the token names its own cluster, and records the
peering edge. Artifacts are slice-scoped and write-once. Content is a
structured token rather than a shell script: the simulation only needs the
binding the script would carry.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Mapping

from .descriptor import ApplicationSpec

SHARE_TIMEOUT = 100


class UnknownApplication(Exception):
    pass


class ArtifactConflict(Exception):
    """Write-once violation: the filename already exists in this slice."""


class ShareTokenMismatch(Exception):
    """The artifact's token binds a different peer cluster."""


class ShareTimeout(Exception):
    def __init__(self, filename: str, fires_at: int):
        self.filename = filename
        self.fires_at = fires_at
        super().__init__(f"no artifact {filename!r} by t={fires_at}")


class DriverRole(str, Enum):
    STANDALONE = "standalone"
    PEERING_MASTER = "peering_master"
    PEERING_PEER = "peering_peer"


@dataclass(frozen=True)
class AppDriver:
    name: str
    role: DriverRole
    duration: int


_DRIVERS: dict[str, AppDriver] = {
    "liqo-master": AppDriver("liqo-master", DriverRole.PEERING_MASTER, 5),
    "liqo-peer": AppDriver("liqo-peer", DriverRole.PEERING_PEER, 4),
}

_DEFAULT_DURATION = 3


def known_names() -> frozenset[str]:
    return frozenset(_DRIVERS)


def driver(name: str, strict: bool = False) -> AppDriver:
    """Look up a driver; unknown names fall back to a standalone driver."""
    if name in _DRIVERS:
        return _DRIVERS[name]
    if strict:
        raise UnknownApplication(name)
    return AppDriver(name, DriverRole.STANDALONE, _DEFAULT_DURATION)


def deploy_duration(app: ApplicationSpec) -> int:
    return driver(app.name).duration


def share_filename(peer: str) -> str:
    return f"{peer}-peer-join.sh"


@dataclass(frozen=True)
class ShareArtifact:
    filename: str
    content: bytes
    producer: tuple[str, str, str]  # (slice, cluster, app)
    created_at: int

    @property
    def token(self) -> dict[str, Any]:
        return json.loads(self.content.decode())


def make_join_token(slice_id: str, master: str, peer: str, filename: str) -> bytes:
    return json.dumps(
        {"slice": slice_id, "master": master, "peer": peer, "filename": filename},
        sort_keys=True,
    ).encode()


@dataclass
class ArtifactStore:
    """Write-once artifact store for a single slice."""

    slice_id: str
    artifacts: dict[str, ShareArtifact] = field(default_factory=dict)

    def write(self, filename: str, content: bytes, producer: tuple[str, str, str], at: int) -> ShareArtifact:
        if filename in self.artifacts:
            raise ArtifactConflict(f"{filename!r} already written in {self.slice_id}")
        artifact = ShareArtifact(
            filename=filename, content=content, producer=producer, created_at=at
        )
        self.artifacts[filename] = artifact
        return artifact

    def get(self, filename: str) -> ShareArtifact | None:
        return self.artifacts.get(filename)

    def listing(self) -> list[ShareArtifact]:
        return [self.artifacts[name] for name in sorted(self.artifacts)]


@dataclass(frozen=True)
class AwaitResult:
    artifact: ShareArtifact
    available_at: int


def await_sharefile(
    store: ArtifactStore, filename: str, from_time: int, timeout: int = SHARE_TIMEOUT
) -> AwaitResult:
    """Return the artifact once present in virtual time.

    Under the plan's producer->consumer edges this never waits; the timeout
    exists as a guard against plan bugs.
    """
    artifact = store.get(filename)
    if artifact is None:
        raise ShareTimeout(filename, from_time + timeout)
    return AwaitResult(artifact=artifact, available_at=max(from_time, artifact.created_at))


@dataclass
class PeeringTopology:
    edges: set[tuple[str, str]] = field(default_factory=set)

    def add(self, a: str, b: str) -> None:
        self.edges.add(edge(a, b))

    def sorted_edges(self) -> list[tuple[str, str]]:
        return sorted(self.edges)


def edge(a: str, b: str) -> tuple[str, str]:
    return (a, b) if a <= b else (b, a)


@dataclass(frozen=True)
class AppOutcome:
    status: str
    duration: int
    artifacts_written: tuple[str, ...] = ()
    edges_added: tuple[tuple[str, str], ...] = ()


def producer_artifacts(
    app: ApplicationSpec, cluster: str, slice_id: str
) -> list[tuple[str, bytes]]:
    """The (filename, token) pairs a peering master publishes for its peers."""
    return [
        (share_filename(peer), make_join_token(slice_id, cluster, peer, share_filename(peer)))
        for peer in app.peers
    ]


def verify_share(artifact: ShareArtifact, cluster: str, slice_id: str) -> str:
    """Check a consumed artifact's token binding; returns the master cluster."""
    token = artifact.token
    if token.get("peer") != cluster or token.get("slice") != slice_id:
        raise ShareTokenMismatch(
            f"artifact {artifact.filename!r} binds peer {token.get('peer')!r}, "
            f"not {cluster!r}"
        )
    return token["master"]


def deploy_application(
    app: ApplicationSpec,
    cluster: str,
    store: ArtifactStore,
    clock: int,
    topology: PeeringTopology | None = None,
) -> AppOutcome:
    """Synchronously deploy one application module against a slice's store.

    The engine splits this into start/complete halves around the simulated
    duration; this one-shot form performs the same effects at ``clock``.
    """
    duration = deploy_duration(app)
    done_at = clock + duration
    if app.is_producer:
        written = []
        for filename, content in producer_artifacts(app, cluster, store.slice_id):
            store.write(filename, content, (store.slice_id, cluster, app.name), done_at)
            written.append(filename)
        return AppOutcome(status="Deployed", duration=duration, artifacts_written=tuple(written))
    if app.is_consumer:
        result = await_sharefile(store, app.sharefile, clock)
        master = verify_share(result.artifact, cluster, store.slice_id)
        if topology is not None:
            topology.add(master, cluster)
        return AppOutcome(
            status="Deployed", duration=duration, edges_added=(edge(master, cluster),)
        )
    return AppOutcome(status="Deployed", duration=duration)
