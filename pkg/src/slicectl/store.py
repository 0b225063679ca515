"""Event-sourced persistence: append-only record log with periodic snapshots.

The log is line-delimited JSON with a format-version header. Every state
change in the engine is one record, applied through the same reducer live
and on replay, so replaying a log prefix reconstructs exactly the state the
engine had when that record was appended. A truncated trailing line is
dropped with a warning; corruption before the tail is fatal.
"""

from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass, field
from typing import Any, Callable, Iterable

logger = logging.getLogger(__name__)

FORMAT_NAME = "slicectl-events"
FORMAT_VERSION = 1

SNAPSHOT_EVERY = 1000


class StorageError(Exception):
    pass


class SequenceGap(StorageError):
    pass


class CorruptLog(StorageError):
    pass


@dataclass(frozen=True)
class Subject:
    slice: str | None = None
    cluster: str | None = None
    node: str | None = None
    app: str | None = None

    def to_dict(self) -> dict[str, str]:
        return {k: v for k, v in self.__dict__.items() if v is not None}

    @classmethod
    def from_dict(cls, data: dict[str, str]) -> "Subject":
        return cls(**data)


@dataclass(frozen=True)
class EventRecord:
    seq: int
    at: int
    subject: Subject
    kind: str
    detail: str

    def payload(self) -> dict[str, Any]:
        return json.loads(self.detail) if self.detail else {}


def encode_record(record: EventRecord) -> str:
    return json.dumps(
        {
            "seq": record.seq,
            "at": record.at,
            "subject": record.subject.to_dict(),
            "kind": record.kind,
            "detail": record.detail,
        },
        sort_keys=True,
        separators=(",", ":"),
    )


def decode_record(data: dict[str, Any]) -> EventRecord:
    return EventRecord(
        seq=data["seq"],
        at=data["at"],
        subject=Subject.from_dict(data["subject"]),
        kind=data["kind"],
        detail=data["detail"],
    )


def _header_line() -> str:
    return json.dumps(
        {"format": FORMAT_NAME, "version": FORMAT_VERSION},
        sort_keys=True,
        separators=(",", ":"),
    )


@dataclass
class LogContents:
    records: list[EventRecord] = field(default_factory=list)
    snapshots: list[tuple[int, dict[str, Any]]] = field(default_factory=list)
    dropped_tail: bool = False

    def last_snapshot_before(self, seq: int | None = None) -> tuple[int, dict[str, Any]] | None:
        best = None
        for after_seq, state in self.snapshots:
            if seq is None or after_seq <= seq:
                best = (after_seq, state)
        return best


class EventLog:
    """In-memory log; the file-backed variant subclasses the same surface."""

    def __init__(self, snapshot_provider: Callable[[], dict[str, Any]] | None = None,
                 snapshot_every: int = SNAPSHOT_EVERY):
        self.snapshot_provider = snapshot_provider
        self.snapshot_every = snapshot_every
        self._records: list[EventRecord] = []
        self._snapshots: list[tuple[int, dict[str, Any]]] = []
        self.last_seq = 0

    def append(self, record: EventRecord) -> None:
        if record.seq != self.last_seq + 1:
            raise SequenceGap(f"expected seq {self.last_seq + 1}, got {record.seq}")
        self._write(record)
        self._records.append(record)
        self.last_seq = record.seq
        if self.snapshot_provider and record.seq % self.snapshot_every == 0:
            state = self.snapshot_provider()
            self._write_snapshot(record.seq, state)
            self._snapshots.append((record.seq, state))

    def records(self) -> list[EventRecord]:
        return list(self._records)

    def export_text(self) -> str:
        lines = [_header_line()]
        lines += [encode_record(r) for r in self._records]
        return "\n".join(lines) + "\n"

    def _write(self, record: EventRecord) -> None:
        pass

    def _write_snapshot(self, after_seq: int, state: dict[str, Any]) -> None:
        pass

    def close(self) -> None:
        pass


class MemoryLog(EventLog):
    pass


class FileLog(EventLog):
    """Durable log: every record is flushed (and fsynced by default)."""

    def __init__(
        self,
        path: str | os.PathLike,
        snapshot_provider: Callable[[], dict[str, Any]] | None = None,
        snapshot_every: int = SNAPSHOT_EVERY,
        fsync: bool = True,
    ):
        super().__init__(snapshot_provider, snapshot_every)
        self.path = os.fspath(path)
        self.fsync = fsync
        fresh = not os.path.exists(self.path) or os.path.getsize(self.path) == 0
        self._fh = open(self.path, "a", encoding="utf-8")
        if fresh:
            self._fh.write(_header_line() + "\n")
            self._flush()

    @classmethod
    def resume(
        cls,
        path: str | os.PathLike,
        snapshot_provider: Callable[[], dict[str, Any]] | None = None,
        snapshot_every: int = SNAPSHOT_EVERY,
        fsync: bool = True,
    ) -> tuple["FileLog", LogContents]:
        """Open an existing log for appending, returning its prior contents."""
        contents = read_log(path)
        log = cls(path, snapshot_provider, snapshot_every, fsync)
        log._records = list(contents.records)
        log._snapshots = list(contents.snapshots)
        log.last_seq = contents.records[-1].seq if contents.records else 0
        return log, contents

    def _write(self, record: EventRecord) -> None:
        self._fh.write(encode_record(record) + "\n")
        self._flush()

    def _write_snapshot(self, after_seq: int, state: dict[str, Any]) -> None:
        line = json.dumps(
            {"snapshot_after": after_seq, "world": state},
            sort_keys=True,
            separators=(",", ":"),
        )
        self._fh.write(line + "\n")
        self._flush()

    def _flush(self) -> None:
        self._fh.flush()
        if self.fsync:
            os.fsync(self._fh.fileno())

    def close(self) -> None:
        self._fh.close()


def read_log(path: str | os.PathLike) -> LogContents:
    """Read a log file, tolerating a truncated trailing line.

    The header must parse; any undecodable line that is not the last one is
    mid-log corruption and fatal.
    """
    with open(path, "rb") as fh:
        raw = fh.read()
    lines = raw.split(b"\n")
    # a trailing newline produces one empty tail element; keep interior blanks
    if lines and lines[-1] == b"":
        lines.pop()
    if not lines:
        raise CorruptLog(f"{path}: missing header")
    contents = LogContents()
    parsed: list[dict[str, Any] | None] = []
    for line in lines:
        try:
            data = json.loads(line.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError):
            data = None
        # a cut can leave a line prefix that still parses (e.g. a bare number)
        parsed.append(data if isinstance(data, dict) else None)
    for i, data in enumerate(parsed):
        if data is None:
            if i == len(parsed) - 1:
                logger.warning("%s: dropping truncated trailing record", path)
                contents.dropped_tail = True
                break
            raise CorruptLog(f"{path}: undecodable line {i + 1}")
        if i == 0:
            if data.get("format") != FORMAT_NAME:
                raise CorruptLog(f"{path}: unrecognized header")
            if data.get("version") != FORMAT_VERSION:
                raise CorruptLog(f"{path}: unsupported version {data.get('version')}")
            continue
        if "snapshot_after" in data:
            contents.snapshots.append((data["snapshot_after"], data["world"]))
            continue
        try:
            record = decode_record(data)
        except (KeyError, TypeError) as exc:
            if i == len(parsed) - 1:
                logger.warning("%s: dropping malformed trailing record", path)
                contents.dropped_tail = True
                break
            raise CorruptLog(f"{path}: malformed record on line {i + 1}") from exc
        expected = contents.records[-1].seq + 1 if contents.records else record.seq
        if record.seq != expected:
            raise CorruptLog(
                f"{path}: sequence gap at line {i + 1} (expected {expected}, got {record.seq})"
            )
        contents.records.append(record)
    return contents


def replay(path: str | os.PathLike) -> "Any":
    """Reconstruct an engine (and its world) from a log file.

    Prefers the most recent snapshot, then folds the remaining records; the
    derived status views equal those the original engine reported when the
    last surviving record was appended.
    """
    from .engine import Engine

    contents = read_log(path)
    return Engine.from_contents(contents)


def replay_records(records: Iterable[EventRecord]) -> "Any":
    """Fold records only, ignoring snapshots (full replay)."""
    from .engine import Engine

    contents = LogContents(records=list(records))
    return Engine.from_contents(contents, use_snapshot=False)
