"""Versioned model records, deployment assignments, and the audit chain.

The registry is the control ledger of the hub: which algorithm versions
exist, where each is actively deployed, and a hash-chained audit log whose
head is persisted separately so that truncating the log to a prefix is as
detectable as editing it. Weights never enter the system; a version carries
only the digest of its opaque weights blob.

Each audit entry commits to its predecessor:

    entry_hash = sha256("{seq}|{timestamp}|{actor}|{action}|{payload_digest}|{prev_hash}")

with the timestamp in canonical form and the genesis prev_hash of 64 zeros.
Appending is the only mutation the log supports.
"""

from __future__ import annotations

import hashlib
import threading
from dataclasses import dataclass, replace
from datetime import datetime, timezone
from enum import Enum
from pathlib import Path
from typing import Callable, Iterable

from .canon import canonical_decode, canonical_digest, canonical_encode

__all__ = [
    "ModelStatus", "DeploymentMode", "AuditAction", "ModelRecord",
    "DeploymentAssignment", "AuditEntry", "ChainHead", "Registry",
    "ConflictError", "StateError", "entry_hash_of", "verify_audit_chain",
    "GENESIS_HASH",
]

GENESIS_HASH = "0" * 64


class ModelStatus(Enum):
    CANDIDATE = "CANDIDATE"
    APPROVED = "APPROVED"
    DEPLOYED = "DEPLOYED"
    SUSPENDED = "SUSPENDED"


# forward edges only, plus the deploy/suspend toggle
_ALLOWED_TRANSITIONS = {
    (ModelStatus.CANDIDATE, ModelStatus.APPROVED),
    (ModelStatus.APPROVED, ModelStatus.DEPLOYED),
    (ModelStatus.DEPLOYED, ModelStatus.SUSPENDED),
    (ModelStatus.SUSPENDED, ModelStatus.DEPLOYED),
}


class DeploymentMode(Enum):
    LOCAL = "LOCAL"
    CENTRAL = "CENTRAL"
    BOTH = "BOTH"


class AuditAction(Enum):
    REGISTER = "REGISTER"
    STATUS_CHANGE = "STATUS_CHANGE"
    ASSIGN = "ASSIGN"
    ALERT = "ALERT"
    INGEST_SUMMARY = "INGEST_SUMMARY"


class ConflictError(ValueError):
    pass


class StateError(ValueError):
    pass


@dataclass(frozen=True)
class ModelRecord:
    algorithm_id: str
    version: str
    weights_digest: str
    status: ModelStatus
    registered_at: datetime


@dataclass(frozen=True)
class DeploymentAssignment:
    site_id: str
    algorithm_id: str
    version: str
    mode: DeploymentMode
    active: bool


@dataclass(frozen=True)
class AuditEntry:
    seq: int
    timestamp: datetime
    actor: str
    action: AuditAction
    payload_digest: str
    prev_hash: str
    entry_hash: str


@dataclass(frozen=True)
class ChainHead:
    seq: int
    entry_hash: str


def _canon_ts(ts: datetime) -> str:
    # same rendering canonical serialization uses for datetimes
    if ts.tzinfo is None:
        raise ValueError("audit timestamps must be timezone-aware")
    ts = ts.astimezone(timezone.utc)
    out = ts.isoformat().replace("+00:00", "Z")
    if "." in out:
        out = out.split(".")[0] + "Z"
    return out


def entry_hash_of(seq: int, timestamp: datetime, actor: str,
                  action: AuditAction, payload_digest: str,
                  prev_hash: str) -> str:
    material = "|".join([
        str(seq), _canon_ts(timestamp), actor, action.name,
        payload_digest, prev_hash,
    ])
    return hashlib.sha256(material.encode("utf-8")).hexdigest()


def verify_audit_chain(entries: Iterable[AuditEntry],
                       head: ChainHead | None = None) -> int | None:
    """Recompute every hash and linkage. Returns None when intact, else the
    earliest broken seq (position-based, so renumbering cannot hide)."""
    entries = list(entries)
    prev = GENESIS_HASH
    for i, entry in enumerate(entries):
        seq = i + 1
        if entry.seq != seq or entry.prev_hash != prev:
            return seq
        expected = entry_hash_of(seq, entry.timestamp, entry.actor,
                                 entry.action, entry.payload_digest, prev)
        if entry.entry_hash != expected:
            return seq
        prev = entry.entry_hash
    if head is not None:
        if head.seq > len(entries):
            return len(entries) + 1  # log lost its tail
        if head.seq < len(entries):
            return head.seq + 1  # entries the head never committed to
        if head.seq and head.entry_hash != entries[-1].entry_hash:
            return head.seq
    return None


class Registry:
    """Single-writer control ledger; every mutation appends one audit entry."""

    MODELS_LOG = "models.log"
    ASSIGNMENTS_LOG = "assignments.log"
    AUDIT_LOG = "audit.log"
    AUDIT_HEAD = "audit.head"

    def __init__(self, now: Callable[[], datetime] | None = None):
        self._now = now or (lambda: datetime.now(timezone.utc))
        self._lock = threading.Lock()
        self.models: dict[tuple[str, str], ModelRecord] = {}
        self.assignments: list[DeploymentAssignment] = []
        self.audit: list[AuditEntry] = []

    # -- audit chain ---------------------------------------------------

    def append_audit(self, action: AuditAction | str, actor: str,
                     payload_digest: str,
                     at: datetime | None = None) -> AuditEntry:
        if isinstance(action, str):
            action = AuditAction[action]
        with self._lock:
            return self._append_audit_locked(action, actor, payload_digest, at)

    def _append_audit_locked(self, action: AuditAction, actor: str,
                             payload_digest: str,
                             at: datetime | None) -> AuditEntry:
        seq = len(self.audit) + 1
        ts = at if at is not None else self._now()
        prev = self.audit[-1].entry_hash if self.audit else GENESIS_HASH
        entry = AuditEntry(
            seq=seq, timestamp=ts, actor=actor, action=action,
            payload_digest=payload_digest, prev_hash=prev,
            entry_hash=entry_hash_of(seq, ts, actor, action,
                                     payload_digest, prev),
        )
        self.audit.append(entry)
        return entry

    def head(self) -> ChainHead | None:
        if not self.audit:
            return None
        return ChainHead(self.audit[-1].seq, self.audit[-1].entry_hash)

    def verify(self) -> int | None:
        return verify_audit_chain(self.audit, self.head())

    # -- model lifecycle -----------------------------------------------

    def register_version(self, rec: ModelRecord, actor: str = "hub",
                         at: datetime | None = None) -> AuditEntry:
        if rec.status is not ModelStatus.CANDIDATE:
            raise StateError("versions register as CANDIDATE")
        key = (rec.algorithm_id, rec.version)
        with self._lock:
            if key in self.models:
                raise ConflictError(
                    f"version {rec.algorithm_id} {rec.version} already registered")
            self.models[key] = rec
            return self._append_audit_locked(
                AuditAction.REGISTER, actor, canonical_digest(rec), at)

    def get_model(self, algorithm_id: str, version: str) -> ModelRecord:
        try:
            return self.models[(algorithm_id, version)]
        except KeyError:
            raise StateError(f"unknown version {algorithm_id} {version}") from None

    def set_status(self, algorithm_id: str, version: str,
                   status: ModelStatus, actor: str = "hub",
                   at: datetime | None = None) -> AuditEntry:
        with self._lock:
            rec = self.models.get((algorithm_id, version))
            if rec is None:
                raise StateError(f"unknown version {algorithm_id} {version}")
            if (rec.status, status) not in _ALLOWED_TRANSITIONS:
                raise StateError(
                    f"illegal transition {rec.status.name} -> {status.name}")
            updated = replace(rec, status=status)
            self.models[(algorithm_id, version)] = updated
            return self._append_audit_locked(
                AuditAction.STATUS_CHANGE, actor, canonical_digest(updated), at)

    # -- deployments ----------------------------------------------------

    def assign_deployment(self, assignment: DeploymentAssignment,
                          actor: str = "hub",
                          at: datetime | None = None) -> AuditEntry:
        with self._lock:
            rec = self.models.get((assignment.algorithm_id, assignment.version))
            if rec is None or rec.status is not ModelStatus.DEPLOYED:
                raise StateError(
                    f"{assignment.algorithm_id} {assignment.version} is not DEPLOYED")
            refreshed = []
            for a in self.assignments:
                if (a.active and a.site_id == assignment.site_id
                        and a.algorithm_id == assignment.algorithm_id):
                    a = replace(a, active=False)
                refreshed.append(a)
            self.assignments = refreshed
            self.assignments.append(replace(assignment, active=True))
            return self._append_audit_locked(
                AuditAction.ASSIGN, actor, canonical_digest(assignment), at)

    def active_assignment(self, site_id: str,
                          algorithm_id: str) -> DeploymentAssignment | None:
        for a in reversed(self.assignments):
            if a.active and a.site_id == site_id and a.algorithm_id == algorithm_id:
                return a
        return None

    def list_sites_running(self, algorithm_id: str, version: str) -> set[str]:
        # an active assignment of a SUSPENDED version is not "running"
        rec = self.models.get((algorithm_id, version))
        if rec is None or rec.status is not ModelStatus.DEPLOYED:
            return set()
        return {a.site_id for a in self.assignments
                if a.active and a.algorithm_id == algorithm_id
                and a.version == version}

    # -- persistence ----------------------------------------------------

    def save(self, directory: str | Path) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        with self._lock:
            _write_lines(directory / self.MODELS_LOG,
                         (canonical_encode(m) for m in
                          sorted(self.models.values(),
                                 key=lambda m: (m.algorithm_id, m.version))))
            _write_lines(directory / self.ASSIGNMENTS_LOG,
                         (canonical_encode(a) for a in self.assignments))
            _write_lines(directory / self.AUDIT_LOG,
                         (canonical_encode(e) for e in self.audit))
            head = self.head()
            _write_lines(directory / self.AUDIT_HEAD,
                         [canonical_encode(head)] if head else [])

    @classmethod
    def load(cls, directory: str | Path,
             now: Callable[[], datetime] | None = None) -> "Registry":
        directory = Path(directory)
        registry = cls(now=now)
        for line in _read_lines(directory / cls.MODELS_LOG):
            rec = canonical_decode(line, ModelRecord)
            registry.models[(rec.algorithm_id, rec.version)] = rec
        registry.assignments = [
            canonical_decode(line, DeploymentAssignment)
            for line in _read_lines(directory / cls.ASSIGNMENTS_LOG)]
        registry.audit = [canonical_decode(line, AuditEntry)
                          for line in _read_lines(directory / cls.AUDIT_LOG)]
        return registry

    @staticmethod
    def load_chain(directory: str | Path) -> tuple[list[AuditEntry], ChainHead | None]:
        directory = Path(directory)
        entries = [canonical_decode(line, AuditEntry)
                   for line in _read_lines(directory / Registry.AUDIT_LOG)]
        head_lines = _read_lines(directory / Registry.AUDIT_HEAD)
        head = canonical_decode(head_lines[0], ChainHead) if head_lines else None
        return entries, head


def _write_lines(path: Path, lines: Iterable[str]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for line in lines:
            f.write(line + "\n")


def _read_lines(path: Path) -> list[str]:
    with open(path, "r", encoding="utf-8") as f:
        return [line.rstrip("\n") for line in f if line.strip()]
