"""Site-to-hub wire contract: typed envelopes, idempotent ingestion, retries.

Transport framing is a 4-byte big-endian length followed by one UTF-8 JSON
body (the envelope's canonical line). The same line, unframed, is what spool
files (`*.env.jsonl`) carry, one envelope per line, for offline courier mode.

Ingestion semantics per idempotency_key:
    first presentation             -> ACCEPTED, payload persisted
    re-presentation, same digest   -> DUPLICATE, no second write
    re-presentation, new digest    -> REJECTED "idempotency conflict"
Records are evidence; corrections must arrive under a new uid, never as an
overwrite. The ACCEPTED/DUPLICATE decision is linearizable (single winner
under a lock), so any number of concurrent submitters stores exactly one copy.
"""

from __future__ import annotations

import socket
import socketserver
import threading
import time
from dataclasses import dataclass, field
from datetime import datetime
from enum import Enum
from pathlib import Path
from typing import Callable, Iterable

from .canon import CanonError, canonical_decode, canonical_encode, digest_text
from .feedback import AlgorithmOutput
from .model import StudyRecord, validate_study
from .reports import (
    InteractiveReport, LabelSet, LabelStrength, ParseError, Polarity,
    _scan_anchors,
)

__all__ = [
    "SCHEMA_VERSION", "EnvelopeKind", "AckStatus", "Envelope", "Ack",
    "AlertAck", "FrameError", "IntegrityError", "VersionError",
    "TransientStoreError", "DeliveryError", "make_envelope", "encode_envelope",
    "decode_envelope", "envelope_to_line", "envelope_from_line", "Hub",
    "submit_batch", "InProcessClient", "TcpClient", "HubServer",
    "write_spool", "RETRY_BASE_SECONDS", "RETRY_FACTOR", "RETRY_MAX_ATTEMPTS",
]

SCHEMA_VERSION = 1
RETRY_BASE_SECONDS = 0.1
RETRY_FACTOR = 2
RETRY_MAX_ATTEMPTS = 5


class EnvelopeKind(Enum):
    STUDY = "STUDY"
    REPORT = "REPORT"
    LABELSET = "LABELSET"
    ALG_OUTPUT = "ALG_OUTPUT"
    ALERT_ACK = "ALERT_ACK"


class AckStatus(Enum):
    ACCEPTED = "ACCEPTED"
    DUPLICATE = "DUPLICATE"
    REJECTED = "REJECTED"


@dataclass(frozen=True)
class Envelope:
    envelope_id: str
    site_id: str
    kind: EnvelopeKind
    schema_version: int
    idempotency_key: str
    payload: str
    payload_digest: str
    created_at: datetime


@dataclass(frozen=True)
class Ack:
    envelope_id: str
    status: AckStatus
    reason: str | None = None


@dataclass(frozen=True)
class AlertAck:
    """A site's acknowledgment that it received an alert notification."""
    alert_id: str
    site_id: str
    acked_at: datetime


class FrameError(ValueError):
    pass


class IntegrityError(ValueError):
    pass


class VersionError(ValueError):
    pass


class TransientStoreError(RuntimeError):
    """Storage hiccup; the client should retry the same envelope."""


class DeliveryError(RuntimeError):
    def __init__(self, undelivered: list[str]):
        super().__init__(f"undelivered envelopes: {', '.join(undelivered)}")
        self.undelivered = undelivered


_PAYLOAD_TYPES = {
    EnvelopeKind.STUDY: StudyRecord,
    EnvelopeKind.REPORT: InteractiveReport,
    EnvelopeKind.LABELSET: LabelSet,
    EnvelopeKind.ALG_OUTPUT: AlgorithmOutput,
    EnvelopeKind.ALERT_ACK: AlertAck,
}


def primary_uid(kind: EnvelopeKind, record) -> str:
    if kind is EnvelopeKind.STUDY:
        return record.study_uid
    if kind in (EnvelopeKind.REPORT, EnvelopeKind.LABELSET):
        return record.report_uid
    if kind is EnvelopeKind.ALG_OUTPUT:
        # executed mode is part of the identity: dual execution (LOCAL and
        # CENTRAL) must land under distinct keys, flagged downstream
        return f"{record.study_uid}:{record.algorithm_id}:{record.version}:{record.executed.name}"
    return f"{record.alert_id}:{record.site_id}"


def make_envelope(site_id: str, kind: EnvelopeKind, record,
                  created_at: datetime) -> Envelope:
    payload = canonical_encode(record)
    digest = digest_text(payload)
    key = f"{site_id}/{kind.name}/{primary_uid(kind, record)}"
    return Envelope(
        envelope_id=digest_text(key + "|" + digest)[:16],
        site_id=site_id,
        kind=kind,
        schema_version=SCHEMA_VERSION,
        idempotency_key=key,
        payload=payload,
        payload_digest=digest,
        created_at=created_at,
    )


def envelope_to_line(e: Envelope) -> str:
    if digest_text(e.payload) != e.payload_digest:
        raise IntegrityError("payload_digest does not match payload")
    return canonical_encode(e)


def envelope_from_line(line: str) -> Envelope:
    try:
        e = canonical_decode(line, Envelope)
    except CanonError as err:
        raise FrameError(str(err)) from None
    if e.schema_version != SCHEMA_VERSION:
        raise VersionError(f"unsupported schema_version {e.schema_version}")
    if digest_text(e.payload) != e.payload_digest:
        raise IntegrityError("payload digest mismatch")
    return e


def encode_envelope(e: Envelope) -> bytes:
    body = envelope_to_line(e).encode("utf-8")
    return len(body).to_bytes(4, "big") + body


def decode_envelope(frame: bytes) -> Envelope:
    if len(frame) < 4:
        raise FrameError("frame shorter than its length prefix")
    n = int.from_bytes(frame[:4], "big")
    if len(frame) != 4 + n:
        raise FrameError(f"frame length {len(frame) - 4} != declared {n}")
    try:
        body = frame[4:].decode("utf-8")
    except UnicodeDecodeError as err:
        raise FrameError(f"frame body is not UTF-8: {err}") from None
    return envelope_from_line(body)


# ---------------------------------------------------------------------------
# payload validation at the hub boundary


def _validate_labelset(ls: LabelSet) -> list[str]:
    problems = []
    for i, lab in enumerate(ls.labels):
        if lab.report_uid != ls.report_uid or lab.study_uid != ls.study_uid:
            problems.append(f"labels[{i}] does not belong to this set")
        if lab.strength is LabelStrength.HYPERLINKED:
            if lab.region is None or lab.image_uid is None:
                problems.append(f"labels[{i}] hyperlinked without region/image")
            elif not lab.region.is_well_formed():
                problems.append(f"labels[{i}] degenerate region")
        if lab.polarity is Polarity.NEGATIVE and lab.strength is LabelStrength.HYPERLINKED:
            problems.append(f"labels[{i}] negative labels are never hyperlinked")
    return problems


def _validate_alg_output(out: AlgorithmOutput) -> list[str]:
    problems = []
    for i, det in enumerate(out.detections):
        if not (0.0 <= det.confidence <= 1.0):
            problems.append(f"detections[{i}] confidence outside [0,1]")
        if not det.region.is_well_formed():
            problems.append(f"detections[{i}] degenerate box")
    return problems


def _validate_report(rep: InteractiveReport) -> list[str]:
    try:
        _scan_anchors(rep.body)
    except ParseError as err:
        return [str(err)]
    return []


def validate_payload(kind: EnvelopeKind, record) -> list[str]:
    if kind is EnvelopeKind.STUDY:
        return validate_study(record)
    if kind is EnvelopeKind.REPORT:
        return _validate_report(record)
    if kind is EnvelopeKind.LABELSET:
        return _validate_labelset(record)
    if kind is EnvelopeKind.ALG_OUTPUT:
        return _validate_alg_output(record)
    return []


# ---------------------------------------------------------------------------
# the hub


class Hub:
    """Idempotent envelope store with an at-ingest validation gate.

    ``on_accept`` subscribers run synchronously after a successful store,
    outside the key lock; the scenario driver hangs the downstream pipeline
    (feedback, monitoring, registry) off this hook.
    """

    def __init__(self):
        self._lock = threading.Lock()
        self._digests: dict[str, str] = {}
        self._envelopes: dict[str, Envelope] = {}
        self._records: dict[EnvelopeKind, list] = {k: [] for k in EnvelopeKind}
        self._fail_budget = 0
        self.on_accept: list[Callable[[Envelope, object], None]] = []

    def fail_next_ingests(self, n: int) -> None:
        with self._lock:
            self._fail_budget = n

    def ingest(self, e: Envelope) -> Ack:
        if e.schema_version != SCHEMA_VERSION:
            raise VersionError(f"unsupported schema_version {e.schema_version}")
        if digest_text(e.payload) != e.payload_digest:
            raise IntegrityError("payload digest mismatch")
        try:
            record = canonical_decode(e.payload, _PAYLOAD_TYPES[e.kind])
        except CanonError as err:
            return Ack(e.envelope_id, AckStatus.REJECTED, f"undecodable payload: {err}")
        problems = validate_payload(e.kind, record)
        if problems:
            return Ack(e.envelope_id, AckStatus.REJECTED, "; ".join(problems))
        with self._lock:
            if self._fail_budget > 0:
                self._fail_budget -= 1
                raise TransientStoreError("storage unavailable, retry")
            known = self._digests.get(e.idempotency_key)
            if known is not None:
                if known == e.payload_digest:
                    return Ack(e.envelope_id, AckStatus.DUPLICATE)
                return Ack(e.envelope_id, AckStatus.REJECTED, "idempotency conflict")
            self._digests[e.idempotency_key] = e.payload_digest
            self._envelopes[e.idempotency_key] = e
            self._records[e.kind].append(record)
        for hook in self.on_accept:
            hook(e, record)
        return Ack(e.envelope_id, AckStatus.ACCEPTED)

    def stored_count(self, key: str | None = None) -> int:
        with self._lock:
            if key is None:
                return len(self._envelopes)
            return 1 if key in self._envelopes else 0

    def records(self, kind: EnvelopeKind) -> list:
        with self._lock:
            return list(self._records[kind])

    def envelopes(self) -> list[Envelope]:
        with self._lock:
            return list(self._envelopes.values())

    def process_spool(self, spool_dir: str | Path) -> list[Ack]:
        """Offline courier mode: ingest every `*.env.jsonl` line in filename
        order, writing one `.acks.jsonl` sidecar per file."""
        acks: list[Ack] = []
        for path in sorted(Path(spool_dir).glob("*.env.jsonl")):
            file_acks = []
            for line in path.read_text("utf-8").splitlines():
                if not line.strip():
                    continue
                try:
                    ack = self.ingest(envelope_from_line(line))
                except (FrameError, IntegrityError, VersionError) as err:
                    ack = Ack("", AckStatus.REJECTED, str(err))
                file_acks.append(ack)
            sidecar = path.with_name(path.name[:-len(".env.jsonl")] + ".acks.jsonl")
            sidecar.write_text(
                "".join(canonical_encode(a) + "\n" for a in file_acks), "utf-8")
            acks.extend(file_acks)
        return acks


def write_spool(spool_dir: str | Path, name: str, envelopes: Iterable[Envelope]) -> Path:
    path = Path(spool_dir) / f"{name}.env.jsonl"
    with open(path, "a", encoding="utf-8") as f:
        for e in envelopes:
            f.write(envelope_to_line(e) + "\n")
    return path


# ---------------------------------------------------------------------------
# clients


class InProcessClient:
    def __init__(self, hub: Hub):
        self._hub = hub

    def submit(self, e: Envelope) -> Ack:
        return self._hub.ingest(e)


class TcpClient:
    """One connection per batch; framing identical to the server's."""

    def __init__(self, host: str, port: int, timeout: float = 5.0):
        self._addr = (host, port)
        self._timeout = timeout
        self._sock: socket.socket | None = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def close(self) -> None:
        if self._sock is not None:
            self._sock.close()
            self._sock = None

    def submit(self, e: Envelope) -> Ack:
        try:
            if self._sock is None:
                self._sock = socket.create_connection(self._addr, self._timeout)
                self._sock.settimeout(self._timeout)
            self._sock.sendall(encode_envelope(e))
            header = _read_exact(self._sock, 4)
            body = _read_exact(self._sock, int.from_bytes(header, "big"))
        except OSError as err:
            self.close()
            raise TransientStoreError(f"transport failure: {err}") from None
        return canonical_decode(body.decode("utf-8"), Ack)


def _read_exact(sock: socket.socket, n: int) -> bytes:
    buf = b""
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            raise OSError("connection closed mid-frame")
        buf += chunk
    return buf


def submit_batch(client, envelopes: list[Envelope],
                 sleep: Callable[[float], None] = time.sleep) -> list[Ack]:
    """At-least-once submission with exponential backoff (base 100 ms,
    factor 2, at most 5 attempts per envelope). Ack order matches input
    order. Safe to rerun wholesale because ingestion is idempotent."""
    acks: list[Ack] = []
    for i, e in enumerate(envelopes):
        delay = RETRY_BASE_SECONDS
        for attempt in range(1, RETRY_MAX_ATTEMPTS + 1):
            try:
                acks.append(client.submit(e))
                break
            except TransientStoreError:
                if attempt == RETRY_MAX_ATTEMPTS:
                    raise DeliveryError([env.envelope_id for env in envelopes[i:]])
                sleep(delay)
                delay *= RETRY_FACTOR
    return acks


# ---------------------------------------------------------------------------
# TCP server


class _HubHandler(socketserver.BaseRequestHandler):
    def handle(self):
        sock = self.request
        while True:
            try:
                header = _read_exact(sock, 4)
            except OSError:
                return
            try:
                body = _read_exact(sock, int.from_bytes(header, "big"))
            except OSError:
                return
            try:
                envelope = envelope_from_line(body.decode("utf-8"))
                ack = self.server.hub.ingest(envelope)
            except TransientStoreError:
                # no ack at all: the dropped connection tells the client to retry
                sock.close()
                return
            except (FrameError, IntegrityError, VersionError, UnicodeDecodeError) as err:
                ack = Ack("", AckStatus.REJECTED, str(err))
            out = canonical_encode(ack).encode("utf-8")
            sock.sendall(len(out).to_bytes(4, "big") + out)


class HubServer(socketserver.ThreadingTCPServer):
    allow_reuse_address = True
    daemon_threads = True

    def __init__(self, addr: tuple[str, int], hub: Hub):
        super().__init__(addr, _HubHandler)
        self.hub = hub

    def serve_in_background(self) -> threading.Thread:
        t = threading.Thread(target=self.serve_forever, daemon=True)
        t.start()
        return t
