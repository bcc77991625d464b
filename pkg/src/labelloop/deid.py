"""Site-side de-identification: pseudonyms, date shifting, text scrubbing.

The site secret never leaves the site process. It arrives through the
`LABELLOOP_SITE_SECRET` environment variable (hex) in service use, is held
only in memory, and is excluded from every serialized form. Pseudonyms are
deterministic per (secret, scope, value) so records of one patient stay
linkable after de-identification without being reversible. All dates of a
patient move by one secret-derived offset, so intervals between studies are
preserved.
"""

from __future__ import annotations

import base64
import hmac
import hashlib
import os
import re
from dataclasses import dataclass, field, replace
from datetime import datetime, timedelta, timezone
from enum import Enum

from .canon import canonical_digest
from .model import IdentityBlock, StudyRecord
from .reports import InteractiveReport

__all__ = [
    "DeidAction", "DeidPolicy", "DeidReceipt", "PolicyError", "Leak",
    "pseudonymize", "date_shift_days", "default_policy", "deidentify_study",
    "verify_deidentified", "secret_from_env", "SECRET_ENV_VAR", "REDACTION",
]

SECRET_ENV_VAR = "LABELLOOP_SITE_SECRET"
REDACTION = "[REDACTED]"


class DeidAction(Enum):
    REMOVE = "REMOVE"
    PSEUDONYM = "PSEUDONYM"
    DATE_SHIFT = "DATE_SHIFT"
    SCRUB_TEXT = "SCRUB_TEXT"
    KEEP = "KEEP"


class PolicyError(ValueError):
    pass


# field -> allowed actions; the first entry is the default
_REQUIRED_ACTIONS: dict[str, tuple[DeidAction, ...]] = {
    "patient_name": (DeidAction.REMOVE, DeidAction.SCRUB_TEXT),
    "patient_id": (DeidAction.PSEUDONYM,),
    "accession_number": (DeidAction.PSEUDONYM,),
    "birth_date": (DeidAction.DATE_SHIFT,),
    "acquired_at": (DeidAction.DATE_SHIFT,),
    "body": (DeidAction.SCRUB_TEXT,),
    "order_text": (DeidAction.SCRUB_TEXT,),
}


@dataclass(frozen=True)
class DeidPolicy:
    actions: dict[str, DeidAction]
    site_secret: bytes = field(default=b"", metadata={"canon": "exclude"}, repr=False)

    def validate(self) -> None:
        if not self.site_secret:
            raise PolicyError("site_secret is empty")
        for name, allowed in _REQUIRED_ACTIONS.items():
            got = self.actions.get(name)
            if got is None:
                raise PolicyError(f"policy missing action for {name!r}")
            if got not in allowed:
                raise PolicyError(
                    f"policy maps {name!r} to {got.name}, allowed: "
                    + "/".join(a.name for a in allowed))


@dataclass(frozen=True)
class DeidReceipt:
    original_digest: str
    deid_digest: str
    fields_transformed: list[str]
    performed_at: datetime


@dataclass(frozen=True)
class Leak:
    field_path: str
    offset: int
    token: str


def default_policy(site_secret: bytes) -> DeidPolicy:
    return DeidPolicy(
        actions={name: allowed[0] for name, allowed in _REQUIRED_ACTIONS.items()},
        site_secret=site_secret,
    )


def secret_from_env(environ: dict | None = None) -> bytes:
    env = os.environ if environ is None else environ
    raw = env.get(SECRET_ENV_VAR, "")
    if not raw:
        raise PolicyError(f"{SECRET_ENV_VAR} is not set")
    try:
        return bytes.fromhex(raw)
    except ValueError:
        raise PolicyError(f"{SECRET_ENV_VAR} must be hex") from None


def pseudonymize(site_secret: bytes, scope: str, value: str) -> str:
    """First 16 chars of base32(HMAC-SHA256(secret, scope || 0x1F || value)).

    The 0x1F separator keeps ("ab","c") and ("a","bc") apart; the scope keeps
    the same raw value from colliding across uses (patient vs accession).
    """
    if not site_secret:
        raise PolicyError("site_secret is empty")
    if not value:
        raise ValueError("cannot pseudonymize an empty value")
    mac = hmac.new(site_secret,
                   scope.encode("utf-8") + b"\x1f" + value.encode("utf-8"),
                   hashlib.sha256).digest()
    return base64.b32encode(mac).decode("ascii")[:16]


def date_shift_days(site_secret: bytes, patient_id: str) -> int:
    """Per-patient constant offset in [-182, +182] days."""
    mac = hmac.new(site_secret, patient_id.encode("utf-8"), hashlib.sha256).digest()
    return int.from_bytes(mac[:4], "big") % 365 - 182


def _scrubber(phi_tokens: list[str]):
    # longest first so "John Doe" wins over a bare "John"
    ordered = sorted({t for t in phi_tokens if t}, key=len, reverse=True)
    if not ordered:
        return lambda text: text
    pattern = re.compile("|".join(re.escape(t) for t in ordered), re.IGNORECASE)
    return lambda text: pattern.sub(REDACTION, text)


def deidentify_study(
    s: StudyRecord,
    reports: list[InteractiveReport],
    policy: DeidPolicy,
    now: datetime | None = None,
) -> tuple[StudyRecord, list[InteractiveReport], DeidReceipt]:
    policy.validate()
    for t in s.identity.phi_tokens:
        if not t:
            raise PolicyError("phi_tokens must be nonempty strings")
    secret = policy.site_secret
    offset = timedelta(days=date_shift_days(secret, s.identity.patient_id))
    scrub = _scrubber(s.identity.phi_tokens)
    pseud = lambda scope, v: pseudonymize(secret, scope, v)

    new_patient_id = pseud("patient", s.identity.patient_id)
    name_action = policy.actions["patient_name"]
    new_name = "" if name_action is DeidAction.REMOVE else REDACTION
    identity = IdentityBlock(
        patient_name=new_name,
        patient_id=new_patient_id,
        birth_date=s.identity.birth_date + offset,
        accession_number=pseud("accession", s.identity.accession_number),
        phi_tokens=[new_patient_id],
    )
    study = StudyRecord(
        study_uid=pseud("study", s.study_uid),
        site_id=s.site_id,
        identity=identity,
        images=s.images,
        modality=s.modality,
        acquired_at=s.acquired_at + offset,
        order_text=scrub(s.order_text),
    )
    out_reports = []
    for r in reports:
        if r.study_uid != s.study_uid:
            raise PolicyError(f"report {r.report_uid} does not belong to {s.study_uid}")
        out_reports.append(InteractiveReport(
            report_uid=pseud("report", r.report_uid),
            study_uid=study.study_uid,
            body=scrub(r.body),
            authored_at=r.authored_at + offset,
            author_id=pseud("author", r.author_id),
        ))
    receipt = DeidReceipt(
        original_digest=canonical_digest(s),
        deid_digest=canonical_digest(study),
        fields_transformed=sorted(policy.actions),
        performed_at=now if now is not None else datetime.now(timezone.utc),
    )
    return study, out_reports, receipt


def _scan(text: str, path: str, needles: list[tuple[str, str]], out: list[Leak]) -> None:
    folded = text.casefold()
    for original, needle in needles:
        pos = folded.find(needle)
        if pos >= 0:
            out.append(Leak(path, pos, original))


def verify_deidentified(
    study: StudyRecord,
    reports: list[InteractiveReport],
    phi_tokens: list[str],
) -> list[Leak]:
    """Independent post-check: substring-scan every text field for any of the
    original phi_tokens, case-insensitively. Empty result means clean."""
    needles = [(t, t.casefold()) for t in phi_tokens if t]
    leaks: list[Leak] = []
    ident = study.identity
    _scan(study.study_uid, "study.study_uid", needles, leaks)
    _scan(study.site_id, "study.site_id", needles, leaks)
    _scan(ident.patient_name, "study.identity.patient_name", needles, leaks)
    _scan(ident.patient_id, "study.identity.patient_id", needles, leaks)
    _scan(ident.accession_number, "study.identity.accession_number", needles, leaks)
    for i, t in enumerate(ident.phi_tokens):
        _scan(t, f"study.identity.phi_tokens[{i}]", needles, leaks)
    _scan(study.order_text, "study.order_text", needles, leaks)
    for img in study.images:
        _scan(img.image_uid, f"study.images[{img.image_uid}]", needles, leaks)
    for r in reports:
        _scan(r.report_uid, f"report[{r.report_uid}].report_uid", needles, leaks)
        _scan(r.author_id, f"report[{r.report_uid}].author_id", needles, leaks)
        _scan(r.body, f"report[{r.report_uid}].body", needles, leaks)
    return leaks
