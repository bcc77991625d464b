"""Canonical record serialization and content digests.

Every persisted or transmitted record in this package has exactly one byte
representation: a single UTF-8 line holding a JSON object whose keys are the
record's field names sorted lexicographically. Nested records are inlined as
objects, enums are rendered by name, timestamps as RFC 3339 UTC, and decimal
values carry no trailing zeros. Digests are SHA-256 over that line, so two
in-memory records that are equal always hash equal regardless of construction
order.

Fields can opt out of the canonical form (secrets, derived caches) by
declaring ``metadata={"canon": "exclude"}`` on the dataclass field.
"""

from __future__ import annotations

import dataclasses
import enum
import hashlib
import json
import math
import re
import types
import typing
from datetime import date, datetime, timezone


class CanonError(ValueError):
    """Raised when a value cannot be canonically encoded or decoded."""


_TS_RE = re.compile(
    r"^(\d{4})-(\d{2})-(\d{2})T(\d{2}):(\d{2}):(\d{2})(?:\.(\d{1,6}))?Z$"
)
_DATE_RE = re.compile(r"^(\d{4})-(\d{2})-(\d{2})$")


def _format_float(x: float) -> str:
    if math.isnan(x) or math.isinf(x):
        raise CanonError("non-finite float has no canonical form")
    if x == 0.0:
        return "0"  # fold -0.0 so encode/decode/encode is byte-stable
    s = repr(float(x))
    if s.endswith(".0"):
        s = s[:-2]
    return s


def _format_datetime(dt: datetime) -> str:
    if dt.tzinfo is None:
        raise CanonError("naive datetime has no canonical form; attach UTC")
    dt = dt.astimezone(timezone.utc)
    base = dt.strftime("%Y-%m-%dT%H:%M:%S")
    if dt.microsecond:
        frac = f"{dt.microsecond:06d}".rstrip("0")
        return f"{base}.{frac}Z"
    return base + "Z"


def _encode_value(value: typing.Any) -> str:
    if value is None:
        raise CanonError("None reaches the encoder only through a bug")
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, enum.Enum):
        return json.dumps(value.name)
    if isinstance(value, int):
        return str(value)
    if isinstance(value, float):
        return _format_float(value)
    if isinstance(value, str):
        return json.dumps(value, ensure_ascii=False)
    if isinstance(value, datetime):
        return json.dumps(_format_datetime(value))
    if isinstance(value, date):
        return json.dumps(value.strftime("%Y-%m-%d"))
    if isinstance(value, bytes):
        raise CanonError("raw bytes are never serialized")
    if dataclasses.is_dataclass(value):
        return _encode_record(value)
    if isinstance(value, (list, tuple)):
        return "[" + ",".join(_encode_value(v) for v in value) + "]"
    if isinstance(value, dict):
        items = []
        for k in sorted(value):
            if not isinstance(k, str):
                raise CanonError(f"map keys must be strings, got {type(k).__name__}")
            items.append(json.dumps(k, ensure_ascii=False) + ":" + _encode_value(value[k]))
        return "{" + ",".join(items) + "}"
    raise CanonError(f"no canonical form for {type(value).__name__}")


def _encode_record(record: typing.Any) -> str:
    pairs = []
    for f in sorted(dataclasses.fields(record), key=lambda f: f.name):
        if f.metadata.get("canon") == "exclude":
            continue
        v = getattr(record, f.name)
        if v is None:
            continue
        pairs.append(json.dumps(f.name) + ":" + _encode_value(v))
    return "{" + ",".join(pairs) + "}"


def canonical_encode(record: typing.Any) -> str:
    """Render a dataclass record as its single canonical line (no newline)."""
    if not dataclasses.is_dataclass(record) or isinstance(record, type):
        raise CanonError("canonical_encode takes a dataclass instance")
    return _encode_record(record)


def digest_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def digest_text(text: str) -> str:
    return digest_bytes(text.encode("utf-8"))


def canonical_digest(record: typing.Any) -> str:
    """SHA-256 hex digest of the record's canonical line."""
    return digest_text(canonical_encode(record))


# ---------------------------------------------------------------------------
# decoding


def _parse_datetime(s: str) -> datetime:
    m = _TS_RE.match(s)
    if not m:
        raise CanonError(f"bad timestamp {s!r}")
    y, mo, d, hh, mm, ss, frac = m.groups()
    micro = int((frac or "").ljust(6, "0") or 0)
    return datetime(int(y), int(mo), int(d), int(hh), int(mm), int(ss), micro,
                    tzinfo=timezone.utc)


def _parse_date(s: str) -> date:
    m = _DATE_RE.match(s)
    if not m:
        raise CanonError(f"bad date {s!r}")
    return date(int(m.group(1)), int(m.group(2)), int(m.group(3)))


def _is_union(origin) -> bool:
    return origin is typing.Union or origin is types.UnionType


def _structure(value: typing.Any, hint: typing.Any) -> typing.Any:
    origin = typing.get_origin(hint)
    if _is_union(origin):
        args = [a for a in typing.get_args(hint) if a is not type(None)]
        if value is None:
            return None
        if len(args) != 1:
            raise CanonError(f"ambiguous union {hint}")
        return _structure(value, args[0])
    if value is None:
        raise CanonError(f"missing value for non-optional {hint}")
    if origin in (list, tuple):
        (item_hint,) = typing.get_args(hint)[:1]
        out = [_structure(v, item_hint) for v in value]
        return tuple(out) if origin is tuple else out
    if origin is dict:
        k_hint, v_hint = typing.get_args(hint)
        if k_hint is not str:
            raise CanonError("map keys must be strings")
        return {k: _structure(v, v_hint) for k, v in value.items()}
    if isinstance(hint, type) and issubclass(hint, enum.Enum):
        try:
            return hint[value]
        except KeyError:
            raise CanonError(f"unknown {hint.__name__} member {value!r}") from None
    if hint is datetime:
        return _parse_datetime(value)
    if hint is date:
        return _parse_date(value)
    if hint is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise CanonError(f"expected number, got {type(value).__name__}")
        return float(value)
    if hint is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise CanonError(f"expected integer, got {type(value).__name__}")
        return value
    if hint is bool:
        if not isinstance(value, bool):
            raise CanonError(f"expected bool, got {type(value).__name__}")
        return value
    if hint is str:
        if not isinstance(value, str):
            raise CanonError(f"expected string, got {type(value).__name__}")
        return value
    if dataclasses.is_dataclass(hint):
        return _structure_record(value, hint)
    raise CanonError(f"no decoder for type hint {hint!r}")


def _structure_record(obj: typing.Any, cls: type) -> typing.Any:
    if not isinstance(obj, dict):
        raise CanonError(f"expected object for {cls.__name__}")
    hints = typing.get_type_hints(cls)
    fields = {f.name: f for f in dataclasses.fields(cls)
              if f.metadata.get("canon") != "exclude"}
    unknown = set(obj) - set(fields)
    if unknown:
        raise CanonError(f"unknown field(s) for {cls.__name__}: {sorted(unknown)}")
    kwargs = {}
    for name, f in fields.items():
        if name in obj:
            kwargs[name] = _structure(obj[name], hints[name])
        elif f.default is not dataclasses.MISSING:
            kwargs[name] = f.default
        elif f.default_factory is not dataclasses.MISSING:  # type: ignore[misc]
            kwargs[name] = f.default_factory()  # type: ignore[misc]
        elif _is_union(typing.get_origin(hints[name])) and \
                type(None) in typing.get_args(hints[name]):
            kwargs[name] = None
        else:
            raise CanonError(f"missing field {name!r} for {cls.__name__}")
    return cls(**kwargs)


def canonical_decode(line: str, cls: type) -> typing.Any:
    """Parse one canonical line back into an instance of ``cls``."""
    try:
        obj = json.loads(line)
    except json.JSONDecodeError as e:
        raise CanonError(f"not a canonical record: {e}") from None
    return _structure_record(obj, cls)
