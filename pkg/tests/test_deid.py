"""Pseudonyms, date shifting, scrubbing, and the independent leak check."""

import dataclasses
from datetime import date, datetime, timedelta, timezone

import pytest
from hypothesis import given, settings, strategies as st

from labelloop.deid import (
    DeidAction, DeidPolicy, PolicyError, date_shift_days, default_policy,
    deidentify_study, pseudonymize, verify_deidentified,
)
from labelloop.model import (
    IdentityBlock, ImageRef, Modality, StudyRecord,
)
from labelloop.reports import InteractiveReport, extract_labels, parse_body

from conftest import golden_text

SECRET = b"k"
WHEN = datetime(2024, 6, 1, 12, 0, tzinfo=timezone.utc)


def make_study(name="John Doe", pid="P001", body_extra="") -> tuple[StudyRecord, InteractiveReport]:
    study = StudyRecord(
        study_uid="S9",
        site_id="siteA",
        identity=IdentityBlock(name, pid, date(1970, 5, 5), "ACC1", [name, pid]),
        images=[ImageRef("IMG1", 512, 512, 10)],
        modality=Modality.MR,
        acquired_at=WHEN,
        order_text=f"MR brain for {name} ({pid})",
    )
    report = InteractiveReport(
        report_uid="R9", study_uid="S9",
        body=f"Mr. {name} presents with headache. No hemorrhage.{body_extra}",
        authored_at=WHEN + timedelta(hours=2), author_id="rad7",
    )
    return study, report


def test_pseudonym_matches_independent_hmac_oracle():
    assert pseudonymize(SECRET, "patient", "P001") == golden_text(
        "pseudonym_patient_P001.txt")


def test_pseudonym_scope_separates():
    assert pseudonymize(SECRET, "accession", "P001") == golden_text(
        "pseudonym_accession_P001.txt")
    assert (pseudonymize(SECRET, "patient", "P001")
            != pseudonymize(SECRET, "accession", "P001"))


def test_pseudonym_deterministic():
    a = pseudonymize(b"\x01\x02", "study", "S1")
    b = pseudonymize(b"\x01\x02", "study", "S1")
    assert a == b and len(a) == 16


def test_pseudonym_rejects_empty_value():
    with pytest.raises(ValueError):
        pseudonymize(SECRET, "patient", "")


def test_date_shift_matches_oracle():
    assert date_shift_days(SECRET, "P001") == int(golden_text("date_shift_P001.txt"))


@given(pid=st.text(min_size=1, max_size=12))
def test_date_shift_range(pid):
    off = date_shift_days(b"secret", pid)
    assert -182 <= off <= 182


def test_literal_replacement_in_body():
    study, report = make_study()
    policy = default_policy(SECRET)
    _, [r2], _ = deidentify_study(study, [report], policy)
    assert r2.body.startswith("Mr. [REDACTED] presents")
    assert "John Doe" not in r2.body


def test_relative_time_between_studies_preserved():
    policy = default_policy(SECRET)
    s1, _ = make_study()
    s2 = dataclasses.replace(s1, study_uid="S10",
                             acquired_at=WHEN + timedelta(days=30))
    d1, _, _ = deidentify_study(s1, [], policy)
    d2, _, _ = deidentify_study(s2, [], policy)
    assert d2.acquired_at - d1.acquired_at == timedelta(days=30)


def test_same_patient_same_pseudonym_across_batches():
    policy = default_policy(SECRET)
    s1, _ = make_study()
    s2 = dataclasses.replace(s1, study_uid="S10")
    d1, _, _ = deidentify_study(s1, [], policy)
    d2, _, _ = deidentify_study(s2, [], policy)
    assert d1.identity.patient_id == d2.identity.patient_id
    assert d1.study_uid != d2.study_uid


def test_fixture_study_has_zero_leaks():
    study, report = make_study()
    policy = default_policy(SECRET)
    s2, rs2, receipt = deidentify_study(study, [report], policy)
    assert verify_deidentified(s2, rs2, study.identity.phi_tokens) == []
    assert receipt.original_digest != receipt.deid_digest


def test_verifier_catches_planted_leak():
    study, report = make_study()
    policy = default_policy(SECRET)
    s2, rs2, _ = deidentify_study(study, [report], policy)
    dirty = dataclasses.replace(rs2[0], body=rs2[0].body + " signed john doe")
    leaks = verify_deidentified(s2, [dirty], study.identity.phi_tokens)
    assert len(leaks) == 1
    assert leaks[0].field_path.endswith(".body")
    assert leaks[0].token == "John Doe"


def test_referential_integrity_survives():
    study, report = make_study()
    s2, [r2], _ = deidentify_study(study, [report], default_policy(SECRET))
    assert r2.study_uid == s2.study_uid


def test_anchors_survive_scrubbing():
    body_extra = (" Nodule {{link|image=IMG1|frame=3|region=10,10,40,40|meas=6mm}}"
                  " present.")
    study, report = make_study(body_extra=body_extra)
    s2, [r2], _ = deidentify_study(study, [report], default_policy(SECRET))
    parsed = parse_body(r2, s2)
    assert len(parsed.anchors) == 1
    labels, _ = extract_labels(parsed)
    hyperlinked = [l for l in labels if l.region is not None]
    assert len(hyperlinked) == 1
    assert hyperlinked[0].region.x0 == 10


def test_policy_missing_field_rejected():
    actions = default_policy(SECRET).actions
    del actions["birth_date"]
    with pytest.raises(PolicyError, match="birth_date"):
        DeidPolicy(actions, SECRET).validate()


def test_policy_wrong_action_rejected():
    actions = default_policy(SECRET).actions
    actions["patient_id"] = DeidAction.KEEP
    with pytest.raises(PolicyError, match="patient_id"):
        DeidPolicy(actions, SECRET).validate()


names = st.sampled_from([
    "Ann Park", "Liam Reyes", "Sofia Marsh", "Omar Webb", "Ivy Lowe",
    "Noah Chan", "Mara Quinn", "Eli Vogel",
])
pids = st.from_regex(r"P[0-9]{3,6}", fullmatch=True)


@settings(max_examples=60, deadline=None)
@given(name=names, pid=pids, days=st.integers(0, 900),
       secret=st.binary(min_size=1, max_size=32))
def test_deidentify_then_verify_always_clean(name, pid, days, secret):
    study, report = make_study(name=name, pid=pid)
    study = dataclasses.replace(study, acquired_at=WHEN + timedelta(days=days))
    s2, rs2, _ = deidentify_study(study, [report], default_policy(secret))
    assert verify_deidentified(s2, rs2, [name, pid]) == []
