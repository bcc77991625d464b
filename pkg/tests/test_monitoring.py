import random
from datetime import datetime, timezone

import pytest
from hypothesis import given, settings, strategies as st

from labelloop.canon import canonical_decode, canonical_encode
from labelloop.feedback import StudyAgreement
from labelloop.model import FindingCode
from labelloop.monitoring import (
    Alert,
    AlertKind,
    AlertSeverity,
    AgreementStream,
    CusumState,
    InputError,
    MonitorConfig,
    MonitoringEngine,
    PrevalenceProfile,
    cusum_step,
    events_of,
    propagate_alert,
    replay_events,
)

AT = datetime(2024, 3, 1, tzinfo=timezone.utc)


def agreement(tp=0, fp=0, fn=0, unverified=0, site="siteA", alg="lung-cad", ver="2.1.0"):
    return StudyAgreement(
        study_uid="S1", algorithm_id=alg, version=ver, site_id=site,
        tp=tp, fp=fp, fn=fn, unverified=unverified, pairs=(),
    )


def calibrated_stream(p0=0.9, config=None, seed=7):
    config = config or MonitorConfig()
    stream = AgreementStream("siteA", "lung-cad", "2.1.0", config)
    rng = random.Random(seed)
    for _ in range(config.n0):
        stream.observe_event(1 if rng.random() < p0 else 0, AT)
    assert stream.p0 is not None
    return stream


class TestCusumStep:
    def test_disagreement_accumulates(self):
        state = CusumState(0.0, k=0.05, h=2.0)
        state, fired = cusum_step(state, 0, p0=0.9)
        assert state.s_plus == pytest.approx(0.85)
        assert not fired

    def test_agreement_drains(self):
        state = CusumState(0.5, k=0.05, h=2.0)
        state, fired = cusum_step(state, 1, p0=0.9)
        assert state.s_plus == pytest.approx(0.35)
        assert not fired

    def test_floor_at_zero(self):
        state = CusumState(0.0, k=0.05, h=2.0)
        state, _ = cusum_step(state, 1, p0=0.9)
        assert state.s_plus == 0.0

    def test_hand_stepped_fire_and_reset(self):
        # at p0 = 0.9 each disagreement adds 0.85, so a run of them
        # crosses h = 2.0 on the third step
        state = CusumState(0.0, k=0.05, h=2.0)
        fires = []
        for i in range(1, 5):
            state, fired = cusum_step(state, 0, p0=0.9)
            if fired:
                fires.append(i)
                assert state.s_plus == 0.0
        assert fires == [3]

    def test_rejects_non_binary(self):
        with pytest.raises(ValueError):
            cusum_step(CusumState(0.0, 0.05, 2.0), 2, p0=0.9)

    @given(
        xs=st.lists(st.integers(min_value=0, max_value=1), max_size=60),
        p0=st.floats(min_value=0.01, max_value=1.0),
    )
    @settings(max_examples=200, deadline=None)
    def test_s_plus_never_negative_and_reset_on_fire(self, xs, p0):
        state = CusumState(0.0, k=0.05, h=2.0)
        for x in xs:
            state, fired = cusum_step(state, x, p0)
            assert state.s_plus >= 0.0
            if fired:
                assert state.s_plus == 0.0
            else:
                assert state.s_plus <= state.h + 1e-12


class TestEventDecomposition:
    def test_events_of(self):
        assert events_of(agreement(tp=2, fp=1, fn=1, unverified=3)) == [1, 1, 0, 0]

    def test_unmatched_only(self):
        assert events_of(agreement(fp=2)) == [0, 0]

    @given(
        tp=st.integers(0, 5), fp=st.integers(0, 5),
        fn=st.integers(0, 5), unverified=st.integers(0, 5),
    )
    @settings(max_examples=100, deadline=None)
    def test_unverified_never_touches_stream_state(self, tp, fp, fn, unverified):
        a = AgreementStream("siteA", "lung-cad", "2.1.0")
        b = AgreementStream("siteA", "lung-cad", "2.1.0")
        a.observe_study(agreement(tp=tp, fp=fp, fn=fn, unverified=0), AT)
        b.observe_study(agreement(tp=tp, fp=fp, fn=fn, unverified=unverified), AT)
        assert a.cusum == b.cusum
        assert a.event_count == b.event_count
        assert a._calibration_ones == b._calibration_ones


class TestAgreementStream:
    def test_no_alerts_during_calibration(self):
        stream = AgreementStream("siteA", "lung-cad", "2.1.0")
        for _ in range(stream.config.n0 - 1):
            assert stream.observe_event(0, AT) is None
        assert stream.p0 is None

    def test_p0_frozen_after_calibration(self):
        stream = calibrated_stream(p0=0.9)
        frozen = stream.p0
        stream.observe_event(0, AT)
        assert stream.p0 == frozen

    def test_p0_floor(self):
        cfg = MonitorConfig(n0=10)
        stream = AgreementStream("siteA", "lung-cad", "2.1.0", cfg)
        for _ in range(10):
            stream.observe_event(0, AT)
        assert stream.p0 == cfg.p0_floor

    def test_key_mismatch_rejected(self):
        stream = AgreementStream("siteA", "lung-cad", "2.1.0")
        with pytest.raises(InputError):
            stream.observe_study(agreement(tp=1, site="siteB"), AT)

    def test_drop_fires_with_evidence(self):
        stream = calibrated_stream(p0=0.9)
        alerts = []
        rng = random.Random(11)
        for _ in range(500):
            alerts += [a for a in [stream.observe_event(
                1 if rng.random() < 0.4 else 0, AT)] if a]
            if alerts:
                break
        assert alerts, "sustained 0.9 -> 0.4 drop must fire"
        alert = alerts[0]
        assert alert.kind is AlertKind.INTERNAL_DRIFT
        assert alert.severity is AlertSeverity.CRITICAL
        assert alert.evidence.statistic > alert.evidence.threshold
        assert alert.evidence.threshold == stream.config.h
        assert alert.evidence.p0 == stream.p0
        assert alert.evidence.observed_rate < stream.p0 - 0.2

    def test_mild_drop_is_warn(self):
        # drop smaller than critical_drop below p0 keeps severity at WARN
        cfg = MonitorConfig(n0=100, window=50)
        stream = AgreementStream("siteA", "lung-cad", "2.1.0", cfg)
        for _ in range(100):
            stream.observe_event(1, AT)
        assert stream.p0 == 1.0
        pattern = [1, 1, 1, 1, 1, 1, 1, 1, 0]  # ~0.89 observed rate
        alert = None
        i = 0
        while alert is None:
            alert = stream.observe_event(pattern[i % len(pattern)], AT)
            i += 1
        assert alert.severity is AlertSeverity.WARN

    def test_alert_id_deterministic_across_replay(self):
        rng = random.Random(3)
        events = [1 if rng.random() < 0.9 else 0 for _ in range(600)]
        events += [0] * 200
        first = AgreementStream("siteA", "lung-cad", "2.1.0")
        second = AgreementStream("siteA", "lung-cad", "2.1.0")
        got_first = []
        got_second = []
        for x in events:
            a = first.observe_event(x, AT)
            b = second.observe_event(x, AT)
            if a:
                got_first.append(canonical_encode(a))
            if b:
                got_second.append(canonical_encode(b))
        assert got_first and got_first == got_second

    def test_alert_round_trips_canonically(self):
        stream = calibrated_stream(p0=0.9)
        alert = None
        while alert is None:
            alert = stream.observe_event(0, AT)
        line = canonical_encode(alert)
        assert canonical_decode(line, Alert) == alert


class TestReplayTargets:
    def test_detection_delay_under_drop(self):
        # 0.9 -> 0.6 drop at event 600: detected within 300 events
        rng = random.Random(21)
        events = [1 if rng.random() < 0.9 else 0 for _ in range(600)]
        events += [1 if rng.random() < 0.6 else 0 for _ in range(600)]
        fires = replay_events(events)
        post = [f for f in fires if f > 600]
        assert post and post[0] - 600 <= 300

    def test_in_control_false_alarms_rare(self):
        total = 0
        for seed in range(22, 27):
            rng = random.Random(seed)
            events = [1 if rng.random() < 0.9 else 0 for _ in range(10_000)]
            total += len(replay_events(events))
        assert total / 5 <= 1.0

    def test_h2_would_false_alarm_constantly(self):
        # the reason the default h is 8.0 and not 2.0
        rng = random.Random(23)
        events = [1 if rng.random() < 0.9 else 0 for _ in range(10_000)]
        assert len(replay_events(events, MonitorConfig(h=2.0))) > 10


def feed_profile(profile, dist, n, rng):
    """dist: list of (codes frozenset, weight). Returns alerts raised."""
    alerts = []
    total = sum(w for _, w in dist)
    for _ in range(n):
        r = rng.random() * total
        acc = 0.0
        chosen = frozenset()
        for codes, w in dist:
            acc += w
            if r < acc:
                chosen = codes
                break
        a = profile.observe(set(chosen), AT)
        if a:
            alerts.append(a)
    return alerts


BASE_MIX = [
    (frozenset(), 0.55),
    (frozenset({FindingCode.NODULE}), 0.20),
    (frozenset({FindingCode.PNEUMOTHORAX}), 0.10),
    (frozenset({FindingCode.FRACTURE}), 0.08),
    (frozenset({FindingCode.NODULE, FindingCode.EFFUSION}), 0.07),
]


SHORT_CAL = MonitorConfig(prevalence_calibration=200)


class TestPrevalenceProfile:
    def test_stable_mix_stays_quiet(self):
        profile = PrevalenceProfile("siteA")
        rng = random.Random(5)
        n0 = profile.config.prevalence_calibration
        alerts = feed_profile(profile, BASE_MIX, n0 + 10 * 200, rng)
        assert alerts == []
        assert profile.checks_run == 10

    def test_shifted_mix_fires(self):
        profile = PrevalenceProfile("siteA", SHORT_CAL)
        rng = random.Random(6)
        feed_profile(profile, BASE_MIX, 200, rng)  # calibration
        shifted = [
            (frozenset(), 0.10),
            (frozenset({FindingCode.NODULE}), 0.60),
            (frozenset({FindingCode.HEMORRHAGE}), 0.30),
        ]
        alerts = feed_profile(profile, shifted, 200, rng)
        assert len(alerts) == 1
        alert = alerts[0]
        assert alert.kind is AlertKind.EXTERNAL_DRIFT
        assert alert.algorithm_id == "-" and alert.version == "-"
        assert alert.evidence.statistic > alert.evidence.threshold

    def test_windows_are_tumbling_not_sliding(self):
        profile = PrevalenceProfile("siteA", SHORT_CAL)
        rng = random.Random(7)
        feed_profile(profile, BASE_MIX, 200 + 199, rng)
        assert profile.checks_run == 0
        feed_profile(profile, BASE_MIX, 1, rng)
        assert profile.checks_run == 1
        assert profile.window_studies == 0

    def test_small_expected_bins_pool(self):
        # a code absent from calibration must not divide by zero
        profile = PrevalenceProfile("siteA", SHORT_CAL)
        rng = random.Random(8)
        feed_profile(profile, [(frozenset({FindingCode.NODULE}), 1.0)], 200, rng)
        only_rare = [(frozenset({FindingCode.HEMORRHAGE}), 1.0)]
        alerts = feed_profile(profile, only_rare, 200, rng)
        assert len(alerts) == 1  # total displacement, must fire


class FakeRegistry:
    def __init__(self, sites):
        self.sites = sites
        self.audits = []

    def list_sites_running(self, algorithm_id, version):
        return set(self.sites)

    def append_audit(self, action, actor, payload_digest):
        self.audits.append((action, actor, payload_digest))


def make_alert(kind=AlertKind.INTERNAL_DRIFT, site="siteA", alg="lung-cad", ver="2.1.0"):
    from labelloop.monitoring import AlertEvidence, _alert_id
    return Alert(
        alert_id=_alert_id(kind, site, alg, ver, 777),
        kind=kind, site_id=site, algorithm_id=alg, version=ver,
        severity=AlertSeverity.WARN,
        evidence=AlertEvidence(statistic=9.0, threshold=8.0, event_index=777),
        raised_at=AT,
    )


class TestPropagation:
    def test_fan_out_to_running_sites_plus_developer(self):
        registry = FakeRegistry({"siteB", "siteA"})
        notes = propagate_alert(make_alert(), registry, AT)
        assert [n.recipient for n in notes] == ["siteA", "siteB", "developer"]
        assert all(n.alert_id == notes[0].alert_id for n in notes)
        assert len(registry.audits) == 1
        assert registry.audits[0][0] == "ALERT"

    def test_external_drift_targets_origin_site_only(self):
        registry = FakeRegistry({"siteB", "siteC"})
        alert = make_alert(kind=AlertKind.EXTERNAL_DRIFT, alg="-", ver="-")
        notes = propagate_alert(alert, registry, AT)
        assert [n.recipient for n in notes] == ["siteA", "developer"]

    def test_engine_propagation_idempotent(self):
        engine = MonitoringEngine()
        registry = FakeRegistry({"siteA"})
        alert = make_alert()
        first = engine.propagate(alert, registry, AT)
        second = engine.propagate(alert, registry, AT)
        assert len(first) == 2 and second == []
        assert len(registry.audits) == 1


class TestEngine:
    def test_streams_keyed_per_site_algorithm_version(self):
        engine = MonitoringEngine()
        engine.observe_agreement(agreement(tp=1, site="siteA"), AT)
        engine.observe_agreement(agreement(tp=1, site="siteB"), AT)
        engine.observe_agreement(agreement(tp=1, site="siteA", ver="2.2.0"), AT)
        assert len(engine.streams) == 3

    def test_observe_labels_routes_to_site_profile(self):
        engine = MonitoringEngine()
        engine.observe_labels("siteA", {FindingCode.NODULE}, AT)
        engine.observe_labels("siteB", set(), AT)
        assert set(engine.profiles) == {"siteA", "siteB"}
        assert engine.profiles["siteA"].study_count == 1
