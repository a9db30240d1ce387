import json
import math

import numpy as np
import pytest

from config import FsmConfig, SynthConfig
from core_types import CorruptFile, GaitPhase, IoError, StepInterval, validate_session
from evaluation import match_steps
from fsm_decoder import ground_truth_steps
from preprocess import quat_conjugate, quat_from_rotvec, quat_multiply, quat_to_euler, remove_gravity
from synth import (
    MANIFEST_NAME,
    generate_dataset,
    generate_session,
    initiation_flags,
    load_dataset,
    make_profile,
    subjects_of,
    true_step_intervals,
)


def test_profile_is_deterministic():
    assert make_profile(3, "SwingTo") == make_profile(3, "SwingTo")
    assert make_profile(3) != make_profile(4)


def test_strategy_multipliers_are_ordered():
    two = make_profile(1, "TwoPoint")
    through = make_profile(1, "SwingThrough")
    assert through.swing_duration_multiplier > two.swing_duration_multiplier
    assert through.amplitude_multiplier > two.amplitude_multiplier


def test_profile_ranges():
    for seed in range(1000):
        p = make_profile(seed)
        assert 0.6 <= p.cadence_hz <= 1.5
        assert min(p.stance_ms, p.takeoff_ms, p.swing_ms, p.strike_ms) > 0
        assert min(p.noise_std) >= 0


def test_unknown_strategy():
    with pytest.raises(ValueError):
        make_profile(0, "Hopping")


def test_session_is_deterministic(small_synth):
    p = make_profile(5)
    assert generate_session(p, small_synth, seed=9) == generate_session(p, small_synth, seed=9)
    assert generate_session(p, small_synth, seed=9) != generate_session(p, small_synth, seed=10)


def test_session_is_well_formed(noisy_session):
    assert validate_session(noisy_session).ok
    assert noisy_session.labels is not None


def test_step_count(clean_session, small_synth):
    n = small_synth.laps * small_synth.n_steps
    assert len(true_step_intervals(clean_session.labels, clean_session.timestamps)) == n
    assert len(ground_truth_steps(clean_session.labels, FsmConfig(debounce_k=1))) == n
    assert len(ground_truth_steps(clean_session.labels, FsmConfig(debounce_k=3))) == n


@pytest.mark.parametrize("strategy", ["TwoPoint", "SwingTo", "SwingThrough"])
def test_step_count_with_standing_inserts(strategy):
    cfg = SynthConfig(n_steps=6, laps=2, aux_insert_probability=0.5, noise=False)
    session = generate_session(make_profile(21, strategy), cfg, seed=2100)
    assert len(ground_truth_steps(session.labels, FsmConfig(debounce_k=1))) == 12


def test_ground_truth_timing_error(clean_session):
    truth = [StepInterval(s, e, 4.0, 1.0)
             for s, e in true_step_intervals(clean_session.labels, clean_session.timestamps)]
    decoded = ground_truth_steps(clean_session.labels, FsmConfig(debounce_k=3),
                                 list(clean_session.timestamps))
    match = match_steps(decoded, truth, 0.5)
    assert match.recall == 1.0
    assert max(match.start_errors_ms) <= 50.0
    assert max(match.end_errors_ms) <= 50.0


def test_orientation_follows_reported_gyro(clean_session):
    dt = 0.01
    samples = clean_session.samples
    for prev, cur in zip(samples, samples[1:]):
        step = quat_from_rotvec(*(w * dt for w in cur.omega_body))
        expected = quat_multiply(prev.orientation, step)
        assert max(abs(a - b) for a, b in zip(expected, cur.orientation)) < 1e-12


def test_quaternion_derivative_recovers_gyro():
    cfg = SynthConfig(n_steps=4, laps=1, noise=False)
    for seed, strategy in [(31, "TwoPoint"), (32, "SwingThrough")]:
        session = generate_session(make_profile(seed, strategy), cfg, seed=seed * 100)
        samples = session.samples
        worst = 0.0
        for prev, cur in zip(samples, samples[1:]):
            dq = quat_multiply(quat_conjugate(prev.orientation), cur.orientation)
            sign = 1.0 if dq[0] >= 0 else -1.0
            est = [2.0 * sign * v / 0.01 for v in dq[1:]]
            worst = max(worst, max(abs(a - b) for a, b in zip(est, cur.omega_body)))
        assert worst < 1e-3


def test_clean_stance_has_no_motion_acceleration(clean_session):
    for s, label in zip(clean_session.samples, clean_session.labels):
        acc = remove_gravity(s.a_body, s.orientation)
        if label == GaitPhase.STANCE:
            assert math.sqrt(sum(a * a for a in acc)) < 1e-6
        elif label == GaitPhase.STRIKE:
            assert math.sqrt(sum(a * a for a in acc)) > 0.1


def test_strike_labels_cover_the_impact_spike(clean_session):
    spike, strike = set(), set()
    for i, (s, label) in enumerate(zip(clean_session.samples, clean_session.labels)):
        if label == GaitPhase.AUXILIARY:
            continue
        ax, ay, az = remove_gravity(s.a_body, s.orientation)
        horizontal = math.hypot(ax, ay)
        if az > 1e-6 and horizontal > 1e-6:
            spike.add(i)
            assert az / math.hypot(horizontal, az) == pytest.approx(0.8, abs=1e-6)
        if label == GaitPhase.STRIKE:
            strike.add(i)
    assert strike
    assert spike == strike


def test_swing_frames_rotate(clean_session):
    for s, label in zip(clean_session.samples, clean_session.labels):
        if label == GaitPhase.SWING:
            assert max(abs(w) for w in s.omega_body) > 1e-6


def test_session_opens_and_closes_standing(noisy_session):
    assert noisy_session.labels[0] == GaitPhase.AUXILIARY
    assert noisy_session.labels[-1] == GaitPhase.AUXILIARY


def test_turns_reverse_heading():
    cfg = SynthConfig(n_steps=4, laps=1, noise=False, turn_steps=2)
    session = generate_session(make_profile(8), cfg, seed=800)
    first = quat_to_euler(session.samples[0].orientation)[0]
    # settle on the last Stance frame so only the yaw turn remains
    last_stance = max(i for i, l in enumerate(session.labels) if l == GaitPhase.STANCE)
    last = quat_to_euler(session.samples[last_stance].orientation)[0]
    delta = math.remainder(last - first, 2 * math.pi)
    assert abs(abs(delta) - math.pi) < 0.3


def test_initiation_flags():
    ST, TO, SW, SK, AUX = (GaitPhase.STANCE, GaitPhase.TAKEOFF, GaitPhase.SWING,
                           GaitPhase.STRIKE, GaitPhase.AUXILIARY)
    step = [TO, SW, SK, ST]
    labels = [AUX, ST] + step + step + [AUX, ST] + step
    assert initiation_flags(labels) == [True, False, True]


# ---------------------------------------------------------------------------
# Datasets
# ---------------------------------------------------------------------------

def test_dataset_layout_and_manifest(tmp_path):
    cfg = SynthConfig(n_steps=3, laps=1, sessions_per_subject=2)
    manifest = generate_dataset(4, cfg, tmp_path / "d", seed=7)
    dirs = sorted(p.name for p in (tmp_path / "d").iterdir() if p.is_dir())
    assert dirs == ["subject_00", "subject_01", "subject_02", "subject_03"]
    assert len(manifest["sessions"]) == 8
    on_disk = json.loads((tmp_path / "d" / MANIFEST_NAME).read_text())
    assert on_disk["sessions"][0]["class_counts"] == manifest["sessions"][0]["class_counts"]
    assert {s["strategy"] for s in manifest["subjects"]} == {"TwoPoint", "SwingTo", "SwingThrough"}


def test_dataset_regeneration_is_byte_identical(tmp_path):
    cfg = SynthConfig(n_steps=2, laps=1, sessions_per_subject=1)
    generate_dataset(2, cfg, tmp_path / "a", seed=7)
    generate_dataset(2, cfg, tmp_path / "b", seed=7)
    files_a = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    files_b = sorted(p.relative_to(tmp_path / "b") for p in (tmp_path / "b").rglob("*") if p.is_file())
    assert files_a == files_b
    for rel in files_a:
        assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()


def test_balanced_class_shares(tmp_path):
    manifest = generate_dataset(3, SynthConfig(), tmp_path / "d", seed=1)
    shares = manifest["class_share"]
    assert set(shares) == {"1", "2", "3", "4", "5"}
    for code, share in shares.items():
        assert 0.15 <= share <= 0.25, (code, share)
    assert sum(shares.values()) == pytest.approx(1.0)


def test_load_dataset_round_trip(tmp_path):
    cfg = SynthConfig(n_steps=2, laps=1, sessions_per_subject=2)
    generate_dataset(2, cfg, tmp_path / "d", seed=3)
    data = load_dataset(tmp_path / "d")
    assert [d.session_id for d in data] == ["subject_00/session_00", "subject_00/session_01",
                                            "subject_01/session_00", "subject_01/session_01"]
    assert subjects_of(data) == ["subject_00", "subject_01"]
    assert data[0].session.meta.gait_strategy == "TwoPoint"
    assert all(d.session.is_labeled for d in data)


def test_modified_session_fails_checksum(tmp_path):
    cfg = SynthConfig(n_steps=2, laps=1, sessions_per_subject=1)
    generate_dataset(1, cfg, tmp_path / "d", seed=3)
    path = tmp_path / "d" / "subject_00" / "session_00.csv"
    path.write_text(path.read_text().replace(",5\n", ",1\n", 1))
    with pytest.raises(CorruptFile):
        load_dataset(tmp_path / "d")
    assert len(load_dataset(tmp_path / "d", verify=False)) == 1


def test_unwritable_output(tmp_path):
    (tmp_path / "file").write_text("x")
    with pytest.raises(IoError):
        generate_dataset(1, SynthConfig(n_steps=1, laps=1, turn_steps=1), tmp_path / "file" / "d")


def test_missing_dataset_directory(tmp_path):
    with pytest.raises(IoError):
        load_dataset(tmp_path / "nope")


def test_class_counts_sum_to_frames(tmp_path):
    cfg = SynthConfig(n_steps=2, laps=1, sessions_per_subject=1)
    manifest = generate_dataset(1, cfg, tmp_path / "d", seed=2)
    rec = manifest["sessions"][0]
    assert sum(rec["class_counts"].values()) == rec["frames"]
    assert rec["steps"] == 2
    assert np.isclose(sum(manifest["class_share"].values()), 1.0)
