import math

import pytest

from core_types import (
    CorruptFile,
    GaitPhase,
    InvalidPhaseCode,
    RawImuSample,
    SessionMeta,
    SessionRecording,
    StepInterval,
    phase_from_code,
    read_session_csv,
    validate_session,
    write_session_csv,
)


def _session(n=100, labels=True):
    samples = tuple(RawImuSample(i * 10_000, (0.1 * i, -0.2, 9.80665), (0.0, 1e-17, 0.3),
                                 (1.0, 0.0, 0.0, 0.0)) for i in range(n))
    lab = tuple(GaitPhase((i % 5) + 1) for i in range(n)) if labels else None
    return SessionRecording(SessionMeta("subject_00"), samples, lab)


def test_phase_codes():
    assert phase_from_code(1) == GaitPhase.STANCE
    assert phase_from_code(5) == GaitPhase.AUXILIARY
    assert [p.code for p in GaitPhase] == [1, 2, 3, 4, 5]


@pytest.mark.parametrize("code", [0, 6, -1, 2.5, "x", True])
def test_invalid_phase_code(code):
    with pytest.raises(InvalidPhaseCode):
        phase_from_code(code)


def test_valid_session_has_empty_report():
    assert validate_session(_session()).ok


def test_label_length_mismatch_reported():
    s = _session()
    s = SessionRecording(s.meta, s.samples, s.labels[:99])
    assert validate_session(s).kinds() == {"label_length"}


def test_non_finite_reported_with_index():
    s = _session()
    samples = list(s.samples)
    samples[7] = RawImuSample(70_000, (math.nan, 0.0, 9.8), (0.0, 0.0, 0.0), (1.0, 0.0, 0.0, 0.0))
    report = validate_session(SessionRecording(s.meta, tuple(samples), s.labels))
    assert [(i.kind, i.index) for i in report.issues] == [("non_finite", 7)]


def test_non_monotonic_timestamps_reported():
    s = _session(5)
    samples = list(s.samples)
    samples[3] = RawImuSample(20_000, (0.0, 0.0, 9.8), (0.0, 0.0, 0.0), (1.0, 0.0, 0.0, 0.0))
    report = validate_session(SessionRecording(s.meta, tuple(samples), s.labels))
    assert "non_monotonic" in report.kinds()


def test_session_csv_round_trip(tmp_path):
    s = _session(20)
    write_session_csv(s, tmp_path / "s.csv")
    back = read_session_csv(tmp_path / "s.csv", s.meta)
    assert back == s


def test_unlabeled_session_csv_round_trip(tmp_path):
    s = _session(10, labels=False)
    write_session_csv(s, tmp_path / "s.csv")
    back = read_session_csv(tmp_path / "s.csv", s.meta)
    assert back.labels is None
    assert back.samples == s.samples


def test_session_csv_header_is_exact(tmp_path):
    write_session_csv(_session(1), tmp_path / "s.csv")
    header = (tmp_path / "s.csv").read_text().splitlines()[0]
    assert header == "t_us,ax,ay,az,wx,wy,wz,qw,qx,qy,qz,mx,my,mz,label"


def test_corrupt_session_csv(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("t_us,ax\n1,2\n")
    with pytest.raises(CorruptFile):
        read_session_csv(path)


@pytest.mark.parametrize("label", ["x", "2.5", "9"])
def test_bad_label_in_session_csv_is_corrupt(tmp_path, label):
    write_session_csv(_session(3), tmp_path / "s.csv")
    lines = (tmp_path / "s.csv").read_text().splitlines()
    fields = lines[2].split(",")
    fields[-1] = label
    lines[2] = ",".join(fields)
    (tmp_path / "s.csv").write_text("\n".join(lines) + "\n")
    with pytest.raises(CorruptFile, match=":3:"):
        read_session_csv(tmp_path / "s.csv")


def test_step_interval_invariants():
    StepInterval(0, 10, 3.0, 0.75)
    with pytest.raises(ValueError):
        StepInterval(10, 10, 4.0, 1.0)
    with pytest.raises(ValueError):
        StepInterval(0, 10, 3.0, 0.7)
