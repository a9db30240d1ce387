"""Shared vocabulary: gait phases, raw samples, measurement vectors, windows,
sessions and step intervals, plus the session CSV format and domain errors."""

import csv
import math
from dataclasses import dataclass, field
from enum import IntEnum
from pathlib import Path
from typing import NamedTuple, Optional

import numpy as np

from config import WindowConfig  # noqa: F401  (re-exported, part of the vocabulary)


# ---------------------------------------------------------------------------
# Errors
# ---------------------------------------------------------------------------

class GaitError(Exception):
    """Base class for every domain error raised by this package."""


class InvalidPhaseCode(GaitError, ValueError):
    pass


class DegenerateOrientation(GaitError, ValueError):
    pass


class DegenerateChannel(GaitError, ValueError):
    pass


class ShapeError(GaitError, ValueError):
    pass


class MissingClass(GaitError, ValueError):
    pass


class InsufficientData(GaitError, ValueError):
    pass


class SessionTooShort(GaitError, ValueError):
    pass


class VersionMismatch(GaitError, ValueError):
    pass


class CorruptFile(GaitError, ValueError):
    pass


class InvalidAttempt(GaitError, ValueError):
    pass


class LengthError(GaitError, ValueError):
    pass


class MalformedFrame(GaitError, ValueError):
    pass


class IoError(GaitError, OSError):
    pass


# ---------------------------------------------------------------------------
# Gait phases
# ---------------------------------------------------------------------------

class GaitPhase(IntEnum):
    STANCE = 1
    TAKEOFF = 2
    SWING = 3
    STRIKE = 4
    AUXILIARY = 5

    @property
    def code(self) -> int:
        return int(self.value)

    @property
    def label(self) -> str:
        return _PHASE_LABELS[self]


_PHASE_LABELS = {
    GaitPhase.STANCE: "Stance",
    GaitPhase.TAKEOFF: "TakeOff",
    GaitPhase.SWING: "Swing",
    GaitPhase.STRIKE: "Strike",
    GaitPhase.AUXILIARY: "Auxiliary",
}

ALL_PHASES = tuple(GaitPhase)
NUM_PHASES = len(ALL_PHASES)

# Order in which a step is expected to unfold.
CANONICAL_STEP = (GaitPhase.TAKEOFF, GaitPhase.SWING, GaitPhase.STRIKE, GaitPhase.STANCE)


def phase_from_code(code: int) -> GaitPhase:
    try:
        if isinstance(code, bool) or int(code) != code:
            raise ValueError
        return GaitPhase(int(code))
    except (ValueError, TypeError):
        raise InvalidPhaseCode(f"phase code must be an integer in 1-5, got {code!r}") from None


# ---------------------------------------------------------------------------
# Samples, vectors, windows
# ---------------------------------------------------------------------------

Vec3 = tuple[float, float, float]
Quat = tuple[float, float, float, float]


@dataclass(frozen=True)
class RawImuSample:
    t_us: int
    a_body: Vec3                    # m/s², body frame
    omega_body: Vec3                # rad/s
    orientation: Quat               # (w, x, y, z) from the IMU fusion engine
    mag: Optional[Vec3] = None      # µT, carried but never consumed

    def values(self) -> list[float]:
        return [*self.a_body, *self.omega_body, *self.orientation]


CHANNEL_NAMES = ("ax", "ay", "az", "wx", "wy", "wz", "yaw", "pitch", "roll")
NUM_CHANNELS = len(CHANNEL_NAMES)


class MeasurementVector(NamedTuple):
    """Processed sample: global gravity-free accel, filtered gyro, Euler angles."""
    ax: float
    ay: float
    az: float
    wx: float
    wy: float
    wz: float
    yaw: float
    pitch: float
    roll: float


@dataclass(frozen=True)
class WindowTensor:
    data: np.ndarray                # (h, 9), oldest row first
    end_us: int
    label: Optional[GaitPhase] = None

    @property
    def h(self) -> int:
        return int(self.data.shape[0])


# ---------------------------------------------------------------------------
# Sessions
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SessionMeta:
    subject_id: str
    gait_strategy: str = "unknown"
    seed: Optional[int] = None


@dataclass(frozen=True)
class SessionRecording:
    meta: SessionMeta
    samples: tuple[RawImuSample, ...]
    labels: Optional[tuple[GaitPhase, ...]] = None

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def timestamps(self) -> np.ndarray:
        return np.array([s.t_us for s in self.samples], dtype=np.int64)

    @property
    def is_labeled(self) -> bool:
        return self.labels is not None

    def class_counts(self) -> dict[int, int]:
        counts = {p.code: 0 for p in ALL_PHASES}
        for label in self.labels or ():
            counts[label.code] += 1
        return counts


@dataclass(frozen=True)
class StepInterval:
    start_us: int
    end_us: int
    raw_score: float
    norm_score: float
    phases_seen: tuple[GaitPhase, ...] = ()

    def __post_init__(self):
        if not self.start_us < self.end_us:
            raise ValueError(f"step interval needs start < end, got [{self.start_us}, {self.end_us}]")
        if not 0.0 <= self.raw_score <= 4.0:
            raise ValueError(f"raw score outside [0, 4]: {self.raw_score}")
        if abs(self.norm_score - self.raw_score / 4.0) > 1e-12:
            raise ValueError("norm score must equal raw score / 4")

    @property
    def duration_us(self) -> int:
        return self.end_us - self.start_us


# ---------------------------------------------------------------------------
# Validation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ValidationIssue:
    kind: str           # "non_monotonic" | "non_finite" | "label_length"
    index: int
    detail: str


@dataclass
class ValidationReport:
    issues: list[ValidationIssue] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.issues

    def kinds(self) -> set[str]:
        return {i.kind for i in self.issues}


def validate_session(session: SessionRecording) -> ValidationReport:
    report = ValidationReport()
    prev_t = None
    for i, s in enumerate(session.samples):
        if prev_t is not None and s.t_us <= prev_t:
            report.issues.append(ValidationIssue(
                "non_monotonic", i, f"t_us {s.t_us} after {prev_t}"))
        prev_t = s.t_us

        fields_ = {"a_body": s.a_body, "omega_body": s.omega_body,
                   "orientation": s.orientation}
        if s.mag is not None:
            fields_["mag"] = s.mag
        for name, vec in fields_.items():
            if not all(math.isfinite(v) for v in vec):
                report.issues.append(ValidationIssue("non_finite", i, name))

    if session.labels is not None and len(session.labels) != len(session.samples):
        report.issues.append(ValidationIssue(
            "label_length", len(session.labels),
            f"{len(session.labels)} labels for {len(session.samples)} samples"))
    return report


# ---------------------------------------------------------------------------
# Session CSV
# ---------------------------------------------------------------------------

SESSION_COLUMNS = ["t_us", "ax", "ay", "az", "wx", "wy", "wz",
                   "qw", "qx", "qy", "qz", "mx", "my", "mz", "label"]


def fmt_float(value: float) -> str:
    # repr of a Python float is the shortest round-trip form
    return repr(float(value))


def write_session_csv(session: SessionRecording, path: Path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    labels = session.labels
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(SESSION_COLUMNS)
        for i, s in enumerate(session.samples):
            mag = [fmt_float(v) for v in s.mag] if s.mag is not None else ["", "", ""]
            label = str(labels[i].code) if labels is not None else ""
            writer.writerow([str(int(s.t_us)),
                             *(fmt_float(v) for v in s.a_body),
                             *(fmt_float(v) for v in s.omega_body),
                             *(fmt_float(v) for v in s.orientation),
                             *mag, label])


def read_session_csv(path: Path, meta: SessionMeta | None = None) -> SessionRecording:
    path = Path(path)
    if meta is None:
        meta = SessionMeta(subject_id=path.parent.name)
    try:
        f = open(path, "r", encoding="utf-8", newline="")
    except OSError as e:
        raise IoError(f"cannot read session {path}: {e}") from e

    samples: list[RawImuSample] = []
    labels: list[GaitPhase] = []
    n_labeled = 0
    with f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header != SESSION_COLUMNS:
            raise CorruptFile(f"{path}: unexpected header {header}")
        for line_no, row in enumerate(reader, start=2):
            if len(row) != len(SESSION_COLUMNS):
                raise CorruptFile(f"{path}:{line_no}: expected {len(SESSION_COLUMNS)} fields")
            try:
                v = [float(x) for x in row[1:11]]
                mag = tuple(float(x) for x in row[11:14]) if row[11] else None
                sample = RawImuSample(int(row[0]), tuple(v[0:3]), tuple(v[3:6]),
                                      tuple(v[6:10]), mag)
                label = phase_from_code(int(row[14])) if row[14] else None
            except ValueError as e:
                raise CorruptFile(f"{path}:{line_no}: {e}") from e
            samples.append(sample)
            if label is not None:
                labels.append(label)
                n_labeled += 1

    if n_labeled and n_labeled != len(samples):
        raise CorruptFile(f"{path}: only {n_labeled} of {len(samples)} rows are labeled")
    return SessionRecording(meta, tuple(samples), tuple(labels) if n_labeled else None)
