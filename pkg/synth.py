"""Parametric crutch-gait simulator: subject profiles, labeled sessions and
dataset directories with a manifest.

Every session opens and closes with standing (Auxiliary), laps are separated
by standing, and each lap ends with a turn spread over its last steps. A step
is TakeOff -> Swing -> Strike -> Stance. The orientation stream is integrated
from the commanded rotation rates, and the reported gyro is recovered from
consecutive orientations, so q[i] = q[i-1] * exp(omega[i] * dt) holds exactly.
Profile ranges are engineering choices, not measured subject statistics.
"""

import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional

import numpy as np

import config
from config import SynthConfig
from core_types import (
    CorruptFile,
    GaitPhase,
    IoError,
    RawImuSample,
    SessionMeta,
    SessionRecording,
    read_session_csv,
    write_session_csv,
)
from preprocess import quat_conjugate, quat_from_rotvec, quat_multiply, quat_normalize, quat_rotate, quat_to_euler

logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.json"
MANIFEST_VERSION = 1

PROFILE_RANGES_NOTE = ("Profile parameter ranges are engineering choices, "
                       "not measured inter-subject statistics.")

# (swing duration multiplier, swing amplitude multiplier)
STRATEGY_MULTIPLIERS = {
    "TwoPoint": (1.0, 1.0),
    "SwingTo": (1.1, 1.15),
    "SwingThrough": (1.2, 1.3),
}

MIN_PHASE_FRAMES = 4
MIN_AUX_FRAMES = 20
PITCH_RATE_CAP = 3.0            # rad/s
AUX_SHARE = 0.2                 # target Auxiliary share when balancing
LEAD_IN_FRACTION = 0.3          # standing-to-walking Stance, relative to a stance phase


# ---------------------------------------------------------------------------
# Profiles
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SubjectProfile:
    seed: int
    gait_strategy: str
    cadence_hz: float
    swing_amplitude: float      # rad/s, peak pitch rate during Swing
    takeoff_lift: float         # m/s², peak upward accel at TakeOff
    swing_push: float           # m/s², forward accel lobe during Swing
    strike_spike: float         # m/s², peak deceleration at Strike
    stance_ms: float
    takeoff_ms: float
    swing_ms: float
    strike_ms: float
    jitter: float               # relative std of phase durations
    noise_std: tuple            # (ax, ay, az, wx, wy, wz)
    aux_wander: float           # rad/s scale of standing wander

    @property
    def swing_duration_multiplier(self) -> float:
        return STRATEGY_MULTIPLIERS[self.gait_strategy][0]

    @property
    def amplitude_multiplier(self) -> float:
        return STRATEGY_MULTIPLIERS[self.gait_strategy][1]

    @property
    def period_ms(self) -> float:
        return 1000.0 / self.cadence_hz

    def to_dict(self) -> dict:
        d = asdict(self)
        d["noise_std"] = list(self.noise_std)
        return d


def make_profile(seed: int, strategy: str = "TwoPoint") -> SubjectProfile:
    if strategy not in STRATEGY_MULTIPLIERS:
        raise ValueError(f"unknown gait strategy '{strategy}', "
                         f"expected one of {', '.join(config.GAIT_STRATEGIES)}")
    dur_mult, amp_mult = STRATEGY_MULTIPLIERS[strategy]
    rng = np.random.default_rng(seed)

    cadence = float(rng.uniform(0.8, 1.2))
    period_ms = 1000.0 / cadence
    takeoff_ms = float(rng.uniform(80.0, 150.0))
    strike_ms = float(rng.uniform(40.0, 80.0))
    swing_ms = 0.40 * period_ms * dur_mult
    stance_ms = period_ms - takeoff_ms - strike_ms - swing_ms
    acc_std = float(rng.uniform(0.03, 0.08))
    gyro_std = float(rng.uniform(0.01, 0.03))

    return SubjectProfile(
        seed=int(seed),
        gait_strategy=strategy,
        cadence_hz=cadence,
        swing_amplitude=float(rng.uniform(1.5, 2.3)) * amp_mult,
        takeoff_lift=float(rng.uniform(2.0, 4.0)),
        swing_push=float(rng.uniform(1.0, 2.0)) * amp_mult,
        strike_spike=float(rng.uniform(8.0, 15.0)),
        stance_ms=stance_ms,
        takeoff_ms=takeoff_ms,
        swing_ms=swing_ms,
        strike_ms=strike_ms,
        jitter=float(rng.uniform(0.05, 0.12)),
        noise_std=(acc_std, acc_std, acc_std, gyro_std, gyro_std, gyro_std),
        aux_wander=float(rng.uniform(0.08, 0.2)),
    )


# ---------------------------------------------------------------------------
# Session plan
# ---------------------------------------------------------------------------

@dataclass
class _Segment:
    phase: GaitPhase
    frames: int
    turn_rate: float = 0.0      # rad/s about global z
    step: int = -1
    pitch_scale: float = 0.0    # peak pitch rate, signed


def _phase_means_ms(profile: SubjectProfile, cfg: SynthConfig) -> dict[GaitPhase, float]:
    if cfg.class_balance:
        m = profile.swing_duration_multiplier
        q = profile.period_ms / (3.0 + m)
        return {GaitPhase.TAKEOFF: q, GaitPhase.SWING: q * m,
                GaitPhase.STRIKE: q, GaitPhase.STANCE: q}
    return {GaitPhase.TAKEOFF: profile.takeoff_ms, GaitPhase.SWING: profile.swing_ms,
            GaitPhase.STRIKE: profile.strike_ms, GaitPhase.STANCE: profile.stance_ms}


def _draw_frames(mean_ms: float, jitter: float, rng: np.random.Generator, fs: float) -> int:
    scale = float(np.clip(1.0 + jitter * rng.standard_normal(), 0.7, 1.3))
    return max(MIN_PHASE_FRAMES, int(round(mean_ms * scale * fs / 1000.0)))


def _half_sine_sum(n: int) -> float:
    return sum(math.sin(math.pi * (i + 0.5) / n) for i in range(n))


def _plan_session(profile: SubjectProfile, cfg: SynthConfig, rng: np.random.Generator,
                  fs: float) -> list[_Segment]:
    means = _phase_means_ms(profile, cfg)
    lead_in = max(MIN_PHASE_FRAMES,
                  int(round(LEAD_IN_FRACTION * means[GaitPhase.STANCE] * fs / 1000.0)))
    aux = GaitPhase.AUXILIARY
    dt = 1.0 / fs

    segments = [_Segment(aux, 0)]
    step_no = 0
    for lap in range(cfg.laps):
        if lap > 0:
            segments.append(_Segment(aux, 0))
        segments.append(_Segment(GaitPhase.STANCE, lead_in))
        turning: list[_Segment] = []
        for s in range(cfg.n_steps):
            if s > 0 and rng.random() < cfg.aux_insert_probability:
                segments.append(_Segment(aux, 0))
                segments.append(_Segment(GaitPhase.STANCE, lead_in))
            step = [_Segment(p, _draw_frames(means[p], profile.jitter, rng, fs), step=step_no)
                    for p in (GaitPhase.TAKEOFF, GaitPhase.SWING, GaitPhase.STRIKE, GaitPhase.STANCE)]

            # takeoff tilts back by exactly what the swing tilts forward
            n_to, n_sw = step[0].frames, step[1].frames
            a = profile.swing_amplitude
            b = a * _half_sine_sum(n_sw) / _half_sine_sum(n_to)
            if b > PITCH_RATE_CAP:
                b = PITCH_RATE_CAP
                a = b * _half_sine_sum(n_to) / _half_sine_sum(n_sw)
            step[0].pitch_scale = -b
            step[1].pitch_scale = a

            if s >= cfg.n_steps - cfg.turn_steps:
                turning += step[:2]
            segments += step
            step_no += 1

        if turning:
            rate = math.pi / (sum(seg.frames for seg in turning) * dt)
            for seg in turning:
                seg.turn_rate = rate
    segments.append(_Segment(aux, 0))

    aux_segments = [seg for seg in segments if seg.phase == aux]
    lo, hi = cfg.aux_duration_s
    if cfg.class_balance:
        locomotion = sum(seg.frames for seg in segments if seg.phase != aux)
        budget = locomotion * AUX_SHARE / (1.0 - AUX_SHARE)
        weights = rng.uniform(lo, hi, size=len(aux_segments))
        for seg, w in zip(aux_segments, weights):
            seg.frames = max(MIN_AUX_FRAMES, int(round(budget * w / weights.sum())))
    else:
        for seg in aux_segments:
            seg.frames = max(MIN_AUX_FRAMES, int(round(rng.uniform(lo, hi) * fs)))
    return segments


# ---------------------------------------------------------------------------
# Rendering
# ---------------------------------------------------------------------------

def quat_to_rotvec(q) -> tuple[float, float, float]:
    w, x, y, z = q
    if w < 0:
        w, x, y, z = -w, -x, -y, -z
    s = math.sqrt(x * x + y * y + z * z)
    if s < 1e-15:
        return (2.0 * x, 2.0 * y, 2.0 * z)
    angle = 2.0 * math.atan2(s, w)
    return (x * angle / s, y * angle / s, z * angle / s)


def _heading(q) -> float:
    return quat_to_euler(q)[0]


class _AuxWander:
    """Grounded-crutch wander: mean-reverting tilt with occasional fidget bursts."""

    def __init__(self, profile: SubjectProfile, rng: np.random.Generator, frames: int, fs: float):
        self.rng = rng
        self.sigma = profile.aux_wander
        self.fs = fs
        self.rate = np.zeros(3)
        self.acc = np.zeros(3)
        self.bursts = []
        for _ in range(int(rng.integers(0, 3))):
            length = int(rng.integers(15, 31))
            if frames > length + 2:
                start = int(rng.integers(0, frames - length))
                self.bursts.append((start, length, float(rng.uniform(2.0, 4.0))))

    def step(self, i: int, q) -> tuple[tuple[float, float, float], tuple[float, float, float]]:
        self.rate = 0.9 * self.rate + 0.1 * self.rng.normal(0.0, self.sigma, 3)
        self.acc = 0.9 * self.acc + 0.1 * self.rng.normal(0.0, 0.5, 3)
        _, pitch, roll = quat_to_euler(q)
        rate = [self.rate[0] - 0.8 * roll, self.rate[1] - 0.8 * pitch, 0.3 * self.rate[2]]
        acc = list(self.acc)
        for start, length, freq in self.bursts:
            if start <= i < start + length:
                wave = math.sin(2.0 * math.pi * freq * (i - start) / self.fs)
                rate[0] += 4.0 * self.sigma * wave
                rate[1] += 4.0 * self.sigma * wave
                acc[0] += 0.8 * wave
        return tuple(rate), tuple(acc)


def _motion(seg: _Segment, i: int, profile: SubjectProfile, heading: float):
    """Commanded (pitch rate, global motion accel) for frame i of a locomotion segment."""
    tau = (i + 0.5) / seg.frames
    bump = math.sin(math.pi * tau)
    fwd = (math.cos(heading), math.sin(heading))
    if seg.phase == GaitPhase.TAKEOFF:
        return seg.pitch_scale * bump, (0.0, 0.0, profile.takeoff_lift * bump)
    if seg.phase == GaitPhase.SWING:
        push = profile.swing_push * bump
        return seg.pitch_scale * bump, (push * fwd[0], push * fwd[1], 0.0)
    if seg.phase == GaitPhase.STRIKE:
        ring = 1.0 + 0.25 * (1 if i % 2 == 0 else -1)
        spike = profile.strike_spike * bump * ring
        return 0.0, (-0.6 * spike * fwd[0], -0.6 * spike * fwd[1], 0.8 * spike)
    return 0.0, (0.0, 0.0, 0.0)


def generate_session(profile: SubjectProfile, cfg: SynthConfig = SynthConfig(),
                     seed: Optional[int] = None, subject_id: str = "synthetic",
                     sample_rate_hz: float = config.SAMPLE_RATE_HZ,
                     gravity: float = config.GRAVITY) -> SessionRecording:
    seed = profile.seed if seed is None else int(seed)
    plan_rng, render_rng, noise_rng = (np.random.default_rng(s)
                                       for s in np.random.SeedSequence(seed).spawn(3))
    fs = sample_rate_hz
    dt = 1.0 / fs
    period_us = int(round(1e6 / fs))
    axis = (0.0, 1.0, 0.0) if cfg.swing_axis == "y" else (1.0, 0.0, 0.0)
    noise = np.asarray(profile.noise_std, dtype=np.float64) if cfg.noise else None

    q = quat_from_rotvec(0.0, 0.0, float(plan_rng.uniform(-math.pi, math.pi)))
    samples: list[RawImuSample] = []
    labels: list[GaitPhase] = []
    frame = 0

    for seg in _plan_session(profile, cfg, plan_rng, fs):
        wander = _AuxWander(profile, render_rng, seg.frames, fs) if seg.phase == GaitPhase.AUXILIARY else None
        for i in range(seg.frames):
            if wander is not None:
                body_rate, acc = wander.step(i, q)
                delta = quat_from_rotvec(*(r * dt for r in body_rate))
                q_new = quat_multiply(q, delta)
            else:
                pitch_rate, acc = _motion(seg, i, profile, _heading(q))
                turn = quat_from_rotvec(0.0, 0.0, seg.turn_rate * dt)
                tilt = quat_from_rotvec(*(c * pitch_rate * dt for c in axis))
                q_new = quat_multiply(quat_multiply(turn, q), tilt)
            q_new = quat_normalize(q_new)

            omega = tuple(c / dt for c in quat_to_rotvec(quat_multiply(quat_conjugate(q), q_new)))
            a_body = quat_rotate(quat_conjugate(q_new), (acc[0], acc[1], acc[2] + gravity))
            if noise is not None:
                n = noise_rng.normal(0.0, 1.0, 6) * noise
                a_body = tuple(float(v + e) for v, e in zip(a_body, n[:3]))
                omega = tuple(float(v + e) for v, e in zip(omega, n[3:]))

            samples.append(RawImuSample(frame * period_us, tuple(a_body), tuple(omega), q_new))
            labels.append(seg.phase)
            q = q_new
            frame += 1

    meta = SessionMeta(subject_id=subject_id, gait_strategy=profile.gait_strategy, seed=seed)
    return SessionRecording(meta, tuple(samples), tuple(labels))


def true_step_intervals(labels, timestamps) -> list[tuple[int, int]]:
    """Generated step boundaries: TakeOff onset to the onset of the Stance that closes it."""
    out = []
    start = None
    prev = None
    for label, t_us in zip(labels, timestamps):
        if label != prev:
            if label == GaitPhase.TAKEOFF:
                start = int(t_us)
            elif label == GaitPhase.STANCE and prev == GaitPhase.STRIKE and start is not None:
                out.append((start, int(t_us)))
                start = None
        prev = label
    return out


def initiation_flags(labels) -> list[bool]:
    """One flag per generated step: True when it is the first step after standing."""
    flags = []
    after_standing = True
    prev = None
    for label in labels:
        if label != prev:
            if label == GaitPhase.AUXILIARY:
                after_standing = True
            elif label == GaitPhase.TAKEOFF:
                flags.append(after_standing)
                after_standing = False
        prev = label
    return flags


# ---------------------------------------------------------------------------
# Datasets
# ---------------------------------------------------------------------------

def _file_hash(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for block in iter(lambda: f.read(8192), b""):
            h.update(block)
    return h.hexdigest()


def subject_seed(master_seed: int, index: int) -> int:
    return master_seed * 1000 + index


def generate_dataset(n_subjects: int, cfg: SynthConfig = SynthConfig(), out_dir: Path = config.DATA_DIR,
                     seed: int = 0, strategy: Optional[str] = None) -> dict:
    """Write one directory per subject plus manifest.json; returns the manifest."""
    if n_subjects < 1:
        raise ValueError(f"n_subjects must be >= 1, got {n_subjects}")
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise IoError(f"cannot create {out_dir}: {e}") from e

    subjects = []
    sessions = []
    totals = {p.code: 0 for p in GaitPhase}
    for i in range(n_subjects):
        s_seed = subject_seed(seed, i)
        s_strategy = strategy or config.GAIT_STRATEGIES[i % len(config.GAIT_STRATEGIES)]
        profile = make_profile(s_seed, s_strategy)
        subject_id = f"subject_{i:02d}"
        subjects.append({"subject_id": subject_id, "seed": s_seed, "strategy": s_strategy,
                         "profile": profile.to_dict()})

        for j in range(cfg.sessions_per_subject):
            sess_seed = s_seed * 100 + j
            session = generate_session(profile, cfg, seed=sess_seed, subject_id=subject_id)
            rel = Path(subject_id) / f"session_{j:02d}.csv"
            try:
                write_session_csv(session, out_dir / rel)
            except OSError as e:
                raise IoError(f"cannot write {out_dir / rel}: {e}") from e
            counts = session.class_counts()
            for code, n in counts.items():
                totals[code] += n
            sessions.append({
                "path": rel.as_posix(),
                "subject": subject_id,
                "strategy": s_strategy,
                "seed": sess_seed,
                "frames": len(session),
                "steps": cfg.laps * cfg.n_steps,
                "class_counts": {str(k): v for k, v in counts.items()},
                "sha256": _file_hash(out_dir / rel),
            })
        logger.info("Genererade %s (%s, %d sessioner)", subject_id, s_strategy,
                    cfg.sessions_per_subject)

    total = sum(totals.values())
    manifest = {
        "format_version": MANIFEST_VERSION,
        "seed": seed,
        "n_subjects": n_subjects,
        "synth": {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(cfg).items()},
        "profile_ranges_note": PROFILE_RANGES_NOTE,
        "subjects": subjects,
        "sessions": sessions,
        "class_share": {str(k): v / total for k, v in totals.items()},
    }
    try:
        with open(out_dir / MANIFEST_NAME, "w", encoding="utf-8") as f:
            json.dump(manifest, f, ensure_ascii=False, indent=2, sort_keys=True)
            f.write("\n")
    except OSError as e:
        raise IoError(f"cannot write manifest in {out_dir}: {e}") from e
    return manifest


@dataclass(frozen=True)
class DatasetSession:
    session_id: str             # "<subject>/<file stem>"
    subject: str
    session: SessionRecording


def load_dataset(data_dir: Path, verify: bool = True) -> list[DatasetSession]:
    """Read every session listed in manifest.json, or every */*.csv without one."""
    data_dir = Path(data_dir)
    if not data_dir.is_dir():
        raise IoError(f"dataset directory not found: {data_dir}")
    manifest_path = data_dir / MANIFEST_NAME

    entries = []
    if manifest_path.exists():
        try:
            with open(manifest_path, "r", encoding="utf-8") as f:
                manifest = json.load(f)
            for rec in manifest["sessions"]:
                entries.append((rec["path"], rec["subject"], rec.get("strategy", "unknown"),
                                rec.get("seed"), rec.get("sha256")))
        except (json.JSONDecodeError, KeyError, TypeError) as e:
            raise CorruptFile(f"{manifest_path}: {e}") from e
    else:
        for path in sorted(data_dir.glob("*/*.csv")):
            entries.append((path.relative_to(data_dir).as_posix(), path.parent.name,
                            "unknown", None, None))

    out = []
    for rel, subject, strategy, seed, digest in entries:
        path = data_dir / rel
        if not path.exists():
            raise IoError(f"session listed in manifest is missing: {path}")
        if verify and digest and _file_hash(path) != digest:
            raise CorruptFile(f"{path}: checksum does not match the manifest")
        session = read_session_csv(path, SessionMeta(subject, strategy, seed))
        out.append(DatasetSession(f"{subject}/{Path(rel).stem}", subject, session))
    return out


def subjects_of(dataset: list[DatasetSession]) -> list[str]:
    return sorted({d.subject for d in dataset})
