"""Causal conversion of raw IMU samples into measurement vectors, and
segmentation of measurement streams into classifier windows.

Quaternions are (w, x, y, z), Hamilton convention, rotating body -> global.
Euler angles are ZYX intrinsic (yaw, pitch, roll).
"""

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import signal

import config
from config import PreprocessConfig, WindowConfig
from core_types import (
    NUM_CHANNELS,
    DegenerateChannel,
    DegenerateOrientation,
    GaitPhase,
    MeasurementVector,
    RawImuSample,
    SessionRecording,
    ShapeError,
    WindowTensor,
)

GIMBAL_EPS = 1e-10
TWO_PI = 2.0 * math.pi


# ---------------------------------------------------------------------------
# Quaternion math
# ---------------------------------------------------------------------------

def quat_normalize(q) -> tuple[float, float, float, float]:
    w, x, y, z = (float(v) for v in q)
    n = math.sqrt(w * w + x * x + y * y + z * z)
    if not n > 1e-9:
        raise DegenerateOrientation(f"quaternion norm {n:.3g} is too small to normalize")
    return (w / n, x / n, y / n, z / n)


def quat_multiply(q1, q0) -> tuple[float, float, float, float]:
    w1, x1, y1, z1 = q1
    w0, x0, y0, z0 = q0
    return (w1 * w0 - x1 * x0 - y1 * y0 - z1 * z0,
            w1 * x0 + x1 * w0 + y1 * z0 - z1 * y0,
            w1 * y0 - x1 * z0 + y1 * w0 + z1 * x0,
            w1 * z0 + x1 * y0 - y1 * x0 + z1 * w0)


def quat_conjugate(q) -> tuple[float, float, float, float]:
    w, x, y, z = q
    return (w, -x, -y, -z)


def quat_from_rotvec(rx: float, ry: float, rz: float) -> tuple[float, float, float, float]:
    """Exponential map: rotation of |r| radians about r/|r|."""
    angle = math.sqrt(rx * rx + ry * ry + rz * rz)
    if angle < 1e-15:
        return (1.0, 0.5 * rx, 0.5 * ry, 0.5 * rz)
    s = math.sin(0.5 * angle) / angle
    return (math.cos(0.5 * angle), rx * s, ry * s, rz * s)


def quat_to_matrix(q) -> tuple[tuple[float, float, float], ...]:
    w, x, y, z = q
    return ((1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)),
            (2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)),
            (2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)))


def quat_rotate(q, v) -> tuple[float, float, float]:
    (r00, r01, r02), (r10, r11, r12), (r20, r21, r22) = quat_to_matrix(q)
    vx, vy, vz = v
    return (r00 * vx + r01 * vy + r02 * vz,
            r10 * vx + r11 * vy + r12 * vz,
            r20 * vx + r21 * vy + r22 * vz)


def wrap_angle(a: float) -> float:
    """Map an angle into (-pi, pi]."""
    a = math.remainder(a, TWO_PI)
    if a <= -math.pi:
        a += TWO_PI
    return a


def quat_to_euler(q) -> tuple[float, float, float]:
    """Return (yaw, pitch, roll). At gimbal lock roll is 0 and yaw takes the
    whole rotation about the vertical."""
    w, x, y, z = q
    sinp = 2.0 * (w * y - z * x)
    if sinp >= 1.0 - GIMBAL_EPS:
        return wrap_angle(-2.0 * math.atan2(x, w)), math.pi / 2, 0.0
    if sinp <= -1.0 + GIMBAL_EPS:
        return wrap_angle(2.0 * math.atan2(x, w)), -math.pi / 2, 0.0

    yaw = math.atan2(2.0 * (w * z + x * y), 1.0 - 2.0 * (y * y + z * z))
    pitch = math.asin(sinp)
    roll = math.atan2(2.0 * (w * x + y * z), 1.0 - 2.0 * (x * x + y * y))
    return wrap_angle(yaw), pitch, wrap_angle(roll)


def euler_to_matrix(yaw: float, pitch: float, roll: float) -> np.ndarray:
    """R = Rz(yaw) @ Ry(pitch) @ Rx(roll)."""
    cy, sy = math.cos(yaw), math.sin(yaw)
    cp, sp = math.cos(pitch), math.sin(pitch)
    cr, sr = math.cos(roll), math.sin(roll)
    rz = np.array([[cy, -sy, 0.0], [sy, cy, 0.0], [0.0, 0.0, 1.0]])
    ry = np.array([[cp, 0.0, sp], [0.0, 1.0, 0.0], [-sp, 0.0, cp]])
    rx = np.array([[1.0, 0.0, 0.0], [0.0, cr, -sr], [0.0, sr, cr]])
    return rz @ ry @ rx


def remove_gravity(a_body, q, gravity: float = config.GRAVITY) -> tuple[float, float, float]:
    gx, gy, gz = quat_rotate(q, a_body)
    return (gx, gy, gz - gravity)


# ---------------------------------------------------------------------------
# Low-pass filter (Butterworth, direct form II transposed, per channel)
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LowPassState:
    b: tuple[float, ...]
    a: tuple[float, ...]
    zi: tuple[float, ...]                   # steady-state memory for a unit input
    z: tuple[tuple[float, ...], ...]        # one memory row per gyro channel
    primed: bool = False

    @property
    def order(self) -> int:
        return len(self.a) - 1


def design_lowpass(cutoff_hz: float = 5.0, sample_rate_hz: float = config.SAMPLE_RATE_HZ,
                   order: int = 2, channels: int = 3) -> LowPassState:
    if not cutoff_hz < sample_rate_hz / 2:
        raise ValueError(f"cutoff {cutoff_hz} Hz must be below Nyquist ({sample_rate_hz / 2} Hz)")
    b, a = signal.butter(order, cutoff_hz, btype="low", fs=sample_rate_hz)
    b, a = b / a[0], a / a[0]
    if np.any(np.abs(np.roots(a)) >= 1.0):
        raise ValueError("low-pass design is not stable")
    zi = signal.lfilter_zi(b, a)
    zeros = tuple(0.0 for _ in range(order))
    return LowPassState(tuple(float(v) for v in b), tuple(float(v) for v in a),
                        tuple(float(v) for v in zi), tuple(zeros for _ in range(channels)))


def new_filter_state(cfg: PreprocessConfig = PreprocessConfig(),
                     sample_rate_hz: float = config.SAMPLE_RATE_HZ) -> LowPassState:
    return design_lowpass(cfg.cutoff_hz, sample_rate_hz, cfg.filter_order)


def lowpass_step(state: LowPassState, omega) -> tuple[LowPassState, tuple[float, ...]]:
    b, a, n = state.b, state.a, state.order
    z = state.z
    if not state.primed:
        # step-matched start: the first output equals the first input
        z = tuple(tuple(zk * float(x) for zk in state.zi) for x in omega)

    out = []
    new_z = []
    for x, zc in zip(omega, z):
        x = float(x)
        y = b[0] * x + zc[0]
        nz = [0.0] * n
        for k in range(n - 1):
            nz[k] = b[k + 1] * x + zc[k + 1] - a[k + 1] * y
        nz[n - 1] = b[n] * x - a[n] * y
        out.append(y)
        new_z.append(tuple(nz))

    return LowPassState(b, a, state.zi, tuple(new_z), True), tuple(out)


# ---------------------------------------------------------------------------
# Measurement vectors
# ---------------------------------------------------------------------------

def assemble_measurement(raw: RawImuSample, state: LowPassState,
                         cfg: PreprocessConfig = PreprocessConfig()
                         ) -> tuple[LowPassState, MeasurementVector]:
    q = quat_normalize(raw.orientation)
    acc = remove_gravity(raw.a_body, q, cfg.gravity)
    state, gyro = lowpass_step(state, raw.omega_body)
    yaw, pitch, roll = quat_to_euler(q)
    return state, MeasurementVector(*acc, *gyro, yaw, pitch, roll)


def preprocess_session(session: SessionRecording,
                       cfg: PreprocessConfig = PreprocessConfig(),
                       sample_rate_hz: float = config.SAMPLE_RATE_HZ) -> np.ndarray:
    """Frame-by-frame pipeline over a whole session; returns a (T, 9) array."""
    state = new_filter_state(cfg, sample_rate_hz)
    out = np.empty((len(session.samples), NUM_CHANNELS), dtype=np.float64)
    for i, raw in enumerate(session.samples):
        state, vec = assemble_measurement(raw, state, cfg)
        out[i] = vec
    return out


# ---------------------------------------------------------------------------
# Windows
# ---------------------------------------------------------------------------

def window_count(T: int, h: int, stride: int) -> int:
    return (T - h) // stride + 1 if T >= h else 0


def window_array(vectors, h: int, stride: int) -> np.ndarray:
    """All windows as one (N, h, 9) array (view-free copy)."""
    arr = np.asarray(vectors, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] != NUM_CHANNELS:
        raise ShapeError(f"expected (T, {NUM_CHANNELS}) vectors, got {arr.shape}")
    if arr.shape[0] < h:
        return np.empty((0, h, NUM_CHANNELS))
    view = sliding_window_view(arr, h, axis=0)[::stride]     # (N, 9, h)
    return np.ascontiguousarray(view.transpose(0, 2, 1))


def segment_windows(vectors, labels: Sequence[GaitPhase] | None = None,
                    cfg: WindowConfig = WindowConfig(),
                    timestamps: Sequence[int] | None = None) -> list[WindowTensor]:
    data = window_array(vectors, cfg.h, cfg.stride)
    T = len(vectors)
    if labels is not None and len(labels) != T:
        raise ShapeError(f"{len(labels)} labels for {T} vectors")

    windows = []
    for n in range(data.shape[0]):
        last = n * cfg.stride + cfg.h - 1
        end_us = int(timestamps[last]) if timestamps is not None else last * cfg.period_us
        label = GaitPhase(labels[last]) if labels is not None else None
        windows.append(WindowTensor(data[n], end_us, label))
    return windows


# ---------------------------------------------------------------------------
# Normalization
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class NormStats:
    mean: np.ndarray        # (9,)
    std: np.ndarray         # (9,)

    def to_dict(self) -> dict:
        return {"mean": [float(v) for v in self.mean], "std": [float(v) for v in self.std]}

    @classmethod
    def from_dict(cls, d: dict) -> "NormStats":
        return cls(np.array(d["mean"], dtype=np.float64), np.array(d["std"], dtype=np.float64))

    @classmethod
    def identity(cls, channels: int = NUM_CHANNELS) -> "NormStats":
        return cls(np.zeros(channels), np.ones(channels))


def _as_window_array(windows) -> np.ndarray:
    if isinstance(windows, np.ndarray):
        return windows
    if not windows:
        return np.empty((0, 0, NUM_CHANNELS))
    return np.stack([w.data for w in windows])


def fit_normalizer(windows) -> NormStats:
    arr = _as_window_array(windows)
    if arr.size == 0:
        raise ValueError("cannot fit a normalizer on an empty training set")
    rows = arr.reshape(-1, arr.shape[-1])
    mean = rows.mean(axis=0)
    std = rows.std(axis=0)
    degenerate = [i for i in range(rows.shape[1]) if std[i] <= 1e-12 * (1.0 + abs(mean[i]))]
    if degenerate:
        raise DegenerateChannel(f"zero-variance channel(s): {degenerate}")
    return NormStats(mean, std)


def apply_normalizer(stats: NormStats, window):
    if isinstance(window, WindowTensor):
        return WindowTensor((window.data - stats.mean) / stats.std, window.end_us, window.label)
    return (np.asarray(window) - stats.mean) / stats.std
