"""Causal step decoder over a per-frame phase stream.

Predicted phases are debounced (a phase is confirmed after `debounce_k`
identical frames in a row), confirmed phases drive an attempt that opens on
TakeOff and is scored against the canonical order TakeOff -> Swing -> Strike
-> Stance. An attempt is finalized when Stance is confirmed after a Strike,
when a new TakeOff is confirmed, on timeout, or at end of stream; it is
emitted as a step when its normalized score reaches alpha.
"""

import csv
import logging
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional, Sequence

import config
from config import FsmConfig
from core_types import (
    CANONICAL_STEP,
    CorruptFile,
    GaitPhase,
    InvalidAttempt,
    IoError,
    StepInterval,
    fmt_float,
    phase_from_code,
)

logger = logging.getLogger(__name__)

IDLE = "Idle"
IN_ATTEMPT = "InAttempt"

MAX_RAW_SCORE = float(len(CANONICAL_STEP))

_CANONICAL_INDEX = {phase: i for i, phase in enumerate(CANONICAL_STEP)}

# Pass-through decoder used for "without FSM" step metrics: no fragment
# suppression and only complete canonical sequences count.
RAW_DECODER = FsmConfig(alpha=1.0, debounce_k=1)


# ---------------------------------------------------------------------------
# Scoring
# ---------------------------------------------------------------------------

def counted_phases(confirmed: Sequence[GaitPhase]) -> tuple[GaitPhase, ...]:
    """Phases that contribute to the score, in confirmation order.

    A forward-only pointer walks the canonical order; a confirmation counts
    only if it lies strictly ahead of the pointer.
    """
    if not confirmed or confirmed[0] != GaitPhase.TAKEOFF:
        raise InvalidAttempt("an attempt must start with a confirmed TakeOff")
    counted = []
    pos = -1
    for phase in confirmed:
        j = _CANONICAL_INDEX.get(phase)
        if j is not None and j > pos:
            counted.append(phase)
            pos = j
    return tuple(counted)


def score_attempt(confirmed: Sequence[GaitPhase]) -> tuple[float, float]:
    raw = float(len(counted_phases(confirmed)))
    return raw, raw / MAX_RAW_SCORE


# ---------------------------------------------------------------------------
# State
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class StepEvent:
    interval: StepInterval
    onset_frames: tuple[int, ...]       # onset frame of each counted phase
    end_frame: int

    @property
    def start_us(self) -> int:
        return self.interval.start_us

    @property
    def end_us(self) -> int:
        return self.interval.end_us


@dataclass(frozen=True)
class FsmState:
    mode: str = IDLE
    frame: int = -1                                 # index of the last processed frame
    refined: GaitPhase = GaitPhase.STANCE
    pending: Optional[GaitPhase] = None
    pending_run: int = 0
    pending_onset_frame: int = 0
    pending_onset_us: int = 0
    confirmed_seq: tuple[GaitPhase, ...] = ()       # every confirmation inside the attempt
    onset_frames: tuple[int, ...] = ()              # onsets of the counted phases
    attempt_start_us: int = 0
    attempt_start_frame: int = 0
    progress: int = -1                              # canonical index of the last counted phase
    aux_run: int = 0

    def __post_init__(self):
        if self.mode == IDLE and self.confirmed_seq:
            raise ValueError("an idle decoder cannot hold an attempt")


def _idle(state: FsmState) -> FsmState:
    return replace(state, mode=IDLE, confirmed_seq=(), onset_frames=(), progress=-1,
                   attempt_start_us=0, attempt_start_frame=0)


def _finalize(state: FsmState, end_us: int, end_frame: int, cfg: FsmConfig
              ) -> tuple[FsmState, Optional[StepEvent]]:
    counted = counted_phases(state.confirmed_seq)
    raw = float(len(counted))
    norm = raw / MAX_RAW_SCORE
    event = None
    if norm >= cfg.alpha and end_us > state.attempt_start_us:
        interval = StepInterval(state.attempt_start_us, int(end_us), raw, norm, counted)
        event = StepEvent(interval, state.onset_frames, end_frame)
        logger.debug("steg %d-%d us, poäng %.2f", interval.start_us, interval.end_us, raw)
    return _idle(state), event


def _on_confirm(state: FsmState, phase: GaitPhase, t_us: int, cfg: FsmConfig
                ) -> tuple[FsmState, Optional[StepEvent]]:
    event = None
    if phase == GaitPhase.TAKEOFF:
        if state.mode == IN_ATTEMPT:
            state, event = _finalize(state, t_us, state.frame, cfg)
        state = replace(state, mode=IN_ATTEMPT, confirmed_seq=(phase,),
                        onset_frames=(state.pending_onset_frame,), progress=0,
                        attempt_start_us=state.pending_onset_us,
                        attempt_start_frame=state.pending_onset_frame)
        return state, event

    if state.mode != IN_ATTEMPT:
        return state, None

    state = replace(state, confirmed_seq=state.confirmed_seq + (phase,))
    j = _CANONICAL_INDEX.get(phase)
    if j is not None and j > state.progress:
        state = replace(state, progress=j,
                        onset_frames=state.onset_frames + (state.pending_onset_frame,))
    if phase == GaitPhase.STANCE and GaitPhase.STRIKE in state.confirmed_seq:
        state, event = _finalize(state, t_us, state.frame, cfg)
    return state, event


def fsm_step(state: FsmState, predicted: GaitPhase, t_us: int, cfg: FsmConfig = FsmConfig()
             ) -> tuple[FsmState, GaitPhase, Optional[StepEvent]]:
    """Advance the decoder by one frame. Returns (state, refined phase, event or None)."""
    predicted = GaitPhase(predicted)
    t_us = int(t_us)
    frame = state.frame + 1

    if predicted == state.pending:
        state = replace(state, frame=frame, pending_run=state.pending_run + 1)
    else:
        state = replace(state, frame=frame, pending=predicted, pending_run=1,
                        pending_onset_frame=frame, pending_onset_us=t_us)
    aux_run = state.aux_run + 1 if predicted == GaitPhase.AUXILIARY else 0
    state = replace(state, aux_run=aux_run)

    event = None
    if state.pending_run == cfg.debounce_k and predicted != state.refined:
        state = replace(state, refined=predicted)
        state, event = _on_confirm(state, predicted, t_us, cfg)

    if state.mode == IN_ATTEMPT:
        if state.aux_run >= cfg.aux_reset_frames:
            logger.debug("försök avbrutet av hjälpfas vid bildruta %d", frame)
            state = _idle(state)
        elif frame - state.attempt_start_frame >= cfg.attempt_timeout_frames:
            # never overwrites an event from _on_confirm: an attempt opened
            # this frame is younger than debounce_k
            state, event = _finalize(state, t_us, frame, cfg)

    return state, state.refined, event


def fsm_finish(state: FsmState, t_us: int, cfg: FsmConfig = FsmConfig()
               ) -> tuple[FsmState, Optional[StepEvent]]:
    """Finalize an attempt left open at end of stream."""
    if state.mode != IN_ATTEMPT:
        return state, None
    return _finalize(state, int(t_us), state.frame, cfg)


# ---------------------------------------------------------------------------
# Whole sequences
# ---------------------------------------------------------------------------

def default_timestamps(n: int, sample_rate_hz: float = config.SAMPLE_RATE_HZ) -> list[int]:
    period = int(round(1e6 / sample_rate_hz))
    return [i * period for i in range(n)]


def decode_sequence(labels: Sequence, cfg: FsmConfig = FsmConfig(),
                    timestamps: Sequence[int] | None = None
                    ) -> tuple[list[GaitPhase], list[StepEvent]]:
    if timestamps is None:
        timestamps = default_timestamps(len(labels))
    if len(timestamps) != len(labels):
        raise ValueError(f"{len(timestamps)} timestamps for {len(labels)} labels")

    state = FsmState()
    refined: list[GaitPhase] = []
    events: list[StepEvent] = []
    for label, t_us in zip(labels, timestamps):
        state, phase, event = fsm_step(state, GaitPhase(int(label)), t_us, cfg)
        refined.append(phase)
        if event is not None:
            events.append(event)
    if len(labels):
        state, event = fsm_finish(state, timestamps[-1], cfg)
        if event is not None:
            events.append(event)
    return refined, events


def ground_truth_steps(labels: Sequence, cfg: FsmConfig = FsmConfig(),
                       timestamps: Sequence[int] | None = None) -> list[StepEvent]:
    """Reference step timeline: the same decoder applied to ground-truth labels."""
    return decode_sequence(labels, cfg, timestamps)[1]


# ---------------------------------------------------------------------------
# Step log CSV
# ---------------------------------------------------------------------------

STEP_LOG_COLUMNS = ["start_us", "end_us", "raw_score", "norm_score", "phases"]


def format_step_row(interval: StepInterval) -> list[str]:
    return [str(interval.start_us), str(interval.end_us), fmt_float(interval.raw_score),
            fmt_float(interval.norm_score),
            "-".join(str(p.code) for p in interval.phases_seen)]


def write_step_log(events: Sequence, path: Path):
    """Accepts StepEvents or StepIntervals."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(STEP_LOG_COLUMNS)
        for e in events:
            writer.writerow(format_step_row(getattr(e, "interval", e)))


def read_step_log(path: Path) -> list[StepInterval]:
    try:
        f = open(path, "r", encoding="utf-8", newline="")
    except OSError as e:
        raise IoError(f"cannot read step log {path}: {e}") from e
    out = []
    with f:
        reader = csv.reader(f)
        if next(reader, None) != STEP_LOG_COLUMNS:
            raise CorruptFile(f"{path}: unexpected step log header")
        for line_no, row in enumerate(reader, start=2):
            try:
                phases = tuple(phase_from_code(int(c)) for c in row[4].split("-") if c)
                out.append(StepInterval(int(row[0]), int(row[1]), float(row[2]),
                                        float(row[3]), phases))
            except (ValueError, IndexError) as e:
                raise CorruptFile(f"{path}:{line_no}: {e}") from e
    return out
