import itertools

import numpy as np
import pytest

from config import FsmConfig
from core_types import GaitPhase, InvalidAttempt
from fsm_decoder import (
    FsmState,
    decode_sequence,
    default_timestamps,
    fsm_finish,
    fsm_step,
    ground_truth_steps,
    read_step_log,
    score_attempt,
    write_step_log,
)

from conftest import AUX, SK, ST, SW, TO, ideal_step

CANON = [TO, SW, SK, ST]


def _reference_events(labels, alpha):
    """Independent k=1 decoder: enumerate attempt boundaries directly.

    With k=1 a phase is confirmed wherever the label changes (the stream
    starts from Stance). An attempt opens at a TakeOff confirmation and
    closes at the next TakeOff confirmation, at a Stance confirmation once a
    Strike has been confirmed in the attempt, or at the end of the sequence.
    A canonical phase counts when its first occurrence in the attempt
    precedes the first occurrence of every later canonical phase.
    """
    ts = default_timestamps(len(labels))
    confirms = []
    prev = ST
    for i, label in enumerate(labels):
        if label != prev:
            confirms.append((i, label))
        prev = label

    events = []
    for n, (i, label) in enumerate(confirms):
        if label != TO:
            continue
        seq = [TO]
        end = len(labels) - 1
        for j, later in confirms[n + 1:]:
            if later == TO:
                end = j
                break
            seq.append(later)
            if later == ST and SK in seq:
                end = j
                break
        first = {p: seq.index(p) for p in CANON if p in seq}
        raw = sum(1 for p in first
                  if all(first[p] < first[q] for q in first if CANON.index(q) > CANON.index(p)))
        if raw / 4 >= alpha and ts[end] > ts[i]:
            events.append((ts[i], ts[end], float(raw)))
    return events


# ---------------------------------------------------------------------------
# Scoring
# ---------------------------------------------------------------------------

@pytest.mark.parametrize("phases,expected", [
    ([TO, SW, SK, ST], (4.0, 1.0)),
    ([TO, SK, ST], (3.0, 0.75)),
    ([TO, ST], (2.0, 0.5)),
    ([TO], (1.0, 0.25)),
    ([TO, SK, SW, ST], (3.0, 0.75)),
    ([TO, SW, AUX, SW, SK, ST], (4.0, 1.0)),
])
def test_score_attempt(phases, expected):
    assert score_attempt(phases) == expected


def test_out_of_order_scores_less_than_in_order():
    for perm in itertools.permutations([SW, SK, ST]):
        raw, _ = score_attempt([TO, *perm])
        if list(perm) != [SW, SK, ST]:
            assert raw < 4.0


@pytest.mark.parametrize("phases", [[], [SW, SK, ST], [ST, TO]])
def test_attempt_must_start_with_takeoff(phases):
    with pytest.raises(InvalidAttempt):
        score_attempt(phases)


# ---------------------------------------------------------------------------
# Decoder behaviour
# ---------------------------------------------------------------------------

def test_standing_still_emits_nothing():
    refined, events = decode_sequence([ST] * 200)
    assert events == []
    assert refined == [ST] * 200


def test_empty_sequence():
    assert decode_sequence([]) == ([], [])


def test_ideal_step():
    refined, events = decode_sequence(ideal_step(), FsmConfig(debounce_k=3))
    assert len(events) == 1
    e = events[0]
    assert e.interval.norm_score == 1.0
    assert e.interval.phases_seen == (TO, SW, SK, ST)
    assert e.onset_frames == (30, 40, 80, 88)
    assert e.start_us == 300_000
    assert e.end_us == 900_000          # Stance confirmed on its third frame
    assert refined[31] == ST and refined[32] == TO


def test_flickering_swing_is_suppressed():
    labels = [ST] * 30 + [TO] * 10 + [SW, ST] * 20 + [SK] * 8 + [ST] * 40
    refined, events = decode_sequence(labels, FsmConfig(debounce_k=3))
    assert len(events) == 1
    assert events[0].interval.raw_score == 3.0
    assert events[0].interval.phases_seen == (TO, SK, ST)
    assert set(refined[40:80]) == {TO}


def test_two_steps_in_order():
    _, events = decode_sequence(ideal_step() + ideal_step())
    assert len(events) == 2
    assert events[0].end_us <= events[1].start_us


def test_new_takeoff_finalizes_previous_attempt():
    labels = [ST] * 5 + [TO] * 5 + [SW] * 5 + [TO] * 5 + [SW] * 5 + [SK] * 5 + [ST] * 5
    _, events = decode_sequence(labels, FsmConfig(alpha=0.5, debounce_k=3))
    assert [e.interval.raw_score for e in events] == [2.0, 4.0]
    assert events[0].end_us == 17 * 10_000      # new TakeOff confirmed at frame 17
    assert events[1].start_us == 15 * 10_000
    _, strict = decode_sequence(labels, FsmConfig(alpha=0.6, debounce_k=3))
    assert len(strict) == 1


def test_long_auxiliary_run_aborts_attempt():
    labels = [ST] * 5 + [TO] * 5 + [SW] * 5 + [AUX] * 100 + [SK] * 5 + [ST] * 5
    _, events = decode_sequence(labels, FsmConfig(debounce_k=3, aux_reset_frames=100))
    assert events == []


def test_short_auxiliary_run_is_skipped():
    labels = [ST] * 5 + [TO] * 5 + [SW] * 5 + [AUX] * 20 + [SK] * 5 + [ST] * 5
    _, events = decode_sequence(labels, FsmConfig(debounce_k=3, aux_reset_frames=100))
    assert len(events) == 1
    assert events[0].interval.raw_score == 4.0


def test_stance_without_strike_keeps_attempt_open():
    labels = [ST] * 10 + [TO] * 10 + [SW] * 20 + [ST] * 20 + [AUX] * 120
    _, events = decode_sequence(labels, FsmConfig(debounce_k=3, aux_reset_frames=100))
    assert events == []


def test_stance_without_strike_closes_on_next_takeoff():
    labels = [ST] * 10 + [TO] * 10 + [SW] * 20 + [ST] * 20 + ideal_step(stance=0)
    _, events = decode_sequence(labels, FsmConfig(debounce_k=3))
    assert len(events) == 2
    first = events[0]
    assert first.interval.phases_seen == (TO, SW, ST)
    assert first.start_us == 100_000
    assert first.end_us == 620_000          # next TakeOff confirmed at frame 62
    assert events[1].interval.norm_score == 1.0


def test_stance_after_strike_closes_attempt():
    labels = [ST] * 5 + [TO] * 5 + [ST] * 5 + [SK] * 5 + [ST] * 5 + [AUX] * 150
    _, events = decode_sequence(labels, FsmConfig(alpha=0.5, debounce_k=3, aux_reset_frames=100))
    assert len(events) == 1
    assert events[0].interval.phases_seen == (TO, ST)
    assert events[0].end_us == 22 * 10_000


def test_attempt_timeout():
    labels = [ST] * 10 + [TO] * 5 + [SW] * 100
    cfg = FsmConfig(alpha=0.5, debounce_k=3, attempt_timeout_frames=50)
    _, events = decode_sequence(labels, cfg)
    assert len(events) == 1
    assert events[0].end_frame == 60
    assert events[0].end_us == 600_000
    assert events[0].interval.raw_score == 2.0


def test_open_attempt_is_finalized_at_end():
    labels = [ST] * 5 + [TO] * 5 + [SW] * 5 + [SK] * 5
    _, events = decode_sequence(labels, FsmConfig(debounce_k=3))
    assert len(events) == 1
    assert events[0].end_us == 19 * 10_000
    assert events[0].interval.raw_score == 3.0


def test_decode_equals_step_fold(rng):
    cfg = FsmConfig(debounce_k=2)
    labels = [GaitPhase(int(c)) for c in rng.integers(1, 6, size=400)]
    refined, events = decode_sequence(labels, cfg)

    state = FsmState()
    fold_refined, fold_events = [], []
    ts = default_timestamps(len(labels))
    for label, t in zip(labels, ts):
        state, phase, event = fsm_step(state, label, t, cfg)
        fold_refined.append(phase)
        if event is not None:
            fold_events.append(event)
    state, event = fsm_finish(state, ts[-1], cfg)
    if event is not None:
        fold_events.append(event)
    assert refined == fold_refined
    assert events == fold_events


def _blocky_labels(rng, n_runs):
    codes = rng.integers(1, 6, size=n_runs)
    lengths = rng.integers(1, 8, size=n_runs)
    return [GaitPhase(int(c)) for c, n in zip(codes, lengths) for _ in range(n)]


def test_outputs_do_not_depend_on_future_frames(rng):
    cfg = FsmConfig(debounce_k=3, aux_reset_frames=10, attempt_timeout_frames=40)
    for _ in range(30):
        labels = _blocky_labels(rng, 40)
        cut = int(rng.integers(1, len(labels)))
        other = labels[:cut] + _blocky_labels(rng, 20)

        def run(seq):
            state, out = FsmState(), []
            for label, t in zip(seq, default_timestamps(len(seq))):
                state, phase, event = fsm_step(state, label, t, cfg)
                out.append((phase, event))
            return out

        assert run(labels)[:cut] == run(other)[:cut]


def test_raising_alpha_never_adds_events(rng):
    for _ in range(50):
        labels = _blocky_labels(rng, 60)
        counts = [len(decode_sequence(labels, FsmConfig(alpha=a, debounce_k=2))[1])
                  for a in (0.25, 0.5, 0.75, 1.0)]
        assert counts == sorted(counts, reverse=True)


def test_emitted_events_are_valid(rng):
    cfg = FsmConfig(alpha=0.6, debounce_k=2)
    for _ in range(50):
        _, events = decode_sequence(_blocky_labels(rng, 60), cfg)
        for e in events:
            assert e.interval.norm_score >= cfg.alpha
            assert e.start_us < e.end_us


@pytest.mark.parametrize("alpha", [0.25, 0.5, 0.75, 1.0])
def test_matches_brute_force_reference_on_all_short_sequences(alpha):
    cfg = FsmConfig(alpha=alpha, debounce_k=1)
    mismatches = 0
    for combo in itertools.product(list(GaitPhase), repeat=6):
        _, events = decode_sequence(combo, cfg)
        got = [(e.start_us, e.end_us, e.interval.raw_score) for e in events]
        if got != _reference_events(combo, alpha):
            mismatches += 1
    assert mismatches == 0


def test_ground_truth_steps_uses_same_decoder():
    labels = ideal_step() + [AUX] * 50 + ideal_step()
    cfg = FsmConfig()
    assert ground_truth_steps(labels, cfg) == decode_sequence(labels, cfg)[1]
    assert len(ground_truth_steps(labels, cfg)) == 2
    assert ground_truth_steps([AUX] * 300, cfg) == []


def test_explicit_timestamps_are_used():
    labels = ideal_step()
    ts = [1_000_000 + 20_000 * i for i in range(len(labels))]
    _, events = decode_sequence(labels, FsmConfig(), ts)
    assert events[0].start_us == ts[30]
    with pytest.raises(ValueError):
        decode_sequence(labels, FsmConfig(), ts[:-1])


# ---------------------------------------------------------------------------
# Step log
# ---------------------------------------------------------------------------

def test_step_log_format_and_round_trip(tmp_path):
    _, events = decode_sequence(ideal_step() + ideal_step(), FsmConfig())
    write_step_log(events, tmp_path / "steps.csv")
    lines = (tmp_path / "steps.csv").read_text().splitlines()
    assert lines[0] == "start_us,end_us,raw_score,norm_score,phases"
    assert lines[1] == "300000,900000,4.0,1.0,2-3-4-1"
    assert read_step_log(tmp_path / "steps.csv") == [e.interval for e in events]


def test_step_log_accepts_intervals(tmp_path):
    _, events = decode_sequence(ideal_step(), FsmConfig())
    write_step_log([e.interval for e in events], tmp_path / "a.csv")
    write_step_log(events, tmp_path / "b.csv")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()


def test_timestamps_default_to_sample_period():
    assert default_timestamps(3) == [0, 10_000, 20_000]
    assert np.diff(default_timestamps(50)).tolist() == [10_000] * 49
