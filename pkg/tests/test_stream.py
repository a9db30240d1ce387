import csv
import json
import socket
import threading

import numpy as np
import pytest

from config import FsmConfig
from core_types import IoError, MalformedFrame, RawImuSample, SessionMeta, SessionRecording
from fsm_decoder import decode_sequence, write_step_log
from model_tcn import predict_session
from stream import (
    LATENCY_COLUMNS,
    DirectorySink,
    MemorySink,
    OnlinePipeline,
    ReplayServer,
    parse_address,
    parse_frame,
    render_frame,
    run_online,
)


def _replay(session, model, fsm_cfg, sink):
    with ReplayServer(session, "127.0.0.1:0", rate=0) as server:
        thread = server.serve_in_thread(accept_timeout=10.0)
        summary = run_online(model, fsm_cfg, server.address, sink)
        thread.join(timeout=10.0)
    return summary


def _serve_lines(lines):
    """One-shot server that writes the given byte lines and closes."""
    server = socket.create_server(("127.0.0.1", 0))

    def send():
        with server:
            conn, _ = server.accept()
            with conn:
                conn.sendall(b"".join(lines))

    thread = threading.Thread(target=send, daemon=True)
    thread.start()
    host, port = server.getsockname()[:2]
    return f"{host}:{port}", thread


# ---------------------------------------------------------------------------
# Wire format
# ---------------------------------------------------------------------------

def test_frame_round_trip(noisy_session):
    for s in noisy_session.samples[:50]:
        line = render_frame(s)
        assert line.endswith("\n") and line.count(" ") == 10
        back = parse_frame(line)
        assert back == RawImuSample(s.t_us, s.a_body, s.omega_body, s.orientation)


def test_frame_text():
    s = RawImuSample(10_000, (0.0, 0.5, 9.81), (0.1, -0.2, 0.0), (1.0, 0.0, 0.0, 0.0))
    assert render_frame(s) == "10000 0.0 0.5 9.81 0.1 -0.2 0.0 1.0 0.0 0.0 0.0\n"


@pytest.mark.parametrize("line", [
    "",
    "10000 0 0 9.81 0 0 0 1 0 0",
    "10000 0 0 9.81 0 0 0 1 0 0 0 7",
    "10000 0 0 abc 0 0 0 1 0 0 0",
    "1e4 0 0 9.81 0 0 0 1 0 0 0",
    "10000  0 0 9.81 0 0 0 1 0 0 0",
    "10000 0 0 nan 0 0 0 1 0 0 0",
    b"\xff\xfe garbage\n",
])
def test_malformed_frames(line):
    with pytest.raises(MalformedFrame):
        parse_frame(line)


def test_parse_address():
    assert parse_address("127.0.0.1:9000") == ("127.0.0.1", 9000)
    assert parse_address(":9000") == ("127.0.0.1", 9000)
    for bad in ("localhost", "host:abc", "host:"):
        with pytest.raises(ValueError):
            parse_address(bad)


def test_negative_rate_rejected(clean_session):
    with pytest.raises(ValueError):
        ReplayServer(clean_session, "127.0.0.1:0", rate=-1)


def test_connect_failure(random_model):
    spare = socket.create_server(("127.0.0.1", 0))
    port = spare.getsockname()[1]
    spare.close()
    with pytest.raises(IoError):
        run_online(random_model, FsmConfig(), f"127.0.0.1:{port}", MemorySink(), connect_timeout=1.0)


# ---------------------------------------------------------------------------
# Online pipeline
# ---------------------------------------------------------------------------

def test_pipeline_warms_up(random_model, noisy_session):
    pipeline = OnlinePipeline(random_model, FsmConfig())
    results = [pipeline.push(s) for s in noisy_session.samples[:12]]
    h = random_model.window.h
    assert all(r.warmup for r in results[:h - 1])
    assert not any(r.warmup for r in results[h - 1:])
    assert np.isclose(results[-1].probs.sum(), 1.0)


def test_pipeline_matches_offline_prediction(random_model, noisy_session):
    offline = predict_session(random_model, noisy_session)
    pipeline = OnlinePipeline(random_model, FsmConfig())
    for i, s in enumerate(noisy_session.samples):
        r = pipeline.push(s)
        assert int(r.raw) == int(offline.phases[i])
        if not offline.warmup[i]:
            assert np.array_equal(r.probs, offline.probs[i])


def test_online_equals_offline(tmp_path, random_model, noisy_session):
    fsm_cfg = FsmConfig(alpha=0.25, debounce_k=1)
    sink = MemorySink()
    summary = _replay(noisy_session, random_model, fsm_cfg, sink)

    offline = predict_session(random_model, noisy_session)
    refined, events = decode_sequence(offline.phase_list(), fsm_cfg,
                                      [int(t) for t in offline.t_us])
    assert summary.frames == len(noisy_session)
    assert summary.malformed == 0
    assert [r.refined for r in sink.frames] == refined
    assert sink.events == events
    assert summary.steps == len(events)
    assert sink.summary is summary

    write_step_log(sink.events, tmp_path / "online.csv")
    write_step_log(events, tmp_path / "offline.csv")
    assert (tmp_path / "online.csv").read_bytes() == (tmp_path / "offline.csv").read_bytes()


def test_latency_log_has_one_row_per_frame(random_model, clean_session):
    sink = MemorySink()
    summary = _replay(clean_session, random_model, FsmConfig(), sink)
    assert len(sink.latency) == len(clean_session)
    assert [row[0] for row in sink.latency] == [s.t_us for s in clean_session.samples]
    assert all(row[1] > 0 and row[5] >= 0 for row in sink.latency)
    assert summary.mean_latency_ms > 0
    assert summary.p99_latency_ms >= min(row[1] for row in sink.latency)


def test_directory_sink(tmp_path, random_model, clean_session):
    summary = _replay(clean_session, random_model, FsmConfig(), DirectorySink(tmp_path / "run"))
    with open(tmp_path / "run" / "latency.csv", newline="") as f:
        rows = list(csv.reader(f))
    assert rows[0] == LATENCY_COLUMNS
    assert len(rows) == len(clean_session) + 1
    with open(tmp_path / "run" / "predictions.csv", newline="") as f:
        preds = list(csv.DictReader(f))
    assert len(preds) == len(clean_session)
    assert preds[0]["warmup"] == "1" and preds[0]["p1"] == ""
    assert preds[-1]["warmup"] == "0"
    assert (tmp_path / "run" / "steps.csv").read_text().startswith("start_us,end_us")
    data = json.loads((tmp_path / "run" / "summary.json").read_text())
    assert data["frames"] == summary.frames


def test_empty_stream(random_model):
    empty = SessionRecording(SessionMeta("empty"), ())
    sink = MemorySink()
    summary = _replay(empty, random_model, FsmConfig(), sink)
    assert summary.frames == 0
    assert summary.steps == 0
    assert sink.events == []
    assert summary.mean_latency_ms == 0.0


def _lines_with(session, index, bad_line):
    lines = [render_frame(s).encode("utf-8") for s in session.samples[:200]]
    lines[index] = bad_line
    return lines


def _expected_online(model, samples):
    pipeline = OnlinePipeline(model, FsmConfig())
    return [pipeline.push(s).raw for s in samples]


def test_invalid_utf8_frame_is_skipped(random_model, noisy_session):
    address, thread = _serve_lines(_lines_with(noisy_session, 50, b"\xff\xfe garbage\n"))
    sink = MemorySink()
    summary = run_online(random_model, FsmConfig(), address, sink)
    thread.join(timeout=10.0)
    assert summary.frames == 199
    assert summary.malformed == 1
    kept = noisy_session.samples[:50] + noisy_session.samples[51:200]
    assert [r.t_us for r in sink.frames] == [s.t_us for s in kept]


def test_degenerate_orientation_frame_is_skipped(tmp_path, random_model, noisy_session):
    t_us = noisy_session.samples[50].t_us
    bad = f"{t_us} 0 0 9.8 0 0 0 0 0 0 0\n".encode("utf-8")
    address, thread = _serve_lines(_lines_with(noisy_session, 50, bad))
    summary = run_online(random_model, FsmConfig(), address, DirectorySink(tmp_path / "run"))
    thread.join(timeout=10.0)
    assert summary.frames == 199
    assert summary.malformed == 1

    data = json.loads((tmp_path / "run" / "summary.json").read_text())
    assert data["malformed"] == 1
    with open(tmp_path / "run" / "predictions.csv", newline="") as f:
        preds = list(csv.DictReader(f))
    kept = noisy_session.samples[:50] + noisy_session.samples[51:200]
    assert [int(p["raw"]) for p in preds] == [int(r) for r in _expected_online(random_model, kept)]


class _BrokenSink(MemorySink):
    def on_frame(self, result, latency_row):
        if len(self.frames) == 10:
            raise RuntimeError("disk full")
        super().on_frame(result, latency_row)


def test_sink_is_closed_when_run_fails(random_model, noisy_session):
    address, thread = _serve_lines([render_frame(s).encode("utf-8")
                                    for s in noisy_session.samples[:100]])
    sink = _BrokenSink()
    with pytest.raises(RuntimeError, match="disk full"):
        run_online(random_model, FsmConfig(), address, sink)
    thread.join(timeout=10.0)
    assert sink.summary is not None
    assert sink.summary.frames == 10


def test_replay_keeps_recorded_pace(noisy_session):
    session = SessionRecording(SessionMeta("pace"), tuple(noisy_session.samples[:100]))
    span_s = (session.samples[-1].t_us - session.samples[0].t_us) / 1e6
    stats = []
    with ReplayServer(session, "127.0.0.1:0", rate=1.0) as server:
        thread = threading.Thread(target=lambda: stats.append(server.serve_once(10.0)))
        thread.start()
        with socket.create_connection(parse_address(server.address), timeout=10.0) as client:
            received = client.makefile("rb").read()
        thread.join(timeout=10.0)
    assert received.count(b"\n") == 100
    assert stats[0].frames == 100
    assert stats[0].duration_s == pytest.approx(span_s, rel=0.05)
