"""Session replay over a TCP stream and the online pipeline that consumes it.

Wire format: one sample per line, `t_us ax ay az wx wy wz qw qx qy qz`,
single spaces, floats in round-trip decimal form.
"""

import csv
import json
import logging
import math
import queue
import socket
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from config import FsmConfig
from core_types import (
    NUM_CHANNELS,
    GaitError,
    GaitPhase,
    IoError,
    MalformedFrame,
    RawImuSample,
    SessionRecording,
    fmt_float,
)
from fsm_decoder import FsmState, StepEvent, fsm_finish, fsm_step, write_step_log
from model_tcn import PREDICTION_COLUMNS, TcnModel, classify_window, format_prediction_row
from preprocess import assemble_measurement, new_filter_state

logger = logging.getLogger(__name__)

WIRE_FIELDS = 11
LATENCY_COLUMNS = ["t_us", "recv_to_done_ms", "stage_pre_ms", "stage_fwd_ms",
                   "stage_fsm_ms", "queue_depth"]


# ---------------------------------------------------------------------------
# Wire format
# ---------------------------------------------------------------------------

def render_frame(sample: RawImuSample) -> str:
    values = (*sample.a_body, *sample.omega_body, *sample.orientation)
    return " ".join([str(int(sample.t_us)), *(fmt_float(v) for v in values)]) + "\n"


def parse_frame(line: str | bytes) -> RawImuSample:
    if isinstance(line, bytes):
        try:
            line = line.decode("utf-8")
        except UnicodeDecodeError as e:
            raise MalformedFrame(f"frame is not valid UTF-8: {e}") from e
    parts = line.rstrip("\r\n").split(" ")
    if len(parts) != WIRE_FIELDS:
        raise MalformedFrame(f"expected {WIRE_FIELDS} fields, got {len(parts)}")
    try:
        t_us = int(parts[0])
        v = [float(p) for p in parts[1:]]
    except ValueError as e:
        raise MalformedFrame(str(e)) from e
    if not all(math.isfinite(x) for x in v):
        raise MalformedFrame("non-finite value in frame")
    return RawImuSample(t_us, tuple(v[0:3]), tuple(v[3:6]), tuple(v[6:10]))


def parse_address(address: str) -> tuple[str, int]:
    host, sep, port = address.rpartition(":")
    if not sep or not port.isdigit():
        raise ValueError(f"address must look like host:port, got '{address}'")
    return host or "127.0.0.1", int(port)


# ---------------------------------------------------------------------------
# Replay server
# ---------------------------------------------------------------------------

@dataclass
class ReplayStats:
    frames: int
    duration_s: float


class ReplayServer:
    """Serves one session to one client, paced by the recorded timestamps.

    rate=0 sends as fast as possible. Port 0 binds an ephemeral port; read the
    actual one from `address`.
    """

    def __init__(self, session: SessionRecording, address: str, rate: float = 1.0):
        if rate < 0:
            raise ValueError(f"rate must be >= 0, got {rate}")
        self.session = session
        self.rate = rate
        host, port = parse_address(address)
        try:
            self.sock = socket.create_server((host, port))
        except OSError as e:
            raise IoError(f"cannot bind {address}: {e}") from e

    @property
    def address(self) -> str:
        host, port = self.sock.getsockname()[:2]
        return f"{host}:{port}"

    def serve_once(self, accept_timeout: Optional[float] = None) -> ReplayStats:
        self.sock.settimeout(accept_timeout)
        try:
            conn, peer = self.sock.accept()
        except OSError as e:
            raise IoError(f"no client connected: {e}") from e
        finally:
            self.sock.settimeout(None)
        logger.info("Klient ansluten: %s:%s", *peer[:2])

        samples = self.session.samples
        start = time.perf_counter()
        try:
            with conn:
                t0 = samples[0].t_us if samples else 0
                for s in samples:
                    if self.rate > 0:
                        due = start + (s.t_us - t0) / 1e6 / self.rate
                        delay = due - time.perf_counter()
                        if delay > 0:
                            time.sleep(delay)
                    conn.sendall(render_frame(s).encode("utf-8"))
        except OSError as e:
            raise IoError(f"replay connection failed: {e}") from e
        duration = time.perf_counter() - start
        logger.info("Skickade %d bildrutor på %.2f s", len(samples), duration)
        return ReplayStats(len(samples), duration)

    def serve_in_thread(self, accept_timeout: Optional[float] = None) -> threading.Thread:
        thread = threading.Thread(target=self.serve_once, args=(accept_timeout,), daemon=True)
        thread.start()
        return thread

    def close(self):
        self.sock.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def serve_replay(session: SessionRecording, address: str, rate: float = 1.0,
                 accept_timeout: Optional[float] = None) -> ReplayStats:
    with ReplayServer(session, address, rate) as server:
        return server.serve_once(accept_timeout)


# ---------------------------------------------------------------------------
# Online pipeline
# ---------------------------------------------------------------------------

@dataclass
class FrameResult:
    t_us: int
    probs: Optional[np.ndarray]         # None during warm-up
    raw: GaitPhase
    refined: GaitPhase
    event: Optional[StepEvent]
    stage_ns: tuple[int, int, int]      # preprocess, forward, fsm

    @property
    def warmup(self) -> bool:
        return self.probs is None


class OnlinePipeline:
    """Per-frame preprocess -> ring-buffer window -> classify -> FSM."""

    def __init__(self, model: TcnModel, fsm_cfg: FsmConfig = FsmConfig()):
        self.model = model
        self.fsm_cfg = fsm_cfg
        self.h = model.window.h
        self.filter = new_filter_state(model.preprocess, model.window.sample_rate_hz)
        self.ring = np.zeros((self.h, NUM_CHANNELS))
        self.count = 0
        self.fsm = FsmState()
        self.last_t_us: Optional[int] = None

    def push(self, sample: RawImuSample) -> FrameResult:
        t0 = time.perf_counter_ns()
        self.filter, vec = assemble_measurement(sample, self.filter, self.model.preprocess)
        self.ring[self.count % self.h] = vec
        self.count += 1
        t1 = time.perf_counter_ns()

        probs = None
        raw = GaitPhase.STANCE
        if self.count >= self.h:
            order = np.arange(self.count - self.h, self.count) % self.h
            probs = classify_window(self.model, self.ring[order])
            raw = GaitPhase(int(np.argmax(probs)) + 1)
        t2 = time.perf_counter_ns()

        self.fsm, refined, event = fsm_step(self.fsm, raw, sample.t_us, self.fsm_cfg)
        self.last_t_us = sample.t_us
        t3 = time.perf_counter_ns()
        return FrameResult(sample.t_us, probs, raw, refined, event, (t1 - t0, t2 - t1, t3 - t2))

    def finish(self) -> Optional[StepEvent]:
        if self.last_t_us is None:
            return None
        self.fsm, event = fsm_finish(self.fsm, self.last_t_us, self.fsm_cfg)
        return event


# ---------------------------------------------------------------------------
# Sinks
# ---------------------------------------------------------------------------

@dataclass
class RunSummary:
    frames: int = 0
    malformed: int = 0
    steps: int = 0
    max_queue_depth: int = 0
    mean_latency_ms: float = 0.0
    p99_latency_ms: float = 0.0

    def to_dict(self) -> dict:
        return dict(self.__dict__)


class MemorySink:
    def __init__(self):
        self.frames: list[FrameResult] = []
        self.events: list[StepEvent] = []
        self.latency: list[tuple] = []
        self.summary: Optional[RunSummary] = None

    def on_frame(self, result: FrameResult, latency_row: tuple):
        self.frames.append(result)
        self.latency.append(latency_row)

    def on_step(self, event: StepEvent):
        self.events.append(event)

    def close(self, summary: RunSummary):
        self.summary = summary


class DirectorySink:
    """Writes predictions.csv, steps.csv, latency.csv and summary.json."""

    def __init__(self, out_dir: Path):
        self.out_dir = Path(out_dir)
        self.out_dir.mkdir(parents=True, exist_ok=True)
        self._pred = open(self.out_dir / "predictions.csv", "w", encoding="utf-8", newline="")
        self._lat = open(self.out_dir / "latency.csv", "w", encoding="utf-8", newline="")
        self._pred_w = csv.writer(self._pred, lineterminator="\n")
        self._lat_w = csv.writer(self._lat, lineterminator="\n")
        self._pred_w.writerow(PREDICTION_COLUMNS)
        self._lat_w.writerow(LATENCY_COLUMNS)
        self.events: list[StepEvent] = []

    def on_frame(self, result: FrameResult, latency_row: tuple):
        self._pred_w.writerow(format_prediction_row(result.t_us, result.probs, result.raw,
                                                    result.refined, result.warmup))
        t_us, total, pre, fwd, fsm, depth = latency_row
        self._lat_w.writerow([str(t_us), fmt_float(total), fmt_float(pre), fmt_float(fwd),
                              fmt_float(fsm), str(depth)])

    def on_step(self, event: StepEvent):
        self.events.append(event)

    def close(self, summary: RunSummary):
        self._pred.close()
        self._lat.close()
        write_step_log(self.events, self.out_dir / "steps.csv")
        with open(self.out_dir / "summary.json", "w", encoding="utf-8") as f:
            json.dump(summary.to_dict(), f, indent=2, sort_keys=True)
            f.write("\n")


# ---------------------------------------------------------------------------
# run_online
# ---------------------------------------------------------------------------

_EOF = object()


def _reader(sock: socket.socket, frames: queue.Queue):
    """Queues raw byte lines; decoding happens per frame in the consumer."""
    try:
        with sock.makefile("rb") as rfile:
            for line in rfile:
                frames.put((line, time.perf_counter_ns()))
    except OSError as e:
        logger.warning("Läsfel från strömmen: %s", e)
    finally:
        frames.put(_EOF)


def run_online(model: TcnModel, fsm_cfg: FsmConfig, address: str, sink,
               connect_timeout: float = 10.0) -> RunSummary:
    """Consume a replay stream until it closes. Frames are queued, never dropped."""
    host, port = parse_address(address)
    try:
        sock = socket.create_connection((host, port), timeout=connect_timeout)
        sock.settimeout(None)
    except OSError as e:
        raise IoError(f"cannot connect to {address}: {e}") from e
    logger.info("Ansluten till %s", address)

    frames: queue.Queue = queue.Queue()
    reader = threading.Thread(target=_reader, args=(sock, frames), daemon=True)
    reader.start()

    pipeline = OnlinePipeline(model, fsm_cfg)
    summary = RunSummary()
    latencies = []
    try:
        while True:
            item = frames.get()
            if item is _EOF:
                break
            depth = frames.qsize()
            summary.max_queue_depth = max(summary.max_queue_depth, depth)
            line, recv_ns = item
            try:
                result = pipeline.push(parse_frame(line))
            except GaitError as e:
                # the pipeline state is untouched when a frame is rejected
                summary.malformed += 1
                logger.warning("Felaktig bildruta hoppades över: %s", e)
                continue

            done_ns = time.perf_counter_ns()
            total_ms = (done_ns - recv_ns) / 1e6
            latencies.append(total_ms)
            pre, fwd, fsm = (ns / 1e6 for ns in result.stage_ns)
            sink.on_frame(result, (result.t_us, total_ms, pre, fwd, fsm, depth))
            summary.frames += 1
            if result.event is not None:
                sink.on_step(result.event)
                summary.steps += 1

        final = pipeline.finish()
        if final is not None:
            sink.on_step(final)
            summary.steps += 1
    finally:
        reader.join(timeout=1.0)
        sock.close()
        if latencies:
            summary.mean_latency_ms = float(np.mean(latencies))
            summary.p99_latency_ms = float(np.percentile(latencies, 99))
        sink.close(summary)

    logger.info("Strömmen stängd: %d bildrutor, %d steg, %d felaktiga",
                summary.frames, summary.steps, summary.malformed)
    return summary
