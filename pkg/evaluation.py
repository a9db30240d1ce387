"""Evaluation: frame metrics, step matching, session and pooled reports,
the subject-count sweep and the per-frame latency benchmark."""

import csv
import itertools
import json
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy import stats

import config
from classifiers import get_classifier
from config import FsmConfig, RunConfig
from core_types import (
    ALL_PHASES,
    NUM_PHASES,
    GaitPhase,
    InsufficientData,
    LengthError,
    SessionRecording,
    fmt_float,
)
from fsm_decoder import RAW_DECODER, decode_sequence, ground_truth_steps
from model_tcn import SessionPrediction, TcnModel, predict_session, windows_from_session
from stream import OnlinePipeline
from synth import generate_session, make_profile

logger = logging.getLogger(__name__)

STEP_SUCCESS_DEFINITION = ("step success = recall of ground-truth steps matched one-to-one "
                           "(greedy, descending temporal IoU) at IoU >= threshold; "
                           "precision is reported alongside")


# ---------------------------------------------------------------------------
# Frame metrics
# ---------------------------------------------------------------------------

def _codes(seq) -> np.ndarray:
    return np.asarray([int(p) for p in seq], dtype=np.int64)


def confusion_counts(pred, truth) -> np.ndarray:
    p, t = _codes(pred), _codes(truth)
    if len(p) != len(t):
        raise LengthError(f"{len(p)} predictions for {len(t)} labels")
    counts = np.zeros((NUM_PHASES, NUM_PHASES), dtype=np.int64)
    np.add.at(counts, (t - 1, p - 1), 1)
    return counts


@dataclass
class FrameMetrics:
    counts: np.ndarray                  # [truth, pred]

    @property
    def frames(self) -> int:
        return int(self.counts.sum())

    @property
    def overall(self) -> float:
        n = self.frames
        return float(np.trace(self.counts) / n) if n else float("nan")

    @property
    def confusion(self) -> np.ndarray:
        rows = self.counts.sum(axis=1, keepdims=True)
        return np.divide(self.counts, rows, out=np.zeros(self.counts.shape), where=rows > 0)

    @property
    def per_class(self) -> np.ndarray:
        rows = self.counts.sum(axis=1)
        diag = np.diag(self.counts).astype(np.float64)
        return np.where(rows > 0, diag / np.maximum(rows, 1), np.nan)


def frame_metrics(pred, truth) -> FrameMetrics:
    return FrameMetrics(confusion_counts(pred, truth))


# ---------------------------------------------------------------------------
# Step matching
# ---------------------------------------------------------------------------

def _bounds(item) -> tuple[int, int]:
    interval = getattr(item, "interval", item)
    return interval.start_us, interval.end_us


def temporal_iou(a: tuple[int, int], b: tuple[int, int]) -> float:
    inter = max(0, min(a[1], b[1]) - max(a[0], b[0]))
    union = (a[1] - a[0]) + (b[1] - b[0]) - inter
    return inter / union if union > 0 else 0.0


@dataclass
class StepMatch:
    pairs: list[tuple[int, int, float]]     # (pred index, truth index, IoU)
    n_pred: int
    n_truth: int
    start_errors_ms: list[float]
    end_errors_ms: list[float]

    @property
    def matched(self) -> int:
        return len(self.pairs)

    @property
    def recall(self) -> float:
        return self.matched / self.n_truth if self.n_truth else float("nan")

    @property
    def precision(self) -> float:
        return self.matched / self.n_pred if self.n_pred else float("nan")

    def matched_truth(self) -> set[int]:
        return {t for _, t, _ in self.pairs}


def match_steps(pred: Sequence, truth: Sequence, iou_threshold: float = 0.5) -> StepMatch:
    pb = [_bounds(p) for p in pred]
    tb = [_bounds(t) for t in truth]
    candidates = []
    for i, a in enumerate(pb):
        for j, b in enumerate(tb):
            iou = temporal_iou(a, b)
            if iou >= iou_threshold and iou > 0:
                candidates.append((-iou, i, j))
    candidates.sort()

    used_p, used_t = set(), set()
    pairs = []
    for neg_iou, i, j in candidates:
        if i in used_p or j in used_t:
            continue
        used_p.add(i)
        used_t.add(j)
        pairs.append((i, j, -neg_iou))
    pairs.sort(key=lambda x: x[1])

    start_err = [abs(pb[i][0] - tb[j][0]) / 1000.0 for i, j, _ in pairs]
    end_err = [abs(pb[i][1] - tb[j][1]) / 1000.0 for i, j, _ in pairs]
    return StepMatch(pairs, len(pb), len(tb), start_err, end_err)


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------

def _mean_std(values: Sequence[float]) -> tuple[float, float]:
    if not values:
        return float("nan"), float("nan")
    arr = np.asarray(values, dtype=np.float64)
    return float(arr.mean()), float(arr.std())


@dataclass
class EvalReport:
    counts: np.ndarray
    true_steps: int = 0
    predicted_steps: int = 0
    matched_steps: int = 0
    start_errors_ms: list[float] = field(default_factory=list)
    end_errors_ms: list[float] = field(default_factory=list)
    initiation_steps: int = 0
    initiation_matched: int = 0

    @property
    def frame(self) -> FrameMetrics:
        return FrameMetrics(self.counts)

    @property
    def frames(self) -> int:
        return self.frame.frames

    @property
    def overall_accuracy(self) -> float:
        return self.frame.overall

    @property
    def per_class_accuracy(self) -> np.ndarray:
        return self.frame.per_class

    @property
    def confusion(self) -> np.ndarray:
        return self.frame.confusion

    @property
    def step_recall(self) -> float:
        return self.matched_steps / self.true_steps if self.true_steps else float("nan")

    @property
    def step_precision(self) -> float:
        return self.matched_steps / self.predicted_steps if self.predicted_steps else float("nan")

    @property
    def initiation_recall(self) -> float:
        return (self.initiation_matched / self.initiation_steps
                if self.initiation_steps else float("nan"))

    def merge(self, other: "EvalReport") -> "EvalReport":
        return EvalReport(self.counts + other.counts,
                          self.true_steps + other.true_steps,
                          self.predicted_steps + other.predicted_steps,
                          self.matched_steps + other.matched_steps,
                          self.start_errors_ms + other.start_errors_ms,
                          self.end_errors_ms + other.end_errors_ms,
                          self.initiation_steps + other.initiation_steps,
                          self.initiation_matched + other.initiation_matched)

    @classmethod
    def empty(cls) -> "EvalReport":
        return cls(np.zeros((NUM_PHASES, NUM_PHASES), dtype=np.int64))

    def to_dict(self) -> dict:
        start = _mean_std(self.start_errors_ms)
        end = _mean_std(self.end_errors_ms)
        return _json_safe({
            "frames": self.frames,
            "overall_accuracy": self.overall_accuracy,
            "per_class_accuracy": {p.label: v for p, v in zip(ALL_PHASES, self.per_class_accuracy)},
            "confusion": self.confusion.tolist(),
            "confusion_counts": self.counts.tolist(),
            "true_steps": self.true_steps,
            "predicted_steps": self.predicted_steps,
            "matched_steps": self.matched_steps,
            "step_recall": self.step_recall,
            "step_precision": self.step_precision,
            "start_error_ms": {"mean": start[0], "std": start[1]},
            "end_error_ms": {"mean": end[0], "std": end[1]},
            "initiation_steps": self.initiation_steps,
            "initiation_recall": self.initiation_recall,
        })


def _json_safe(obj):
    if isinstance(obj, dict):
        return {k: _json_safe(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_json_safe(v) for v in obj]
    if isinstance(obj, (float, np.floating)):
        return None if math.isnan(obj) else float(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    return obj


def _initiation_indices(truth_codes: np.ndarray, gt_events) -> set[int]:
    """Ground-truth steps that follow standing (Auxiliary) or start the session."""
    out = set()
    prev_end = -1
    aux = int(GaitPhase.AUXILIARY)
    for k, event in enumerate(gt_events):
        start = event.onset_frames[0]
        if k == 0 or np.any(truth_codes[prev_end + 1:start] == aux):
            out.add(k)
        prev_end = event.end_frame
    return out


def _step_report(counts, pred_events, gt_events, initiation: set[int], iou: float) -> EvalReport:
    match = match_steps(pred_events, gt_events, iou)
    hit = match.matched_truth()
    return EvalReport(counts, len(gt_events), len(pred_events), match.matched,
                      match.start_errors_ms, match.end_errors_ms,
                      len(initiation), len(initiation & hit))


def evaluate_labels(pred_phases, truth_labels, timestamps, warmup=None,
                    fsm_cfg: FsmConfig = FsmConfig(), iou_threshold: float = 0.5
                    ) -> tuple[EvalReport, EvalReport]:
    """(without FSM, with FSM) reports for a per-frame prediction stream."""
    pred = _codes(pred_phases)
    truth = _codes(truth_labels)
    if len(pred) != len(truth):
        raise LengthError(f"{len(pred)} predictions for {len(truth)} labels")
    keep = np.ones(len(pred), dtype=bool) if warmup is None else ~np.asarray(warmup, dtype=bool)
    timestamps = [int(t) for t in timestamps]

    refined, fsm_events = decode_sequence(pred, fsm_cfg, timestamps)
    _, raw_events = decode_sequence(pred, RAW_DECODER, timestamps)
    gt_events = ground_truth_steps(truth, fsm_cfg, timestamps)
    initiation = _initiation_indices(truth, gt_events)

    raw_counts = confusion_counts(pred[keep], truth[keep])
    fsm_counts = confusion_counts(_codes(refined)[keep], truth[keep])
    return (_step_report(raw_counts, raw_events, gt_events, initiation, iou_threshold),
            _step_report(fsm_counts, fsm_events, gt_events, initiation, iou_threshold))


def evaluate_session(model: TcnModel, fsm_cfg: FsmConfig, session: SessionRecording,
                     iou_threshold: float = 0.5,
                     prediction: Optional[SessionPrediction] = None
                     ) -> tuple[EvalReport, EvalReport]:
    if session.labels is None:
        raise InsufficientData("evaluation needs a labeled session")
    pred = prediction if prediction is not None else predict_session(model, session)
    return evaluate_labels(pred.phases, session.labels, pred.t_us, pred.warmup,
                           fsm_cfg, iou_threshold)


@dataclass
class SessionEvaluation:
    session_id: str
    subject: str
    raw: EvalReport
    fsm: EvalReport


@dataclass
class AggregateReport:
    total_raw: EvalReport
    total_fsm: EvalReport
    subjects: dict[str, tuple[EvalReport, EvalReport]]
    sessions: list[SessionEvaluation]
    iou_threshold: float = 0.5


def aggregate(evaluations: Sequence[SessionEvaluation], iou_threshold: float = 0.5) -> AggregateReport:
    """Pool counts per subject and over everything."""
    total_raw, total_fsm = EvalReport.empty(), EvalReport.empty()
    subjects: dict[str, tuple[EvalReport, EvalReport]] = {}
    for ev in evaluations:
        total_raw = total_raw.merge(ev.raw)
        total_fsm = total_fsm.merge(ev.fsm)
        raw, fsm = subjects.get(ev.subject, (EvalReport.empty(), EvalReport.empty()))
        subjects[ev.subject] = (raw.merge(ev.raw), fsm.merge(ev.fsm))
    return AggregateReport(total_raw, total_fsm, dict(sorted(subjects.items())),
                           list(evaluations), iou_threshold)


def evaluate_dataset(model: TcnModel, fsm_cfg: FsmConfig, dataset,
                     iou_threshold: float = 0.5) -> AggregateReport:
    """dataset: iterable of synth.DatasetSession."""
    evaluations = []
    for item in dataset:
        raw, fsm = evaluate_session(model, fsm_cfg, item.session, iou_threshold)
        evaluations.append(SessionEvaluation(item.session_id, item.subject, raw, fsm))
        logger.info("%s: fas %.3f / %.3f, steg %.3f / %.3f", item.session_id,
                    raw.overall_accuracy, fsm.overall_accuracy, raw.step_recall, fsm.step_recall)
    return aggregate(evaluations, iou_threshold)


# ---------------------------------------------------------------------------
# Report files
# ---------------------------------------------------------------------------

def report_to_dict(report: AggregateReport) -> dict:
    return {
        "format_version": config.REPORT_FORMAT_VERSION,
        "iou_threshold": report.iou_threshold,
        "step_success_definition": STEP_SUCCESS_DEFINITION,
        "total": {"without_fsm": report.total_raw.to_dict(),
                  "with_fsm": report.total_fsm.to_dict()},
        "subjects": {s: {"without_fsm": raw.to_dict(), "with_fsm": fsm.to_dict()}
                     for s, (raw, fsm) in report.subjects.items()},
        "sessions": [{"session": ev.session_id, "subject": ev.subject,
                      "without_fsm": ev.raw.to_dict(), "with_fsm": ev.fsm.to_dict()}
                     for ev in report.sessions],
    }


def _pct(v: float) -> str:
    return "   -" if math.isnan(v) else f"{100 * v:5.1f}"


def format_report_text(report: AggregateReport) -> str:
    columns = [("Totalt", report.total_raw, report.total_fsm)]
    columns += [(s, raw, fsm) for s, (raw, fsm) in report.subjects.items()]

    lines = [f"Utvärdering (IoU >= {report.iou_threshold})", ""]
    header = f"{'':28}" + "".join(f"{name:>22}" for name, _, _ in columns)
    lines.append(header)
    lines.append(f"{'':28}" + "".join(f"{'utan FSM':>11}{'med FSM':>11}" for _ in columns))

    def row(title, getter):
        cells = "".join(f"{_pct(getter(raw)):>11}{_pct(getter(fsm)):>11}" for _, raw, fsm in columns)
        return f"{title:28}{cells}"

    lines.append(row("Fasdetektion (%)", lambda r: r.overall_accuracy))
    for i, phase in enumerate(ALL_PHASES):
        lines.append(row(f"  {phase.label} (%)", lambda r, i=i: r.per_class_accuracy[i]))
    lines.append(row("Stegdetektion, recall (%)", lambda r: r.step_recall))
    lines.append(row("Stegdetektion, precision (%)", lambda r: r.step_precision))
    lines.append(row("Första steg, recall (%)", lambda r: r.initiation_recall))
    lines.append("")
    fsm = report.total_fsm
    start, end = _mean_std(fsm.start_errors_ms), _mean_std(fsm.end_errors_ms)
    lines.append(f"Stegtider med FSM: start {start[0]:.1f} ± {start[1]:.1f} ms, "
                 f"slut {end[0]:.1f} ± {end[1]:.1f} ms")
    lines.append(f"Steg: {fsm.true_steps} sanna, {fsm.predicted_steps} detekterade, "
                 f"{fsm.matched_steps} matchade")
    lines.append("")
    lines.append(f"Definition: {STEP_SUCCESS_DEFINITION}")
    return "\n".join(lines) + "\n"


def write_confusion_csv(metrics_counts: np.ndarray, path: Path):
    confusion = FrameMetrics(metrics_counts).confusion
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["truth", *(str(p.code) for p in ALL_PHASES)])
        for phase, row in zip(ALL_PHASES, confusion):
            writer.writerow([str(phase.code), *(fmt_float(v) for v in row)])


def write_report(report: AggregateReport, out_dir: Path):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "report.json", "w", encoding="utf-8") as f:
        json.dump(report_to_dict(report), f, ensure_ascii=False, indent=2, sort_keys=True)
        f.write("\n")
    with open(out_dir / "report.txt", "w", encoding="utf-8") as f:
        f.write(format_report_text(report))
    write_confusion_csv(report.total_raw.counts, out_dir / "confusion_raw.csv")
    write_confusion_csv(report.total_fsm.counts, out_dir / "confusion_fsm.csv")


# ---------------------------------------------------------------------------
# Subject sweep
# ---------------------------------------------------------------------------

@dataclass
class SweepRun:
    k: int
    repeat: int
    subjects: tuple[str, ...]
    seed: int
    raw_accuracy: float
    fsm_accuracy: float
    raw_step_recall: float
    fsm_step_recall: float


@dataclass
class SweepRow:
    k: int
    runs: int
    raw_accuracy: float
    fsm_accuracy: float
    raw_step_recall: float
    fsm_step_recall: float


@dataclass
class SweepTable:
    rows: list[SweepRow]
    runs: list[SweepRun]
    test_subjects: list[str]

    def write_csv(self, path: Path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8", newline="") as f:
            writer = csv.writer(f, lineterminator="\n")
            writer.writerow(["k", "runs", "raw_accuracy", "fsm_accuracy",
                             "raw_step_recall", "fsm_step_recall"])
            for r in self.rows:
                writer.writerow([r.k, r.runs, fmt_float(r.raw_accuracy), fmt_float(r.fsm_accuracy),
                                 fmt_float(r.raw_step_recall), fmt_float(r.fsm_step_recall)])

    def to_dict(self) -> dict:
        return _json_safe({"test_subjects": self.test_subjects,
                           "rows": [asdict(r) for r in self.rows],
                           "runs": [asdict(r) for r in self.runs],
                           "spearman_fsm_accuracy_vs_k": sweep_trend(self)})


def sweep_trend(table: SweepTable, column: str = "fsm_accuracy") -> float:
    """Spearman rank correlation of a mean column against k."""
    if len(table.rows) < 2:
        return float("nan")
    ks = [r.k for r in table.rows]
    values = [getattr(r, column) for r in table.rows]
    if len(set(values)) < 2:
        return float("nan")
    return float(stats.spearmanr(ks, values).correlation)


def choose_combinations(pool: Sequence[str], k: int, repeats: int, rng: np.random.Generator
                        ) -> list[tuple[str, ...]]:
    combos = list(itertools.combinations(sorted(pool), k))
    if len(combos) <= repeats:
        return combos
    picked = sorted(rng.choice(len(combos), size=repeats, replace=False))
    return [combos[i] for i in picked]


def _sweep_job(job: dict) -> SweepRun:
    cfg: RunConfig = job["cfg"]
    family = get_classifier(job["arch"])
    train_cfg = replace(cfg.train, seed=job["seed"])
    dataset = [windows_from_session(s.session, s.session_id, cfg.window, cfg.preprocess)
               for s in job["train"]]
    model, _ = family.train(dataset, train_cfg, cfg.tcn, cfg.window, cfg.preprocess)
    evals = []
    for item in job["test"]:
        raw, fsm = evaluate_session(model, cfg.fsm, item.session, cfg.eval.iou_threshold)
        evals.append(SessionEvaluation(item.session_id, item.subject, raw, fsm))
    agg = aggregate(evals, cfg.eval.iou_threshold)
    logger.info("k=%d upprepning %d (%s): fas %.3f, steg %.3f", job["k"], job["repeat"],
                ",".join(job["subjects"]), agg.total_fsm.overall_accuracy, agg.total_fsm.step_recall)
    return SweepRun(job["k"], job["repeat"], tuple(job["subjects"]), job["seed"],
                    agg.total_raw.overall_accuracy, agg.total_fsm.overall_accuracy,
                    agg.total_raw.step_recall, agg.total_fsm.step_recall)


def subject_sweep(dataset, k_max: int, repeats: int, test_subjects: Sequence[str],
                  cfg: RunConfig = RunConfig(), master_seed: int = 0, threads: int = 1,
                  arch: str = "tcn") -> SweepTable:
    """Train on `repeats` k-subject combinations for k = 1..k_max, test on fixed subjects."""
    if k_max < 1 or repeats < 1:
        raise ValueError("k_max and repeats must be >= 1")
    test_subjects = sorted(test_subjects)
    all_subjects = sorted({d.subject for d in dataset})
    missing = [s for s in test_subjects if s not in all_subjects]
    if missing:
        raise InsufficientData(f"test subject(s) not in the dataset: {', '.join(missing)}")
    pool = [s for s in all_subjects if s not in test_subjects]
    if len(pool) < k_max:
        raise InsufficientData(f"training pool has {len(pool)} subjects, k_max is {k_max}")

    test = [d for d in dataset if d.subject in test_subjects]
    rng = np.random.default_rng(master_seed)
    jobs = []
    for k in range(1, k_max + 1):
        for r, combo in enumerate(choose_combinations(pool, k, repeats, rng)):
            jobs.append({"k": k, "repeat": r, "subjects": combo, "cfg": cfg, "arch": arch,
                         "seed": master_seed + len(jobs),
                         "train": [d for d in dataset if d.subject in combo], "test": test})

    if threads > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool_exec:
            runs = list(pool_exec.map(_sweep_job, jobs))
    else:
        runs = [_sweep_job(job) for job in jobs]

    rows = []
    for k in range(1, k_max + 1):
        ks = [run for run in runs if run.k == k]
        rows.append(SweepRow(
            k, len(ks),
            float(np.mean([x.raw_accuracy for x in ks])),
            float(np.mean([x.fsm_accuracy for x in ks])),
            float(np.mean([x.raw_step_recall for x in ks])),
            float(np.mean([x.fsm_step_recall for x in ks])),
        ))
    return SweepTable(rows, runs, list(test_subjects))


# ---------------------------------------------------------------------------
# Latency benchmark
# ---------------------------------------------------------------------------

@dataclass
class BenchResult:
    latencies_ms: np.ndarray
    stage_ms: dict[str, np.ndarray]

    @property
    def mean(self) -> float:
        return float(self.latencies_ms.mean())

    @property
    def std(self) -> float:
        return float(self.latencies_ms.std())

    @property
    def p99(self) -> float:
        return float(np.percentile(self.latencies_ms, 99))

    def stage_means(self) -> dict[str, float]:
        return {k: float(v.mean()) for k, v in self.stage_ms.items()}

    def table_line(self, name: str = "TCN") -> str:
        return f"{name}  {self.mean:.2f} ± {self.std:.3f} ms"

    def write_log(self, path: Path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8", newline="") as f:
            writer = csv.writer(f, lineterminator="\n")
            writer.writerow(["frame", "total_ms", "pre_ms", "fwd_ms", "fsm_ms"])
            for i, total in enumerate(self.latencies_ms):
                writer.writerow([i, fmt_float(total), fmt_float(self.stage_ms["preprocess"][i]),
                                 fmt_float(self.stage_ms["forward"][i]),
                                 fmt_float(self.stage_ms["fsm"][i])])


def bench_latency(model: TcnModel, fsm_cfg: FsmConfig = FsmConfig(),
                  n_windows: int = 1000, warmup: int = 50,
                  session: Optional[SessionRecording] = None) -> BenchResult:
    """Per-frame end-to-end latency (preprocess + forward + FSM) on the calling thread."""
    if n_windows < 100 or warmup < 50:
        raise ValueError(f"need >= 100 timed frames after >= 50 warm-up frames, "
                         f"got {n_windows} after {warmup}")
    if warmup < model.window.h:
        raise ValueError(f"warm-up must cover the window ({model.window.h} frames)")
    if session is None:
        session = generate_session(make_profile(0))
    samples = session.samples
    if not samples:
        raise InsufficientData("benchmark session is empty")

    pipeline = OnlinePipeline(model, fsm_cfg)
    span = samples[-1].t_us - samples[0].t_us + model.window.period_us
    total = np.empty(n_windows)
    stages = {name: np.empty(n_windows) for name in ("preprocess", "forward", "fsm")}

    for i in range(warmup + n_windows):
        base = samples[i % len(samples)]
        sample = type(base)(base.t_us + (i // len(samples)) * span, base.a_body,
                            base.omega_body, base.orientation, base.mag)
        t0 = time.perf_counter_ns()
        result = pipeline.push(sample)
        elapsed = time.perf_counter_ns() - t0
        j = i - warmup
        if j >= 0:
            total[j] = elapsed / 1e6
            for name, ns in zip(stages, result.stage_ns):
                stages[name][j] = ns / 1e6
    return BenchResult(total, stages)
