#!/usr/bin/env python3
"""EXP-001: syntetisk analog till tabellen med träffsäkerhet och latens.

Användning:
  python run.py all [--out DIR] [--seed N]   # Hela kedjan + kriterier
  python run.py parity --model M --session S # Bara online/offline-paritet

Kedjan: 6 syntetiska personer, träning på 4, utvärdering på 2, latensmätning,
paritet replay/run mot infer, determinism för synth och train.
"""

import os

os.environ.setdefault("OMP_NUM_THREADS", "1")
os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")

import argparse  # noqa: E402
import json  # noqa: E402
import logging  # noqa: E402
import math  # noqa: E402
import sys  # noqa: E402
from pathlib import Path  # noqa: E402

import yaml  # noqa: E402

# Projektroten
PROJECT_ROOT = Path(__file__).resolve().parents[3]
sys.path.insert(0, str(PROJECT_ROOT))

from classifiers import get_classifier  # noqa: E402
from config import RunConfig  # noqa: E402
from core_types import read_session_csv  # noqa: E402
from evaluation import bench_latency, evaluate_dataset, format_report_text, write_report  # noqa: E402
from fsm_decoder import decode_sequence, write_step_log  # noqa: E402
from model_tcn import load_model, predict_session, windows_from_session  # noqa: E402
from stream import MemorySink, ReplayServer, run_online  # noqa: E402
from synth import generate_dataset, load_dataset  # noqa: E402

CRITERIA = Path(__file__).resolve().parents[1] / "fixtures" / "success_criteria.yaml"
TRAIN_SUBJECTS = ["subject_00", "subject_01", "subject_02", "subject_03"]
TEST_SUBJECTS = ["subject_04", "subject_05"]
REFERENCE_PARAMS = 67_398


def _same_tree(a: Path, b: Path) -> bool:
    files_a = sorted(p.relative_to(a) for p in a.rglob("*") if p.is_file())
    files_b = sorted(p.relative_to(b) for p in b.rglob("*") if p.is_file())
    return files_a == files_b and all((a / f).read_bytes() == (b / f).read_bytes() for f in files_a)


def _train(cfg: RunConfig, data, out: Path):
    family = get_classifier("tcn")
    windows = [windows_from_session(d.session, d.session_id, cfg.window, cfg.preprocess)
               for d in data if d.subject in TRAIN_SUBJECTS]
    model, history = family.train(windows, cfg.train, cfg.tcn, cfg.window, cfg.preprocess)
    family.save(model, out)
    history.write_csv(out.with_suffix(".history.csv"))
    return model


def check_parity(model, session, fsm_cfg, out_dir: Path) -> bool:
    """Steglogg från replay + run ska vara bitidentisk med offline-avkodning."""
    pred = predict_session(model, session)
    _, events = decode_sequence(pred.phases, fsm_cfg, [int(t) for t in pred.t_us])
    write_step_log(events, out_dir / "offline.steps.csv")

    sink = MemorySink()
    with ReplayServer(session, "127.0.0.1:0", rate=0) as server:
        thread = server.serve_in_thread(accept_timeout=30.0)
        run_online(model, fsm_cfg, server.address, sink)
        thread.join(timeout=30.0)
    write_step_log(sink.events, out_dir / "online.steps.csv")
    return ((out_dir / "offline.steps.csv").read_bytes()
            == (out_dir / "online.steps.csv").read_bytes())


def check_criteria(metrics: dict, path: Path = CRITERIA) -> bool:
    with open(path, "r", encoding="utf-8") as f:
        criteria = yaml.safe_load(f)
    passed = {}
    print("\nKriterier:")
    for c in criteria["criteria"]:
        value = metrics[c["metric"]]
        ok = not math.isnan(value)
        if "min" in c:
            ok = ok and value >= c["min"]
        if "max" in c:
            ok = ok and value <= c["max"]
        passed.setdefault(c["phase"], []).append(ok)
        print(f"  [{'OK' if ok else 'FEL'}] {c['id']:22s} {value:10.4f}  {c['description']}")
    return all(all(v) for v in passed.values())


def cmd_all(args):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg = RunConfig()
    metrics = {}

    print("Genererar dataset (6 personer)...")
    generate_dataset(6, cfg.synth, out / "data", seed=args.seed)
    generate_dataset(6, cfg.synth, out / "data_again", seed=args.seed)
    metrics["dataset_identical"] = float(_same_tree(out / "data", out / "data_again"))
    data = load_dataset(out / "data")

    print(f"Tränar på {', '.join(TRAIN_SUBJECTS)}...")
    model = _train(cfg, data, out / "tcn.gtcn")
    _train(cfg, data, out / "tcn_again.gtcn")
    metrics["model_identical"] = float((out / "tcn.gtcn").read_bytes()
                                       == (out / "tcn_again.gtcn").read_bytes())
    params = get_classifier("tcn").param_count(cfg.tcn)
    metrics["param_count_rel_error"] = abs(params - REFERENCE_PARAMS) / REFERENCE_PARAMS
    print(f"Parametrar: {params:,} (referens {REFERENCE_PARAMS:,})")

    print(f"Utvärderar på {', '.join(TEST_SUBJECTS)}...")
    report = evaluate_dataset(model, cfg.fsm, [d for d in data if d.subject in TEST_SUBJECTS],
                              cfg.eval.iou_threshold)
    write_report(report, out / "report")
    print(format_report_text(report))
    metrics["fsm_frame_accuracy"] = report.total_fsm.overall_accuracy
    metrics["fsm_step_recall"] = report.total_fsm.step_recall
    metrics["step_recall_uplift"] = report.total_fsm.step_recall - report.total_raw.step_recall

    print("Mäter latens...")
    test_session = next(d.session for d in data if d.subject in TEST_SUBJECTS)
    bench = bench_latency(model, cfg.fsm, cfg.eval.bench_iters, cfg.eval.bench_warmup, test_session)
    bench.write_log(out / "bench.csv")
    print(bench.table_line())
    metrics["latency_mean_ms"] = bench.mean
    metrics["latency_p99_ms"] = bench.p99

    print("Kontrollerar online-paritet...")
    metrics["online_parity"] = float(check_parity(model, test_session, cfg.fsm, out))

    with open(out / "metrics.json", "w", encoding="utf-8") as f:
        json.dump(metrics, f, indent=2, sort_keys=True)
        f.write("\n")
    return 0 if check_criteria(metrics) else 1


def cmd_parity(args):
    cfg = RunConfig()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    same = check_parity(load_model(args.model), read_session_csv(args.session), cfg.fsm, out)
    print("Paritet: OK" if same else "Paritet: FEL")
    return 0 if same else 1


def main():
    parser = argparse.ArgumentParser(description="EXP-001: syntetisk tabellanalog")
    sub = parser.add_subparsers(dest="command")

    p = sub.add_parser("all", help="Hela kedjan")
    p.add_argument("--out", default="reports/exp001", help="Utmapp")
    p.add_argument("--seed", type=int, default=0, help="Huvudseed (default: 0)")

    p = sub.add_parser("parity", help="Online/offline-paritet")
    p.add_argument("--model", required=True, help="Modellfil")
    p.add_argument("--session", required=True, help="Sessionsfil (CSV)")
    p.add_argument("--out", default="reports/exp001", help="Utmapp")

    args = parser.parse_args()
    if args.command is None:
        parser.print_help()
        return 1
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    return {"all": cmd_all, "parity": cmd_parity}[args.command](args)


if __name__ == "__main__":
    sys.exit(main())
