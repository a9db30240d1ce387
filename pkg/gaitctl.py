#!/usr/bin/env python3
"""CLI för gångfas- och stegdetektion med kryckmonterad IMU."""

import os

# single BLAS thread for every command
for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, "1")

import argparse  # noqa: E402
import json  # noqa: E402
import logging  # noqa: E402
import shutil  # noqa: E402
import sys  # noqa: E402
from pathlib import Path  # noqa: E402

import numpy as np  # noqa: E402

import config  # noqa: E402
from classifiers import get_classifier, list_classifiers  # noqa: E402
from config import ConfigError, dump_run_config, load_run_config  # noqa: E402
from core_types import GaitError, read_session_csv  # noqa: E402
from evaluation import (  # noqa: E402
    bench_latency,
    evaluate_dataset,
    format_report_text,
    subject_sweep,
    sweep_trend,
    write_report,
)
from fsm_decoder import RAW_DECODER, decode_sequence, write_step_log  # noqa: E402
from model_tcn import load_model, predict_session, windows_from_session, write_prediction_csv  # noqa: E402
from stream import DirectorySink, ReplayServer, run_online  # noqa: E402
from synth import generate_dataset, load_dataset, subjects_of  # noqa: E402

logger = logging.getLogger("gaitctl")


class _Outputs:
    """Paths a command creates; removed again if the command fails."""

    def __init__(self):
        self.created: list[Path] = []

    def claim(self, path: Path) -> Path:
        path = Path(path)
        if not path.exists():
            self.created.append(path)
        return path

    def cleanup(self):
        for path in reversed(self.created):
            if path.is_dir():
                shutil.rmtree(path, ignore_errors=True)
            elif path.exists():
                path.unlink()


def _run_config(args):
    return load_run_config(args.config, args.set)


def _select(dataset, subjects: str | None):
    if not subjects:
        return dataset
    wanted = [s.strip() for s in subjects.split(",") if s.strip()]
    known = set(subjects_of(dataset))
    unknown = [s for s in wanted if s not in known]
    if unknown:
        raise ConfigError(f"unknown subject(s): {', '.join(unknown)}")
    return [d for d in dataset if d.subject in wanted]


def _load_model(path: Path, float32: bool = False):
    model = load_model(path)
    if float32:
        model = model.as_dtype(np.float32)
    return model


def cmd_synth(args):
    """Generera syntetiskt dataset."""
    cfg = _run_config(args)
    out = args.outputs.claim(args.out)
    print(f"Genererar {args.subjects} syntetiska försökspersoner (seed {args.seed})...")
    manifest = generate_dataset(args.subjects, cfg.synth, out, seed=args.seed,
                                strategy=args.strategy)
    dump_run_config(cfg, out / "config.yaml")

    print(f"Sessioner: {len(manifest['sessions'])}")
    print("Klassandelar:")
    for code, share in sorted(manifest["class_share"].items()):
        print(f"  {code}: {100 * share:.1f} %")
    print(f"Dataset sparat i '{out}'.")


def cmd_train(args):
    """Träna en klassificerare."""
    cfg = _run_config(args)
    family = get_classifier(args.arch)
    dataset = _select(load_dataset(args.data), args.subjects)
    print(f"Läser {len(dataset)} sessioner från '{args.data}'...")
    windows = [windows_from_session(d.session, d.session_id, cfg.window, cfg.preprocess)
               for d in dataset]

    model_path = args.outputs.claim(args.out)
    history_path = args.outputs.claim(args.history or model_path.with_suffix(".history.csv"))
    config_path = args.outputs.claim(model_path.with_suffix(".config.yaml"))

    model, history = family.train(windows, cfg.train, cfg.tcn, cfg.window, cfg.preprocess)
    family.save(model, model_path)
    history.write_csv(history_path)
    dump_run_config(cfg, config_path)

    print(f"Parametrar: {family.param_count(cfg.tcn):,}")
    print(f"Epoker: {len(history.epochs)} (bästa: {history.best_epoch})")
    if history.epochs:
        best = history.epochs[history.best_epoch - 1]
        print(f"Valideringsförlust: {best.val_loss:.4f}, träffsäkerhet: {100 * best.val_acc:.1f} %")
    print(f"Modell sparad: {model_path}")


def cmd_infer(args):
    """Klassificera en session och avkoda steg."""
    cfg = _run_config(args)
    model = _load_model(args.model, args.float32)
    session = read_session_csv(args.session)

    pred = predict_session(model, session)
    timestamps = [int(t) for t in pred.t_us]
    if args.no_fsm:
        refined = None
        _, events = decode_sequence(pred.phases, RAW_DECODER, timestamps)
    else:
        refined, events = decode_sequence(pred.phases, cfg.fsm, timestamps)

    out = args.outputs.claim(args.out)
    steps_path = args.outputs.claim(args.steps or out.with_suffix(".steps.csv"))
    config_path = args.outputs.claim(out.with_suffix(".config.yaml"))
    write_prediction_csv(pred, out, refined)
    write_step_log(events, steps_path)
    dump_run_config(cfg, config_path)

    print(f"Bildrutor: {len(pred.t_us)} (uppvärmning: {int(pred.warmup.sum())})")
    print(f"Steg: {len(events)}{' (utan FSM)' if args.no_fsm else ''}")
    print(f"Prediktioner: {out}")
    print(f"Steglogg: {steps_path}")


def cmd_eval(args):
    """Utvärdera en modell på ett märkt dataset."""
    cfg = _run_config(args)
    model = _load_model(args.model)
    dataset = _select(load_dataset(args.data), args.subjects)
    report = evaluate_dataset(model, cfg.fsm, dataset, cfg.eval.iou_threshold)

    out = args.outputs.claim(args.report)
    write_report(report, out)
    dump_run_config(cfg, out / "config.yaml")
    print(format_report_text(report))
    print(f"Rapport sparad i '{out}'.")


def cmd_sweep(args):
    """Träffsäkerhet som funktion av antal träningspersoner."""
    cfg = _run_config(args)
    dataset = load_dataset(args.data)
    subjects = subjects_of(dataset)
    if args.test_subjects:
        test = [s.strip() for s in args.test_subjects.split(",") if s.strip()]
    else:
        test = subjects[-2:]

    raw_threads = os.environ.get(config.THREADS_ENV, "1")
    if not raw_threads.isdigit() or int(raw_threads) < 1:
        raise ConfigError(f"{config.THREADS_ENV} must be a positive integer, got '{raw_threads}'")

    out = args.outputs.claim(args.report)
    print(f"Testpersoner: {', '.join(test)}")
    table = subject_sweep(dataset, args.k_max, args.repeats, test, cfg,
                          master_seed=args.seed, threads=int(raw_threads), arch=args.arch)

    out.mkdir(parents=True, exist_ok=True)
    table.write_csv(out / "sweep.csv")
    with open(out / "sweep.json", "w", encoding="utf-8") as f:
        json.dump(table.to_dict(), f, ensure_ascii=False, indent=2, sort_keys=True)
        f.write("\n")
    dump_run_config(cfg, out / "config.yaml")

    print(f"\n{'k':>3}{'körningar':>11}{'fas utan':>10}{'fas med':>10}{'steg utan':>11}{'steg med':>10}")
    for r in table.rows:
        print(f"{r.k:>3}{r.runs:>11}{100 * r.raw_accuracy:>10.1f}{100 * r.fsm_accuracy:>10.1f}"
              f"{100 * r.raw_step_recall:>11.1f}{100 * r.fsm_step_recall:>10.1f}")
    print(f"\nSpearman (fas med FSM mot k): {sweep_trend(table):.3f}")
    print(f"Resultat sparade i '{out}'.")


def cmd_bench(args):
    """Mät latens per bildruta."""
    cfg = _run_config(args)
    model = _load_model(args.model, args.float32)
    session = read_session_csv(args.session) if args.session else None
    iters = args.iters if args.iters is not None else cfg.eval.bench_iters
    warmup = args.warmup if args.warmup is not None else cfg.eval.bench_warmup

    result = bench_latency(model, cfg.fsm, iters, warmup, session)
    if args.log:
        result.write_log(args.outputs.claim(args.log))

    print(f"Bildrutor: {iters} (uppvärmning {warmup}), en tråd"
          f"{', float32' if args.float32 else ''}")
    print(result.table_line())
    print(f"p99: {result.p99:.3f} ms")
    for stage, mean in result.stage_means().items():
        print(f"  {stage}: {mean:.3f} ms")


def cmd_replay(args):
    """Spela upp en session över TCP."""
    session = read_session_csv(args.session)
    with ReplayServer(session, args.addr, args.rate) as server:
        print(f"Väntar på klient på {server.address}...")
        stats = server.serve_once()
    print(f"Skickade {stats.frames} bildrutor på {stats.duration_s:.2f} s.")


def cmd_run(args):
    """Kör online-pipelinen mot en uppspelningsström."""
    cfg = _run_config(args)
    model = _load_model(args.model, args.float32)
    out = args.outputs.claim(args.out)
    sink = DirectorySink(out)
    dump_run_config(cfg, out / "config.yaml")

    summary = run_online(model, cfg.fsm, args.addr, sink)
    print(f"Bildrutor: {summary.frames}, steg: {summary.steps}, "
          f"felaktiga: {summary.malformed}")
    print(f"Latens: medel {summary.mean_latency_ms:.3f} ms, p99 {summary.p99_latency_ms:.3f} ms, "
          f"max ködjup {summary.max_queue_depth}")
    print(f"Utdata sparade i '{out}'.")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="YAML-konfigurationsfil")
    common.add_argument("--set", action="append", default=[], metavar="SEKTION.NYCKEL=VÄRDE",
                        help="Åsidosätt ett konfigurationsvärde (kan upprepas)")

    parser = argparse.ArgumentParser(
        description="Gångfas- och stegdetektion för kryckmonterad IMU"
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="Detaljerad loggning")
    sub = parser.add_subparsers(dest="command")
    arch_names = [c["name"] for c in list_classifiers()]

    # synth
    p = sub.add_parser("synth", parents=[common], help="Generera syntetiskt dataset")
    p.add_argument("--subjects", type=int, required=True, help="Antal försökspersoner")
    p.add_argument("--seed", type=int, default=0, help="Huvudseed (default: 0)")
    p.add_argument("--out", type=Path, default=config.DATA_DIR, help="Utmapp")
    p.add_argument("--strategy", choices=config.GAIT_STRATEGIES,
                   help="Samma gångstrategi för alla personer")

    # train
    p = sub.add_parser("train", parents=[common], help="Träna klassificerare")
    p.add_argument("--data", type=Path, default=config.DATA_DIR, help="Datasetmapp")
    p.add_argument("--out", type=Path, default=config.MODELS_DIR / "tcn.gtcn", help="Modellfil")
    p.add_argument("--history", type=Path, help="Träningshistorik (CSV)")
    p.add_argument("--subjects", help="Kommaseparerade träningspersoner (default: alla)")
    p.add_argument("--arch", choices=arch_names, default="tcn", help="Klassificerare")

    # infer
    p = sub.add_parser("infer", parents=[common], help="Klassificera en session")
    p.add_argument("--model", type=Path, required=True, help="Modellfil")
    p.add_argument("--session", type=Path, required=True, help="Sessionsfil (CSV)")
    p.add_argument("--out", type=Path, required=True, help="Prediktioner (CSV)")
    p.add_argument("--steps", type=Path, help="Steglogg (CSV)")
    p.add_argument("--no-fsm", action="store_true", help="Hoppa över FSM-förfining")
    p.add_argument("--float32", action="store_true", help="Inferens i enkel precision")

    # eval
    p = sub.add_parser("eval", parents=[common], help="Utvärdera modell")
    p.add_argument("--model", type=Path, required=True, help="Modellfil")
    p.add_argument("--data", type=Path, default=config.DATA_DIR, help="Datasetmapp")
    p.add_argument("--report", type=Path, default=config.REPORTS_DIR / "eval", help="Rapportmapp")
    p.add_argument("--subjects", help="Kommaseparerade testpersoner (default: alla)")

    # sweep
    p = sub.add_parser("sweep", parents=[common], help="Antal träningspersoner mot träffsäkerhet")
    p.add_argument("--data", type=Path, default=config.DATA_DIR, help="Datasetmapp")
    p.add_argument("--k-max", type=int, required=True, help="Största antal träningspersoner")
    p.add_argument("--repeats", type=int, default=4, help="Kombinationer per k (default: 4)")
    p.add_argument("--test-subjects", help="Kommaseparerade testpersoner (default: de två sista)")
    p.add_argument("--seed", type=int, default=0, help="Huvudseed (default: 0)")
    p.add_argument("--report", type=Path, default=config.REPORTS_DIR / "sweep", help="Rapportmapp")
    p.add_argument("--arch", choices=arch_names, default="tcn", help="Klassificerare")

    # bench
    p = sub.add_parser("bench", parents=[common], help="Latensmätning")
    p.add_argument("--model", type=Path, required=True, help="Modellfil")
    p.add_argument("--iters", type=int, help="Antal mätta bildrutor")
    p.add_argument("--warmup", type=int, help="Antal uppvärmningsbildrutor")
    p.add_argument("--session", type=Path, help="Session att mata (default: syntetisk)")
    p.add_argument("--log", type=Path, help="Latenslogg (CSV)")
    p.add_argument("--float32", action="store_true", help="Inferens i enkel precision")

    # replay
    p = sub.add_parser("replay", parents=[common], help="Spela upp session över TCP")
    p.add_argument("--session", type=Path, required=True, help="Sessionsfil (CSV)")
    p.add_argument("--addr", default=config.DEFAULT_ADDR, help="värd:port")
    p.add_argument("--rate", type=float, default=1.0, help="Hastighetsfaktor, 0 = max (default: 1)")

    # run
    p = sub.add_parser("run", parents=[common], help="Online-inferens mot uppspelning")
    p.add_argument("--model", type=Path, required=True, help="Modellfil")
    p.add_argument("--addr", default=config.DEFAULT_ADDR, help="värd:port")
    p.add_argument("--out", type=Path, required=True, help="Utmapp")
    p.add_argument("--float32", action="store_true", help="Inferens i enkel precision")

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)

    if args.command is None:
        parser.print_help()
        return 1

    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")

    commands = {
        "synth": cmd_synth,
        "train": cmd_train,
        "infer": cmd_infer,
        "eval": cmd_eval,
        "sweep": cmd_sweep,
        "bench": cmd_bench,
        "replay": cmd_replay,
        "run": cmd_run,
    }
    args.outputs = _Outputs()
    try:
        commands[args.command](args)
    except (GaitError, ConfigError, ValueError, OSError) as e:
        args.outputs.cleanup()
        message = " ".join(str(e).split())
        print(f"error: {type(e).__name__}: {message}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
