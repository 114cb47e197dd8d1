"""Command line entry point: ``cfkt {synth,train,evaluate,explain,benchmark}``.

Machine-readable results go to stdout as JSON lines; human-readable tables go
to stderr. ``CFKT_THREADS`` caps the number of torch threads.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import time
from dataclasses import asdict
from pathlib import Path

import numpy as np
import torch

from .batch import collate
from .data import (
    ASSIST09_SCHEMA,
    CANONICAL_SCHEMA,
    dataset_stats,
    generate_synthetic,
    kfold_split,
    load_dataset,
    preprocess,
    read_canonical,
    write_canonical,
)
from .explain import influence_report, trace_proficiency
from .influence import batch_backward_influences, batch_exact_influences
from .model import EncoderConfig, ResponseProbabilityGenerator, load_checkpoint, save_checkpoint
from .training import (
    EvalResult,
    TrainConfig,
    read_config_file,
    score_sequences,
    train_config_from_mapping,
    train_model,
)

log = logging.getLogger("cfkt")


def _emit(record: dict) -> None:
    sys.stdout.write(json.dumps(record) + "\n")
    sys.stdout.flush()


def _err(text: str) -> None:
    sys.stderr.write(text + "\n")


def fingerprint(path: str | Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def make_run_dir(root: str | Path, payload: dict) -> Path:
    stamp = time.strftime("%Y%m%d-%H%M%S")
    tag = hashlib.sha256(json.dumps(payload, sort_keys=True, default=str).encode()).hexdigest()[:8]
    run = Path(root) / f"{stamp}-{tag}"
    run.mkdir(parents=True, exist_ok=True)
    return run


def write_manifest(run_dir: Path, command: str, config: dict, seed: int, data_fingerprint: str | None,
                   checkpoints: list[str], metrics: dict) -> Path:
    manifest = {
        "command": command,
        "config": config,
        "seed": seed,
        "dataset_fingerprint": data_fingerprint,
        "checkpoints": checkpoints,
        "metrics": metrics,
    }
    path = run_dir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, default=str), encoding="utf-8")
    return path


def _load_interactions(args):
    if args.format == "canonical":
        return read_canonical(args.data)
    schema = ASSIST09_SCHEMA if args.format == "assist09" else CANONICAL_SCHEMA
    return load_dataset(args.data, schema).interactions


def _sequences(args):
    return preprocess(_load_interactions(args), max_len=args.seq_len, min_len=args.min_len)


def _vocab_sizes(sequences):
    n_q = max(x.question_id for s in sequences for x in s.interactions) + 1
    n_k = max(k for s in sequences for x in s.interactions for k in x.concept_ids) + 1
    return n_q, n_k


# --------------------------------------------------------------------------------- commands


def cmd_synth(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    interactions, truth = generate_synthetic(
        args.students, args.questions, args.concepts, args.seq_len, args.learn_rate, args.guess, args.slip,
        args.seed, discrimination=args.discrimination,
    )
    write_canonical(interactions, out / "interactions.csv")
    truth.write(out / "ground_truth.csv")
    stats = dataset_stats(preprocess(interactions, max_len=args.seq_len, min_len=1))
    config = {k: v for k, v in vars(args).items() if k != "func"}
    write_manifest(out, "synth", config, args.seed, fingerprint(out / "interactions.csv"), [], asdict(stats))
    _emit({"command": "synth", "out": str(out), **asdict(stats)})
    return 0


def _train_config(args) -> TrainConfig:
    values = read_config_file(args.config) if args.config else {}
    overrides = {
        "learning_rate": args.lr, "lam": args.lam, "l2_weight": args.l2, "alpha": args.alpha,
        "patience": args.patience, "seed": args.seed, "batch_size": args.batch_size,
        "max_epochs": args.epochs, "target_mode": args.target_mode,
    }
    overrides = {k: v for k, v in overrides.items() if v is not None}
    for flag in ("no_joint", "no_mono", "no_constraint"):
        if getattr(args, flag):
            overrides[flag] = True
    return train_config_from_mapping(values, **overrides)


def _encoder_config(args, n_q, n_k, values=None) -> EncoderConfig:
    values = values or {}
    return EncoderConfig(
        n_questions=n_q,
        n_concepts=n_k,
        backbone=args.encoder or values.get("encoder", "dkt"),
        d=args.dim or int(values.get("dim", 128)),
        n_layers=args.layers or int(values.get("n_layers", 1)),
        dropout=args.dropout if args.dropout is not None else float(values.get("dropout", 0.0)),
        heads=args.heads,
    )


def cmd_train(args) -> int:
    sequences = _sequences(args)
    n_q, n_k = _vocab_sizes(sequences)
    train_cfg = _train_config(args)
    model_cfg = _encoder_config(args, n_q, n_k, read_config_file(args.config) if args.config else None)
    config = {"model": asdict(model_cfg), "train": asdict(train_cfg), "folds": args.folds,
              "split_by": args.split_by, "seq_len": args.seq_len, "min_len": args.min_len, "mode": args.mode}
    data_fp = fingerprint(args.data)
    run_dir = make_run_dir(args.run_root, {**config, "data": data_fp})
    result = EvalResult()
    checkpoints = []
    splits = kfold_split(sequences, args.folds, 0.1, seed=train_cfg.seed, by=args.split_by)
    if args.max_folds:
        splits = splits[: args.max_folds]
    for fold, (train, val, test) in enumerate(splits):
        fold_dir = run_dir / f"fold{fold}"
        fold_dir.mkdir(exist_ok=True)
        model, _history = train_model(train, val, model_cfg, train_cfg, metrics_path=fold_dir / "metrics.jsonl")
        ckpt = fold_dir / "model.npz"
        save_checkpoint(ckpt, model, {"fold": fold, "seed": train_cfg.seed, "no_mono": train_cfg.no_mono})
        checkpoints.append(str(ckpt))
        scored = score_sequences(model, test, args.mode, mono=not train_cfg.no_mono)
        result.add(scored.auc, scored.acc)
        _emit({"command": "train", "fold": fold, "auc": scored.auc, "acc": scored.acc, "checkpoint": str(ckpt)})
        _err(f"fold {fold}: AUC {scored.auc:.4f}  ACC {scored.acc:.4f}")
    summary = {"auc_mean": result.auc_mean, "auc_std": result.auc_std, "acc_mean": result.acc_mean,
               "acc_std": result.acc_std, "auc": result.auc, "acc": result.acc}
    (run_dir / "summary.json").write_text(json.dumps(summary, indent=2), encoding="utf-8")
    write_manifest(run_dir, "train", config, train_cfg.seed, data_fp, checkpoints, summary)
    _emit({"command": "train", "run_dir": str(run_dir), **summary})
    _err(result.summary())
    return 0


def cmd_evaluate(args) -> int:
    model, meta = load_checkpoint(args.checkpoint)
    sequences = _sequences(args)
    mono = meta.get("no_mono", "False") != "True"
    scored = score_sequences(model, sequences, args.mode, args.targets, mono=mono)
    _emit({"command": "evaluate", "auc": scored.auc, "acc": scored.acc, "n_targets": int(len(scored.labels))})
    _err(f"AUC {scored.auc:.4f}  ACC {scored.acc:.4f}  ({len(scored.labels)} targets)")
    return 0


def cmd_explain(args) -> int:
    model, _meta = load_checkpoint(args.checkpoint)
    sequences = _sequences(args)
    if args.student is not None:
        picks = [s for s in sequences if s.student_id == args.student]
        if not picks:
            _err(f"no sequence for student {args.student}")
            return 2
        seq = picks[0]
    else:
        seq = sequences[args.sequence_index]
    j = len(seq) - 1 if args.target_index is None else args.target_index
    report = influence_report(model, seq.interactions[:j], seq.interactions[j], mode=args.mode)
    if args.output == "json":
        sys.stdout.write(report.to_json_lines())
    else:
        sys.stdout.write(report.to_text())
    for concept in args.concepts or []:
        trace = trace_proficiency(model, seq, concept)
        for record in trace.to_records():
            _emit({"command": "trace", **record})
    return 0


def benchmark_influences(model: ResponseProbabilityGenerator, sequences, repeats: int = 1) -> dict:
    """Mean per-student milliseconds for exact vs approximate influences, plus pass counts."""
    model.eval()
    timings = {"exact": [], "approx": []}
    passes = {"exact": [], "approx": []}
    fns = {"exact": batch_exact_influences, "approx": batch_backward_influences}
    with torch.no_grad():
        for seq in sequences:
            batch = collate([seq], model.pad_question, model.pad_concept)
            for mode, fn in fns.items():
                before = model.view_passes
                started = time.perf_counter()
                for _ in range(repeats):
                    fn(model, batch.questions, batch.concepts, batch.labels, batch.lengths)
                timings[mode].append((time.perf_counter() - started) * 1000 / repeats)
                passes[mode].append((model.view_passes - before) // repeats)
    exact_ms, approx_ms = float(np.mean(timings["exact"])), float(np.mean(timings["approx"]))
    return {
        "exact_ms": exact_ms,
        "approx_ms": approx_ms,
        "speedup": exact_ms / approx_ms,
        "exact_passes": passes["exact"],
        "approx_passes": passes["approx"],
        "history_lengths": [len(s) - 1 for s in sequences],
    }


def cmd_benchmark(args) -> int:
    if args.checkpoint:
        model, _ = load_checkpoint(args.checkpoint)
        n_q, n_k = model.cfg.n_questions, model.cfg.n_concepts
    else:
        n_q, n_k = args.questions, args.concepts
        torch.manual_seed(args.seed)
        cfg = EncoderConfig(n_q, n_k, backbone=args.encoder, d=args.dim, n_layers=args.layers, heads=args.heads)
        model = ResponseProbabilityGenerator(cfg)
    interactions, _ = generate_synthetic(args.n, n_q, n_k, args.seq_len, seed=args.seed)
    sequences = preprocess(interactions, max_len=args.seq_len, min_len=1)
    # warm-up so allocator effects do not land on the first timed student
    benchmark_influences(model, sequences[:2])
    result = benchmark_influences(model, sequences, repeats=args.repeats)
    summary = {k: v for k, v in result.items() if k not in ("exact_passes", "approx_passes", "history_lengths")}
    summary["approx_passes_per_student"] = sorted(set(result["approx_passes"]))
    summary["exact_passes_equal_2t"] = all(
        p == 2 * t for p, t in zip(result["exact_passes"], result["history_lengths"])
    )
    summary.update(command="benchmark", n=len(sequences), seq_len=args.seq_len, encoder=model.cfg.backbone,
                   dim=model.cfg.d)
    _emit(summary)
    _err(f"exact {result['exact_ms']:.2f} ms/student  approx {result['approx_ms']:.2f} ms/student  "
         f"speedup {result['speedup']:.1f}x")
    return 0


# ----------------------------------------------------------------------------------- parser


def _data_args(p):
    p.add_argument("--data", required=True, help="interaction file")
    p.add_argument("--format", choices=("canonical", "assist09"), default="canonical")
    p.add_argument("--seq-len", type=int, default=50)
    p.add_argument("--min-len", type=int, default=5)


def _model_args(p):
    p.add_argument("--encoder", choices=("dkt", "sakt", "akt"), default=None)
    p.add_argument("--dim", type=int, default=None)
    p.add_argument("--layers", type=int, default=None)
    p.add_argument("--dropout", type=float, default=None)
    p.add_argument("--heads", type=int, default=8)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cfkt", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a synthetic dataset with ground-truth proficiencies")
    p.add_argument("--out", required=True)
    p.add_argument("--students", type=int, default=2000)
    p.add_argument("--questions", type=int, default=200)
    p.add_argument("--concepts", type=int, default=20)
    p.add_argument("--seq-len", type=int, default=50)
    p.add_argument("--learn-rate", type=float, default=0.05)
    p.add_argument("--guess", type=float, default=0.1)
    p.add_argument("--slip", type=float, default=0.1)
    p.add_argument("--discrimination", type=float, default=8.0)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="k-fold training and evaluation")
    _data_args(p)
    _model_args(p)
    p.add_argument("--config", help="flat key=value file (lr, lambda, l2, dropout, n_layers, ...)")
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--lambda", dest="lam", type=float, default=None)
    p.add_argument("--l2", type=float, default=None)
    p.add_argument("--alpha", type=float, default=None)
    p.add_argument("--folds", type=int, default=5)
    p.add_argument("--max-folds", type=int, default=None, help="stop after this many folds")
    p.add_argument("--split-by", choices=("sequence", "student"), default="sequence")
    p.add_argument("--patience", type=int, default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--target-mode", choices=("all_prefix", "sampled", "last"), default=None)
    p.add_argument("--mode", choices=("approx", "exact"), default="approx")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--no-joint", action="store_true")
    p.add_argument("--no-mono", action="store_true")
    p.add_argument("--no-constraint", action="store_true")
    p.add_argument("--run-root", default="runs")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="score a dataset with a checkpoint")
    _data_args(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--mode", choices=("approx", "exact"), default="approx")
    p.add_argument("--targets", choices=("all_prefix", "last"), default="all_prefix")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("explain", help="influence report and proficiency traces for one sequence")
    _data_args(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--sequence-index", type=int, default=0)
    p.add_argument("--student", default=None)
    p.add_argument("--target-index", type=int, default=None, help="defaults to the last response")
    p.add_argument("--mode", choices=("approx", "exact"), default="approx")
    p.add_argument("--concepts", type=lambda s: [int(x) for x in s.split(",")], default=None)
    p.add_argument("--output", choices=("tsv", "json"), default="tsv")
    p.set_defaults(func=cmd_explain)

    p = sub.add_parser("benchmark", help="time exact vs approximate influence computation")
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--n", type=int, default=100)
    p.add_argument("--seq-len", type=int, default=50)
    p.add_argument("--repeats", type=int, default=1)
    p.add_argument("--questions", type=int, default=200)
    p.add_argument("--concepts", type=int, default=20)
    p.add_argument("--encoder", choices=("dkt", "sakt", "akt"), default="dkt")
    p.add_argument("--dim", type=int, default=128)
    p.add_argument("--layers", type=int, default=1)
    p.add_argument("--heads", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_benchmark)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(asctime)s %(name)s %(message)s")
    threads = os.environ.get("CFKT_THREADS")
    if threads:
        torch.set_num_threads(max(1, int(threads)))
    return args.func(args)


if __name__ == "__main__":
    raise SystemExit(main())
