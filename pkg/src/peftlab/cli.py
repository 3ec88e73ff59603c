"""Experiment runner CLI: count, run, gradcheck, plotdata, generate-data.

Exit codes: 0 success, 1 validation error, 2 runtime/divergence error.
"""

from __future__ import annotations

import argparse
import csv
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor

from . import accounting, cacnn as cacnn_mod, checks, encoder as enc
from .manifest import ManifestError, parse_manifest
from .span import GenerationError, generate_dataset, save_dataset
from .trainer import (Model, TrainingDiverged, evaluate, save_loss_history,
                      train)

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_RUNTIME = 2

REPORT_COLUMNS = accounting.CSV_COLUMNS + ["efficiency_ratio"]


def _fail(code, message):
    print(f"error: {message}", file=sys.stderr)
    return code


def cmd_count(args):
    try:
        specs = parse_manifest(args.config)
    except (ManifestError, OSError) as exc:
        return _fail(EXIT_VALIDATION, exc)
    rows = [(s.label, s.encoder_config, s.policy, s.head) for s in specs]
    text, csv_text, _ = accounting.table_report(rows)
    print(text, end="")
    os.makedirs(args.out, exist_ok=True)
    out_path = os.path.join(args.out, "counts.csv")
    with open(out_path, "w", encoding="utf-8", newline="") as fh:
        fh.write(csv_text)
    print(f"wrote {out_path}")
    return EXIT_OK


def _run_experiment(spec, out_dir):
    config, policy, head = spec.encoder_config, spec.policy, spec.head
    tc = spec.train_config
    dataset = generate_dataset(
        seed=tc.seed, count=spec.dataset_count, seq_len=spec.dataset_len,
        vocab_size=config.vocab_size,
        unanswerable_fraction=spec.unanswerable_fraction,
    )
    registry = enc.build_encoder(config, tc.seed,
                                 include_head=head == "affine_span")
    if head != "affine_span":
        cacnn_mod.validate(head, spec.dataset_len, config.hidden_size)
        cacnn_mod.build_params(registry, head, config.hidden_size, tc.seed + 1)
    enc.apply_freeze_policy(registry, config, policy)

    expected = accounting.count(config, policy, head).trainable_under_policy
    if registry.trainable_count != expected:
        raise RuntimeError(
            f"registry trainable count {registry.trainable_count} disagrees "
            f"with accounting {expected} for {spec.label}"
        )

    result = train(Model(registry, config, head), dataset, tc)
    em, f1, infer_seconds = evaluate(result.model, dataset, tc)
    save_loss_history(result.loss_history,
                      os.path.join(out_dir, f"loss_{spec.label}.csv"))

    em, f1 = round(em, 1), round(f1, 1)
    ratio = (f1 - 50.0) / math.log10(registry.trainable_count)
    adapter_size = config.adapter.adapter_size if config.adapter else ""
    return [spec.label, policy.top_layers_trainable, adapter_size,
            registry.trainable_count, f"{em:.1f}", f"{f1:.1f}",
            f"{result.train_seconds:.3f}", f"{infer_seconds:.3f}",
            f"{ratio:.4f}"]


def cmd_run(args):
    try:
        specs = parse_manifest(args.manifest)
    except (ManifestError, OSError) as exc:
        return _fail(EXIT_VALIDATION, exc)
    out_dir = args.out
    os.makedirs(out_dir, exist_ok=True)
    report_path = os.path.join(out_dir, "report.csv")

    existing = {}
    if os.path.exists(report_path):
        with open(report_path, encoding="utf-8", newline="") as fh:
            for row in csv.DictReader(fh):
                existing[row["label"]] = [row[c] for c in REPORT_COLUMNS]

    todo = [s for s in specs if s.label not in existing]
    if not todo and existing and all(s.label in existing for s in specs):
        print(f"all {len(specs)} experiments already in {report_path}")
        return EXIT_OK

    try:
        if args.parallel and len(todo) > 1:
            # wall-clock timings are not comparable across parallel workers
            with ProcessPoolExecutor() as pool:
                rows = list(pool.map(_run_experiment, todo,
                                     [out_dir] * len(todo)))
        else:
            rows = [_run_experiment(spec, out_dir) for spec in todo]
    except GenerationError as exc:
        return _fail(EXIT_VALIDATION, exc)
    except TrainingDiverged as exc:
        return _fail(EXIT_RUNTIME, exc)

    fresh = {spec.label: row for spec, row in zip(todo, rows)}
    with open(report_path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(REPORT_COLUMNS)
        for spec in specs:
            writer.writerow(existing.get(spec.label, fresh.get(spec.label)))
    print(f"wrote {report_path} ({len(specs)} rows, {len(todo)} new)")
    return EXIT_OK


def cmd_gradcheck(args):
    failures = 0
    for seed in range(args.seed, args.seed + args.seeds):
        results = checks.run_suite(seed=seed,
                                   include_composites=not args.ops_only)
        for name, err, passed in results:
            status = "PASS" if passed else "FAIL"
            print(f"{status} {name} seed={seed} max_rel_err={err:.3e}")
            failures += not passed
    if failures:
        print(f"{failures} gradient check(s) failed", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def cmd_plotdata(args):
    rows = []
    seen = {}
    for path in args.reports:
        try:
            with open(path, encoding="utf-8", newline="") as fh:
                reader = csv.DictReader(fh)
                missing = {"label", "f1", "train_seconds", "inference_seconds",
                           "trainable_params"} - set(reader.fieldnames or ())
                if missing:
                    return _fail(EXIT_VALIDATION,
                                 f"{path}: missing columns {sorted(missing)}")
                for row in reader:
                    seen.setdefault(row["label"], []).append(path)
                    rows.append(row)
        except OSError as exc:
            return _fail(EXIT_VALIDATION, exc)
    duplicates = sorted(l for l, paths in seen.items() if len(paths) > 1)
    if duplicates:
        return _fail(EXIT_VALIDATION, f"duplicate labels: {', '.join(duplicates)}")

    os.makedirs(args.out, exist_ok=True)

    def write(name, columns, ordered_rows):
        path = os.path.join(args.out, name)
        with open(path, "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["label"] + columns)
            for row in ordered_rows:
                writer.writerow([row["label"]] + [row[c] for c in columns])
        print(f"wrote {path}")

    write("train_time_vs_f1.csv", ["train_seconds", "f1"], rows)
    write("inference_time_vs_f1.csv", ["inference_seconds", "f1"], rows)
    write("params_vs_f1.csv", ["trainable_params", "f1"],
          sorted(rows, key=lambda r: int(r["trainable_params"])))
    return EXIT_OK


def cmd_generate_data(args):
    try:
        examples = generate_dataset(
            seed=args.seed, count=args.count, seq_len=args.length,
            vocab_size=args.vocab_size,
            unanswerable_fraction=args.unanswerable_fraction,
        )
    except (ValueError, GenerationError) as exc:
        return _fail(EXIT_VALIDATION, exc)
    save_dataset(examples, args.out)
    print(f"wrote {len(examples)} examples to {args.out}")
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(
        prog="peftlab",
        description="Parameter-efficiency experiments: layer freezing, "
                    "adapters, and context-aware convolutional heads on a "
                    "synthetic span-extraction task.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("count", help="trainable-parameter accounting table")
    p.add_argument("--config", required=True, help="manifest of model rows")
    p.add_argument("--out", default="out", help="directory for counts.csv")
    p.set_defaults(fn=cmd_count)

    p = sub.add_parser("run", help="train and evaluate every manifest entry")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", default="out", help="directory for report CSVs")
    p.add_argument("--parallel", action="store_true",
                   help="run experiments in parallel (timings not comparable)")
    p.set_defaults(fn=cmd_run)

    p = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--seeds", type=int, default=1, help="number of seeds")
    p.add_argument("--ops-only", action="store_true",
                   help="skip the model composite checks")
    p.set_defaults(fn=cmd_gradcheck)

    p = sub.add_parser("plotdata", help="project report CSVs into plot CSVs")
    p.add_argument("reports", nargs="+", help="report.csv files")
    p.add_argument("--out", default="out")
    p.set_defaults(fn=cmd_plotdata)

    p = sub.add_parser("generate-data", help="write a synthetic dataset file")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--count", type=int, default=2000)
    p.add_argument("--length", type=int, default=64)
    p.add_argument("--vocab-size", type=int, default=64)
    p.add_argument("--unanswerable-fraction", type=float, default=1.0 / 3.0)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_generate_data)

    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
