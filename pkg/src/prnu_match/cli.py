"""Command-line entry point wiring the library into reproducible workflows.

Exit codes: 0 success, 1 usage/config, 2 I/O, 3 data/format, 4 numeric failure.
Every command echoes its resolved configuration to stderr before running, so a
run is fully described by its output.
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

import numpy as np

from .bench import bench_batch, bench_single, write_bench_csv
from .errors import (
    ConfigError,
    DegenerateInputError,
    DimensionError,
    DuplicateError,
    EmptyInputError,
    FormatError,
    IoError,
    NumericError,
)
from .evaluation import (
    domain_grid,
    make_pce_scorer,
    make_pcn_scorer,
    report_from_matrix,
    score_matrix,
    write_report_csv,
    write_roc_csv,
    write_scores_csv,
)
from .fingerprint import FingerprintDb, estimate_prnu, load_fingerprint, save_fingerprint
from .imaging import crop_center, load_image
from .pcn import load_model, save_model
from .residual import extract_residual, load_residual, save_residual
from .synth import SynthConfig, build_dataset, load_dataset
from .training import TrainConfig, train


def _default_threads() -> int:
    env = os.environ.get("PRNU_MATCH_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise ConfigError(f"PRNU_MATCH_THREADS must be an integer, got {env!r}")
    return os.cpu_count() or 1


def _echo_config(args: argparse.Namespace) -> None:
    items = {k: v for k, v in sorted(vars(args).items()) if k != "func"}
    print("config " + " ".join(f"{k}={v}" for k, v in items.items()), file=sys.stderr)


def _parse_chain(text: str) -> tuple[int, ...]:
    if not text:
        return ()
    try:
        return tuple(int(tok) for tok in text.split(","))
    except ValueError:
        raise ConfigError(f"JPEG chain must be comma-separated integers, got {text!r}")


def cmd_synth(args) -> int:
    cfg = SynthConfig(
        n_devices=args.devices,
        dims=(args.dims, args.dims),
        flats_per_device=args.flats,
        naturals_per_device=args.naturals,
        strength=args.strength,
        noise_std=args.noise_std,
        jpeg_chain=_parse_chain(args.jpeg_chain),
        master_seed=args.seed,
    )
    build_dataset(cfg, out_dir=args.out)
    print(f"wrote dataset ({cfg.n_devices} devices) to {args.out}")
    return 0


def cmd_fingerprint(args) -> int:
    paths = sorted(
        p for p in Path(args.image_dir).iterdir()
        if p.suffix.lower() in (".pgm", ".png", ".jpg", ".jpeg")
    )
    if not paths:
        raise EmptyInputError(f"no images found in {args.image_dir}")
    device_id = args.device_id or Path(args.image_dir).name
    fp = estimate_prnu([load_image(p) for p in paths], device_id=device_id)
    save_fingerprint(fp, args.out)
    print(f"estimated fingerprint for {device_id} from {fp.n_images} images -> {args.out}")
    return 0


def cmd_residual(args) -> int:
    res = extract_residual(load_image(args.image))
    save_residual(res, args.out)
    print(f"extracted residual {res.values.shape[0]}x{res.values.shape[1]} -> {args.out}")
    return 0


def cmd_match(args) -> int:
    res = load_residual(args.residual)
    fp_paths = sorted(Path(args.db_dir).glob("*.prnu"))
    if not fp_paths:
        raise EmptyInputError(f"no .prnu fingerprints in {args.db_dir}")
    db = FingerprintDb([load_fingerprint(p) for p in fp_paths])
    if args.scorer == "pcn":
        if not args.model:
            raise ConfigError("--model is required with --scorer pcn")
        scorer = make_pcn_scorer(load_model(args.model), threads=args.threads)
    else:
        scorer = make_pce_scorer(threads=args.threads)
    w_crop = crop_center(res.values, args.crop)
    k_crops = [crop_center(fp.K, args.crop) for fp in db]
    scores = scorer(w_crop, k_crops)
    ranking = np.argsort(-scores, kind="stable")
    print("rank\tdevice\tscore")
    for rank, idx in enumerate(ranking, start=1):
        print(f"{rank}\t{db.device_ids[idx]}\t{scores[idx]!r}")
    return 0


def cmd_train(args) -> int:
    ds, _db = load_dataset(args.dataset_dir)
    cfg = TrainConfig(
        crop_p=args.crop,
        seed=args.seed,
        max_epochs=args.max_epochs,
        patience=args.patience,
        learning_rate=args.lr,
    )
    model, history = train(ds, cfg, log=lambda msg: print(msg, file=sys.stderr))
    save_model(model, args.out)
    if args.history:
        history.to_csv(args.history)
    print(
        f"trained {len(history.epochs)} epochs (stop: {history.stopped_reason}); "
        f"best epoch {history.best_epoch} val_accuracy {history.best_val_accuracy:.4f} -> {args.out}"
    )
    return 0


def cmd_eval(args) -> int:
    ds, db = load_dataset(args.dataset_dir)
    if args.db_dir:
        db = FingerprintDb([load_fingerprint(p) for p in sorted(Path(args.db_dir).glob("*.prnu"))])
    if args.scorer == "pcn":
        if not args.model:
            raise ConfigError("--model is required with --scorer pcn")
        scorer = make_pcn_scorer(load_model(args.model), threads=args.threads)
    else:
        scorer = make_pce_scorer(threads=args.threads)
    sm = score_matrix(ds, db, scorer, args.crop)
    report = report_from_matrix(sm, {"crop_p": args.crop, "split": "eval"})
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_scores_csv(sm, out / "scores.csv")
    write_report_csv(report, out / "report.csv")
    write_roc_csv(report.roc_points, out / "roc.csv")
    print(f"a_cs={report.a_cs:.4f} auc_os={report.auc_os:.4f} (reports in {out})")
    return 0


def cmd_grid(args) -> int:
    single_ds, _ = load_dataset(args.single_dir)
    double_ds, _ = load_dataset(args.double_dir)
    cfg = TrainConfig(
        crop_p=args.crop,
        seed=args.seed,
        max_epochs=args.max_epochs,
        patience=args.patience,
    )
    report = domain_grid(
        {"single": single_ds, "double": double_ds},
        {"single": single_ds, "double": double_ds},
        cfg,
        threads=args.threads,
        log=lambda msg: print(msg, file=sys.stderr),
    )
    print("train,eval,a_cs")
    for (t_tag, e_tag), a_cs in sorted(report.cells.items()):
        print(f"{t_tag},{e_tag},{a_cs!r}")
    print("# " + " ".join(f"{k}={v}" for k, v in sorted(report.config.items())))
    return 0


def cmd_bench(args) -> int:
    results = [bench_single(args.scorer, args.crop, reps=args.reps, seed=args.seed)]
    if args.db_size > 1:
        results.append(
            bench_batch(args.scorer, args.crop, args.db_size, args.threads, reps=args.reps, seed=args.seed)
        )
    if args.out:
        write_bench_csv(results, args.out)
    for r in results:
        extra = "" if r.sequential_ms is None else f" batch={r.batch_ms:.3f}ms sequential={r.sequential_ms:.3f}ms"
        print(f"{r.scorer} P={r.crop_p} db={r.db_size} threads={r.threads}: "
              f"median={r.median_ms:.3f}ms iqr={r.iqr_ms:.3f}ms{extra}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="prnu-match", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset on disk")
    p.add_argument("--devices", type=int, default=20)
    p.add_argument("--dims", type=int, default=128)
    p.add_argument("--flats", type=int, default=25)
    p.add_argument("--naturals", type=int, default=40)
    p.add_argument("--strength", type=float, default=0.02)
    p.add_argument("--noise-std", type=float, default=2.0)
    p.add_argument("--jpeg-chain", default="", help="comma-separated qualities, e.g. 80,90")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("fingerprint", help="estimate a device fingerprint from an image directory")
    p.add_argument("image_dir")
    p.add_argument("--device-id", default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_fingerprint)

    p = sub.add_parser("residual", help="extract the noise residual of one image")
    p.add_argument("image")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_residual)

    p = sub.add_parser("match", help="rank database fingerprints against a residual")
    p.add_argument("residual")
    p.add_argument("db_dir")
    p.add_argument("--scorer", choices=("pce", "pcn"), default="pce")
    p.add_argument("--model", default=None)
    p.add_argument("-P", "--crop", type=int, default=64)
    p.add_argument("--threads", type=int, default=None)
    p.set_defaults(func=cmd_match)

    p = sub.add_parser("train", help="train the pair-wise correlation network on a dataset")
    p.add_argument("dataset_dir")
    p.add_argument("-P", "--crop", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--max-epochs", type=int, default=500)
    p.add_argument("--patience", type=int, default=30)
    p.add_argument("--lr", type=float, default=0.001)
    p.add_argument("--out", required=True)
    p.add_argument("--history", default=None, help="write per-epoch CSV here")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="closed-set and open-set evaluation reports")
    p.add_argument("dataset_dir")
    p.add_argument("--db-dir", default=None, help="directory of .prnu files (default: dataset flats)")
    p.add_argument("--scorer", choices=("pce", "pcn"), default="pce")
    p.add_argument("--model", default=None)
    p.add_argument("-P", "--crop", type=int, default=64)
    p.add_argument("--threads", type=int, default=None)
    p.add_argument("--out-dir", default="eval_out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("grid", help="single/double compression domain-adaptation table")
    p.add_argument("single_dir")
    p.add_argument("double_dir")
    p.add_argument("-P", "--crop", type=int, default=48)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--max-epochs", type=int, default=60)
    p.add_argument("--patience", type=int, default=15)
    p.add_argument("--threads", type=int, default=None)
    p.set_defaults(func=cmd_grid)

    p = sub.add_parser("bench", help="matcher timing: per-pair and batched database matching")
    p.add_argument("--scorer", choices=("pce", "pcn"), default="pcn")
    p.add_argument("-P", "--crop", type=int, default=64)
    p.add_argument("--db-size", type=int, default=1)
    p.add_argument("--threads", type=int, default=None)
    p.add_argument("--reps", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_bench)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return 0 if e.code in (0, None) else 1
    try:
        if getattr(args, "threads", None) is None and "threads" in vars(args):
            args.threads = _default_threads()
        _echo_config(args)
        return args.func(args)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except (IoError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (FormatError, DimensionError, DuplicateError, EmptyInputError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 3
    except (NumericError, DegenerateInputError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 4


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
