"""Command-line entry point: ``dianet <subcommand> [flags]``.

Exit codes: 0 success, 1 domain error (bad data, degenerate phase, failed
check), 2 usage error.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import dynimg
from .data import SynthConfig, export_dataset, load_dataset, load_manifest, load_sequence, synth_class_names, synth_generate
from .errors import DianetError
from .harness import (
    TrainConfig,
    emit_report,
    render_report,
    render_sweep,
    run_ablation,
    run_lambda_sweep,
    run_loso,
    train_fold,
)
from .model import AttentionKind, StreamMode, save_checkpoint
from .objective import LAMBDA_SWEEP
from .seeding import derive_seed

EXIT_OK, EXIT_DOMAIN, EXIT_USAGE = 0, 1, 2
PHASE_CHOICES = {"onset": [dynimg.Phase.ONSET_APEX], "offset": [dynimg.Phase.APEX_OFFSET], "full": [dynimg.Phase.FULL]}
PHASE_CHOICES["all"] = PHASE_CHOICES["onset"] + PHASE_CHOICES["offset"] + PHASE_CHOICES["full"]

log = logging.getLogger("dianet")


def _stages(text):
    """Parse ``8x3x1,16x3x1`` into ((8, 3, 1), (16, 3, 1))."""
    try:
        stages = tuple(tuple(int(v) for v in part.split("x")) for part in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad stage list {text!r}; expected e.g. 8x3x1,16x3x1") from None
    if not stages or any(len(s) != 3 or min(s) < 1 for s in stages):
        raise argparse.ArgumentTypeError(f"bad stage list {text!r}; expected e.g. 8x3x1,16x3x1")
    return stages


def _positive(kind):
    def parse(text):
        value = kind(text)
        if value <= 0:
            raise argparse.ArgumentTypeError(f"must be positive, got {text}")
        return value

    return parse


# ---------------------------------------------------------------- parser


def _add_synth_flags(p, with_switch):
    g = p.add_argument_group("synthetic corpus")
    if with_switch:
        g.add_argument("--synth", action="store_true", help="generate the synthetic corpus in memory (seeded by --seed)")
    g.add_argument("--subjects", type=_positive(int), help="number of subjects (default 10)")
    g.add_argument("--samples-per-subject", type=_positive(int), help="samples per subject (default 20)")
    g.add_argument("--classes", type=int, help="number of classes (default 3)")
    g.add_argument("--frame-size", type=int, help="frame height and width (default 16)")
    g.add_argument("--length", type=int, help="frames per sequence (default 12)")
    g.add_argument("--noise", type=float, help="Gaussian pixel noise std (default 0.05)")
    g.add_argument("--amplitude", type=float, help="class signal amplitude (default 0.3)")


SYNTH_FLAGS = {
    "subjects": "n_subjects",
    "samples_per_subject": "samples_per_subject",
    "classes": "n_classes",
    "frame_size": "frame_size",
    "length": "sequence_length",
    "noise": "noise_std",
    "amplitude": "amplitude",
}


def _add_train_flags(p):
    d = TrainConfig()
    g = p.add_argument_group("training")
    g.add_argument("--manifest", type=Path, help="dataset manifest CSV (dir,subject,label,onset,apex,offset)")
    g.add_argument("--min-class-count", type=int, default=0, help="drop classes with fewer samples (default 0: keep all)")
    g.add_argument("--lr", type=_positive(float), default=d.lr, help=f"Adam learning rate (default {d.lr:g})")
    g.add_argument("--batch-size", type=_positive(int), default=d.batch_size, help=f"minibatch size (default {d.batch_size})")
    g.add_argument("--epochs", type=_positive(int), default=d.max_epochs, help=f"maximum epochs (default {d.max_epochs})")
    g.add_argument("--patience", type=int, default=d.patience, help=f"early-stopping patience (default {d.patience})")
    g.add_argument("--lam", type=float, default=d.lam, help=f"consistency loss weight (default {d.lam:g})")
    g.add_argument("--input-size", type=_positive(int), help=f"network input height/width (default {d.input_size})")
    g.add_argument("--no-augment", action="store_true", help="disable flip/rotation augmentation")
    g.add_argument("--mode", choices=[m.value for m in StreamMode], default=d.stream_mode.value, help="stream mode")
    g.add_argument("--attention", choices=[a.value for a in AttentionKind], default=d.attention.value, help="fusion block")
    g.add_argument("--feature-dim", type=_positive(int), default=d.feature_dim, help=f"feature size d (default {d.feature_dim})")
    g.add_argument("--tokens", type=_positive(int), default=d.n_tokens, help=f"attention tokens per feature (default {d.n_tokens})")
    g.add_argument("--hidden", type=_positive(int), help="classifier hidden width (default d)")
    g.add_argument("--dropout", type=float, default=d.dropout, help=f"classifier dropout (default {d.dropout})")
    g.add_argument("--stages", type=_stages, default=d.stages, help="conv stages as CxKxS list (default 8x3x1,16x3x1)")
    g.add_argument("--tie-backbones", action="store_true", help="share one backbone between the two streams")
    g.add_argument("--val-fraction", type=float, default=d.val_fraction, help="stratified validation holdout (default 0.1)")
    g.add_argument("--norm", choices=[m.value for m in dynimg.NormMode], default=d.norm_mode.value, help="DI normalization")
    g.add_argument("--format", choices=["text", "csv", "json"], default="text", help="format printed to stdout")
    _add_synth_flags(p, with_switch=True)


def build_parser():
    parser = argparse.ArgumentParser(
        prog="dianet", description="Dual-phase dynamic-image micro-expression recognition.", epilog=__doc__.split("\n\n")[1]
    )
    parser.add_argument("--seed", type=int, default=0, help="global seed; every RNG derives from it (default 0)")
    parser.add_argument(
        "--threads", type=_positive(int), default=os.cpu_count() or 1, help="fold worker processes (default: all cores)"
    )
    parser.add_argument("--out-dir", type=Path, default=Path("dianet-out"), help="output directory (default dianet-out)")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("di", help="write dynamic images for every sequence in a manifest")
    p.add_argument("manifest", type=Path, help="manifest CSV")
    p.add_argument("--phase", choices=sorted(PHASE_CHOICES), default="all", help="which images to write (default all)")
    p.add_argument("--normalize", action="store_true", help="store min-max normalized rasters instead of raw pooling output")
    p.add_argument("--png", action="store_true", help="also write an 8-bit PNG of each normalized image")
    p.add_argument("--strict", action="store_true", help="abort on the first failing sequence")

    p = sub.add_parser("synth", help="write a synthetic corpus (frames + manifest.csv) seeded by --seed")
    _add_synth_flags(p, with_switch=False)

    p = sub.add_parser("train", help="train one model and save a checkpoint")
    _add_train_flags(p)

    p = sub.add_parser("loso", help="leave-one-subject-out evaluation")
    _add_train_flags(p)
    p.add_argument("--lambda-sweep", action="store_true", help=f"run LOSO for each lambda in {list(LAMBDA_SWEEP)}")

    p = sub.add_parser("ablate", help="attention-block and input-configuration ablations")
    _add_train_flags(p)

    p = sub.add_parser("gradcheck", help="finite-difference check of the full network and loss")
    p.add_argument("--bits", type=int, choices=[32, 64], default=64, help="parameter precision (default 64)")
    p.add_argument("--config", choices=["small"], default="small", help="network: small = 3 classes, 16x16, d=32")
    p.add_argument("--coords", type=_positive(int), default=16, help="coordinates sampled per parameter tensor")
    return parser


# ---------------------------------------------------------------- helpers


def _synth_config(args):
    kw = {field: getattr(args, flag) for flag, field in SYNTH_FLAGS.items() if getattr(args, flag, None) is not None}
    return SynthConfig(rng_seed=args.seed, **kw)


def _dataset(args, parser):
    synth_flags = [f"--{f.replace('_', '-')}" for f in SYNTH_FLAGS if getattr(args, f, None) is not None]
    if args.manifest is not None and args.synth:
        parser.error("--manifest and --synth are mutually exclusive")
    if args.manifest is not None and synth_flags:
        parser.error(f"--manifest conflicts with {synth_flags[0]} (synthetic-corpus flag)")
    if args.manifest is None and not args.synth:
        parser.error("give a data source: --manifest PATH or --synth")
    if args.manifest is not None:
        if not args.manifest.is_file():
            parser.error(f"--manifest {args.manifest} does not exist")
        return load_dataset(args.manifest, args.min_class_count)
    cfg = _synth_config(args)
    return synth_generate(cfg), synth_class_names(cfg.n_classes)


def _train_config(args, dataset):
    size = args.input_size or (dataset[0].frame_shape[-1] if dataset else TrainConfig.input_size)
    return TrainConfig(
        lr=args.lr,
        batch_size=args.batch_size,
        max_epochs=args.epochs,
        patience=args.patience,
        lam=args.lam,
        seed=args.seed,
        input_size=size,
        augment=not args.no_augment,
        stream_mode=args.mode,
        attention=args.attention,
        feature_dim=args.feature_dim,
        n_tokens=args.tokens,
        hidden=args.hidden,
        dropout=args.dropout,
        stages=args.stages,
        tie_backbones=args.tie_backbones,
        val_fraction=args.val_fraction,
        norm_mode=args.norm,
    )


def _sequence_name(entry, root, index):
    try:
        rel = Path(entry.dir).relative_to(root).as_posix()
    except ValueError:
        rel = Path(entry.dir).name
    return rel.strip("/").replace("/", "__") or f"seq{index:04d}"


def _write_reports(report, out_dir, stem):
    paths = [emit_report(report, fmt, out_dir / f"{stem}.{ext}") for fmt, ext in (("text", "txt"), ("csv", "csv"), ("json", "json"))]
    log.info("wrote %s", ", ".join(str(p) for p in paths))


# ---------------------------------------------------------------- commands


def cmd_di(args, parser):
    if not args.manifest.is_file():
        parser.error(f"manifest {args.manifest} does not exist")
    manifest = load_manifest(args.manifest, check_frames=False)
    out_dir = args.out_dir
    out_dir.mkdir(parents=True, exist_ok=True)
    failures, written = [], 0
    for i, entry in enumerate(manifest.entries):
        name = _sequence_name(entry, manifest.root, i)
        try:
            seq = load_sequence(entry)
            for phase in PHASE_CHOICES[args.phase]:
                di = dynimg.dynamic_image(seq, phase)
                normalized = dynimg.normalize(di)
                dynimg.write_dir1(out_dir / f"{name}.{phase.value}.dir1", normalized if args.normalize else di.raster)
                if args.png:
                    dynimg.write_png(out_dir / f"{name}.{phase.value}.png", normalized)
                written += 1
        except DianetError as exc:
            failures.append((str(entry.dir), exc))
            print(f"FAILED {entry.dir}: {type(exc).__name__}: {exc}", file=sys.stderr)
            if args.strict:
                break
    print(f"wrote {written} dynamic images to {out_dir}; {len(failures)} failed sequence(s)")
    return EXIT_DOMAIN if failures else EXIT_OK


def cmd_synth(args, parser):
    cfg = _synth_config(args)
    seqs = synth_generate(cfg)
    path = export_dataset(seqs, args.out_dir, synth_class_names(cfg.n_classes))
    print(f"wrote {len(seqs)} sequences from {cfg.n_subjects} subjects; manifest {path}")
    return EXIT_OK


def cmd_train(args, parser):
    from .data import stratified_holdout

    dataset, class_names = _dataset(args, parser)
    if not dataset:
        raise DianetError("dataset is empty")
    cfg = _train_config(args, dataset)
    labels = np.array([s.label for s in dataset])
    rng = np.random.default_rng(derive_seed(cfg.seed, "train-val"))
    train_idx, val_idx = stratified_holdout(np.arange(len(dataset)), labels, cfg.val_fraction, rng)
    params, history = train_fold([dataset[i] for i in train_idx], [dataset[i] for i in val_idx], cfg, len(class_names))
    ck = save_checkpoint(
        args.out_dir / "checkpoint",
        params,
        class_names,
        seed=cfg.seed,
        extra={"train_config": cfg.to_dict(), "best_epoch": history.best_epoch, "epochs_run": len(history)},
    )
    print(f"{'epoch':>6}{'train':>10}{'ce':>10}{'cons':>10}{'val':>10}{'val acc':>9}")
    for e in history.epochs:
        mark = " *" if e.improved else ""
        print(f"{e.epoch:>6}{e.train_loss:>10.4f}{e.train_ce:>10.4f}{e.train_cons:>10.4f}{e.val_loss:>10.4f}{e.val_accuracy:>9.3f}{mark}")
    print(f"best epoch {history.best_epoch} ({history.monitor} loss {history.best_val_loss:.4f}); checkpoint {ck}")
    return EXIT_OK


def cmd_loso(args, parser):
    dataset, class_names = _dataset(args, parser)
    cfg = _train_config(args, dataset)
    args.out_dir.mkdir(parents=True, exist_ok=True)
    if args.lambda_sweep:
        reports = run_lambda_sweep(dataset, cfg, LAMBDA_SWEEP, class_names, args.threads)
        for lam, rep in reports.items():
            _write_reports(rep, args.out_dir, f"loso_lam{lam:g}")
        summary = render_sweep(reports)
        (args.out_dir / "lambda_sweep.txt").write_text(summary)
        sys.stdout.write(summary)
        return EXIT_OK
    report = run_loso(dataset, cfg, class_names, threads=args.threads)
    _write_reports(report, args.out_dir, "loso")
    sys.stdout.write(render_report(report, args.format))
    return EXIT_OK


def cmd_ablate(args, parser):
    dataset, class_names = _dataset(args, parser)
    cfg = _train_config(args, dataset)
    name = "synthetic" if args.synth else args.manifest.parent.name or "dataset"
    table = run_ablation(dataset, cfg, class_names, threads=args.threads, name=name)
    args.out_dir.mkdir(parents=True, exist_ok=True)
    _write_reports(table, args.out_dir, "ablation")
    sys.stdout.write(render_report(table, args.format))
    return EXIT_OK


def cmd_gradcheck(args, parser):
    from .gradients import check_config, full_gradient_check, single_precision_check

    ok = True
    for attention in AttentionKind:
        cfg = check_config(attention=attention)
        if args.bits == 64:
            report, _ = full_gradient_check(cfg, seed=args.seed, max_coords=args.coords)
        else:
            report = single_precision_check(cfg, seed=args.seed, max_coords=args.coords)
        print(f"{args.bits}-bit full network, {attention.value} attention: {report}")
        ok &= report.passed
    return EXIT_OK if ok else EXIT_DOMAIN


COMMANDS = {
    "di": cmd_di,
    "synth": cmd_synth,
    "train": cmd_train,
    "loso": cmd_loso,
    "ablate": cmd_ablate,
    "gradcheck": cmd_gradcheck,
}


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    sub_parser = parser._subparsers._group_actions[0].choices[args.command]
    try:
        return COMMANDS[args.command](args, sub_parser)
    except (DianetError, ValueError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_DOMAIN
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DOMAIN


if __name__ == "__main__":
    sys.exit(main())
