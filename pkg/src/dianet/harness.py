"""Training with early stopping, the leave-one-subject-out driver, and ablations."""

from __future__ import annotations

import csv
import io
import json
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import dynimg
from .data import AugOp, apply_augmentation, draw_augmentation, loso_splits, resize
from .errors import DianetError, LeakageError
from .model import (
    AttentionKind,
    BackboneConfig,
    FusionConfig,
    ModelConfig,
    StreamMode,
    dianet_forward,
    init_params,
    predict,
)
from .ndcore import Adam
from .objective import DEFAULT_LAMBDA, LAMBDA_SWEEP, accuracy, total_loss
from .seeding import derive_seed

logger = logging.getLogger(__name__)

SINGLE_STREAM_NOTE = (
    "single-stream rows use the stream-1 backbone followed by an affine d->d map in place of "
    "the fusion block; the consistency term is inactive without a second stream"
)


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-4
    batch_size: int = 32
    max_epochs: int = 50
    patience: int = 10
    lam: float = DEFAULT_LAMBDA
    seed: int = 0
    input_size: int = 32
    augment: bool = True
    stream_mode: StreamMode = StreamMode.DUAL_PHASE
    attention: AttentionKind = AttentionKind.CROSS
    feature_dim: int = 64
    n_tokens: int = 8
    hidden: int | None = None
    dropout: float = 0.3
    stages: tuple = ((8, 3, 1), (16, 3, 1))
    tie_backbones: bool = False
    val_fraction: float = 0.1
    norm_mode: dynimg.NormMode = dynimg.NormMode.PER_CHANNEL

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.max_epochs < 1:
            raise ValueError("max_epochs must be >= 1")
        if not 0 <= self.patience <= self.max_epochs:
            raise ValueError("patience must lie in [0, max_epochs]")
        if self.lam < 0:
            raise ValueError("lambda must be >= 0")
        object.__setattr__(self, "stream_mode", StreamMode(self.stream_mode))
        object.__setattr__(self, "attention", AttentionKind(self.attention))
        object.__setattr__(self, "norm_mode", dynimg.NormMode(self.norm_mode))
        object.__setattr__(self, "stages", tuple(tuple(s) for s in self.stages))

    def model_config(self, n_classes, in_channels=1):
        return ModelConfig(
            n_classes=n_classes,
            input_size=(self.input_size, self.input_size),
            backbone=BackboneConfig(self.stages, self.feature_dim, in_channels),
            fusion=FusionConfig(self.n_tokens, self.attention),
            hidden=self.hidden,
            dropout=self.dropout,
            stream_mode=self.stream_mode,
            tie_backbones=self.tie_backbones,
        )

    def to_dict(self):
        out = asdict(self)
        out["stream_mode"] = self.stream_mode.value
        out["attention"] = self.attention.value
        out["norm_mode"] = self.norm_mode.value
        out["stages"] = [list(s) for s in self.stages]
        return out

    @classmethod
    def from_dict(cls, raw):
        raw = dict(raw)
        raw["stages"] = tuple(tuple(s) for s in raw.get("stages", cls.stages))
        return cls(**raw)


# ---------------------------------------------------------------- inputs


def network_inputs(seq, cfg, aug=None):
    """Dynamic-image rasters for each stream: augment frames, pool, resize, normalize."""
    if aug is not None and not aug.is_identity:
        seq = apply_augmentation(seq, aug)
    phases = cfg.stream_mode.phases
    cache = {}
    out = []
    for phase in phases:
        if phase not in cache:
            di = dynimg.dynamic_image(seq, phase)
            raster = resize(di.raster, cfg.input_size, cfg.input_size)
            cache[phase] = dynimg.normalize(raster, cfg.norm_mode).astype(np.float32)
        out.append(cache[phase])
    return out


class _InputCache:
    """Per-fold cache of network inputs keyed by (sample index, augmentation)."""

    def __init__(self, seqs, cfg):
        self.seqs = seqs
        self.cfg = cfg
        self._store = {}

    def get(self, i, aug=None):
        key = (i, aug if aug is not None and not aug.is_identity else None)
        hit = self._store.get(key)
        if hit is None:
            hit = network_inputs(self.seqs[i], self.cfg, key[1])
            self._store[key] = hit
        return hit

    def end_epoch(self):
        self._store = {k: v for k, v in self._store.items() if k[1] is None}

    def batch(self, idx, augs=None):
        items = [self.get(i, None if augs is None else augs[j]) for j, i in enumerate(idx)]
        n_streams = len(items[0])
        return [np.stack([it[s] for it in items]) for s in range(n_streams)]


def _forward(params, streams, training=False, rng=None):
    second = streams[1] if len(streams) > 1 else None
    return dianet_forward(streams[0], second, params, training=training, rng=rng)


def evaluate(params, cache, indices, labels, cfg, chunk=64):
    """Eval-mode mean loss breakdown, predictions, and logits over ``indices``."""
    indices = np.asarray(indices, dtype=int)
    preds, logits_all = [], []
    ce = cons = tot = 0.0
    for start in range(0, len(indices), chunk):
        idx = indices[start : start + chunk]
        logits, f1, f2 = _forward(params, cache.batch(idx))
        _, br = total_loss(logits, labels[idx], f1, f2, cfg.lam)
        w = len(idx)
        ce, cons, tot = ce + br.ce * w, cons + br.cons * w, tot + br.total * w
        preds.append(predict(logits))
        logits_all.append(logits.data)
    n = max(len(indices), 1)
    return (
        {"ce": ce / n, "cons": cons / n, "total": tot / n},
        np.concatenate(preds) if preds else np.zeros(0, dtype=int),
        np.concatenate(logits_all) if logits_all else np.zeros((0, params.config.n_classes)),
    )


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    train_ce: float
    train_cons: float
    val_loss: float
    val_accuracy: float
    improved: bool


@dataclass
class TrainHistory:
    epochs: list = field(default_factory=list)
    best_epoch: int = -1
    best_val_loss: float = float("inf")
    monitor: str = "val"

    def __len__(self):
        return len(self.epochs)


def train_fold(train, val, cfg, n_classes=None, fold_key="train", log_every=0):
    """Train one model; return the best-validation-loss ``(params, history)``.

    ``train`` and ``val`` are lists of FrameSequence. With an empty validation
    set the training loss is monitored instead.
    """
    if not train:
        raise DianetError("empty training set")
    seqs = list(train) + list(val)
    labels = np.array([s.label for s in seqs])
    n_classes = n_classes or int(labels.max()) + 1
    train_idx = np.arange(len(train))
    val_idx = np.arange(len(train), len(seqs))
    in_channels = seqs[0].frames.shape[1]
    mcfg = cfg.model_config(n_classes, in_channels)
    params = init_params(mcfg, seed=derive_seed(cfg.seed, "init", fold_key))
    opt = Adam(params.parameters(), lr=cfg.lr)
    shuffle_rng = np.random.default_rng(derive_seed(cfg.seed, "shuffle", fold_key))
    aug_rng = np.random.default_rng(derive_seed(cfg.seed, "augment", fold_key))
    drop_rng = np.random.default_rng(derive_seed(cfg.seed, "dropout", fold_key))
    cache = _InputCache(seqs, cfg)
    ops = (AugOp.HFLIP, AugOp.ROTATE)

    history = TrainHistory(monitor="val" if len(val_idx) else "train")
    best = params.copy()
    stale = 0
    for epoch in range(cfg.max_epochs):
        order = shuffle_rng.permutation(train_idx)
        augs = [draw_augmentation(ops, aug_rng) for _ in order] if cfg.augment else None
        sums = np.zeros(3)
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            batch_augs = augs[start : start + cfg.batch_size] if augs is not None else None
            logits, f1, f2 = _forward(params, cache.batch(idx, batch_augs), training=True, rng=drop_rng)
            loss, br = total_loss(logits, labels[idx], f1, f2, cfg.lam)
            opt.zero_grad()
            loss.backward()
            opt.step()
            sums += len(idx) * np.array([br.total, br.ce, br.cons])
        cache.end_epoch()
        sums /= len(order)

        if len(val_idx):
            metrics, preds, _ = evaluate(params, cache, val_idx, labels, cfg)
            monitored, val_acc = metrics["total"], accuracy(preds, labels[val_idx])
        else:
            monitored, val_acc = float(sums[0]), float("nan")
        improved = monitored < history.best_val_loss
        history.epochs.append(EpochRecord(epoch, *map(float, sums), float(monitored), float(val_acc), improved))
        if log_every and epoch % log_every == 0:
            logger.info("[%s] epoch %d train %.4f val %.4f acc %.3f", fold_key, epoch, sums[0], monitored, val_acc)
        if improved:
            history.best_val_loss, history.best_epoch = float(monitored), epoch
            best = params.copy()
            stale = 0
        else:
            stale += 1
            if stale > cfg.patience:
                break
    return best, history


# ---------------------------------------------------------------- LOSO


@dataclass
class FoldResult:
    subject: str
    n_test: int
    n_correct: int
    accuracy: float
    confusion: list
    epochs_run: int
    best_epoch: int
    best_val_loss: float
    predictions: list
    labels: list


@dataclass
class LosoReport:
    config: dict
    class_names: list
    folds: list
    micro_accuracy: float
    macro_accuracy: float
    confusion: list
    n_samples: int
    notes: list = field(default_factory=list)
    wall_clock: float = field(default=0.0, compare=False)

    def check_invariants(self):
        assert sum(f.n_test for f in self.folds) == self.n_samples
        correct = sum(f.n_correct for f in self.folds)
        assert abs(self.micro_accuracy - correct / self.n_samples) <= 1e-9

    def to_dict(self, include_timing=True):
        out = asdict(self)
        if not include_timing:
            out.pop("wall_clock")
        return out


def _confusion(labels, preds, n_classes):
    m = np.zeros((n_classes, n_classes), dtype=int)
    np.add.at(m, (np.asarray(labels, dtype=int), np.asarray(preds, dtype=int)), 1)
    return m


def check_no_leakage(dataset, fold):
    test_subjects = {dataset[i].subject_id for i in fold.test}
    seen = {dataset[i].subject_id for i in np.concatenate([fold.train, fold.val])}
    overlap = test_subjects & seen
    if overlap:
        raise LeakageError(f"fold {fold.subject}: subjects {sorted(overlap)} in both test and train/val")


def _run_fold(args):
    dataset, fold, cfg, n_classes = args
    train = [dataset[i] for i in fold.train]
    val = [dataset[i] for i in fold.val]
    test = [dataset[i] for i in fold.test]
    params, history = train_fold(train, val, cfg, n_classes=n_classes, fold_key=f"fold:{fold.subject}")
    labels = np.array([s.label for s in test])
    cache = _InputCache(test, cfg)
    _, preds, _ = evaluate(params, cache, np.arange(len(test)), labels, cfg)
    return FoldResult(
        subject=fold.subject,
        n_test=len(test),
        n_correct=int((preds == labels).sum()),
        accuracy=accuracy(preds, labels),
        confusion=_confusion(labels, preds, n_classes).tolist(),
        epochs_run=len(history),
        best_epoch=history.best_epoch,
        best_val_loss=history.best_val_loss,
        predictions=preds.tolist(),
        labels=labels.tolist(),
    )


def run_loso(dataset, cfg, class_names=None, threads=1, fold_order=None):
    """Leave-one-subject-out evaluation; one freshly initialized model per fold.

    ``fold_order`` optionally permutes execution order; the report is ordered
    by subject regardless.
    """
    t0 = time.perf_counter()
    dataset = list(dataset)
    folds = loso_splits(dataset, seed=cfg.seed, val_fraction=cfg.val_fraction)
    for fold in folds:
        check_no_leakage(dataset, fold)
    n_classes = len(class_names) if class_names else max(s.label for s in dataset) + 1
    order = list(range(len(folds))) if fold_order is None else list(fold_order)
    if sorted(order) != list(range(len(folds))):
        raise ValueError("fold_order must be a permutation of the fold indices")
    jobs = [(dataset, folds[i], cfg, n_classes) for i in order]
    if threads > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(_run_fold, jobs))
    else:
        results = [_run_fold(j) for j in jobs]
    by_subject = {r.subject: r for r in results}
    ordered = [by_subject[f.subject] for f in folds]

    n = sum(r.n_test for r in ordered)
    confusion = np.sum([np.array(r.confusion) for r in ordered], axis=0)
    notes = [] if cfg.stream_mode.dual else [SINGLE_STREAM_NOTE]
    report = LosoReport(
        config=cfg.to_dict(),
        class_names=list(class_names) if class_names else [str(k) for k in range(n_classes)],
        folds=ordered,
        micro_accuracy=sum(r.n_correct for r in ordered) / n,
        macro_accuracy=float(np.mean([r.accuracy for r in ordered])),
        confusion=confusion.tolist(),
        n_samples=n,
        notes=notes,
        wall_clock=time.perf_counter() - t0,
    )
    report.check_invariants()
    return report


# ---------------------------------------------------------------- ablation

INPUT_LABELS = {
    StreamMode.SINGLE_FULL: ("1-stream", "Dynamic image"),
    StreamMode.SINGLE_ONSET: ("1-stream", "DI-Onset"),
    StreamMode.SINGLE_OFFSET: ("1-stream", "DI-Offset"),
    StreamMode.DUAL_FULL: ("2-stream", "Dynamic image"),
    StreamMode.DUAL_PHASE: ("2-stream", "DI-Onset + DI-Offset"),
}
ATTENTION_LABELS = {AttentionKind.SIMPLE: "Simple Attention Block", AttentionKind.CROSS: "Cross Attention Fusion Block"}

# Rows of the attention comparison and the phase-wise input comparison; the
# dual-phase cross-attention model is shared by both and run once.
ABLATION_CONFIGS = (
    (StreamMode.DUAL_PHASE, AttentionKind.SIMPLE),
    (StreamMode.DUAL_PHASE, AttentionKind.CROSS),
    (StreamMode.SINGLE_FULL, None),
    (StreamMode.SINGLE_ONSET, None),
    (StreamMode.SINGLE_OFFSET, None),
    (StreamMode.DUAL_FULL, AttentionKind.CROSS),
)
ATTENTION_TABLE = ABLATION_CONFIGS[:2]
INPUT_TABLE = ABLATION_CONFIGS[2:5] + (ABLATION_CONFIGS[5], ABLATION_CONFIGS[1])


@dataclass
class AblationRow:
    stream_mode: str
    attention: str | None
    streams: str
    input: str
    accuracy: dict  # dataset name -> micro accuracy in [0, 1]
    reports: dict = field(default_factory=dict, compare=False)


@dataclass
class AblationTable:
    datasets: list
    rows: list
    soft_checks: list = field(default_factory=list)

    def row(self, stream_mode, attention=None):
        key = (StreamMode(stream_mode).value, AttentionKind(attention).value if attention else None)
        for r in self.rows:
            if (r.stream_mode, r.attention) == key:
                return r
        raise KeyError(key)


def run_ablation(dataset, base_cfg, class_names=None, threads=1, name="synthetic"):
    """Run every ablation configuration on one dataset or a ``{name: dataset}`` map."""
    datasets = dataset if isinstance(dataset, dict) else {name: dataset}
    rows = []
    for mode, attention in ABLATION_CONFIGS:
        cfg = replace(base_cfg, stream_mode=mode, attention=attention or base_cfg.attention)
        streams, label = INPUT_LABELS[mode]
        row = AblationRow(mode.value, attention.value if attention else None, streams, label, {})
        for ds_name, ds in datasets.items():
            names = class_names.get(ds_name) if isinstance(class_names, dict) else class_names
            report = run_loso(ds, cfg, class_names=names, threads=threads)
            row.accuracy[ds_name] = report.micro_accuracy
            row.reports[ds_name] = report
            logger.info("ablation %s/%s on %s: %.4f", mode.value, row.attention, ds_name, report.micro_accuracy)
        rows.append(row)
    table = AblationTable(list(datasets), rows)
    dual = table.row(StreamMode.DUAL_PHASE, AttentionKind.CROSS)
    single = table.row(StreamMode.SINGLE_FULL)
    for ds_name in datasets:
        ok = dual.accuracy[ds_name] >= single.accuracy[ds_name]
        msg = (
            f"{ds_name}: dual-phase {100 * dual.accuracy[ds_name]:.2f}% "
            f"{'>=' if ok else '<'} single full-DI {100 * single.accuracy[ds_name]:.2f}%"
        )
        table.soft_checks.append({"check": "dual_phase >= single_full", "dataset": ds_name, "holds": ok, "detail": msg})
        (logger.info if ok else logger.warning)("soft check %s", msg)
    return table


def run_lambda_sweep(dataset, base_cfg, lams=LAMBDA_SWEEP, class_names=None, threads=1):
    """LOSO once per consistency weight; returns ``{lam: LosoReport}`` in sweep order."""
    return {lam: run_loso(dataset, replace(base_cfg, lam=lam), class_names, threads) for lam in lams}


def render_sweep(reports):
    lines = [f"{'lambda':>8}{'micro %':>10}{'macro %':>10}"]
    for lam, rep in reports.items():
        lines.append(f"{lam:>8g}{100 * rep.micro_accuracy:>10.2f}{100 * rep.macro_accuracy:>10.2f}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------- reporting


def _loso_text(report):
    lines = ["LOSO report", "=" * 40]
    cfg = report.config
    lines.append(
        f"mode={cfg['stream_mode']} attention={cfg['attention']} lambda={cfg['lam']} "
        f"lr={cfg['lr']} batch={cfg['batch_size']} epochs<={cfg['max_epochs']} seed={cfg['seed']}"
    )
    for note in report.notes:
        lines.append(f"note: {note}")
    lines.append("")
    lines.append(f"{'subject':<12}{'n_test':>8}{'correct':>9}{'acc %':>9}{'epochs':>8}")
    for f in report.folds:
        lines.append(f"{f.subject:<12}{f.n_test:>8}{f.n_correct:>9}{100 * f.accuracy:>9.2f}{f.epochs_run:>8}")
    lines.append("-" * 46)
    lines.append(f"micro accuracy: {100 * report.micro_accuracy:.2f}% over {report.n_samples} samples")
    lines.append(f"macro accuracy: {100 * report.macro_accuracy:.2f}% over {len(report.folds)} folds")
    lines.append("")
    lines.append("confusion (rows = true, cols = predicted)")
    width = max(8, max(len(c) for c in report.class_names) + 2)
    lines.append(" " * width + "".join(f"{c:>{width}}" for c in report.class_names))
    for name, row in zip(report.class_names, report.confusion):
        lines.append(f"{name:<{width}}" + "".join(f"{v:>{width}}" for v in row))
    return "\n".join(lines) + "\n"


def _ablation_text(table):
    ds = table.datasets
    head = "".join(f"{d:>14}" for d in ds)
    lines = ["Attention block comparison (accuracy %)", f"{'Attention':<32}{head}"]
    for mode, att in ATTENTION_TABLE:
        r = table.row(mode, att)
        lines.append(f"{ATTENTION_LABELS[AttentionKind(r.attention)]:<32}" + "".join(f"{100 * r.accuracy[d]:>14.2f}" for d in ds))
    lines += ["", "Phase-wise dynamic image comparison (accuracy %)", f"{'':<10}{'Input':<24}{'Method':<10}{head}"]
    for mode, att in INPUT_TABLE:
        r = table.row(mode, att)
        method = "DIANet" if r.streams == "2-stream" else "1-stream"
        lines.append(f"{r.streams:<10}{r.input:<24}{method:<10}" + "".join(f"{100 * r.accuracy[d]:>14.2f}" for d in ds))
    lines += ["", f"note: {SINGLE_STREAM_NOTE}"]
    for chk in table.soft_checks:
        lines.append(f"soft check ({'holds' if chk['holds'] else 'does not hold'}): {chk['detail']}")
    return "\n".join(lines) + "\n"


def _ablation_dict(table):
    return {
        "datasets": table.datasets,
        "rows": [
            {k: v for k, v in asdict(r).items() if k != "reports"}
            | {"reports": {d: rep.to_dict(include_timing=False) for d, rep in r.reports.items()}}
            for r in table.rows
        ],
        "soft_checks": table.soft_checks,
    }


def render_report(report, fmt="text"):
    """Serialize a LosoReport or AblationTable as text, csv, or json."""
    fmt = fmt.lower()
    is_ablation = isinstance(report, AblationTable)
    if fmt == "text":
        return _ablation_text(report) if is_ablation else _loso_text(report)
    if fmt == "json":
        payload = _ablation_dict(report) if is_ablation else report.to_dict(include_timing=False)
        return json.dumps(payload, indent=2, sort_keys=True) + "\n"
    if fmt == "csv":
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        if is_ablation:
            writer.writerow(["streams", "input", "stream_mode", "attention"] + [f"acc_{d}" for d in report.datasets])
            for r in report.rows:
                writer.writerow([r.streams, r.input, r.stream_mode, r.attention or ""] + [f"{r.accuracy[d]:.6f}" for d in report.datasets])
        else:
            writer.writerow(["subject", "n_test", "n_correct", "accuracy", "epochs_run", "best_epoch"])
            for f in report.folds:
                writer.writerow([f.subject, f.n_test, f.n_correct, f"{f.accuracy:.6f}", f.epochs_run, f.best_epoch])
            writer.writerow(["ALL(micro)", report.n_samples, sum(f.n_correct for f in report.folds), f"{report.micro_accuracy:.6f}", "", ""])
        return buf.getvalue()
    raise ValueError(f"unknown report format {fmt!r}")


def emit_report(report, fmt, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(render_report(report, fmt))
    return path
