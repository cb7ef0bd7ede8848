"""Frame sequences: on-disk corpora, a synthetic generator, augmentation, LOSO folds."""

from __future__ import annotations

import csv
import enum
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import ndimage
from sklearn.model_selection import LeaveOneGroupOut

from .errors import DataFormatError, DianetError, IndexOutOfRangeError, ShapeError

logger = logging.getLogger(__name__)

FRAME_SUFFIXES = (".png", ".pgm")
MANIFEST_HEADER = ["dir", "subject", "label", "onset", "apex", "offset"]


@dataclass
class FrameSequence:
    """An annotated clip. ``frames`` is T x C x H x W float32 in [0, 1]."""

    frames: np.ndarray
    subject_id: str
    label: int
    onset: int
    apex: int
    offset: int
    source_id: str = ""

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float32)
        if self.frames.ndim != 4:
            raise ShapeError(f"frames must be T x C x H x W, got {self.frames.shape}")
        if not self.subject_id:
            raise DianetError("subject_id must be nonempty")
        if not 0 <= self.onset <= self.apex <= self.offset < len(self.frames):
            raise IndexOutOfRangeError(
                f"{self.source_id or 'sequence'}: onset={self.onset} apex={self.apex} "
                f"offset={self.offset} outside 0..{len(self.frames) - 1}"
            )

    def __len__(self):
        return len(self.frames)

    @property
    def frame_shape(self):
        return self.frames.shape[1:]


# ---------------------------------------------------------------- manifests


@dataclass(frozen=True)
class ManifestEntry:
    dir: Path
    subject_id: str
    label: int
    onset: int
    apex: int
    offset: int


@dataclass
class DatasetManifest:
    entries: list = field(default_factory=list)
    class_names: list = field(default_factory=list)
    root: Path = Path(".")

    def __len__(self):
        return len(self.entries)


def _frame_files(directory):
    return sorted(p for p in Path(directory).iterdir() if p.suffix.lower() in FRAME_SUFFIXES)


def load_manifest(path, check_frames=True):
    """Read ``dir,subject,label,onset,apex,offset`` rows.

    Directories resolve relative to the manifest. Class names come from a
    sibling ``classes.txt`` (one per line) when present, else ``"0".."K-1"``.
    """
    path = Path(path)
    root = path.parent
    entries = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            return DatasetManifest([], _read_class_names(root, 0), root)
        if [h.strip() for h in header] != MANIFEST_HEADER:
            raise DataFormatError(f"{path}: header must be {','.join(MANIFEST_HEADER)}, got {header}")
        for lineno, row in enumerate(reader, start=2):
            if not row or not "".join(row).strip():
                continue
            if len(row) != 6:
                raise DataFormatError(f"{path}:{lineno}: expected 6 fields, got {len(row)}")
            try:
                label, onset, apex, offset = (int(v) for v in row[2:])
            except ValueError as exc:
                raise DataFormatError(f"{path}:{lineno}: non-integer field") from exc
            entry = ManifestEntry(root / row[0].strip(), row[1].strip(), label, onset, apex, offset)
            if not entry.subject_id:
                raise DataFormatError(f"{path}:{lineno}: empty subject id")
            if not 0 <= onset <= apex <= offset:
                raise IndexOutOfRangeError(f"{path}:{lineno}: need onset <= apex <= offset")
            if check_frames:
                if not entry.dir.is_dir():
                    raise DataFormatError(f"{path}:{lineno}: missing directory {entry.dir}")
                n = len(_frame_files(entry.dir))
                if offset >= n:
                    raise IndexOutOfRangeError(
                        f"{path}:{lineno}: offset={offset} but {entry.dir} holds {n} frames"
                    )
            entries.append(entry)
    n_classes = max((e.label for e in entries), default=-1) + 1
    class_names = _read_class_names(root, n_classes)
    for e in entries:
        if not 0 <= e.label < len(class_names):
            raise DataFormatError(f"label {e.label} outside {len(class_names)} classes")
    return DatasetManifest(entries, class_names, root)


def _read_class_names(root, n_classes):
    names_file = Path(root) / "classes.txt"
    if names_file.exists():
        return [ln.strip() for ln in names_file.read_text().splitlines() if ln.strip()]
    return [str(k) for k in range(n_classes)]


def _read_frame(path):
    from PIL import Image, UnidentifiedImageError

    try:
        with Image.open(path) as img:
            mode = img.mode
            arr = np.asarray(img)
    except (OSError, UnidentifiedImageError) as exc:
        raise DataFormatError(f"unreadable image {path}") from exc
    # 16-bit PNG/PGM decode to the integer modes "I" / "I;16*"
    scale = 65535.0 if mode.startswith("I") or arr.dtype == np.uint16 else 255.0
    arr = arr.astype(np.float32) / np.float32(scale)
    if arr.ndim == 2:
        arr = arr[None]
    else:
        arr = arr[..., :3].transpose(2, 0, 1)
    return arr


def load_sequence(entry):
    files = _frame_files(entry.dir) if Path(entry.dir).is_dir() else []
    if not files:
        raise DataFormatError(f"no frame files in {entry.dir}")
    if entry.offset >= len(files):
        raise IndexOutOfRangeError(f"offset={entry.offset} but {entry.dir} holds {len(files)} frames")
    frames = [_read_frame(f) for f in files]
    if any(f.shape != frames[0].shape for f in frames):
        raise ShapeError(f"{entry.dir}: frames differ in shape")
    return FrameSequence(
        np.stack(frames),
        entry.subject_id,
        entry.label,
        entry.onset,
        entry.apex,
        entry.offset,
        source_id=str(entry.dir.name if entry.dir.parent == Path(".") else entry.dir),
    )


def filter_min_class_count(manifest, min_count=10):
    """Drop classes with fewer than ``min_count`` samples and renumber the rest."""
    counts = np.bincount([e.label for e in manifest.entries], minlength=len(manifest.class_names))
    kept = [k for k in range(len(manifest.class_names)) if counts[k] >= min_count]
    remap = {old: new for new, old in enumerate(kept)}
    dropped = [manifest.class_names[k] for k in range(len(manifest.class_names)) if k not in remap]
    if dropped:
        logger.info("dropping classes with < %d samples: %s", min_count, ", ".join(dropped))
    entries = [replace(e, label=remap[e.label]) for e in manifest.entries if e.label in remap]
    return DatasetManifest(entries, [manifest.class_names[k] for k in kept], manifest.root)


def load_dataset(manifest_path, min_class_count=0):
    manifest = load_manifest(manifest_path)
    if min_class_count:
        manifest = filter_min_class_count(manifest, min_class_count)
    return [load_sequence(e) for e in manifest.entries], manifest.class_names


def export_dataset(sequences, out_dir, class_names=None):
    """Write sequences as 8-bit PNG frame folders plus manifest.csv (and classes.txt)."""
    from PIL import Image

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    for i, seq in enumerate(sequences):
        rel = Path(seq.subject_id) / (seq.source_id.replace("/", "_") or f"seq{i:04d}")
        d = out_dir / rel
        d.mkdir(parents=True, exist_ok=True)
        for old in _frame_files(d):
            old.unlink()
        for t, frame in enumerate(seq.frames):
            img = np.rint(np.clip(frame, 0, 1) * 255).astype(np.uint8)
            if img.shape[0] == 1:
                Image.fromarray(img[0], mode="L").save(d / f"frame_{t:04d}.png")
            else:
                Image.fromarray(img[:3].transpose(1, 2, 0), mode="RGB").save(d / f"frame_{t:04d}.png")
        rows.append([rel.as_posix(), seq.subject_id, seq.label, seq.onset, seq.apex, seq.offset])
    with open(out_dir / "manifest.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(MANIFEST_HEADER)
        writer.writerows(rows)
    if class_names is not None:
        (out_dir / "classes.txt").write_text("\n".join(class_names) + "\n")
    return out_dir / "manifest.csv"


# ---------------------------------------------------------------- synthetic corpus


@dataclass(frozen=True)
class SynthConfig:
    n_subjects: int = 10
    samples_per_subject: int = 20
    n_classes: int = 3
    frame_size: int = 16
    sequence_length: int = 12
    noise_std: float = 0.05
    rng_seed: int = 7
    amplitude: float = 0.3

    def __post_init__(self):
        if not 2 <= self.n_classes <= MAX_CLASSES:
            raise ValueError(f"n_classes must be in 2..{MAX_CLASSES}, got {self.n_classes}")
        if self.sequence_length < 5:
            raise ValueError("sequence_length must be >= 5")
        if self.frame_size < 8:
            raise ValueError("frame_size must be >= 8")
        if self.n_subjects < 1 or self.samples_per_subject < 1:
            raise ValueError("need at least one subject and one sample per subject")
        if self.noise_std < 0:
            raise ValueError("noise_std must be >= 0")


def _gauss(yy, xx, cy, cx, sy, sx):
    return np.exp(-0.5 * (((yy - cy) / sy) ** 2 + ((xx - cx) / sx) ** 2))


# Each pattern is left-right symmetric so horizontal flips keep the class.
# Coordinates are in units of the frame size, centred on (0, 0).
_PATTERNS = [
    lambda y, x: _gauss(y, x, -0.22, 0.0, 0.07, 0.30),  # brow raise: upper horizontal bar
    lambda y, x: _gauss(y, x, 0.0, 0.0, 0.30, 0.07),  # nose wrinkle: central vertical bar
    lambda y, x: _gauss(y, x, 0.22, -0.22, 0.08, 0.08) + _gauss(y, x, 0.22, 0.22, 0.08, 0.08),  # lip corners
    lambda y, x: np.exp(-0.5 * ((np.hypot(y, x) - 0.28) / 0.05) ** 2),  # ring
    lambda y, x: _gauss(y, x, 0.0, 0.0, 0.07, 0.30) + _gauss(y, x, 0.0, 0.0, 0.30, 0.07),  # cross
    lambda y, x: _gauss(y, x, -0.2, -0.2, 0.08, 0.08) + _gauss(y, x, -0.2, 0.2, 0.08, 0.08),  # eye corners
    lambda y, x: _gauss(y, x, 0.25, 0.0, 0.07, 0.30),  # lower horizontal bar
    lambda y, x: _gauss(y, x, 0.0, 0.0, 0.12, 0.12),  # central blob
]


MOTION_KINDS = ("brighten", "darken", "displace")
MAX_CLASSES = len(MOTION_KINDS) * len(_PATTERNS)


def class_kind(k):
    """(motion kind, pattern index) of class ``k``: kinds cycle fastest."""
    return MOTION_KINDS[k % len(MOTION_KINDS)], k // len(MOTION_KINDS)


def class_mask(k, size, shift=(0.0, 0.0)):
    """Unit-peak spatial pattern of class ``k`` on a ``size`` x ``size`` grid."""
    coords = (np.arange(size) + 0.5) / size - 0.5
    yy, xx = np.meshgrid(coords - shift[0], coords - shift[1], indexing="ij")
    m = _PATTERNS[class_kind(k)[1]](yy, xx)
    return m / m.max()


def bell_profile(length, onset, apex, offset):
    """Raised-cosine intensity: 0 outside [onset, offset], 1 at the apex."""
    t = np.arange(length, dtype=np.float64)
    prof = np.zeros(length)
    rise = (t >= onset) & (t <= apex)
    fall = (t > apex) & (t <= offset)
    prof[rise] = 0.5 - 0.5 * np.cos(np.pi * (t[rise] - onset) / (apex - onset))
    prof[fall] = 0.5 + 0.5 * np.cos(np.pi * (t[fall] - apex) / (offset - apex))
    return prof


def synth_sequence(base, mask, amplitude, length, onset, apex, offset, noise_std, rng):
    """Frames ``base + amplitude * bell(t) * mask + noise``, clipped to [0, 1].

    A negative ``amplitude`` darkens the region instead of brightening it.
    """
    prof = bell_profile(length, onset, apex, offset)
    frames = base[None] + amplitude * prof[:, None, None] * mask[None]
    if noise_std > 0:
        frames = frames + rng.normal(0.0, noise_std, size=frames.shape)
    return np.clip(frames, 0.0, 1.0)[:, None].astype(np.float32)


def synth_displaced_sequence(base, k, size, shift, contrast, max_shift, length, onset, apex, offset, noise_std, rng):
    """A static feature of class ``k``'s shape that moves upward by ``max_shift * bell(t)``."""
    prof = bell_profile(length, onset, apex, offset)
    frames = np.stack(
        [base + contrast * class_mask(k, size, (shift[0] - max_shift * p, shift[1])) for p in prof]
    )
    if noise_std > 0:
        frames = frames + rng.normal(0.0, noise_std, size=frames.shape)
    return np.clip(frames, 0.0, 1.0)[:, None].astype(np.float32)


def _base_texture(rng, size):
    smooth = ndimage.gaussian_filter(rng.random((size, size)), sigma=size / 8.0, mode="wrap")
    smooth = (smooth - smooth.min()) / max(np.ptp(smooth), 1e-12)
    return 0.35 + 0.3 * smooth


def synth_generate(cfg):
    """Deterministic synthetic corpus; a pure function of ``cfg``.

    Each subject gets a smooth random base texture and a small offset of the
    class patterns. Class ``k`` brightens, darkens, or displaces a
    left-right-symmetric region (see ``class_kind``) with a bell-shaped
    intensity over time peaking at a random apex.
    """
    rng = np.random.default_rng(cfg.rng_seed)
    L, size = cfg.sequence_length, cfg.frame_size
    out = []
    for s in range(cfg.n_subjects):
        subject = f"s{s + 1:02d}"
        base = _base_texture(rng, size)
        shift = tuple(rng.uniform(-0.04, 0.04, size=2))
        for i in range(cfg.samples_per_subject):
            label = i % cfg.n_classes
            apex = int(rng.integers(2, L - 2))
            onset = int(rng.integers(max(0, apex - 5), apex - 1))
            offset = int(rng.integers(apex + 2, min(L - 1, apex + 5) + 1))
            amp = cfg.amplitude * rng.uniform(0.6, 1.0)
            kind, _ = class_kind(label)
            if kind == "displace":
                frames = synth_displaced_sequence(
                    base, label, size, shift, cfg.amplitude, amp, L, onset, apex, offset, cfg.noise_std, rng
                )
            else:
                sign = 1.0 if kind == "brighten" else -1.0
                mask = class_mask(label, size, shift)
                frames = synth_sequence(base, mask, sign * amp, L, onset, apex, offset, cfg.noise_std, rng)
            out.append(FrameSequence(frames, subject, label, onset, apex, offset, f"{subject}/e{i:02d}"))
    return out


def synth_class_names(n_classes):
    return [f"class{k}" for k in range(n_classes)]


# ---------------------------------------------------------------- augmentation


class AugOp(enum.Enum):
    HFLIP = "hflip"
    ROTATE = "rotate"


@dataclass(frozen=True)
class Augmentation:
    hflip: bool = False
    angle: float = 0.0  # degrees, counter-clockwise

    @property
    def is_identity(self):
        return not self.hflip and self.angle == 0.0


MAX_ROTATION_DEG = 10.0


def draw_augmentation(ops, rng):
    ops = {AugOp(o) for o in ops}
    hflip = bool(rng.random() < 0.5) if AugOp.HFLIP in ops else False
    angle = float(rng.uniform(-MAX_ROTATION_DEG, MAX_ROTATION_DEG)) if AugOp.ROTATE in ops else 0.0
    return Augmentation(hflip, angle)


def hflip(frames):
    return np.ascontiguousarray(np.asarray(frames)[..., ::-1])


def _rotation_gather(h, w, angle_deg):
    """Source indices and bilinear weights for rotating an h x w plane about its centre."""
    theta = np.deg2rad(angle_deg)
    c, s = np.cos(theta), np.sin(theta)
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    yy, xx = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    # inverse map: where each output pixel samples the input
    sy = np.clip(c * (yy - cy) + s * (xx - cx) + cy, 0, h - 1)
    sx = np.clip(-s * (yy - cy) + c * (xx - cx) + cx, 0, w - 1)
    y0, x0 = np.floor(sy).astype(int), np.floor(sx).astype(int)
    y1, x1 = np.minimum(y0 + 1, h - 1), np.minimum(x0 + 1, w - 1)
    fy, fx = sy - y0, sx - x0
    idx = [y0 * w + x0, y0 * w + x1, y1 * w + x0, y1 * w + x1]
    wts = [(1 - fy) * (1 - fx), (1 - fy) * fx, fy * (1 - fx), fy * fx]
    return idx, wts


def rotate(frames, angle_deg):
    """Rotate every H x W plane counter-clockwise about its centre.

    Bilinear interpolation; sample coordinates falling outside the plane are
    clamped to the edge.
    """
    frames = np.asarray(frames)
    if angle_deg == 0.0:
        return frames.copy()
    h, w = frames.shape[-2:]
    idx, wts = _rotation_gather(h, w, angle_deg)
    flat = frames.reshape(frames.shape[:-2] + (h * w,)).astype(np.float64)
    out = sum(wt * flat[..., ix] for ix, wt in zip(idx, wts))
    return out.astype(frames.dtype).reshape(frames.shape)


def apply_augmentation(seq, aug):
    frames = seq.frames
    if aug.hflip:
        frames = hflip(frames)
    if aug.angle != 0.0:
        frames = rotate(frames, aug.angle)
    return replace(seq, frames=frames)


def augment(seq, ops, rng):
    """Apply one randomly drawn transform identically to every frame."""
    return apply_augmentation(seq, draw_augmentation(ops, rng))


# ---------------------------------------------------------------- resizing


def _interp_matrix(n_out, n_in):
    # half-pixel centres, edge-clamped bilinear
    m = np.zeros((n_out, n_in))
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0, n_in - 1)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    m[np.arange(n_out), lo] += 1 - frac
    m[np.arange(n_out), hi] += frac
    return m


def resize(frame, height, width):
    """Bilinear resize of the last two axes of ``frame``."""
    if height < 1 or width < 1:
        raise ValueError("target size must be >= 1")
    frame = np.asarray(frame)
    h, w = frame.shape[-2:]
    if (h, w) == (height, width):
        return frame.copy()
    ry, rx = _interp_matrix(height, h), _interp_matrix(width, w)
    return np.einsum("ih,...hw,jw->...ij", ry, frame, rx).astype(frame.dtype, copy=False)


# ---------------------------------------------------------------- LOSO folds


@dataclass
class Fold:
    subject: str
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray


def stratified_holdout(indices, labels, fraction, rng):
    """Split ``indices`` into (keep, held) with ~``fraction`` of each class held out."""
    indices = np.asarray(indices)
    labels = np.asarray(labels)
    held = []
    for k in np.unique(labels):
        members = indices[labels == k]
        n_held = int(round(fraction * len(members)))
        if n_held >= len(members):
            n_held = len(members) - 1
        if n_held > 0:
            held.extend(rng.permutation(members)[:n_held].tolist())
    held = np.sort(np.asarray(held, dtype=int))
    keep = np.setdiff1d(indices, held)
    return keep, held


def loso_splits(dataset, seed=0, val_fraction=0.1):
    """One fold per subject: that subject's samples are the test set.

    The remaining samples are split into train/val by a class-stratified
    holdout drawn from a per-subject child seed.
    """
    from .seeding import derive_seed

    subjects = np.array([s.subject_id for s in dataset])
    labels = np.array([s.label for s in dataset])
    if len(np.unique(subjects)) < 2:
        raise DianetError("LOSO needs at least two distinct subjects")
    folds = []
    for rest, test in LeaveOneGroupOut().split(np.zeros(len(dataset)), labels, groups=subjects):
        subject = str(subjects[test[0]])
        rng = np.random.default_rng(derive_seed(seed, "val-split", subject))
        train, val = stratified_holdout(rest, labels[rest], val_fraction, rng)
        folds.append(Fold(subject, train, val, np.sort(test)))
    return folds
