"""Phase-aware dynamic images by approximate rank pooling.

A dynamic image is the weighted frame sum ``sum_t w[t] * F_t`` with linear
weights ``w[t] = 2t - T - 1`` (forward) or ``T + 1 - 2t`` (reversed), t = 1..T.
Raw pixel values serve as the per-frame features.
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import (
    DataFormatError,
    DegeneratePhaseError,
    OffsetDegenerateError,
    OnsetDegenerateError,
    ShapeError,
)


class Phase(enum.Enum):
    FULL = "full"
    ONSET_APEX = "onset"
    APEX_OFFSET = "offset"


class Direction(enum.Enum):
    FORWARD = "forward"
    REVERSED = "reversed"


class NormMode(enum.Enum):
    PER_CHANNEL = "per_channel"
    GLOBAL = "global"


@dataclass
class DynamicImage:
    phase: Phase
    raster: np.ndarray  # C x H x W, float64, unnormalized
    source_id: str = ""

    @property
    def shape(self):
        return self.raster.shape


@dataclass
class PhaseSegment:
    frames: np.ndarray  # T x C x H x W
    role: Phase

    def __post_init__(self):
        self.frames = np.asarray(self.frames)
        if self.frames.ndim != 4:
            raise ShapeError(f"segment frames must be T x C x H x W, got {self.frames.shape}")
        if len(self.frames) < 2:
            raise DegeneratePhaseError(f"{self.role.value} segment has {len(self.frames)} frame(s); need >= 2")

    @property
    def T(self):
        return len(self.frames)


def arp_weights(T, direction=Direction.FORWARD):
    """Integer rank-pooling weights for a segment of ``T`` frames."""
    if T < 2:
        raise DegeneratePhaseError(f"rank pooling needs T >= 2, got {T}")
    t = np.arange(1, T + 1, dtype=np.int64)
    if Direction(direction) is Direction.FORWARD:
        return 2 * t - T - 1
    return T + 1 - 2 * t


def pool_frames(frames, direction=Direction.FORWARD):
    """Weighted frame sum in one ascending-t pass, accumulated in float64.

    Each product ``w[t] * F_t`` of a float32 frame and a small integer weight is
    exact in float64, so the result matches any per-pixel evaluation of the same
    ascending sum bit for bit.
    """
    w = arp_weights(len(frames), direction)
    first = np.asarray(frames[0])
    acc = np.zeros(first.shape, dtype=np.float64)
    for wt, frame in zip(w, frames):
        frame = np.asarray(frame)
        if frame.shape != first.shape:
            raise ShapeError(f"frame shape {frame.shape} differs from {first.shape} mid-stream")
        acc += float(wt) * frame.astype(np.float64)
    return acc


_ROLE_DIRECTION = {
    Phase.ONSET_APEX: Direction.FORWARD,
    Phase.APEX_OFFSET: Direction.REVERSED,
    Phase.FULL: Direction.FORWARD,
}


def pool(segment, direction=None, source_id=""):
    """Rank-pool a segment. The direction defaults to the one paired with its role."""
    direction = _ROLE_DIRECTION[segment.role] if direction is None else Direction(direction)
    return DynamicImage(segment.role, pool_frames(segment.frames, direction), source_id)


def split_phases(seq):
    """Return the onset->apex and apex->offset segments; the apex frame is in both."""
    n = len(seq.frames)
    onset, apex, offset = seq.onset, seq.apex, seq.offset
    sid = getattr(seq, "source_id", "")
    if not 0 <= onset <= apex <= offset < n:
        raise DegeneratePhaseError(
            f"annotations onset={onset} apex={apex} offset={offset} invalid for {n} frames", sid
        )
    if apex - onset < 1:
        raise OnsetDegenerateError(f"{sid or 'sequence'}: apex == onset ({apex}), onset phase is empty", sid)
    if offset - apex < 1:
        raise OffsetDegenerateError(f"{sid or 'sequence'}: apex == offset ({apex}), offset phase is empty", sid)
    return (
        PhaseSegment(seq.frames[onset : apex + 1], Phase.ONSET_APEX),
        PhaseSegment(seq.frames[apex : offset + 1], Phase.APEX_OFFSET),
    )


def di_onset(seq):
    seg, _ = split_phases(seq)
    return pool(seg, Direction.FORWARD, getattr(seq, "source_id", ""))


def di_offset(seq):
    _, seg = split_phases(seq)
    return pool(seg, Direction.REVERSED, getattr(seq, "source_id", ""))


def di_full(seq):
    return pool(PhaseSegment(seq.frames, Phase.FULL), Direction.FORWARD, getattr(seq, "source_id", ""))


def dynamic_image(seq, phase):
    phase = Phase(phase)
    if phase is Phase.ONSET_APEX:
        return di_onset(seq)
    if phase is Phase.APEX_OFFSET:
        return di_offset(seq)
    return di_full(seq)


def normalize(di, mode=NormMode.PER_CHANNEL):
    """Min-max scale a raster to [0, 1]; a constant channel (or image) maps to 0.5."""
    x = di.raster if isinstance(di, DynamicImage) else np.asarray(di, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise ValueError("cannot normalize a non-finite raster")
    axes = (1, 2) if NormMode(mode) is NormMode.PER_CHANNEL else None
    lo = x.min(axis=axes, keepdims=True)
    hi = x.max(axis=axes, keepdims=True)
    span = hi - lo
    safe = np.where(span > 0, span, 1.0)
    return np.where(span > 0, (x - lo) / safe, 0.5)


# ---------------------------------------------------------------- DIR1 files

_DIR1_MAGIC = b"DIR1"


def write_dir1(path, raster):
    """Write a C x H x W raster: magic, three u32 LE extents, float32 LE data."""
    raster = np.asarray(raster)
    if raster.ndim != 3:
        raise ShapeError(f"DIR1 rasters are C x H x W, got {raster.shape}")
    with open(path, "wb") as fh:
        fh.write(_DIR1_MAGIC)
        fh.write(struct.pack("<3I", *raster.shape))
        fh.write(np.ascontiguousarray(raster, dtype="<f4").tobytes())


def read_dir1(path):
    blob = Path(path).read_bytes()
    if blob[:4] != _DIR1_MAGIC or len(blob) < 16:
        raise DataFormatError(f"{path}: not a DIR1 file")
    c, h, w = struct.unpack("<3I", blob[4:16])
    body = blob[16:]
    if len(body) != 4 * c * h * w:
        raise DataFormatError(f"{path}: expected {c * h * w} values, found {len(body) // 4}")
    return np.frombuffer(body, dtype="<f4").reshape(c, h, w).astype(np.float32)


def write_png(path, normalized):
    """8-bit PNG of a normalized raster (1 or 3 channels)."""
    from PIL import Image

    x = np.clip(np.asarray(normalized), 0.0, 1.0)
    img = np.rint(x * 255).astype(np.uint8)
    if img.shape[0] == 1:
        Image.fromarray(img[0], mode="L").save(path)
    elif img.shape[0] == 3:
        Image.fromarray(img.transpose(1, 2, 0), mode="RGB").save(path)
    else:
        raise ShapeError(f"PNG export supports 1 or 3 channels, got {img.shape[0]}")
