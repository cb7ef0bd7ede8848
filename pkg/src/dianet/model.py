"""Dual-stream dynamic-image network with cross-attention fusion.

Two small CNN backbones map the onset and offset dynamic images to feature
vectors f1 and f2. The fusion block splits each d-vector into ``n_tokens``
tokens of ``d / n_tokens`` dims, lets each stream attend to the other through
learned query/key/value projections, concatenates both attended grids and
projects back to d. A two-layer MLP head produces class logits.
"""

from __future__ import annotations

import enum
import json
import math
import struct
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import DataFormatError, ShapeError
from .ndcore import (
    Tensor,
    avg_pool2d,
    concat_lastdim,
    conv2d,
    dropout,
    flatten,
    matmul,
    mean_over_axis,
    relu,
    reshape,
    scale,
    sigmoid,
    softmax_lastdim,
    sum_,
    swapaxes,
)


class StreamMode(enum.Enum):
    DUAL_PHASE = "dual_phase"  # DI-Onset + DI-Offset, two streams
    DUAL_FULL = "dual_full"  # full-sequence DI fed to both streams
    SINGLE_FULL = "single_full"
    SINGLE_ONSET = "single_onset"
    SINGLE_OFFSET = "single_offset"

    @property
    def dual(self):
        return self in (StreamMode.DUAL_PHASE, StreamMode.DUAL_FULL)

    @property
    def phases(self):
        """Dynamic-image phases consumed by stream 1 and (if dual) stream 2."""
        return {
            StreamMode.DUAL_PHASE: ("onset", "offset"),
            StreamMode.DUAL_FULL: ("full", "full"),
            StreamMode.SINGLE_FULL: ("full",),
            StreamMode.SINGLE_ONSET: ("onset",),
            StreamMode.SINGLE_OFFSET: ("offset",),
        }[self]


class AttentionKind(enum.Enum):
    CROSS = "cross"
    SIMPLE = "simple"


@dataclass(frozen=True)
class BackboneConfig:
    stages: tuple = ((8, 3, 1), (16, 3, 1))  # (out_channels, kernel, stride)
    feature_dim: int = 64
    in_channels: int = 1
    pool: int = 2
    standardize: bool = True  # per-image zero mean, unit variance before the first conv


@dataclass(frozen=True)
class FusionConfig:
    n_tokens: int = 8
    attention: AttentionKind = AttentionKind.CROSS

    def token_dim(self, d):
        return d // self.n_tokens


@dataclass(frozen=True)
class ModelConfig:
    n_classes: int
    input_size: tuple = (32, 32)
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    fusion: FusionConfig = field(default_factory=FusionConfig)
    hidden: int | None = None
    dropout: float = 0.3
    stream_mode: StreamMode = StreamMode.DUAL_PHASE
    tie_backbones: bool = False

    def __post_init__(self):
        d = self.backbone.feature_dim
        if self.n_classes < 2:
            raise ValueError("need at least two classes")
        if self.fusion.n_tokens < 1 or d % self.fusion.n_tokens:
            raise ValueError(f"feature_dim {d} is not divisible into {self.fusion.n_tokens} tokens")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must lie in [0, 1), got {self.dropout}")

    @property
    def d(self):
        return self.backbone.feature_dim

    @property
    def hidden_width(self):
        return self.hidden or self.d

    def to_dict(self):
        out = asdict(self)
        out["stream_mode"] = self.stream_mode.value
        out["fusion"]["attention"] = self.fusion.attention.value
        out["backbone"]["stages"] = [list(s) for s in self.backbone.stages]
        out["input_size"] = list(self.input_size)
        return out

    @classmethod
    def from_dict(cls, raw):
        raw = dict(raw)
        bb = dict(raw.pop("backbone"))
        bb["stages"] = tuple(tuple(s) for s in bb["stages"])
        fu = dict(raw.pop("fusion"))
        fu["attention"] = AttentionKind(fu["attention"])
        return cls(
            backbone=BackboneConfig(**bb),
            fusion=FusionConfig(**fu),
            stream_mode=StreamMode(raw.pop("stream_mode")),
            input_size=tuple(raw.pop("input_size")),
            **raw,
        )


@dataclass
class DianetParams:
    config: ModelConfig
    tensors: dict

    def __getitem__(self, name):
        return self.tensors[name]

    def parameters(self):
        return list(self.tensors.values())

    def count(self):
        return int(sum(t.size for t in self.tensors.values()))

    def copy(self):
        return DianetParams(
            self.config,
            {k: Tensor(v.data.copy(), requires_grad=v.requires_grad) for k, v in self.tensors.items()},
        )

    def astype(self, dtype):
        return DianetParams(
            self.config,
            {k: Tensor(v.data.astype(dtype), requires_grad=v.requires_grad) for k, v in self.tensors.items()},
        )

    def stream_prefix(self, stream):
        if stream == 1 or self.config.tie_backbones:
            return "bb1"
        return "bb2"


def _uniform(rng, shape, fan_in, gain, dtype):
    bound = gain * math.sqrt(3.0 / fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape).astype(dtype), requires_grad=True)


def _zeros(shape, dtype):
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)


def init_params(config, seed=0, dtype=np.float32):
    """Seeded fan-in-scaled uniform weights and zero biases."""
    rng = np.random.default_rng(seed)
    relu_gain = math.sqrt(2.0)
    d, h, k_cls = config.d, config.hidden_width, config.n_classes
    t = {}
    n_backbones = 2 if config.stream_mode.dual and not config.tie_backbones else 1
    for b in range(1, n_backbones + 1):
        c_in = config.backbone.in_channels
        for i, (c_out, k, _stride) in enumerate(config.backbone.stages):
            fan_in = c_in * k * k
            t[f"bb{b}.conv{i}.w"] = _uniform(rng, (c_out, c_in, k, k), fan_in, relu_gain, dtype)
            t[f"bb{b}.conv{i}.b"] = _zeros((c_out,), dtype)
            c_in = c_out
        t[f"bb{b}.fc.w"] = _uniform(rng, (c_in, d), c_in, 1.0, dtype)
        t[f"bb{b}.fc.b"] = _zeros((d,), dtype)
    if config.stream_mode.dual:
        if config.fusion.attention is AttentionKind.CROSS:
            tok = config.fusion.token_dim(d)
            for name in ("wq1", "wk1", "wv1", "wq2", "wk2", "wv2"):
                t[f"fuse.{name}"] = _uniform(rng, (tok, tok), tok, 1.0, dtype)
            t["fuse.proj.w"] = _uniform(rng, (2 * d, d), 2 * d, 1.0, dtype)
            t["fuse.proj.b"] = _zeros((d,), dtype)
    else:
        t["single.w"] = _uniform(rng, (d, d), d, 1.0, dtype)
        t["single.b"] = _zeros((d,), dtype)
    t["head.fc1.w"] = _uniform(rng, (d, h), d, relu_gain, dtype)
    t["head.fc1.b"] = _zeros((h,), dtype)
    t["head.fc2.w"] = _uniform(rng, (h, k_cls), h, 1.0, dtype)
    t["head.fc2.b"] = _zeros((k_cls,), dtype)
    return DianetParams(config, t)


def param_count(config):
    """Closed-form parameter count; equals ``init_params(config).count()``."""
    d, h, k_cls = config.d, config.hidden_width, config.n_classes
    per_backbone, c_in = 0, config.backbone.in_channels
    for c_out, k, _ in config.backbone.stages:
        per_backbone += c_out * c_in * k * k + c_out
        c_in = c_out
    per_backbone += c_in * d + d
    dual = config.stream_mode.dual
    total = per_backbone * (2 if dual and not config.tie_backbones else 1)
    if dual and config.fusion.attention is AttentionKind.CROSS:
        tok = config.fusion.token_dim(d)
        total += 6 * tok * tok + 2 * d * d + d
    elif not dual:
        total += d * d + d
    return total + d * h + h + h * k_cls + k_cls


def _batch_input(x, config, dtype):
    arr = x.data if isinstance(x, Tensor) else np.asarray(x)
    single = arr.ndim == 3
    if single:
        arr = arr[None]
    expected = (config.backbone.in_channels,) + tuple(config.input_size)
    if arr.ndim != 4 or arr.shape[1:] != expected:
        raise ShapeError(f"input raster shape {arr.shape[1:]} does not match configured {expected}")
    return Tensor(arr.astype(dtype, copy=False)), single


def standardize_images(x, eps=1e-6):
    """Per-image zero mean and unit variance over (C, H, W); constant images map to 0."""
    axes = tuple(range(1, x.ndim))
    centred = x - x.mean(axis=axes, keepdims=True)
    std = np.sqrt((centred * centred).mean(axis=axes, keepdims=True))
    return (centred / np.maximum(std, eps)).astype(x.dtype, copy=False)


def backbone_forward(x, params, stream=1):
    """conv -> relu -> avg-pool stages, global average pool, affine to d dims.

    ``x`` is a normalized raster (C x H x W) or a batch of them.
    """
    cfg = params.config
    prefix = params.stream_prefix(stream)
    h, single = _batch_input(x, cfg, params[f"{prefix}.fc.w"].dtype)
    if cfg.backbone.standardize:
        h = Tensor(standardize_images(h.data))
    for i, (_c_out, k, stride) in enumerate(cfg.backbone.stages):
        w, b = params[f"{prefix}.conv{i}.w"], params[f"{prefix}.conv{i}.b"]
        h = relu(conv2d(h, w, stride=stride, pad=k // 2) + reshape(b, (-1, 1, 1)))
        if cfg.backbone.pool > 1 and min(h.shape[-2:]) >= cfg.backbone.pool:
            h = avg_pool2d(h, cfg.backbone.pool)
    h = mean_over_axis(h, axis=(2, 3))
    f = matmul(h, params[f"{prefix}.fc.w"]) + params[f"{prefix}.fc.b"]
    return reshape(f, (f.shape[-1],)) if single else f


def _as_batch(f):
    return (reshape(f, (1, f.shape[-1])), True) if f.ndim == 1 else (f, False)


def cross_attention_fuse(f1, f2, params, return_parts=False):
    """Bidirectional token cross-attention between the two stream features."""
    cfg = params.config
    n_tok = cfg.fusion.n_tokens
    tok = cfg.fusion.token_dim(cfg.d)
    f1, single = _as_batch(f1)
    f2, _ = _as_batch(f2)
    if f1.shape != f2.shape or f1.shape[-1] != cfg.d:
        raise ShapeError(f"fusion inputs {f1.shape}, {f2.shape} do not match d={cfg.d}")
    t1 = reshape(f1, (-1, n_tok, tok))
    t2 = reshape(f2, (-1, n_tok, tok))
    p = {n: params[f"fuse.{n}"] for n in ("wq1", "wk1", "wv1", "wq2", "wk2", "wv2")}
    q1, k1, v1 = matmul(t1, p["wq1"]), matmul(t1, p["wk1"]), matmul(t1, p["wv1"])
    q2, k2, v2 = matmul(t2, p["wq2"]), matmul(t2, p["wk2"]), matmul(t2, p["wv2"])
    inv = 1.0 / math.sqrt(tok)
    w12 = softmax_lastdim(scale(matmul(q1, swapaxes(k2)), inv))
    w21 = softmax_lastdim(scale(matmul(q2, swapaxes(k1)), inv))
    a12 = matmul(w12, v2)  # stream 1 attending to stream 2
    a21 = matmul(w21, v1)
    cat = concat_lastdim([flatten(a12), flatten(a21)])
    fused = matmul(cat, params["fuse.proj.w"]) + params["fuse.proj.b"]
    if single:
        fused = reshape(fused, (cfg.d,))
    if return_parts:
        return fused, {"w12": w12, "w21": w21, "a12": a12, "a21": a21, "v1": v1, "v2": v2}
    return fused


def simple_attention_fuse(f1, f2, params=None):
    """Baseline without learned projections.

    g = sigmoid(f1 . f2 / sqrt(d)); each stream adds the gated other stream as a
    residual and the two results are averaged: ((f1 + g f2) + (f2 + g f1)) / 2.
    """
    f1, single = _as_batch(f1)
    f2, _ = _as_batch(f2)
    if f1.shape != f2.shape:
        raise ShapeError(f"fusion inputs {f1.shape}, {f2.shape} differ")
    d = f1.shape[-1]
    g12 = reshape(sigmoid(scale(sum_(f1 * f2, axis=-1), 1.0 / math.sqrt(d))), (-1, 1))
    g21 = reshape(sigmoid(scale(sum_(f2 * f1, axis=-1), 1.0 / math.sqrt(d))), (-1, 1))
    out = scale((f1 + g12 * f2) + (f2 + g21 * f1), 0.5)
    return reshape(out, (d,)) if single else out


def fuse(f1, f2, params):
    if params.config.fusion.attention is AttentionKind.CROSS:
        return cross_attention_fuse(f1, f2, params)
    return simple_attention_fuse(f1, f2, params)


def classify(fused, params, training=False, rng=None):
    """affine -> relu -> dropout -> affine; returns raw logits."""
    h = relu(matmul(_as_batch(fused)[0], params["head.fc1.w"]) + params["head.fc1.b"])
    h = dropout(h, params.config.dropout, training, rng)
    logits = matmul(h, params["head.fc2.w"]) + params["head.fc2.b"]
    return reshape(logits, (logits.shape[-1],)) if fused.ndim == 1 else logits


def dianet_forward(di_1, di_2, params, training=False, rng=None):
    """Return ``(logits, f1, f2)``; ``f2`` is None in single-stream modes."""
    cfg = params.config
    f1 = backbone_forward(di_1, params, stream=1)
    if cfg.stream_mode.dual:
        f2 = backbone_forward(di_2, params, stream=2)
        fused = fuse(f1, f2, params)
    else:
        f2 = None
        fused = matmul(_as_batch(f1)[0], params["single.w"]) + params["single.b"]
        if f1.ndim == 1:
            fused = reshape(fused, (cfg.d,))
    return classify(fused, params, training, rng), f1, f2


def predict_proba(logits):
    z = np.asarray(logits.data if isinstance(logits, Tensor) else logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def predict(logits):
    """Argmax with lowest-index tie-breaking."""
    z = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    return np.argmax(z, axis=-1)


def mirrored(params):
    """Swap every stream-1 parameter with its stream-2 counterpart."""
    cfg = params.config
    t = dict(params.tensors)
    out = dict(t)
    for a, b in (("wq1", "wq2"), ("wk1", "wk2"), ("wv1", "wv2")):
        out[f"fuse.{a}"], out[f"fuse.{b}"] = t[f"fuse.{b}"], t[f"fuse.{a}"]
    if "fuse.proj.w" in t:
        w = t["fuse.proj.w"].data
        out["fuse.proj.w"] = Tensor(np.concatenate([w[cfg.d :], w[: cfg.d]]), requires_grad=True)
    if not cfg.tie_backbones:
        for name in [k for k in t if k.startswith("bb1.")]:
            other = "bb2." + name[4:]
            if other in t:
                out[name], out[other] = t[other], t[name]
    return DianetParams(cfg, out)


# ---------------------------------------------------------------- checkpoints

_BLOB_MAGIC = b"DPB1"


def write_param_blob(path, tensors):
    """Named float32 tensors: magic, u32 count, then per entry
    u32 name length, utf-8 name, u32 ndim, u32 extents, float32 LE data."""
    with open(path, "wb") as fh:
        fh.write(_BLOB_MAGIC)
        fh.write(struct.pack("<I", len(tensors)))
        for name in sorted(tensors):
            arr = np.asarray(tensors[name].data if isinstance(tensors[name], Tensor) else tensors[name])
            raw = name.encode()
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def read_param_blob(path):
    blob = Path(path).read_bytes()
    if blob[:4] != _BLOB_MAGIC:
        raise DataFormatError(f"{path}: not a parameter blob")
    pos = 4
    (count,) = struct.unpack_from("<I", blob, pos)
    pos += 4
    out = {}
    for _ in range(count):
        (n,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        name = blob[pos : pos + n].decode()
        pos += n
        (ndim,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        shape = struct.unpack_from(f"<{ndim}I", blob, pos)
        pos += 4 * ndim
        size = int(np.prod(shape)) if ndim else 1
        out[name] = np.frombuffer(blob, dtype="<f4", count=size, offset=pos).reshape(shape).copy()
        pos += 4 * size
    if pos != len(blob):
        raise DataFormatError(f"{path}: trailing bytes after {count} entries")
    return out


def save_checkpoint(directory, params, class_names=None, seed=None, extra=None):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    manifest = {
        "format": "dianet-checkpoint/1",
        "config": params.config.to_dict(),
        "seed": seed,
        "class_names": list(class_names) if class_names is not None else None,
        "param_count": params.count(),
    }
    if extra:
        manifest.update(extra)
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    write_param_blob(directory / "params.bin", params.tensors)
    return directory


def load_checkpoint(directory):
    """Return ``(params, manifest_dict)``."""
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    config = ModelConfig.from_dict(manifest["config"])
    arrays = read_param_blob(directory / "params.bin")
    expected = init_params(config, seed=0)
    if set(arrays) != set(expected.tensors):
        raise DataFormatError(f"{directory}: parameter names do not match the stored config")
    for name, arr in arrays.items():
        if arr.shape != expected[name].shape:
            raise DataFormatError(f"{directory}: {name} has shape {arr.shape}, expected {expected[name].shape}")
    tensors = {k: Tensor(v, requires_grad=True) for k, v in arrays.items()}
    return DianetParams(config, tensors), manifest


def with_mode(config, stream_mode=None, attention=None):
    """Copy of ``config`` with a different stream mode and/or attention kind."""
    out = config
    if stream_mode is not None:
        out = replace(out, stream_mode=StreamMode(stream_mode))
    if attention is not None:
        out = replace(out, fusion=replace(out.fusion, attention=AttentionKind(attention)))
    return out
