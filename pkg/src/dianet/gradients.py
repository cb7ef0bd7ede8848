"""Finite-difference verification of the whole network and loss."""

from __future__ import annotations

import numpy as np

from .errors import DianetError
from .model import AttentionKind, BackboneConfig, FusionConfig, ModelConfig, dianet_forward, init_params, with_mode
from .ndcore import GradCheckReport, grad_check_params
from .ndcore.gradcheck import analytic_gradients, numeric_gradients, sample_coordinates
from .objective import total_loss


def check_config(n_classes=3, size=16, d=32, attention=AttentionKind.CROSS, stages=((4, 3, 1), (6, 3, 1))):
    """Small network used for gradient checks; dropout off so the loss is deterministic."""
    cfg = ModelConfig(
        n_classes=n_classes,
        input_size=(size, size),
        backbone=BackboneConfig(stages=tuple(stages), feature_dim=d),
        fusion=FusionConfig(n_tokens=4),
        dropout=0.0,
    )
    return with_mode(cfg, attention=attention)


def _inputs_and_loss(config, params, labels, lam, rng, batch):
    shape = (batch, config.backbone.in_channels) + tuple(config.input_size)
    on, off = rng.random(shape), rng.random(shape)

    def loss_fn(p=params):
        logits, f1, f2 = dianet_forward(on, off, p)
        return total_loss(logits, labels, f1, f2, lam)[0]

    return loss_fn


def full_gradient_check(config=None, seed=0, step=1e-4, tolerance=1e-5, batch=2, lam=0.1, max_coords=16, max_draws=50):
    """64-bit analytic vs central-difference gradients of total_loss for every parameter tensor.

    Random rasters are redrawn until no sampled stencil flips a relu, so each
    difference quotient is taken on one smooth piece of the loss. Returns the
    GradCheckReport and the number of draws used.
    """
    config = config or check_config()
    params = init_params(config, seed=seed, dtype=np.float64)
    labels = np.arange(batch) % config.n_classes
    rng = np.random.default_rng(seed)
    for draw in range(1, max_draws + 1):
        loss_fn = _inputs_and_loss(config, params, labels, lam, rng, batch)
        report = grad_check_params(
            loss_fn,
            params.tensors,
            step=step,
            tolerance=tolerance,
            max_coords=max_coords,
            rng=np.random.default_rng(seed),
            kink_ops=("relu",),
        )
        if report.n_kinked == 0:
            return report, draw
    raise DianetError(f"every one of {max_draws} inputs had a stencil crossing a relu kink")


def single_precision_check(config=None, seed=0, step=1e-4, tolerance=1e-3, batch=2, lam=0.1, max_coords=16, max_draws=50):
    """32-bit analytic gradients against a 64-bit central-difference oracle.

    Differencing a float32 loss is dominated by rounding, so the oracle runs on
    an exact float64 copy of the same float32 parameters. Errors are measured
    per tensor as ||a - n|| / max(||a||, ||n||) because single-precision
    cancellation makes coordinates far below the tensor's scale meaningless.
    """
    config = config or check_config()
    p32 = init_params(config, seed=seed, dtype=np.float32)
    p64 = p32.astype(np.float64)
    labels = np.arange(batch) % config.n_classes
    rng = np.random.default_rng(seed)
    coords = sample_coordinates(p64.tensors, max_coords, np.random.default_rng(seed))
    for _ in range(max_draws):
        loss_fn = _inputs_and_loss(config, p64, labels, lam, rng, batch)
        numeric, n_kinked = numeric_gradients(loss_fn, p64.tensors, coords, step, kink_ops=("relu",))
        if n_kinked == 0:
            break
    else:
        raise DianetError(f"every one of {max_draws} inputs had a stencil crossing a relu kink")
    analytic = analytic_gradients(lambda: loss_fn(p32), p32.tensors)
    per_param = {}
    for name, idx in coords.items():
        a = analytic[name].reshape(-1)[idx].astype(np.float64)
        n = numeric[name]
        per_param[name] = float(np.linalg.norm(a - n) / max(np.linalg.norm(a), np.linalg.norm(n), 1e-12))
    worst = max(per_param, key=per_param.get)
    n_checked = sum(len(i) for i in coords.values())
    return GradCheckReport(per_param[worst], tolerance, n_checked, worst, per_param)
