"""Central finite-difference gradient checking."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor, _topological_order

# Relative errors are measured against max(|analytic|, |numeric|, REL_FLOOR) so
# coordinates whose true gradient is ~0 are judged on absolute error instead.
REL_FLOOR = 1e-6


@dataclass
class GradCheckReport:
    max_rel_error: float
    tolerance: float
    n_checked: int
    worst: str = ""
    per_param: dict = field(default_factory=dict)
    n_kinked: int = 0  # coordinates whose stencil switched a kink op (only when tracked)

    @property
    def passed(self):
        return self.max_rel_error < self.tolerance

    def __str__(self):
        status = "PASS" if self.passed else "FAIL"
        return (
            f"{status} max_rel_error={self.max_rel_error:.3e} (tol {self.tolerance:.0e}) "
            f"over {self.n_checked} coordinates; worst at {self.worst}; {self.n_kinked} stencils crossed a kink"
        )


def relative_error(analytic, numeric, floor=REL_FLOOR):
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def _kink_inputs(root, ops):
    return [parent.data for node in _topological_order(root) if node._op in ops for parent in node._parents]


def kink_pattern(root, ops=("relu",)):
    """Sign pattern of every input to an ``ops`` node, as one boolean vector."""
    parts = [(x > 0).ravel() for x in _kink_inputs(root, ops)]
    return np.concatenate(parts) if parts else np.zeros(0, bool)


def kink_margin(root, ops=("relu",)):
    """Smallest |input| to any ``ops`` node in the graph of ``root``; inf if none.

    Central differences are only meaningful when no perturbation in the stencil
    pushes an input across a kink at 0, so callers pick points with a margin
    comfortably larger than the step.
    """
    return min((float(np.abs(x).min()) for x in _kink_inputs(root, ops)), default=np.inf)


def sample_coordinates(params, max_coords=None, rng=None):
    """Flat indices to check per tensor: all of them, or ``max_coords`` sampled."""
    out = {}
    for name, p in params.items():
        idx = np.arange(p.size)
        if max_coords is not None and p.size > max_coords:
            idx = (rng or np.random.default_rng(0)).choice(p.size, size=max_coords, replace=False)
        out[name] = idx
    return out


def numeric_gradients(loss_fn, params, coords, step=1e-4, kink_ops=None):
    """Central differences of ``loss_fn()`` at ``coords``; returns ``(grads, n_kinked)``.

    With ``kink_ops`` (e.g. ``("relu",)``) a coordinate counts as kinked when its
    plus or minus evaluation changes the sign pattern at those ops.
    """
    base = kink_pattern(loss_fn(), kink_ops) if kink_ops else None
    n_kinked, kinked = 0, False

    def evaluate():
        nonlocal kinked
        out = loss_fn()
        if base is not None and not np.array_equal(kink_pattern(out, kink_ops), base):
            kinked = True
        return out.item()

    grads = {}
    for name, idx in coords.items():
        flat = params[name].data.reshape(-1)
        numeric = np.empty(len(idx))
        for j, i in enumerate(idx):
            orig, kinked = flat[i], False
            flat[i] = orig + step
            plus = evaluate()
            flat[i] = orig - step
            minus = evaluate()
            flat[i] = orig
            n_kinked += kinked
            numeric[j] = (plus - minus) / (2 * step)
        grads[name] = numeric
    return grads, n_kinked


def analytic_gradients(loss_fn, params):
    for p in params.values():
        p.requires_grad = True
        p.grad = None
    loss_fn().backward()
    return {name: (p.grad if p.grad is not None else np.zeros_like(p.data)).copy() for name, p in params.items()}


def grad_check_params(loss_fn, params, step=1e-4, tolerance=1e-5, max_coords=None, rng=None, kink_ops=None):
    """Compare backward() gradients of ``loss_fn()`` with central differences.

    ``params`` maps names to Tensors that ``loss_fn`` reads. When ``max_coords``
    is given, that many coordinates are sampled per tensor instead of all.
    ``kink_ops`` enables the kinked-stencil count (see ``numeric_gradients``).
    """
    params = dict(params)
    analytic = analytic_gradients(loss_fn, params)
    coords = sample_coordinates(params, max_coords, rng)
    numeric, n_kinked = numeric_gradients(loss_fn, params, coords, step, kink_ops)
    worst_err, worst_at, n_checked, per_param = 0.0, "", 0, {}
    for name, idx in coords.items():
        errs = relative_error(analytic[name].reshape(-1)[idx], numeric[name])
        n_checked += len(idx)
        per_param[name] = float(errs.max()) if len(errs) else 0.0
        if len(errs) and errs.max() > worst_err:
            worst_err = float(errs.max())
            worst_at = f"{name}[{int(idx[int(errs.argmax())])}]"
    return GradCheckReport(worst_err, tolerance, n_checked, worst_at, per_param, n_kinked)


def grad_check(f, point, step=1e-4, tolerance=1e-5):
    """Check a scalar function of one array; ``f`` maps a Tensor to a scalar Tensor."""
    x = Tensor(np.array(point, dtype=np.float64, copy=True), requires_grad=True)
    return grad_check_params(lambda: f(x), {"x": x}, step=step, tolerance=tolerance)
