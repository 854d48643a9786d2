"""Central finite-difference gradient checking."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from .tensor import Tensor


def _central(f: Callable[[], Tensor], flat: np.ndarray, i: int, step: float) -> float:
    orig = flat[i]
    flat[i] = orig + step
    fp = f().item()
    flat[i] = orig - step
    fm = f().item()
    flat[i] = orig
    return (fp - fm) / (2.0 * step)


def numerical_grad(f: Callable[[], Tensor], param: Tensor, step: float = 1e-5,
                   max_entries: int | None = None, rng: np.random.Generator | None = None):
    """Central differences of scalar ``f()`` w.r.t. ``param.data``.

    With ``max_entries`` only a random subset of coordinates is perturbed;
    returns (flat indices, derivative estimates).
    """
    flat = param.data.reshape(-1)
    idx = np.arange(flat.size)
    if max_entries is not None and flat.size > max_entries:
        rng = rng or np.random.default_rng(0)
        idx = np.sort(rng.choice(flat.size, size=max_entries, replace=False))
    est = np.array([_central(f, flat, int(i), step) for i in idx])
    return idx, est


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / denom)


@dataclass
class GradReport:
    errors: dict[str, float]
    checked: dict[str, int] = field(default_factory=dict)
    skipped: dict[str, int] = field(default_factory=dict)
    # tensors whose true gradient is zero to within finite-difference
    # round-off: name -> (max |analytic - numeric|, round-off bound)
    vanishing: dict[str, tuple[float, float]] = field(default_factory=dict)

    @property
    def worst(self) -> float:
        return max(self.errors.values()) if self.errors else 0.0


def gradient_report(f: Callable[[], Tensor], params: Mapping[str, Tensor], step: float = 1e-5,
                    max_entries: int | None = None, seed: int = 0,
                    skip_kinks: bool = False, kink_tol: float = 1e-6) -> GradReport:
    """Compare reverse-mode gradients of ``f`` against central differences.

    With ``skip_kinks`` each probed coordinate is also differenced with
    ``step / 10``. If the two estimates disagree by more than ``kink_tol``
    (relative, with the scale floored at 1e-3 to stay above round-off) a
    relu kink lies inside the stencil, so the coordinate is replaced by
    another random one. At smooth points the estimates agree to ~1e-9.
    Skipped coordinates are counted in the report.

    A relative error is meaningless when the true gradient is zero (both
    estimates are then pure round-off), so a tensor whose analytic and
    numeric values all sit below the central-difference round-off bound
    ``64 * eps * max(|f|, 1) / step`` goes to ``vanishing`` instead of
    ``errors``.
    """
    for p in params.values():
        p.grad = None
    out = f()
    out.backward()
    noise = 64 * np.finfo(float).eps * max(abs(float(out.item())), 1.0) / step
    analytic = {k: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
                for k, p in params.items()}
    rng = np.random.default_rng(seed)
    report = GradReport({})
    for k, p in params.items():
        flat = p.data.reshape(-1)
        n = flat.size if max_entries is None else min(max_entries, flat.size)
        order = rng.permutation(flat.size) if max_entries is not None else np.arange(flat.size)
        picked, est, skipped = [], [], 0
        for i in order:
            if len(picked) == n:
                break
            i = int(i)
            d = _central(f, flat, i, step)
            if skip_kinks:
                d_fine = _central(f, flat, i, step / 10)
                if abs(d - d_fine) > kink_tol * max(abs(d), abs(d_fine), 1e-3):
                    skipped += 1
                    continue
            picked.append(i)
            est.append(d)
        g = analytic[k].reshape(-1)[picked]
        est = np.asarray(est)
        if picked and max(np.abs(g).max(), np.abs(est).max()) <= noise:
            report.vanishing[k] = (float(np.abs(g - est).max()), noise)
        else:
            report.errors[k] = relative_error(g, est) if picked else 0.0
        report.checked[k] = len(picked)
        report.skipped[k] = skipped
    return report


def check_gradients(f: Callable[[], Tensor], params: Mapping[str, Tensor], step: float = 1e-5,
                    max_entries: int | None = None, seed: int = 0) -> dict[str, float]:
    """Relative error per named parameter (strict: no coordinate is skipped)."""
    return gradient_report(f, params, step, max_entries, seed).errors
