"""Central finite-difference verification of tape gradients."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Mapping

import numpy as np

from .tensor import Tensor, backward, no_grad


@dataclass
class GradCheckReport:
    passed: bool
    worst_rel_err: float
    worst_param: str | None
    worst_index: tuple[int, ...] | None
    analytic: float
    numeric: float
    message: str = ""

    def __bool__(self) -> bool:
        return self.passed


def _rel_err(a: float, b: float) -> float:
    return abs(a - b) / max(1.0, abs(a), abs(b))


def grad_check_many(f: Callable[[], Tensor], tensors: Mapping[str, Tensor],
                    h: float = 1e-6, tol: float = 1e-6,
                    max_checks: int | None = None, seed: int = 0) -> GradCheckReport:
    """Compare autodiff gradients of the scalar ``f()`` against central differences.

    ``f`` must read the current ``.data`` of every tensor in ``tensors``; the
    perturbations are applied in place and undone. ``max_checks`` caps the
    number of components probed per tensor (chosen at random, seeded).
    """
    for t in tensors.values():
        t.grad = None
    loss = f()
    if loss.size != 1:
        raise ValueError(f"f must return a scalar, got shape {loss.shape}")
    backward(loss)
    analytic = {k: (t.grad if t.grad is not None else np.zeros_like(t.data)).copy()
                for k, t in tensors.items()}
    rng = np.random.default_rng(seed)
    worst = GradCheckReport(True, 0.0, None, None, 0.0, 0.0)
    for name, t in tensors.items():
        flat = t.data.reshape(-1)
        idxs = np.arange(flat.size)
        if max_checks is not None and flat.size > max_checks:
            idxs = np.sort(rng.choice(flat.size, size=max_checks, replace=False))
        for i in idxs:
            orig = flat[i]
            try:
                with no_grad():
                    flat[i] = orig + h
                    fp = f().item()
                    flat[i] = orig - h
                    fm = f().item()
            except (FloatingPointError, ValueError) as exc:
                where = np.unravel_index(i, t.shape)
                return GradCheckReport(False, float("nan"), name, where, float("nan"),
                                       float("nan"), f"evaluation failed at {name}{where}: {exc}")
            finally:
                flat[i] = orig
            num = (fp - fm) / (2.0 * h)
            ana = float(analytic[name].reshape(-1)[i])
            if not np.isfinite(num):
                where = np.unravel_index(i, t.shape)
                return GradCheckReport(False, float("nan"), name, where, ana, num,
                                       f"non-finite difference at {name}{where}")
            err = _rel_err(ana, num)
            if err > worst.worst_rel_err or worst.worst_param is None:
                worst = GradCheckReport(True, err, name, tuple(int(j) for j in np.unravel_index(i, t.shape)),
                                        ana, num)
    worst.passed = worst.worst_rel_err <= tol
    worst.message = (f"worst rel err {worst.worst_rel_err:.3e} at {worst.worst_param}{worst.worst_index}"
                     f" (autodiff {worst.analytic:.6g}, fd {worst.numeric:.6g}, tol {tol:g})")
    return worst


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor | np.ndarray,
               h: float = 1e-6, tol: float = 1e-6) -> GradCheckReport:
    """Single-input form: ``f`` maps a tensor to a scalar tensor."""
    x = Tensor(np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64),
               requires_grad=True)
    return grad_check_many(lambda: f(x), {"x": x}, h=h, tol=tol)
