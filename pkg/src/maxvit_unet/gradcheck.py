"""Central finite-difference gradient checking."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, backward


def relative_error(analytic, numeric, floor: float = 1e-8):
    a, n = np.asarray(analytic, dtype=np.float64), np.asarray(numeric, dtype=np.float64)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


@dataclass
class GradCheckReport:
    max_rel_err: float
    tol: float
    checked: int
    worst: str = ""
    per_input: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return bool(self.max_rel_err < self.tol)

    def __str__(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (f"{status} max_rel_err={self.max_rel_err:.3e} tol={self.tol:g} "
                f"coords={self.checked} worst={self.worst}")


def grad_check(f: Callable[[], Tensor], inputs: Sequence[Tensor] | dict, step: float = 1e-4,
               tol: float = 1e-3, max_coords: int | None = None, seed: int = 0,
               names: Sequence[str] | None = None) -> GradCheckReport:
    """Compare backprop gradients of scalar ``f()`` w.r.t. ``inputs`` against central differences.

    ``f`` is re-evaluated with each checked coordinate perturbed in place, so it must read
    the tensors in ``inputs`` directly. With ``max_coords`` only a random subset of
    each tensor's coordinates is checked. Relative error per coordinate is
    ``|a - n| / max(|a|, |n|, 1e-8)``.
    """
    if isinstance(inputs, dict):
        names, inputs = list(inputs), list(inputs.values())
    names = list(names) if names is not None else [f"input{i}" for i in range(len(inputs))]
    for t in inputs:
        t.data = np.ascontiguousarray(t.data)  # perturbation writes through a flat view
        t.grad = None
        t.requires_grad = True
    out = f()
    backward(out)
    analytic = [t.grad.copy() if t.grad is not None else np.zeros_like(t.data) for t in inputs]

    rng = np.random.default_rng(seed)
    worst, worst_where, checked = 0.0, "", 0
    per_input = {}
    for name, t, ga in zip(names, inputs, analytic):
        flat = t.data.reshape(-1)
        if max_coords is not None and flat.size > max_coords:
            coords = rng.choice(flat.size, size=max_coords, replace=False)
        else:
            coords = np.arange(flat.size)
        local = 0.0
        for idx in coords:
            orig = flat[idx]
            flat[idx] = orig + step
            fp = float(f().data.sum())
            flat[idx] = orig - step
            fm = float(f().data.sum())
            flat[idx] = orig
            num = (fp - fm) / (2.0 * step)
            err = float(relative_error(ga.reshape(-1)[idx], num))
            local = max(local, err)
            if err > worst:
                worst, worst_where = err, f"{name}[{int(idx)}]"
        checked += len(coords)
        per_input[name] = local
    for t in inputs:
        t.grad = None
    return GradCheckReport(worst, tol, checked, worst_where, per_input)
