"""Central finite-difference checks of backpropagated gradients."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from . import autodiff as ad
from .network import Model, make_rng, set_trainable, trainable_params
from .trainer import total_loss


def gradient_error(analytic, numeric, rtol: float = 1e-4, atol: float = 1e-6):
    """Elementwise relative error with an absolute floor.

    ``|a - n| / max(|a|, |n|, atol / rtol)``; a value <= ``rtol`` means the
    pair agrees to ``rtol`` relatively or to ``atol`` absolutely.
    """
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), atol / rtol)
    return np.abs(a - n) / denom


@dataclass
class ParamCheck:
    name: str
    size: int
    checked: int
    max_error: float
    refined: int = 0  # coordinates whose step was shrunk to avoid a relu kink


@dataclass
class GradcheckReport:
    rtol: float
    atol: float
    params: List[ParamCheck] = field(default_factory=list)

    @property
    def max_error(self) -> float:
        return max((p.max_error for p in self.params), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_error <= self.rtol

    def records(self) -> List[str]:
        lines = [f"param={p.name} size={p.size} checked={p.checked} refined={p.refined} "
                 f"max_rel_error={p.max_error:.3e}" for p in self.params]
        lines.append(f"max_rel_error={self.max_error:.3e} tolerance={self.rtol:g} "
                     f"passed={str(self.passed).lower()}")
        return lines


def _same_pattern(a: Sequence[np.ndarray], b: Sequence[np.ndarray]) -> bool:
    return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))


def check_gradients(loss_fn: Callable[[], ad.Node], params: Sequence[Tuple[str, ad.Node]],
                    h: float = 1e-5, max_coords: Optional[int] = None, seed: int = 0,
                    rtol: float = 1e-4, atol: float = 1e-6, min_h: float = 1e-9) -> GradcheckReport:
    """Compare backprop gradients of ``loss_fn()`` with central differences.

    ``loss_fn`` must be deterministic. Tensors larger than ``max_coords``
    are checked on a seeded random subset of coordinates.

    A relu whose input changes sign between ``x - h`` and ``x + h`` puts a
    kink inside the difference stencil, where the central difference no
    longer estimates the derivative. Such coordinates are retried with the
    step divided by 10 (not below ``min_h``) until every relu keeps the
    activation pattern of the unperturbed point.
    """
    for _, p in params:
        p.grad = None
    with ad.kink_trace() as base_pattern:
        loss = loss_fn()
    ad.backward(loss)
    analytic = {id(p): (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
                for _, p in params}
    rng = make_rng(seed)
    report = GradcheckReport(rtol, atol)

    def probe(flat, c, x0, step):
        flat[c] = x0 + step
        with ad.kink_trace() as pat_up:
            up = loss_fn().item()
        flat[c] = x0 - step
        with ad.kink_trace() as pat_down:
            down = loss_fn().item()
        flat[c] = x0
        smooth = _same_pattern(pat_up, base_pattern) and _same_pattern(pat_down, base_pattern)
        return (up - down) / (2.0 * step), smooth

    for name, p in params:
        size = p.data.size
        if max_coords is None or size <= max_coords:
            coords = np.arange(size)
        else:
            coords = np.sort(rng.choice(size, size=max_coords, replace=False))
        original = p.data
        work = original.copy()
        p.data = work
        flat = work.reshape(-1)
        numeric = np.empty(len(coords))
        refined = 0
        try:
            for i, c in enumerate(coords):
                x0 = original.reshape(-1)[c]
                step = h
                numeric[i], smooth = probe(flat, c, x0, step)
                if not smooth:
                    refined += 1
                while not smooth and step / 10.0 >= min_h:
                    step /= 10.0
                    numeric[i], smooth = probe(flat, c, x0, step)
        finally:
            p.data = original
        err = gradient_error(analytic[id(p)].reshape(-1)[coords], numeric, rtol, atol)
        report.params.append(ParamCheck(name, size, len(coords), float(err.max(initial=0.0)), refined))
    for _, p in params:
        p.grad = None
    return report


def check_model(model: Model, task_id: str, images, labels, lam: float = 1e-3,
                mode: str = "source", h: float = 1e-5, max_coords: Optional[int] = 24,
                seed: int = 0, rtol: float = 1e-4, atol: float = 1e-6) -> GradcheckReport:
    """Gradient check of the full training objective (train-mode batch norm,
    running statistics left untouched)."""
    selected = trainable_params(model, task_id, mode)
    set_trainable(model, selected)
    images = np.asarray(images, dtype=np.float64)

    def loss_fn():
        return total_loss(model, task_id, images, labels, lam, train=True, update_stats=False)[0]

    try:
        return check_gradients(loss_fn, selected, h, max_coords, seed, rtol, atol)
    finally:
        set_trainable(model, [])
