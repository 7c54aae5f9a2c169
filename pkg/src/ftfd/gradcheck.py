"""Central finite-difference gradient checking.

ReLU and channel-max are piecewise smooth. A central difference whose two
probes land on different pieces measures a secant across a kink, not the
derivative, so such coordinates are detected through the engine's kink log
and replaced by other coordinates of the same tensor.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .tensor import KinkLog, Tape, Tensor, backward


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-10) -> float:
    """``||a - n|| / max(||a||, ||n||)``; exact agreement of near-zero vectors counts as 0."""
    a = np.ravel(analytic)
    n = np.ravel(numeric)
    scale = max(np.linalg.norm(a), np.linalg.norm(n))
    if scale < floor:
        return float(np.linalg.norm(a - n))
    return float(np.linalg.norm(a - n) / scale)


def numeric_grad(fn: Callable[[], float], arr: np.ndarray, h: float = 1e-5,
                 coords: Optional[Sequence[tuple]] = None) -> np.ndarray:
    """Central differences of ``fn`` w.r.t. ``arr`` (perturbed in place, then restored)."""
    if coords is None:
        coords = list(np.ndindex(arr.shape))
    out = np.zeros(len(coords))
    for i, idx in enumerate(coords):
        orig = arr[idx]
        arr[idx] = orig + h
        up = fn()
        arr[idx] = orig - h
        down = fn()
        arr[idx] = orig
        out[i] = (up - down) / (2 * h)
    return out


# central stencils: offsets (in units of h) and weights, derivative = sum(w * f(x + k h)) / h
STENCILS = {
    2: ((1, -1), (0.5, -0.5)),
    4: ((2, 1, -1, -2), (-1 / 12, 8 / 12, -8 / 12, 1 / 12)),
}


@dataclass
class GradcheckStats:
    checked: int = 0
    kinks_skipped: int = 0
    per_tensor: list = field(default_factory=list)


def check_gradients(fn: Callable[..., Tensor], arrays: Sequence[np.ndarray], h: float = 1e-5,
                    max_coords: Optional[int] = None, rng: Optional[np.random.Generator] = None,
                    stats: Optional[GradcheckStats] = None, order: int = 2) -> list[float]:
    """Compare tape gradients of a scalar ``fn(*tensors)`` with central differences.

    Returns one relative error per input array. With ``max_coords`` only a
    subset of each array's coordinates is differenced: the entry with the
    largest analytic gradient plus random others.
    """
    tensors = [Tensor(np.array(a, dtype=np.float64), requires_grad=True) for a in arrays]
    return check_tensor_gradients(lambda: fn(*tensors), tensors, h, max_coords, rng, stats, order)


def check_tensor_gradients(loss_fn: Callable[[], Tensor], tensors: Sequence[Tensor], h: float = 1e-5,
                           max_coords: Optional[int] = None, rng: Optional[np.random.Generator] = None,
                           stats: Optional[GradcheckStats] = None, order: int = 2) -> list[float]:
    """Same check for leaf tensors that ``loss_fn`` closes over (e.g. model parameters).

    ``loss_fn`` must be a pure function of the tensors' current data.
    ``order=4`` uses the five-point central stencil, whose O(h^4) truncation
    error allows a larger ``h`` and therefore less round-off on deep graphs.
    """
    if order not in STENCILS:
        raise ValueError(f"order must be one of {sorted(STENCILS)}")
    offsets, weights = STENCILS[order]
    for t in tensors:
        t.grad = None
    with Tape():
        loss = loss_fn()
    backward(loss)
    with KinkLog() as base_log:
        loss_fn()
    base = base_log.signature()

    def smooth_probe(arr, idx):
        """Central difference at ``idx``, or None if a kink lies within +-h."""
        orig = arr[idx]
        total = 0.0
        for k, w in zip(offsets, weights):
            arr[idx] = orig + k * h
            with KinkLog() as log:
                value = loss_fn().item()
            if log.signature() != base:
                arr[idx] = orig
                return None
            total += w * value
        arr[idx] = orig
        return total / h

    rng = rng or np.random.default_rng(0)
    stats = stats if stats is not None else GradcheckStats()
    errors = []
    for t in tensors:
        coords = list(np.ndindex(t.shape))
        if max_coords is None:
            visit = np.arange(len(coords))
        else:
            # lead with the largest analytic entry so the norm ratio is taken on the
            # tensor's own gradient scale, not on a sample of near-zero entries
            visit = rng.permutation(len(coords))
            if t.grad is not None:
                peak = int(np.argmax(np.abs(t.grad).ravel()))
                visit = np.concatenate([[peak], visit[visit != peak]])
        want = len(coords) if max_coords is None else min(max_coords, len(coords))
        ana, num = [], []
        for i in visit:
            if len(num) == want:
                break
            d = smooth_probe(t.data, coords[i])
            if d is None:
                stats.kinks_skipped += 1
                continue
            num.append(d)
            ana.append(t.grad[coords[i]] if t.grad is not None else 0.0)
        stats.checked += len(num)
        stats.per_tensor.append(len(num))
        errors.append(relative_error(np.array(ana), np.array(num)) if num else 0.0)
    return errors
