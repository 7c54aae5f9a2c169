"""Dense float64 tensors with tape-based reverse-mode differentiation.

Only the operations the detector needs are provided. Operations executed
inside an active :class:`Tape` are recorded; outside a tape they run in
inference mode and produce tensors that do not require gradients.
"""

from __future__ import annotations

import threading
from typing import Callable, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

BN_EPS = 1e-5
BN_MOMENTUM = 0.1

_local = threading.local()


class KinkLog:
    """Collects the branch decisions of piecewise ops (ReLU masks, max-pool argmaxes).

    Two evaluations with equal logs lie on the same smooth piece of the
    function, which is what finite-difference checking needs.
    """

    def __init__(self):
        self.parts: list[bytes] = []

    def __enter__(self) -> "KinkLog":
        if getattr(_local, "kinks", None) is not None:
            raise TapeError("kink logs do not nest")
        _local.kinks = self
        return self

    def __exit__(self, *exc) -> None:
        _local.kinks = None

    def signature(self) -> bytes:
        return b"|".join(self.parts)


def _note_kink(decision: np.ndarray) -> None:
    log = getattr(_local, "kinks", None)
    if log is not None:
        log.parts.append(np.packbits(decision.ravel()).tobytes() if decision.dtype == bool else decision.tobytes())


class ShapeError(ValueError):
    """Raised when operand extents are incompatible."""


class TapeError(RuntimeError):
    """Raised on misuse of the computation tape."""


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "_tape")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        if arr.size == 0:
            raise ShapeError(f"tensor extents must be positive, got {arr.shape}")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self._tape: Optional[Tape] = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"


class Tape:
    """Ordered record of differentiable operations.

    Use as a context manager; operations on tensors that require gradients
    are appended while the tape is active::

        with Tape():
            loss = model_loss(...)
        backward(loss)
    """

    def __init__(self):
        self.records: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []
        self.consumed = False

    def __enter__(self) -> "Tape":
        stack = _tape_stack()
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()

    def record(self, out: Tensor, parents: tuple[Tensor, ...], rule: Callable) -> None:
        if self.consumed:
            raise TapeError("cannot record on a tape that has already been consumed by backward")
        out._tape = self
        self.records.append((out, parents, rule))

    def __len__(self) -> int:
        return len(self.records)


def _tape_stack() -> list:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def active_tape() -> Optional[Tape]:
    stack = _tape_stack()
    return stack[-1] if stack else None


def _result(data: np.ndarray, parents: Sequence[Tensor], rule: Callable) -> Tensor:
    """Wrap ``data`` and record ``rule`` if any parent needs a gradient.

    ``rule(grad_out)`` returns one gradient array (or None) per parent.
    """
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out._tape = None
    tape = active_tape()
    needs = tape is not None and any(p.requires_grad for p in parents)
    out.requires_grad = needs
    if needs:
        tape.record(out, tuple(parents), rule)
    return out


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every requires-grad leaf reachable from ``loss``."""
    if loss.data.size != 1:
        raise TapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = loss._tape
    if tape is None:
        raise TapeError("loss was not produced under an active tape")
    if tape.consumed:
        raise TapeError("tape already consumed; run a new forward pass before calling backward again")
    tape.consumed = True

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    produced = {id(rec[0]) for rec in tape.records}
    leaves: dict[int, Tensor] = {}
    for out, parents, rule in reversed(tape.records):
        g = grads.pop(id(out), None)
        if g is None:
            continue
        parent_grads = rule(g)
        for p, pg in zip(parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            key = id(p)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
            if key not in produced:
                leaves[key] = p
    for key, leaf in leaves.items():
        g = grads[key]
        leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g
    tape.records.clear()


# ---------------------------------------------------------------------------
# operations
# ---------------------------------------------------------------------------


def _check_4d(x: Tensor, what: str) -> None:
    if x.ndim != 4:
        raise ShapeError(f"{what} expects a 4-D (B, C, H, W) tensor, got shape {x.shape}")


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation with zero padding.

    Args:
        x: input of shape (B, Cin, H, W).
        weight: filters of shape (Cout, Cin, k, k).
        bias: optional (Cout,) offsets.
        stride: step between output positions.
        padding: zeros added on every border.
    """
    _check_4d(x, "conv2d")
    if weight.ndim != 4:
        raise ShapeError(f"conv2d weight must be (Cout, Cin, k, k), got {weight.shape}")
    if stride < 1 or padding < 0:
        raise ValueError(f"invalid stride={stride} / padding={padding}")
    B, C, H, W = x.shape
    Cout, Cin, kh, kw = weight.shape
    if Cin != C:
        raise ShapeError(f"conv2d: input has {C} channels but weight expects {Cin} (weight {weight.shape})")
    if kh != kw:
        raise ShapeError(f"conv2d: only square kernels are supported, got {kh}x{kw}")
    k = kh
    if k > H + 2 * padding or k > W + 2 * padding:
        raise ShapeError(f"conv2d: kernel {k} larger than padded input {H + 2 * padding}x{W + 2 * padding}")
    if bias is not None and bias.shape != (Cout,):
        raise ShapeError(f"conv2d: bias must have shape ({Cout},), got {bias.shape}")

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    Ho = (H + 2 * padding - k) // stride + 1
    Wo = (W + 2 * padding - k) // stride + 1
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    # (B, Ho, Wo, C, k, k) -> rows of the im2col matrix
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(B * Ho * Wo, C * k * k)
    wmat = weight.data.reshape(Cout, C * k * k)
    out = cols @ wmat.T
    if bias is not None:
        out += bias.data
    out = np.ascontiguousarray(out.reshape(B, Ho, Wo, Cout).transpose(0, 3, 1, 2))

    def rule(g):
        gmat = g.transpose(0, 2, 3, 1).reshape(B * Ho * Wo, Cout)
        gw = (gmat.T @ cols).reshape(weight.shape) if weight.requires_grad else None
        gb = gmat.sum(axis=0) if bias is not None and bias.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = np.ascontiguousarray((gmat @ wmat).reshape(B, Ho, Wo, C, k, k).transpose(4, 5, 0, 3, 1, 2))
            gxp = np.zeros_like(xp)
            hs = stride * (Ho - 1) + 1
            ws = stride * (Wo - 1) + 1
            for i in range(k):
                for j in range(k):
                    gxp[:, :, i:i + hs:stride, j:j + ws:stride] += gcols[i, j]
            gx = gxp[:, :, padding:padding + H, padding:padding + W] if padding else gxp
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _result(out, parents, rule)


def channel_avg_pool(x: Tensor) -> Tensor:
    """Mean over the channel axis, keeping a single channel."""
    _check_4d(x, "channel_avg_pool")
    C = x.shape[1]
    out = x.data.mean(axis=1, keepdims=True)
    return _result(out, (x,), lambda g: (np.broadcast_to(g / C, x.shape).copy(),))


def channel_max_pool(x: Tensor) -> Tensor:
    """Max over the channel axis; ties send the gradient to the lowest channel."""
    _check_4d(x, "channel_max_pool")
    idx = x.data.argmax(axis=1)[:, None]
    _note_kink(idx)
    out = np.take_along_axis(x.data, idx, axis=1)

    def rule(g):
        gx = np.zeros_like(x.data)
        np.put_along_axis(gx, idx, g, axis=1)
        return (gx,)

    return _result(out, (x,), rule)


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    """Concatenate along axis 1 (channels for maps, features for vectors)."""
    if a.ndim != b.ndim or a.ndim not in (2, 4):
        raise ShapeError(f"concat_channels needs two 2-D or two 4-D tensors, got {a.shape} and {b.shape}")
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ShapeError(f"concat_channels: batch/spatial extents differ: {a.shape} vs {b.shape}")
    ca = a.shape[1]
    out = np.concatenate([a.data, b.data], axis=1)
    return _result(out, (a, b), lambda g: (g[:, :ca].copy(), g[:, ca:].copy()))


def split_channels(x: Tensor, first: int) -> tuple[Tensor, Tensor]:
    """Inverse of :func:`concat_channels`: channels [0, first) and [first, C)."""
    C = x.shape[1]
    if not 0 < first < C:
        raise ShapeError(f"split point {first} must lie strictly inside (0, {C})")

    def piece(lo, hi):
        def rule(g):
            gx = np.zeros_like(x.data)
            gx[:, lo:hi] = g
            return (gx,)

        return _result(x.data[:, lo:hi].copy(), (x,), rule)

    return piece(0, first), piece(first, C)


def sigmoid(x: Tensor) -> Tensor:
    out = stable_sigmoid(x.data)
    return _result(out, (x,), lambda g: (g * out * (1.0 - out),))


def stable_sigmoid(z: np.ndarray) -> np.ndarray:
    """Logistic function without overflow for large |z|."""
    z = np.asarray(z, dtype=np.float64)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    _note_kink(mask)
    return _result(x.data * mask, (x,), lambda g: (g * mask,))


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"add: shapes differ {a.shape} vs {b.shape}")
    return _result(a.data + b.data, (a, b), lambda g: (g, g))


def scale(x: Tensor, factor: float) -> Tensor:
    return _result(x.data * factor, (x,), lambda g: (g * factor,))


def mul_broadcast(a: Tensor, m: Tensor) -> Tensor:
    """Multiply (B, C, H, W) features by a (B, 1, H, W) map shared across channels."""
    _check_4d(a, "mul_broadcast")
    _check_4d(m, "mul_broadcast")
    if m.shape[1] != 1 or m.shape[0] != a.shape[0] or m.shape[2:] != a.shape[2:]:
        raise ShapeError(f"mul_broadcast: map {m.shape} does not broadcast onto {a.shape}")
    out = a.data * m.data
    return _result(out, (a, m), lambda g: (g * m.data, (g * a.data).sum(axis=1, keepdims=True)))


def fully_connected(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Affine map ``x @ weight.T + bias`` for x of shape (B, D) and weight (E, D)."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"fully_connected: input {x.shape} incompatible with weight {weight.shape}")
    if bias.shape != (weight.shape[0],):
        raise ShapeError(f"fully_connected: bias {bias.shape} does not match weight {weight.shape}")
    out = x.data @ weight.data.T + bias.data
    return _result(out, (x, weight, bias), lambda g: (g @ weight.data, g.T @ x.data, g.sum(axis=0)))


def global_avg_pool(x: Tensor) -> Tensor:
    _check_4d(x, "global_avg_pool")
    B, C, H, W = x.shape
    out = x.data.mean(axis=(2, 3))
    return _result(out, (x,), lambda g: (np.broadcast_to(g[:, :, None, None] / (H * W), x.shape).copy(),))


def reduce_sum(x: Tensor) -> Tensor:
    return _result(np.array([x.data.sum()]), (x,), lambda g: (np.full_like(x.data, g[0]),))


def reduce_mean(x: Tensor) -> Tensor:
    n = x.data.size
    return _result(np.array([x.data.mean()]), (x,), lambda g: (np.full_like(x.data, g[0] / n),))


class BatchNormState:
    """Running statistics of one batch-norm layer."""

    def __init__(self, channels: int):
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, state: BatchNormState, train: bool) -> Tensor:
    """Per-channel normalization of a (B, C, H, W) map.

    Train mode uses batch statistics and updates ``state`` in place
    (momentum 0.1, unbiased variance for the running estimate); eval mode
    uses the running statistics.
    """
    _check_4d(x, "batch_norm")
    B, C, H, W = x.shape
    if gamma.shape != (C,) or beta.shape != (C,):
        raise ShapeError(f"batch_norm: gamma/beta must be ({C},), got {gamma.shape}/{beta.shape}")
    g4 = gamma.data[None, :, None, None]
    if not train:
        inv = 1.0 / np.sqrt(state.running_var + BN_EPS)
        xhat = (x.data - state.running_mean[None, :, None, None]) * inv[None, :, None, None]
        out = g4 * xhat + beta.data[None, :, None, None]

        def eval_rule(g):
            return (g * g4 * inv[None, :, None, None], (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3)))

        return _result(out, (x, gamma, beta), eval_rule)

    n = B * H * W
    if n < 2:
        raise ShapeError(f"batch_norm in train mode needs at least 2 values per channel, got {n}")
    mean = x.data.mean(axis=(0, 2, 3))
    centered = x.data - mean[None, :, None, None]
    var = (centered ** 2).mean(axis=(0, 2, 3))
    inv = 1.0 / np.sqrt(var + BN_EPS)
    xhat = centered * inv[None, :, None, None]
    out = g4 * xhat + beta.data[None, :, None, None]
    state.running_mean = (1 - BN_MOMENTUM) * state.running_mean + BN_MOMENTUM * mean
    state.running_var = (1 - BN_MOMENTUM) * state.running_var + BN_MOMENTUM * var * n / (n - 1)

    def rule(g):
        dgamma = (g * xhat).sum(axis=(0, 2, 3))
        dbeta = g.sum(axis=(0, 2, 3))
        dxhat = g * g4
        dx = (inv / n)[None, :, None, None] * (
            n * dxhat
            - dxhat.sum(axis=(0, 2, 3))[None, :, None, None]
            - xhat * (dxhat * xhat).sum(axis=(0, 2, 3))[None, :, None, None]
        )
        return dx, dgamma, dbeta

    return _result(out, (x, gamma, beta), rule)


def dropout(x: Tensor, p: float, train: bool, rng: Optional[np.random.Generator] = None) -> Tensor:
    """Inverted dropout: survivors are scaled by 1/(1-p) so eval mode is the identity."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must lie in [0, 1), got {p}")
    if not train or p == 0.0:
        return _result(x.data, (x,), lambda g: (g,))
    if rng is None:
        raise ValueError("train-mode dropout needs an explicit rng")
    mask = (rng.random(x.shape) >= p) / (1.0 - p)
    return _result(x.data * mask, (x,), lambda g: (g * mask,))
