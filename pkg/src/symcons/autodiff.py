"""Dense float64 tensors with reverse-mode differentiation.

Operations executed while a ComputationTape is active record a backward
closure on it, in execution order (which is topological by construction).
``tape.backward(loss)`` seeds the loss gradient and replays the closures in
reverse. Everything is float64; gradient checking to 1e-4 relative error is
not reliable at single precision.

The differentiable primitive set is deliberately small: matmul, add, mul,
scale, embedding gather, softmax, layer_norm, gelu, relu, dropout, concat,
slicing/selection, and the elementwise log/clamp/sum/mean family the training
objective needs. The encoder and losses are composed from these.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.special import erf

from .errors import NumericalError

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


class Tensor:
    """A float64 array plus an optional same-shape gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str = ""):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(self.data) if requires_grad else None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad[...] = 0.0

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"


class ComputationTape:
    """Ordered record of executed differentiable operations."""

    def __init__(self):
        self._entries: list[Callable[[], None]] = []

    def __enter__(self) -> "ComputationTape":
        _ACTIVE_TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        popped = _ACTIVE_TAPES.pop()
        assert popped is self, "tapes must be exited in reverse order of entry"

    def __len__(self) -> int:
        return len(self._entries)

    def record(self, backward_fn: Callable[[], None]) -> None:
        self._entries.append(backward_fn)

    def backward(self, output: Tensor, upstream: np.ndarray | None = None) -> None:
        """Seed ``output.grad`` (with ones unless given) and replay in reverse."""
        if not output.requires_grad:
            raise ValueError("backward target does not require grad")
        if upstream is None:
            upstream = np.ones_like(output.data)
        output.grad[...] = upstream
        for entry in reversed(self._entries):
            entry()


_ACTIVE_TAPES: list[ComputationTape] = []


def _tape() -> ComputationTape | None:
    return _ACTIVE_TAPES[-1] if _ACTIVE_TAPES else None


def tape_active() -> bool:
    """True while some ComputationTape context is recording."""
    return bool(_ACTIVE_TAPES)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum gradient over axes that numpy broadcasting expanded."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, dim in enumerate(shape) if dim == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _result(data: np.ndarray, *parents: Tensor) -> tuple[Tensor, ComputationTape | None]:
    # outputs participate in differentiation only while a tape is recording;
    # otherwise they are plain values and skip the gradient-buffer allocation
    tape = _tape()
    requires = tape is not None and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=requires)
    return out, tape if requires else None


def constant(data) -> Tensor:
    return Tensor(data, requires_grad=False)


# --- arithmetic primitives ---------------------------------------------------


def add(a: Tensor, b: Tensor | np.ndarray) -> Tensor:
    b_t = b if isinstance(b, Tensor) else constant(b)
    out, tape = _result(a.data + b_t.data, a, b_t)
    if tape is not None:

        def backward():
            if a.requires_grad:
                a.grad += _unbroadcast(out.grad, a.shape)
            if b_t.requires_grad:
                b_t.grad += _unbroadcast(out.grad, b_t.shape)

        tape.record(backward)
    return out


def sub(a: Tensor, b: Tensor | np.ndarray) -> Tensor:
    b_t = b if isinstance(b, Tensor) else constant(b)
    return add(a, scale(b_t, -1.0))


def mul(a: Tensor, b: Tensor | np.ndarray) -> Tensor:
    b_t = b if isinstance(b, Tensor) else constant(b)
    out, tape = _result(a.data * b_t.data, a, b_t)
    if tape is not None:
        a_data, b_data = a.data, b_t.data

        def backward():
            if a.requires_grad:
                a.grad += _unbroadcast(out.grad * b_data, a.shape)
            if b_t.requires_grad:
                b_t.grad += _unbroadcast(out.grad * a_data, b_t.shape)

        tape.record(backward)
    return out


def scale(a: Tensor, s: float) -> Tensor:
    out, tape = _result(a.data * s, a)
    if tape is not None:

        def backward():
            a.grad += out.grad * s

        tape.record(backward)
    return out


def matmul(a: Tensor, b: Tensor, transpose_b: bool = False) -> Tensor:
    """Batched matrix product over the last two axes; leading axes broadcast."""
    b_data = np.swapaxes(b.data, -1, -2) if transpose_b else b.data
    out, tape = _result(a.data @ b_data, a, b)
    if tape is not None:
        a_data = a.data

        def backward():
            g = out.grad
            if a.requires_grad:
                a.grad += _unbroadcast(g @ np.swapaxes(b_data, -1, -2), a.shape)
            if b.requires_grad:
                gb = np.swapaxes(a_data, -1, -2) @ g
                if transpose_b:
                    gb = np.swapaxes(gb, -1, -2)
                b.grad += _unbroadcast(gb, b.shape)

        tape.record(backward)
    return out


# --- elementwise nonlinearities ----------------------------------------------


def relu(x: Tensor) -> Tensor:
    out, tape = _result(np.maximum(x.data, 0.0), x)
    if tape is not None:
        gate = (x.data > 0.0).astype(np.float64)

        def backward():
            x.grad += out.grad * gate

        tape.record(backward)
    return out


def gelu(x: Tensor) -> Tensor:
    """Exact (erf-based) GELU."""
    cdf = 0.5 * (1.0 + erf(x.data * _INV_SQRT2))
    out, tape = _result(x.data * cdf, x)
    if tape is not None:
        pdf = _INV_SQRT2PI * np.exp(-0.5 * x.data * x.data)
        local = cdf + x.data * pdf

        def backward():
            x.grad += out.grad * local

        tape.record(backward)
    return out


def log(x: Tensor) -> Tensor:
    if np.any(x.data <= 0.0):
        raise NumericalError("log requires strictly positive inputs; clamp first")
    out, tape = _result(np.log(x.data), x)
    if tape is not None:
        inv = 1.0 / x.data

        def backward():
            x.grad += out.grad * inv

        tape.record(backward)
    return out


def clamp(x: Tensor, lo: float, hi: float) -> Tensor:
    """Clip values to [lo, hi]; gradient passes through unclipped positions."""
    out, tape = _result(np.clip(x.data, lo, hi), x)
    if tape is not None:
        gate = ((x.data >= lo) & (x.data <= hi)).astype(np.float64)

        def backward():
            x.grad += out.grad * gate

        tape.record(backward)
    return out


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Stable softmax along ``axis``; rejects non-finite inputs."""
    if not np.all(np.isfinite(x.data)):
        raise NumericalError("softmax input contains NaN or Inf")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)
    out, tape = _result(y, x)
    if tape is not None:

        def backward():
            g = out.grad
            dot = (g * y).sum(axis=axis, keepdims=True)
            x.grad += y * (g - dot)

        tape.record(backward)
    return out


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean, unit population variance, then affine."""
    if gain.shape != x.shape[-1:] or bias.shape != x.shape[-1:]:
        raise ValueError(
            f"gain/bias {gain.shape}/{bias.shape} must match last dim of {x.shape}"
        )
    mean = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mean
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    x_hat = centered * inv_std
    out, tape = _result(x_hat * gain.data + bias.data, x, gain, bias)
    if tape is not None:
        n = x.shape[-1]
        gain_data = gain.data

        def backward():
            g = out.grad
            if bias.requires_grad:
                bias.grad += g.reshape(-1, n).sum(axis=0)
            if gain.requires_grad:
                gain.grad += (g * x_hat).reshape(-1, n).sum(axis=0)
            if x.requires_grad:
                gh = g * gain_data
                mean_gh = gh.mean(axis=-1, keepdims=True)
                mean_gh_xhat = (gh * x_hat).mean(axis=-1, keepdims=True)
                x.grad += inv_std * (gh - mean_gh - x_hat * mean_gh_xhat)

        tape.record(backward)
    return out


def dropout(x: Tensor, p: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout with an explicit generator, so masks are replayable."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    if p == 0.0:
        return x
    mask = (rng.random(x.shape) >= p) / (1.0 - p)
    out, tape = _result(x.data * mask, x)
    if tape is not None:

        def backward():
            x.grad += out.grad * mask

        tape.record(backward)
    return out


# --- gathering / shaping ------------------------------------------------------


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row gather: ids of shape S yield output of shape S + (width,)."""
    ids = np.asarray(ids)
    if not np.issubdtype(ids.dtype, np.integer):
        raise ValueError("embedding ids must be integers")
    out, tape = _result(table.data[ids], table)
    if tape is not None:
        width = table.shape[-1]

        def backward():
            np.add.at(table.grad, ids.reshape(-1), out.grad.reshape(-1, width))

        tape.record(backward)
    return out


def slice_lastdim(x: Tensor, start: int, stop: int) -> Tensor:
    out, tape = _result(x.data[..., start:stop], x)
    if tape is not None:

        def backward():
            x.grad[..., start:stop] += out.grad

        tape.record(backward)
    return out


def select_axis(x: Tensor, axis: int, index: int) -> Tensor:
    """Drop ``axis`` by picking one index along it (``x[:, index]`` style)."""
    out, tape = _result(np.take(x.data, index, axis=axis), x)
    if tape is not None:
        sel = [slice(None)] * x.data.ndim
        sel[axis] = index
        sel = tuple(sel)

        def backward():
            x.grad[sel] += out.grad

        tape.record(backward)
    return out


def concat(parts: Sequence[Tensor], axis: int = -1) -> Tensor:
    datas = [p.data for p in parts]
    out, tape = _result(np.concatenate(datas, axis=axis), *parts)
    if tape is not None:
        sizes = [d.shape[axis] for d in datas]
        offsets = np.cumsum([0] + sizes)

        def backward():
            pieces = np.split(out.grad, offsets[1:-1], axis=axis)
            for part, piece in zip(parts, pieces):
                if part.requires_grad:
                    part.grad += piece

        tape.record(backward)
    return out


def sum_axis(x: Tensor, axis: int = -1, keepdims: bool = False) -> Tensor:
    out, tape = _result(x.data.sum(axis=axis, keepdims=keepdims), x)
    if tape is not None:

        def backward():
            g = out.grad
            if not keepdims:
                g = np.expand_dims(g, axis=axis)
            x.grad += np.broadcast_to(g, x.shape)

        tape.record(backward)
    return out


def mean_all(x: Tensor) -> Tensor:
    out, tape = _result(np.asarray(x.data.mean()), x)
    if tape is not None:
        inv_n = 1.0 / x.data.size

        def backward():
            x.grad += out.grad * inv_n

        tape.record(backward)
    return out


def scaled_dot_attention(q: Tensor, k: Tensor, v: Tensor, mask: np.ndarray) -> Tensor:
    """softmax(q k^T / sqrt(d) + mask bias) v, with padded keys masked out.

    q, k, v: [..., L, d]; mask: {0,1} over the key axis, broadcastable to the
    score matrix's key dimension. Masked keys receive a -1e9 additive bias.
    """
    d = q.shape[-1]
    if d < 1:
        raise ValueError("attention head width must be >= 1")
    mask = np.asarray(mask, dtype=np.float64)
    bias = (mask - 1.0) * 1e9  # 0 on real keys, -1e9 on padding
    scores = scale(matmul(q, k, transpose_b=True), 1.0 / math.sqrt(d))
    weights = softmax(add(scores, bias), axis=-1)
    return matmul(weights, v)


# --- finite-difference verification -------------------------------------------


@dataclass
class CoordinateCheck:
    param: str
    index: tuple[int, ...]
    analytic: float
    numeric: float
    rel_err: float


@dataclass
class GradCheckReport:
    max_rel_err: float
    tol: float
    n_coords: int
    worst: CoordinateCheck | None
    checks: list[CoordinateCheck] = field(repr=False, default_factory=list)

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.tol


def gradient_check(
    f: Callable[[], Tensor],
    params: Sequence[Tensor],
    h: float = 1e-5,
    tol: float = 1e-4,
    max_coords_per_tensor: int = 24,
) -> GradCheckReport:
    """Compare analytic gradients of the scalar ``f()`` to central differences.

    ``f`` must recompute the loss from the current parameter values each call.
    Relative error per coordinate is |a - n| / max(|a|, |n|, 1e-12).

    Central differences carry roundoff noise of roughly eps * |f| / (2h), so a
    coordinate can only be verified to ``tol`` when its gradient magnitude
    clears that floor with margin; smaller coordinates measure noise, not
    correctness. Per tensor, the largest verifiable coordinates are checked
    (systematic backward errors surface in the largest coordinates first).
    """
    if not 1e-7 <= h <= 1e-3:
        raise ValueError(f"h must lie in [1e-7, 1e-3], got {h}")
    for p in params:
        if not p.requires_grad:
            raise ValueError(f"parameter {p.name!r} does not require grad")
        p.zero_grad()
    with ComputationTape() as tape:
        loss = f()
    base = loss.item()
    if not math.isfinite(base):
        raise NumericalError("loss is not finite at the supplied parameters")
    tape.backward(loss)

    # roundoff accumulates over every op in the forward pass, not just the
    # final rounding; 20x covers the observed factor (~4x) with margin.
    # Tolerances below 1e-6 are unreachable for double-precision central
    # differences, so the verifiability floor stops adapting there and such
    # requests fail on the coordinates that are measurable.
    noise_floor = abs(base) * np.finfo(np.float64).eps / (2.0 * h)
    min_magnitude = max(1e-12, 20.0 * noise_floor / max(tol, 1e-6))
    checks: list[CoordinateCheck] = []
    for p in params:
        size = p.data.size
        flat_data = p.data.reshape(-1)
        flat_grad = p.grad.reshape(-1)
        if size <= max_coords_per_tensor:
            flat_idx = np.arange(size)
        else:
            flat_idx = np.argsort(-np.abs(flat_grad), kind="stable")[:max_coords_per_tensor]
        flat_idx = [j for j in flat_idx if abs(flat_grad[j]) >= min_magnitude]
        for j in sorted(int(i) for i in flat_idx):
            original = flat_data[j]
            flat_data[j] = original + h
            f_plus = f().item()
            flat_data[j] = original - h
            f_minus = f().item()
            flat_data[j] = original
            numeric = (f_plus - f_minus) / (2.0 * h)
            analytic = float(flat_grad[j])
            rel = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-12)
            checks.append(
                CoordinateCheck(
                    param=p.name or "<unnamed>",
                    index=np.unravel_index(j, p.shape),
                    analytic=analytic,
                    numeric=numeric,
                    rel_err=rel,
                )
            )
    worst = max(checks, key=lambda c: c.rel_err) if checks else None
    return GradCheckReport(
        max_rel_err=worst.rel_err if worst else 0.0,
        tol=tol,
        n_coords=len(checks),
        worst=worst,
        checks=checks,
    )
