"""Differentiable ops.

Each op validates shapes, computes the forward value in float32 (float64
for reduction statistics), and registers a closure that maps the output
gradient to input gradients.  Convolution lowers to a single GEMM via
im2col; chunked attention is composed from the primitives here, so its
backward pass falls out of the graph without bespoke code.

Time-series tensors follow the layout conventions of the model:
convolution acts on ``[batch, channels, length]`` (time last), attention
on ``[batch, length, channels]`` (channels last).
"""

from __future__ import annotations

import math

import numpy as np

from ..errors import DomainError, InputError
from .tensor import Tensor, accumulate_grad, as_tensor, grad_enabled

# Additive mask value: large enough to zero a softmax row entry in
# float32, small enough that exp() underflows cleanly instead of NaNing.
MASK_VALUE = -1e30

# Running count of attention score entries (rows x keys per pattern,
# batch and heads excluded) materialised since the last reset.  Lets
# tests and benchmarks audit the cost of the attention pattern itself.
_SCORE_ENTRIES = 0


def reset_score_counter() -> None:
    global _SCORE_ENTRIES
    _SCORE_ENTRIES = 0


def score_counter() -> int:
    return _SCORE_ENTRIES


def _link(data: np.ndarray, inputs: tuple, make_backprop) -> Tensor:
    """Build the output node; record the closure only if grads can flow."""
    needs = grad_enabled() and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=needs, _prev=inputs if needs else ())
    if needs:
        out._backprop = make_backprop(out)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (reverses numpy broadcasting)."""
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise and affine


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    data = a.data + b.data

    def make(out):
        def backprop():
            if a.requires_grad:
                accumulate_grad(a, _unbroadcast(out.grad, a.data.shape))
            if b.requires_grad:
                accumulate_grad(b, _unbroadcast(out.grad, b.data.shape))
        return backprop

    return _link(data, (a, b), make)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    data = a.data * b.data

    def make(out):
        def backprop():
            if a.requires_grad:
                accumulate_grad(a, _unbroadcast(out.grad * b.data, a.data.shape), fresh=True)
            if b.requires_grad:
                accumulate_grad(b, _unbroadcast(out.grad * a.data, b.data.shape), fresh=True)
        return backprop

    return _link(data, (a, b), make)


def relu(x: Tensor) -> Tensor:
    data = np.maximum(x.data, 0.0)

    def make(out):
        def backprop():
            if x.requires_grad:
                accumulate_grad(x, out.grad * (x.data > 0.0), fresh=True)
        return backprop

    return _link(data, (x,), make)


def sigmoid(x: Tensor) -> Tensor:
    # Split by sign so exp() never overflows.
    xd = x.data
    p = np.where(xd >= 0.0, 1.0 / (1.0 + np.exp(-np.abs(xd))),
                 np.exp(-np.abs(xd)) / (1.0 + np.exp(-np.abs(xd))))
    p = p.astype(np.float32)

    def make(out):
        def backprop():
            if x.requires_grad:
                accumulate_grad(x, out.grad * p * (1.0 - p), fresh=True)
        return backprop

    return _link(p, (x,), make)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise InputError("matmul needs tensors with at least 2 dims")
    data = np.matmul(a.data, b.data)

    def make(out):
        def backprop():
            g = out.grad
            if a.requires_grad:
                ga = np.matmul(g, b.data.swapaxes(-1, -2))
                accumulate_grad(a, _unbroadcast(ga, a.data.shape), fresh=True)
            if b.requires_grad:
                gb = np.matmul(a.data.swapaxes(-1, -2), g)
                accumulate_grad(b, _unbroadcast(gb, b.data.shape), fresh=True)
        return backprop

    return _link(data, (a, b), make)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight + bias`` over the trailing feature axis.

    ``x`` is ``[..., fan_in]``, ``weight`` is ``[fan_in, fan_out]``,
    ``bias`` is ``[fan_out]``.
    """
    if x.data.shape[-1] != weight.data.shape[0]:
        raise InputError(
            f"linear: fan_in mismatch {x.data.shape[-1]} vs {weight.data.shape[0]}")
    data = x.data @ weight.data
    if bias is not None:
        if bias.data.shape != (weight.data.shape[1],):
            raise InputError(f"linear: bias shape {bias.data.shape} invalid")
        data = data + bias.data
    inputs = (x, weight) if bias is None else (x, weight, bias)

    def make(out):
        def backprop():
            g = out.grad
            if x.requires_grad:
                accumulate_grad(x, g @ weight.data.T, fresh=True)
            if weight.requires_grad:
                x2 = x.data.reshape(-1, x.data.shape[-1])
                g2 = g.reshape(-1, g.shape[-1])
                accumulate_grad(weight, x2.T @ g2, fresh=True)
            if bias is not None and bias.requires_grad:
                accumulate_grad(bias, g.reshape(-1, g.shape[-1]).sum(axis=0), fresh=True)
        return backprop

    return _link(data, inputs, make)


def dropout(x: Tensor, p: float, training: bool,
            rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout: kept entries are scaled by ``1/(1-p)``.

    Identity when ``training`` is false or ``p == 0``.  A generator is
    mandatory whenever a mask is actually drawn, so every mask is
    attributable to a ``(seed, layer, step)`` key.
    """
    if not 0.0 <= p < 1.0:
        raise InputError(f"dropout rate must be in [0, 1), got {p}")
    if not training or p == 0.0:
        return x
    if rng is None:
        raise InputError("dropout in training mode requires an rng")
    mask = (rng.random(x.data.shape, dtype=np.float32) >= p).astype(np.float32)
    mask /= np.float32(1.0 - p)
    data = x.data * mask

    def make(out):
        def backprop():
            if x.requires_grad:
                accumulate_grad(x, out.grad * mask, fresh=True)
        return backprop

    return _link(data, (x,), make)


# ---------------------------------------------------------------------------
# shape plumbing


def reshape(x: Tensor, shape: tuple) -> Tensor:
    data = x.data.reshape(shape)

    def make(out):
        def backprop():
            if x.requires_grad:
                accumulate_grad(x, out.grad.reshape(x.data.shape))
        return backprop

    return _link(data, (x,), make)


def transpose(x: Tensor, axes: tuple) -> Tensor:
    data = np.ascontiguousarray(x.data.transpose(axes))
    inverse = tuple(np.argsort(axes))

    def make(out):
        def backprop():
            if x.requires_grad:
                accumulate_grad(x, out.grad.transpose(inverse))
        return backprop

    return _link(data, (x,), make)


def pad_axis(x: Tensor, axis: int, left: int, right: int) -> Tensor:
    """Zero-pad one axis."""
    if left < 0 or right < 0:
        raise InputError("pad amounts must be non-negative")
    if left == 0 and right == 0:
        return x
    widths = [(0, 0)] * x.data.ndim
    widths[axis] = (left, right)
    data = np.pad(x.data, widths)
    length = x.data.shape[axis]

    def make(out):
        def backprop():
            if x.requires_grad:
                sl = [slice(None)] * out.grad.ndim
                sl[axis] = slice(left, left + length)
                accumulate_grad(x, out.grad[tuple(sl)])
        return backprop

    return _link(data, (x,), make)


def slice_axis(x: Tensor, axis: int, start: int, stop: int) -> Tensor:
    """Contiguous slice along one axis; backward scatters into zeros."""
    length = x.data.shape[axis]
    if not 0 <= start < stop <= length:
        raise InputError(f"slice [{start}:{stop}) invalid for axis of length {length}")
    sl = [slice(None)] * x.data.ndim
    sl[axis] = slice(start, stop)
    sl = tuple(sl)
    data = np.ascontiguousarray(x.data[sl])

    def make(out):
        def backprop():
            if x.requires_grad:
                g = np.zeros_like(x.data)
                g[sl] = out.grad
                accumulate_grad(x, g, fresh=True)
        return backprop

    return _link(data, (x,), make)


def chomp(x: Tensor, amount: int) -> Tensor:
    """Drop the last ``amount`` timesteps (time on the last axis)."""
    if amount < 0:
        raise InputError("chomp amount must be non-negative")
    if amount == 0:
        return x
    length = x.data.shape[-1]
    if amount >= length:
        raise InputError(f"chomp of {amount} would consume all {length} steps")
    return slice_axis(x, x.data.ndim - 1, 0, length - amount)


# ---------------------------------------------------------------------------
# convolution


def causal_dilated_conv1d(x: Tensor, weight: Tensor, bias: Tensor | None,
                          dilation: int, pad_mode: str = "left") -> Tensor:
    """Dilated 1-D convolution over ``[batch, c_in, length]``.

    ``weight`` is ``[c_out, c_in, kernel]``.  With ``pad_mode="left"``
    the input is padded by ``(kernel-1)*dilation`` zeros on the left
    only, so output step t sees input steps ``t, t-d, ..., t-(k-1)d``
    and the output keeps the input length.  ``pad_mode="both"`` pads
    both sides symmetrically (output grows by the pad amount and the
    caller chomps the trailing overhang to restore causality).

    Lowered to one GEMM: taps are gathered into a ``[c_in*k, b*l_out]``
    patch matrix and multiplied by the flattened kernel.
    """
    if x.data.ndim != 3:
        raise InputError(f"conv input must be [batch, c_in, length], got {x.shape}")
    if weight.data.ndim != 3:
        raise InputError(f"conv weight must be [c_out, c_in, kernel], got {weight.shape}")
    if dilation < 1:
        raise InputError(f"dilation must be >= 1, got {dilation}")
    if pad_mode not in ("left", "both"):
        raise InputError(f"pad_mode must be 'left' or 'both', got {pad_mode!r}")
    batch, c_in, length = x.data.shape
    c_out, c_in_w, kernel = weight.data.shape
    if c_in_w != c_in:
        raise InputError(f"conv: input has {c_in} channels, weight expects {c_in_w}")
    if bias is not None and bias.data.shape != (c_out,):
        raise InputError(f"conv: bias shape {bias.data.shape} invalid for {c_out} channels")

    pad = (kernel - 1) * dilation
    if pad_mode == "left":
        lo, hi = pad, 0
    else:
        lo, hi = pad, pad
    padded = np.pad(x.data, ((0, 0), (0, 0), (lo, hi)))
    l_out = length + lo + hi - pad

    # cols[c, j] holds tap j of channel c, flattened over (batch, time);
    # reshape to [c_in*kernel, :] matches weight.reshape(c_out, c_in*kernel).
    cols = np.empty((c_in, kernel, batch * l_out), dtype=np.float32)
    for j in range(kernel):
        cols[:, j] = padded[:, :, j * dilation:j * dilation + l_out] \
            .transpose(1, 0, 2).reshape(c_in, batch * l_out)
    cols2 = cols.reshape(c_in * kernel, batch * l_out)
    w2 = weight.data.reshape(c_out, c_in * kernel)
    y2 = w2 @ cols2
    if bias is not None:
        y2 = y2 + bias.data[:, None]
    data = y2.reshape(c_out, batch, l_out).transpose(1, 0, 2)

    inputs = (x, weight) if bias is None else (x, weight, bias)

    def make(out):
        def backprop():
            g2 = out.grad.transpose(1, 0, 2).reshape(c_out, batch * l_out)
            if weight.requires_grad:
                accumulate_grad(weight, (g2 @ cols2.T).reshape(weight.data.shape), fresh=True)
            if bias is not None and bias.requires_grad:
                accumulate_grad(bias, g2.sum(axis=1), fresh=True)
            if x.requires_grad:
                dcols = (w2.T @ g2).reshape(c_in, kernel, batch, l_out)
                dpad = np.zeros_like(padded)
                for j in range(kernel):
                    dpad[:, :, j * dilation:j * dilation + l_out] += \
                        dcols[:, j].transpose(1, 0, 2)
                if hi:
                    accumulate_grad(x, np.ascontiguousarray(dpad[:, :, lo:-hi]), fresh=True)
                elif lo:
                    accumulate_grad(x, np.ascontiguousarray(dpad[:, :, lo:]), fresh=True)
                else:
                    accumulate_grad(x, dpad, fresh=True)
        return backprop

    return _link(data, inputs, make)


# ---------------------------------------------------------------------------
# normalisation


def layer_norm(x: Tensor, gain: Tensor, shift: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise over the trailing axis; statistics in float64."""
    c = x.data.shape[-1]
    if gain.data.shape != (c,) or shift.data.shape != (c,):
        raise InputError(f"layer_norm: gain/shift must be shape ({c},)")
    x64 = x.data.astype(np.float64)
    mean = x64.mean(axis=-1, keepdims=True)
    var = x64.var(axis=-1, keepdims=True)
    scale = np.sqrt(var + eps)
    xhat = (x64 - mean) / scale
    data = (gain.data * xhat + shift.data).astype(np.float32)

    def make(out):
        def backprop():
            g = out.grad.astype(np.float64)
            if gain.requires_grad:
                lead = tuple(range(g.ndim - 1))
                accumulate_grad(gain, (g * xhat).sum(axis=lead), fresh=True)
            if shift.requires_grad:
                lead = tuple(range(g.ndim - 1))
                accumulate_grad(shift, g.sum(axis=lead), fresh=True)
            if x.requires_grad:
                gh = g * gain.data.astype(np.float64)
                dx = (gh - gh.mean(axis=-1, keepdims=True)
                      - xhat * (gh * xhat).mean(axis=-1, keepdims=True)) / scale
                accumulate_grad(x, dx.astype(np.float32), fresh=True)
        return backprop

    return _link(data, (x, gain, shift), make)


def weight_norm(v: Tensor, g: Tensor) -> Tensor:
    """Reparameterise ``w = g * v / ||v||`` per output row.

    ``v`` is ``[c_out, ...]``; the norm is taken over all trailing axes,
    ``g`` is ``[c_out]``.  Keeps the direction and magnitude of each
    output filter independently learnable.
    """
    c_out = v.data.shape[0]
    if g.data.shape != (c_out,):
        raise InputError(f"weight_norm: g must be shape ({c_out},)")
    axes = tuple(range(1, v.data.ndim))
    norm = np.sqrt((v.data.astype(np.float64) ** 2).sum(axis=axes, keepdims=True))
    if not np.all(norm > 0.0):
        raise DomainError("weight_norm: zero-norm direction vector")
    gb = g.data.reshape((c_out,) + (1,) * (v.data.ndim - 1))
    unit = (v.data / norm).astype(np.float32)
    data = gb * unit

    def make(out):
        def backprop():
            gw = out.grad
            dot = (gw.astype(np.float64) * unit).sum(axis=axes, keepdims=True)
            if g.requires_grad:
                accumulate_grad(g, dot.reshape(c_out))
            if v.requires_grad:
                dv = (gb / norm) * (gw - unit * dot.astype(np.float32))
                accumulate_grad(v, dv, fresh=True)
        return backprop

    return _link(data, (v, g), make)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Max-subtracted softmax; safe for rows holding additive masks."""
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    p = (e / e.sum(axis=axis, keepdims=True)).astype(np.float32)

    def make(out):
        def backprop():
            if x.requires_grad:
                g = out.grad
                dot = (g * p).sum(axis=axis, keepdims=True)
                accumulate_grad(x, (g - dot) * p, fresh=True)
        return backprop

    return _link(p, (x,), make)


# ---------------------------------------------------------------------------
# reductions


def tensor_sum(x: Tensor) -> Tensor:
    data = np.float32(x.data.sum(dtype=np.float64))

    def make(out):
        def backprop():
            if x.requires_grad:
                accumulate_grad(x, np.broadcast_to(out.grad, x.data.shape))
        return backprop

    return _link(data, (x,), make)


def mse_loss(pred: Tensor, target) -> Tensor:
    """Mean squared error; the mean is accumulated in float64."""
    target = as_tensor(target)
    if pred.data.shape != target.data.shape:
        raise InputError(
            f"mse_loss: shape mismatch {pred.data.shape} vs {target.data.shape}")
    diff = pred.data - target.data
    n = diff.size
    data = np.float32((diff.astype(np.float64) ** 2).sum() / n)

    def make(out):
        def backprop():
            scale = out.grad * np.float32(2.0 / n)
            if pred.requires_grad:
                accumulate_grad(pred, scale * diff, fresh=True)
            if target.requires_grad:
                accumulate_grad(target, -scale * diff, fresh=True)
        return backprop

    return _link(data, (pred, target), make)


# ---------------------------------------------------------------------------
# attention


def chunked_self_attention(x: Tensor, wq: Tensor, bq: Tensor, wk: Tensor,
                           bk: Tensor, wv: Tensor, bv: Tensor, wo: Tensor,
                           bo: Tensor, heads: int, chunk: int,
                           dropout_p: float = 0.0, training: bool = False,
                           rng: np.random.Generator | None = None,
                           probs_sink: list | None = None) -> Tensor:
    """Multi-head self-attention restricted to non-overlapping chunks.

    ``x`` is ``[batch, length, channels]``.  The sequence is zero-padded
    on the *left* to a multiple of ``chunk`` (keeping the most recent
    steps rightmost), split into ``length/chunk`` blocks, and attention
    runs independently inside each block, so score work grows linearly
    in length instead of quadratically.  Padded key columns are masked
    with a large negative constant before the softmax and the padded
    rows are sliced off afterwards.

    Composed entirely from primitive ops, so the backward pass is
    inherited from the graph.  When ``probs_sink`` is a list the
    post-softmax pattern ``[batch, blocks, heads, chunk, chunk]`` is
    appended to it for inspection.
    """
    global _SCORE_ENTRIES
    if x.data.ndim != 3:
        raise InputError(f"attention input must be [batch, length, channels], got {x.shape}")
    batch, length, channels = x.data.shape
    if heads < 1 or channels % heads != 0:
        raise InputError(f"heads must divide channels ({channels}), got {heads}")
    if chunk < 1:
        raise InputError(f"chunk must be >= 1, got {chunk}")
    head_dim = channels // heads

    pad = (-length) % chunk
    xp = pad_axis(x, 1, pad, 0)
    padded_len = length + pad
    blocks = padded_len // chunk

    q = linear(xp, wq, bq)
    k = linear(xp, wk, bk)
    v = linear(xp, wv, bv)

    def split(t):
        t = reshape(t, (batch, blocks, chunk, heads, head_dim))
        return transpose(t, (0, 1, 3, 2, 4))  # [b, blocks, heads, chunk, d]

    q, k, v = split(q), split(k), split(v)
    scores = matmul(q, transpose(k, (0, 1, 2, 4, 3)))
    scores = mul(scores, 1.0 / math.sqrt(head_dim))
    _SCORE_ENTRIES += blocks * chunk * chunk

    if pad:
        # Padding lands entirely in the first block: mask those keys.
        mask = np.zeros((1, blocks, 1, 1, chunk), dtype=np.float32)
        mask[0, 0, 0, 0, :pad] = MASK_VALUE
        scores = add(scores, Tensor(mask))

    probs = softmax(scores, axis=-1)
    if probs_sink is not None:
        probs_sink.append(np.array(probs.data))
    probs = dropout(probs, dropout_p, training, rng)

    ctx = matmul(probs, v)
    ctx = transpose(ctx, (0, 1, 3, 2, 4))
    ctx = reshape(ctx, (batch, padded_len, channels))
    if pad:
        ctx = slice_axis(ctx, 1, pad, padded_len)
    return linear(ctx, wo, bo)
