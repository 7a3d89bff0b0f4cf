"""Small tape-based reverse-mode autodiff over float64 numpy arrays.

Operations executed inside an active :class:`Tape` are recorded when at least
one input requires a gradient; outside a tape they run as plain numpy code.
"""

from __future__ import annotations

import threading
from typing import Callable, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "Tensor",
    "Tape",
    "backward",
    "add",
    "scale",
    "mul",
    "tensor_sum",
    "conv2d",
    "depthwise_conv2d",
    "dw_separable_conv",
    "relu",
    "global_avg_pool",
    "flatten",
    "linear",
    "softmax",
    "cross_entropy",
    "channel_slice",
    "concat_channels",
    "block_mix",
    "finite_diff_check",
]


class Tensor:
    """Dense float64 array that can take part in reverse-mode differentiation."""

    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        self.data = np.ascontiguousarray(data, dtype=np.float64)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def zero_grad(self) -> None:
        self.grad = None

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __mul__(self, other: "Tensor") -> "Tensor":
        return mul(self, other)

    def sum(self) -> "Tensor":
        return tensor_sum(self)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{label})"


_state = threading.local()


def _current_tape() -> Optional["Tape"]:
    stack = getattr(_state, "stack", None)
    return stack[-1] if stack else None


class Tape:
    """Records operations in execution order; one backward pass per tape.

    Usage::

        with Tape() as tape:
            loss = cross_entropy(linear(x, w, b), labels)
        tape.backward(loss)
    """

    def __init__(self):
        self.records: list[tuple[tuple[Tensor, ...], Tensor, Callable]] = []
        self.consumed = False

    def __enter__(self) -> "Tape":
        if not hasattr(_state, "stack"):
            _state.stack = []
        _state.stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _state.stack.pop()

    def record(self, inputs: tuple, output: Tensor, fn: Callable) -> None:
        self.records.append((inputs, output, fn))

    def backward(self, loss: Tensor) -> None:
        if self.consumed:
            raise RuntimeError("tape already consumed by a previous backward pass")
        if loss.data.size != 1:
            raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
        self.consumed = True
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        produced = set()
        leaves: dict[int, Tensor] = {}
        for inputs, out, fn in reversed(self.records):
            produced.add(id(out))
            g = grads.pop(id(out), None)
            if g is None:
                continue
            in_grads = fn(g)
            for t, tg in zip(inputs, in_grads):
                if tg is None or not t.requires_grad:
                    continue
                key = id(t)
                if key in grads:
                    grads[key] = grads[key] + tg
                else:
                    grads[key] = tg
                    leaves[key] = t
        if id(loss) not in produced and loss.requires_grad:
            leaves[id(loss)] = loss
        for key, t in leaves.items():
            if key not in produced and key in grads:
                t.grad = grads[key]
        self.records = []


def backward(tape: Tape, loss: Tensor) -> None:
    """Populate ``.grad`` on every leaf reachable from ``loss``."""
    tape.backward(loss)


def _result(data: np.ndarray, inputs: tuple, fn: Callable) -> Tensor:
    out = Tensor(data)
    tape = _current_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.record(inputs, out, fn)
    return out


# ----------------------------------------------------------------------------
# elementwise and structural ops
# ----------------------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ValueError(f"add: shape mismatch {a.shape} vs {b.shape}")
    return _result(a.data + b.data, (a, b), lambda g: (g, g))


def scale(x: Tensor, s: Tensor) -> Tensor:
    """Multiply ``x`` by the single-element tensor ``s``."""
    if s.size != 1:
        raise ValueError(f"scale: factor must have one element, got shape {s.shape}")
    sv = s.data.reshape(-1)[0]

    def fn(g):
        gs = np.array(np.sum(g * x.data)).reshape(s.shape) if s.requires_grad else None
        return (g * sv, gs)

    return _result(x.data * sv, (x, s), fn)


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ValueError(f"mul: shape mismatch {a.shape} vs {b.shape}")
    return _result(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def tensor_sum(x: Tensor) -> Tensor:
    return _result(np.array(x.data.sum()), (x,), lambda g: (np.full(x.shape, g),))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _result(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def channel_slice(x: Tensor, start: int, stop: int) -> Tensor:
    """Channels ``[start, stop)`` of a (B, C, H, W) tensor."""

    def fn(g):
        gx = np.zeros_like(x.data)
        gx[:, start:stop] = g
        return (gx,)

    return _result(x.data[:, start:stop].copy(), (x,), fn)


def concat_channels(parts: Sequence[Tensor]) -> Tensor:
    parts = tuple(parts)
    bounds = np.cumsum([0] + [p.shape[1] for p in parts])

    def fn(g):
        return tuple(g[:, bounds[i]:bounds[i + 1]] for i in range(len(parts)))

    return _result(np.concatenate([p.data for p in parts], axis=1), parts, fn)


def block_mix(x: Tensor, gamma: Tensor) -> Tensor:
    """Mix the K contiguous channel blocks of ``x`` through a K x K matrix.

    Output block k is ``sum_l gamma[l, k] * x_block_l``.
    """
    K = gamma.shape[0]
    if gamma.shape != (K, K):
        raise ValueError(f"block_mix: gamma must be square, got {gamma.shape}")
    B, C, H, W = x.shape
    if C % K:
        raise ValueError(f"block_mix: {C} channels do not split into {K} blocks")
    xb = x.data.reshape(B, K, C // K, H, W)
    out = np.einsum("blchw,lk->bkchw", xb, gamma.data).reshape(B, C, H, W)

    def fn(g):
        gb = g.reshape(B, K, C // K, H, W)
        gx = np.einsum("bkchw,lk->blchw", gb, gamma.data).reshape(x.shape) if x.requires_grad else None
        gg = np.einsum("blchw,bkchw->lk", xb, gb) if gamma.requires_grad else None
        return (gx, gg)

    return _result(out, (x, gamma), fn)


# ----------------------------------------------------------------------------
# convolutions
# ----------------------------------------------------------------------------


def _out_size(n: int, k: int, stride: int, pad: int) -> int:
    return (n + 2 * pad - k) // stride + 1


def _check_conv_args(x: Tensor, k: int, stride: int, pad: int) -> None:
    if x.data.ndim != 4:
        raise ValueError(f"conv input must be (batch, channels, H, W), got shape {x.shape}")
    if k % 2 == 0:
        raise ValueError(f"kernel size must be odd, got {k}")
    if stride < 1 or pad < 0:
        raise ValueError(f"invalid stride={stride} / pad={pad}")
    if _out_size(x.shape[2], k, stride, pad) < 1 or _out_size(x.shape[3], k, stride, pad) < 1:
        raise ValueError(f"kernel {k} too large for input {x.shape[2:]} with pad {pad}")


def _cols(xp: np.ndarray, k: int, stride: int, Ho: int, Wo: int) -> np.ndarray:
    """(B*Ho*Wo, C*k*k) patch matrix of an already padded input."""
    B, C = xp.shape[:2]
    win = sliding_window_view(xp, (k, k), axis=(2, 3))
    win = win[:, :, : stride * (Ho - 1) + 1 : stride, : stride * (Wo - 1) + 1 : stride]
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(B * Ho * Wo, C * k * k)


def _dw_cols(xp: np.ndarray, k: int, stride: int, Ho: int, Wo: int) -> np.ndarray:
    """(C, B*Ho*Wo, k*k) per-channel patch stacks of an already padded input."""
    B, C = xp.shape[:2]
    win = sliding_window_view(xp, (k, k), axis=(2, 3))
    win = win[:, :, : stride * (Ho - 1) + 1 : stride, : stride * (Wo - 1) + 1 : stride]
    return win.transpose(1, 0, 2, 3, 4, 5).reshape(C, B * Ho * Wo, k * k)


def _transpose_canvas(g: np.ndarray, stride: int, k: int, pad: int, H: int, W: int) -> np.ndarray:
    """Dilated, shifted copy of the output gradient ``g``.

    Correlating the returned (B, C, H + k - 1, W + k - 1) array with the flipped
    kernel at stride 1 gives exactly the (H, W) input gradient. Gradient rows
    that only touch padding fall outside the canvas and are dropped.
    """
    B, C, Ho, Wo = g.shape
    off = k - 1 - pad
    rows = np.arange(Ho) * stride + off
    cols = np.arange(Wo) * stride + off
    rk = (rows >= 0) & (rows < H + k - 1)
    ck = (cols >= 0) & (cols < W + k - 1)
    canvas = np.zeros((B, C, H + k - 1, W + k - 1))
    canvas[:, :, rows[rk][:, None], cols[ck][None, :]] = g[:, :, rk][:, :, :, ck]
    return canvas


def conv2d(x: Tensor, w: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlation of (B, C, H, W) input with (O, C, k, k) weights, no bias."""
    O, C, k, k2 = w.shape
    if k != k2:
        raise ValueError(f"conv2d: kernel must be square, got {w.shape}")
    _check_conv_args(x, k, stride, pad)
    B, Cx, H, W = x.shape
    if Cx != C:
        raise ValueError(f"conv2d: input has {Cx} channels but weight expects {C} (weight shape {w.shape})")
    Ho, Wo = _out_size(H, k, stride, pad), _out_size(W, k, stride, pad)
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    cols = _cols(xp, k, stride, Ho, Wo)
    wmat = w.data.reshape(O, C * k * k)
    out = (cols @ wmat.T).reshape(B, Ho, Wo, O).transpose(0, 3, 1, 2)

    def fn(g):
        gw = gx = None
        if w.requires_grad:
            g2 = g.transpose(0, 2, 3, 1).reshape(B * Ho * Wo, O)
            gw = (g2.T @ cols).reshape(w.shape)
        if x.requires_grad:
            canvas = _transpose_canvas(g, stride, k, pad, H, W)
            wflip = w.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3).reshape(C, O * k * k)
            gx = (_cols(canvas, k, 1, H, W) @ wflip.T).reshape(B, H, W, C).transpose(0, 3, 1, 2)
        return (gx, gw)

    return _result(np.ascontiguousarray(out), (x, w), fn)


def depthwise_conv2d(x: Tensor, w: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """Per-channel spatial convolution with (C, 1, k, k) weights."""
    C, one, k, k2 = w.shape
    if one != 1 or k != k2:
        raise ValueError(f"depthwise weight must be (C, 1, k, k), got {w.shape}")
    _check_conv_args(x, k, stride, pad)
    B, Cx, H, W = x.shape
    if Cx != C:
        raise ValueError(f"depthwise_conv2d: input has {Cx} channels, depthwise weight has {C}")
    Ho, Wo = _out_size(H, k, stride, pad), _out_size(W, k, stride, pad)
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    cols = _dw_cols(xp, k, stride, Ho, Wo)
    kern = w.data.reshape(C, k * k, 1)
    out = (cols @ kern).reshape(C, B, Ho, Wo).transpose(1, 0, 2, 3)

    def fn(g):
        gw = gx = None
        if w.requires_grad:
            gc = g.transpose(1, 0, 2, 3).reshape(C, B * Ho * Wo, 1)
            gw = (cols.transpose(0, 2, 1) @ gc).reshape(w.shape)
        if x.requires_grad:
            canvas = _transpose_canvas(g, stride, k, pad, H, W)
            kflip = w.data[:, 0, ::-1, ::-1].reshape(C, k * k, 1)
            gx = (_dw_cols(canvas, k, 1, H, W) @ kflip).reshape(C, B, H, W).transpose(1, 0, 2, 3)
        return (gx, gw)

    return _result(np.ascontiguousarray(out), (x, w), fn)


def dw_separable_conv(x: Tensor, w_depth: Tensor, w_point: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """Depthwise spatial convolution followed by a 1x1 cross-channel convolution."""
    if w_point.shape[2:] != (1, 1):
        raise ValueError(f"pointwise weight must be (C_out, C, 1, 1), got {w_point.shape}")
    if w_point.shape[1] != w_depth.shape[0]:
        raise ValueError(
            f"pointwise weight expects {w_point.shape[1]} channels but depthwise stage yields {w_depth.shape[0]}"
        )
    return conv2d(depthwise_conv2d(x, w_depth, stride, pad), w_point, 1, 0)


# ----------------------------------------------------------------------------
# head and loss
# ----------------------------------------------------------------------------


def global_avg_pool(x: Tensor) -> Tensor:
    B, C, H, W = x.shape
    n = H * W

    def fn(g):
        return (np.broadcast_to(g / n, x.shape).copy(),)

    return _result(x.data.mean(axis=(2, 3), keepdims=True), (x,), fn)


def flatten(x: Tensor) -> Tensor:
    shape = x.shape
    return _result(x.data.reshape(shape[0], -1), (x,), lambda g: (g.reshape(shape),))


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Affine map ``x @ w.T + b`` for (batch, F) input and (classes, F) weights."""
    if x.data.ndim != 2 or w.data.ndim != 2 or x.shape[1] != w.shape[1]:
        raise ValueError(f"linear: cannot apply weight {w.shape} to input {x.shape}")
    if b.shape != (w.shape[0],):
        raise ValueError(f"linear: bias shape {b.shape} does not match {w.shape[0]} outputs")

    def fn(g):
        return (g @ w.data, g.T @ x.data, g.sum(axis=0))

    return _result(x.data @ w.data.T + b.data, (x, w, b), fn)


def softmax(z: np.ndarray, axis: int = -1) -> np.ndarray:
    e = np.exp(z - z.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under softmax(logits)."""
    labels = np.asarray(labels)
    B, classes = logits.shape
    if labels.shape != (B,):
        raise ValueError(f"cross_entropy: expected {B} labels, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= classes):
        raise ValueError(f"cross_entropy: labels must lie in [0, {classes}), got range [{labels.min()}, {labels.max()}]")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    rows = np.arange(B)
    loss = -logp[rows, labels].mean()

    def fn(g):
        d = np.exp(logp)
        d[rows, labels] -= 1.0
        return (d * (g / B),)

    return _result(np.array(loss), (logits,), fn)


# ----------------------------------------------------------------------------
# verification
# ----------------------------------------------------------------------------


def finite_diff_check(f: Callable[[], Tensor], x, eps: float = 1e-5) -> float:
    """Max relative error between autodiff and central-difference gradients.

    ``f`` takes no arguments and must rebuild its graph from the current values
    of ``x`` (a tensor or a list of tensors) on every call. The relative error
    uses the denominator ``max(|a|, |b|, 1e-8)``.
    """
    params = [x] if isinstance(x, Tensor) else list(x)
    saved = [p.requires_grad for p in params]
    for p in params:
        p.requires_grad = True
        p.grad = None
    with Tape() as tape:
        loss = f()
    tape.backward(loss)
    worst = 0.0
    for p, flag in zip(params, saved):
        auto = p.grad if p.grad is not None else np.zeros_like(p.data)
        p.grad = None
        flat = p.data.reshape(-1)
        num = np.empty(flat.size)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            hi = f().item()
            flat[i] = orig - eps
            lo = f().item()
            flat[i] = orig
            num[i] = (hi - lo) / (2 * eps)
        a = auto.reshape(-1)
        denom = np.maximum(np.maximum(np.abs(a), np.abs(num)), 1e-8)
        if flat.size:
            worst = max(worst, float(np.max(np.abs(a - num) / denom)))
        p.requires_grad = flag
    return worst
