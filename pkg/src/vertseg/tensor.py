"""Dense NCHW tensors with tape-based reverse-mode autodiff.

Only the operations the U-Net and its loss need are provided. Every op checks
its output for NaN/Inf and raises :class:`NumericalError` instead of letting
non-finite values propagate.

Usage::

    with Graph() as g:
        y = conv2d(x, w, b)
        loss = sum_all(y)
    g.backward(loss)
"""
from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class DimensionError(ValueError):
    pass


class GraphError(RuntimeError):
    pass


class NumericalError(ArithmeticError):
    pass


class Tensor:
    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        arr = np.array(data, dtype=dtype if dtype is not None else None, copy=True)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float32)
        self.data = np.ascontiguousarray(arr)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag}, requires_grad={self.requires_grad})"


@dataclass
class _Record:
    kind: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class Graph:
    """Tape of op records in execution order, confined to the building thread."""

    records: list[_Record] = field(default_factory=list)
    _spent: bool = False

    def __enter__(self) -> "Graph":
        _local.stack = getattr(_local, "stack", []) + [self]
        return self

    def __exit__(self, *exc) -> None:
        _local.stack.pop()

    def __len__(self) -> int:
        return len(self.records)

    def record(self, kind, inputs, output, backward) -> None:
        self._spent = False
        self.records.append(_Record(kind, tuple(inputs), output, backward))

    def clear(self) -> None:
        self.records.clear()

    def backward(self, loss: Tensor) -> None:
        backward(self, loss)


_local = threading.local()


def active_graph() -> Graph | None:
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


def backward(graph: Graph, loss: Tensor) -> None:
    """Accumulate d(loss)/d(t) into ``t.grad`` for every tensor requiring grad.

    The tape is cleared afterwards; a second call without a new forward pass
    raises :class:`GraphError`.
    """
    if loss.data.size != 1:
        raise GraphError(f"backward needs a scalar loss, got shape {loss.shape}")
    if graph._spent or not graph.records:
        raise GraphError("graph is empty; run a forward pass before backward")
    if not any(r.output is loss for r in graph.records):
        raise GraphError("loss was not produced on this graph")

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for rec in reversed(graph.records):
        g_out = grads.pop(id(rec.output), None)
        if g_out is None:
            continue
        for t, g in zip(rec.inputs, rec.backward(g_out)):
            if g is None or not t.requires_grad:
                continue
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + g
            else:
                grads[key] = g
    # leaves: anything left in grads that the user asked gradients for
    leaves = {}
    for rec in graph.records:
        for t in rec.inputs:
            leaves[id(t)] = t
    for key, g in grads.items():
        t = leaves.get(key)
        if t is None or not t.requires_grad:
            continue
        _check_finite(g, "gradient")
        t.grad = g if t.grad is None else t.grad + g
    graph.clear()
    graph._spent = True


def _check_finite(arr: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(arr)):
        bad = int(np.size(arr) - np.count_nonzero(np.isfinite(arr)))
        raise NumericalError(f"{what}: {bad} non-finite value(s)")


def _emit(kind: str, inputs: Sequence[Tensor], out: np.ndarray, bwd) -> Tensor:
    _check_finite(out, kind)
    needs = any(t.requires_grad for t in inputs)
    result = Tensor.__new__(Tensor)
    result.data = out
    result.requires_grad = needs
    result.grad = None
    result.name = None
    g = active_graph()
    if needs and g is not None:
        g.record(kind, inputs, result, bwd)
    return result


# --- convolution ---------------------------------------------------------

def _im2col(xp: np.ndarray, k: int, h: int, w: int) -> np.ndarray:
    # xp: (N, C, H+k-1, W+k-1) -> (N, H*W, C*k*k)
    n, c = xp.shape[:2]
    win = sliding_window_view(xp, (k, k), axis=(2, 3))  # N,C,H,W,k,k
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(n, h * w, c * k * k)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Stride-1 convolution with zero "same" padding; odd square kernels only.

    Inputs smaller than the kernel are allowed (the padding covers them), which
    the bottom of a deep U-Net on small images needs.
    """
    if x.data.ndim != 4 or weight.data.ndim != 4:
        raise DimensionError("conv2d expects x[N,C,H,W] and weight[Cout,Cin,k,k]")
    n, cin, h, w = x.shape
    cout, wcin, kh, kw = weight.shape
    if wcin != cin:
        raise DimensionError(f"conv2d: input has {cin} channels, weight expects {wcin}")
    if kh != kw or kh % 2 == 0:
        raise DimensionError(f"conv2d: kernel must be odd and square, got {kh}x{kw}")
    if bias is not None and bias.shape != (cout,):
        raise DimensionError(f"conv2d: bias shape {bias.shape} != ({cout},)")
    k, p = kh, kh // 2
    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p)))
    cols = _im2col(xp, k, h, w)
    wmat = weight.data.reshape(cout, -1)
    out = cols @ wmat.T  # N, HW, Cout
    if bias is not None:
        out = out + bias.data
    out = np.ascontiguousarray(out.transpose(0, 2, 1)).reshape(n, cout, h, w)

    def bwd(g):
        gm = g.reshape(n, cout, h * w)  # N, Cout, HW
        gw = gb = gx = None
        if weight.requires_grad:
            gw = np.einsum("noq,nqk->ok", gm, cols, optimize=True).reshape(weight.shape)
        if bias is not None and bias.requires_grad:
            gb = gm.sum(axis=(0, 2))
        if x.requires_grad:
            gcols = np.matmul(gm.transpose(0, 2, 1), wmat)  # N, HW, Cin*k*k
            gcols = gcols.reshape(n, h, w, cin, k, k)
            gxp = np.zeros_like(xp)
            for i in range(k):
                for j in range(k):
                    gxp[:, :, i:i + h, j:j + w] += gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            gx = gxp[:, :, p:p + h, p:p + w]
        return gx, gw, gb

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _emit("conv2d", inputs, out, bwd)


def maxpool2x2(x: Tensor) -> Tensor:
    """2x2 stride-2 max pool; ties go to the first element in row-major window order."""
    if x.data.ndim != 4:
        raise DimensionError("maxpool2x2 expects x[N,C,H,W]")
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise DimensionError(f"maxpool2x2 needs even spatial dims, got {h}x{w}")
    win = x.data.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
    idx = win.argmax(axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]

    def bwd(g):
        gw = np.zeros(win.shape, dtype=g.dtype)
        np.put_along_axis(gw, idx[..., None], g[..., None], axis=-1)
        gx = gw.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
        return (gx,)

    return _emit("maxpool2x2", (x,), np.ascontiguousarray(out), bwd)


def upconv2x2(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Stride-2 transposed convolution with a 2x2 kernel; doubles H and W."""
    if x.data.ndim != 4 or weight.data.ndim != 4:
        raise DimensionError("upconv2x2 expects x[N,Cin,H,W] and weight[Cin,Cout,2,2]")
    n, cin, h, w = x.shape
    wcin, cout, kh, kw = weight.shape
    if wcin != cin:
        raise DimensionError(f"upconv2x2: input has {cin} channels, weight expects {wcin}")
    if (kh, kw) != (2, 2):
        raise DimensionError(f"upconv2x2: kernel must be 2x2, got {kh}x{kw}")
    if bias is not None and bias.shape != (cout,):
        raise DimensionError(f"upconv2x2: bias shape {bias.shape} != ({cout},)")
    # (N, H, W, Cin) @ (Cin, Cout*4)
    xm = x.data.transpose(0, 2, 3, 1).reshape(-1, cin)
    wm = weight.data.reshape(cin, cout * 4)
    y = (xm @ wm).reshape(n, h, w, cout, 2, 2)
    out = y.transpose(0, 3, 1, 4, 2, 5).reshape(n, cout, 2 * h, 2 * w)
    if bias is not None:
        out = out + bias.data[None, :, None, None]
    out = np.ascontiguousarray(out)

    def bwd(g):
        gy = g.reshape(n, cout, h, 2, w, 2).transpose(0, 2, 4, 1, 3, 5).reshape(-1, cout * 4)
        gx = gw = gb = None
        if x.requires_grad:
            gx = (gy @ wm.T).reshape(n, h, w, cin).transpose(0, 3, 1, 2)
        if weight.requires_grad:
            gw = (xm.T @ gy).reshape(weight.shape)
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        return gx, gw, gb

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _emit("upconv2x2", inputs, out, bwd)


# --- elementwise -----------------------------------------------------------

def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    out = np.where(mask, x.data, 0).astype(x.dtype, copy=False)
    return _emit("relu", (x,), out, lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    z = x.data
    e = np.exp(-np.abs(z))
    out = np.where(z >= 0, 1 / (1 + e), e / (1 + e)).astype(x.dtype, copy=False)
    return _emit("sigmoid", (x,), out, lambda g: (g * out * (1 - out),))


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 4 or b.data.ndim != 4:
        raise DimensionError("concat_channels expects two NCHW tensors")
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise DimensionError(f"concat_channels: incompatible shapes {a.shape} and {b.shape}")
    ca = a.shape[1]
    out = np.concatenate([a.data, b.data], axis=1)
    return _emit("concat", (a, b), out, lambda g: (g[:, :ca], g[:, ca:]))


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product of equally shaped tensors."""
    if a.shape != b.shape:
        raise DimensionError(f"mul: shapes {a.shape} and {b.shape} differ")
    out = a.data * b.data
    return _emit("mul", (a, b), out, lambda g: (g * b.data, g * a.data))


def sum_all(x: Tensor) -> Tensor:
    out = np.asarray(x.data.sum(), dtype=x.dtype)
    return _emit("sum", (x,), out, lambda g: (np.broadcast_to(g, x.shape).astype(x.dtype),))


def custom_op(kind: str, inputs: Sequence[Tensor], out: np.ndarray, bwd) -> Tensor:
    """Record a fused op defined elsewhere (e.g. a loss) on the active graph.

    ``bwd(g_out)`` must return one gradient (or None) per input.
    """
    return _emit(kind, tuple(inputs), np.asarray(out), bwd)


# --- finite-difference checking ---------------------------------------------

def grad_check(
    fn: Callable[..., Tensor],
    inputs: Sequence[Tensor],
    h: float = 1e-5,
    max_entries: int | None = None,
    seed: int = 0,
) -> dict[str, float]:
    """Compare autodiff gradients of scalar ``fn(*inputs)`` with central differences.

    Inputs are promoted to float64. The relative error of an input is
    ``max|analytic - numeric| / max(max|analytic|, max|numeric|)`` over the
    checked entries (error 0 when both vanish). ``max_entries`` caps how many
    randomly chosen entries per input are perturbed.
    """
    xs = [Tensor(t.data.astype(np.float64), requires_grad=True, name=t.name) for t in inputs]
    with Graph() as g:
        loss = fn(*xs)
    if loss.data.size != 1:
        raise GraphError("grad_check needs a scalar-valued function")
    g.backward(loss)

    rng = np.random.default_rng(seed)
    report = {}
    for pos, x in enumerate(xs):
        analytic = x.grad if x.grad is not None else np.zeros_like(x.data)
        flat = x.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = np.sort(rng.choice(flat.size, size=max_entries, replace=False))
        numeric = np.empty(idx.size)
        for j, i in enumerate(idx):
            orig = flat[i]
            flat[i] = orig + h
            fp = float(fn(*xs).data)
            flat[i] = orig - h
            fm = float(fn(*xs).data)
            flat[i] = orig
            numeric[j] = (fp - fm) / (2 * h)
        a = analytic.reshape(-1)[idx]
        scale = max(np.abs(a).max(initial=0.0), np.abs(numeric).max(initial=0.0))
        err = 0.0 if scale == 0 else float(np.abs(a - numeric).max() / scale)
        report[x.name or f"input{pos}"] = err
    return report
