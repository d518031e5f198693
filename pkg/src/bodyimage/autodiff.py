"""Dense tensors with tape-based reverse-mode differentiation.

Only the handful of layers the forward model needs are provided.  Every
operation accepts an optional leading batch dimension; the trailing
dimensions must match exactly, nothing is ever broadcast.

Typical use::

    tape = Tape()
    w = tape.variable(weights)
    x = tape.constant(inputs)
    loss = l1_mean(relu(fully_connected(x, w, b)), target)
    grads = backward(tape, loss)
    grads[w]
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

SELU_LAMBDA = 1.0507009873554805
SELU_ALPHA = 1.6732632423543772


class ShapeError(ValueError):
    """Operand shapes disagree."""


class Tensor:
    """A value recorded on a tape.

    ``requires_grad`` is true for variables and for anything computed from
    them (except through :func:`stop_gradient`).
    """

    __slots__ = ("value", "tape", "index", "requires_grad", "name")

    def __init__(self, value: np.ndarray, tape: "Tape", requires_grad: bool, name: str | None = None):
        self.value = value
        self.tape = tape
        self.requires_grad = requires_grad
        self.name = name
        self.index = -1

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, requires_grad={self.requires_grad})"


@dataclass
class _Node:
    output: Tensor
    inputs: tuple[Tensor, ...]
    # vjp(grad_out, needed) -> one gradient (or None) per input
    vjp: Callable[[np.ndarray, tuple[bool, ...]], tuple[np.ndarray | None, ...]] | None
    op: str = "leaf"


class Tape:
    """Ordered record of every tensor produced during a forward pass.

    Nodes are appended as operations run, so the list is topologically
    sorted by construction.
    """

    def __init__(self, dtype=np.float32):
        self.dtype = np.dtype(dtype)
        self.nodes: list[_Node] = []
        self.variables: list[Tensor] = []

    def _record(self, value, inputs=(), vjp=None, requires_grad=None, name=None, op="leaf") -> Tensor:
        if requires_grad is None:
            requires_grad = any(t.requires_grad for t in inputs)
        out = Tensor(value, self, requires_grad, name)
        out.index = len(self.nodes)
        self.nodes.append(_Node(out, tuple(inputs), vjp, op))
        return out

    def variable(self, value, name: str | None = None) -> Tensor:
        """Register a differentiable leaf (a parameter)."""
        t = self._record(np.array(value, dtype=self.dtype), requires_grad=True, name=name)
        self.variables.append(t)
        return t

    def constant(self, value, name: str | None = None) -> Tensor:
        return self._record(np.array(value, dtype=self.dtype), requires_grad=False, name=name)

    def __len__(self) -> int:
        return len(self.nodes)

    def clear(self) -> None:
        """Drop every recorded node.

        Tensors point back at their tape, so a finished tape is a reference
        cycle holding all activations; clearing it frees them immediately
        instead of waiting for the cyclic collector.
        """
        self.nodes.clear()
        self.variables.clear()


def _tape_of(*tensors: Tensor) -> Tape:
    tape = tensors[0].tape
    for t in tensors[1:]:
        if t.tape is not tape:
            raise ValueError("operands were recorded on different tapes")
    return tape


def _require(cond: bool, message: str) -> None:
    if not cond:
        raise ShapeError(message)


# ---------------------------------------------------------------------------
# Layers
# ---------------------------------------------------------------------------


def fully_connected(x: Tensor, weights: Tensor, bias: Tensor) -> Tensor:
    """``y = W x + b`` for ``x`` of shape ``(in,)`` or ``(batch, in)``."""
    tape = _tape_of(x, weights, bias)
    _require(weights.value.ndim == 2, f"weights must be 2-D, got {weights.shape}")
    n_out, n_in = weights.shape
    _require(bias.shape == (n_out,), f"bias shape {bias.shape} != ({n_out},)")
    _require(x.value.ndim in (1, 2) and x.shape[-1] == n_in, f"input shape {x.shape} incompatible with weights {weights.shape}")
    xv, wv = x.value, weights.value
    y = xv @ wv.T + bias.value

    def vjp(g, needed):
        gx = g @ wv if needed[0] else None
        if xv.ndim == 1:
            gw = np.outer(g, xv) if needed[1] else None
            gb = g if needed[2] else None
        else:
            gw = g.T @ xv if needed[1] else None
            gb = g.sum(axis=0) if needed[2] else None
        return gx, gw, gb

    return tape._record(y, (x, weights, bias), vjp, op="fully_connected")


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    """Reshape to ``shape``; the element count must agree exactly."""
    shape = tuple(int(d) for d in shape)
    _require(int(np.prod(shape)) == x.value.size, f"cannot reshape {x.shape} to {shape}")
    old_shape = x.shape
    return x.tape._record(x.value.reshape(shape), (x,), lambda g, needed: (g.reshape(old_shape),), op="reshape")


def crop2d(x: Tensor, top: int, left: int, height: int, width: int) -> Tensor:
    """Spatial window of an NHWC (or HWC) tensor; the gradient is zero outside it."""
    v = x.value
    rows, cols = v.shape[-3], v.shape[-2]
    _require(v.ndim in (3, 4) and 0 <= top and 0 <= left and top + height <= rows and left + width <= cols
             and height > 0 and width > 0, f"cannot crop {height}x{width} at ({top}, {left}) from {x.shape}")
    window = (Ellipsis, slice(top, top + height), slice(left, left + width), slice(None))

    def vjp(g, needed):
        full = np.zeros_like(v)
        full[window] = g
        return (full,)

    return x.tape._record(np.ascontiguousarray(v[window]), (x,), vjp, op="crop2d")


def _as_batch(v: np.ndarray) -> tuple[np.ndarray, bool]:
    if v.ndim == 3:
        return v[None], True
    return v, False


def _conv3x3(xv: np.ndarray, kernels: np.ndarray, bias: np.ndarray):
    """Batched same-padded 3x3 convolution on NHWC data.

    Returns the output and a function mapping the output gradient (and a
    ``needed`` triple) to ``(gx, gk, gb)``.
    """
    n, h, w, c_in = xv.shape
    c_out = kernels.shape[3]
    # Rows go first so that a shift along y is a contiguous slice; the three
    # x-taps are unrolled into the channel axis.
    padded = np.zeros((h + 2, n, w + 2, c_in), dtype=xv.dtype)
    padded[1:-1, :, 1:-1] = xv.transpose(1, 0, 2, 3)
    taps = np.empty((h + 2, n, w, 3, c_in), dtype=xv.dtype)
    for kx in range(3):
        taps[:, :, :, kx] = padded[:, :, kx:kx + w]
    del padded
    taps = taps.reshape(h + 2, n * w, 3 * c_in)
    krows = kernels.reshape(3, 3 * c_in, c_out)
    y = taps[0:h].reshape(-1, 3 * c_in) @ krows[0]
    y += taps[1:h + 1].reshape(-1, 3 * c_in) @ krows[1]
    y += taps[2:h + 2].reshape(-1, 3 * c_in) @ krows[2]
    y += bias
    y = np.ascontiguousarray(y.reshape(h, n, w, c_out).transpose(1, 0, 2, 3))

    def pullback(g, needed):
        g_rows = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(h * n * w, c_out)
        gk = gb = gx = None
        if needed[1]:
            gk = np.stack([taps[ky:ky + h].reshape(-1, 3 * c_in).T @ g_rows for ky in range(3)])
            gk = gk.reshape(kernels.shape)
        if needed[2]:
            gb = g_rows.sum(axis=0)
        if needed[0] and c_out < c_in:
            # narrow outputs: correlate the output gradient with the flipped,
            # transposed kernel instead of scattering the wide tap gradient
            flipped = np.ascontiguousarray(kernels[::-1, ::-1].transpose(0, 1, 3, 2))
            gx, _ = _conv3x3(g, flipped, np.zeros(c_in, dtype=g.dtype))
        elif needed[0]:
            gtaps = np.zeros((h + 2, n * w, 3 * c_in), dtype=g.dtype)
            for ky in range(3):
                gtaps[ky:ky + h] += (g_rows @ krows[ky].T).reshape(h, n * w, 3 * c_in)
            gtaps = gtaps.reshape(h + 2, n, w, 3, c_in)
            gpad = np.zeros((h + 2, n, w + 2, c_in), dtype=g.dtype)
            for kx in range(3):
                gpad[:, :, kx:kx + w] += gtaps[:, :, :, kx]
            gx = np.ascontiguousarray(gpad[1:-1, :, 1:-1].transpose(1, 0, 2, 3))
        return gx, gk, gb

    return y, pullback


def _check_conv_operands(x: Tensor, kernels: Tensor, bias: Tensor, op: str) -> Tape:
    tape = _tape_of(x, kernels, bias)
    _require(x.value.ndim in (3, 4), f"{op} input must be HWC or NHWC, got {x.shape}")
    _require(kernels.value.ndim == 4 and kernels.shape[:2] == (3, 3), f"kernels must be 3x3xCinxCout, got {kernels.shape}")
    c_in, c_out = kernels.shape[2:]
    _require(x.shape[-1] == c_in, f"input channels {x.shape[-1]} != kernel channels {c_in}")
    _require(bias.shape == (c_out,), f"bias shape {bias.shape} != ({c_out},)")
    return tape


def conv2d(x: Tensor, kernels: Tensor, bias: Tensor) -> Tensor:
    """3x3 stride-1 cross-correlation with one pixel of zero padding.

    ``x`` is ``(H, W, Cin)`` or ``(N, H, W, Cin)``; ``kernels`` is
    ``(3, 3, Cin, Cout)``.  Spatial size is preserved.
    """
    tape = _check_conv_operands(x, kernels, bias, "conv2d")
    xv, single = _as_batch(x.value)
    y, pullback = _conv3x3(xv, kernels.value, bias.value)

    def vjp(g, needed):
        gx, gk, gb = pullback(_as_batch(g)[0], needed)
        if gx is not None and single:
            gx = gx[0]
        return gx, gk, gb

    return tape._record(y[0] if single else y, (x, kernels, bias), vjp, op="conv2d")


def upsample2x(x: Tensor) -> Tensor:
    """Nearest-neighbour x2 upscaling of an HWC or NHWC tensor."""
    _require(x.value.ndim in (3, 4), f"upsample2x input must be HWC or NHWC, got {x.shape}")
    y = x.value.repeat(2, axis=-3).repeat(2, axis=-2)
    shape = x.shape

    def vjp(g, needed):
        *lead, h2, w2, c = g.shape
        return (g.reshape(*lead, h2 // 2, 2, w2 // 2, 2, c).sum(axis=(-4, -2)).reshape(shape),)

    return x.tape._record(y, (x,), vjp, op="upsample2x")


# _PHASE_TAPS[a][offset, k]: which kernel row k lands on low-res offset -1/0/+1
# for output parity a after nearest upsampling.
_PHASE_TAPS = np.array([
    [[1, 0, 0], [0, 1, 1], [0, 0, 0]],
    [[0, 0, 0], [1, 1, 0], [0, 0, 1]],
], dtype=np.float64)


def upsample_conv2d(x: Tensor, kernels: Tensor, bias: Tensor) -> Tensor:
    """``conv2d(upsample2x(x), kernels, bias)`` evaluated at the input resolution.

    Each output parity (row, column) sees a fixed 3x3 low-resolution kernel
    built from sums of the original taps, so the four parities are computed
    as one convolution with ``4 * Cout`` channels and interleaved.
    """
    tape = _check_conv_operands(x, kernels, bias, "upsample_conv2d")
    xv, single = _as_batch(x.value)
    n, h, w, c_in = xv.shape
    c_out = kernels.shape[3]
    taps = _PHASE_TAPS.astype(xv.dtype)
    # (p, q, c, a, b, d) so the output channel axis flattens to (a, b, d)
    phased = np.einsum("apy,bqx,yxcd->pqcabd", taps, taps, kernels.value).reshape(3, 3, c_in, 4 * c_out)
    y, pullback = _conv3x3(xv, np.ascontiguousarray(phased), np.tile(bias.value, 4))
    y = y.reshape(n, h, w, 2, 2, c_out).transpose(0, 1, 3, 2, 4, 5).reshape(n, 2 * h, 2 * w, c_out)

    def vjp(g, needed):
        g = _as_batch(g)[0]
        g = np.ascontiguousarray(g.reshape(n, h, 2, w, 2, c_out).transpose(0, 1, 3, 2, 4, 5)).reshape(n, h, w, 4 * c_out)
        gx, gphased, gb = pullback(g, needed)
        gk = None
        if gphased is not None:
            gphased = gphased.reshape(3, 3, c_in, 2, 2, c_out)
            gk = np.einsum("apy,bqx,pqcabd->yxcd", taps, taps, gphased)
        if gb is not None:
            gb = gb.reshape(4, c_out).sum(axis=0)
        if gx is not None and single:
            gx = gx[0]
        return gx, gk, gb

    return tape._record(y[0] if single else y, (x, kernels, bias), vjp, op="upsample_conv2d")


def selu(x: Tensor) -> Tensor:
    v = x.value
    pos = v > 0
    # slope on the negative side is lambda * alpha * exp(v)
    slope = np.minimum(v, 0)
    np.exp(slope, out=slope)
    slope *= SELU_LAMBDA * SELU_ALPHA
    y = slope - SELU_LAMBDA * SELU_ALPHA
    np.multiply(v, SELU_LAMBDA, out=y, where=pos)
    slope[pos] = SELU_LAMBDA
    return x.tape._record(y, (x,), lambda g, needed: (g * slope,), op="selu")


def relu(x: Tensor) -> Tensor:
    v = x.value
    on = v > 0
    return x.tape._record(np.where(on, v, 0).astype(v.dtype, copy=False), (x,), lambda g, needed: (g * on,), op="relu")


# ---------------------------------------------------------------------------
# Elementwise arithmetic and reductions
# ---------------------------------------------------------------------------


def _same_shape(a: Tensor, b: Tensor, op: str) -> Tape:
    tape = _tape_of(a, b)
    _require(a.shape == b.shape, f"{op}: shapes {a.shape} and {b.shape} differ")
    return tape


def add(a: Tensor, b: Tensor) -> Tensor:
    tape = _same_shape(a, b, "add")
    return tape._record(a.value + b.value, (a, b), lambda g, needed: (g, g), op="add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    tape = _same_shape(a, b, "sub")
    return tape._record(a.value - b.value, (a, b), lambda g, needed: (g, -g), op="sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    tape = _same_shape(a, b, "mul")
    av, bv = a.value, b.value
    return tape._record(av * bv, (a, b), lambda g, needed: (g * bv, g * av), op="mul")


def scale(x: Tensor, factor: float) -> Tensor:
    """Multiply by a plain (non-differentiable) scalar."""
    c = x.value.dtype.type(factor)
    return x.tape._record(x.value * c, (x,), lambda g, needed: (g * c,), op="scale")


def absolute(x: Tensor) -> Tensor:
    """``|x|``; the subgradient at 0 is taken as 0."""
    s = np.sign(x.value)
    return x.tape._record(np.abs(x.value), (x,), lambda g, needed: (g * s,), op="absolute")


def mean(x: Tensor) -> Tensor:
    v = x.value
    n = v.size
    shape = v.shape
    return x.tape._record(np.asarray(v.mean(dtype=v.dtype)), (x,),
                          lambda g, needed: (np.full(shape, g / n, dtype=v.dtype),), op="mean")


def l1_mean(a: Tensor, b: Tensor) -> Tensor:
    """Mean absolute difference over every component."""
    tape = _same_shape(a, b, "l1_mean")
    diff = a.value - b.value
    n = diff.size
    s = np.sign(diff)
    loss = np.asarray(np.abs(diff).mean(dtype=diff.dtype))

    def vjp(g, needed):
        ga = s * (g / n)
        return ga, -ga

    return tape._record(loss, (a, b), vjp, op="l1_mean")


def stop_gradient(x: Tensor) -> Tensor:
    """Identity on values; nothing flows back through it."""
    return x.tape._record(x.value, (x,), None, requires_grad=False, op="stop_gradient")


# ---------------------------------------------------------------------------
# Reverse pass
# ---------------------------------------------------------------------------


def backward(tape: Tape, loss: Tensor) -> dict[Tensor, np.ndarray]:
    """Gradient of the scalar ``loss`` with respect to every tape variable.

    Variables the loss does not depend on get an all-zero gradient.
    """
    if loss.tape is not tape:
        raise ValueError("loss was not recorded on this tape")
    if loss.value.size != 1:
        raise ShapeError(f"loss must be a scalar, got shape {loss.shape}")
    grads: list[np.ndarray | None] = [None] * len(tape.nodes)
    grads[loss.index] = np.ones_like(loss.value)
    for node in reversed(tape.nodes[: loss.index + 1]):
        g = grads[node.output.index]
        if g is None or node.vjp is None or not node.output.requires_grad:
            continue
        needed = tuple(t.requires_grad for t in node.inputs)
        for t, gi in zip(node.inputs, node.vjp(g, needed)):
            if gi is None or not t.requires_grad:
                continue
            prev = grads[t.index]
            grads[t.index] = gi if prev is None else prev + gi
    out = {}
    for var in tape.variables:
        g = grads[var.index]
        out[var] = np.zeros_like(var.value) if g is None else np.asarray(g, dtype=var.value.dtype).reshape(var.shape)
    return out


# ---------------------------------------------------------------------------
# Parameter checkpoints ("SMNN")
# ---------------------------------------------------------------------------

CHECKPOINT_MAGIC = b"SMNN"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    """A parameter checkpoint could not be decoded."""


def save_arrays(arrays: Sequence[np.ndarray], path: str | Path) -> None:
    """Write arrays as little-endian ``SMNN``: magic, version, count, then per array ndim, dims, f32 payload."""
    chunks = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(arrays))]
    for a in arrays:
        a = np.asarray(a)
        chunks.append(struct.pack(f"<I{a.ndim}I", a.ndim, *a.shape))
        chunks.append(np.ascontiguousarray(a, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_arrays(path: str | Path) -> list[np.ndarray]:
    buf = Path(path).read_bytes()
    if buf[:4] != CHECKPOINT_MAGIC or len(buf) < 12:
        raise CheckpointError(f"{path}: not an SMNN checkpoint")
    version, count = struct.unpack_from("<II", buf, 4)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    pos = 12
    arrays = []
    try:
        for _ in range(count):
            (ndim,) = struct.unpack_from("<I", buf, pos)
            dims = struct.unpack_from(f"<{ndim}I", buf, pos + 4)
            pos += 4 + 4 * ndim
            size = int(np.prod(dims)) * 4
            if pos + size > len(buf):
                raise CheckpointError(f"{path}: truncated payload")
            arrays.append(np.frombuffer(buf, dtype="<f4", count=size // 4, offset=pos).reshape(dims).astype(np.float32))
            pos += size
    except struct.error as exc:
        raise CheckpointError(f"{path}: truncated header") from exc
    if pos != len(buf):
        raise CheckpointError(f"{path}: {len(buf) - pos} trailing bytes")
    return arrays
