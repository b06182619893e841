"""
Dense tensors, differentiable primitives and reverse-mode gradients.

Image tensors use H x W x C layout; every image primitive also accepts a
leading batch axis (N x H x W x C) so a whole clip can go through one call.
Primitives record themselves on the active `Tape` (see `Tape.__enter__`)
when at least one input requires a gradient; `backward` then walks the
tape in reverse.
"""

import itertools
import threading
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

ArrayLike = Union[np.ndarray, Sequence, float, int]
VJP = Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]

PROBABILITY_FLOOR = 1e-12
_CONV_CHUNK = 64  # Frames per im2col block; bounds the transient buffer

_node_ids = itertools.count(1)
_local = threading.local()


class ShapeMismatchError(ValueError):
    """Raised when operand shapes are incompatible with a primitive"""


class Tensor:
    """N-dimensional array of reals, optionally tracked for gradients"""

    __slots__ = ("data", "requires_grad", "grad", "node_id", "name")

    def __init__(
        self,
        data: ArrayLike,
        requires_grad: bool = False,
        name: Optional[str] = None,
        dtype=None,
    ):
        array = np.array(data, dtype=dtype)
        if array.dtype.kind != "f":
            array = array.astype(np.float64)
        self.data: np.ndarray = array
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.node_id = next(_node_ids)
        self.name = name

    @classmethod
    def _wrap(cls, array: np.ndarray, requires_grad: bool) -> "Tensor":
        out = cls.__new__(cls)
        out.data = array
        out.requires_grad = requires_grad
        out.grad = None
        out.node_id = next(_node_ids)
        out.name = None
        return out

    @classmethod
    def parameter(cls, data: ArrayLike, name: Optional[str] = None, dtype=None):
        """Create a learnable leaf"""
        return cls(data, requires_grad=True, name=name, dtype=dtype)

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def astype(self, dtype) -> "Tensor":
        """Copy as a new leaf with the same gradient flag"""
        return Tensor(self.data, self.requires_grad, self.name, dtype=dtype)

    def __add__(self, other: "Tensor") -> "Tensor":
        return elementwise(self, other, "add")

    def __sub__(self, other: "Tensor") -> "Tensor":
        return elementwise(self, other, "sub")

    def __mul__(self, other: "Tensor") -> "Tensor":
        return elementwise(self, other, "mul")

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label})"


@dataclass
class TapeEntry:
    """One executed primitive"""

    op: str
    inputs: Tuple[int, ...]
    output: int
    vjp: VJP


@dataclass
class Tape:
    """
    Ordered record of primitives executed while the tape is active.

    Use as a context manager; tapes are per thread, so concurrent
    inference can run independent tapes over shared parameters.
    """

    entries: List[TapeEntry] = field(default_factory=list)
    nodes: Dict[int, Tensor] = field(default_factory=dict)
    gradients: Dict[int, np.ndarray] = field(default_factory=dict)

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        _tape_stack().pop()

    def record(
        self, op: str, inputs: Sequence[Tensor], output: Tensor, vjp: VJP
    ) -> None:
        for tensor in inputs:
            self.nodes.setdefault(tensor.node_id, tensor)
        self.nodes[output.node_id] = output
        self.entries.append(
            TapeEntry(op, tuple(t.node_id for t in inputs), output.node_id, vjp)
        )

    def gradient(self, tensor: Tensor) -> Optional[np.ndarray]:
        return self.gradients.get(tensor.node_id)


def _tape_stack() -> List[Tape]:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def current_tape() -> Optional[Tape]:
    stack = _tape_stack()
    return stack[-1] if stack else None


def _emit(op: str, inputs: Sequence[Tensor], data: np.ndarray, vjp: VJP) -> Tensor:
    requires_grad = any(t.requires_grad for t in inputs)
    out = Tensor._wrap(data, requires_grad)
    tape = current_tape()
    if requires_grad and tape is not None:
        tape.record(op, inputs, out, vjp)
    return out


def backward(tape: Tape, loss: Tensor) -> Dict[int, np.ndarray]:
    """
    Propagate d(loss)/d(node) through the tape in reverse order.

    Gradients of nodes feeding several consumers are summed. Every tracked
    node that requires a gradient gets its `.grad` set; the mapping
    node id -> gradient is returned and kept on the tape.
    """
    if loss.size != 1:
        raise ShapeMismatchError(f"loss must be scalar, got shape {loss.shape}")

    tape.nodes.setdefault(loss.node_id, loss)
    grads: Dict[int, np.ndarray] = {loss.node_id: np.ones_like(loss.data)}

    for entry in reversed(tape.entries):
        upstream = grads.get(entry.output)
        if upstream is None:
            continue
        for node_id, grad in zip(entry.inputs, entry.vjp(upstream)):
            if grad is None or not tape.nodes[node_id].requires_grad:
                continue
            if node_id in grads:
                grads[node_id] = grads[node_id] + grad
            else:
                grads[node_id] = grad

    for node_id, grad in grads.items():
        tape.nodes[node_id].grad = grad
    tape.gradients = grads
    return grads


def fan_scaled_uniform(rng: np.random.Generator, shape: Tuple[int, ...], dtype):
    """Uniform in +-sqrt(6 / (fan_in + fan_out)); conv kernels are kh x kw x in x out"""
    if len(shape) == 4:
        receptive = shape[0] * shape[1]
        fan_in, fan_out = receptive * shape[2], receptive * shape[3]
    elif len(shape) == 2:
        fan_in, fan_out = shape
    else:
        raise ShapeMismatchError(f"cannot derive fans for shape {shape}")
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


# ---------------------------------------------------------------------------
# Image primitives
# ---------------------------------------------------------------------------


def _as_batch(array: np.ndarray, op: str) -> np.ndarray:
    if array.ndim == 3:
        return array[None]
    if array.ndim == 4:
        return array
    raise ShapeMismatchError(f"{op} expects HxWxC or NxHxWxC, got {array.shape}")


def conv2d(input: Tensor, kernels: Tensor, stride: int = 1, pad: int = 1) -> Tensor:
    """Same-size 2-D convolution with zero padding (cross-correlation form)"""
    k = kernels.shape
    if kernels.ndim != 4 or k[0] != k[1] or k[0] % 2 == 0:
        raise ShapeMismatchError(f"kernels must be k x k x Cin x Cout, got {k}")
    if stride != 1 or pad != k[0] // 2:
        raise ValueError(
            f"only stride 1 with padding {k[0] // 2} is supported "
            f"(got stride={stride}, pad={pad})"
        )
    x = _as_batch(input.data, "conv2d")
    if x.shape[-1] != k[2]:
        raise ShapeMismatchError(
            f"input has {x.shape[-1]} channels but kernels expect {k[2]}"
        )

    n, h, w, _ = x.shape
    padded = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    out = np.empty((n, h, w, k[3]), dtype=np.result_type(x, kernels.data))
    for start in range(0, n, _CONV_CHUNK):
        # windows: chunk x H x W x Cin x kh x kw
        windows = sliding_window_view(padded[start : start + _CONV_CHUNK], k[:2], (1, 2))
        out[start : start + _CONV_CHUNK] = np.tensordot(
            windows, kernels.data, axes=([4, 5, 3], [0, 1, 2])
        )

    def vjp(grad):
        g = grad.reshape(out.shape)
        d_kernels = np.zeros_like(kernels.data)
        d_padded = np.zeros_like(padded) if input.requires_grad else None
        for start in range(0, n, _CONV_CHUNK):
            stop = start + _CONV_CHUNK
            windows = sliding_window_view(padded[start:stop], k[:2], (1, 2))
            d_kernels += np.tensordot(
                windows, g[start:stop], axes=([0, 1, 2], [0, 1, 2])
            ).transpose(1, 2, 0, 3)
            if d_padded is not None:
                # cols: chunk x H x W x kh x kw x Cin
                cols = np.tensordot(g[start:stop], kernels.data, axes=([3], [3]))
                for i in range(k[0]):
                    for j in range(k[1]):
                        d_padded[start:stop, i : i + h, j : j + w] += cols[:, :, :, i, j]
        d_input = None
        if d_padded is not None:
            d_input = d_padded[:, pad : pad + h, pad : pad + w].reshape(input.shape)
        return d_input, d_kernels

    return _emit("conv2d", (input, kernels), out.reshape(input.shape[:-1] + (k[3],)), vjp)


def maxpool2d(input: Tensor, window: int = 2, stride: int = 2) -> Tensor:
    """Non-overlapping max pooling; output is ceil(H/window) x ceil(W/window)"""
    if window != stride:
        raise ValueError("only non-overlapping pooling (window == stride) is supported")
    x = _as_batch(input.data, "maxpool2d")
    n, h, w, c = x.shape
    if h < window or w < window:
        raise ShapeMismatchError(f"input {h}x{w} smaller than pooling window {window}")

    ho, wo = -(-h // window), -(-w // window)
    padded = np.full((n, ho * window, wo * window, c), -np.inf, dtype=x.dtype)
    padded[:, :h, :w] = x
    # cells: N x Ho x Wo x C x (window*window), window cells in row-major order
    cells = (
        padded.reshape(n, ho, window, wo, window, c)
        .transpose(0, 1, 3, 5, 2, 4)
        .reshape(n, ho, wo, c, window * window)
    )
    winner = np.argmax(cells, axis=-1)[..., None]  # First maximum on ties
    out = np.take_along_axis(cells, winner, axis=-1)[..., 0]

    def vjp(grad):
        routed = np.zeros_like(cells)
        np.put_along_axis(routed, winner, grad.reshape(out.shape)[..., None], axis=-1)
        routed = (
            routed.reshape(n, ho, wo, c, window, window)
            .transpose(0, 1, 4, 2, 5, 3)
            .reshape(n, ho * window, wo * window, c)
        )
        return (routed[:, :h, :w].reshape(input.shape),)

    return _emit("maxpool2d", (input,), out.reshape(input.shape[:-3] + out.shape[1:]), vjp)


def global_pool(input: Tensor, mode: str) -> Tensor:
    """Per-channel max or mean over all spatial positions -> 1 x 1 x C"""
    x = _as_batch(input.data, "global_pool")
    n, h, w, c = x.shape
    flat = x.reshape(n, h * w, c)

    if mode == "avg":
        out = flat.mean(axis=1)

        def vjp(grad):
            g = grad.reshape(n, 1, 1, c) / (h * w)
            return (np.broadcast_to(g, x.shape).reshape(input.shape).copy(),)

    elif mode == "max":
        winner = np.argmax(flat, axis=1)[:, None, :]
        out = np.take_along_axis(flat, winner, axis=1)[:, 0]

        def vjp(grad):
            routed = np.zeros_like(flat)
            np.put_along_axis(routed, winner, grad.reshape(n, 1, c), axis=1)
            return (routed.reshape(input.shape),)

    else:
        raise ValueError(f"unknown pooling mode '{mode}', expected 'max' or 'avg'")

    return _emit(f"global_{mode}_pool", (input,), out.reshape(input.shape[:-3] + (1, 1, c)), vjp)


def channel_pool(input: Tensor, mode: str) -> Tensor:
    """Per-position max or mean across the last (channel) axis -> ... x 1"""
    x = input.data
    c = x.shape[-1]

    if mode == "avg":
        out = x.mean(axis=-1, keepdims=True)

        def vjp(grad):
            return (np.broadcast_to(grad / c, x.shape).copy(),)

    elif mode == "max":
        winner = np.argmax(x, axis=-1)[..., None]
        out = np.take_along_axis(x, winner, axis=-1)

        def vjp(grad):
            routed = np.zeros_like(x)
            np.put_along_axis(routed, winner, grad, axis=-1)
            return (routed,)

    else:
        raise ValueError(f"unknown pooling mode '{mode}', expected 'max' or 'avg'")

    return _emit(f"channel_{mode}_pool", (input,), out, vjp)


# ---------------------------------------------------------------------------
# Vector and elementwise primitives
# ---------------------------------------------------------------------------


def dense(input: Tensor, weights: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """out_j = sum_i input_i * W_ij (+ bias_j); leading axes are batch axes"""
    if weights.ndim != 2 or input.shape[-1] != weights.shape[0]:
        raise ShapeMismatchError(
            f"input width {input.shape[-1]} does not match weights {weights.shape}"
        )
    if bias is not None and bias.shape != (weights.shape[1],):
        raise ShapeMismatchError(
            f"bias shape {bias.shape} does not match output width {weights.shape[1]}"
        )
    m, n = weights.shape
    out = input.data @ weights.data
    if bias is not None:
        out = out + bias.data

    def vjp(grad):
        rows = grad.reshape(-1, n)
        d_input = (grad @ weights.data.T) if input.requires_grad else None
        d_weights = input.data.reshape(-1, m).T @ rows
        d_bias = rows.sum(axis=0) if bias is not None else None
        return d_input, d_weights, d_bias

    inputs = (input, weights) if bias is None else (input, weights, bias)
    return _emit("dense", inputs, out, vjp)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _softmax(x: np.ndarray) -> np.ndarray:
    shifted = np.exp(x - x.max(axis=-1, keepdims=True))
    return shifted / shifted.sum(axis=-1, keepdims=True)


def activation(input: Tensor, kind: str) -> Tensor:
    """relu / sigmoid / tanh elementwise; softmax over the last axis"""
    x = input.data
    if kind == "relu":
        out = np.maximum(x, 0)

        def vjp(grad):
            return (grad * (x > 0),)

    elif kind == "sigmoid":
        out = _sigmoid(x)

        def vjp(grad):
            return (grad * out * (1 - out),)

    elif kind == "tanh":
        out = np.tanh(x)

        def vjp(grad):
            return (grad * (1 - out * out),)

    elif kind == "softmax":
        out = _softmax(x)

        def vjp(grad):
            return (out * (grad - (grad * out).sum(axis=-1, keepdims=True)),)

    else:
        raise ValueError(f"unknown activation '{kind}'")

    return _emit(kind, (input,), out, vjp)


def _broadcast_shape(a: Tuple[int, ...], b: Tuple[int, ...]) -> Tuple[int, ...]:
    if len(a) != len(b):
        raise ShapeMismatchError(f"rank mismatch: {a} vs {b}")
    shape = []
    for da, db in zip(a, b):
        if da != db and da != 1 and db != 1:
            raise ShapeMismatchError(f"cannot broadcast {a} with {b}")
        shape.append(max(da, db) if 0 not in (da, db) else 0)
    return tuple(shape)


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    axes = tuple(i for i, (g, s) in enumerate(zip(grad.shape, shape)) if s == 1 and g != 1)
    return grad.sum(axis=axes, keepdims=True) if axes else grad


def elementwise(a: Tensor, b: Tensor, kind: str) -> Tensor:
    """add / sub / mul; an axis of extent 1 repeats across the partner's extent"""
    _broadcast_shape(a.shape, b.shape)
    if kind == "add":
        out = a.data + b.data

        def vjp(grad):
            return _unbroadcast(grad, a.shape), _unbroadcast(grad, b.shape)

    elif kind == "sub":
        out = a.data - b.data

        def vjp(grad):
            return _unbroadcast(grad, a.shape), _unbroadcast(-grad, b.shape)

    elif kind == "mul":
        out = a.data * b.data

        def vjp(grad):
            return (
                _unbroadcast(grad * b.data, a.shape),
                _unbroadcast(grad * a.data, b.shape),
            )

    else:
        raise ValueError(f"unknown elementwise kind '{kind}'")

    return _emit(kind, (a, b), out, vjp)


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    """Concatenate along the last axis; channels of `a` come first"""
    if a.shape[:-1] != b.shape[:-1]:
        raise ShapeMismatchError(f"leading dims differ: {a.shape} vs {b.shape}")
    split = a.shape[-1]
    out = np.concatenate([a.data, b.data], axis=-1)

    def vjp(grad):
        return grad[..., :split], grad[..., split:]

    return _emit("concat", (a, b), out, vjp)


def reshape(input: Tensor, shape: Tuple[int, ...]) -> Tensor:
    out = input.data.reshape(shape)

    def vjp(grad):
        return (grad.reshape(input.shape),)

    return _emit("reshape", (input,), out, vjp)


def take(input: Tensor, index: int, axis: int) -> Tensor:
    """Select one slice along `axis`, dropping that axis"""
    out = np.take(input.data, index, axis=axis)

    def vjp(grad):
        full = np.zeros_like(input.data)
        slicer = [slice(None)] * input.ndim
        slicer[axis] = index
        full[tuple(slicer)] = grad
        return (full,)

    return _emit("take", (input,), out, vjp)


def mean(input: Tensor) -> Tensor:
    out = np.asarray(input.data.mean())

    def vjp(grad):
        return (np.full_like(input.data, grad / input.size),)

    return _emit("mean", (input,), out, vjp)


def negative_log_likelihood(probs: Tensor, labels: np.ndarray) -> Tensor:
    """
    Mean of -log(max(probs[row, label], PROBABILITY_FLOOR)) over rows.

    `probs` is K (one distribution) or B x K; `labels` holds one class
    index per row.
    """
    p = probs.data.reshape(-1, probs.shape[-1])
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if labels.shape[0] != p.shape[0]:
        raise ShapeMismatchError(f"{labels.shape[0]} labels for {p.shape[0]} rows")
    rows = np.arange(p.shape[0])
    picked = p[rows, labels]
    clipped = np.maximum(picked, PROBABILITY_FLOOR)
    out = np.asarray(-np.log(clipped).mean(), dtype=p.dtype)

    def vjp(grad):
        d = np.zeros_like(p)
        active = picked > PROBABILITY_FLOOR
        d[rows, labels] = np.where(active, -grad / (clipped * p.shape[0]), 0.0)
        return (d.reshape(probs.shape),)

    return _emit("nll", (probs,), out, vjp)
