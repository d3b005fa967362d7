"""Minimal dense tensor with reverse-mode automatic differentiation.

Everything the model needs runs through this module: matmul (with batch
broadcasting), elementwise arithmetic, sigmoid/logit, layer normalization,
softmax, strided 2-D convolution (im2col), reductions, gather, and a
finite-difference gradient checker. Data lives in numpy arrays; float32 is
the training dtype, float64 the gradient-checking dtype.
"""

from __future__ import annotations

import json
import struct
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

__all__ = [
    "Tensor",
    "Linear",
    "LayerNorm",
    "mlp",
    "layer_norm",
    "softmax",
    "gelu",
    "relu",
    "gradient_check",
    "save_checkpoint",
    "load_checkpoint",
]

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce a broadcast gradient back to the original operand shape."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """A numpy-backed array node in a reverse-mode computation graph.

    Tensors are immutable after construction except for ``grad``
    accumulation during ``backward``.
    """

    __slots__ = ("data", "requires_grad", "grad", "_backward", "_children")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.asarray(data, dtype=dtype) if dtype is not None else np.asarray(data)
        if self.data.dtype not in (np.float32, np.float64):
            self.data = self.data.astype(np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._backward: Callable[[], None] | None = None
        self._children: tuple[Tensor, ...] = ()

    # -- construction helpers -------------------------------------------

    @staticmethod
    def _make(data: np.ndarray, children: tuple["Tensor", ...],
              backward: Callable[[np.ndarray], Iterable[tuple["Tensor", np.ndarray]]] | None) -> "Tensor":
        out = Tensor(data)
        out.requires_grad = any(c.requires_grad for c in children)
        if out.requires_grad and backward is not None:
            out._children = children

            def _run():
                for tensor, contribution in backward(out.grad):
                    if tensor.requires_grad:
                        if tensor.grad is None:
                            tensor.grad = np.zeros_like(tensor.data)
                        tensor.grad += contribution

            out._backward = _run
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    # -- autodiff driver -------------------------------------------------

    def backward(self) -> None:
        """Backpropagate from a scalar output through the recorded graph."""
        if self.data.size != 1:
            raise ValueError("backward() requires a scalar tensor")
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for child in node._children:
                if id(child) not in seen:
                    stack.append((child, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward()

    # -- arithmetic -------------------------------------------------------

    @staticmethod
    def _coerce(other, like: "Tensor") -> "Tensor":
        if isinstance(other, Tensor):
            return other
        return Tensor(np.asarray(other, dtype=like.dtype))

    def __add__(self, other):
        other = Tensor._coerce(other, self)
        a, b = self, other
        return Tensor._make(
            a.data + b.data, (a, b),
            lambda g: ((a, _unbroadcast(g, a.shape)), (b, _unbroadcast(g, b.shape))))

    __radd__ = __add__

    def __neg__(self):
        a = self
        return Tensor._make(-a.data, (a,), lambda g: ((a, -g),))

    def __sub__(self, other):
        other = Tensor._coerce(other, self)
        a, b = self, other
        return Tensor._make(
            a.data - b.data, (a, b),
            lambda g: ((a, _unbroadcast(g, a.shape)), (b, _unbroadcast(-g, b.shape))))

    def __rsub__(self, other):
        return Tensor._coerce(other, self) - self

    def __mul__(self, other):
        other = Tensor._coerce(other, self)
        a, b = self, other
        return Tensor._make(
            a.data * b.data, (a, b),
            lambda g: ((a, _unbroadcast(g * b.data, a.shape)),
                       (b, _unbroadcast(g * a.data, b.shape))))

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = Tensor._coerce(other, self)
        a, b = self, other
        return Tensor._make(
            a.data / b.data, (a, b),
            lambda g: ((a, _unbroadcast(g / b.data, a.shape)),
                       (b, _unbroadcast(-g * a.data / (b.data * b.data), b.shape))))

    def __rtruediv__(self, other):
        return Tensor._coerce(other, self) / self

    def __pow__(self, exponent: float):
        a = self
        p = float(exponent)
        out = a.data ** p
        return Tensor._make(out, (a,), lambda g: ((a, g * p * a.data ** (p - 1.0)),))

    def matmul(self, other: "Tensor") -> "Tensor":
        """Matrix product with numpy batch broadcasting over leading axes."""
        a, b = self, Tensor._coerce(other, self)

        def _bw(g):
            if b.data.ndim == 1:
                # (..., n, k) @ (k,) -> rebuild the contraction explicitly
                ga = g[..., None] * b.data
                gb = (a.data * g[..., None]).reshape(-1, b.data.shape[0]).sum(axis=0)
                return ((a, _unbroadcast(ga, a.shape)), (b, gb))
            if a.data.ndim == 1:
                ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
                ga = ga.reshape(-1, a.data.shape[0]).sum(axis=0)
                gb = np.multiply.outer(a.data, g)
                return ((a, ga), (b, _unbroadcast(gb, b.shape)))
            ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
            gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
            return ((a, _unbroadcast(ga, a.shape)), (b, _unbroadcast(gb, b.shape)))

        return Tensor._make(np.matmul(a.data, b.data), (a, b), _bw)

    __matmul__ = matmul

    # -- elementwise functions ---------------------------------------------

    def exp(self):
        a = self
        out = np.exp(a.data)
        return Tensor._make(out, (a,), lambda g: ((a, g * out),))

    def log(self):
        a = self
        return Tensor._make(np.log(a.data), (a,), lambda g: ((a, g / a.data),))

    def sqrt(self):
        a = self
        out = np.sqrt(a.data)
        return Tensor._make(out, (a,), lambda g: ((a, g * 0.5 / out),))

    def sigmoid(self):
        a = self
        out = 1.0 / (1.0 + np.exp(-a.data))
        return Tensor._make(out, (a,), lambda g: ((a, g * out * (1.0 - out)),))

    def tanh(self):
        a = self
        out = np.tanh(a.data)
        return Tensor._make(out, (a,), lambda g: ((a, g * (1.0 - out * out)),))

    def sin(self):
        a = self
        return Tensor._make(np.sin(a.data), (a,), lambda g: ((a, g * np.cos(a.data)),))

    def cos(self):
        a = self
        return Tensor._make(np.cos(a.data), (a,), lambda g: ((a, -g * np.sin(a.data)),))

    def clamp(self, lo: float, hi: float):
        a = self
        out = np.clip(a.data, lo, hi)
        inside = ((a.data > lo) & (a.data < hi)).astype(a.dtype)
        return Tensor._make(out, (a,), lambda g: ((a, g * inside),))

    # -- reductions / shape ops --------------------------------------------

    def sum(self, axis=None, keepdims: bool = False):
        a = self

        def _bw(g):
            if axis is None:
                return ((a, np.broadcast_to(g, a.shape).copy()),)
            gg = g if keepdims else np.expand_dims(g, axis)
            return ((a, np.broadcast_to(gg, a.shape).copy()),)

        return Tensor._make(a.data.sum(axis=axis, keepdims=keepdims), (a,), _bw)

    def mean(self, axis=None, keepdims: bool = False):
        if axis is None:
            scale = 1.0 / self.data.size
        else:
            axes = axis if isinstance(axis, tuple) else (axis,)
            scale = 1.0 / np.prod([self.shape[ax] for ax in axes])
        return self.sum(axis=axis, keepdims=keepdims) * scale

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        a = self
        old = a.shape
        return Tensor._make(a.data.reshape(shape), (a,),
                            lambda g: ((a, g.reshape(old)),))

    def swapaxes(self, ax1: int, ax2: int):
        a = self
        return Tensor._make(np.swapaxes(a.data, ax1, ax2), (a,),
                            lambda g: ((a, np.swapaxes(g, ax1, ax2)),))

    def take(self, indices, axis: int = 0):
        """Gather rows along ``axis``; backward scatter-adds."""
        a = self
        idx = np.asarray(indices)

        def _bw(g):
            acc = np.zeros_like(a.data)
            np.add.at(acc, (slice(None),) * axis + (idx,), g)
            return ((a, acc),)

        return Tensor._make(np.take(a.data, idx, axis=axis), (a,), _bw)

    @staticmethod
    def concat(tensors: Sequence["Tensor"], axis: int = 0) -> "Tensor":
        parts = list(tensors)
        sizes = [t.shape[axis] for t in parts]
        splits = np.cumsum(sizes)[:-1]

        def _bw(g):
            pieces = np.split(g, splits, axis=axis)
            return tuple(zip(parts, pieces))

        return Tensor._make(np.concatenate([t.data for t in parts], axis=axis),
                            tuple(parts), _bw)


# -- nonlinearities -----------------------------------------------------------


def relu(x: Tensor) -> Tensor:
    mask = (x.data > 0).astype(x.dtype)
    return Tensor._make(x.data * mask, (x,), lambda g: ((x, g * mask),))


def gelu(x: Tensor) -> Tensor:
    """Exact (erf-based) GELU; the erf form keeps f64 gradient checks tight."""
    a = x
    e = erf(a.data * _INV_SQRT2)
    out = 0.5 * a.data * (1.0 + e)

    def _bw(g):
        pdf = np.exp(-0.5 * a.data * a.data) * _INV_SQRT2PI
        return ((a, g * (0.5 * (1.0 + e) + a.data * pdf)),)

    return Tensor._make(out.astype(a.dtype), (a,), _bw)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    # shift by a detached max: softmax is shift-invariant so the gradient
    # is unaffected and the exp stays bounded
    shift = Tensor(np.max(x.data, axis=axis, keepdims=True))
    e = (x - shift).exp()
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    shift = Tensor(np.max(x.data, axis=axis, keepdims=True))
    z = x - shift
    return z - z.exp().sum(axis=axis, keepdims=True).log()


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis to mean 0 / var 1, then scale and shift."""
    if x.shape[-1] < 1:
        raise ValueError("layer_norm requires a non-empty last axis")
    mu = x.mean(axis=-1, keepdims=True)
    centered = x - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = (var + eps) ** -0.5
    return centered * inv * gain + bias


# -- layers -------------------------------------------------------------------


class Linear:
    """Affine layer y = x W + b with weight [in, out]."""

    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator,
                 dtype=np.float32, scale: float | None = None):
        if scale is None:
            scale = 1.0 / np.sqrt(in_dim)
        self.weight = Tensor(rng.normal(0.0, scale, size=(in_dim, out_dim)).astype(dtype),
                             requires_grad=True)
        self.bias = Tensor(np.zeros(out_dim, dtype=dtype), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return x.matmul(self.weight) + self.bias

    def params(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.weight": self.weight, f"{prefix}.bias": self.bias}


class LayerNorm:
    def __init__(self, dim: int, dtype=np.float32, eps: float = 1e-5):
        self.gain = Tensor(np.ones(dim, dtype=dtype), requires_grad=True)
        self.bias = Tensor(np.zeros(dim, dtype=dtype), requires_grad=True)
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gain, self.bias, self.eps)

    def params(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.gain": self.gain, f"{prefix}.bias": self.bias}


def mlp(x: Tensor, layers: Sequence[Linear], activation: Callable[[Tensor], Tensor] = gelu) -> Tensor:
    """Chain of affine layers with an elementwise activation in between."""
    out = x
    for i, layer in enumerate(layers):
        out = layer(out)
        if i + 1 < len(layers):
            out = activation(out)
    return out


# -- gradient checking --------------------------------------------------------


def gradient_check(op: Callable[[Tensor], Tensor], point: np.ndarray,
                   epsilon: float = 1e-5, tolerance: float = 1e-3,
                   seed: int = 0) -> dict:
    """Compare analytic gradients against central finite differences.

    ``op`` maps a Tensor to a Tensor of any shape; the output is reduced to
    a scalar with a fixed random projection so the finite differences probe
    the same scalar the backward pass differentiates.
    """
    point = np.asarray(point, dtype=np.float64)
    rng = np.random.default_rng(seed)

    x = Tensor(point.copy(), requires_grad=True)
    y = op(x)
    proj = rng.normal(size=y.shape)

    def scalar_at(p: np.ndarray) -> float:
        return float((op(Tensor(p)).data * proj).sum())

    loss = (y * Tensor(proj)).sum()
    loss.backward()
    analytic = x.grad.copy()

    numeric = np.zeros_like(point)
    flat = point.reshape(-1)
    num_flat = numeric.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + epsilon
        hi = scalar_at(point)
        flat[i] = orig - epsilon
        lo = scalar_at(point)
        flat[i] = orig
        num_flat[i] = (hi - lo) / (2.0 * epsilon)

    if not (np.all(np.isfinite(analytic)) and np.all(np.isfinite(numeric))):
        raise FloatingPointError("non-finite values in gradient check")

    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    rel = np.abs(analytic - numeric) / denom
    return {
        "max_rel_error": float(rel.max()),
        "passed": bool(rel.max() < tolerance),
        "analytic": analytic,
        "numeric": numeric,
    }


# -- strided 2-D convolution ---------------------------------------------------


def conv2d(x: Tensor, weight: Tensor, bias: Tensor, stride: int = 1,
           padding: int = 1) -> Tensor:
    """3x3-style conv on a single [H, W, Cin] map, im2col + matmul.

    weight is [kh, kw, Cin, Cout]; output is [H', W', Cout].
    """
    kh, kw, cin, cout = weight.shape
    h, w, _ = x.shape
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise ValueError(f"conv2d output extent degenerate: {(ho, wo)}")

    xp = np.pad(x.data, ((padding, padding), (padding, padding), (0, 0)))
    windows = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(0, 1))
    # windows: [H+2p-kh+1, W+2p-kw+1, Cin, kh, kw]
    windows = windows[::stride, ::stride]
    cols = windows.transpose(0, 1, 3, 4, 2).reshape(ho * wo, kh * kw * cin)
    wmat = weight.data.reshape(kh * kw * cin, cout)
    out = cols @ wmat + bias.data

    def _bw(g):
        g2 = g.reshape(ho * wo, cout)
        grads = []
        if weight.requires_grad:
            gw = (cols.T @ g2).reshape(weight.shape)
            grads.append((weight, gw))
        if bias.requires_grad:
            grads.append((bias, g2.sum(axis=0)))
        if x.requires_grad:
            gcols = (g2 @ wmat.T).reshape(ho, wo, kh, kw, cin)
            gx = np.zeros_like(xp)
            for di in range(kh):
                for dj in range(kw):
                    gx[di:di + ho * stride:stride, dj:dj + wo * stride:stride] += gcols[:, :, di, dj, :]
            gx = gx[padding:padding + h, padding:padding + w]
            grads.append((x, gx))
        return tuple(grads)

    return Tensor._make(out.reshape(ho, wo, cout), (x, weight, bias), _bw)


class Conv2d:
    def __init__(self, in_ch: int, out_ch: int, rng: np.random.Generator,
                 kernel: int = 3, stride: int = 1, padding: int = 1,
                 dtype=np.float32):
        scale = 1.0 / np.sqrt(kernel * kernel * in_ch)
        self.weight = Tensor(rng.normal(0.0, scale, size=(kernel, kernel, in_ch, out_ch)).astype(dtype),
                             requires_grad=True)
        self.bias = Tensor(np.zeros(out_ch, dtype=dtype), requires_grad=True)
        self.stride = stride
        self.padding = padding

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.bias, self.stride, self.padding)

    def params(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.weight": self.weight, f"{prefix}.bias": self.bias}


# -- checkpoint format ---------------------------------------------------------

_CKPT_MAGIC = b"MSPT"
_CKPT_VERSION = 1


def save_checkpoint(arrays: dict[str, np.ndarray], path, meta: dict | None = None) -> None:
    """Single binary file: magic, version, JSON header, concatenated LE f32 arrays.

    The header maps name -> {shape, offset}; offsets are relative to the
    payload start. Round-trips are bit-exact.
    """
    entries = {}
    payload = bytearray()
    for name in sorted(arrays):
        arr = np.asarray(arrays[name], dtype="<f4")  # tobytes() emits C order
        entries[name] = {"shape": list(arr.shape), "offset": len(payload)}
        payload += arr.tobytes()
    header = json.dumps({"arrays": entries, "meta": meta or {}},
                        sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(struct.pack("<I", _CKPT_VERSION))
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        fh.write(payload)


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != _CKPT_MAGIC:
            raise ValueError(f"not a checkpoint file: bad magic {magic!r}")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != _CKPT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        (hlen,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(hlen).decode("utf-8"))
        payload = fh.read()
    arrays = {}
    for name, entry in header["arrays"].items():
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        off = entry["offset"]
        arrays[name] = np.frombuffer(payload, dtype="<f4", count=count,
                                     offset=off).reshape(shape).copy()
    return arrays, header.get("meta", {})
