"""Dense NCHW tensors with reverse-mode automatic differentiation.

Only the primitives needed by the hiding and reveal networks are provided:
convolution, transposed convolution, batch normalization, ReLU, 2x2 max
pooling, channel concatenation, dropout and mean squared error.
"""

from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DEFAULT_DTYPE = np.float32


class GraphError(RuntimeError):
    """Raised on misuse of the differentiation graph."""


class Tensor:
    """A numeric array that may take part in a differentiation graph.

    Network activations are 4-axis ``(N, C, H, W)``; losses are 0-axis
    scalars. Gradients accumulate into ``grad`` of leaf tensors with
    ``requires_grad=True`` until :meth:`zero_grad` is called.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_consumed", "op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is None:
            dtype = arr.dtype if arr.dtype in (np.float32, np.float64) else DEFAULT_DTYPE
        self.data = np.asarray(arr, dtype=dtype, order="C")
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Optional[Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]] = None
        self._consumed = False
        self.op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy(), dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return scale(self, other)

    __rmul__ = __mul__

    def backward(self) -> None:
        backward(self)


class Parameter(Tensor):
    """A trainable leaf tensor with a hierarchical name."""

    __slots__ = ("name",)

    def __init__(self, data, name: str = ""):
        super().__init__(np.array(data, dtype=DEFAULT_DTYPE), requires_grad=True)
        self.name = name

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape})"


def _node(data: np.ndarray, parents: Sequence[Tensor], backward_fn, op: str) -> Tensor:
    out = Tensor(data, dtype=data.dtype)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
        out.op = op
    return out


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_4d(x: Tensor, what: str) -> None:
    if x.data.ndim != 4:
        raise ValueError(f"{what} expects a 4-axis (N, C, H, W) tensor, got shape {x.shape}")


def backward(loss: Tensor) -> None:
    """Propagate d(loss)/d(.) to every reachable leaf that requires grad."""
    if loss.data.ndim != 0 and loss.data.size != 1:
        raise GraphError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._consumed:
        raise GraphError("backward called twice on the same graph; re-run the forward pass")
    if not loss.requires_grad:
        raise GraphError("loss does not depend on any tensor that requires grad")

    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        if node._consumed:
            raise GraphError("graph already consumed by an earlier backward; re-run the forward pass")
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if node.is_leaf:
            if g is not None and node.requires_grad:
                node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        if g is not None:
            parent_grads = node._backward(g)
            for p, pg in zip(node._parents, parent_grads):
                if pg is None or not p.requires_grad:
                    continue
                if id(p) in grads:
                    grads[id(p)] = grads[id(p)] + pg
                else:
                    grads[id(p)] = pg
        # release saved activations; the graph cannot be replayed
        node._backward = None
        node._parents = ()
        node._consumed = True
    loss._consumed = True


# -- elementwise helpers used by the losses ---------------------------------


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ValueError(f"add: shape mismatch {a.shape} vs {b.shape}")
    return _node(a.data + b.data, (a, b), lambda g: (g, g), "add")


def scale(a, factor: float) -> Tensor:
    if isinstance(factor, Tensor):
        raise TypeError("scale expects a Python number as the factor")
    a = _as_tensor(a)
    f = a.data.dtype.type(factor)
    return _node(a.data * f, (a,), lambda g: (g * f,), "scale")


# -- convolution -------------------------------------------------------------


def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def conv_transpose_output_size(size: int, kernel: int, stride: int, padding: int,
                               output_padding: int = 0) -> int:
    return (size - 1) * stride - 2 * padding + kernel + output_padding


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of ``x (N,Cin,H,W)`` with ``weight (Cout,Cin,kh,kw)``."""
    _check_4d(x, "conv2d input")
    _check_4d(weight, "conv2d weight")
    if stride < 1 or padding < 0:
        raise ValueError(f"conv2d: invalid stride={stride} / padding={padding}")
    n, cin, h, w = x.shape
    cout, wcin, kh, kw = weight.shape
    if wcin != cin:
        raise ValueError(f"conv2d: input shape {x.shape} has {cin} channels but weight shape "
                         f"{weight.shape} expects {wcin}")
    if kh > h + 2 * padding or kw > w + 2 * padding:
        raise ValueError(f"conv2d: kernel {kh}x{kw} larger than padded input of shape {x.shape} "
                         f"with padding {padding}")
    if bias is not None and bias.shape != (cout,):
        raise ValueError(f"conv2d: bias shape {bias.shape} does not match {cout} output channels")

    ho = conv_output_size(h, kh, stride, padding)
    wo = conv_output_size(w, kw, stride, padding)
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    # (N, Cin, Ho, Wo, kh, kw)
    cols = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    out = np.tensordot(cols, weight.data, axes=([1, 4, 5], [1, 2, 3]))  # (N, Ho, Wo, Cout)
    out = np.ascontiguousarray(out.transpose(0, 3, 1, 2))
    if bias is not None:
        out += bias.data[None, :, None, None]

    def _backward(g):
        gx = gw = gb = None
        if weight.requires_grad:
            gw = np.tensordot(g, cols, axes=([0, 2, 3], [0, 2, 3]))
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    contrib = np.tensordot(weight.data[:, :, i, j], g, axes=([0], [1]))  # (Cin,N,Ho,Wo)
                    gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += contrib.transpose(1, 0, 2, 3)
            gx = gxp[:, :, padding:padding + h, padding:padding + w] if padding else gxp
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _node(out, parents, _backward, "conv2d")


def conv_transpose2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None,
                     stride: int = 1, padding: int = 0, output_padding: int = 0) -> Tensor:
    """Transposed convolution; ``weight`` has shape ``(Cin, Cout, kh, kw)``.

    This is the adjoint of :func:`conv2d` with the same weight array, stride
    and padding. Output size is ``(H-1)*stride - 2*padding + k + output_padding``.
    """
    _check_4d(x, "conv_transpose2d input")
    _check_4d(weight, "conv_transpose2d weight")
    if stride < 1 or padding < 0 or output_padding < 0:
        raise ValueError(f"conv_transpose2d: invalid stride={stride}, padding={padding}, "
                         f"output_padding={output_padding}")
    if output_padding >= stride and output_padding > 0:
        raise ValueError("conv_transpose2d: output_padding must be smaller than stride")
    n, cin, h, w = x.shape
    wcin, cout, kh, kw = weight.shape
    if wcin != cin:
        raise ValueError(f"conv_transpose2d: input shape {x.shape} has {cin} channels but weight "
                         f"shape {weight.shape} expects {wcin}")
    if bias is not None and bias.shape != (cout,):
        raise ValueError(f"conv_transpose2d: bias shape {bias.shape} does not match {cout} channels")
    ho = conv_transpose_output_size(h, kh, stride, padding, output_padding)
    wo = conv_transpose_output_size(w, kw, stride, padding, output_padding)
    if ho < 1 or wo < 1:
        raise ValueError(f"conv_transpose2d: empty output for input shape {x.shape}")

    full_h = max((h - 1) * stride + kh, padding + ho)
    full_w = max((w - 1) * stride + kw, padding + wo)
    full = np.zeros((n, cout, full_h, full_w), dtype=x.data.dtype)
    for i in range(kh):
        for j in range(kw):
            contrib = np.tensordot(weight.data[:, :, i, j], x.data, axes=([0], [1]))  # (Cout,N,H,W)
            full[:, :, i:i + stride * h:stride, j:j + stride * w:stride] += contrib.transpose(1, 0, 2, 3)
    out = np.ascontiguousarray(full[:, :, padding:padding + ho, padding:padding + wo])
    if bias is not None:
        out += bias.data[None, :, None, None]

    def _backward(g):
        gx = gw = gb = None
        gfull = np.zeros((n, cout, full_h, full_w), dtype=g.dtype)
        gfull[:, :, padding:padding + ho, padding:padding + wo] = g
        if x.requires_grad:
            gx = np.zeros_like(x.data)
        if weight.requires_grad:
            gw = np.zeros_like(weight.data)
        for i in range(kh):
            for j in range(kw):
                gs = gfull[:, :, i:i + stride * h:stride, j:j + stride * w:stride]  # (N,Cout,H,W)
                if gx is not None:
                    gx += np.tensordot(gs, weight.data[:, :, i, j], axes=([1], [1])).transpose(0, 3, 1, 2)
                if gw is not None:
                    gw[:, :, i, j] = np.tensordot(x.data, gs, axes=([0, 2, 3], [0, 2, 3]))
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _node(out, parents, _backward, "conv_transpose2d")


# -- normalization and activations ------------------------------------------


class RunningStats:
    """Per-channel running mean/variance for batch normalization."""

    def __init__(self, channels: int, momentum: float = 0.1):
        self.mean = np.zeros(channels, dtype=DEFAULT_DTYPE)
        self.var = np.ones(channels, dtype=DEFAULT_DTYPE)
        self.momentum = momentum


def batch_norm(x: Tensor, scale_: Tensor, shift: Tensor, running: Optional[RunningStats] = None,
               training: bool = True, eps: float = 1e-5) -> Tensor:
    """Per-channel normalization over ``(N, H, W)``.

    In training mode batch statistics are used and ``running`` (if given) is
    updated with momentum; in eval mode the running statistics are used.
    """
    _check_4d(x, "batch_norm input")
    c = x.shape[1]
    if scale_.shape != (c,) or shift.shape != (c,):
        raise ValueError(f"batch_norm: input has {c} channels but scale/shift have shapes "
                         f"{scale_.shape}/{shift.shape}")
    dt = x.data.dtype
    axes = (0, 2, 3)
    if training:
        count = x.data.size // c
        mean = x.data.mean(axis=axes)
        centered = x.data - mean[None, :, None, None]
        var = (centered * centered).mean(axis=axes)
        if running is not None:
            m = running.momentum
            unbiased = var * (count / max(count - 1, 1))
            running.mean[:] = (1 - m) * running.mean + m * mean
            running.var[:] = (1 - m) * running.var + m * unbiased
    else:
        if running is None:
            raise ValueError("batch_norm: eval mode requires running statistics")
        mean = running.mean.astype(dt)
        var = running.var.astype(dt)
        centered = x.data - mean[None, :, None, None]
    inv_std = (1.0 / np.sqrt(var + dt.type(eps))).astype(dt)
    xhat = centered * inv_std[None, :, None, None]
    out = xhat * scale_.data[None, :, None, None] + shift.data[None, :, None, None]

    def _backward(g):
        gscale = (g * xhat).sum(axis=axes) if scale_.requires_grad else None
        gshift = g.sum(axis=axes) if shift.requires_grad else None
        gx = None
        if x.requires_grad:
            gxhat = g * scale_.data[None, :, None, None]
            if training:
                gx = (gxhat - gxhat.mean(axis=axes, keepdims=True)
                      - xhat * (gxhat * xhat).mean(axis=axes, keepdims=True)) * inv_std[None, :, None, None]
            else:
                gx = gxhat * inv_std[None, :, None, None]
        return gx, gscale, gshift

    return _node(out, (x, scale_, shift), _backward, "batch_norm")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _node(np.where(mask, x.data, 0).astype(x.data.dtype), (x,),
                 lambda g: (g * mask,), "relu")


def max_pool2x2(x: Tensor) -> Tensor:
    """2x2 max pooling with stride 2; ties route the gradient to the first index."""
    _check_4d(x, "max_pool2x2 input")
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ValueError(f"max_pool2x2: height and width must be divisible by 2, got shape {x.shape}")
    win = x.data.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
    idx = win.argmax(axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]

    def _backward(g):
        gw = np.zeros((n, c, h // 2, w // 2, 4), dtype=g.dtype)
        np.put_along_axis(gw, idx[..., None], g[..., None], axis=-1)
        gx = gw.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
        return (gx,)

    return _node(np.ascontiguousarray(out), (x,), _backward, "max_pool2x2")


def concat_channels(*tensors: Tensor) -> Tensor:
    """Concatenate along the channel axis; inputs keep their order."""
    if not tensors:
        raise ValueError("concat_channels needs at least one tensor")
    for t in tensors:
        _check_4d(t, "concat_channels input")
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.shape[0] != ref[0] or t.shape[2:] != ref[2:]:
            raise ValueError(f"concat_channels: batch/spatial mismatch {ref} vs {t.shape}")
    out = np.concatenate([t.data for t in tensors], axis=1)
    bounds = np.cumsum([0] + [t.shape[1] for t in tensors])

    def _backward(g):
        return tuple(g[:, bounds[i]:bounds[i + 1]] for i in range(len(tensors)))

    return _node(out, tensors, _backward, "concat")


def dropout(x: Tensor, p: float, training: bool = True,
            rng: Optional[np.random.Generator] = None) -> Tensor:
    """Inverted dropout. ``p == 0`` and eval mode return ``x`` unchanged."""
    if not 0 <= p < 1:
        raise ValueError(f"dropout probability must lie in [0, 1), got {p}")
    if p == 0 or not training:
        return x
    if rng is None:
        raise ValueError("dropout with p > 0 in training mode needs an explicit rng")
    keep = rng.random(x.shape) >= p
    factor = x.data.dtype.type(1.0 / (1.0 - p))
    mask = keep.astype(x.data.dtype) * factor
    return _node(x.data * mask, (x,), lambda g: (g * mask,), "dropout")


def mse_mean(a, b) -> Tensor:
    """Mean over all elements of ``(a - b)**2`` as a scalar tensor."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ValueError(f"mse_mean: shape mismatch {a.shape} vs {b.shape}")
    diff = a.data - b.data
    count = diff.size
    value = np.asarray(np.mean(diff * diff), dtype=diff.dtype)

    def _backward(g):
        ga = (2.0 / count) * diff * g
        ga = ga.astype(diff.dtype)
        return ga, -ga

    return _node(value, (a, b), _backward, "mse_mean")
