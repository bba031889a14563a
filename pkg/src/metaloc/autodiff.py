"""Reverse-mode automatic differentiation over dense float64 arrays.

Implements exactly the layer set the positioning model needs: 2-D
convolution with "same" zero padding, batch normalization with running
statistics, dense layers, ReLU, elementwise add (residual merge), flatten,
and an MSE loss, plus Adam/SGD parameter updates.

Graphs are built define-by-run: every op returns a `Tensor` that remembers
its parents and a closure that routes the output gradient back to them.
`backward(loss)` zeroes all gradient accumulators reachable from the loss,
then walks the graph once in reverse topological order. All payloads are
64-bit floats; convolution uses cross-correlation semantics.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ContractError, ShapeError

__all__ = [
    "Tensor",
    "BatchNormState",
    "OptimizerState",
    "conv2d",
    "batchnorm",
    "dense",
    "relu",
    "add",
    "flatten",
    "scale",
    "tensor_sum",
    "mse_loss",
    "backward",
    "optimizer_step",
    "he_uniform",
]


class Tensor:
    """A node in the autodiff graph holding a float64 ndarray."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None):
        self.data = np.asarray(data, dtype=np.float64, order="C")
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self):
        return self.data.shape

    def _accumulate(self, g, own: bool = False):
        """Add an incoming gradient; `own=True` means g is a fresh array
        this node may take without copying (never a view another node holds)."""
        if self.grad is None:
            self.grad = g if own else g.copy()
        else:
            self.grad += g

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def _result(data, parents, backward_fn):
    needs = any(p.requires_grad for p in parents)
    if not needs:
        return Tensor(data)
    out = Tensor(data, requires_grad=True, _parents=tuple(parents), _backward=backward_fn)
    return out


def _same_padding(size, kernel, stride):
    """TF-style 'same': output = ceil(size / stride)."""
    out = -(-size // stride)
    pad = max((out - 1) * stride + kernel - size, 0)
    return out, pad // 2, pad - pad // 2


def conv2d(x: Tensor, w: Tensor, b: Tensor, stride=(1, 1)) -> Tensor:
    """Cross-correlate a (B,H,W,Cin) batch with (Kh,Kw,Cin,Cout) kernels.

    Zero-pads so that each spatial output size is ceil(input/stride).
    """
    sh, sw = int(stride[0]), int(stride[1])
    if sh < 1 or sw < 1:
        raise ShapeError(f"stride must be >= 1, got {(sh, sw)}")
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D input/kernels, got {x.data.shape} and {w.data.shape}")
    bsz, h, wdt, cin = x.data.shape
    kh, kw, kcin, cout = w.data.shape
    if kcin != cin:
        raise ShapeError(f"kernel Cin {kcin} != input Cin {cin}")
    if b.data.shape != (cout,):
        raise ShapeError(f"bias shape {b.data.shape} != ({cout},)")

    oh, ph0, ph1 = _same_padding(h, kh, sh)
    ow, pw0, pw1 = _same_padding(wdt, kw, sw)
    if ph0 or ph1 or pw0 or pw1:
        xp = np.zeros((bsz, h + ph0 + ph1, wdt + pw0 + pw1, cin))
        xp[:, ph0 : ph0 + h, pw0 : pw0 + wdt, :] = x.data
    else:
        xp = x.data
    # (B, H', W', Cin, Kh, Kw) view, strided to the output grid, then one
    # gather into (N, Kh*Kw*Cin) columns so the kernel contraction is a GEMM
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, ::sh, ::sw]
    cols = np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3))
    cols = cols.reshape(bsz * oh * ow, kh * kw * cin)
    w2 = w.data.reshape(kh * kw * cin, cout)
    y = cols @ w2
    y += b.data
    y = y.reshape(bsz, oh, ow, cout)

    def backward_fn(gy):
        gy2 = gy.reshape(bsz * oh * ow, cout)
        if w.requires_grad:
            w._accumulate((cols.T @ gy2).reshape(kh, kw, cin, cout), own=True)
        if b.requires_grad:
            b._accumulate(gy2.sum(axis=0), own=True)
        if x.requires_grad:
            gcols = (gy2 @ w2.T).reshape(bsz, oh, ow, kh, kw, cin)
            gxp = np.zeros((bsz, h + ph0 + ph1, wdt + pw0 + pw1, cin))
            for i in range(kh):
                for j in range(kw):
                    gxp[:, i : i + oh * sh : sh, j : j + ow * sw : sw, :] += gcols[:, :, :, i, j, :]
            gx = gxp[:, ph0 : ph0 + h, pw0 : pw0 + wdt, :]
            x._accumulate(np.ascontiguousarray(gx) if (ph0 or ph1 or pw0 or pw1) else gxp, own=True)

    return _result(y, (x, w, b), backward_fn)


@dataclass
class BatchNormState:
    """Running statistics of one batchnorm layer (not trainable weights)."""

    running_mean: np.ndarray
    running_var: np.ndarray

    @classmethod
    def create(cls, channels: int) -> "BatchNormState":
        return cls(np.zeros(channels), np.ones(channels))

    def copy(self) -> "BatchNormState":
        return BatchNormState(self.running_mean.copy(), self.running_var.copy())


def batchnorm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    state: BatchNormState,
    mode: str,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel normalization over batch and spatial axes.

    Train mode normalizes with biased batch statistics and updates the
    running stats in place; eval mode uses the running stats. The last
    axis is the channel axis. Train mode requires at least 2 normalized
    elements per channel (batch x spatial); a single element has no
    defined variance.
    """
    if mode not in ("train", "eval"):
        raise ContractError(f"batchnorm mode must be 'train' or 'eval', got {mode!r}")
    c = x.data.shape[-1]
    if gamma.data.shape != (c,) or beta.data.shape != (c,):
        raise ShapeError(f"gamma/beta must have shape ({c},)")
    axes = tuple(range(x.data.ndim - 1))
    n = x.data.size // c

    if mode == "train":
        if n < 2:
            raise ContractError(f"batchnorm train mode needs >= 2 elements per channel, got {n}")
        mu = x.data.mean(axis=axes)
        xc = x.data - mu
        var = np.mean(xc * xc, axis=axes)
        state.running_mean *= 1.0 - momentum
        state.running_mean += momentum * mu
        state.running_var *= 1.0 - momentum
        state.running_var += momentum * var
    else:
        mu = state.running_mean
        xc = x.data - mu
        var = state.running_var

    std = np.sqrt(var + eps)
    xhat = xc / std
    y = gamma.data * xhat
    y += beta.data

    def backward_fn(gy):
        if gamma.requires_grad:
            gamma._accumulate((gy * xhat).sum(axis=axes), own=True)
        if beta.requires_grad:
            beta._accumulate(gy.sum(axis=axes), own=True)
        if x.requires_grad:
            gxhat = gy * gamma.data
            if mode == "train":
                gvar = (gxhat * xc).sum(axis=axes) * (-0.5) * std**-3
                gmu = -gxhat.sum(axis=axes) / std + gvar * (-2.0 / n) * xc.sum(axis=axes)
                gx = gxhat
                gx /= std
                gx += gvar * (2.0 / n) * xc
                gx += gmu / n
                x._accumulate(gx, own=True)
            else:
                gxhat /= std
                x._accumulate(gxhat, own=True)

    return _result(y, (x, gamma, beta), backward_fn)


def dense(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Affine map: a (B,in) batch (or a single (in,) vector) times (in,out) plus (out,)."""
    if w.data.ndim != 2:
        raise ShapeError(f"weights must be 2-D, got {w.data.shape}")
    din, dout = w.data.shape
    if b.data.shape != (dout,):
        raise ShapeError(f"bias shape {b.data.shape} != ({dout},)")
    if x.data.shape[-1] != din:
        raise ShapeError(f"input feature size {x.data.shape[-1]} != {din}")
    if x.data.ndim not in (1, 2):
        raise ShapeError(f"dense input must be 1-D or 2-D, got {x.data.shape}")
    y = x.data @ w.data + b.data

    def backward_fn(gy):
        if x.requires_grad:
            x._accumulate(gy @ w.data.T, own=True)
        if w.requires_grad:
            if x.data.ndim == 1:
                w._accumulate(np.outer(x.data, gy), own=True)
            else:
                w._accumulate(x.data.T @ gy, own=True)
        if b.requires_grad:
            if gy.ndim == 1:
                b._accumulate(gy)
            else:
                b._accumulate(gy.sum(axis=0), own=True)

    return _result(y, (x, w, b), backward_fn)


def relu(x: Tensor) -> Tensor:
    y = np.maximum(x.data, 0.0)
    mask = x.data > 0.0

    def backward_fn(gy):
        if x.requires_grad:
            x._accumulate(gy * mask, own=True)

    return _result(y, (x,), backward_fn)


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum of two equal-shape tensors (residual merge)."""
    if a.data.shape != b.data.shape:
        raise ShapeError(f"add shapes differ: {a.data.shape} vs {b.data.shape}")
    y = a.data + b.data

    def backward_fn(gy):
        # gy stays owned by the output node: both parents see the same array
        if a.requires_grad:
            a._accumulate(gy)
        if b.requires_grad:
            b._accumulate(gy)

    return _result(y, (a, b), backward_fn)


def flatten(x: Tensor) -> Tensor:
    """Row-major reshape of (B, ...) to (B, prod)."""
    bsz = x.data.shape[0]
    y = x.data.reshape(bsz, -1)

    def backward_fn(gy):
        if x.requires_grad:
            x._accumulate(gy.reshape(x.data.shape))

    return _result(y, (x,), backward_fn)


def scale(x: Tensor, c: float) -> Tensor:
    """Multiply by a python scalar (used to weight losses)."""
    c = float(c)
    y = x.data * c

    def backward_fn(gy):
        if x.requires_grad:
            x._accumulate(gy * c, own=True)

    return _result(y, (x,), backward_fn)


def tensor_sum(x: Tensor) -> Tensor:
    """Sum of all entries as a scalar tensor."""
    y = np.asarray(x.data.sum())

    def backward_fn(gy):
        if x.requires_grad:
            x._accumulate(np.full(x.data.shape, float(gy)))

    return _result(y, (x,), backward_fn)


def mse_loss(pred: Tensor, target: Tensor) -> Tensor:
    """Mean over batch and coordinates of squared differences."""
    if pred.data.shape != target.data.shape:
        raise ShapeError(f"pred/target shapes differ: {pred.data.shape} vs {target.data.shape}")
    if pred.data.size == 0:
        raise ContractError("mse_loss on an empty batch")
    diff = pred.data - target.data
    y = np.mean(diff * diff)

    def backward_fn(gy):
        scale = gy * (2.0 / diff.size)
        if pred.requires_grad:
            pred._accumulate(scale * diff)
        if target.requires_grad:
            target._accumulate(-scale * diff)

    return _result(y, (pred, target), backward_fn)


def _toposort(root: Tensor):
    order = []
    visited = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Propagate d(loss)/d(node) to every reachable tensor with requires_grad.

    Gradient accumulators of all reachable nodes are zeroed first, so each
    call yields the gradients of this loss alone.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.data.shape}")
    order = _toposort(loss)
    for node in order:
        node.grad = None
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


@dataclass
class OptimizerState:
    """Adam or SGD update state over a named parameter set."""

    kind: str = "adam"
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def optimizer_step(params: dict, grads: dict, state: OptimizerState) -> None:
    """Apply one in-place update to every parameter named in `grads`.

    Parameters are visited in sorted-name order so the update sequence is
    deterministic.
    """
    if state.kind not in ("adam", "sgd"):
        raise ContractError(f"unknown optimizer kind {state.kind!r}")
    state.step_count += 1
    t = state.step_count
    for name in sorted(grads):
        p = params[name]
        g = grads[name]
        if g.shape != p.data.shape:
            raise ShapeError(f"gradient shape {g.shape} != parameter shape {p.data.shape} for {name!r}")
        if state.kind == "sgd":
            p.data -= state.lr * g
            continue
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        mhat = m / (1.0 - state.beta1**t)
        vhat = v / (1.0 - state.beta2**t)
        p.data -= state.lr * mhat / (np.sqrt(vhat) + state.eps)


def he_uniform(shape, fan_in: int, rng: np.random.Generator) -> np.ndarray:
    """He-uniform initialization for ReLU layers."""
    limit = math.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape)
