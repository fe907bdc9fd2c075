"""Minimal reverse-mode differentiation over numpy arrays.

Tape-style graph: every operation returns a Node holding its value, its
parent nodes, and a closure that routes the upstream gradient to the
parents. backward() walks the graph in reverse topological order exactly
once, so gradient accumulation order is fixed and deterministic.

Primitives are exactly what the unrolled reconstruction network needs:
shape-preserving 3D convolution (cross-correlation semantics, zero padding),
batch normalization, ReLU, channel concat/slice, addition, embedded
projector applications, and MSE loss. Convolutions reduce to one GEMM per
output frame, which keeps frames independent when the temporal kernel
extent is 1.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import projector

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Build values only: ops inside record no parents and keep no buffers."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Node:
    """One value in the computation graph."""

    __slots__ = ("value", "grad", "parents", "backward_fn", "requires_grad")

    def __init__(self, value, parents=(), backward_fn=None, requires_grad=False):
        self.value = value
        self.grad = None
        self.parents = parents
        self.backward_fn = backward_fn
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.value.shape


def parameter(value) -> Node:
    return Node(np.asarray(value), requires_grad=True)


def constant(value) -> Node:
    return Node(np.asarray(value))


def _make(value, parents, backward_fn) -> Node:
    if _grad_enabled and any(p.requires_grad for p in parents):
        return Node(value, tuple(parents), backward_fn, requires_grad=True)
    return Node(value)


def _acc(node: Node, g: np.ndarray, own: bool = False) -> None:
    """Accumulate gradient; ``own=True`` promises g is a fresh buffer."""
    if not node.requires_grad:
        return
    if node.grad is None:
        node.grad = g if own else g.copy()
    else:
        node.grad += g


def backward(root: Node) -> None:
    """Reverse-mode sweep from a scalar root."""
    if root.value.size != 1:
        raise ValueError("backward requires a scalar root node")
    topo: list[Node] = []
    seen: set[int] = set()
    stack: list[tuple[Node, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in seen:
                stack.append((p, False))
    root.grad = np.ones_like(root.value)
    for node in reversed(topo):
        if node.backward_fn is not None and node.grad is not None:
            node.backward_fn(node.grad)


def zero_grads(params) -> None:
    for p in params:
        p.grad = None


# ---------------------------------------------------------------------------
# elementwise / structural ops

def add(a: Node, b: Node) -> Node:
    if a.value.shape != b.value.shape:
        raise ValueError(f"add shape mismatch: {a.value.shape} vs {b.value.shape}")

    def bwd(gout):
        _acc(a, gout)
        _acc(b, gout)

    return _make(a.value + b.value, (a, b), bwd)


def relu(x: Node) -> Node:
    pos = x.value > 0

    def bwd(gout):
        _acc(x, np.where(pos, gout, 0), own=True)

    return _make(np.maximum(x.value, 0), (x,), bwd)


def concat_channels(nodes) -> Node:
    nodes = list(nodes)
    sizes = [n.value.shape[1] for n in nodes]
    offsets = np.cumsum(sizes)[:-1]

    def bwd(gout):
        for n, piece in zip(nodes, np.split(gout, offsets, axis=1)):
            _acc(n, piece)

    return _make(np.concatenate([n.value for n in nodes], axis=1), nodes, bwd)


def slice_channel(x: Node, idx: int) -> Node:
    if not 0 <= idx < x.value.shape[1]:
        raise ValueError(f"channel {idx} out of range for shape {x.value.shape}")

    def bwd(gout):
        g = np.zeros_like(x.value)
        g[:, idx:idx + 1] = gout
        _acc(x, g, own=True)

    return _make(x.value[:, idx:idx + 1].copy(), (x,), bwd)


def mse_loss(pred: Node, target: np.ndarray) -> Node:
    target = np.asarray(target)
    if pred.value.shape != target.shape:
        raise ValueError(f"mse shape mismatch: {pred.value.shape} vs {target.shape}")
    diff = pred.value - target

    def bwd(gout):
        _acc(pred, gout * (2.0 / diff.size) * diff, own=True)

    return _make(np.asarray(np.mean(diff * diff)), (pred,), bwd)


# ---------------------------------------------------------------------------
# 3D convolution (cross-correlation), zero padding, stride 1

def _frame_cols(xp: np.ndarray, t: int, kt: int, H: int, W: int) -> np.ndarray:
    """im2col for one output frame: (Ci*kt*3*3, N*H*W)."""
    slab = xp[:, :, t:t + kt]
    win = sliding_window_view(slab, (3, 3), axis=(3, 4))  # (N,Ci,kt,H,W,3,3)
    return win.transpose(1, 2, 5, 6, 0, 3, 4).reshape(-1, xp.shape[0] * H * W)


def _conv3d_value(xv: np.ndarray, wv: np.ndarray, bv: np.ndarray) -> np.ndarray:
    N, Ci, T, H, W = xv.shape
    Co, _, kt, _, _ = wv.shape
    pt = kt // 2
    xp = np.pad(xv, ((0, 0), (0, 0), (pt, pt), (1, 1), (1, 1)))
    w2 = wv.reshape(Co, -1)
    out = np.empty((N, Co, T, H, W), dtype=xv.dtype)
    for t in range(T):
        cols = _frame_cols(xp, t, kt, H, W)
        out[:, :, t] = (w2 @ cols).reshape(Co, N, H, W).transpose(1, 0, 2, 3)
    return out + bv.reshape(1, Co, 1, 1, 1)


def conv3d(x: Node, weight: Node, bias: Node) -> Node:
    """Shape-preserving convolution; kernel (Co, Ci, kt, 3, 3), kt in {1, 3}."""
    xv, wv, bv = x.value, weight.value, bias.value
    if xv.ndim != 5 or wv.ndim != 5:
        raise ValueError("conv3d expects (N,C,T,H,W) input and (Co,Ci,kt,3,3) weight")
    if wv.shape[1] != xv.shape[1]:
        raise ValueError(f"conv3d channel mismatch: input {xv.shape[1]}, weight {wv.shape[1]}")
    if wv.shape[2] not in (1, 3) or wv.shape[3] != 3 or wv.shape[4] != 3:
        raise ValueError(f"unsupported kernel shape {wv.shape[2:]}")
    if bv.shape != (wv.shape[0],):
        raise ValueError("bias must be one value per output channel")

    N, Ci, T, H, W = xv.shape
    Co, _, kt, _, _ = wv.shape
    pt = kt // 2

    def bwd(gout):
        _acc(bias, gout.sum(axis=(0, 2, 3, 4)), own=True)
        xp = np.pad(xv, ((0, 0), (0, 0), (pt, pt), (1, 1), (1, 1)))
        w2 = wv.reshape(Co, -1)
        gw2 = np.zeros_like(w2)
        gxp = np.zeros_like(xp)
        for t in range(T):
            go_t = gout[:, :, t].transpose(1, 0, 2, 3).reshape(Co, N * H * W)
            cols = _frame_cols(xp, t, kt, H, W)
            gw2 += go_t @ cols.T
            gcols = (w2.T @ go_t).reshape(Ci, kt, 3, 3, N, H, W)
            for a in range(kt):
                for p in range(3):
                    for q in range(3):
                        gxp[:, :, t + a, p:p + H, q:q + W] += \
                            gcols[:, a, p, q].transpose(1, 0, 2, 3)
        _acc(weight, gw2.reshape(wv.shape), own=True)
        if pt:
            gx = gxp[:, :, pt:-pt, 1:-1, 1:-1]
        else:
            gx = gxp[:, :, :, 1:-1, 1:-1]
        _acc(x, np.ascontiguousarray(gx), own=True)

    return _make(_conv3d_value(xv, wv, bv), (x, weight, bias), bwd)


# ---------------------------------------------------------------------------
# batch normalization

@dataclass
class BatchNormState:
    """Learnable scale/shift plus running statistics for one channel axis."""

    gamma: Node
    beta: Node
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    eps: float = 1e-5
    initialized: bool = False

    @classmethod
    def create(cls, n_channels: int, dtype) -> "BatchNormState":
        return cls(
            gamma=parameter(np.ones(n_channels, dtype=dtype)),
            beta=parameter(np.zeros(n_channels, dtype=dtype)),
            running_mean=np.zeros(n_channels, dtype=dtype),
            running_var=np.ones(n_channels, dtype=dtype),
        )


def batch_norm(x: Node, state: BatchNormState, training: bool) -> Node:
    """Per-channel normalization over (batch, T, H, W).

    Training mode standardizes with batch statistics (biased variance) and
    updates the running statistics with momentum; eval mode uses the stored
    running statistics and fails if none were ever recorded.
    """
    xv = x.value
    if xv.ndim != 5:
        raise ValueError("batch_norm expects (N,C,T,H,W)")
    axes = (0, 2, 3, 4)
    C = xv.shape[1]
    bshape = (1, C, 1, 1, 1)
    gamma, beta = state.gamma, state.beta
    eps = state.eps

    if training:
        mean = xv.mean(axis=axes)
        var = xv.var(axis=axes)
        n = xv.size // C
        unbiased = var * (n / max(n - 1, 1))
        m = state.momentum
        state.running_mean = ((1 - m) * state.running_mean + m * mean).astype(xv.dtype)
        state.running_var = ((1 - m) * state.running_var + m * unbiased).astype(xv.dtype)
        state.initialized = True
    else:
        if not state.initialized:
            raise RuntimeError("uninitialized running statistics: train before eval")
        mean = state.running_mean
        var = state.running_var

    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (xv - mean.reshape(bshape)) * inv_std.reshape(bshape)
    out = gamma.value.reshape(bshape) * xhat + beta.value.reshape(bshape)

    def bwd(gout):
        _acc(gamma, np.sum(gout * xhat, axis=axes), own=True)
        _acc(beta, gout.sum(axis=axes), own=True)
        gscale = (gamma.value * inv_std).reshape(bshape)
        if training:
            gm = gout.mean(axis=axes).reshape(bshape)
            gx_corr = xhat * np.mean(gout * xhat, axis=axes).reshape(bshape)
            _acc(x, gscale * (gout - gm - gx_corr), own=True)
        else:
            _acc(x, gscale * gout, own=True)

    return _make(out, (x, gamma, beta), bwd)


# ---------------------------------------------------------------------------
# embedded projector applications

def linear_operator(x: Node, geom: projector.ProjectorGeometry,
                    direction: str) -> Node:
    """Frame-wise system operator as a graph node; the backward rule applies
    the adjoint (and vice versa)."""
    if direction not in ("forward", "adjoint"):
        raise ValueError("direction must be 'forward' or 'adjoint'")
    xv = x.value
    if xv.ndim != 5:
        raise ValueError("linear_operator expects (N,C,T,H,W) or (N,C,T,V,B)")
    fwd = projector.forward_project if direction == "forward" else projector.back_project
    rev = projector.back_project if direction == "forward" else projector.forward_project
    in_shape = geom.image_shape if direction == "forward" else geom.sinogram_shape
    out_shape = geom.sinogram_shape if direction == "forward" else geom.image_shape
    if xv.shape[3:] != in_shape:
        raise ValueError(f"operator input shape {xv.shape[3:]} != {in_shape}")

    N, C, T = xv.shape[:3]
    val = np.empty((N, C, T) + out_shape, dtype=xv.dtype)
    for n in range(N):
        for c in range(C):
            for t in range(T):
                val[n, c, t] = fwd(geom, xv[n, c, t])

    def bwd(gout):
        g = np.empty_like(xv)
        for n in range(N):
            for c in range(C):
                for t in range(T):
                    g[n, c, t] = rev(geom, gout[n, c, t])
        _acc(x, g, own=True)

    return _make(val, (x,), bwd)


# ---------------------------------------------------------------------------
# gradient checking

def grad_check(build, params, eps: float = 1e-5, max_points: int = 10000,
               seed: int = 0) -> float:
    """Worst relative error between analytic and central-difference gradients.

    ``build`` reconstructs the scalar loss node from the current parameter
    values. Every parameter coordinate is probed, or a seeded random sample
    of max_points coordinates when there are more. Error metric per
    coordinate: |a - n| / (1e-6 + |a| + |n|).
    """
    params = list(params)
    zero_grads(params)
    root = build()
    backward(root)
    analytic = [p.grad if p.grad is not None else np.zeros_like(p.value)
                for p in params]

    coords = [(i, idx) for i, p in enumerate(params)
              for idx in range(p.value.size)]
    if len(coords) > max_points:
        rng = np.random.default_rng(seed)
        pick = rng.choice(len(coords), size=max_points, replace=False)
        coords = [coords[k] for k in sorted(pick)]

    worst = 0.0
    for i, idx in coords:
        flat = params[i].value.reshape(-1)
        orig = flat[idx]
        flat[idx] = orig + eps
        f_plus = float(build().value)
        flat[idx] = orig - eps
        f_minus = float(build().value)
        flat[idx] = orig
        numeric = (f_plus - f_minus) / (2 * eps)
        a = float(analytic[i].reshape(-1)[idx])
        err = abs(a - numeric) / (1e-6 + abs(a) + abs(numeric))
        worst = max(worst, err)
    return worst
