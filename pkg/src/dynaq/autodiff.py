"""Minimal dense-tensor reverse-mode autodiff on numpy arrays.

Just enough machinery for the models in this package: affine layers, a
direct (im2col) 2D convolution, relu, global mean pooling, concat, FiLM
modulation, elementwise/outer/bilinear pair combiners, row gathering, and
the loss heads (sigmoid BCE, softmax cross-entropy, MSE, InfoNCE).  Plus
Adam and a cosine learning-rate schedule.

Tensors store float32 by default (pass float64 arrays for high-precision
work such as finite-difference checks); scalar reductions accumulate in
float64 regardless.  Set ``debug_checks(True)`` to raise ``CheckError``
whenever an op produces a non-finite value.

Checkpoint file layout (little endian), version 1::

    magic b"DQCK", u32 version, u32 tensor count, then per tensor:
    u16 name length, name utf-8, u8 ndim, u32 * ndim dims, f32 data.
"""

from __future__ import annotations

import math
import struct
from pathlib import Path

import numpy as np

from .errors import CheckError, TraceFormatError

_DEBUG = False
_GRAD_ENABLED = True

_CKPT_MAGIC = b"DQCK"
_CKPT_VERSION = 1


def debug_checks(enabled: bool) -> None:
    global _DEBUG
    _DEBUG = bool(enabled)


class no_grad:
    """Context manager: ops inside build no graph (inference mode)."""

    def __enter__(self):
        global _GRAD_ENABLED
        self._prev = _GRAD_ENABLED
        _GRAD_ENABLED = False
        return self

    def __exit__(self, *exc):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._prev
        return False


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_bwd")

    def __init__(self, data, requires_grad=False):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._bwd = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def detach(self):
        return Tensor(self.data, requires_grad=False)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def backward(self):
        if self.data.size != 1:
            raise ValueError("backward() requires a scalar loss")
        topo = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if id(node) in seen:
                continue
            if expanded:
                seen.add(id(node))
                topo.append(node)
            else:
                stack.append((node, True))
                for p in node._parents:
                    if id(p) not in seen:
                        stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._bwd is not None and node.grad is not None:
                node._bwd(node.grad)


def _accum(t: Tensor, g: np.ndarray):
    if not t.requires_grad:
        return
    g = g.astype(t.data.dtype, copy=False)
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _make(data, parents, bwd):
    if _DEBUG and not np.all(np.isfinite(data)):
        raise CheckError("non-finite value produced by an op")
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._bwd = bwd
    return out


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Reduce a broadcast gradient back to `shape`."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------------
# elementwise / structural ops

def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data + b.data

    def bwd(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(g, b.data.shape))
    return _make(out_data, (a, b), bwd)


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data - b.data

    def bwd(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, -_unbroadcast(g, b.data.shape))
    return _make(out_data, (a, b), bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data * b.data

    def bwd(g):
        _accum(a, _unbroadcast(g * b.data, a.data.shape))
        _accum(b, _unbroadcast(g * a.data, b.data.shape))
    return _make(out_data, (a, b), bwd)


def scale(a: Tensor, c: float) -> Tensor:
    a = as_tensor(a)

    def bwd(g):
        _accum(a, g * c)
    return _make(a.data * c, (a,), bwd)


def relu(a: Tensor) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0

    def bwd(g):
        _accum(a, g * mask)
    return _make(a.data * mask, (a,), bwd)


def reshape(a: Tensor, shape) -> Tensor:
    a = as_tensor(a)

    def bwd(g):
        _accum(a, g.reshape(a.data.shape))
    return _make(a.data.reshape(shape), (a,), bwd)


def transpose(a: Tensor) -> Tensor:
    a = as_tensor(a)

    def bwd(g):
        _accum(a, g.T)
    return _make(a.data.T, (a,), bwd)


def concat(tensors, axis=0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.data.shape[axis] for t in tensors]
    out_data = np.concatenate([t.data for t in tensors], axis=axis)

    def bwd(g):
        pieces = np.split(g, np.cumsum(sizes)[:-1], axis=axis)
        for t, piece in zip(tensors, pieces):
            _accum(t, piece)
    return _make(out_data, tuple(tensors), bwd)


def gather_rows(a: Tensor, idx) -> Tensor:
    """out[i] = a[idx[i]]; backward scatter-adds into the source rows."""
    a = as_tensor(a)
    idx = np.asarray(idx, dtype=np.int64)

    def bwd(g):
        acc = np.zeros_like(a.data)
        np.add.at(acc, idx, g)
        _accum(a, acc)
    return _make(a.data[idx], (a,), bwd)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bwd(g):
        _accum(a, g @ b.data.T)
        _accum(b, a.data.T @ g)
    return _make(a.data @ b.data, (a, b), bwd)


def affine(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """x (B, I) @ w (I, O) + b (O,)"""
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    out_data = x.data @ w.data + b.data

    def bwd(g):
        _accum(x, g @ w.data.T)
        _accum(w, x.data.T @ g)
        _accum(b, g.sum(axis=0))
    return _make(out_data, (x, w, b), bwd)


def rsum(a: Tensor) -> Tensor:
    a = as_tensor(a)
    val = np.asarray(a.data.sum(dtype=np.float64), dtype=a.dtype)

    def bwd(g):
        _accum(a, np.broadcast_to(g, a.data.shape))
    return _make(val, (a,), bwd)


def rmean(a: Tensor) -> Tensor:
    a = as_tensor(a)
    n = a.data.size
    val = np.asarray(a.data.sum(dtype=np.float64) / n, dtype=a.dtype)

    def bwd(g):
        _accum(a, np.broadcast_to(g / n, a.data.shape))
    return _make(val, (a,), bwd)


# ---------------------------------------------------------------------------
# conv / pooling / film

def _im2col(x, kh, kw, stride):
    b, c, h, w = x.shape
    ho = (h - kh) // stride + 1
    wo = (w - kw) // stride + 1
    win = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]            # (B, C, ho, wo, kh, kw)
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(b, ho * wo, c * kh * kw)
    return cols, ho, wo


def conv2d(x: Tensor, w: Tensor, b: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Direct convolution: x (B,C,H,W), w (F,C,kh,kw), b (F,)."""
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    f, c, kh, kw = w.data.shape
    xd = x.data
    if padding:
        xd = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    cols, ho, wo = _im2col(xd, kh, kw, stride)
    wf = w.data.reshape(f, -1)
    out_data = (cols @ wf.T + b.data).transpose(0, 2, 1).reshape(-1, f, ho, wo)

    def bwd(g):
        gf = g.reshape(g.shape[0], f, ho * wo).transpose(0, 2, 1)  # (B, L, F)
        _accum(b, gf.sum(axis=(0, 1)))
        gw = np.einsum("blf,blk->fk", gf, cols, optimize=True)
        _accum(w, gw.reshape(w.data.shape))
        gcols = gf @ wf                                            # (B, L, C*kh*kw)
        bsz = xd.shape[0]
        gx = np.zeros_like(xd)
        gcols = gcols.reshape(bsz, ho, wo, c, kh, kw)
        for i in range(kh):
            for j in range(kw):
                gx[:, :, i:i + ho * stride:stride, j:j + wo * stride:stride] += \
                    gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        if padding:
            gx = gx[:, :, padding:-padding, padding:-padding]
        _accum(x, gx)
    return _make(out_data, (x, w, b), bwd)


def mean_pool(x: Tensor) -> Tensor:
    """Global average over the spatial axes: (B,C,H,W) -> (B,C)."""
    x = as_tensor(x)
    b, c, h, w = x.data.shape
    val = x.data.sum(axis=(2, 3), dtype=np.float64) / (h * w)

    def bwd(g):
        _accum(x, np.broadcast_to(g[:, :, None, None] / (h * w), x.data.shape))
    return _make(val.astype(x.dtype), (x,), bwd)


def film(h: Tensor, gamma: Tensor, beta: Tensor) -> Tensor:
    """Per-channel modulation: gamma, beta (B, C) applied to h (B,C,H,W)."""
    h, gamma, beta = as_tensor(h), as_tensor(gamma), as_tensor(beta)
    gexp = gamma.data[:, :, None, None]
    out_data = gexp * h.data + beta.data[:, :, None, None]

    def bwd(g):
        _accum(h, g * gexp)
        _accum(gamma, (g * h.data).sum(axis=(2, 3)))
        _accum(beta, g.sum(axis=(2, 3)))
    return _make(out_data, (h, gamma, beta), bwd)


# ---------------------------------------------------------------------------
# pair combiners

def outer_rows(a: Tensor, b: Tensor) -> Tensor:
    """Row-wise outer product, flattened: (B,d), (B,e) -> (B, d*e)."""
    a, b = as_tensor(a), as_tensor(b)
    bb, d = a.data.shape
    e = b.data.shape[1]
    out_data = (a.data[:, :, None] * b.data[:, None, :]).reshape(bb, d * e)

    def bwd(g):
        gm = g.reshape(bb, d, e)
        _accum(a, np.einsum("bde,be->bd", gm, b.data, optimize=True))
        _accum(b, np.einsum("bde,bd->be", gm, a.data, optimize=True))
    return _make(out_data, (a, b), bwd)


def bilinear_pairs(a: Tensor, b: Tensor, w: Tensor, bias: Tensor) -> Tensor:
    """out[n,k] = a[n] . W[k] . b[n] + bias[k], without materializing outers."""
    a, b, w, bias = as_tensor(a), as_tensor(b), as_tensor(w), as_tensor(bias)
    aw = np.einsum("ni,kij->nkj", a.data, w.data, optimize=True)
    out_data = np.einsum("nkj,nj->nk", aw, b.data, optimize=True) + bias.data

    def bwd(g):
        _accum(bias, g.sum(axis=0))
        _accum(a, np.einsum("nk,kij,nj->ni", g, w.data, b.data, optimize=True))
        _accum(b, np.einsum("nk,kij,ni->nj", g, w.data, a.data, optimize=True))
        _accum(w, np.einsum("nk,ni,nj->kij", g, a.data, b.data, optimize=True))
    return _make(out_data, (a, b, w, bias), bwd)


# ---------------------------------------------------------------------------
# losses

def sigmoid_bce(logits: Tensor, labels) -> Tensor:
    """Mean logistic loss of logits (B,) against 0/1 labels."""
    logits = as_tensor(logits)
    y = np.asarray(labels, dtype=np.float64)
    x = logits.data.astype(np.float64)
    per = np.maximum(x, 0.0) - x * y + np.log1p(np.exp(-np.abs(x)))
    val = np.asarray(per.sum() / per.size, dtype=logits.dtype)

    def bwd(g):
        s = 1.0 / (1.0 + np.exp(-x))
        _accum(logits, (g * (s - y) / per.size))
    return _make(val, (logits,), bwd)


def _rows(logits: Tensor):
    return logits.data.reshape(-1, logits.data.shape[-1])


def softmax_xent(logits: Tensor, target_idx) -> Tensor:
    """Mean cross-entropy of logits (B,K) (or (K,)) against class indices."""
    logits = as_tensor(logits)
    x = _rows(logits).astype(np.float64)
    idx = np.atleast_1d(np.asarray(target_idx, dtype=np.int64))
    n, k = x.shape
    if idx.shape != (n,):
        raise ValueError(f"expected {n} target indices, got {idx.shape}")
    if np.any(idx < 0) or np.any(idx >= k):
        raise ValueError("target bin out of range")
    m = x.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(x - m).sum(axis=1))
    val = np.asarray((lse - x[np.arange(n), idx]).sum() / n, dtype=logits.dtype)

    def bwd(g):
        p = np.exp(x - lse[:, None])
        p[np.arange(n), idx] -= 1.0
        _accum(logits, (g * p / n).reshape(logits.data.shape))
    return _make(val, (logits,), bwd)


def softmax_probs(logits: np.ndarray) -> np.ndarray:
    """Plain softmax over the last axis (no grad; diagnostics)."""
    x = np.asarray(logits, dtype=np.float64)
    m = x.max(axis=-1, keepdims=True)
    e = np.exp(x - m)
    return e / e.sum(axis=-1, keepdims=True)


def mse(pred: Tensor, target) -> Tensor:
    pred = as_tensor(pred)
    t = np.asarray(target, dtype=np.float64)
    diff = pred.data.astype(np.float64) - t
    val = np.asarray((diff * diff).sum() / diff.size, dtype=pred.dtype)

    def bwd(g):
        _accum(pred, g * 2.0 * diff / diff.size)
    return _make(val, (pred,), bwd)


def infonce(scores: Tensor, positive_idx, temperature: float) -> Tensor:
    """Mean InfoNCE over rows of (B, N) scores (or a single (N,) row).

    Row loss: -beta * s[pos] + logsumexp_j(beta * s[j]).
    """
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    scores = as_tensor(scores)
    x = _rows(scores).astype(np.float64) * temperature
    idx = np.atleast_1d(np.asarray(positive_idx, dtype=np.int64))
    n, k = x.shape
    if k < 2:
        raise ValueError("InfoNCE needs at least 2 candidates per row")
    if idx.shape != (n,):
        raise ValueError(f"expected {n} positive indices, got {idx.shape}")
    m = x.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(x - m).sum(axis=1))
    val = np.asarray((lse - x[np.arange(n), idx]).sum() / n, dtype=scores.dtype)

    def bwd(g):
        p = np.exp(x - lse[:, None])
        p[np.arange(n), idx] -= 1.0
        _accum(scores, (g * temperature * p / n).reshape(scores.data.shape))
    return _make(val, (scores,), bwd)


# ---------------------------------------------------------------------------
# initialization / optimizer / schedule

def kaiming_uniform(shape, fan_in, rng: np.random.Generator, dtype=np.float32) -> np.ndarray:
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Adam:
    """Standard Adam; the learning rate is passed per step (schedules)."""

    def __init__(self, params: dict, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.params = params
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self, lr: float) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for k, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad
            self.m[k] = b1 * self.m[k] + (1 - b1) * g
            self.v[k] = b2 * self.v[k] + (1 - b2) * (g * g)
            mhat = self.m[k] / (1 - b1 ** self.t)
            vhat = self.v[k] / (1 - b2 ** self.t)
            p.data -= (lr * mhat / (np.sqrt(vhat) + self.eps)).astype(p.dtype)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None


def adam_step(params: dict, state: Adam | None, lr: float,
              betas=(0.9, 0.999), eps: float = 1e-8) -> Adam:
    """Functional wrapper: one Adam update, returning the (new) state."""
    if state is None:
        state = Adam(params, betas[0], betas[1], eps)
    state.step(lr)
    return state


def cosine_lr(step: int, total_steps: int, lr0: float) -> float:
    if total_steps <= 0:
        raise ValueError("total_steps must be positive")
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside schedule of {total_steps}")
    return lr0 * 0.5 * (1.0 + math.cos(math.pi * step / total_steps))


# ---------------------------------------------------------------------------
# checkpoints

def save_checkpoint(path, params: dict) -> None:
    """Write named float32 tensors; values are cast to float32 on disk."""
    blobs = [_CKPT_MAGIC, struct.pack("<II", _CKPT_VERSION, len(params))]
    for name, p in params.items():
        arr = np.ascontiguousarray(
            p.data if isinstance(p, Tensor) else p, dtype=np.float32)
        enc = name.encode("utf-8")
        blobs.append(struct.pack("<H", len(enc)))
        blobs.append(enc)
        blobs.append(struct.pack("<B", arr.ndim))
        blobs.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        blobs.append(arr.tobytes())
    Path(path).write_bytes(b"".join(blobs))


def load_checkpoint(path) -> dict:
    raw = Path(path).read_bytes()
    if len(raw) < 12 or raw[:4] != _CKPT_MAGIC:
        raise TraceFormatError(f"{path}: not a checkpoint file")
    version, count = struct.unpack("<II", raw[4:12])
    if version != _CKPT_VERSION:
        raise TraceFormatError(f"{path}: unsupported checkpoint version {version}")
    out = {}
    off = 12
    for _ in range(count):
        (nlen,) = struct.unpack("<H", raw[off:off + 2]); off += 2
        name = raw[off:off + nlen].decode("utf-8"); off += nlen
        (ndim,) = struct.unpack("<B", raw[off:off + 1]); off += 1
        dims = struct.unpack(f"<{ndim}I", raw[off:off + 4 * ndim]); off += 4 * ndim
        size = int(np.prod(dims)) if ndim else 1
        arr = np.frombuffer(raw[off:off + 4 * size], dtype="<f4").reshape(dims).copy()
        off += 4 * size
        out[name] = arr
    if off != len(raw):
        raise TraceFormatError(f"{path}: trailing bytes in checkpoint")
    return out
