"""Dense double-precision tensor primitives with hand-written backward passes.

Feature maps are plain ``numpy.ndarray`` objects of shape ``(n, c, h, w)``.
Every differentiable primitive ``op`` has a matching ``op_backward`` that
takes the upstream gradient plus the forward inputs and returns input and
parameter gradients.  Linear maps are dicts ``{"weight": (in, out),
"bias": (out,)}`` so parameter trees stay trivially serialisable.
"""

from __future__ import annotations

import contextlib
import contextvars
import math
from dataclasses import dataclass

import numpy as np

DTYPE = np.float64

_GELU_K = math.sqrt(2.0 / math.pi)
_GELU_C = 0.044715


class ShapeError(ValueError):
    """Raised when tensor dimensions are inconsistent with an operation."""


# ---------------------------------------------------------------------------
# MAC instrumentation
# ---------------------------------------------------------------------------

@dataclass
class MacCounter:
    total: int = 0

    def add(self, n: int) -> None:
        self.total += int(n)


_ACTIVE_COUNTER: contextvars.ContextVar[MacCounter | None] = contextvars.ContextVar(
    "shiftseg_mac_counter", default=None
)


@contextlib.contextmanager
def count_macs():
    """Count multiply-accumulates of projections executed inside the block.

    Only weight products are counted; biases, norms and additions are not.
    """
    counter = MacCounter()
    token = _ACTIVE_COUNTER.set(counter)
    try:
        yield counter
    finally:
        _ACTIVE_COUNTER.reset(token)


def record_macs(n: int) -> None:
    counter = _ACTIVE_COUNTER.get()
    if counter is not None:
        counter.add(n)


# ---------------------------------------------------------------------------
# Parameter initialisation
# ---------------------------------------------------------------------------

def init_linear(rng: np.random.Generator, in_dim: int, out_dim: int, bias: bool = True) -> dict:
    """Fan-in uniform init in [-sqrt(1/in_dim), sqrt(1/in_dim)]."""
    if in_dim <= 0 or out_dim <= 0:
        raise ShapeError(f"linear map needs positive dims, got {in_dim}->{out_dim}")
    bound = math.sqrt(1.0 / in_dim)
    weight = rng.uniform(-bound, bound, size=(in_dim, out_dim))
    b = rng.uniform(-bound, bound, size=out_dim) if bias else np.zeros(out_dim)
    return {"weight": weight.astype(DTYPE), "bias": b.astype(DTYPE)}


def init_norm(c: int) -> dict:
    return {"gamma": np.ones(c, dtype=DTYPE), "beta": np.zeros(c, dtype=DTYPE)}


# ---------------------------------------------------------------------------
# Channel projection (1x1 convolution)
# ---------------------------------------------------------------------------

def channel_project(x: np.ndarray, m: dict) -> np.ndarray:
    w = m["weight"]
    if x.ndim != 4 or x.shape[1] != w.shape[0]:
        raise ShapeError(f"channel_project: input {x.shape} vs weight {w.shape}")
    n, _, h, wd = x.shape
    record_macs(n * h * wd * w.shape[0] * w.shape[1])
    out = np.einsum("nchw,cd->ndhw", x, w, optimize=True)
    return out + m["bias"][None, :, None, None]


def channel_project_backward(dout: np.ndarray, x: np.ndarray, m: dict):
    dx = np.einsum("ndhw,cd->nchw", dout, m["weight"], optimize=True)
    dw = np.einsum("nchw,ndhw->cd", x, dout, optimize=True)
    return dx, {"weight": dw, "bias": dout.sum(axis=(0, 2, 3))}


def linear(x: np.ndarray, m: dict) -> np.ndarray:
    """Row-vector linear map for (N, in) matrices."""
    if x.ndim != 2 or x.shape[1] != m["weight"].shape[0]:
        raise ShapeError(f"linear: input {x.shape} vs weight {m['weight'].shape}")
    record_macs(x.shape[0] * m["weight"].size)
    return x @ m["weight"] + m["bias"]


def linear_backward(dout: np.ndarray, x: np.ndarray, m: dict):
    return dout @ m["weight"].T, {"weight": x.T @ dout, "bias": dout.sum(axis=0)}


# ---------------------------------------------------------------------------
# Normalisation and activations
# ---------------------------------------------------------------------------

def layer_norm(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """Normalise the channel vector at every (n, i, j) position."""
    if x.shape[1] == 0:
        raise ShapeError("layer_norm over zero channels")
    if gamma.shape != (x.shape[1],) or beta.shape != (x.shape[1],):
        raise ShapeError(f"layer_norm: gamma/beta must have length {x.shape[1]}")
    xhat, _ = _normalise(x, eps)
    return gamma[None, :, None, None] * xhat + beta[None, :, None, None]


def _normalise(x, eps):
    xc = x - x.mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=1, keepdims=True) + eps)
    return xc * inv, inv


def layer_norm_backward(dout, x, gamma, beta, eps: float = 1e-6):
    xhat, inv = _normalise(x, eps)
    c = x.shape[1]
    dxhat = dout * gamma[None, :, None, None]
    dx = (inv / c) * (
        c * dxhat
        - dxhat.sum(axis=1, keepdims=True)
        - xhat * (dxhat * xhat).sum(axis=1, keepdims=True)
    )
    return dx, {"gamma": (dout * xhat).sum(axis=(0, 2, 3)), "beta": dout.sum(axis=(0, 2, 3))}


def gelu(x: np.ndarray) -> np.ndarray:
    """Tanh-form GELU."""
    return 0.5 * x * (1.0 + np.tanh(_GELU_K * (x + _GELU_C * x**3)))


def gelu_backward(dout: np.ndarray, x: np.ndarray) -> np.ndarray:
    t = np.tanh(_GELU_K * (x + _GELU_C * x**3))
    dt = (1.0 - t * t) * _GELU_K * (1.0 + 3.0 * _GELU_C * x * x)
    return dout * (0.5 * (1.0 + t) + 0.5 * x * dt)


def sigmoid(x):
    x = np.asarray(x, dtype=DTYPE)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------

def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray) -> float:
    """Mean of -log softmax(logits)[label]; an empty batch gives 0."""
    loss, _ = softmax_cross_entropy_with_grad(logits, labels)
    return loss


def softmax_cross_entropy_with_grad(logits, labels):
    logits = np.asarray(logits, dtype=DTYPE)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2:
        raise ShapeError(f"logits must be (N, K), got {logits.shape}")
    n, k = logits.shape
    if n == 0:
        return 0.0, np.zeros_like(logits)
    if labels.shape != (n,) or labels.min() < 0 or labels.max() >= k:
        raise ShapeError("labels must be class indices in [0, K), one per row")
    shifted = logits - logits.max(axis=1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - logz
    rows = np.arange(n)
    loss = float(-logp[rows, labels].mean())
    grad = np.exp(logp)
    grad[rows, labels] -= 1.0
    return loss, grad / n


def binary_cross_entropy_with_logits(logits, targets):
    """Mean logistic BCE, numerically stable. Returns (loss, dlogits)."""
    z = np.asarray(logits, dtype=DTYPE)
    t = np.asarray(targets, dtype=DTYPE)
    if z.shape != t.shape:
        raise ShapeError(f"logits {z.shape} vs targets {t.shape}")
    if z.size == 0:
        return 0.0, np.zeros_like(z)
    per = np.maximum(z, 0.0) - z * t + np.log1p(np.exp(-np.abs(z)))
    return float(per.mean()), (sigmoid(z) - t) / z.size


# ---------------------------------------------------------------------------
# Bilinear sampling
# ---------------------------------------------------------------------------

def _bilinear_corners(h: int, w: int, pts: np.ndarray):
    """Flat indices (P, 4) and weights (P, 4) of the interpolation stencil.

    Pixel (i, j) has its centre at ((j + 0.5) / w, (i + 0.5) / h); points
    beyond the outermost centres clamp to the border.
    """
    pts = np.asarray(pts, dtype=DTYPE).reshape(-1, 2)
    u = np.clip(pts[:, 0] * w - 0.5, 0.0, w - 1)
    v = np.clip(pts[:, 1] * h - 0.5, 0.0, h - 1)
    j0 = np.floor(u).astype(np.int64)
    i0 = np.floor(v).astype(np.int64)
    j1 = np.minimum(j0 + 1, w - 1)
    i1 = np.minimum(i0 + 1, h - 1)
    a = u - j0
    b = v - i0
    idx = np.stack([i0 * w + j0, i0 * w + j1, i1 * w + j0, i1 * w + j1], axis=1)
    wts = np.stack([(1 - a) * (1 - b), a * (1 - b), (1 - a) * b, a * b], axis=1)
    return idx, wts


def bilinear_sample(feat: np.ndarray, pts: np.ndarray, batch: int = 0) -> np.ndarray:
    """Sample ``feat[batch]`` at normalised (x, y) points -> (P, c)."""
    if feat.ndim != 4 or feat.shape[2] == 0 or feat.shape[3] == 0:
        raise ShapeError(f"bilinear_sample needs a non-empty 4-D map, got {feat.shape}")
    _, c, h, w = feat.shape
    idx, wts = _bilinear_corners(h, w, pts)
    flat = feat[batch].reshape(c, h * w)
    return np.einsum("cpk,pk->pc", flat[:, idx], wts)


def bilinear_sample_backward(dout: np.ndarray, feat_shape, pts: np.ndarray, batch: int = 0):
    """Gradient w.r.t. the feature map (points are treated as constants)."""
    n, c, h, w = feat_shape
    idx, wts = _bilinear_corners(h, w, pts)
    dflat = np.zeros((h * w, c), dtype=DTYPE)
    for k in range(4):
        np.add.at(dflat, idx[:, k], dout * wts[:, k:k + 1])
    dfeat = np.zeros(feat_shape, dtype=DTYPE)
    dfeat[batch] = dflat.T.reshape(c, h, w)
    return dfeat
