"""Dense numpy kernels with hand-written backward passes.

Feature maps use the channels-last layout ``(B, H, W, C)``. Every kernel comes
as a ``*_forward`` returning ``(out, cache)`` and a ``*_backward`` consuming the
upstream gradient and that cache. The caches are plain tuples, so kernels hold
no state and can run concurrently on disjoint inputs.

Forward matrix products go through ``np.einsum`` rather than BLAS: BLAS picks
different micro-kernels depending on where a row falls inside the matrix, which
changes the rounding of that row. The einsum loop reduces every output element
in the same order, so results are bitwise independent of batch composition and
of spatial rolls.
"""
from __future__ import annotations

import contextlib
import enum
from dataclasses import dataclass

import numpy as np
from scipy.special import erf

from .exceptions import ConfigError, DimensionError, InputError, NonFiniteError

DEFAULT_DTYPE = np.float64
_SQRT2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


class PadMode(enum.Enum):
    ZERO_SAME = "zero"
    CIRCULAR_SAME = "circular"


def as_tensor(x, dtype=DEFAULT_DTYPE) -> np.ndarray:
    arr = np.ascontiguousarray(x, dtype=dtype)
    check_finite(arr, "input")
    return arr


def check_finite(arr: np.ndarray, where: str) -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        bad = int(np.flatnonzero(~np.isfinite(arr))[0])
        raise NonFiniteError(f"non-finite value in {where} at flat index {bad}")
    return arr


# ---------------------------------------------------------------------------
# FLOP tally. Convention: one multiply-accumulate counts as one FLOP, every
# other elementwise operation counts as one FLOP per element.


class FlopCounter:
    def __init__(self):
        self.total = 0
        self.by_op: dict[str, int] = {}

    def add(self, op: str, n: int) -> None:
        self.total += int(n)
        self.by_op[op] = self.by_op.get(op, 0) + int(n)


_counters: list[FlopCounter] = []


@contextlib.contextmanager
def count_flops():
    """Tally FLOPs of every forward kernel executed inside the block."""
    counter = FlopCounter()
    _counters.append(counter)
    try:
        yield counter
    finally:
        _counters.remove(counter)


def tally(op: str, n: int) -> None:
    for c in _counters:
        c.add(op, n)


# ---------------------------------------------------------------------------
# linear


def _matmul(x2: np.ndarray, W: np.ndarray) -> np.ndarray:
    return np.einsum("nk,km->nm", x2, W)


def linear_forward(x, W, b):
    if x.shape[-1] != W.shape[0]:
        raise DimensionError(
            f"linear: input shape {x.shape} does not match weight shape {W.shape}"
        )
    if b is not None and b.shape != (W.shape[1],):
        raise DimensionError(f"linear: bias shape {b.shape} does not match weight shape {W.shape}")
    lead = x.shape[:-1]
    x2 = x.reshape(-1, W.shape[0])
    y = _matmul(x2, W)
    n = x2.shape[0]
    tally("linear", n * W.shape[0] * W.shape[1])
    if b is not None:
        y += b
        tally("bias", n * W.shape[1])
    return y.reshape(*lead, W.shape[1]), (x, W, b is not None)


def linear_backward(dy, cache):
    x, W, has_bias = cache
    x2 = x.reshape(-1, W.shape[0])
    dy2 = dy.reshape(-1, W.shape[1])
    dx = (dy2 @ W.T).reshape(x.shape)
    dW = x2.T @ dy2
    db = dy2.sum(axis=0) if has_bias else None
    return dx, dW, db


def linear(x, W, b):
    return linear_forward(x, W, b)[0]


# ---------------------------------------------------------------------------
# depth-wise convolution (cross-correlation, no kernel flip)


def _pad_hw(x, p: int, mode: PadMode):
    if p == 0:
        return x
    width = ((0, 0), (p, p), (p, p), (0, 0))
    if mode is PadMode.CIRCULAR_SAME:
        return np.pad(x, width, mode="wrap")
    return np.pad(x, width)


def _unpad_hw(dxp, H: int, W: int, p: int, mode: PadMode):
    if p == 0:
        return dxp
    if mode is PadMode.ZERO_SAME:
        return dxp[:, p:p + H, p:p + W, :]
    # fold wrapped border contributions back onto their source pixels
    rows = (np.arange(H + 2 * p) - p) % H
    cols = (np.arange(W + 2 * p) - p) % W
    tmp = np.zeros((dxp.shape[0], H, dxp.shape[2], dxp.shape[3]), dtype=dxp.dtype)
    np.add.at(tmp, (slice(None), rows), dxp)
    out = np.zeros((dxp.shape[0], H, W, dxp.shape[3]), dtype=dxp.dtype)
    np.add.at(out, (slice(None), slice(None), cols), tmp)
    return out


def _check_kernel(k: int) -> None:
    if k < 1 or k % 2 == 0:
        raise ConfigError(f"kernel size must be odd and positive, got {k}")


def dwconv2d_forward(x, w, b, pad: PadMode = PadMode.ZERO_SAME):
    if x.ndim != 4:
        raise DimensionError(f"dwconv2d expects (B, H, W, C), got shape {x.shape}")
    k = w.shape[0]
    if w.shape[1] != k:
        raise ConfigError(f"dwconv2d kernel must be square, got {w.shape}")
    _check_kernel(k)
    if w.shape[2] != x.shape[3]:
        raise DimensionError(f"dwconv2d: input shape {x.shape} does not match kernel shape {w.shape}")
    B, H, W, C = x.shape
    p = k // 2
    xp = _pad_hw(x, p, pad)
    out = np.zeros_like(x)
    for i in range(k):
        for j in range(k):
            out += xp[:, i:i + H, j:j + W, :] * w[i, j]
    tally("dwconv", B * H * W * C * k * k)
    if b is not None:
        out += b
        tally("bias", B * H * W * C)
    return out, (xp, w, b is not None, pad, x.shape)


def dwconv2d_backward(dy, cache):
    xp, w, has_bias, pad, shape = cache
    B, H, W, C = shape
    k = w.shape[0]
    p = k // 2
    dxp = np.zeros_like(xp)
    dw = np.empty_like(w)
    for i in range(k):
        for j in range(k):
            dxp[:, i:i + H, j:j + W, :] += dy * w[i, j]
            dw[i, j] = np.einsum("bhwc,bhwc->c", xp[:, i:i + H, j:j + W, :], dy)
    dx = _unpad_hw(dxp, H, W, p, pad)
    db = dy.sum(axis=(0, 1, 2)) if has_bias else None
    return dx, dw, db


def dwconv2d(x, w, b, pad: PadMode = PadMode.ZERO_SAME):
    return dwconv2d_forward(x, w, b, pad)[0]


# ---------------------------------------------------------------------------
# dense strided convolution, used for patch embedding and downsampling


def conv2d_forward(x, w, b, stride: int, padding: int = 0):
    """Dense convolution with a ``(k, k, Cin, Cout)`` kernel."""
    if x.ndim != 4 or w.ndim != 4 or w.shape[2] != x.shape[3]:
        raise DimensionError(f"conv2d: input shape {x.shape} does not match kernel shape {w.shape}")
    B, H, W, Cin = x.shape
    k, Cout = w.shape[0], w.shape[3]
    Ho = (H + 2 * padding - k) // stride + 1
    Wo = (W + 2 * padding - k) // stride + 1
    if Ho < 1 or Wo < 1:
        raise InputError(f"conv2d: input {H}x{W} too small for kernel {k}")
    xp = _pad_hw(x, padding, PadMode.ZERO_SAME)
    cols = np.empty((B, Ho, Wo, k, k, Cin), dtype=x.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, :, :, i, j, :] = xp[:, i:i + stride * Ho:stride, j:j + stride * Wo:stride, :]
    y, _ = linear_forward(cols.reshape(B, Ho, Wo, k * k * Cin), w.reshape(k * k * Cin, Cout), b)
    return y, (cols, w, b is not None, stride, padding, x.shape)


def conv2d_backward(dy, cache):
    cols, w, has_bias, stride, padding, shape = cache
    B, H, W, Cin = shape
    k, Cout = w.shape[0], w.shape[3]
    _, Ho, Wo, _ = dy.shape
    dcols, dW, db = linear_backward(
        dy, (cols.reshape(B, Ho, Wo, -1), w.reshape(-1, Cout), has_bias)
    )
    dcols = dcols.reshape(B, Ho, Wo, k, k, Cin)
    dxp = np.zeros((B, H + 2 * padding, W + 2 * padding, Cin), dtype=dy.dtype)
    for i in range(k):
        for j in range(k):
            dxp[:, i:i + stride * Ho:stride, j:j + stride * Wo:stride, :] += dcols[:, :, :, i, j, :]
    dx = dxp[:, padding:padding + H, padding:padding + W, :]
    return dx, dW.reshape(w.shape), db


# ---------------------------------------------------------------------------
# GeLU, exact erf form


def gelu_forward(x):
    cdf = (0.5 * (1.0 + erf(x / _SQRT2))).astype(x.dtype, copy=False)
    tally("gelu", x.size)
    return x * cdf, (x, cdf)


def gelu_backward(dy, cache):
    x, cdf = cache
    pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
    return dy * (cdf + x * pdf)


def gelu(x):
    return gelu_forward(x)[0]


# ---------------------------------------------------------------------------
# global average pooling


def global_avg_pool_forward(x):
    """Spatial mean, ``(B, H, W, C) -> (B, 1, 1, C)``.

    Values are summed in sorted order, which makes the result bitwise
    independent of how positions are arranged (rolls, permutations).
    """
    B, H, W, C = x.shape
    flat = np.sort(x.reshape(B, H * W, C), axis=1)
    out = flat.sum(axis=1) / (H * W)
    tally("pool", x.size)
    return out.reshape(B, 1, 1, C), x.shape


def global_avg_pool_backward(dy, shape):
    B, H, W, C = shape
    return np.broadcast_to(dy / (H * W), shape).copy()


def global_avg_pool(x):
    return global_avg_pool_forward(x)[0]


# ---------------------------------------------------------------------------
# same-size average pooling (window k, stride 1); padded cells are not counted


def avg_pool_same_forward(x, k: int, pad: PadMode = PadMode.ZERO_SAME):
    _check_kernel(k)
    B, H, W, C = x.shape
    p = k // 2
    xp = _pad_hw(x, p, pad)
    acc = np.zeros_like(x)
    for i in range(k):
        for j in range(k):
            acc += xp[:, i:i + H, j:j + W, :]
    if pad is PadMode.CIRCULAR_SAME:
        counts = np.full((1, H, W, 1), float(k * k), dtype=x.dtype)
    else:
        ones = _pad_hw(np.ones((1, H, W, 1), dtype=x.dtype), p, pad)
        counts = np.zeros((1, H, W, 1), dtype=x.dtype)
        for i in range(k):
            for j in range(k):
                counts += ones[:, i:i + H, j:j + W, :]
    tally("avgpool", x.size * k * k)
    return acc / counts, (k, pad, counts, x.shape)


def avg_pool_same_backward(dy, cache):
    k, pad, counts, shape = cache
    B, H, W, C = shape
    p = k // 2
    g = dy / counts
    dxp = np.zeros((B, H + 2 * p, W + 2 * p, C), dtype=dy.dtype)
    for i in range(k):
        for j in range(k):
            dxp[:, i:i + H, j:j + W, :] += g
    return _unpad_hw(dxp, H, W, p, pad)


# ---------------------------------------------------------------------------
# layer norm over the channel axis


def layer_norm_forward(x, gamma, beta, eps: float = 1e-5):
    if eps <= 0:
        raise ConfigError("layer_norm eps must be positive")
    if gamma.shape != (x.shape[-1],):
        raise DimensionError(f"layer_norm: input shape {x.shape} does not match gamma shape {gamma.shape}")
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    tally("layernorm", 5 * x.size)
    return xhat * gamma + beta, (xhat, inv, gamma)


def layer_norm_backward(dy, cache):
    xhat, inv, gamma = cache
    C = xhat.shape[-1]
    lead = tuple(range(xhat.ndim - 1))
    dgamma = (dy * xhat).sum(axis=lead)
    dbeta = dy.sum(axis=lead)
    dxhat = dy * gamma
    dx = inv / C * (
        C * dxhat
        - dxhat.sum(axis=-1, keepdims=True)
        - xhat * (dxhat * xhat).sum(axis=-1, keepdims=True)
    )
    return dx, dgamma, dbeta


def layer_norm(x, gamma, beta, eps: float = 1e-5):
    return layer_norm_forward(x, gamma, beta, eps)[0]


# ---------------------------------------------------------------------------
# softmax cross-entropy head


def softmax(logits):
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_cross_entropy(logits, labels, label_smoothing: float = 0.0):
    """Mean cross-entropy and its gradient w.r.t. the logits."""
    logits = np.asarray(logits)
    labels = np.asarray(labels)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise DimensionError(f"logits shape {logits.shape} does not match labels shape {labels.shape}")
    B, K = logits.shape
    if labels.size and (labels.min() < 0 or labels.max() >= K):
        raise InputError(f"labels must lie in [0, {K}), got range [{labels.min()}, {labels.max()}]")
    z = logits - logits.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - logsumexp
    target = np.full((B, K), label_smoothing / K, dtype=logits.dtype)
    target[np.arange(B), labels] += 1.0 - label_smoothing
    loss = float(-(target * logp).sum() / B)
    grad = (np.exp(logp) - target) / B
    return loss, grad


# ---------------------------------------------------------------------------
# gradient checking


@dataclass
class GradCheckReport:
    op: str
    max_rel_err: float
    worst_index: int
    eps: float
    worst_param: str = ""
    n_checked: int = 0

    def passed(self, tol: float = 1e-4) -> bool:
        return self.max_rel_err < tol

    def __str__(self):
        where = f"{self.worst_param}[{self.worst_index}]" if self.worst_param else str(self.worst_index)
        return (f"{self.op}: max_rel_err={self.max_rel_err:.3e} at {where} "
                f"({self.n_checked} coords, eps={self.eps:g})")


def rel_error(analytic, numeric, floor: float = 1e-8):
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def grad_check(f, inputs: dict, analytic: dict, eps: float = 1e-5, op: str = "op",
               indices: dict | None = None, floor: float = 1e-8) -> GradCheckReport:
    """Compare analytic gradients against central finite differences.

    ``f()`` evaluates the scalar objective from the arrays in ``inputs``; those
    arrays are perturbed in place and restored. ``analytic`` maps the same names
    to gradient arrays. ``indices`` optionally restricts the flat coordinates
    probed per input (default: all of them). ``floor`` bounds the relative-error
    denominator from below, so entries smaller than it are judged on absolute error.
    """
    from .exceptions import GradCheckError

    worst = GradCheckReport(op=op, max_rel_err=0.0, worst_index=-1, eps=eps)
    for name, arr in inputs.items():
        if arr.dtype != np.float64:
            raise GradCheckError(f"{op}: input {name!r} must be float64, got {arr.dtype}")
        grad = np.asarray(analytic[name])
        if grad.shape != arr.shape:
            raise GradCheckError(f"{op}: gradient for {name!r} has shape {grad.shape}, expected {arr.shape}")
        flat = arr.reshape(-1)
        if not np.shares_memory(flat, arr):
            raise GradCheckError(f"{op}: input {name!r} must be contiguous")
        gflat = grad.reshape(-1)
        idx = range(flat.size) if indices is None or name not in indices else indices[name]
        for i in idx:
            orig = flat[i]
            flat[i] = orig + eps
            fp = f()
            flat[i] = orig - eps
            fm = f()
            flat[i] = orig
            if not (np.isfinite(fp) and np.isfinite(fm) and np.isfinite(gflat[i])):
                raise GradCheckError(f"{op}: non-finite value while probing {name}[{i}]")
            numeric = (fp - fm) / (2.0 * eps)
            err = float(rel_error(gflat[i], numeric, floor))
            worst.n_checked += 1
            if err > worst.max_rel_err or worst.worst_index < 0:
                worst.max_rel_err = err
                worst.worst_index = int(i)
                worst.worst_param = name
    return worst
