"""Numeric kernels over NHWC float32 feature maps.

Every feature map is a plain ``numpy.ndarray`` of shape ``(N, H, W, C)`` and
dtype ``float32``. Functions here are pure: they never modify their inputs.
Each compute-heavy op reports its multiply-accumulate count to the active
:class:`MacCounter`, which is how FLOPs are measured.
"""
from __future__ import annotations

import contextlib
import contextvars
from dataclasses import dataclass

import numba
import numpy as np

DTYPE = np.float32
BN_EPS = 1e-5

_counter: contextvars.ContextVar["MacCounter | None"] = contextvars.ContextVar("mac_counter", default=None)


class MacCounter:
    """Accumulates multiply-accumulate counts reported by ops."""

    def __init__(self):
        self.macs = 0
        self.by_op: dict[str, int] = {}

    def add(self, op: str, macs: int) -> None:
        self.macs += int(macs)
        self.by_op[op] = self.by_op.get(op, 0) + int(macs)

    @property
    def flops(self) -> int:
        return 2 * self.macs


@contextlib.contextmanager
def count_macs():
    counter = MacCounter()
    token = _counter.set(counter)
    try:
        yield counter
    finally:
        _counter.reset(token)


def tally(op: str, macs: int) -> None:
    counter = _counter.get()
    if counter is not None:
        counter.add(op, macs)


def as_tensor4(x) -> np.ndarray:
    x = np.asarray(x, dtype=DTYPE)
    if x.ndim != 4 or min(x.shape) < 1:
        raise ValueError(f"expected a non-empty rank-4 NHWC tensor, got shape {x.shape}")
    return x


@dataclass(eq=False)
class BnParams:
    """Inference-mode batch-norm statistics for one layer."""

    gamma: np.ndarray
    beta: np.ndarray
    mean: np.ndarray
    var: np.ndarray
    eps: float = BN_EPS

    def __post_init__(self):
        n = len(self.gamma)
        if any(len(v) != n for v in (self.beta, self.mean, self.var)):
            raise ValueError("batch-norm vectors must share one length")
        if self.eps < 0:
            raise ValueError("batch-norm epsilon must be non-negative")
        if np.any(np.asarray(self.var, np.float64) + self.eps <= 0):
            raise ValueError("running variance plus epsilon must be positive")

    @classmethod
    def identity(cls, channels: int, eps: float = BN_EPS) -> "BnParams":
        return cls(
            np.ones(channels, DTYPE),
            np.zeros(channels, DTYPE),
            np.zeros(channels, DTYPE),
            np.ones(channels, DTYPE),
            eps,
        )

    @property
    def channels(self) -> int:
        return len(self.gamma)

    def scale_shift(self) -> tuple[np.ndarray, np.ndarray]:
        """Per-channel ``(a, c)`` with ``bn(x) = a * x + c``, in float64."""
        a = self.gamma.astype(np.float64) / np.sqrt(self.var.astype(np.float64) + self.eps)
        c = self.beta.astype(np.float64) - self.mean.astype(np.float64) * a
        return a, c


def _normalize_padding(padding) -> tuple[int, int, int, int]:
    if isinstance(padding, int):
        return (padding,) * 4
    if len(padding) == 2:
        ph, pw = padding
        return (ph, pw, ph, pw)
    top, left, bottom, right = padding
    return (top, left, bottom, right)


def _pad(x: np.ndarray, pad: tuple[int, int, int, int]) -> np.ndarray:
    top, left, bottom, right = pad
    if not any(pad):
        return x
    return np.pad(x, ((0, 0), (top, bottom), (left, right), (0, 0)))


def _out_extent(size: int, before: int, after: int, k: int, stride: int) -> int:
    padded = size + before + after
    if k > padded:
        raise ValueError(f"kernel extent {k} exceeds padded input extent {padded}")
    return (padded - k) // stride + 1


def conv_dw(x, kernels, bias=None, stride: int = 1, padding=0) -> np.ndarray:
    """Depthwise cross-correlation.

    ``kernels`` has shape ``(C, kH, kW)``, one grid per channel. ``padding`` is
    an int, ``(ph, pw)`` or ``(top, left, bottom, right)``; padding is zeros.
    """
    x = as_tensor4(x)
    kernels = np.asarray(kernels, dtype=DTYPE)
    n, h, w, c = x.shape
    if kernels.ndim != 3 or kernels.shape[0] != c:
        raise ValueError(f"need {c} depthwise kernels, got array of shape {kernels.shape}")
    if stride < 1:
        raise ValueError("stride must be positive")
    pad = _normalize_padding(padding)
    _, kh, kw = kernels.shape
    ho = _out_extent(h, pad[0], pad[2], kh, stride)
    wo = _out_extent(w, pad[1], pad[3], kw, stride)
    xp = _pad(x, pad)
    # taps along the last axis keep the per-tap weight vector contiguous
    taps = np.ascontiguousarray(kernels.reshape(c, kh * kw).T)
    out = np.zeros((n, ho, wo, c), DTYPE)
    tmp = np.empty_like(out)
    hs, ws = stride * (ho - 1) + 1, stride * (wo - 1) + 1
    for i in range(kh):
        for j in range(kw):
            np.multiply(xp[:, i : i + hs : stride, j : j + ws : stride, :], taps[i * kw + j], out=tmp)
            out += tmp
    if bias is not None:
        out += np.asarray(bias, dtype=DTYPE)
    tally("conv_dw", n * ho * wo * c * kh * kw)
    return out


def conv_pw(x, weight, bias=None) -> np.ndarray:
    """1x1 convolution; ``weight`` is ``(C_out, C_in)``."""
    x = as_tensor4(x)
    weight = np.asarray(weight, dtype=DTYPE)
    n, h, w, c = x.shape
    if weight.ndim != 2 or weight.shape[1] != c:
        raise ValueError(f"weight of shape {weight.shape} does not accept {c} input channels")
    out = (x.reshape(-1, c) @ weight.T).reshape(n, h, w, weight.shape[0])
    if bias is not None:
        out += np.asarray(bias, dtype=DTYPE)
    tally("conv_pw", n * h * w * c * weight.shape[0])
    return out


def conv2d(x, weight, bias=None, stride: int = 1, padding=0) -> np.ndarray:
    """Dense convolution; ``weight`` is ``(C_out, kH, kW, C_in)``.

    Evaluated as one GEMM per kernel tap.
    """
    x = as_tensor4(x)
    weight = np.asarray(weight, dtype=DTYPE)
    n, h, w, c = x.shape
    if weight.ndim != 4 or weight.shape[3] != c:
        raise ValueError(f"weight of shape {weight.shape} does not accept {c} input channels")
    if stride < 1:
        raise ValueError("stride must be positive")
    cout, kh, kw, _ = weight.shape
    pad = _normalize_padding(padding)
    ho = _out_extent(h, pad[0], pad[2], kh, stride)
    wo = _out_extent(w, pad[1], pad[3], kw, stride)
    xp = _pad(x, pad)
    hs, ws = stride * (ho - 1) + 1, stride * (wo - 1) + 1
    out = np.zeros((n * ho * wo, cout), DTYPE)
    for i in range(kh):
        for j in range(kw):
            patch = np.ascontiguousarray(xp[:, i : i + hs : stride, j : j + ws : stride, :]).reshape(-1, c)
            out += patch @ weight[:, i, j, :].T
    out = out.reshape(n, ho, wo, cout)
    if bias is not None:
        out += np.asarray(bias, dtype=DTYPE)
    tally("conv2d", n * ho * wo * cout * kh * kw * c)
    return out


def batch_norm(x, p: BnParams) -> np.ndarray:
    x = as_tensor4(x)
    if p.channels != x.shape[3]:
        raise ValueError(f"batch-norm has {p.channels} channels, input has {x.shape[3]}")
    inv = (p.gamma / np.sqrt(p.var.astype(DTYPE) + DTYPE(p.eps))).astype(DTYPE)
    return ((x - p.mean) * inv + p.beta).astype(DTYPE)


# Rational erf on [-4, 4] (odd degree-13 over even degree-8 polynomial), the
# float32 kernel used by Eigen; max abs error vs. erf is below 1e-6 here.
_A1, _A3, _A5, _A7 = (np.float32(v) for v in (-1.60960333262415e-02, -2.95459980854025e-03,
                                                -7.34990630326855e-04, -5.69250639462346e-05))
_A9, _A11, _A13 = (np.float32(v) for v in (-2.10102402082508e-06, 2.77068142495902e-08, -2.72614225801306e-10))
_B0, _B2, _B4, _B6, _B8 = (np.float32(v) for v in (-1.42647390514189e-02, -7.37332916720468e-03,
                                                     -1.68282697438203e-03, -2.13374055278905e-04,
                                                     -1.45660718464996e-05))


@numba.njit(fastmath=True, cache=True)
def _gelu_kernel(x, out):
    for i in range(x.size):
        v = x[i]
        z = min(max(v * np.float32(0.7071067811865476), np.float32(-4.0)), np.float32(4.0))
        z2 = z * z
        p = ((((((_A13 * z2 + _A11) * z2 + _A9) * z2 + _A7) * z2 + _A5) * z2 + _A3) * z2 + _A1) * z
        q = (((_B8 * z2 + _B6) * z2 + _B4) * z2 + _B2) * z2 + _B0
        out[i] = np.float32(0.5) * v * (np.float32(1.0) + p / q)


def gelu(x) -> np.ndarray:
    """GELU in its erf form, ``x * Phi(x)``; erf is evaluated to float32 accuracy."""
    x = np.ascontiguousarray(x, dtype=DTYPE)
    out = np.empty_like(x)
    _gelu_kernel(x.reshape(-1), out.reshape(-1))
    return out


def softmax_rows(m) -> np.ndarray:
    m = np.asarray(m, dtype=DTYPE)
    if m.ndim != 2 or m.shape[1] < 1:
        raise ValueError("softmax needs a matrix with at least one column")
    e = np.exp(m - m.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def global_avg_pool(x) -> np.ndarray:
    x = as_tensor4(x)
    return x.mean(axis=(1, 2), dtype=np.float64).astype(DTYPE)


def upsample_nearest2x(x) -> np.ndarray:
    x = as_tensor4(x)
    return x.repeat(2, axis=1).repeat(2, axis=2)


def add(a, b) -> np.ndarray:
    a, b = as_tensor4(a), as_tensor4(b)
    if a.shape != b.shape:
        raise ValueError(f"cannot add shapes {a.shape} and {b.shape}")
    return a + b


def concat_channels(*xs) -> np.ndarray:
    xs = [as_tensor4(x) for x in xs]
    if len({x.shape[:3] for x in xs}) != 1:
        raise ValueError("concat needs equal N, H, W extents")
    return np.concatenate(xs, axis=3)


def chunk_channels(x, parts: int) -> list[np.ndarray]:
    x = as_tensor4(x)
    c = x.shape[3]
    if parts < 1 or c % parts:
        raise ValueError(f"{c} channels do not split into {parts} equal parts")
    g = c // parts
    return [x[..., i * g : (i + 1) * g] for i in range(parts)]
