"""Network building blocks, each usable in branchy (training-time) or fused form.

A block is a plain parameter record; ``*_forward`` functions evaluate it and
``fuse_*`` functions return a new, folded record. Whether a record is fused is
read off its depthwise part: :class:`DwKernelSet` means branchy,
:class:`FusedDwConv` means fused.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .reparam import DwKernelSet, FusedDwConv, fold_bn, fuse_repmsdw, msdw_unfused, random_bn, random_kernel_set
from .tensor import (
    DTYPE,
    BnParams,
    as_tensor4,
    batch_norm,
    concat_channels,
    conv2d,
    conv_pw,
    gelu,
    global_avg_pool,
    softmax_rows,
    tally,
)

QK_DIM = 16
VALUE_RATIO = 0.215


def value_dim(channels: int) -> int:
    return math.floor(VALUE_RATIO * channels)


@dataclass(frozen=True)
class MixerKind:
    """Token mixer choice: ``"M"`` (multi-scale depthwise) or ``"A"`` (attention)."""

    kind: str
    k: int

    def __post_init__(self):
        if self.kind not in ("M", "A"):
            raise ValueError(f"unknown mixer kind {self.kind!r}")
        if self.k < 3 or self.k % 2 == 0:
            raise ValueError(f"mixer kernel extent must be odd and >= 3, got {self.k}")

    @classmethod
    def parse(cls, text: str) -> "MixerKind":
        return cls(text[0].upper(), int(text[1:]))

    def __str__(self):
        return f"{self.kind}{self.k}"


class Init:
    """Seeded parameter factory shared by every builder."""

    def __init__(self, rng: np.random.Generator, std: float = 0.02, perturb_bn: bool = False,
                 zeros: bool = False):
        self.rng = rng
        self.std = std
        self.perturb_bn = perturb_bn
        self.zeros = zeros

    def normal(self, *shape) -> np.ndarray:
        w = self.rng.normal(0.0, self.std, size=shape).astype(DTYPE)
        return np.zeros_like(w) if self.zeros else w

    def bias(self, n: int) -> np.ndarray:
        return np.zeros(n, DTYPE)

    def bn(self, channels: int) -> BnParams:
        p = random_bn(self.rng, channels)
        return p if self.perturb_bn else BnParams.identity(channels)

    def kernel_set(self, channels: int, k: int, stride: int = 1) -> DwKernelSet:
        ks = random_kernel_set(self.rng, channels, k, stride, self.std, self.perturb_bn)
        if self.zeros:
            zero = {f: np.zeros_like(getattr(ks, f)) for f in ("main", "branch1", "branch2a", "branch2b", "branch3a", "branch3b")}
            ks = replace(ks, **zero)
        return ks


# ---------------------------------------------------------------- token mixers


def repmsdw_forward(x, dw: DwKernelSet | FusedDwConv, fused: bool = False) -> np.ndarray:
    x = as_tensor4(x)
    if x.shape[3] != dw.channels:
        raise ValueError(f"input has {x.shape[3]} channels, mixer expects {dw.channels}")
    if isinstance(dw, FusedDwConv):
        return dw(x)
    if fused:
        return fuse_repmsdw(dw)(x)
    return msdw_unfused(x, dw)


@dataclass(eq=False)
class SaParams:
    wq: np.ndarray  # (16, C)
    wk: np.ndarray  # (16, C)
    wv: np.ndarray  # (d_v, C)
    wo: np.ndarray  # (C, C + d_v)
    bo: np.ndarray | None = None

    def __post_init__(self):
        c = self.wq.shape[1]
        dv = self.wv.shape[0]
        if dv < 1:
            raise ValueError("value dimension must be at least 1")
        if self.wk.shape != self.wq.shape or self.wv.shape[1] != c or self.wo.shape != (c, c + dv):
            raise ValueError("inconsistent attention projection shapes")

    @classmethod
    def init(cls, init: Init, channels: int) -> "SaParams":
        dv = value_dim(channels)
        if dv < 1:
            raise ValueError(f"{channels} channels give an empty value projection")
        return cls(
            init.normal(QK_DIM, channels),
            init.normal(QK_DIM, channels),
            init.normal(dv, channels),
            init.normal(channels, channels + dv),
        )


def attention(u, sa: SaParams) -> tuple[np.ndarray, np.ndarray]:
    """Single-head attention over the pixels of ``u``.

    Returns ``(attn, weights)``: ``attn`` is ``(N, H, W, d_v)`` and ``weights``
    the ``(N, HW, HW)`` row-stochastic matrices.
    """
    u = as_tensor4(u)
    n, h, w, c = u.shape
    q = conv_pw(u, sa.wq).reshape(n, h * w, -1)
    k = conv_pw(u, sa.wk).reshape(n, h * w, -1)
    v = conv_pw(u, sa.wv).reshape(n, h * w, -1)
    scale = DTYPE(1.0 / math.sqrt(sa.wq.shape[0]))
    weights = np.stack([softmax_rows((q[b] @ k[b].T) * scale) for b in range(n)])
    attn = weights @ v
    hw = h * w
    tally("attention", n * hw * hw * (q.shape[2] + v.shape[2]))
    return attn.reshape(n, h, w, -1).astype(DTYPE), weights


def repsa_forward(x, dw: DwKernelSet | FusedDwConv, sa: SaParams, fused: bool = False) -> np.ndarray:
    u = repmsdw_forward(x, dw, fused)
    attn, _ = attention(u, sa)
    return conv_pw(concat_channels(u, attn), sa.wo, sa.bo)


# --------------------------------------------------------------- channel mixer


@dataclass(eq=False)
class FfnParams:
    we: np.ndarray  # (rC, C)
    be: np.ndarray
    wr: np.ndarray  # (C, rC)
    br: np.ndarray

    def __post_init__(self):
        hidden, c = self.we.shape
        if self.be.shape != (hidden,) or self.wr.shape != (c, hidden) or self.br.shape != (c,):
            raise ValueError("inconsistent feed-forward shapes")

    @property
    def ratio(self) -> float:
        return self.we.shape[0] / self.we.shape[1]

    @classmethod
    def init(cls, init: Init, channels: int, ratio: int = 3) -> "FfnParams":
        hidden = ratio * channels
        return cls(init.normal(hidden, channels), init.bias(hidden), init.normal(channels, hidden), init.bias(channels))


def ffn_forward(x, p: FfnParams) -> np.ndarray:
    x = as_tensor4(x)
    if x.shape[3] != p.we.shape[1]:
        raise ValueError(f"input has {x.shape[3]} channels, feed-forward expects {p.we.shape[1]}")
    return conv_pw(gelu(conv_pw(x, p.we, p.be)), p.wr, p.br)


def fold_ffn(p: FfnParams, norm: BnParams) -> FfnParams:
    wr, br = fold_bn(p.wr, p.br, norm)
    return replace(p, wr=wr, br=br)


# -------------------------------------------------------------------- blocks


@dataclass(eq=False)
class BlockParams:
    """One token-mixer residual plus one channel-mixer residual.

    In fused form ``dw`` of an ``M`` block already contains the shortcut, and
    all normalizations are folded away.
    """

    kind: MixerKind
    dw: DwKernelSet | FusedDwConv
    ffn: FfnParams
    ffn_norm: BnParams | None
    sa: SaParams | None = None
    sa_norm: BnParams | None = None

    def __post_init__(self):
        if self.dw.channels != self.ffn.we.shape[1]:
            raise ValueError("mixer and feed-forward channel counts differ")
        if (self.kind.kind == "A") != (self.sa is not None):
            raise ValueError(f"mixer kind {self.kind} does not match attention parameters")

    @property
    def fused(self) -> bool:
        return isinstance(self.dw, FusedDwConv)

    @property
    def channels(self) -> int:
        return self.dw.channels

    @classmethod
    def init(cls, init: Init, channels: int, kind: MixerKind, ratio: int = 3) -> "BlockParams":
        dw = init.kernel_set(channels, kind.k)
        sa = sa_norm = None
        if kind.kind == "A":
            sa = SaParams.init(init, channels)
            sa_norm = init.bn(channels)
        ffn = FfnParams.init(init, channels, ratio)
        return cls(kind, dw, ffn, init.bn(channels), sa, sa_norm)


def fuse_block(p: BlockParams) -> BlockParams:
    if p.fused:
        raise ValueError("block is already fused")
    ffn = fold_ffn(p.ffn, p.ffn_norm)
    if p.kind.kind == "M":
        return BlockParams(p.kind, fuse_repmsdw(p.dw, residual=True), ffn, None)
    wo, bo = fold_bn(p.sa.wo, p.sa.bo, p.sa_norm)
    sa = replace(p.sa, wo=wo, bo=bo)
    return BlockParams(p.kind, fuse_repmsdw(p.dw), ffn, None, sa, None)


def ravit_block(x, p: BlockParams, fused: bool = False) -> np.ndarray:
    x = as_tensor4(x)
    if fused and not p.fused:
        p = fuse_block(p)
    if p.fused:
        if p.kind.kind == "M":
            x1 = p.dw(x)
        else:
            x1 = x + repsa_forward(x, p.dw, p.sa)
        return x1 + ffn_forward(x1, p.ffn)
    if p.kind.kind == "M":
        # the depthwise bundle's own batch-norm is the residual's normalization
        x1 = x + msdw_unfused(x, p.dw)
    else:
        x1 = x + batch_norm(repsa_forward(x, p.dw, p.sa), p.sa_norm)
    return x1 + batch_norm(ffn_forward(x1, p.ffn), p.ffn_norm)


# ------------------------------------------------------------ stem and friends


@dataclass(eq=False)
class ConvBn:
    """Dense convolution, optional batch-norm, then GELU."""

    weight: np.ndarray  # (C_out, kH, kW, C_in)
    bias: np.ndarray | None
    bn: BnParams | None
    stride: int = 2

    @property
    def fused(self) -> bool:
        return self.bn is None

    @classmethod
    def init(cls, init: Init, cin: int, cout: int, k: int = 3, stride: int = 2) -> "ConvBn":
        return cls(init.normal(cout, k, k, cin), None, init.bn(cout), stride)

    def fuse(self) -> "ConvBn":
        if self.fused:
            raise ValueError("convolution is already fused")
        w, b = fold_bn(self.weight, self.bias, self.bn)
        return ConvBn(w, b, None, self.stride)

    def __call__(self, x) -> np.ndarray:
        k = self.weight.shape[1]
        y = conv2d(x, self.weight, self.bias, self.stride, k // 2)
        if self.bn is not None:
            y = batch_norm(y, self.bn)
        return gelu(y)


def stem_forward(x, convs: list[ConvBn]) -> np.ndarray:
    x = as_tensor4(x)
    if x.shape[3] != convs[0].weight.shape[3]:
        raise ValueError(f"stem expects {convs[0].weight.shape[3]} input channels, got {x.shape[3]}")
    for conv in convs:
        x = conv(x)
    return x


@dataclass(eq=False)
class DownsampleParams:
    """Stride-2 multi-scale depthwise conv, pointwise expansion with BN and GELU,
    then a residual feed-forward at the new width."""

    dw: DwKernelSet | FusedDwConv
    pw_w: np.ndarray  # (C_out, C_in)
    pw_b: np.ndarray | None
    pw_norm: BnParams | None
    ffn: FfnParams | None
    ffn_norm: BnParams | None

    @property
    def fused(self) -> bool:
        return isinstance(self.dw, FusedDwConv)

    @classmethod
    def init(cls, init: Init, cin: int, cout: int, k: int = 7, ratio: int = 3, with_ffn: bool = True):
        dw = init.kernel_set(cin, k, stride=2)
        ffn = FfnParams.init(init, cout, ratio) if with_ffn else None
        return cls(dw, init.normal(cout, cin), None, init.bn(cout), ffn, init.bn(cout) if with_ffn else None)


def fuse_downsample(p: DownsampleParams) -> DownsampleParams:
    if p.fused:
        raise ValueError("downsample is already fused")
    pw_w, pw_b = fold_bn(p.pw_w, p.pw_b, p.pw_norm)
    ffn = fold_ffn(p.ffn, p.ffn_norm) if p.ffn is not None else None
    return DownsampleParams(fuse_repmsdw(p.dw), pw_w, pw_b, None, ffn, None)


def downsample_forward(x, p: DownsampleParams, fused: bool = False) -> np.ndarray:
    if p.dw.stride != 2:
        raise ValueError("downsample needs a stride-2 depthwise part")
    if fused and not p.fused:
        p = fuse_downsample(p)
    y = repmsdw_forward(x, p.dw)
    y = conv_pw(y, p.pw_w, p.pw_b)
    if p.pw_norm is not None:
        y = batch_norm(y, p.pw_norm)
    y = gelu(y)
    if p.ffn is not None:
        f = ffn_forward(y, p.ffn)
        y = y + (f if p.ffn_norm is None else batch_norm(f, p.ffn_norm))
    return y


@dataclass(eq=False)
class ClassifierParams:
    fc1_w: np.ndarray  # (hidden, C)
    fc1_b: np.ndarray
    fc2_w: np.ndarray  # (classes, hidden)
    fc2_b: np.ndarray

    @classmethod
    def init(cls, init: Init, channels: int, num_classes: int = 1000, hidden: int = 1280):
        return cls(init.normal(hidden, channels), init.bias(hidden), init.normal(num_classes, hidden), init.bias(num_classes))


def classifier_head(x, p: ClassifierParams) -> np.ndarray:
    """Logits ``(N, num_classes)``: pool, FC, GELU, FC."""
    pooled = global_avg_pool(x)
    if pooled.shape[1] != p.fc1_w.shape[1]:
        raise ValueError(f"head expects {p.fc1_w.shape[1]} channels, got {pooled.shape[1]}")
    h = gelu(pooled @ p.fc1_w.T + p.fc1_b)
    n = pooled.shape[0]
    tally("fc", n * (p.fc1_w.size + p.fc2_w.size))
    return (h @ p.fc2_w.T + p.fc2_b).astype(DTYPE)
