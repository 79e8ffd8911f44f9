"""Multi-scale depthwise kernel bundles and their fusion into one kernel.

A :class:`DwKernelSet` carries a main ``k x k`` depthwise kernel over all
channels plus per-quarter branch kernels; the last quarter has no branch and
passes through. :func:`fuse_repmsdw` folds everything, batch-norm included,
into a :class:`FusedDwConv` that computes the same map with one depthwise
convolution.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import DTYPE, BnParams, batch_norm, chunk_channels, concat_channels, conv_dw


def square_branch_extent(k: int) -> int:
    """Square-branch extent for main extent ``k``: ``k // 2`` stepped down to odd."""
    s = k // 2
    return s if s % 2 else s - 1


@dataclass(eq=False)
class DwKernelSet:
    k: int
    main: np.ndarray  # (C, k, k)
    branch1: np.ndarray  # (C/4, s, s)
    branch2a: np.ndarray  # (C/4, 1, k)
    branch2b: np.ndarray  # (C/4, k, 1)
    branch3a: np.ndarray  # (C/4, 3, k)
    branch3b: np.ndarray  # (C/4, k, 3)
    bn: BnParams
    stride: int = 1

    def __post_init__(self):
        k, c = self.k, self.main.shape[0]
        if k < 3 or k % 2 == 0:
            raise ValueError(f"main kernel extent must be odd and >= 3, got {k}")
        if c % 4:
            raise ValueError(f"channel count {c} is not divisible by 4")
        if self.stride not in (1, 2):
            raise ValueError(f"stride must be 1 or 2, got {self.stride}")
        s, q = square_branch_extent(k), c // 4
        expected = {
            "main": (c, k, k),
            "branch1": (q, s, s),
            "branch2a": (q, 1, k),
            "branch2b": (q, k, 1),
            "branch3a": (q, 3, k),
            "branch3b": (q, k, 3),
        }
        for name, shape in expected.items():
            got = getattr(self, name).shape
            if got != shape:
                raise ValueError(f"{name} has shape {got}, expected {shape}")
        if self.bn.channels != c:
            raise ValueError(f"batch-norm covers {self.bn.channels} channels, kernels cover {c}")

    @property
    def channels(self) -> int:
        return self.main.shape[0]

    @property
    def s(self) -> int:
        return square_branch_extent(self.k)

    def branches(self):
        """``(group_index, kernel)`` pairs in channel-group order."""
        return [
            (0, self.branch1),
            (1, self.branch2a),
            (1, self.branch2b),
            (2, self.branch3a),
            (2, self.branch3b),
        ]

    def param_count(self) -> int:
        c, k, s = self.channels, self.k, self.s
        return c * k * k + c * (s * s + 2 * k + 6 * k) // 4 + 4 * c


@dataclass(eq=False)
class FusedDwConv:
    kernels: np.ndarray  # (C, k, k)
    bias: np.ndarray  # (C,)
    stride: int = 1

    @property
    def k(self) -> int:
        return self.kernels.shape[1]

    @property
    def channels(self) -> int:
        return self.kernels.shape[0]

    def param_count(self) -> int:
        return self.kernels.size + self.bias.size

    def __call__(self, x) -> np.ndarray:
        p = self.k // 2
        return conv_dw(x, self.kernels, self.bias, self.stride, p)


def random_kernel_set(rng: np.random.Generator, channels: int, k: int, stride: int = 1,
                      std: float = 0.02, perturb_bn: bool = False) -> DwKernelSet:
    """Draw a kernel set: normal weights with deviation ``std``.

    Batch-norm statistics are neutral unless ``perturb_bn`` is set.
    """
    s, q = square_branch_extent(k), channels // 4

    def draw(*shape):
        return rng.normal(0.0, std, size=shape).astype(DTYPE)

    main = draw(channels, k, k)
    b1, b2a, b2b = draw(q, s, s), draw(q, 1, k), draw(q, k, 1)
    b3a, b3b = draw(q, 3, k), draw(q, k, 3)
    bn = random_bn(rng, channels) if perturb_bn else BnParams.identity(channels)
    return DwKernelSet(k, main, b1, b2a, b2b, b3a, b3b, bn, stride)


def random_bn(rng: np.random.Generator, channels: int) -> BnParams:
    return BnParams(
        rng.uniform(0.5, 1.5, channels).astype(DTYPE),
        rng.normal(0.0, 0.1, channels).astype(DTYPE),
        rng.normal(0.0, 0.1, channels).astype(DTYPE),
        rng.uniform(0.5, 2.0, channels).astype(DTYPE),
    )


def embed_kernel(small, k: int) -> np.ndarray:
    """Center ``small`` (``(a, b)`` or ``(C, a, b)``) inside a zero ``k x k`` grid."""
    small = np.asarray(small)
    a, b = small.shape[-2:]
    if a % 2 == 0 or b % 2 == 0:
        raise ValueError(f"kernel extents must be odd to center, got {a}x{b}")
    if a > k or b > k:
        raise ValueError(f"kernel {a}x{b} does not fit in {k}x{k}")
    out = np.zeros(small.shape[:-2] + (k, k), small.dtype)
    r, c = (k - a) // 2, (k - b) // 2
    out[..., r : r + a, c : c + b] = small
    return out


def identity_kernel(k: int) -> np.ndarray:
    if k < 1 or k % 2 == 0:
        raise ValueError(f"identity kernel needs an odd extent, got {k}")
    out = np.zeros((k, k), DTYPE)
    out[k // 2, k // 2] = 1.0
    return out


def fold_bn(weights, bias, bn: BnParams) -> tuple[np.ndarray, np.ndarray]:
    """Absorb ``bn`` into a layer whose output channels index ``weights`` axis 0.

    ``bias`` may be ``None`` for a bias-free layer. Works for depthwise grids,
    pointwise matrices and dense kernels alike.
    """
    weights = np.asarray(weights)
    cout = weights.shape[0]
    if bn.channels != cout:
        raise ValueError(f"batch-norm has {bn.channels} channels, layer has {cout}")
    b = np.zeros(cout) if bias is None else np.asarray(bias, np.float64)
    if b.shape != (cout,):
        raise ValueError(f"bias has shape {b.shape}, expected ({cout},)")
    a, c = bn.scale_shift()
    w = weights.astype(np.float64) * a.reshape((cout,) + (1,) * (weights.ndim - 1))
    return w.astype(DTYPE), (a * b + c).astype(DTYPE)


def fused_kernels64(ks: DwKernelSet) -> np.ndarray:
    """Sum of all branch kernels embedded at ``k x k``, before batch-norm, in float64."""
    k, q = ks.k, ks.channels // 4
    total = ks.main.astype(np.float64)
    for group, kernel in ks.branches():
        total[group * q : (group + 1) * q] += embed_kernel(kernel.astype(np.float64), k)
    total[3 * q :] += identity_kernel(k)
    return total


def fuse_repmsdw(ks: DwKernelSet, residual: bool = False) -> FusedDwConv:
    """Collapse a kernel set into one depthwise convolution.

    With ``residual`` the identity shortcut ``x + f(x)`` is folded in as well,
    which is only meaningful at stride 1.
    """
    if residual and ks.stride != 1:
        raise ValueError("a residual shortcut can only be folded at stride 1")
    a, c = ks.bn.scale_shift()
    kernels = fused_kernels64(ks) * a[:, None, None]
    if residual:
        kernels[:, ks.k // 2, ks.k // 2] += 1.0
    return FusedDwConv(kernels.astype(DTYPE), c.astype(DTYPE), ks.stride)


def msdw_unfused(x, ks: DwKernelSet) -> np.ndarray:
    """Reference branchy evaluation: chunk, branch, concat, add main, batch-norm."""
    k, st = ks.k, ks.stride
    x1, x2, x3, x4 = chunk_channels(x, 4)
    y1 = conv_dw(x1, ks.branch1, stride=st, padding=ks.s // 2)
    y2 = conv_dw(x2, ks.branch2a, stride=st, padding=(0, k // 2)) + conv_dw(
        x2, ks.branch2b, stride=st, padding=(k // 2, 0)
    )
    y3 = conv_dw(x3, ks.branch3a, stride=st, padding=(1, k // 2)) + conv_dw(
        x3, ks.branch3b, stride=st, padding=(k // 2, 1)
    )
    y4 = x4[:, ::st, ::st, :]
    y = conv_dw(x, ks.main, stride=st, padding=k // 2) + concat_channels(y1, y2, y3, y4)
    return batch_norm(y, ks.bn)


@dataclass
class EquivalenceReport:
    max_abs_diff: float
    trials: int
    tol: float

    @property
    def passed(self) -> bool:
        return bool(self.max_abs_diff <= self.tol)

    def to_dict(self) -> dict:
        return {"max_abs_diff": self.max_abs_diff, "trials": self.trials, "tol": self.tol, "pass": self.passed}


def verify_equivalence(ks: DwKernelSet, trials: int = 8, tol: float = 1e-4, seed: int = 0,
                       hw: tuple[int, int] = (14, 14), fused: FusedDwConv | None = None) -> EquivalenceReport:
    """Compare branchy and fused evaluation on seeded normal inputs.

    ``fused`` overrides the fused form under test (defaults to fusing ``ks``).
    A non-finite difference counts as infinite.
    """
    if trials < 1:
        raise ValueError("trials must be at least 1")
    fused = fuse_repmsdw(ks) if fused is None else fused
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(trials):
        x = rng.standard_normal((1, *hw, ks.channels)).astype(DTYPE)
        with np.errstate(all="ignore"):
            diff = np.abs(fused(x) - msdw_unfused(x, ks))
        worst = max(worst, float(diff.max()) if np.all(np.isfinite(diff)) else float("inf"))
    return EquivalenceReport(worst, trials, tol)
