"""Block- and model-level fused-versus-branchy equivalence checks."""
from __future__ import annotations

import numpy as np

from .backbone import Model, forward, fuse_model
from .blocks import downsample_forward, ravit_block, repmsdw_forward
from .detector import FastCOS, detector_levels, fuse_detector
from .tensor import DTYPE


def _max_diff(a, b) -> float:
    with np.errstate(all="ignore"):
        d = np.abs(np.asarray(a, np.float64) - np.asarray(b, np.float64))
    return float(d.max()) if np.all(np.isfinite(d)) else float("inf")


def _backbone_pairs(u: Model, f: Model, prefix: str = ""):
    for i, (su, sf) in enumerate(zip(u.stages, f.stages)):
        if su.downsample is not None:
            c = su.downsample.dw.channels
            yield (f"{prefix}stages.{i}.downsample", c,
                   lambda x, p=su.downsample: downsample_forward(x, p),
                   lambda x, p=sf.downsample: downsample_forward(x, p))
        for j, (bu, bf) in enumerate(zip(su.blocks, sf.blocks)):
            yield (f"{prefix}stages.{i}.blocks.{j}", bu.channels,
                   lambda x, p=bu: ravit_block(x, p), lambda x, p=bf: ravit_block(x, p))
    for i, (cu, cf) in enumerate(zip(u.stem, f.stem)):
        yield (f"{prefix}stem.{i}", cu.weight.shape[3], cu, cf)


def block_pairs(u: Model | FastCOS, f: Model | FastCOS):
    """``(name, channels, branchy_fn, fused_fn)`` for every fusible unit."""
    if isinstance(u, FastCOS):
        yield from _backbone_pairs(u.backbone, f.backbone, "backbone.")
        for i, (du, df) in enumerate(zip(u.neck.dw, f.neck.dw)):
            yield (f"neck.dw.{i}", du.channels, lambda x, p=du: repmsdw_forward(x, p),
                   lambda x, p=df: repmsdw_forward(x, p))
    else:
        yield from _backbone_pairs(u, f)


def model_outputs(model: Model | FastCOS, x) -> list[np.ndarray]:
    if isinstance(model, FastCOS):
        return [o[k] for o in detector_levels(model, x) for k in ("cls", "box", "ctr")]
    return [forward(model, x)]


def verify_model(unfused: Model | FastCOS, fused: Model | FastCOS | None = None, *, trials: int = 2,
                 tol: float = 1e-4, model_tol: float = 5e-4, seed: int = 0, block_hw: int = 14,
                 model_hw: tuple[int, int] | None = None) -> dict:
    """Compare every fusible unit and the whole network on seeded normal inputs.

    ``fused`` defaults to fusing ``unfused`` in memory; pass a loaded fused
    model to check a deploy artifact against its source.
    """
    if trials < 1:
        raise ValueError("trials must be at least 1")
    if unfused.fused:
        raise ValueError("the reference model must be unfused")
    if fused is None:
        fused = fuse_detector(unfused) if isinstance(unfused, FastCOS) else fuse_model(unfused)
    rng = np.random.default_rng(seed)
    blocks = []
    for name, c, fu, ff in block_pairs(unfused, fused):
        worst = 0.0
        for _ in range(trials):
            x = rng.standard_normal((1, block_hw, block_hw, c)).astype(DTYPE)
            worst = max(worst, _max_diff(fu(x), ff(x)))
        blocks.append({"name": name, "max_abs_diff": worst, "tol": tol, "pass": worst <= tol})
    if model_hw is None:
        model_hw = (64, 64) if isinstance(unfused, FastCOS) else (224, 224)
    worst = 0.0
    for _ in range(trials):
        x = rng.standard_normal((1, *model_hw, 3)).astype(DTYPE)
        for a, b in zip(model_outputs(unfused, x), model_outputs(fused, x)):
            worst = max(worst, _max_diff(a, b))
    whole = {"input_hw": list(model_hw), "max_abs_diff": worst, "tol": model_tol, "pass": worst <= model_tol}
    failed = [b["name"] for b in blocks if not b["pass"]]
    return {
        "blocks": blocks,
        "model": whole,
        "failed": failed,
        "pass": not failed and whole["pass"],
        "trials": trials,
        "seed": seed,
    }
