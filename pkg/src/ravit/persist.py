"""Save and load models as a weight file plus a JSON sidecar (``<file>.json``)."""
from __future__ import annotations

import json
from pathlib import Path

from . import weights
from .backbone import Model, VariantConfig, build_variant, fuse_model
from .detector import DetectorConfig, FastCOS, build_detector, fuse_detector
from .ppm import IMAGENET_MEAN, IMAGENET_STD
from .state import unflatten


def sidecar_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".json")


def describe(model: Model | FastCOS, **extra) -> dict:
    if isinstance(model, FastCOS):
        meta = {"kind": "detector", "config": model.config.to_dict()}
    else:
        meta = {"kind": "classifier", "config": model.config.to_dict(), "with_head": model.head is not None}
    meta.update(
        format=weights.MAGIC.decode(),
        version=weights.VERSION,
        fused=model.fused,
        normalization={"mean": list(IMAGENET_MEAN), "std": list(IMAGENET_STD)},
    )
    meta.update(extra)
    return meta


def save(model: Model | FastCOS, path, **extra) -> int:
    """Write weights and sidecar; returns the weight file size in bytes."""
    size = weights.write(path, model.state_dict())
    meta = describe(model, **extra)
    sidecar_path(path).write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return size


def load_meta(path) -> dict:
    side = sidecar_path(path)
    if not side.exists():
        raise FileNotFoundError(f"missing config sidecar {side}")
    return json.loads(side.read_text())


def skeleton(meta: dict) -> Model | FastCOS:
    """Zero-weight model with the architecture and fusion state ``meta`` describes."""
    if meta["kind"] == "detector":
        cfg = DetectorConfig.from_dict(meta["config"])
        model = build_detector(cfg.backbone, 0, num_classes=cfg.num_classes, neck_width=cfg.neck_width,
                               tower_depth=cfg.tower_depth, zeros=True)
        return fuse_detector(model) if meta["fused"] else model
    cfg = VariantConfig.from_dict(meta["config"])
    model = build_variant(cfg, 0, with_head=meta.get("with_head", True), zeros=True)
    return fuse_model(model) if meta["fused"] else model


def load(path) -> tuple[Model | FastCOS, dict]:
    meta = load_meta(path)
    tensors = weights.read(path)
    return unflatten(skeleton(meta), tensors), meta
