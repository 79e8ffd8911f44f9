"""Single-stage anchor-free detector on top of the backbone.

Three pyramid levels (strides 8, 16, 32) are merged top-down by a neck whose
refinement is a multi-scale depthwise conv followed by a 1x1 conv. A head
shared across levels predicts class logits, centerness logits and four
boundary distances per location.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from .backbone import Model, VariantConfig, build_variant, forward as backbone_forward, fuse_model, get_variant
from .blocks import Init, repmsdw_forward
from .reparam import DwKernelSet, FusedDwConv, fuse_repmsdw
from .state import flatten
from .tensor import DTYPE, as_tensor4, conv2d, conv_pw, gelu, upsample_nearest2x

STRIDES = (8, 16, 32)


@dataclass(frozen=True)
class RangeTable:
    """Per-level ``(low, high]`` bounds on a target's largest boundary distance."""

    bounds: tuple[tuple[float, float], ...] = ((0, 128), (128, 256), (256, 512))

    def __post_init__(self):
        for (lo, hi), (nlo, _) in zip(self.bounds, self.bounds[1:]):
            if nlo != hi:
                raise ValueError("regression ranges must be contiguous")
        if any(lo >= hi for lo, hi in self.bounds):
            raise ValueError("each regression range must be increasing")


def assign_level(l: float, t: float, r: float, b: float, table: RangeTable = RangeTable()) -> int | None:
    """Index of the level whose range holds ``max(l, t, r, b)``, else ``None``."""
    if min(l, t, r, b) < 0:
        raise ValueError("boundary distances must be non-negative")
    m = max(l, t, r, b)
    for i, (lo, hi) in enumerate(table.bounds):
        if lo < m <= hi:
            return i
    return None


def centerness_target(l: float, t: float, r: float, b: float) -> float:
    if l + r <= 0 or t + b <= 0:
        raise ValueError("centerness is undefined for a zero-area target")
    return math.sqrt((min(l, r) / max(l, r)) * (min(t, b) / max(t, b)))


def encode_box(box, x: float, y: float) -> tuple[float, float, float, float]:
    """Distances ``(l, t, r, b)`` from point ``(x, y)`` to the sides of ``box``."""
    x1, y1, x2, y2 = box
    return (x - x1, y - y1, x2 - x, y2 - y)


def location_centers(h: int, w: int, stride: int) -> tuple[np.ndarray, np.ndarray]:
    """Image-space ``(cx, cy)`` grids, each ``(h, w)``, for a feature map."""
    xs = stride // 2 + np.arange(w, dtype=np.float64) * stride
    ys = stride // 2 + np.arange(h, dtype=np.float64) * stride
    return np.broadcast_to(xs, (h, w)), np.broadcast_to(ys[:, None], (h, w))


# ---------------------------------------------------------------------- params


@dataclass(frozen=True)
class DetectorConfig:
    backbone: VariantConfig
    num_classes: int = 10
    neck_width: int = 128
    tower_depth: int = 4
    neck_k: int = 7

    def __post_init__(self):
        if self.neck_width % 4:
            raise ValueError("neck width must be divisible by 4")
        if self.backbone.num_stages < 3:
            raise ValueError("the detector needs at least three backbone stages")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["backbone"] = self.backbone.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DetectorConfig":
        d = dict(d)
        d["backbone"] = VariantConfig.from_dict(d["backbone"])
        return cls(**d)


@dataclass(eq=False)
class RepFpnParams:
    lat_w: list[np.ndarray]  # per level (Wf, C_l)
    lat_b: list[np.ndarray]
    dw: list[DwKernelSet | FusedDwConv]
    pw_w: list[np.ndarray]  # per level (Wf, Wf)
    pw_b: list[np.ndarray]

    @property
    def fused(self) -> bool:
        return isinstance(self.dw[0], FusedDwConv)

    @property
    def width(self) -> int:
        return self.lat_w[0].shape[0]


@dataclass(eq=False)
class TowerConv:
    weight: np.ndarray  # (Wf, 3, 3, Wf)
    bias: np.ndarray


@dataclass(eq=False)
class HeadParams:
    cls_tower: list[TowerConv]
    reg_tower: list[TowerConv]
    cls_w: np.ndarray  # (K, Wf)
    cls_b: np.ndarray
    box_w: np.ndarray  # (4, Wf)
    box_b: np.ndarray
    ctr_w: np.ndarray  # (1, Wf)
    ctr_b: np.ndarray
    scales: np.ndarray  # (levels,)


@dataclass(eq=False)
class FastCOS:
    config: DetectorConfig
    backbone: Model
    neck: RepFpnParams
    head: HeadParams

    @property
    def fused(self) -> bool:
        return self.backbone.fused

    def state_dict(self) -> dict[str, np.ndarray]:
        return flatten(self)

    def param_count(self) -> int:
        return sum(a.size for a in self.state_dict().values())


def build_detector(variant: str | VariantConfig = "M26", seed: int = 0, *, num_classes: int = 10,
                   neck_width: int = 128, tower_depth: int = 4, perturb_bn: bool = False,
                   zeros: bool = False, std: float = 0.02) -> FastCOS:
    cfg = get_variant(variant) if isinstance(variant, str) else variant
    dcfg = DetectorConfig(cfg, num_classes, neck_width, tower_depth)
    backbone = build_variant(cfg, seed, with_head=False, perturb_bn=perturb_bn, zeros=zeros, std=std)
    # separate stream so the backbone weights match a standalone build
    init = Init(np.random.default_rng([seed, 1]), std=std, perturb_bn=perturb_bn, zeros=zeros)
    wf = neck_width
    levels = cfg.dims[-3:]
    neck = RepFpnParams(
        [init.normal(wf, c) for c in levels],
        [init.bias(wf) for _ in levels],
        [init.kernel_set(wf, dcfg.neck_k) for _ in levels],
        [init.normal(wf, wf) for _ in levels],
        [init.bias(wf) for _ in levels],
    )

    def tower():
        return [TowerConv(init.normal(wf, 3, 3, wf), init.bias(wf)) for _ in range(tower_depth)]

    head = HeadParams(
        tower(), tower(),
        init.normal(num_classes, wf), init.bias(num_classes),
        init.normal(4, wf), init.bias(4),
        init.normal(1, wf), init.bias(1),
        np.ones(len(STRIDES), DTYPE),
    )
    return FastCOS(dcfg, backbone, neck, head)


def fuse_neck(p: RepFpnParams) -> RepFpnParams:
    if p.fused:
        raise ValueError("neck is already fused")
    return RepFpnParams(p.lat_w, p.lat_b, [fuse_repmsdw(d) for d in p.dw], p.pw_w, p.pw_b)


def fuse_detector(det: FastCOS) -> FastCOS:
    if det.fused:
        raise ValueError("detector is already fused")
    return FastCOS(det.config, fuse_model(det.backbone), fuse_neck(det.neck), det.head)


# --------------------------------------------------------------------- forward


def repfpn_forward(f3, f4, f5, p: RepFpnParams, fused: bool = False) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    feats = [as_tensor4(f) for f in (f3, f4, f5)]
    for lo, hi in zip(feats, feats[1:]):
        if lo.shape[1] != 2 * hi.shape[1] or lo.shape[2] != 2 * hi.shape[2]:
            raise ValueError("each pyramid level must be half the resolution of the previous one")
    if fused and not p.fused:
        p = fuse_neck(p)
    lats = [conv_pw(f, w, b) for f, w, b in zip(feats, p.lat_w, p.lat_b)]
    merged = [None, None, lats[2]]
    merged[1] = lats[1] + upsample_nearest2x(merged[2])
    merged[0] = lats[0] + upsample_nearest2x(merged[1])
    return tuple(conv_pw(repmsdw_forward(m, d), w, b) for m, d, w, b in zip(merged, p.dw, p.pw_w, p.pw_b))


def _tower(x, layers: list[TowerConv]) -> np.ndarray:
    for layer in layers:
        x = gelu(conv2d(x, layer.weight, layer.bias, 1, 1))
    return x


def head_forward(levels, p: HeadParams) -> list[dict[str, np.ndarray]]:
    """Per level: ``cls`` and ``ctr`` logits and positive ``box`` distances in pixels."""
    outs = []
    for i, x in enumerate(levels):
        x = as_tensor4(x)
        if x.shape[3] != p.cls_w.shape[1]:
            raise ValueError(f"level has {x.shape[3]} channels, head expects {p.cls_w.shape[1]}")
        c = _tower(x, p.cls_tower)
        r = _tower(x, p.reg_tower)
        raw = conv_pw(r, p.box_w, p.box_b)
        with np.errstate(over="ignore"):
            box = np.exp(p.scales[i] * raw).astype(DTYPE)
        outs.append({
            "cls": conv_pw(c, p.cls_w, p.cls_b),
            "box": box,
            "ctr": conv_pw(r, p.ctr_w, p.ctr_b),
        })
    return outs


@dataclass
class Detection:
    box: tuple[float, float, float, float]
    score: float
    label: int

    def to_json(self, image_id) -> dict:
        return {"image_id": image_id, "class": int(self.label), "score": float(self.score),
                "box": [float(v) for v in self.box]}


def _sigmoid(x) -> np.ndarray:
    with np.errstate(over="ignore"):
        return 1.0 / (1.0 + np.exp(-np.asarray(x, np.float64)))


def decode_boxes(outputs, strides=STRIDES, image_size: tuple[int, int] | None = None,
                 score_thresh: float = 0.05, topk: int = 1000) -> list[Detection]:
    """Turn one image's head outputs into scored boxes.

    ``image_size`` is ``(height, width)`` for clipping; it defaults to the
    extent covered by the first level. Only batch element 0 is decoded.
    """
    if image_size is None:
        h0, w0 = outputs[0]["cls"].shape[1:3]
        image_size = (h0 * strides[0], w0 * strides[0])
    img_h, img_w = image_size
    dets: list[Detection] = []
    for out, stride in zip(outputs, strides):
        cls, box, ctr = out["cls"][0], out["box"][0], out["ctr"][0]
        h, w, k = cls.shape
        scores = (_sigmoid(cls) * _sigmoid(ctr)).reshape(-1)
        cand = np.flatnonzero(scores >= score_thresh)
        if cand.size > topk:
            order = np.argsort(-scores[cand], kind="stable")[:topk]
            cand = np.sort(cand[order])
        loc, label = np.divmod(cand, k)
        ys, xs = np.divmod(loc, w)
        cx = stride // 2 + xs * stride
        cy = stride // 2 + ys * stride
        d = box.reshape(-1, 4)[loc].astype(np.float64)
        x1 = np.clip(cx - d[:, 0], 0, img_w)
        y1 = np.clip(cy - d[:, 1], 0, img_h)
        x2 = np.clip(cx + d[:, 2], 0, img_w)
        y2 = np.clip(cy + d[:, 3], 0, img_h)
        for j in range(cand.size):
            dets.append(Detection((float(x1[j]), float(y1[j]), float(x2[j]), float(y2[j])), float(scores[cand[j]]), int(label[j])))
    return dets


def box_iou(box, boxes) -> np.ndarray:
    """IoU of one ``(4,)`` box against an ``(M, 4)`` array; zero-area unions give 0."""
    boxes = np.asarray(boxes, np.float64).reshape(-1, 4)
    iw = np.clip(np.minimum(box[2], boxes[:, 2]) - np.maximum(box[0], boxes[:, 0]), 0, None)
    ih = np.clip(np.minimum(box[3], boxes[:, 3]) - np.maximum(box[1], boxes[:, 1]), 0, None)
    inter = iw * ih
    area = (box[2] - box[0]) * (box[3] - box[1])
    areas = (boxes[:, 2] - boxes[:, 0]) * (boxes[:, 3] - boxes[:, 1])
    union = area + areas - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(union > 0, inter / union, 0.0)


def nms(dets: list[Detection], iou_thresh: float = 0.6, max_out: int = 100) -> list[Detection]:
    """Greedy per-class suppression; ties keep input order."""
    if not dets:
        return []
    scores = np.array([d.score for d in dets])
    labels = np.array([d.label for d in dets])
    boxes = np.array([d.box for d in dets], np.float64)
    order = np.argsort(-scores, kind="stable")
    alive = np.ones(len(dets), bool)
    keep = []
    for i in order:
        if not alive[i]:
            continue
        keep.append(dets[i])
        if len(keep) == max_out:
            break
        same = np.flatnonzero(alive & (labels == labels[i]))
        alive[same[box_iou(boxes[i], boxes[same]) > iou_thresh]] = False
        alive[i] = False
    return keep


def pad_to_multiple(image, multiple: int = 32) -> np.ndarray:
    """Zero-pad bottom and right so both extents divide ``multiple``."""
    image = as_tensor4(image)
    _, h, w, _ = image.shape
    ph, pw = -h % multiple, -w % multiple
    if ph or pw:
        image = np.pad(image, ((0, 0), (0, ph), (0, pw), (0, 0)))
    return image


def detector_levels(det: FastCOS, image) -> list[dict[str, np.ndarray]]:
    """Head outputs for an already padded image batch."""
    feats = backbone_forward(det.backbone, image, "features")
    levels = repfpn_forward(feats.F3, feats.F4, feats.F5, det.neck)
    return head_forward(levels, det.head)


def fastcos_forward(det: FastCOS, image, *, score_thresh: float = 0.05, iou_thresh: float = 0.6,
                    topk: int = 1000, max_out: int = 100) -> list[list[Detection]]:
    """Detections per batch element, boxes in the unpadded image's pixel frame."""
    image = as_tensor4(image)
    n, h, w, _ = image.shape
    outputs = detector_levels(det, pad_to_multiple(image, 32))
    results = []
    for b in range(n):
        per_image = [{k: v[b : b + 1] for k, v in o.items()} for o in outputs]
        cands = decode_boxes(per_image, STRIDES, (h, w), score_thresh, topk)
        results.append(nms(cands, iou_thresh, max_out))
    return results
