"""Four-stage hybrid backbone: presets, construction, inference and cost accounting."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .blocks import (
    BlockParams,
    ClassifierParams,
    ConvBn,
    DownsampleParams,
    Init,
    MixerKind,
    classifier_head,
    downsample_forward,
    fuse_block,
    fuse_downsample,
    ravit_block,
    stem_forward,
)
from .state import count_params, flatten
from .tensor import DTYPE, as_tensor4, count_macs


@dataclass(frozen=True)
class VariantConfig:
    name: str
    dims: tuple[int, ...]
    depths: tuple[int, ...]
    mixers: tuple[MixerKind, ...]
    stem_convs: int = 2
    ffn_ratio: int = 3
    head_hidden: int = 1280
    num_classes: int = 1000
    downsample_k: int = 7
    downsample_ffn: bool = True
    in_channels: int = 3

    def __post_init__(self):
        if not (len(self.dims) == len(self.depths) == len(self.mixers)):
            raise ValueError("dims, depths and mixers must have one entry per stage")
        for d in self.dims:
            if d % 4:
                raise ValueError(f"stage width {d} is not divisible by 4")
        if self.dims[0] % (2 ** (self.stem_convs - 1)):
            raise ValueError("stage-1 width must halve cleanly through the stem")

    @property
    def num_stages(self) -> int:
        return len(self.dims)

    @property
    def stride(self) -> int:
        """Total input-to-last-stage downsampling factor."""
        return 2 ** (self.stem_convs + self.num_stages - 1)

    def stem_widths(self) -> list[int]:
        c, n = self.dims[0], self.stem_convs
        return [self.in_channels] + [c // 2 ** (n - 1 - i) for i in range(n)]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["dims"], d["depths"] = list(self.dims), list(self.depths)
        d["mixers"] = [str(m) for m in self.mixers]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "VariantConfig":
        d = dict(d)
        d["dims"], d["depths"] = tuple(d["dims"]), tuple(d["depths"])
        d["mixers"] = tuple(MixerKind.parse(m) for m in d["mixers"])
        return cls(**d)


def _mixers(*names: str) -> tuple[MixerKind, ...]:
    return tuple(MixerKind.parse(n) for n in names)


PRESETS: dict[str, VariantConfig] = {
    "T26": VariantConfig("T26", (40, 80, 120, 320), (2, 4, 16, 4), _mixers("M3", "M3", "M7", "A7")),
    "S22": VariantConfig("S22", (48, 96, 192, 384), (2, 4, 12, 4), _mixers("M3", "M3", "M7", "A7")),
    "S26": VariantConfig("S26", (48, 96, 192, 384), (2, 4, 16, 4), _mixers("M3", "M3", "M7", "A7")),
    "M26": VariantConfig("M26", (64, 128, 256, 512), (2, 4, 16, 4), _mixers("M3", "M3", "M7", "A7")),
    # macro ablations on the S22 widths; V4 is S22 itself
    "V1": VariantConfig("V1", (96, 192, 384), (4, 16, 4), _mixers("M3", "M3", "M3"), stem_convs=4),
    "V2": VariantConfig("V2", (48, 96, 192, 384), (2, 4, 12, 4), _mixers("M3", "M3", "M3", "M3")),
    "V3": VariantConfig("V3", (48, 96, 192, 384), (2, 4, 12, 4), _mixers("M3", "M3", "M7", "M7")),
    "V4": VariantConfig("V4", (48, 96, 192, 384), (2, 4, 12, 4), _mixers("M3", "M3", "M7", "A7")),
    "V5": VariantConfig("V5", (48, 96, 192, 384), (2, 4, 12, 4), _mixers("M3", "M3", "A7", "A7")),
}


def get_variant(name: str) -> VariantConfig:
    try:
        return PRESETS[name.upper()]
    except KeyError:
        raise ValueError(f"unknown variant {name!r}; choose from {', '.join(PRESETS)}") from None


@dataclass(eq=False)
class Stage:
    downsample: DownsampleParams | None
    blocks: list[BlockParams]


@dataclass(eq=False)
class Model:
    config: VariantConfig
    stem: list[ConvBn]
    stages: list[Stage]
    head: ClassifierParams | None

    @property
    def fused(self) -> bool:
        return self.stages[0].blocks[0].fused if self.stages[0].blocks else self.stem[0].fused

    def state_dict(self) -> dict[str, np.ndarray]:
        return flatten(self)


@dataclass(eq=False)
class FeaturePyramidOut:
    """Per-stage outputs; the last three are the detector's F3, F4, F5."""

    stages: list[np.ndarray]
    logits: np.ndarray | None = None

    @property
    def F3(self):
        return self.stages[-3]

    @property
    def F4(self):
        return self.stages[-2]

    @property
    def F5(self):
        return self.stages[-1]


def build_variant(cfg: VariantConfig | str, seed: int = 0, *, with_head: bool = True,
                  perturb_bn: bool = False, zeros: bool = False, std: float = 0.02) -> Model:
    """Construct a branchy model; identical arguments give identical weights."""
    cfg = get_variant(cfg) if isinstance(cfg, str) else cfg
    init = Init(np.random.default_rng(seed), std=std, perturb_bn=perturb_bn, zeros=zeros)
    widths = cfg.stem_widths()
    stem = [ConvBn.init(init, widths[i], widths[i + 1]) for i in range(cfg.stem_convs)]
    stages = []
    for i, (dim, depth, mixer) in enumerate(zip(cfg.dims, cfg.depths, cfg.mixers)):
        down = None
        if i > 0:
            down = DownsampleParams.init(init, cfg.dims[i - 1], dim, cfg.downsample_k, cfg.ffn_ratio, cfg.downsample_ffn)
        blocks = [BlockParams.init(init, dim, mixer, cfg.ffn_ratio) for _ in range(depth)]
        stages.append(Stage(down, blocks))
    head = ClassifierParams.init(init, cfg.dims[-1], cfg.num_classes, cfg.head_hidden) if with_head else None
    return Model(cfg, stem, stages, head)


def fuse_model(model: Model) -> Model:
    """Return a new model with every branch bundle and normalization folded."""
    if model.fused:
        raise ValueError("model is already fused")
    stem = [c.fuse() for c in model.stem]
    stages = [
        Stage(fuse_downsample(s.downsample) if s.downsample is not None else None, [fuse_block(b) for b in s.blocks])
        for s in model.stages
    ]
    return Model(model.config, stem, stages, model.head)


def check_input(model: Model, x) -> np.ndarray:
    x = as_tensor4(x)
    # stride-2 convs round odd extents up, so /32 suffices even for deeper stems
    st = min(model.config.stride, 32)
    if x.shape[1] % st or x.shape[2] % st:
        raise ValueError(f"input extents {x.shape[1]}x{x.shape[2]} must be divisible by {st}")
    if x.shape[3] != model.config.in_channels:
        raise ValueError(f"expected {model.config.in_channels} input channels, got {x.shape[3]}")
    return x


def forward(model: Model, x, want: str = "logits"):
    """Run the network.

    ``want`` is ``"logits"``, ``"features"`` (a :class:`FeaturePyramidOut`)
    or ``"both"`` (features with ``logits`` filled in).
    """
    if want not in ("logits", "features", "both"):
        raise ValueError(f"unknown output request {want!r}")
    x = check_input(model, x)
    y = stem_forward(x, model.stem)
    outs = []
    for stage in model.stages:
        if stage.downsample is not None:
            y = downsample_forward(y, stage.downsample)
        for block in stage.blocks:
            y = ravit_block(y, block)
        outs.append(y)
    if want == "features":
        return FeaturePyramidOut(outs)
    if model.head is None:
        raise ValueError("model was built without a classifier head")
    logits = classifier_head(y, model.head)
    return logits if want == "logits" else FeaturePyramidOut(outs, logits)


def stage_param_counts(model: Model) -> dict[str, int]:
    counts = {"stem": count_params(model.stem)}
    for i, stage in enumerate(model.stages, 1):
        counts[f"stage{i}"] = count_params(stage)
    if model.head is not None:
        counts["head"] = count_params(model.head)
    return counts


def count_params_flops(model: Model, input_hw: tuple[int, int] = (224, 224)) -> dict:
    """Exact stored-value count and FLOPs (2 per multiply-accumulate) at ``input_hw``.

    FLOPs cover convolutions, fully connected layers and attention products;
    normalizations, activations and residual adds are not counted.
    """
    x = np.zeros((1, *input_hw, model.config.in_channels), DTYPE)
    with count_macs() as counter:
        forward(model, x, "both" if model.head is not None else "features")
    return {
        "params": sum(a.size for a in model.state_dict().values()),
        "macs": counter.macs,
        "flops": counter.flops,
        "by_op": dict(counter.by_op),
        "per_stage_params": stage_param_counts(model),
    }
