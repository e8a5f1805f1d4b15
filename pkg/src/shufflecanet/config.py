"""Run configuration: architecture, loss, optimiser, data and detection settings.

One ``RunConfig`` describes one ablation row (backbone x neck x loss).
Everything round-trips through plain JSON with sorted keys.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

BACKBONES = ("shufflecanet", "shufflenetv2")
NECKS = ("bifpn", "panet-sum")
LOSSES = ("alpha-ciou", "ciou")

# YOLOv5 default anchors at 640 px, small to large
DEFAULT_ANCHORS_640 = (
    (10, 13), (16, 30), (33, 23),
    (30, 61), (62, 45), (59, 119),
    (116, 90), (156, 198), (373, 326),
)


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class CBSConfig:
    in_channels: int
    out_channels: int
    kernel: int = 3
    stride: int = 1

    def __post_init__(self):
        if self.kernel not in (1, 3, 5):
            raise ConfigError(f"CBS kernel must be 1, 3 or 5, got {self.kernel}")
        if self.stride not in (1, 2):
            raise ConfigError(f"CBS stride must be 1 or 2, got {self.stride}")
        if self.in_channels <= 0 or self.out_channels <= 0:
            raise ConfigError("CBS channel counts must be positive")


@dataclass(frozen=True)
class ShuffleUnitConfig:
    in_channels: int
    out_channels: int
    stride: int = 1
    dw_kernel: int = 5

    def __post_init__(self):
        if self.stride not in (1, 2):
            raise ConfigError(f"shuffle unit stride must be 1 or 2, got {self.stride}")
        if self.stride == 1:
            if self.in_channels != self.out_channels:
                raise ConfigError("stride-1 shuffle unit keeps its channel count")
            if self.in_channels % 2:
                raise ConfigError(f"stride-1 shuffle unit needs an even channel count, got {self.in_channels}")
        elif self.out_channels % 2:
            raise ConfigError(f"stride-2 shuffle unit needs an even output width, got {self.out_channels}")
        if self.dw_kernel % 2 == 0:
            raise ConfigError("depthwise kernel must be odd")


@dataclass(frozen=True)
class CoordAttConfig:
    channels: int
    reduction: int = 32
    activation: str = "hardswish"

    @property
    def mid_channels(self) -> int:
        return max(8, self.channels // self.reduction)


@dataclass(frozen=True)
class BackboneConfig:
    stem_channels: tuple = (16, 32)
    stage_channels: tuple = (64, 128, 256)
    stage_repeats: tuple = (2, 3, 2)
    attention: bool = True
    dw_kernel: int = 5
    ca_reduction: int = 32
    ca_activation: str = "hardswish"

    def __post_init__(self):
        object.__setattr__(self, "stem_channels", tuple(int(c) for c in self.stem_channels))
        object.__setattr__(self, "stage_channels", tuple(int(c) for c in self.stage_channels))
        object.__setattr__(self, "stage_repeats", tuple(int(r) for r in self.stage_repeats))
        if len(self.stem_channels) != 2:
            raise ConfigError("backbone stem has exactly two CBS blocks")
        if len(self.stage_channels) != 3 or len(self.stage_repeats) != 3:
            raise ConfigError("backbone has exactly three stages")
        if any(r < 1 for r in self.stage_repeats):
            raise ConfigError("stage repeat counts must be >= 1")
        if self.ca_activation not in ("hardswish", "relu", "silu", "sigmoid"):
            raise ConfigError(f"unknown attention activation {self.ca_activation!r}")

    def stem(self) -> tuple[CBSConfig, CBSConfig]:
        a, b = self.stem_channels
        return CBSConfig(3, a, 3, 2), CBSConfig(a, b, 3, 2)


@dataclass(frozen=True)
class BiFPNConfig:
    neck_channels: int = 64
    repeats: int = 1
    fusion_mode: str = "fast-normalized"
    epsilon: float = 1e-4
    skip_edges: bool = True

    def __post_init__(self):
        if self.neck_channels <= 0:
            raise ConfigError("neck_channels must be positive")
        if self.repeats < 1:
            raise ConfigError("BiFPN repeats must be >= 1")
        if self.epsilon <= 0:
            raise ConfigError("BiFPN epsilon must be positive")
        if self.fusion_mode not in ("fast-normalized", "plain-sum"):
            raise ConfigError(f"unknown fusion mode {self.fusion_mode!r}")


@dataclass(frozen=True)
class HeadConfig:
    num_classes: int = 2
    anchors: tuple = DEFAULT_ANCHORS_640
    strides: tuple = (8, 16, 32)

    def __post_init__(self):
        anchors = tuple((float(w), float(h)) for w, h in self.anchors)
        object.__setattr__(self, "anchors", anchors)
        object.__setattr__(self, "strides", tuple(int(s) for s in self.strides))
        if self.num_classes < 1:
            raise ConfigError("num_classes must be >= 1")
        if len(anchors) != 9:
            raise ConfigError(f"need 9 anchors (3 per level), got {len(anchors)}")
        if any(w <= 0 or h <= 0 for w, h in anchors):
            raise ConfigError("anchor sizes must be positive")
        areas = [w * h for w, h in anchors]
        if any(b < a for a, b in zip(areas, areas[1:])):
            raise ConfigError("anchors must be sorted ascending by area")

    def level_anchors(self, level: int) -> tuple:
        return self.anchors[3 * level:3 * level + 3]


@dataclass(frozen=True)
class ModelConfig:
    input_size: int = 640
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    neck: BiFPNConfig = field(default_factory=BiFPNConfig)
    head: HeadConfig = field(default_factory=HeadConfig)

    def __post_init__(self):
        if self.input_size % 32:
            raise ConfigError(f"input_size must be divisible by 32, got {self.input_size}")

    def digest(self) -> str:
        """sha256 of the canonical JSON form; identifies the architecture and anchors."""
        blob = json.dumps(_plain(asdict(self)), sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()

    @property
    def backbone_name(self) -> str:
        return "shufflecanet" if self.backbone.attention else "shufflenetv2"

    @property
    def neck_name(self) -> str:
        return "bifpn" if self.neck.skip_edges and self.neck.fusion_mode == "fast-normalized" else "panet-sum"

    def with_ablation(self, backbone: str | None = None, neck: str | None = None) -> "ModelConfig":
        cfg = self
        if backbone is not None:
            if backbone not in BACKBONES:
                raise ConfigError(f"backbone must be one of {BACKBONES}, got {backbone!r}")
            cfg = replace(cfg, backbone=replace(cfg.backbone, attention=backbone == "shufflecanet"))
        if neck is not None:
            if neck not in NECKS:
                raise ConfigError(f"neck must be one of {NECKS}, got {neck!r}")
            bifpn = neck == "bifpn"
            cfg = replace(cfg, neck=replace(cfg.neck, skip_edges=bifpn,
                                            fusion_mode="fast-normalized" if bifpn else "plain-sum"))
        return cfg


@dataclass(frozen=True)
class LossConfig:
    kind: str = "alpha-ciou"
    alpha: float = 3.0
    box_gain: float = 0.05
    obj_gain: float = 1.0
    cls_gain: float = 0.5
    balance: tuple = (4.0, 1.0, 0.4)
    anchor_t: float = 4.0

    def __post_init__(self):
        object.__setattr__(self, "balance", tuple(float(b) for b in self.balance))
        if self.kind not in LOSSES:
            raise ConfigError(f"loss kind must be one of {LOSSES}, got {self.kind!r}")
        if self.alpha <= 0:
            raise ConfigError("alpha must be positive")
        if min(self.box_gain, self.obj_gain, self.cls_gain) < 0:
            raise ConfigError("loss gains must be non-negative")
        if len(self.balance) != 3:
            raise ConfigError("need one objectness balance weight per level")

    @property
    def effective_alpha(self) -> float:
        return self.alpha if self.kind == "alpha-ciou" else 1.0


@dataclass(frozen=True)
class OptimConfig:
    lr0: float = 1e-2
    lrf: float = 1e-5
    weight_decay: float = 5e-3
    momentum: float = 0.937
    warmup_epochs: float = 3
    warmup_momentum: float = 0.8
    epochs: int = 200
    batch_size: int = 16

    def __post_init__(self):
        if not 0 < self.lrf <= self.lr0:
            raise ConfigError("need 0 < lrf <= lr0")
        if not 0 <= self.warmup_epochs < self.epochs:
            raise ConfigError("warmup_epochs must be smaller than epochs")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")


@dataclass(frozen=True)
class DataConfig:
    train_manifest: str | None = None
    val_manifest: str | None = None
    mosaic: float = 1.0
    eval_interval: int = 1


@dataclass(frozen=True)
class DetectConfig:
    conf_threshold: float = 0.25
    iou_threshold: float = 0.45
    eval_conf_threshold: float = 0.001


@dataclass(frozen=True)
class RunConfig:
    class_names: tuple = ("face", "mask")
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    data: DataConfig = field(default_factory=DataConfig)
    detect: DetectConfig = field(default_factory=DetectConfig)
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "class_names", tuple(str(c) for c in self.class_names))
        if len(self.class_names) != self.model.head.num_classes:
            raise ConfigError(f"{len(self.class_names)} class names for num_classes={self.model.head.num_classes}")

    @property
    def num_classes(self) -> int:
        return self.model.head.num_classes

    def ablation_row(self) -> tuple[str, str, str]:
        return self.model.backbone_name, self.model.neck_name, self.loss.kind

    def to_dict(self) -> dict:
        return _plain(asdict(self))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"

    def model_hash(self) -> str:
        """Digest of everything that determines tensor names and shapes."""
        return self.model.digest()

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d)
        model = dict(d.pop("model", {}))
        ablation = {k: model.pop(k) for k in ("backbone_name", "neck_name") if k in model}
        mc = ModelConfig(
            input_size=model.get("input_size", 640),
            backbone=_build(BackboneConfig, model.get("backbone", {})),
            neck=_build(BiFPNConfig, model.get("neck", {})),
            head=_build(HeadConfig, model.get("head", {})),
        )
        if ablation:
            mc = mc.with_ablation(ablation.get("backbone_name"), ablation.get("neck_name"))
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(
            class_names=tuple(d.get("class_names", ("face", "mask"))),
            model=mc,
            loss=_build(LossConfig, d.get("loss", {})),
            optim=_build(OptimConfig, d.get("optim", {})),
            data=_build(DataConfig, d.get("data", {})),
            detect=_build(DetectConfig, d.get("detect", {})),
            seed=int(d.get("seed", 0)),
        )

    @classmethod
    def from_json(cls, text: str) -> "RunConfig":
        try:
            return cls.from_dict(json.loads(text))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from exc

    @classmethod
    def load(cls, path) -> "RunConfig":
        return cls.from_json(Path(path).read_text(encoding="utf-8"))

    def with_ablation(self, backbone=None, neck=None, loss=None) -> "RunConfig":
        cfg = replace(self, model=self.model.with_ablation(backbone, neck))
        if loss is not None:
            cfg = replace(cfg, loss=replace(cfg.loss, kind=loss))
        return cfg


def _build(cls, d):
    if isinstance(d, cls):
        return d
    names = {f.name for f in fields(cls)}
    unknown = set(d) - names
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    return cls(**d)


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def scaled_default_anchors(input_size: int) -> tuple:
    s = input_size / 640.0
    return tuple((w * s, h * s) for w, h in DEFAULT_ANCHORS_640)


def desk_config(num_classes: int = 2, class_names=None, input_size: int = 64, anchors=None, **optim) -> RunConfig:
    """Small CPU-trainable preset used by the tests and the overfit check."""
    names = tuple(class_names) if class_names else tuple(f"class{i}" for i in range(num_classes))
    head = HeadConfig(num_classes=len(names), anchors=anchors or scaled_default_anchors(input_size))
    model = ModelConfig(input_size=input_size, backbone=BackboneConfig(), neck=BiFPNConfig(neck_channels=64),
                        head=head)
    # one step per epoch on an 8-image set; the higher lr and box gain were tuned for the overfit check
    opt = dict(epochs=500, batch_size=8, warmup_epochs=3, lr0=0.1)
    opt.update(optim)
    return RunConfig(class_names=names, model=model, loss=LossConfig(box_gain=1.0), optim=OptimConfig(**opt),
                     data=DataConfig(mosaic=0.0, eval_interval=0))


def full_scale_model(num_classes: int = 2) -> ModelConfig:
    """ShuffleNetV2-1.0x widths; the source widths are not published."""
    return ModelConfig(
        input_size=640,
        backbone=BackboneConfig(stem_channels=(32, 64), stage_channels=(116, 232, 464), stage_repeats=(4, 8, 4)),
        neck=BiFPNConfig(neck_channels=128),
        head=HeadConfig(num_classes=num_classes),
    )
