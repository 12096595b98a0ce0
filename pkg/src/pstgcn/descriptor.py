"""Architecture descriptors: per-layer records plus input/output sizes."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

ATTENTION_MODES = ("additive", "elementwise")


@dataclass(frozen=True)
class LayerSpec:
    channels: int
    K: int = 9
    stride: int = 1
    attention_mode: str = "additive"
    # keep a 1x1 residual projection even where an identity shortcut fits;
    # layers grown until C_out == C_in retain the projection they learned
    projection: bool = False

    def __post_init__(self):
        if self.channels < 1:
            raise ValueError(f"layer channels must be positive, got {self.channels}")
        if self.K < 1 or self.K % 2 == 0:
            raise ValueError(f"temporal kernel size must be odd, got {self.K}")
        if self.stride < 1:
            raise ValueError(f"stride must be positive, got {self.stride}")
        if self.attention_mode not in ATTENTION_MODES:
            raise ValueError(f"attention_mode must be one of {ATTENTION_MODES}, got {self.attention_mode!r}")


@dataclass(frozen=True)
class Descriptor:
    in_channels: int
    num_joints: int
    num_classes: int
    layers: tuple[LayerSpec, ...] = field(default_factory=tuple)
    input_bn: bool = True

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))

    @property
    def widths(self) -> tuple[int, ...]:
        return tuple(spec.channels for spec in self.layers)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["layers"] = []
        for spec in self.layers:
            rec = asdict(spec)
            if not rec["projection"]:
                del rec["projection"]
            d["layers"].append(rec)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> Descriptor:
        return cls(
            in_channels=int(d["in_channels"]),
            num_joints=int(d["num_joints"]),
            num_classes=int(d["num_classes"]),
            layers=tuple(LayerSpec(**spec) for spec in d.get("layers", [])),
            input_bn=bool(d.get("input_bn", True)),
        )

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=1)


def save_descriptor(desc: Descriptor, path) -> None:
    Path(path).write_text(desc.dumps())


def load_descriptor(path_or_preset) -> Descriptor:
    if str(path_or_preset) in DESCRIPTOR_PRESETS:
        return DESCRIPTOR_PRESETS[str(path_or_preset)]
    return Descriptor.from_dict(json.loads(Path(path_or_preset).read_text()))


def default_stride(index: int, start: int = 4, every: int = 3) -> int:
    """Stride of the 1-based layer ``index``: 2 at ``start``, ``start + every``, ..."""
    return 2 if index >= start and (index - start) % every == 0 else 1


def from_widths(widths, in_channels, num_joints, num_classes, K=9, attention_mode="additive",
                strides=None, input_bn=True) -> Descriptor:
    if strides is None:
        strides = [default_stride(i + 1) for i in range(len(widths))]
    layers = tuple(
        LayerSpec(channels=int(c), K=K, stride=int(s), attention_mode=attention_mode)
        for c, s in zip(widths, strides)
    )
    return Descriptor(in_channels, num_joints, num_classes, layers, input_bn)


STGCN_BASELINE_WIDTHS = (64, 64, 64, 64, 128, 128, 128, 256, 256, 256)

DESCRIPTOR_PRESETS = {
    # the baseline downsamples in time at layers 5 and 8
    "stgcn-baseline": from_widths(
        STGCN_BASELINE_WIDTHS, 3, 25, 60, attention_mode="elementwise",
        strides=[2 if i in (5, 8) else 1 for i in range(1, 11)],
    ),
    "pstgcn-ntu-cv": from_widths((100, 80, 100, 40, 60, 80, 60, 80), 3, 25, 60),
    "pstgcn-ntu-cs": from_widths((100, 80, 60, 100, 60, 100, 140, 80), 3, 25, 60),
    "pstgcn-kinetics": from_widths((80, 100, 100, 120, 100, 120, 140, 160, 180), 3, 18, 400),
}
