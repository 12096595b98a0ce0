"""Static parameter and FLOP counts for ST-GCN architectures."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

from .descriptor import Descriptor

NUM_PARTITIONS = 3


@dataclass
class LayerCost:
    in_channels: int
    out_channels: int
    T_in: int
    T_out: int
    spatial_params: int
    temporal_params: int
    residual_params: int
    bn_params: int
    attention_params: int
    spatial_flops: int
    temporal_flops: int
    residual_flops: int
    extra_flops: int = 0

    @property
    def params(self) -> int:
        return (self.spatial_params + self.temporal_params + self.residual_params
                + self.bn_params + self.attention_params)

    @property
    def flops(self) -> int:
        return self.spatial_flops + self.temporal_flops + self.residual_flops + self.extra_flops


@dataclass
class ComplexityReport:
    input_shape: tuple
    mac: int
    exhaustive: bool
    streams: int
    layers: list = field(default_factory=list)
    input_bn_params: int = 0
    input_flops: int = 0
    head_params: int = 0
    head_flops: int = 0

    @property
    def params(self) -> int:
        single = self.input_bn_params + self.head_params + sum(l.params for l in self.layers)
        return self.streams * single

    @property
    def flops(self) -> int:
        single = self.input_flops + self.head_flops + sum(l.flops for l in self.layers)
        return self.streams * single

    def summary(self) -> str:
        return f"params={self.params} flops={self.flops}"

    def to_dict(self) -> dict:
        layers = []
        for cost in self.layers:
            d = asdict(cost)
            d["params"], d["flops"] = cost.params, cost.flops
            layers.append(d)
        return {
            "input_shape": list(self.input_shape),
            "convention": {"mac": self.mac, "exhaustive": self.exhaustive},
            "streams": self.streams,
            "layers": layers,
            "input_bn_params": self.input_bn_params,
            "input_flops": self.input_flops,
            "head_params": self.head_params,
            "head_flops": self.head_flops,
            "totals": {"params": self.params, "flops": self.flops},
        }

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=1)


def _as_descriptor(obj) -> Descriptor:
    if isinstance(obj, Descriptor):
        return obj
    if hasattr(obj, "descriptor"):
        return obj.descriptor()
    raise TypeError(f"expected a Descriptor or a model, got {type(obj).__name__}")


def complexity_report(obj, input_shape=None, mac: int = 2, exhaustive: bool = False,
                      streams: int = 1) -> ComplexityReport:
    """Per-layer and total counts.

    ``input_shape`` is (C_in, T_in, V); without it FLOPs are zero. ``mac``
    is the number of FLOPs charged per multiply-accumulate. ``exhaustive``
    adds batch-norm, attention, residual-sum and pooling arithmetic, which
    the default convention leaves out.
    """
    if mac not in (1, 2):
        raise ValueError(f"mac must be 1 or 2, got {mac}")
    desc = _as_descriptor(obj)
    V = desc.num_joints
    if input_shape is None:
        T = 0
    else:
        C0, T, V0 = (int(v) for v in input_shape)
        if C0 != desc.in_channels or V0 != V:
            raise ValueError(f"input shape {tuple(input_shape)} does not match descriptor "
                             f"(C={desc.in_channels}, V={V})")
        if T < 1:
            raise ValueError("T_in must be positive")
    report = ComplexityReport(
        input_shape=(desc.in_channels, T, V), mac=mac, exhaustive=exhaustive, streams=streams
    )
    c_in = desc.in_channels
    if desc.input_bn:
        report.input_bn_params = 2 * c_in * V
        if exhaustive:
            report.input_flops = 2 * c_in * T * V
    for spec in desc.layers:
        c_out, K = spec.channels, spec.K
        t_out = -(-T // spec.stride)
        has_proj = spec.projection or c_in != c_out or spec.stride != 1
        n_bn = 3 if has_proj else 2
        cost = LayerCost(
            in_channels=c_in,
            out_channels=c_out,
            T_in=T,
            T_out=t_out,
            spatial_params=NUM_PARTITIONS * c_out * c_in,
            temporal_params=c_out * c_out * K,
            residual_params=c_out * c_in if has_proj else 0,
            bn_params=2 * c_out * n_bn,
            attention_params=NUM_PARTITIONS * V * V,
            spatial_flops=mac * NUM_PARTITIONS * c_out * T * V * (c_in + V),
            temporal_flops=mac * c_out * c_out * K * t_out * V,
            residual_flops=mac * c_out * c_in * t_out * V if has_proj else 0,
        )
        if exhaustive:
            cost.extra_flops = (
                NUM_PARTITIONS * V * V  # forming A + M or A * M
                + 2 * c_out * T * V  # spatial batch norm
                + 2 * c_out * t_out * V * (n_bn - 1)  # temporal and residual batch norms
                + c_out * t_out * V  # residual sum
            )
        report.layers.append(cost)
        c_in, T = c_out, t_out
    report.head_params = c_in * desc.num_classes + desc.num_classes
    if input_shape is not None:
        report.head_flops = mac * c_in * desc.num_classes
        if exhaustive:
            report.head_flops += desc.num_classes + c_in * T * V  # bias and pooling sums
    return report


def count_params(obj, streams: int = 1) -> int:
    return complexity_report(obj, streams=streams).params


def count_flops(obj, input_shape, mac: int = 2, exhaustive: bool = False, streams: int = 1) -> int:
    return complexity_report(obj, input_shape, mac, exhaustive, streams).flops
