import json
import time

import numpy as np
import pytest

from pstgcn import net
from pstgcn.complexity import complexity_report, count_flops, count_params
from pstgcn.descriptor import DESCRIPTOR_PRESETS, Descriptor, LayerSpec, from_widths, load_descriptor
from pstgcn.graph import load_topology
from pstgcn.net import build_model, model_forward

BASELINE = DESCRIPTOR_PRESETS["stgcn-baseline"]
NTU_CV = DESCRIPTOR_PRESETS["pstgcn-ntu-cv"]

# Reference values (M params, G FLOPs) reported for these architectures.
REPORTED_PARAMS = {"stgcn-baseline": 3.12, "pstgcn-ntu-cv": 0.63, "pstgcn-ntu-cs": 0.92, "pstgcn-kinetics": 1.96}
REPORTED_GFLOPS = {"stgcn-baseline": 16.7, "pstgcn-ntu-cv": 7.2, "pstgcn-ntu-cs": 9.57, "pstgcn-kinetics": 5.67}


def test_single_layer_hand_counts():
    desc = Descriptor(3, 25, 60, (LayerSpec(20, K=9),))
    layer = complexity_report(desc, (3, 300, 25)).layers[0]
    assert layer.spatial_params == 180
    assert layer.temporal_params == 3600
    assert layer.residual_params == 60
    assert layer.attention_params == 1875
    assert layer.bn_params == 2 * 20 * 3


def test_canonical_descriptors():
    assert BASELINE.widths == (64, 64, 64, 64, 128, 128, 128, 256, 256, 256)
    assert NTU_CV.widths == (100, 80, 100, 40, 60, 80, 60, 80)
    assert [s.stride for s in BASELINE.layers] == [1, 1, 1, 1, 2, 1, 1, 2, 1, 1]


@pytest.mark.parametrize("name", ["stgcn-baseline", "pstgcn-ntu-cv"])
def test_reported_parameter_counts(name):
    params = count_params(DESCRIPTOR_PRESETS[name])
    assert abs(params / 1e6 - REPORTED_PARAMS[name]) <= 0.10 * REPORTED_PARAMS[name]


@pytest.mark.parametrize("name", ["stgcn-baseline", "pstgcn-ntu-cv"])
def test_reported_flop_counts(name):
    desc = DESCRIPTOR_PRESETS[name]
    flops = count_flops(desc, (3, 300, 25), mac=2)
    assert abs(flops / 1e9 - REPORTED_GFLOPS[name]) <= 0.20 * REPORTED_GFLOPS[name]


def test_ntu_cs_counts_in_range():
    desc = DESCRIPTOR_PRESETS["pstgcn-ntu-cs"]
    rep = complexity_report(desc, (3, 300, 25))
    assert abs(rep.params / 1e6 - REPORTED_PARAMS["pstgcn-ntu-cs"]) <= 0.10 * REPORTED_PARAMS["pstgcn-ntu-cs"]
    assert abs(rep.flops / 1e9 - REPORTED_GFLOPS["pstgcn-ntu-cs"]) <= 0.20 * REPORTED_GFLOPS["pstgcn-ntu-cs"]


def test_kinetics_params_in_range():
    # Only parameters: the reported FLOPs for this topology imply a shorter
    # input or more downsampling than T=300 with our stride schedule.
    desc = DESCRIPTOR_PRESETS["pstgcn-kinetics"]
    assert desc.num_joints == 18 and desc.num_classes == 400
    params = count_params(desc)
    assert abs(params / 1e6 - REPORTED_PARAMS["pstgcn-kinetics"]) <= 0.10 * REPORTED_PARAMS["pstgcn-kinetics"]


def test_two_stream_exactly_double():
    for desc in (BASELINE, NTU_CV):
        one = complexity_report(desc, (3, 300, 25))
        two = complexity_report(desc, (3, 300, 25), streams=2)
        assert two.params == 2 * one.params and two.flops == 2 * one.flops


def test_frozen_totals():
    # regression values of this counting convention
    assert complexity_report(BASELINE, (3, 300, 25)).summary() == "params=3093136 flops=17095710720"
    assert complexity_report(NTU_CV, (3, 300, 25)).summary() == "params=604010 flops=6781509600"


def test_totals_are_sum_of_parts():
    rep = complexity_report(NTU_CV, (3, 300, 25), exhaustive=True)
    d = rep.to_dict()
    assert d["totals"]["params"] == sum(l["params"] for l in d["layers"]) + d["head_params"] + d["input_bn_params"]
    assert d["totals"]["flops"] == sum(l["flops"] for l in d["layers"]) + d["head_flops"] + d["input_flops"]
    assert all(v >= 0 for l in d["layers"] for v in l.values() if isinstance(v, int))
    json.loads(rep.dumps())


@pytest.mark.parametrize("widths, strides", [((), ()), ((4,), (1,)), ((4, 4, 6), (1, 2, 1)), ((20, 40, 40, 60), None)])
def test_params_match_live_model(widths, strides):
    topo = load_topology("toy11")
    desc = from_widths(widths, 3, 11, 5, strides=strides)
    model = build_model(desc, topo, 0)
    assert count_params(model) == model.num_parameters() == count_params(desc)


def test_zero_layer_flops_are_head_only():
    desc = Descriptor(3, 25, 60, ())
    assert count_flops(desc, (3, 300, 25), mac=1) == 3 * 60
    assert count_flops(desc, (3, 300, 25), mac=2) == 2 * 3 * 60


def test_flops_linear_in_time_without_stride():
    desc = from_widths((8, 8, 16), 3, 25, 10, strides=(1, 1, 1))
    f1 = count_flops(desc, (3, 50, 25))
    head = 2 * 16 * 10
    f2 = count_flops(desc, (3, 100, 25))
    assert f2 - head == 2 * (f1 - head)


def test_mac_convention_and_exhaustive():
    one = count_flops(NTU_CV, (3, 300, 25), mac=1)
    two = count_flops(NTU_CV, (3, 300, 25), mac=2)
    assert two == 2 * one
    assert count_flops(NTU_CV, (3, 300, 25), exhaustive=True) > two
    with pytest.raises(ValueError):
        count_flops(NTU_CV, (3, 300, 25), mac=3)
    with pytest.raises(ValueError, match="does not match"):
        count_flops(NTU_CV, (3, 300, 18))


def test_flops_match_executed_shapes(monkeypatch):
    """Count MACs from the tensors the kernels actually process (N = 1)."""
    macs = []
    real_conv, real_mix = net.kernels.conv_forward, net.kernels.mix_forward

    def conv(x, w, stride=1, pad=0):
        out = real_conv(x, w, stride, pad)
        macs.append(out[0].size * w[0].size)  # per output value: C * Kt * Kv
        return out

    def mix(z, G):
        out = real_mix(z, G)
        N, P, O, T, V = z.shape
        macs.append(P * O * T * V * V)  # graph mixing
        macs.append(P * O * T * V * z_in[0])  # the 1x1 channel mix feeding it
        return out

    z_in = [0]
    real_graph = net.graph_conv_forward

    def graph(x, layer, adj):
        z_in[0] = x.shape[1]
        return real_graph(x, layer, adj)

    monkeypatch.setattr(net.kernels, "conv_forward", conv)
    monkeypatch.setattr(net.kernels, "mix_forward", mix)
    monkeypatch.setattr(net, "graph_conv_forward", graph)
    topo = load_topology("toy11")
    desc = from_widths((6, 6, 8, 8, 10), 3, 11, 4)  # stride 2 at layer 4
    model = build_model(desc, topo, 0)
    model_forward(np.zeros((1, 3, 13, 11)), model)
    executed = sum(macs) + 10 * 4  # plus the head
    assert count_flops(desc, (3, 13, 11), mac=1) == executed


def test_counting_is_fast():
    t0 = time.perf_counter()
    for name in ("stgcn-baseline", "pstgcn-ntu-cv"):
        complexity_report(load_descriptor(name), (3, 300, 25))
    assert time.perf_counter() - t0 < 1.0


def test_retained_projection_is_counted():
    topo = load_topology("toy11")
    plain = Descriptor(3, 11, 4, (LayerSpec(6, K=3), LayerSpec(6, K=3)))
    kept = Descriptor(3, 11, 4, (LayerSpec(6, K=3), LayerSpec(6, K=3, projection=True)))
    assert count_params(kept) - count_params(plain) == 6 * 6 + 2 * 6
    assert count_params(build_model(kept, topo, 0)) == count_params(kept)
