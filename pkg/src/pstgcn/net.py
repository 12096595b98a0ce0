"""Spatio-temporal graph convolution layers and the full classifier."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .descriptor import Descriptor, LayerSpec
from .graph import PartitionedAdjacency, SkeletonTopology, build_partitions
from .tensor import (
    BatchNormState,
    Parameter,
    affine_backward,
    affine_forward,
    batchnorm2d_backward,
    batchnorm2d_forward,
    conv2d_backward,
    conv2d_forward,
    global_avg_pool_backward,
    global_avg_pool_forward,
    relu_backward,
    relu_forward,
    softmax,
)
from . import kernels

NUM_PARTITIONS = 3


def glorot_uniform(rng: np.random.Generator, shape, fan_in: int, fan_out: int, dtype=np.float64):
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def conv_init(rng, c_out, c_in, kt=1, kv=1, dtype=np.float64):
    return glorot_uniform(rng, (c_out, c_in, kt, kv), c_in * kt * kv, c_out * kt * kv, dtype)


def attention_init(mode: str, V: int, dtype=np.float64) -> np.ndarray:
    # additive starts from the plain skeleton graph, elementwise from an all-ones mask
    return np.zeros((V, V), dtype) if mode == "additive" else np.ones((V, V), dtype)


@dataclass(eq=False)
class STGCNLayer:
    spatial_weights: list  # NUM_PARTITIONS Parameters, C_out x C_in x 1 x 1
    attention: list  # NUM_PARTITIONS Parameters, V x V
    attention_mode: str
    temporal_kernel: Parameter  # C_out x C_out x K x 1
    bn_spatial: BatchNormState
    bn_temporal: BatchNormState
    residual_proj: Parameter | None = None  # C_out x C_in x 1 x 1
    bn_residual: BatchNormState | None = None
    stride: int = 1

    def __post_init__(self):
        shapes = {w.shape for w in self.spatial_weights}
        if len(self.spatial_weights) != NUM_PARTITIONS or len(shapes) != 1:
            raise ValueError(f"need {NUM_PARTITIONS} spatial weights of one shape, got {shapes}")
        if self.K % 2 == 0:
            raise ValueError(f"temporal kernel size must be odd, got {self.K}")
        if self.needs_projection and self.residual_proj is None:
            raise ValueError(
                f"residual projection required when C_in != C_out or stride != 1 "
                f"(C_in={self.in_channels}, C_out={self.out_channels}, stride={self.stride})"
            )
        if (self.residual_proj is None) != (self.bn_residual is None):
            raise ValueError("residual projection and its batch norm must come together")

    @property
    def in_channels(self) -> int:
        return self.spatial_weights[0].shape[1]

    @property
    def out_channels(self) -> int:
        return self.spatial_weights[0].shape[0]

    @property
    def K(self) -> int:
        return self.temporal_kernel.shape[2]

    @property
    def needs_projection(self) -> bool:
        return self.in_channels != self.out_channels or self.stride != 1

    @property
    def spec(self) -> LayerSpec:
        extra = self.residual_proj is not None and not self.needs_projection
        return LayerSpec(self.out_channels, self.K, self.stride, self.attention_mode, extra)

    @classmethod
    def create(cls, c_in, c_out, V, rng, K=9, stride=1, attention_mode="additive", dtype=np.float64,
               projection=False):
        proj = bn_res = None
        if projection or c_in != c_out or stride != 1:
            proj = Parameter(conv_init(rng, c_out, c_in, dtype=dtype))
            bn_res = BatchNormState.create(c_out, dtype)
        return cls(
            spatial_weights=[Parameter(conv_init(rng, c_out, c_in, dtype=dtype)) for _ in range(NUM_PARTITIONS)],
            attention=[Parameter(attention_init(attention_mode, V, dtype)) for _ in range(NUM_PARTITIONS)],
            attention_mode=attention_mode,
            temporal_kernel=Parameter(conv_init(rng, c_out, c_out, K, 1, dtype)),
            bn_spatial=BatchNormState.create(c_out, dtype),
            bn_temporal=BatchNormState.create(c_out, dtype),
            residual_proj=proj,
            bn_residual=bn_res,
            stride=stride,
        )

    def named_parameters(self, prefix=""):
        for p, w in enumerate(self.spatial_weights):
            yield f"{prefix}spatial.{p}", w
        for p, m in enumerate(self.attention):
            yield f"{prefix}attention.{p}", m
        yield f"{prefix}temporal", self.temporal_kernel
        yield from _bn_params(self.bn_spatial, f"{prefix}bn_spatial")
        yield from _bn_params(self.bn_temporal, f"{prefix}bn_temporal")
        if self.residual_proj is not None:
            yield f"{prefix}residual", self.residual_proj
            yield from _bn_params(self.bn_residual, f"{prefix}bn_residual")

    def batchnorms(self, prefix=""):
        yield f"{prefix}bn_spatial", self.bn_spatial
        yield f"{prefix}bn_temporal", self.bn_temporal
        if self.bn_residual is not None:
            yield f"{prefix}bn_residual", self.bn_residual


def _bn_params(bn: BatchNormState, prefix: str):
    yield f"{prefix}.gamma", bn.gamma
    yield f"{prefix}.beta", bn.beta


# ------------------------------------------------------------------ spatial graph convolution


def graph_matrices(layer: STGCNLayer, adj: PartitionedAdjacency, dtype) -> np.ndarray:
    """Per-partition mixing matrices: ``A + M`` (additive) or ``A * M`` (elementwise)."""
    A = adj.normalized.astype(dtype, copy=False)
    M = np.stack([m.value for m in layer.attention])
    if layer.attention_mode == "additive":
        return A + M
    if layer.attention_mode == "elementwise":
        return A * M
    raise ValueError(f"unknown attention mode {layer.attention_mode!r}")


def graph_conv_forward(x: np.ndarray, layer: STGCNLayer, adj: PartitionedAdjacency):
    """``sum_p G_p`` applied over joints to the 1x1 channel mix ``W_p x``."""
    N, C, T, V = x.shape
    if V != adj.num_joints or layer.attention[0].shape != (V, V):
        raise ValueError(f"input has {V} joints, adjacency/attention have {adj.num_joints}")
    if C != layer.in_channels:
        raise ValueError(f"input has {C} channels, layer expects {layer.in_channels}")
    O = layer.out_channels
    G = graph_matrices(layer, adj, x.dtype)
    W = np.concatenate([w.value.reshape(O, C) for w in layer.spatial_weights])  # 3O x C
    xt = x.transpose(1, 0, 2, 3).reshape(C, N * T * V)
    z = (W @ xt).reshape(NUM_PARTITIONS, O, N, T, V).transpose(2, 0, 1, 3, 4)
    z = np.ascontiguousarray(z)
    out = kernels.mix_forward(z, G)
    return out, (xt, z, G, W, x.shape, layer, adj)


def graph_conv_backward(dout: np.ndarray, cache):
    xt, z, G, W, shape, layer, adj = cache
    N, C, T, V = shape
    O = layer.out_channels
    dz, dG = kernels.mix_backward(np.ascontiguousarray(dout), z, G)
    dz2 = dz.transpose(1, 2, 0, 3, 4).reshape(NUM_PARTITIONS * O, N * T * V)
    dW = dz2 @ xt.T
    for p, w in enumerate(layer.spatial_weights):
        if w.trainable:
            w.grad += dW[p * O : (p + 1) * O].reshape(w.shape)
    for p, m in enumerate(layer.attention):
        if m.trainable:
            if layer.attention_mode == "additive":
                m.grad += dG[p]
            else:
                m.grad += dG[p] * adj.normalized[p]
    dxt = W.T @ dz2
    return np.ascontiguousarray(dxt.reshape(C, N, T, V).transpose(1, 0, 2, 3))


def spatial_conv_forward(x, layer: STGCNLayer, adj: PartitionedAdjacency, training: bool, bypass_bn=False):
    """Graph convolution, batch norm over the partition sum, then ReLU."""
    g, c_graph = graph_conv_forward(x, layer, adj)
    c_bn = None
    if not bypass_bn:
        g, c_bn = batchnorm2d_forward(g, layer.bn_spatial, training)
    out, mask = relu_forward(g)
    return out, (c_graph, c_bn, mask)


def spatial_conv_backward(dout, cache):
    c_graph, c_bn, mask = cache
    d = relu_backward(dout, mask)
    if c_bn is not None:
        d = batchnorm2d_backward(d, c_bn)
    return graph_conv_backward(d, c_graph)


# ------------------------------------------------------------------ full layer


def layer_forward(x, layer: STGCNLayer, adj: PartitionedAdjacency, training: bool):
    """``ReLU(BN(temporal(spatial(x))) + residual(x))``; time shrinks to ceil(T / stride)."""
    s, c_sp = spatial_conv_forward(x, layer, adj, training)
    t, c_tc = conv2d_forward(s, layer.temporal_kernel, layer.stride, (layer.K - 1) // 2)
    t, c_tbn = batchnorm2d_forward(t, layer.bn_temporal, training)
    c_res = c_rbn = None
    if layer.residual_proj is not None:
        r, c_res = conv2d_forward(x, layer.residual_proj, layer.stride, 0)
        r, c_rbn = batchnorm2d_forward(r, layer.bn_residual, training)
    else:
        r = x
    y, mask = relu_forward(t + r)
    return y, (c_sp, c_tc, c_tbn, c_res, c_rbn, mask)


def layer_backward(dy, cache):
    c_sp, c_tc, c_tbn, c_res, c_rbn, mask = cache
    d = relu_backward(dy, mask)
    dt = batchnorm2d_backward(d, c_tbn)
    dt = conv2d_backward(dt, c_tc)
    dx = spatial_conv_backward(dt, c_sp)
    if c_res is not None:
        dr = batchnorm2d_backward(d, c_rbn)
        dx = dx + conv2d_backward(dr, c_res)
    else:
        dx = dx + d
    return dx


# ------------------------------------------------------------------ model


@dataclass(eq=False)
class STGCNModel:
    topology: SkeletonTopology
    in_channels: int
    n_class: int
    layers: list = field(default_factory=list)
    head_weight: Parameter = None
    head_bias: Parameter = None
    input_bn: BatchNormState | None = None
    dtype: type = np.float64
    adjacency: PartitionedAdjacency = None

    def __post_init__(self):
        if self.adjacency is None:
            self.adjacency = build_partitions(self.topology)
        self.dtype = np.dtype(self.dtype).type
        self.check_chaining()

    @property
    def num_joints(self) -> int:
        return self.topology.joint_count

    @property
    def feature_channels(self) -> int:
        return self.layers[-1].out_channels if self.layers else self.in_channels

    def check_chaining(self):
        c = self.in_channels
        for i, layer in enumerate(self.layers):
            if layer.in_channels != c:
                raise ValueError(f"layer {i} expects {layer.in_channels} input channels, previous gives {c}")
            c = layer.out_channels
        if self.head_weight is not None and self.head_weight.shape != (self.n_class, c):
            raise ValueError(f"head weight {self.head_weight.shape} does not match ({self.n_class}, {c})")

    def descriptor(self) -> Descriptor:
        return Descriptor(
            in_channels=self.in_channels,
            num_joints=self.num_joints,
            num_classes=self.n_class,
            layers=tuple(layer.spec for layer in self.layers),
            input_bn=self.input_bn is not None,
        )

    def named_parameters(self):
        if self.input_bn is not None:
            yield from _bn_params(self.input_bn, "input_bn")
        for i, layer in enumerate(self.layers):
            yield from layer.named_parameters(f"layers.{i}.")
        yield "head.weight", self.head_weight
        yield "head.bias", self.head_bias

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def batchnorms(self):
        if self.input_bn is not None:
            yield "input_bn", self.input_bn
        for i, layer in enumerate(self.layers):
            yield from layer.batchnorms(f"layers.{i}.")

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def state_dict(self) -> dict:
        """Copies of every parameter and running statistic, keyed by name."""
        state = {name: p.value.copy() for name, p in self.named_parameters()}
        for name, bn in self.batchnorms():
            state[f"{name}.running_mean"] = bn.running_mean.copy()
            state[f"{name}.running_var"] = bn.running_var.copy()
        return state

    def load_state_dict(self, state: dict):
        expected = set(self.state_dict())
        if set(state) != expected:
            missing = sorted(expected - set(state))
            extra = sorted(set(state) - expected)
            raise ValueError(f"state mismatch: missing {missing[:5]}, unexpected {extra[:5]}")
        for name, p in self.named_parameters():
            _assign(p.value, state[name], name)
        for name, bn in self.batchnorms():
            _assign(bn.running_mean, state[f"{name}.running_mean"], name)
            _assign(bn.running_var, state[f"{name}.running_var"], name)

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()


def _assign(dst, src, name):
    if dst.shape != src.shape:
        raise ValueError(f"{name}: shape {src.shape} does not match model {dst.shape}")
    dst[...] = src


def new_head(n_class, channels, rng, dtype=np.float64):
    w = Parameter(glorot_uniform(rng, (n_class, channels), channels, n_class, dtype))
    b = Parameter(np.zeros(n_class, dtype=dtype))
    return w, b


def build_model(desc: Descriptor, topology: SkeletonTopology, rng=None, dtype=np.float64) -> STGCNModel:
    """Fresh randomly initialised model for an architecture descriptor."""
    if desc.num_joints != topology.joint_count:
        raise ValueError(f"descriptor has {desc.num_joints} joints, topology {topology.joint_count}")
    rng = np.random.default_rng(rng)
    V = topology.joint_count
    layers, c = [], desc.in_channels
    for spec in desc.layers:
        layers.append(STGCNLayer.create(c, spec.channels, V, rng, spec.K, spec.stride, spec.attention_mode,
                                        dtype, spec.projection))
        c = spec.channels
    w, b = new_head(desc.num_classes, c, rng, dtype)
    input_bn = BatchNormState.create(desc.in_channels * V, dtype) if desc.input_bn else None
    return STGCNModel(topology, desc.in_channels, desc.num_classes, layers, w, b, input_bn, dtype)


def _input_bn_forward(x, bn, training):
    N, C, T, V = x.shape
    flat = x.transpose(0, 3, 1, 2).reshape(N, V * C, T, 1)
    y, cache = batchnorm2d_forward(flat, bn, training)
    return np.ascontiguousarray(y.reshape(N, V, C, T).transpose(0, 2, 3, 1)), cache


def _input_bn_backward(dy, cache):
    N, C, T, V = dy.shape
    flat = dy.transpose(0, 3, 1, 2).reshape(N, V * C, T, 1)
    dx = batchnorm2d_backward(flat, cache)
    return np.ascontiguousarray(dx.reshape(N, V, C, T).transpose(0, 2, 3, 1))


def model_forward(x: np.ndarray, model: STGCNModel, training: bool = False):
    """Logits for an N x C x T x V batch, plus the cache for :func:`model_backward`."""
    if x.ndim != 4 or x.shape[1] != model.in_channels or x.shape[3] != model.num_joints:
        raise ValueError(
            f"input shape {x.shape} does not conform to model "
            f"(C={model.in_channels}, V={model.num_joints}, topology {model.topology.name!r})"
        )
    h = np.asarray(x, dtype=model.dtype)
    c_in = None
    if model.input_bn is not None:
        h, c_in = _input_bn_forward(h, model.input_bn, training)
    layer_caches = []
    for layer in model.layers:
        h, c = layer_forward(h, layer, model.adjacency, training)
        layer_caches.append(c)
    pooled, c_gap = global_avg_pool_forward(h)
    logits, c_head = affine_forward(pooled, model.head_weight, model.head_bias)
    return logits, (c_in, layer_caches, c_gap, c_head)


def model_backward(dlogits: np.ndarray, cache) -> np.ndarray:
    c_in, layer_caches, c_gap, c_head = cache
    d = affine_backward(dlogits, c_head)
    d = global_avg_pool_backward(d, c_gap)
    for c in reversed(layer_caches):
        d = layer_backward(d, c)
    if c_in is not None:
        d = _input_bn_backward(d, c_in)
    return d


def predict_scores(x: np.ndarray, model: STGCNModel, batch_size: int = 256) -> np.ndarray:
    """Eval-mode softmax scores, one row per sample."""
    out = []
    for start in range(0, len(x), batch_size):
        logits, _ = model_forward(x[start : start + batch_size], model, training=False)
        out.append(softmax(logits.astype(np.float64)))
    if not out:
        return np.zeros((0, model.n_class))
    return np.concatenate(out)
