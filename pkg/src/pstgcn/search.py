"""Progressive growth of an ST-GCN in width and depth.

The frontier layer is widened ``S`` channels at a time while the relative
validation-accuracy gain stays at or above ``eps_w``; a new layer is kept
only when it lifts accuracy by a relative ``eps_d``. Accuracy ratios are
compared in exact rational arithmetic.
"""
from __future__ import annotations

import copy
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from fractions import Fraction

import numpy as np

from .data import Dataset, check_disjoint
from .descriptor import Descriptor, default_stride
from .net import STGCNLayer, STGCNModel, build_model, conv_init, new_head
from .optim import SGD
from .tensor import BatchNormState, Parameter
from .training import TrainConfig, TrainingDiverged, count_correct, train_epoch, train_final

log = logging.getLogger(__name__)


class GrowthCapReached(ValueError):
    pass


@dataclass
class SearchConfig:
    S: int = 20
    eps_w: float = 1e-4
    eps_d: float = 1e-4
    epochs_per_iteration: int = 5
    lr_growth: float = 0.05
    max_layers: int = 12
    max_width_steps: int = 16
    finetune_epochs: int = 10
    finetune_lr: float = 0.1
    finetune_milestones: tuple | None = None
    batch_size: int = 64
    momentum: float = 0.9
    weight_decay: float = 1e-4
    K: int = 9
    attention_mode: str = "additive"
    stride_start: int = 4
    stride_every: int = 3
    eval_repeats: int = 1
    preserve: bool = True
    input_bn: bool = True
    dtype: str = "float64"
    seed: int = 0

    def __post_init__(self):
        if self.eps_w <= 0 or self.eps_d <= 0:
            raise ValueError("eps_w and eps_d must be positive")
        if self.S < 1 or self.max_layers < 1 or self.max_width_steps < 1:
            raise ValueError("S and the growth caps must be at least 1")
        if self.eval_repeats < 1:
            raise ValueError("eval_repeats must be at least 1")
        if self.finetune_milestones is not None:
            self.finetune_milestones = tuple(int(m) for m in self.finetune_milestones)
            if any(b <= a for a, b in zip(self.finetune_milestones, self.finetune_milestones[1:])):
                raise ValueError("finetune_milestones must be strictly increasing")

    def final_schedule(self) -> tuple:
        # 50-epoch schedule with drops at 30 and 40, scaled to finetune_epochs
        if self.finetune_milestones is not None:
            return self.finetune_milestones
        return tuple(sorted({round(self.finetune_epochs * 0.6), round(self.finetune_epochs * 0.8)}))

    def stride_for(self, index: int) -> int:
        return default_stride(index, self.stride_start, self.stride_every)


def _exact(value) -> Fraction:
    return value if isinstance(value, Fraction) else Fraction(str(value))


def improvement_rate(acc_new, acc_old):
    """Relative gain ``(new - old) / old``.

    Fractions in, Fraction out. A zero baseline gives ``inf`` when the new
    accuracy is positive and 0 otherwise.
    """
    new, old = _exact(acc_new), _exact(acc_old)
    if old == 0:
        return math.inf if new > 0 else Fraction(0)
    return (new - old) / old


def accepts(alpha, eps) -> bool:
    return alpha == math.inf or alpha >= _exact(eps)


# ------------------------------------------------------------------ reporting


@dataclass
class IterationRecord:
    layer: int
    t: int
    width: int
    train_loss: float | None
    val_correct: int
    val_total: int
    alpha: str | None  # exact ratio as "p/q", "inf", or None for t = 1
    decision: str
    seconds: float

    @property
    def val_accuracy(self) -> float:
        return self.val_correct / self.val_total if self.val_total else 0.0


@dataclass
class LayerRecord:
    layer: int
    width: int
    accuracy: str
    alpha_d: str
    decision: str
    width_stop: str


@dataclass
class GrowthReport:
    iterations: list = field(default_factory=list)
    layers: list = field(default_factory=list)
    stop_reason: str | None = None
    diverged: bool = False
    final_widths: tuple = ()
    final_val_accuracy: str | None = None
    finetune: list = field(default_factory=list)

    @property
    def accepted_widths(self) -> tuple:
        return tuple(rec.width for rec in self.layers if rec.decision == "accept")

    def to_dict(self, timings=True) -> dict:
        iters = []
        for rec in self.iterations:
            d = asdict(rec)
            d["val_accuracy"] = rec.val_accuracy
            if not timings:
                d.pop("seconds")
            iters.append(d)
        return {
            "iterations": iters,
            "layers": [asdict(r) for r in self.layers],
            "stop_reason": self.stop_reason,
            "diverged": self.diverged,
            "final_widths": list(self.final_widths),
            "final_val_accuracy": self.final_val_accuracy,
            "finetune": self.finetune,
        }

    def dumps(self, timings=True) -> str:
        return json.dumps(self.to_dict(timings), indent=1)


def _fmt(value) -> str | None:
    if value is None:
        return None
    if value == math.inf:
        return "inf"
    return str(Fraction(value))


# ------------------------------------------------------------------ model surgery


def _grow_rows(old: np.ndarray, fresh: np.ndarray, zero_new: bool) -> np.ndarray:
    """``fresh`` with its leading block replaced by ``old`` along every axis."""
    out = np.zeros_like(fresh) if zero_new else fresh.copy()
    out[tuple(slice(0, n) for n in old.shape)] = old
    return out


def _grow_bn(bn: BatchNormState, extra: int, identity_new: bool) -> BatchNormState:
    grown = BatchNormState.create(bn.channels + extra, bn.gamma.value.dtype, bn.momentum, bn.eps)
    c = bn.channels
    grown.gamma.value[:c] = bn.gamma.value
    grown.beta.value[:c] = bn.beta.value
    grown.running_mean[:c] = bn.running_mean
    grown.running_var[:c] = bn.running_var
    if identity_new:
        grown.set_identity(slice(c, None))
    return grown


def widen_layer(model: STGCNModel, index: int, S: int, preserve: bool = True, rng=None,
                function_preserving: bool = False) -> STGCNModel:
    """Copy of ``model`` whose last layer has ``S`` more output channels.

    Learned filters, attention, batch-norm channels and head columns are
    copied; the added filters are drawn fresh, or zeroed (with identity
    batch norm on the new channels) when ``function_preserving`` is set,
    in which case eval-mode outputs are unchanged. ``preserve=False``
    re-initialises the whole layer and head instead.
    """
    if not model.layers or index not in (len(model.layers) - 1, -1):
        raise ValueError(f"only the last layer can be widened (got index {index} of {len(model.layers)})")
    rng = np.random.default_rng(rng)
    grown = copy.deepcopy(model)
    old: STGCNLayer = grown.layers[-1]
    c_in, c_out, V = old.in_channels, old.out_channels, model.num_joints
    width = c_out + S
    dtype = model.dtype

    if not preserve:
        grown.layers[-1] = STGCNLayer.create(c_in, width, V, rng, old.K, old.stride, old.attention_mode, dtype,
                                             projection=old.residual_proj is not None)
        grown.head_weight, grown.head_bias = new_head(model.n_class, width, rng, dtype)
        grown.check_chaining()
        return grown

    zero = function_preserving
    spatial = [
        Parameter(_grow_rows(w.value, conv_init(rng, width, c_in, dtype=dtype), zero))
        for w in old.spatial_weights
    ]
    temporal = Parameter(_grow_rows(old.temporal_kernel.value, conv_init(rng, width, width, old.K, 1, dtype), zero))
    if old.residual_proj is not None:
        proj = Parameter(_grow_rows(old.residual_proj.value, conv_init(rng, width, c_in, dtype=dtype), zero))
        bn_res = _grow_bn(old.bn_residual, S, zero)
    else:
        # the identity shortcut becomes a projection that starts as the identity
        eye = np.eye(c_out, c_in, dtype=dtype).reshape(c_out, c_in, 1, 1)
        proj = Parameter(_grow_rows(eye, conv_init(rng, width, c_in, dtype=dtype), zero))
        bn_res = BatchNormState.create(width, dtype, old.bn_spatial.momentum, old.bn_spatial.eps)
        bn_res.set_identity(slice(0, c_out))
        if zero:
            bn_res.set_identity(slice(c_out, None))
    grown.layers[-1] = STGCNLayer(
        spatial_weights=spatial,
        attention=[Parameter(m.value.copy()) for m in old.attention],
        attention_mode=old.attention_mode,
        temporal_kernel=temporal,
        bn_spatial=_grow_bn(old.bn_spatial, S, zero),
        bn_temporal=_grow_bn(old.bn_temporal, S, zero),
        residual_proj=proj,
        bn_residual=bn_res,
        stride=old.stride,
    )
    fresh_w, _ = new_head(model.n_class, width, rng, dtype)
    grown.head_weight = Parameter(_grow_rows(model.head_weight.value, fresh_w.value, zero))
    grown.head_bias = Parameter(model.head_bias.value.copy())
    grown.check_chaining()
    return grown


def add_layer(model: STGCNModel, S: int, cfg: SearchConfig, rng=None) -> STGCNModel:
    """Copy of ``model`` with a fresh width-``S`` layer and a fresh head on top."""
    if len(model.layers) >= cfg.max_layers:
        raise GrowthCapReached(f"model already has max_layers={cfg.max_layers} layers")
    rng = np.random.default_rng(rng)
    grown = copy.deepcopy(model)
    index = len(grown.layers) + 1
    grown.layers.append(STGCNLayer.create(
        grown.feature_channels, S, grown.num_joints, rng, cfg.K, cfg.stride_for(index),
        cfg.attention_mode, grown.dtype,
    ))
    grown.head_weight, grown.head_bias = new_head(grown.n_class, S, rng, grown.dtype)
    grown.check_chaining()
    return grown


def empty_model(topology, in_channels: int, n_class: int, cfg: SearchConfig, rng=None) -> STGCNModel:
    desc = Descriptor(in_channels, topology.joint_count, n_class, (), cfg.input_bn)
    return build_model(desc, topology, rng, np.dtype(cfg.dtype).type)


# ------------------------------------------------------------------ training hooks


class SearchData:
    """Train/validation arrays plus the fit and score steps the search calls."""

    def __init__(self, dataset: Dataset, cfg: SearchConfig, rng=None):
        if len(dataset) == 0:
            raise ValueError("dataset is empty")
        check_disjoint(dataset)
        self.dataset = dataset
        self.cfg = cfg
        self.x_train, self.y_train = dataset.subset("train")
        self.x_val, self.y_val = dataset.subset("val")
        if len(self.y_train) == 0 or len(self.y_val) == 0:
            raise ValueError("search needs non-empty train and val splits")
        if len(np.unique(self.y_train)) < 2:
            raise ValueError("training split holds a single class; nothing to search for")
        self.rng = np.random.default_rng(rng)
        self.n_class = dataset.n_class
        self.in_channels = dataset.shape[0]
        self.topology = dataset.topology

    def fit(self, model: STGCNModel, epochs: int) -> float:
        opt = SGD(model.named_parameters(), self.cfg.lr_growth, self.cfg.momentum, self.cfg.weight_decay)
        loss = float("nan")
        for _ in range(epochs):
            loss = train_epoch(model, self.x_train, self.y_train, opt, self.cfg.batch_size, self.rng)
        return loss

    def score(self, model: STGCNModel) -> tuple[int, int]:
        correct = total = 0
        for _ in range(self.cfg.eval_repeats):
            c, n = count_correct(model, self.x_val, self.y_val)
            correct, total = correct + c, total + n
        return correct, total


@dataclass
class SearchState:
    model: STGCNModel
    layer_index: int
    iteration: int
    accuracy: Fraction
    correct: tuple
    checkpoint: STGCNModel
    acc_history: list = field(default_factory=list)
    width_stop: str | None = None
    diverged: bool = False

    def accept(self, model, correct, total):
        self.model = model
        self.correct = (correct, total)
        self.accuracy = Fraction(correct, total)
        self.checkpoint = copy.deepcopy(model)

    def rollback(self):
        self.model = copy.deepcopy(self.checkpoint)


def _timed_fit(data, model, epochs):
    start = time.perf_counter()
    loss = data.fit(model, epochs)
    correct, total = data.score(model)
    return loss, correct, total, time.perf_counter() - start


def start_layer(model: STGCNModel, data, cfg: SearchConfig, report: GrowthReport, rng) -> SearchState | None:
    """Add a width-S layer, train and score it (iteration t = 1)."""
    grown = add_layer(model, cfg.S, cfg, rng)
    layer = len(grown.layers)
    try:
        loss, correct, total, secs = _timed_fit(data, grown, cfg.epochs_per_iteration)
    except TrainingDiverged as exc:
        log.warning("layer %d diverged at t=1: %s", layer, exc)
        report.diverged = True
        report.iterations.append(IterationRecord(layer, 1, cfg.S, None, 0, 0, None, "diverged", 0.0))
        return None
    acc = Fraction(correct, total)
    report.iterations.append(IterationRecord(layer, 1, cfg.S, loss, correct, total, None, "initial", secs))
    log.info("layer %d t=1 width %d val %.4f", layer, cfg.S, float(acc))
    return SearchState(grown, layer, 1, acc, (correct, total), copy.deepcopy(grown), [acc])


def grow_width(state: SearchState, data, cfg: SearchConfig, report: GrowthReport | None = None,
               rng=None) -> SearchState:
    """Widen the frontier layer until the relative gain drops below ``eps_w``."""
    report = GrowthReport() if report is None else report
    rng = np.random.default_rng(rng)
    while True:
        if state.iteration >= cfg.max_width_steps:
            state.width_stop = "cap_reached"
            return state
        t = state.iteration + 1
        candidate = widen_layer(state.model, -1, cfg.S, cfg.preserve, rng)
        width = candidate.layers[-1].out_channels
        try:
            loss, correct, total, secs = _timed_fit(data, candidate, cfg.epochs_per_iteration)
        except TrainingDiverged as exc:
            log.warning("layer %d t=%d diverged: %s", state.layer_index, t, exc)
            report.iterations.append(IterationRecord(state.layer_index, t, width, None, 0, 0, None, "diverged", 0.0))
            state.rollback()
            state.diverged = report.diverged = True
            state.width_stop = "diverged"
            return state
        acc = Fraction(correct, total)
        alpha = improvement_rate(acc, state.accuracy)
        state.acc_history.append(acc)
        state.iteration = t
        ok = accepts(alpha, cfg.eps_w)
        report.iterations.append(IterationRecord(
            state.layer_index, t, width, loss, correct, total, _fmt(alpha), "accept" if ok else "reject", secs
        ))
        log.info("layer %d t=%d width %d val %.4f alpha_w %.5f %s", state.layer_index, t, width,
                 float(acc), float(alpha), "accept" if ok else "reject")
        if not ok:
            state.rollback()
            state.width_stop = "width_converged"
            return state
        state.accept(candidate, correct, total)


def grow_depth(data, cfg: SearchConfig, report: GrowthReport, rng) -> tuple[STGCNModel, Fraction]:
    """Depth loop; returns the accepted model and its validation accuracy."""
    model = empty_model(data.topology, data.in_channels, data.n_class, cfg, rng)
    prev = Fraction(1, data.n_class)  # chance level stands in for the empty network
    report.final_val_accuracy = _fmt(prev)
    while True:
        if len(model.layers) >= cfg.max_layers:
            report.stop_reason = "cap_reached"
            break
        state = start_layer(model, data, cfg, report, rng)
        if state is None:
            report.stop_reason = "diverged"
            break
        state = grow_width(state, data, cfg, report, rng)
        alpha_d = improvement_rate(state.accuracy, prev)
        ok = accepts(alpha_d, cfg.eps_d)
        report.layers.append(LayerRecord(
            state.layer_index, state.model.layers[-1].out_channels, _fmt(state.accuracy), _fmt(alpha_d),
            "accept" if ok else "reject", state.width_stop,
        ))
        log.info("layer %d done: width %d val %.4f alpha_d %.5f %s", state.layer_index,
                 state.model.layers[-1].out_channels, float(state.accuracy), float(alpha_d),
                 "accept" if ok else "reject")
        if not ok:
            report.stop_reason = "depth_converged"
            break
        model, prev = state.model, state.accuracy
        report.final_val_accuracy = _fmt(prev)
    report.final_widths = tuple(layer.out_channels for layer in model.layers)
    return model, prev


def pst_gcn_search(dataset: Dataset, cfg: SearchConfig, data=None) -> tuple[STGCNModel, GrowthReport]:
    """Grow a network from scratch, then fine-tune it on train + val.

    ``data`` overrides the fit/score hooks (tests use scripted ones).
    """
    init_seq, data_seq, tune_seq = np.random.SeedSequence(cfg.seed).spawn(3)
    if data is None:
        if len(dataset) == 0:
            raise ValueError("dataset is empty")
        if len(np.unique(dataset.labels)) < 2:
            raise ValueError("dataset holds a single class; nothing to search for")
        data = SearchData(dataset, cfg, np.random.default_rng(data_seq))
    report = GrowthReport()
    model, _ = grow_depth(data, cfg, report, np.random.default_rng(init_seq))
    if cfg.finetune_epochs > 0 and dataset is not None and model.layers:
        tune = TrainConfig(
            epochs=cfg.finetune_epochs, base_lr=cfg.finetune_lr, milestones=cfg.final_schedule(),
            momentum=cfg.momentum, weight_decay=cfg.weight_decay, batch_size=cfg.batch_size,
            seed=int(tune_seq.generate_state(1)[0]),
        )
        model, tlog = train_final(model, dataset, tune, train_tags=("train", "val"))
        report.finetune = tlog.epochs
        if tlog.aborted:
            report.diverged = True
    return model, report
