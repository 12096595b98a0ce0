"""Mini-batch training, evaluation and score fusion."""
from __future__ import annotations

import copy
import logging
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from .checkpoint import read_records, write_records
from .descriptor import Descriptor
from .graph import SkeletonTopology
from .net import STGCNModel, build_model, model_backward, model_forward, predict_scores
from .optim import SGD, step_lr
from .tensor import softmax_cross_entropy

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


def train_epoch(model: STGCNModel, x, y, opt: SGD, batch_size: int, rng: np.random.Generator) -> float:
    """One shuffled pass; returns the sample-weighted mean loss."""
    order = rng.permutation(len(y))
    total = 0.0
    for start in range(0, len(order), batch_size):
        idx = order[start : start + batch_size]
        loss = train_step(model, x[idx], y[idx], opt)
        total += loss * len(idx)
    return total / max(len(order), 1)


def train_step(model: STGCNModel, xb, yb, opt: SGD) -> float:
    logits, cache = model_forward(xb, model, training=True)
    loss, dlogits = softmax_cross_entropy(logits.astype(np.float64), yb)
    if not np.isfinite(loss):
        raise TrainingDiverged(f"non-finite training loss {loss}")
    model_backward(dlogits.astype(model.dtype), cache)
    opt.step()
    return loss


def count_correct(model: STGCNModel, x, y, batch_size: int = 256) -> tuple[int, int]:
    if len(y) == 0:
        return 0, 0
    pred = predict_scores(x, model, batch_size).argmax(axis=1)
    return int((pred == y).sum()), len(y)


def accuracy(model: STGCNModel, x, y) -> Fraction:
    correct, total = count_correct(model, x, y)
    return Fraction(correct, total) if total else Fraction(0)


@dataclass
class TrainConfig:
    epochs: int = 50
    base_lr: float = 0.1
    milestones: tuple = (30, 40)
    momentum: float = 0.9
    weight_decay: float = 1e-4
    batch_size: int = 64
    seed: int = 0

    def __post_init__(self):
        self.milestones = tuple(int(m) for m in self.milestones)
        if any(b <= a for a, b in zip(self.milestones, self.milestones[1:])):
            raise ValueError(f"milestones must be strictly increasing, got {self.milestones}")


@dataclass
class TrainLog:
    epochs: list = field(default_factory=list)
    best_epoch: int | None = None
    best_val_accuracy: float | None = None
    aborted: bool = False
    best_state: dict | None = None


def train_final(model: STGCNModel, dataset, cfg: TrainConfig, train_tags=("train",),
                checkpoint_path=None) -> tuple[STGCNModel, TrainLog]:
    """Milestone-schedule training; tracks the best-by-validation state.

    On a non-finite loss the model is restored to the end of the last
    completed epoch and training stops.
    """
    x_tr, y_tr = dataset.subset(*train_tags)
    x_val, y_val = dataset.subset("val") if "val" not in train_tags else (x_tr[:0], y_tr[:0])
    x_te, y_te = dataset.subset("test")
    rng = np.random.default_rng(cfg.seed)
    opt = SGD(model.named_parameters(), cfg.base_lr, cfg.momentum, cfg.weight_decay)
    result = TrainLog()
    last_good = model.state_dict()
    for epoch in range(cfg.epochs):
        opt.lr = step_lr(epoch, cfg.base_lr, cfg.milestones)
        try:
            loss = train_epoch(model, x_tr, y_tr, opt, cfg.batch_size, rng)
        except TrainingDiverged as exc:
            log.warning("epoch %d: %s; restoring last good state", epoch, exc)
            model.load_state_dict(last_good)
            result.aborted = True
            break
        last_good = model.state_dict()
        entry = {"epoch": epoch, "lr": opt.lr, "train_loss": loss}
        if len(y_val):
            entry["val_accuracy"] = float(accuracy(model, x_val, y_val))
            if result.best_val_accuracy is None or entry["val_accuracy"] > result.best_val_accuracy:
                result.best_val_accuracy = entry["val_accuracy"]
                result.best_epoch = epoch
                result.best_state = last_good
                if checkpoint_path is not None:
                    save_model(checkpoint_path, model, opt)
        if len(y_te):
            entry["test_accuracy"] = float(accuracy(model, x_te, y_te))
        result.epochs.append(entry)
        log.info("epoch %d lr %.4g loss %.4f %s", epoch, opt.lr, loss,
                 " ".join(f"{k}={v:.4f}" for k, v in entry.items() if k.endswith("accuracy")))
    if checkpoint_path is not None and result.best_state is None:
        save_model(checkpoint_path, model, opt)
    return model, result


def fit_batch(model: STGCNModel, xb, yb, steps: int, lr=0.1, momentum=0.9, weight_decay=1e-4) -> list:
    """Repeated steps on one fixed batch; returns the loss trace."""
    opt = SGD(model.named_parameters(), lr, momentum, weight_decay)
    return [train_step(model, xb, yb, opt) for _ in range(steps)]


def two_stream_fuse(scores_joint: np.ndarray, scores_bone: np.ndarray, alpha=(1.0, 1.0)) -> np.ndarray:
    """Argmax of the weighted score sum; ties resolve to the lower class index."""
    scores_joint = np.asarray(scores_joint)
    scores_bone = np.asarray(scores_bone)
    if scores_joint.shape != scores_bone.shape or scores_joint.ndim != 2:
        raise ValueError(f"score shapes {scores_joint.shape} and {scores_bone.shape} differ")
    a_j, a_b = (alpha, alpha) if np.isscalar(alpha) else alpha
    return np.argmax(a_j * scores_joint + a_b * scores_bone, axis=1)


# ------------------------------------------------------------------ checkpoints


def save_model(path, model: STGCNModel, opt: SGD | None = None, extra: dict | None = None):
    arrays = model.state_dict()
    if opt is not None:
        arrays.update({f"velocity/{k}": v for k, v in opt.velocity.items()})
    meta = {
        "descriptor": model.descriptor().to_dict(),
        "topology": model.topology.to_dict(),
        "dtype": np.dtype(model.dtype).name,
    }
    if extra:
        meta.update(extra)
    write_records(path, arrays, meta)


def load_model(path) -> tuple[STGCNModel, dict]:
    """Rebuild a model from a checkpoint; returns it with the saved velocities."""
    arrays, meta = read_records(path)
    if meta is None:
        raise ValueError(f"{path}: checkpoint has no architecture metadata")
    desc = Descriptor.from_dict(meta["descriptor"])
    topology = SkeletonTopology.from_dict(meta["topology"])
    model = build_model(desc, topology, 0, np.dtype(meta.get("dtype", "float64")).type)
    velocity = {k[len("velocity/"):]: v for k, v in arrays.items() if k.startswith("velocity/")}
    model.load_state_dict({k: v for k, v in arrays.items() if not k.startswith("velocity/")})
    return model, velocity


def clone(model: STGCNModel) -> STGCNModel:
    return copy.deepcopy(model)
