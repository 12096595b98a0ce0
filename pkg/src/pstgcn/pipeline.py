"""End-to-end runs: search on joints, optional bone stream, score fusion, artifacts."""
from __future__ import annotations

import dataclasses
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .complexity import complexity_report
from .data import Dataset, load_dataset, stratified_split
from .descriptor import save_descriptor
from .graph import load_topology
from .net import predict_scores
from .search import SearchConfig, pst_gcn_search
from .training import TrainConfig, clone, save_model, train_final, two_stream_fuse

log = logging.getLogger(__name__)

STREAMS = ("joint", "bone", "two-stream")


@dataclass
class RunConfig:
    dataset: str = ""
    output_dir: str = "runs/latest"
    topology: str | None = None
    stream: str = "joint"
    val_fraction: float = 0.2
    bone_epochs: int = 30
    bone_lr: float = 0.1
    bone_milestones: tuple | None = None
    fusion_alpha: float = 1.0
    search: SearchConfig = field(default_factory=SearchConfig)

    def __post_init__(self):
        if isinstance(self.search, dict):
            self.search = SearchConfig(**self.search)
        if self.stream not in STREAMS:
            raise ValueError(f"stream must be one of {STREAMS}, got {self.stream!r}")
        if self.bone_milestones is not None:
            self.bone_milestones = tuple(int(m) for m in self.bone_milestones)
            if any(b <= a for a, b in zip(self.bone_milestones, self.bone_milestones[1:])):
                raise ValueError("bone_milestones must be strictly increasing")

    @property
    def seed(self) -> int:
        return self.search.seed

    def validate_paths(self):
        if not Path(self.dataset).exists():
            raise FileNotFoundError(f"dataset {self.dataset!r} does not exist")
        if self.topology and not Path(self.topology).exists():
            load_topology(self.topology)  # raises for unknown presets and missing files

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_file(cls, path) -> RunConfig:
        return cls(**json.loads(Path(path).read_text()))


def bone_schedule(cfg: RunConfig) -> tuple:
    if cfg.bone_milestones is not None:
        return cfg.bone_milestones
    return tuple(sorted({round(cfg.bone_epochs * 0.6), round(cfg.bone_epochs * 0.8)}))


def write_scores(path, ids, labels, scores) -> None:
    """CSV: sample id, label, predicted class, then one score column per class."""
    pred = scores.argmax(axis=1)
    header = "id,label,pred," + ",".join(f"score_{k}" for k in range(scores.shape[1]))
    rows = np.column_stack([ids, labels, pred, scores])
    fmt = ["%d", "%d", "%d"] + ["%.17g"] * scores.shape[1]
    np.savetxt(path, rows, fmt=fmt, delimiter=",", header=header, comments="")


def read_scores(path) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Inverse of :func:`write_scores`: (ids, labels, scores)."""
    arr = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return arr[:, 0].astype(np.int64), arr[:, 1].astype(np.int64), arr[:, 3:]


def write_predictions(path, ids, labels, pred) -> None:
    np.savetxt(path, np.column_stack([ids, labels, pred]), fmt="%d", delimiter=",",
               header="id,label,pred", comments="")


def _scored_split(dataset: Dataset) -> str:
    return "test" if dataset.mask("test").any() else "val"


def prepare_dataset(cfg: RunConfig) -> Dataset:
    dataset = load_dataset(cfg.dataset)
    if cfg.topology:
        topology = load_topology(cfg.topology)
        if topology.joint_count != dataset.topology.joint_count:
            raise ValueError(f"topology {cfg.topology!r} has {topology.joint_count} joints, "
                             f"dataset has {dataset.topology.joint_count}")
        dataset = Dataset(topology, dataset.x, dataset.labels, dataset.n_class, dataset.split, dataset.ids)
    if not dataset.mask("val").any():
        dataset = stratified_split(dataset, cfg.val_fraction, cfg.seed)
    dataset.check()
    return dataset


def run_pipeline(cfg: RunConfig) -> int:
    """Run the configured stream(s); returns a process exit status."""
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    try:
        cfg.validate_paths()
        (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=1, default=list))
        dataset = prepare_dataset(cfg)
        metrics = _run(cfg, dataset, out)
    except Exception as exc:  # any stage failure ends the run with artifacts kept
        log.error("pipeline failed: %s", exc, exc_info=True)
        (out / "error.txt").write_text(f"{type(exc).__name__}: {exc}\n")
        return 1
    (out / "metrics.json").write_text(json.dumps(metrics, indent=1))
    return 0


def _run(cfg: RunConfig, dataset: Dataset, out: Path) -> dict:
    primary = "bone" if cfg.stream == "bone" else "joint"
    search_data = dataset.to_bones() if primary == "bone" else dataset
    model, report = pst_gcn_search(search_data, cfg.search)
    (out / "growth_report.json").write_text(report.dumps())
    save_descriptor(model.descriptor(), out / "descriptor.json")
    streams = 2 if cfg.stream == "two-stream" else 1
    shape = (dataset.shape[0], dataset.shape[1], dataset.shape[2])
    (out / "complexity.json").write_text(complexity_report(model, shape, streams=streams).dumps())
    save_model(out / f"model_{primary}.pstg", model)

    split = _scored_split(dataset)
    m = dataset.mask(split)
    ids, labels = dataset.ids[m], dataset.labels[m]
    metrics = {"scored_split": split, "search": {
        "final_widths": list(report.final_widths),
        "final_val_accuracy": report.final_val_accuracy,
        "stop_reason": report.stop_reason,
    }}
    scores = predict_scores(search_data.x[m], model)
    write_scores(out / f"scores_{primary}.csv", ids, labels, scores)
    metrics[primary] = {"accuracy": float((scores.argmax(1) == labels).mean())}

    if cfg.stream == "two-stream":
        bones = dataset.to_bones()
        bone_model = clone(model)
        tune = TrainConfig(epochs=cfg.bone_epochs, base_lr=cfg.bone_lr, milestones=bone_schedule(cfg),
                           momentum=cfg.search.momentum, weight_decay=cfg.search.weight_decay,
                           batch_size=cfg.search.batch_size, seed=cfg.seed)
        bone_model, tlog = train_final(bone_model, bones, tune, train_tags=("train",))
        save_model(out / "model_bone.pstg", bone_model)
        bone_scores = predict_scores(bones.x[m], bone_model)
        write_scores(out / "scores_bone.csv", ids, labels, bone_scores)
        fused = two_stream_fuse(scores, bone_scores, cfg.fusion_alpha)
        write_predictions(out / "fused_predictions.csv", ids, labels, fused)
        metrics["bone"] = {"accuracy": float((bone_scores.argmax(1) == labels).mean()),
                           "aborted": tlog.aborted}
        metrics["fused"] = {"accuracy": float((fused == labels).mean())}
    return metrics
