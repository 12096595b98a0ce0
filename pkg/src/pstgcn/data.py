"""Datasets: container, synthetic generator, stratified splitting and file IO."""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .graph import SkeletonSequence, SkeletonTopology, bone_array, load_topology, save_topology

SPLITS = ("train", "val", "test")
MAGIC = b"PSKD"
VERSION = 1


@dataclass
class Dataset:
    """Fixed-length skeleton sequences stored as one N x C x T x V array."""

    topology: SkeletonTopology
    x: np.ndarray
    labels: np.ndarray
    n_class: int
    split: np.ndarray = None
    ids: np.ndarray = None

    def __post_init__(self):
        self.x = np.asarray(self.x)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        n = len(self.labels)
        if self.x.ndim != 4 or self.x.shape[0] != n:
            raise ValueError(f"expected {n} samples of shape C x T x V, got array {self.x.shape}")
        if self.x.shape[3] != self.topology.joint_count:
            raise ValueError(
                f"samples have {self.x.shape[3]} joints, topology has {self.topology.joint_count}"
            )
        if n and (self.labels.min() < 0 or self.labels.max() >= self.n_class):
            raise ValueError(f"labels must lie in [0, {self.n_class})")
        if self.split is None:
            self.split = np.full(n, "train", dtype="<U5")
        self.split = np.asarray(self.split, dtype="<U5")
        self.ids = np.arange(n) if self.ids is None else np.asarray(self.ids, dtype=np.int64)
        if self.ids.shape != (n,):
            raise ValueError(f"expected {n} sample ids, got shape {self.ids.shape}")
        if not np.all(np.isin(self.split, SPLITS)):
            raise ValueError(f"split tags must be in {SPLITS}")

    def __len__(self):
        return len(self.labels)

    @property
    def shape(self):
        return self.x.shape[1:]

    def mask(self, *tags) -> np.ndarray:
        return np.isin(self.split, tags)

    def subset(self, *tags):
        """(x, labels) of the samples carrying any of ``tags``."""
        m = self.mask(*tags)
        return self.x[m], self.labels[m]

    def sample(self, i: int) -> SkeletonSequence:
        return SkeletonSequence(self.x[i], int(self.labels[i]), self.topology.name)

    def with_split(self, split) -> Dataset:
        return Dataset(self.topology, self.x, self.labels, self.n_class, split, self.ids)

    def to_bones(self) -> Dataset:
        return Dataset(self.topology, bone_array(self.x, self.topology), self.labels, self.n_class,
                       self.split.copy(), self.ids)

    def check(self):
        """Raise if a class is missing from train or train and val overlap."""
        train = self.mask("train")
        missing = sorted(set(range(self.n_class)) - set(self.labels[train].tolist()))
        if missing:
            raise ValueError(f"classes {missing} have no training samples")
        check_disjoint(self)


def check_disjoint(dataset: Dataset):
    ids_train = set(dataset.ids[dataset.mask("train")].tolist())
    ids_val = set(dataset.ids[dataset.mask("val")].tolist())
    leaked = ids_train & ids_val
    if leaked:
        raise ValueError(f"samples {sorted(leaked)[:5]} are in both train and val")


def stratified_split(dataset: Dataset, val_fraction: float = 0.2, seed=0) -> Dataset:
    """Tag ``round(val_fraction * n_c)`` of each class's non-test samples as val.

    Rounding is half-up. Test-tagged samples are left alone.
    """
    if not 0 < val_fraction < 1:
        raise ValueError(f"val_fraction must be in (0, 1), got {val_fraction}")
    rng = np.random.default_rng(seed)
    split = dataset.split.copy()
    pool = np.flatnonzero(split != "test")
    split[pool] = "train"
    for c in range(dataset.n_class):
        members = pool[dataset.labels[pool] == c]
        n_c = len(members)
        if n_c == 0:
            continue
        if n_c < 2:
            raise ValueError(f"class {c} has a single sample; cannot split it into train and val")
        n_val = int(np.floor(val_fraction * n_c + 0.5))
        if n_val >= n_c:
            raise ValueError(f"val_fraction {val_fraction} leaves class {c} without training samples")
        split[rng.permutation(members)[:n_val]] = "val"
    return dataset.with_split(split)


# ------------------------------------------------------------------ synthetic data


@dataclass
class MotionModel:
    """Per-class joint-angle oscillations on a kinematic tree."""

    lengths: np.ndarray  # per joint, bone length to parent
    rest: np.ndarray  # V x 2 rest (azimuth, elevation) of each bone
    amp: np.ndarray  # n_class x V x 2
    freq: np.ndarray  # n_class x V x 2, cycles per sequence
    phase: np.ndarray  # n_class x V x 2
    order: list = field(default_factory=list)  # joints in parent-before-child order


def _kinematic_order(topology: SkeletonTopology) -> tuple[list, np.ndarray]:
    parents = np.full(topology.joint_count, -1)
    for c, p in (topology.parent_of or {}).items():
        parents[c] = p
    order, placed = [], set()
    while len(order) < topology.joint_count:
        progressed = False
        for j in range(topology.joint_count):
            if j not in placed and (parents[j] < 0 or parents[j] in placed):
                order.append(j)
                placed.add(j)
                progressed = True
        if not progressed:
            raise ValueError("parent map contains a cycle")
    return order, parents


def make_motion_model(topology: SkeletonTopology, n_class: int, rng: np.random.Generator,
                      distinct_joints: int = 4) -> MotionModel:
    """Shared base motion; each class re-draws the oscillation of a few joints."""
    V = topology.joint_count
    order, parents = _kinematic_order(topology)
    amp = np.broadcast_to(rng.uniform(0.3, 0.9, size=(V, 2)), (n_class, V, 2)).copy()
    freq = np.broadcast_to(rng.integers(1, 4, size=(V, 2)).astype(float), (n_class, V, 2)).copy()
    phase = np.broadcast_to(rng.uniform(0, 2 * np.pi, size=(V, 2)), (n_class, V, 2)).copy()
    movable = np.flatnonzero(parents >= 0)
    for c in range(n_class):
        joints = rng.choice(movable, size=min(distinct_joints, len(movable)), replace=False)
        amp[c, joints] = rng.uniform(0.3, 0.9, size=(len(joints), 2))
        freq[c, joints] = rng.integers(1, 4, size=(len(joints), 2))
        phase[c, joints] = rng.uniform(0, 2 * np.pi, size=(len(joints), 2))
    return MotionModel(
        lengths=rng.uniform(0.3, 0.6, size=V),
        rest=np.stack([rng.uniform(-np.pi, np.pi, V), rng.uniform(-0.5, 0.5, V)], axis=1),
        amp=amp,
        freq=freq,
        phase=phase,
        order=order,
    )


def render_motion(motion: MotionModel, topology: SkeletonTopology, label: int, T: int,
                  time_shift: float = 0.0, amp_scale: float = 1.0) -> np.ndarray:
    """3 x T x V joint trajectory of one class.

    ``time_shift`` (in sequence lengths) and ``amp_scale`` perturb one
    sample; the defaults give the class's canonical motion.
    """
    _, parents = _kinematic_order(topology)
    tau = np.arange(T) / T + time_shift
    angles = motion.rest[None] + amp_scale * motion.amp[label][None] * np.sin(
        2 * np.pi * motion.freq[label][None] * tau[:, None, None] + motion.phase[label][None]
    )  # T x V x 2
    az, el = angles[..., 0], angles[..., 1]
    step = motion.lengths[None, :, None] * np.stack(
        [np.cos(az) * np.cos(el), np.sin(az) * np.cos(el), np.sin(el)], axis=-1
    )  # T x V x 3
    pos = np.zeros((T, topology.joint_count, 3))
    for j in motion.order:
        if parents[j] >= 0:
            pos[:, j] = pos[:, parents[j]] + step[:, j]
    return pos.transpose(2, 0, 1)


# per-sample variation per unit of noise_sigma
SHIFT_PER_SIGMA = 1.0  # std of the time shift, in sequence lengths
AMP_PER_SIGMA = 4.0  # std of the relative amplitude change


def generate_synthetic(n_class: int, samples_per_class: int, topology=None, T: int = 32,
                       noise_sigma: float = 0.05, seed=0, test_fraction: float = 0.2) -> Dataset:
    """Desk-scale action dataset of oscillating motions on a kinematic tree.

    Every class shares a base motion and re-draws it on a few joints.
    Each sample is its class motion with a random time shift and amplitude
    change, both scaled by ``noise_sigma``, plus Gaussian coordinate noise
    of standard deviation ``noise_sigma``. At ``noise_sigma=0`` all samples
    of a class coincide. ``samples_per_class`` samples per class are tagged
    train; another ``round(test_fraction * samples_per_class)`` per class,
    drawn from an independent stream, are tagged test.
    """
    if n_class < 2:
        raise ValueError("need at least two classes")
    topology = load_topology("toy11") if topology is None else topology
    motion_seq, train_seq, test_seq = np.random.SeedSequence(seed).spawn(3)
    motion = make_motion_model(topology, n_class, np.random.default_rng(motion_seq))
    n_test = int(np.floor(test_fraction * samples_per_class + 0.5))
    C = 3

    def draw(seq, per_class):
        rng = np.random.default_rng(seq)
        labels = np.repeat(np.arange(n_class), per_class)
        labels = labels[rng.permutation(len(labels))]
        shifts = SHIFT_PER_SIGMA * noise_sigma * rng.standard_normal(len(labels))
        scales = 1 + AMP_PER_SIGMA * noise_sigma * rng.standard_normal(len(labels))
        x = np.empty((len(labels), C, T, topology.joint_count))
        for i, (c, s, a) in enumerate(zip(labels, shifts, scales)):
            x[i] = render_motion(motion, topology, c, T, s, a)
        x += noise_sigma * rng.standard_normal(x.shape)
        return x, labels

    x_tr, y_tr = draw(train_seq, samples_per_class)
    x_te, y_te = draw(test_seq, n_test)
    split = np.array(["train"] * len(y_tr) + ["test"] * len(y_te), dtype="<U5")
    return Dataset(topology, np.concatenate([x_tr, x_te]), np.concatenate([y_tr, y_te]), n_class, split)


# ------------------------------------------------------------------ file IO

_SPLIT_CODES = {name: i for i, name in enumerate(SPLITS)}


def save_dataset(dataset: Dataset, directory) -> Path:
    """Write ``topology.txt`` and ``samples.bin`` into ``directory``.

    ``samples.bin``: magic ``PSKD``, then little-endian u32 version,
    sample count, C, T, V and class count; then per sample an i32 label,
    a u8 split code (0 train, 1 val, 2 test) and C*T*V float64 values.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    save_topology(dataset.topology, directory / "topology.txt")
    N = len(dataset)
    C, T, V = dataset.shape
    values = np.ascontiguousarray(dataset.x, dtype="<f8")
    with open(directory / "samples.bin", "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<6I", VERSION, N, C, T, V, dataset.n_class))
        for i in range(N):
            fh.write(struct.pack("<iB", int(dataset.labels[i]), _SPLIT_CODES[dataset.split[i]]))
            fh.write(values[i].tobytes())
    return directory


def load_dataset(path) -> Dataset:
    """Load a dataset directory, or a newline-delimited JSON file of samples."""
    path = Path(path)
    if path.is_file():
        return load_ndjson(path)
    topology = load_topology(path / "topology.txt")
    data = (path / "samples.bin").read_bytes()
    if data[:4] != MAGIC:
        raise ValueError(f"{path}/samples.bin: bad magic {data[:4]!r}")
    version, N, C, T, V, n_class = struct.unpack_from("<6I", data, 4)
    if version != VERSION:
        raise ValueError(f"{path}/samples.bin: unsupported version {version}")
    rec = np.dtype([("label", "<i4"), ("split", "u1"), ("x", "<f8", (C, T, V))])
    arr = np.frombuffer(data, dtype=rec, count=N, offset=28)
    split = np.array(SPLITS, dtype="<U5")[arr["split"]]
    return Dataset(topology, arr["x"].astype(np.float64), arr["label"].astype(np.int64), n_class, split)


def load_ndjson(path, topology=None) -> Dataset:
    """Hand-made fixtures: first line may be ``{"topology": ..., "n_class": k}``,
    every other line ``{"label": c, "data": [[[...]]], "split": "train"}``."""
    header, rows = {}, []
    for line in Path(path).read_text().splitlines():
        if not line.strip():
            continue
        rec = json.loads(line)
        if "data" in rec:
            rows.append(rec)
        else:
            header.update(rec)
    if topology is None:
        topo = header.get("topology", "toy11")
        topology = load_topology(topo) if isinstance(topo, str) else SkeletonTopology.from_dict(topo)
    labels = np.array([r["label"] for r in rows], dtype=np.int64)
    n_class = int(header.get("n_class", labels.max() + 1 if len(labels) else 1))
    x = np.array([r["data"] for r in rows], dtype=np.float64)
    split = [r.get("split", "train") for r in rows]
    return Dataset(topology, x, labels, n_class, split)
