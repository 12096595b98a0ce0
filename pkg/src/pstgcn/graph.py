"""Skeleton graphs: topology, spatial partitioning and bone features."""
from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

DEGREE_EPS = 0.001
PRESETS = ("ntu25", "openpose18", "toy11")


@dataclass(frozen=True)
class SkeletonTopology:
    """Joint graph of one body.

    ``parent_of`` maps child joint -> parent joint and is only needed for
    bone features. ``name`` is the identifier sequences refer to.
    """

    joint_count: int
    edges: tuple[tuple[int, int], ...]
    center_joint: int
    parent_of: dict[int, int] | None = None
    name: str = "custom"

    def __post_init__(self):
        V = self.joint_count
        if V < 1:
            raise ValueError(f"joint_count must be positive, got {V}")
        edges = tuple((int(i), int(j)) for i, j in self.edges)
        object.__setattr__(self, "edges", edges)
        seen = set()
        for i, j in edges:
            if not (0 <= i < V and 0 <= j < V):
                raise ValueError(f"edge ({i}, {j}) has an endpoint outside [0, {V})")
            if i == j:
                raise ValueError(f"self-loop on joint {i}")
            key = (min(i, j), max(i, j))
            if key in seen:
                raise ValueError(f"duplicate edge ({i}, {j})")
            seen.add(key)
        if not 0 <= self.center_joint < V:
            raise ValueError(f"center_joint {self.center_joint} outside [0, {V})")
        if self.parent_of is not None:
            parents = {int(c): int(p) for c, p in self.parent_of.items()}
            for c, p in parents.items():
                if not (0 <= c < V and 0 <= p < V) or c == p:
                    raise ValueError(f"invalid parent entry {c} -> {p}")
            object.__setattr__(self, "parent_of", parents)

    def neighbors(self) -> list[list[int]]:
        adj: list[list[int]] = [[] for _ in range(self.joint_count)]
        for i, j in self.edges:
            adj[i].append(j)
            adj[j].append(i)
        return adj

    def to_dict(self) -> dict:
        parents = None
        if self.parent_of is not None:
            parents = [self.parent_of.get(j, -1) for j in range(self.joint_count)]
        return {
            "name": self.name,
            "joint_count": self.joint_count,
            "edges": [list(e) for e in self.edges],
            "center_joint": self.center_joint,
            "parents": parents,
        }

    @classmethod
    def from_dict(cls, d: dict) -> SkeletonTopology:
        parents = d.get("parents")
        parent_of = None
        if parents is not None:
            parent_of = {j: p for j, p in enumerate(parents) if p is not None and p >= 0}
        return cls(
            joint_count=int(d["joint_count"]),
            edges=tuple(tuple(e) for e in d["edges"]),
            center_joint=int(d["center_joint"]),
            parent_of=parent_of,
            name=d.get("name", "custom"),
        )


def save_topology(topology: SkeletonTopology, path) -> None:
    Path(path).write_text(json.dumps(topology.to_dict(), indent=1))


def load_topology(path_or_preset) -> SkeletonTopology:
    """Read a topology file, or one of the shipped presets by name."""
    if str(path_or_preset) in PRESETS:
        text = resources.files("pstgcn.presets").joinpath(f"{path_or_preset}.json").read_text()
    else:
        text = Path(path_or_preset).read_text()
    return SkeletonTopology.from_dict(json.loads(text))


def hop_distances(topology: SkeletonTopology, source: int) -> np.ndarray:
    """BFS hop distance from ``source`` to every joint; -1 marks unreachable."""
    dist = np.full(topology.joint_count, -1, dtype=np.int64)
    dist[source] = 0
    adj = topology.neighbors()
    queue = deque([source])
    while queue:
        i = queue.popleft()
        for j in adj[i]:
            if dist[j] < 0:
                dist[j] = dist[i] + 1
                queue.append(j)
    return dist


def normalize_adjacency(A: np.ndarray, epsilon: float = DEGREE_EPS) -> np.ndarray:
    """Symmetric degree normalization ``D^-1/2 A D^-1/2`` with row-sum degrees.

    ``epsilon`` is added to every degree so empty rows stay finite.
    """
    A = np.asarray(A, dtype=np.float64)
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    inv_sqrt = 1.0 / np.sqrt(A.sum(axis=1) + epsilon)
    return A * inv_sqrt[:, None] * inv_sqrt[None, :]


@dataclass(frozen=True)
class PartitionedAdjacency:
    """Root / centripetal / centrifugal adjacency triple, raw and normalized.

    ``raw[0]`` is the identity, ``raw[1]`` holds neighbors closer to the
    center joint and ``raw[2]`` the rest. Entry (i, j) means root i
    aggregates from neighbor j.
    """

    raw: np.ndarray
    normalized: np.ndarray
    epsilon: float = DEGREE_EPS
    degrees: np.ndarray = field(default=None)

    @property
    def num_joints(self) -> int:
        return self.raw.shape[-1]


def build_partitions(topology: SkeletonTopology, epsilon: float = DEGREE_EPS) -> PartitionedAdjacency:
    V = topology.joint_count
    dist = hop_distances(topology, topology.center_joint)
    unreachable = np.flatnonzero(dist < 0)
    if unreachable.size:
        raise ValueError(
            f"skeleton graph is disconnected: joint {int(unreachable[0])} "
            f"is unreachable from center joint {topology.center_joint}"
        )
    raw = np.zeros((3, V, V))
    raw[0] = np.eye(V)
    for a, b in topology.edges:
        for root, nb in ((a, b), (b, a)):
            # ties go to the farther subset
            subset = 1 if dist[nb] < dist[root] else 2
            raw[subset, root, nb] = 1.0
    normalized = np.stack([normalize_adjacency(A, epsilon) for A in raw])
    degrees = raw.sum(axis=2) + epsilon
    for arr in (raw, normalized, degrees):
        arr.setflags(write=False)
    return PartitionedAdjacency(raw=raw, normalized=normalized, epsilon=epsilon, degrees=degrees)


@dataclass(frozen=True)
class SkeletonSequence:
    data: np.ndarray  # C x T x V
    label: int
    topology_ref: str = "custom"

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3:
            raise ValueError(f"sequence data must be C x T x V, got shape {data.shape}")
        if not np.all(np.isfinite(data)):
            raise ValueError("sequence data contains non-finite values")
        object.__setattr__(self, "data", data)

    def check_topology(self, topology: SkeletonTopology) -> None:
        if self.data.shape[2] != topology.joint_count:
            raise ValueError(
                f"sequence has {self.data.shape[2]} joints, topology "
                f"{topology.name!r} has {topology.joint_count}"
            )


def parent_index(topology: SkeletonTopology) -> np.ndarray:
    """Parent of each joint as an index array; roots point to themselves."""
    if topology.parent_of is None:
        raise ValueError(f"topology {topology.name!r} has no parent map; bone features need one")
    idx = np.arange(topology.joint_count)
    for child, parent in topology.parent_of.items():
        idx[child] = parent
    return idx


def bone_array(x: np.ndarray, topology: SkeletonTopology) -> np.ndarray:
    """Bone vectors for an array whose last axis is joints (any leading shape)."""
    parents = parent_index(topology)
    return x - x[..., parents]


def bone_features(seq: SkeletonSequence, topology: SkeletonTopology) -> SkeletonSequence:
    seq.check_topology(topology)
    return SkeletonSequence(bone_array(seq.data, topology), seq.label, seq.topology_ref)
