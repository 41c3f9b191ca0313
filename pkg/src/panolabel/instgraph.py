"""Superpoint voting graph built from per-frame 2D instance masks.

Each frame votes: superfaces well covered by a mask vote for an edge to the
mask's centre node; nodes visible outside the mask lose a vote to every node
inside it. After all frames, only positive edges survive and connected
components become 3D instances.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components

from .rasterizer import IdBuffer
from .scene_io import UNLABELED, ClassTable, FormatError, LabelImage
from .superface import SuperfaceSegmentation

DEFAULT_THETA = 0.3
DEDUCT_ALL = "all"  # every visible node outside the mask
DEDUCT_OTHER_MASKS = "other_masks"  # only nodes inside some other mask of the frame

_CLU_MAGIC = b"PCLU"
_CLU_VERSION = 1


class NoCenterError(ValueError):
    pass


@dataclass
class OverlapTable:
    n_nodes: int
    visible: np.ndarray  # V_I: node ids with a non-empty projection, ascending
    area: np.ndarray  # (n_nodes,) projected pixel count
    rows: dict[int, tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)
    # rows[j] = (nodes with U_ij > 0 ascending, U_ij)

    @property
    def mask_ids(self) -> list[int]:
        return sorted(self.rows)

    def u(self, node: int, mask: int) -> float:
        nodes, vals = self.rows.get(mask, (np.zeros(0, int), np.zeros(0)))
        hit = np.flatnonzero(nodes == node)
        return float(vals[hit[0]]) if len(hit) else 0.0


@dataclass
class SceneGraph:
    n_nodes: int
    votes: np.ndarray = None  # (n, n) int64 symmetric, zero diagonal

    def __post_init__(self):
        if self.votes is None:
            self.votes = np.zeros((self.n_nodes, self.n_nodes), dtype=np.int64)

    def vote(self, a: int, b: int) -> int:
        return int(self.votes[a, b])

    def edges(self) -> dict[tuple[int, int], int]:
        """Non-zero votes as {(a, b): count} with a < b."""
        a, b = np.nonzero(np.triu(self.votes, 1))
        return {(int(i), int(j)): int(self.votes[i, j]) for i, j in zip(a, b)}

    def copy(self) -> "SceneGraph":
        return SceneGraph(self.n_nodes, self.votes.copy())


@dataclass
class InstanceClusters:
    node_to_cluster: np.ndarray  # (n,) ids dense from 1

    @property
    def n_clusters(self) -> int:
        return int(self.node_to_cluster.max()) if len(self.node_to_cluster) else 0

    def members(self) -> dict[int, np.ndarray]:
        return {c: np.flatnonzero(self.node_to_cluster == c) for c in range(1, self.n_clusters + 1)}


def instance_masks(labels: LabelImage, classes: ClassTable | None = None) -> np.ndarray:
    """Per-pixel thing-mask id (0 where no thing instance)."""
    inst = labels.instance_id.astype(np.int64)
    if classes is not None:
        inst = np.where(classes.thing_mask(labels.class_id), inst, UNLABELED)
    return inst


def overlaps(
    idbuf: IdBuffer,
    seg: SuperfaceSegmentation,
    labels: LabelImage,
    classes: ClassTable | None = None,
) -> OverlapTable:
    """Overlap of every visible superface with every thing mask of one frame.

    U is normalised by the superface's own projected area.
    """
    n = seg.n_superfaces
    fi = idbuf.face_index.reshape(-1)
    hit = fi >= 0
    node = seg.face_to_sf[fi[hit]]
    area = np.bincount(node, minlength=n)
    visible = np.flatnonzero(area > 0)
    table = OverlapTable(n, visible, area)

    mask = instance_masks(labels, classes).reshape(-1)[hit]
    inside = mask != UNLABELED
    if not inside.any():
        return table
    mids, midx = np.unique(mask[inside], return_inverse=True)
    counts = np.bincount(midx * n + node[inside], minlength=len(mids) * n).reshape(len(mids), n)
    for k, j in enumerate(mids.tolist()):
        nodes = np.flatnonzero(counts[k])
        table.rows[int(j)] = (nodes, counts[k, nodes] / area[nodes])
    return table


def center_node(table: OverlapTable, j: int) -> int:
    nodes, u = table.rows.get(j, (np.zeros(0, int), np.zeros(0)))
    if len(nodes) == 0:
        raise NoCenterError(f"mask {j} overlaps no superface")
    return int(nodes[np.argmax(u)])  # argmax takes the first, i.e. lowest node id, on ties


def accumulate_frame(
    graph: SceneGraph,
    table: OverlapTable,
    theta: float = DEFAULT_THETA,
    deduct: str = DEDUCT_ALL,
) -> SceneGraph:
    """Add one frame's votes to ``graph`` in place and return it."""
    if not 0.0 < theta <= 1.0:
        raise ValueError("theta must lie in (0, 1]")
    if deduct not in (DEDUCT_ALL, DEDUCT_OTHER_MASKS):
        raise ValueError(f"unknown deduction mode {deduct!r}")
    n = graph.n_nodes
    votes = graph.votes
    in_visible = np.zeros(n, dtype=bool)
    in_visible[table.visible] = True
    in_any_mask = np.zeros(n, dtype=bool)
    for nodes, _ in table.rows.values():
        in_any_mask[nodes] = True

    penalty = np.zeros((n, n), dtype=bool)
    for j in table.mask_ids:
        nodes, u = table.rows[j]
        c = center_node(table, j)
        good = nodes[(u >= theta) & (nodes != c)]
        np.add.at(votes, (good, c), 1)
        np.add.at(votes, (c, good), 1)

        member = np.zeros(n, dtype=bool)
        member[nodes] = True
        others = in_visible & ~member
        if deduct == DEDUCT_OTHER_MASKS:
            others &= in_any_mask
        o = np.flatnonzero(others)
        penalty[np.ix_(o, nodes)] = True
    penalty |= penalty.T
    votes -= penalty
    return graph


def build_scene_graph(
    idbufs: Sequence[IdBuffer],
    labels: Sequence[LabelImage],
    seg: SuperfaceSegmentation,
    theta: float = DEFAULT_THETA,
    classes: ClassTable | None = None,
    deduct: str = DEDUCT_ALL,
) -> SceneGraph:
    graph = SceneGraph(seg.n_superfaces)
    for ib, lab in zip(idbufs, labels):
        accumulate_frame(graph, overlaps(ib, seg, lab, classes), theta, deduct)
    return graph


def cut_and_cluster(graph: SceneGraph) -> InstanceClusters:
    """Connected components over positive-vote edges; ids by lowest member node."""
    pos = csr_matrix(graph.votes > 0)
    _, comp = connected_components(pos, directed=False)
    _, first, inv = np.unique(comp, return_index=True, return_inverse=True)
    rank = np.empty(len(first), dtype=np.int64)
    rank[np.argsort(first, kind="stable")] = np.arange(1, len(first) + 1)
    return InstanceClusters(rank[inv])


def save_clusters(path, clusters: InstanceClusters) -> None:
    ids = clusters.node_to_cluster.astype("<u4")
    Path(path).write_bytes(_CLU_MAGIC + struct.pack("<II", _CLU_VERSION, len(ids)) + ids.tobytes())


def load_clusters(path) -> InstanceClusters:
    data = Path(path).read_bytes()
    if data[:4] != _CLU_MAGIC:
        raise FormatError(f"{path}: not a cluster file")
    version, n = struct.unpack_from("<II", data, 4)
    if version != _CLU_VERSION:
        raise FormatError(f"{path}: cluster version {version}, expected {_CLU_VERSION}")
    if len(data) != 12 + 4 * n:
        raise FormatError(f"{path}: payload does not match {n} nodes")
    return InstanceClusters(np.frombuffer(data, dtype="<u4", offset=12).astype(np.int64))
