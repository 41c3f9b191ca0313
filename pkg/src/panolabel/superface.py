"""Normal-similarity clustering of mesh faces into superfaces.

Faces are graph nodes, shared mesh edges are graph edges weighted by
``1 - n_a . n_b``. Segmentation follows the Felzenszwalb-Huttenlocher merge
predicate, then small components are absorbed into neighbours.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .scene_io import FormatError, TriMesh

DEFAULT_K = 0.05
DEFAULT_MIN_SIZE = 20

_SEG_MAGIC = b"PSEG"
_SEG_VERSION = 1


class DegenerateSuperfaceError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class NormalGraph:
    n_nodes: int
    edges: np.ndarray  # (E, 2) int64, a < b, sorted
    weights: np.ndarray  # (E,) float64 in [0, 2]


@dataclass(frozen=True, eq=False)
class SuperfaceSegmentation:
    face_to_sf: np.ndarray  # (F,) int64 superface id per face, dense from 0

    @property
    def n_faces(self) -> int:
        return len(self.face_to_sf)

    @property
    def n_superfaces(self) -> int:
        return int(self.face_to_sf.max()) + 1 if len(self.face_to_sf) else 0

    def sizes(self) -> np.ndarray:
        return np.bincount(self.face_to_sf, minlength=self.n_superfaces)

    def members(self) -> list[np.ndarray]:
        order = np.argsort(self.face_to_sf, kind="stable")
        splits = np.cumsum(self.sizes())[:-1]
        return np.split(order, splits)


class _DisjointSet:
    def __init__(self, n: int):
        self.parent = list(range(n))
        self.size = [1] * n

    def find(self, x: int) -> int:
        root = x
        while self.parent[root] != root:
            root = self.parent[root]
        while self.parent[x] != root:
            self.parent[x], x = root, self.parent[x]
        return root

    def join(self, a: int, b: int) -> int:
        if self.size[a] < self.size[b]:
            a, b = b, a
        self.parent[b] = a
        self.size[a] += self.size[b]
        return a


def face_adjacency(mesh: TriMesh) -> np.ndarray:
    """Pairs of faces sharing an undirected edge, (E, 2) with a < b, sorted."""
    f = mesh.faces
    e = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]])
    e.sort(axis=1)
    owner = np.tile(np.arange(len(f)), 3)
    order = np.lexsort((owner, e[:, 1], e[:, 0]))
    e, owner = e[order], owner[order]
    same = np.all(e[1:] == e[:-1], axis=1)
    bounds = np.flatnonzero(np.concatenate([[True], ~same, [True]]))
    length = np.diff(bounds)
    two = bounds[:-1][length == 2]
    pairs = [np.stack([owner[two], owner[two + 1]], axis=1)]
    # non-manifold edges: connect every pair of incident faces
    for s, n in zip(bounds[:-1][length > 2], length[length > 2]):
        run = owner[s : s + n]
        pairs.append(np.array([(run[i], run[j]) for i in range(len(run)) for j in range(i + 1, len(run))]).reshape(-1, 2))
    pairs = np.concatenate(pairs).astype(np.int64)
    pairs = pairs[pairs[:, 0] != pairs[:, 1]]
    pairs.sort(axis=1)
    if len(pairs) == 0:
        return np.zeros((0, 2), dtype=np.int64)
    return np.unique(pairs, axis=0)


def build_normal_graph(mesh: TriMesh) -> NormalGraph:
    edges = face_adjacency(mesh)
    n = mesh.face_normals
    dots = np.einsum("ij,ij->i", n[edges[:, 0]], n[edges[:, 1]])
    weights = np.clip(1.0 - dots, 0.0, 2.0)
    return NormalGraph(mesh.n_faces, edges, weights)


def segment(graph: NormalGraph, k: float = DEFAULT_K, min_size: int = DEFAULT_MIN_SIZE) -> SuperfaceSegmentation:
    if not k > 0:
        raise ValueError("k must be positive")
    if min_size < 1:
        raise ValueError("min_size must be >= 1")
    order = np.argsort(graph.weights, kind="stable")
    edges = graph.edges[order].tolist()
    weights = graph.weights[order].tolist()

    ds = _DisjointSet(graph.n_nodes)
    threshold = [k] * graph.n_nodes
    for (a, b), wt in zip(edges, weights):
        ra, rb = ds.find(a), ds.find(b)
        if ra != rb and wt <= threshold[ra] and wt <= threshold[rb]:
            r = ds.join(ra, rb)
            # edges arrive in non-decreasing order, so wt is the new internal difference
            threshold[r] = wt + k / ds.size[r]

    for a, b in edges:
        ra, rb = ds.find(a), ds.find(b)
        if ra != rb and (ds.size[ra] < min_size or ds.size[rb] < min_size):
            ds.join(ra, rb)

    roots = np.array([ds.find(i) for i in range(graph.n_nodes)], dtype=np.int64)
    # dense ids in order of first face
    _, first, inv = np.unique(roots, return_index=True, return_inverse=True)
    rank = np.empty(len(first), dtype=np.int64)
    rank[np.argsort(first, kind="stable")] = np.arange(len(first))
    return SuperfaceSegmentation(rank[inv])


def superpoints(mesh: TriMesh, seg: SuperfaceSegmentation) -> tuple[np.ndarray, np.ndarray]:
    """Area-weighted centroid (S, 3) and unit mean normal (S, 3) per superface."""
    areas = mesh.face_areas()
    n_sf = seg.n_superfaces
    total = np.bincount(seg.face_to_sf, weights=areas, minlength=n_sf)
    if (total <= 0).any():
        bad = int(np.flatnonzero(total <= 0)[0])
        raise DegenerateSuperfaceError(f"superface {bad} has zero area")
    cent = mesh.face_centroids() * areas[:, None]
    nrm = mesh.face_normals * areas[:, None]
    c = np.stack([np.bincount(seg.face_to_sf, weights=cent[:, i], minlength=n_sf) for i in range(3)], axis=1)
    n = np.stack([np.bincount(seg.face_to_sf, weights=nrm[:, i], minlength=n_sf) for i in range(3)], axis=1)
    c /= total[:, None]
    norm = np.linalg.norm(n, axis=1, keepdims=True)
    n = n / np.where(norm > 0, norm, 1.0)
    return c, n


def superface_areas(mesh: TriMesh, seg: SuperfaceSegmentation) -> np.ndarray:
    return np.bincount(seg.face_to_sf, weights=mesh.face_areas(), minlength=seg.n_superfaces)


def save_segmentation(path, seg: SuperfaceSegmentation) -> None:
    ids = seg.face_to_sf.astype("<u4")
    Path(path).write_bytes(_SEG_MAGIC + struct.pack("<II", _SEG_VERSION, len(ids)) + ids.tobytes())


def load_segmentation(path) -> SuperfaceSegmentation:
    data = Path(path).read_bytes()
    if data[:4] != _SEG_MAGIC:
        raise FormatError(f"{path}: not a segmentation file")
    version, n = struct.unpack_from("<II", data, 4)
    if version != _SEG_VERSION:
        raise FormatError(f"{path}: segmentation version {version}, expected {_SEG_VERSION}")
    if len(data) != 12 + 4 * n:
        raise FormatError(f"{path}: payload does not match {n} faces")
    return SuperfaceSegmentation(np.frombuffer(data, dtype="<u4", offset=12).astype(np.int64))
