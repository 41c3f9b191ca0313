"""Scene data types and their on-disk formats.

Meshes are ASCII OBJ or binary little-endian PLY. Label images, feature maps
and stage artifacts use small tagged binary layouts (magic + little-endian
payload). Depth is 16-bit PGM in millimetres, colour is 8-bit PPM, camera
trajectories and configs are plain text.
"""

from __future__ import annotations

import logging
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

logger = logging.getLogger(__name__)

UNLABELED = 0
UNKNOWN = 0

THING = "thing"
STUFF = "stuff"


class FormatError(ValueError):
    """A file does not follow the layout its loader expects."""


class MeshParseError(FormatError):
    def __init__(self, message: str, offset: int | None = None, kind: str = "line"):
        self.offset = offset
        if offset is not None:
            message = f"{message} (at {kind} {offset})"
        super().__init__(message)


class EmptyMeshError(FormatError):
    pass


class ArityError(ValueError):
    """Two inputs that must have matching lengths or dimensions do not."""


# --------------------------------------------------------------------------
# Types


@dataclass(frozen=True, eq=False)
class TriMesh:
    vertices: np.ndarray  # (V, 3) float64, metres
    faces: np.ndarray  # (F, 3) int64

    def __post_init__(self):
        v = np.ascontiguousarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        f = np.ascontiguousarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if f.size and (f.min() < 0 or f.max() >= len(v)):
            raise FormatError("face index out of range")
        v.setflags(write=False)
        f.setflags(write=False)
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "faces", f)

    @classmethod
    def from_arrays(cls, vertices, faces, drop_degenerate: bool = True) -> "TriMesh":
        mesh = cls(vertices, faces)
        if drop_degenerate:
            keep = mesh.face_areas() > 0
            if not keep.all():
                logger.debug("dropping %d degenerate faces", int((~keep).sum()))
                mesh = cls(mesh.vertices, mesh.faces[keep])
        if len(mesh.faces) == 0:
            raise EmptyMeshError("mesh has no non-degenerate faces")
        return mesh

    @property
    def n_faces(self) -> int:
        return len(self.faces)

    def triangles(self) -> np.ndarray:
        """(F, 3, 3) corner coordinates."""
        return self.vertices[self.faces]

    def _cross(self) -> np.ndarray:
        t = self.triangles()
        return np.cross(t[:, 1] - t[:, 0], t[:, 2] - t[:, 0])

    def face_areas(self) -> np.ndarray:
        return 0.5 * np.linalg.norm(self._cross(), axis=1)

    @property
    def face_normals(self) -> np.ndarray:
        c = self._cross()
        n = np.linalg.norm(c, axis=1, keepdims=True)
        return c / np.where(n > 0, n, 1.0)

    def face_centroids(self) -> np.ndarray:
        return self.triangles().mean(axis=1)

    def equals(self, other: "TriMesh") -> bool:
        return np.array_equal(self.vertices, other.vertices) and np.array_equal(self.faces, other.faces)


@dataclass(eq=False)
class LabelImage:
    instance_id: np.ndarray  # (H, W) uint32, 0 = UNLABELED
    class_id: np.ndarray  # (H, W) uint32, 0 = UNKNOWN
    score: np.ndarray | None = None  # (H, W) float32 in [0, 1]

    def __post_init__(self):
        self.instance_id = np.asarray(self.instance_id, dtype=np.uint32)
        self.class_id = np.asarray(self.class_id, dtype=np.uint32)
        if self.instance_id.shape != self.class_id.shape or self.instance_id.ndim != 2:
            raise ArityError("instance and class images must share one 2D shape")
        if self.score is not None:
            self.score = np.asarray(self.score, dtype=np.float32)
            if self.score.shape != self.instance_id.shape:
                raise ArityError("score image shape mismatch")

    @classmethod
    def empty(cls, width: int, height: int) -> "LabelImage":
        z = np.zeros((height, width), dtype=np.uint32)
        return cls(z, z.copy())

    @property
    def shape(self) -> tuple[int, int]:
        return self.instance_id.shape

    def copy(self) -> "LabelImage":
        return LabelImage(
            self.instance_id.copy(),
            self.class_id.copy(),
            None if self.score is None else self.score.copy(),
        )

    def equals(self, other: "LabelImage") -> bool:
        if not (np.array_equal(self.instance_id, other.instance_id) and np.array_equal(self.class_id, other.class_id)):
            return False
        if self.score is None or other.score is None:
            return True
        return np.array_equal(self.score, other.score)

    def segments(self) -> list[tuple[int, int]]:
        """Distinct labelled (instance_id, class_id) pairs, sorted."""
        key = self.instance_id.astype(np.uint64) << np.uint64(32) | self.class_id.astype(np.uint64)
        key = np.unique(key[self.class_id != UNKNOWN])
        return [(int(k >> np.uint64(32)), int(k & np.uint64(0xFFFFFFFF))) for k in key]


@dataclass(frozen=True)
class ClassTable:
    entries: dict[int, tuple[str, str]] = field(default_factory=dict)

    def __post_init__(self):
        ids = sorted(self.entries)
        if ids != list(range(1, len(ids) + 1)):
            raise FormatError("class ids must be dense from 1")
        for cid, (_, kind) in self.entries.items():
            if kind not in (THING, STUFF):
                raise FormatError(f"class {cid}: kind must be thing or stuff, got {kind!r}")

    def __len__(self) -> int:
        return len(self.entries)

    def name(self, cid: int) -> str:
        return self.entries[cid][0] if cid in self.entries else "unknown"

    def is_thing(self, cid: int) -> bool:
        return cid in self.entries and self.entries[cid][1] == THING

    def thing_ids(self) -> list[int]:
        return [c for c in sorted(self.entries) if self.entries[c][1] == THING]

    def stuff_ids(self) -> list[int]:
        return [c for c in sorted(self.entries) if self.entries[c][1] == STUFF]

    def thing_mask(self, class_ids: np.ndarray) -> np.ndarray:
        lut = np.zeros(len(self) + 1, dtype=bool)
        lut[self.thing_ids()] = True
        return lut[np.clip(class_ids, 0, len(self))] & (class_ids <= len(self))


@dataclass(eq=False)
class Frame:
    """Pinhole camera with its observations; pose maps world to camera."""

    frame_id: str
    fx: float
    fy: float
    cx: float
    cy: float
    pose: np.ndarray  # (3, 4) world -> camera
    width: int
    height: int
    depth: np.ndarray | None = None  # (H, W) metres along the optical axis, 0 = invalid
    labels: LabelImage | None = None
    features: np.ndarray | None = None  # (H, W, F) float32
    color: np.ndarray | None = None  # (H, W, 3) float in [0, 1]

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise FormatError("focal lengths must be positive")
        self.pose = np.asarray(self.pose, dtype=np.float64).reshape(3, 4)
        r = self.pose[:, :3]
        if np.abs(r @ r.T - np.eye(3)).max() > 1e-6:
            raise FormatError(f"frame {self.frame_id}: pose rotation is not orthonormal")
        if self.depth is not None:
            self.depth = np.asarray(self.depth, dtype=np.float64)
            if self.depth.shape != (self.height, self.width):
                raise ArityError("depth image shape mismatch")
            if (self.depth < 0).any() or not np.isfinite(self.depth).all():
                raise FormatError("depth values must be finite and non-negative")
        if self.labels is not None and self.labels.shape != (self.height, self.width):
            raise ArityError("label image shape mismatch")
        if self.features is not None:
            self.features = np.asarray(self.features, dtype=np.float32)
            if self.features.shape[:2] != (self.height, self.width) or self.features.ndim != 3:
                raise ArityError("feature map shape mismatch")
            if not np.isfinite(self.features).all():
                raise FormatError("feature map holds non-finite values")

    @property
    def rotation(self) -> np.ndarray:
        return self.pose[:, :3]

    @property
    def translation(self) -> np.ndarray:
        return self.pose[:, 3]

    @property
    def intrinsics(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def center(self) -> np.ndarray:
        return -self.rotation.T @ self.translation

    def with_(self, **changes) -> "Frame":
        kw = {k: getattr(self, k) for k in self.__dataclass_fields__}
        kw.update(changes)
        return Frame(**kw)


# --------------------------------------------------------------------------
# Meshes


_PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}


def load_mesh(path: str | os.PathLike) -> TriMesh:
    path = Path(path)
    with open(path, "rb") as fh:
        head = fh.read(3)
    if head == b"ply":
        v, f = _read_ply(path)
    else:
        v, f = _read_obj(path)
    return TriMesh.from_arrays(v, f)


def save_mesh(path: str | os.PathLike, mesh: TriMesh) -> None:
    path = Path(path)
    if path.suffix.lower() == ".obj":
        lines = [f"v {x!r} {y!r} {z!r}" for x, y, z in mesh.vertices.tolist()]
        lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in mesh.faces.tolist()]
        path.write_text("\n".join(lines) + "\n")
    else:
        _write_ply(path, mesh)


def _read_obj(path: Path) -> tuple[np.ndarray, np.ndarray]:
    verts: list[list[float]] = []
    faces: list[list[int]] = []
    with open(path, "r", encoding="utf-8", errors="replace") as fh:
        for lineno, raw in enumerate(fh, start=1):
            parts = raw.split("#", 1)[0].split()
            if not parts:
                continue
            tag = parts[0]
            try:
                if tag == "v":
                    if len(parts) < 4:
                        raise ValueError("vertex needs 3 coordinates")
                    verts.append([float(x) for x in parts[1:4]])
                elif tag == "f":
                    idx = []
                    for tok in parts[1:]:
                        i = int(tok.split("/")[0])
                        idx.append(i - 1 if i > 0 else len(verts) + i)
                    if len(idx) < 3:
                        raise ValueError("face needs at least 3 vertices")
                    if min(idx) < 0 or max(idx) >= len(verts):
                        raise ValueError("face index out of range")
                    # fan triangulation for polygons
                    faces.extend([idx[0], idx[k], idx[k + 1]] for k in range(1, len(idx) - 1))
            except ValueError as exc:
                raise MeshParseError(f"{path.name}: {exc}", lineno) from None
    if not faces:
        raise EmptyMeshError(f"{path.name}: no faces")
    return np.array(verts, dtype=np.float64), np.array(faces, dtype=np.int64)


def _read_ply(path: Path) -> tuple[np.ndarray, np.ndarray]:
    data = path.read_bytes()
    end = data.find(b"end_header\n")
    if end < 0:
        raise MeshParseError(f"{path.name}: missing end_header", 0, "byte")
    header = data[:end].decode("ascii", errors="replace").splitlines()
    offset = end + len(b"end_header\n")
    if not header or header[0].strip() != "ply":
        raise MeshParseError(f"{path.name}: bad magic", 0, "byte")

    elements: list[tuple[str, int, list]] = []
    fmt = None
    for lineno, line in enumerate(header, start=1):
        parts = line.split()
        if not parts or parts[0] in ("ply", "comment", "obj_info"):
            continue
        if parts[0] == "format":
            fmt = parts[1]
        elif parts[0] == "element":
            elements.append((parts[1], int(parts[2]), []))
        elif parts[0] == "property":
            if not elements:
                raise MeshParseError(f"{path.name}: property before element", lineno)
            if parts[1] == "list":
                if parts[2] not in _PLY_TYPES or parts[3] not in _PLY_TYPES:
                    raise MeshParseError(f"{path.name}: unknown list type", lineno)
                elements[-1][2].append((parts[4], "list", _PLY_TYPES[parts[2]], _PLY_TYPES[parts[3]]))
            else:
                if parts[1] not in _PLY_TYPES:
                    raise MeshParseError(f"{path.name}: unknown type {parts[1]}", lineno)
                elements[-1][2].append((parts[2], "scalar", _PLY_TYPES[parts[1]], None))
    if fmt != "binary_little_endian":
        raise MeshParseError(f"{path.name}: only binary_little_endian PLY is supported", 1)

    verts = faces = None
    for name, count, props in elements:
        if all(kind == "scalar" for _, kind, _, _ in props):
            dt = np.dtype([(pname, "<" + t) for pname, _, t, _ in props])
            need = dt.itemsize * count
            if offset + need > len(data):
                raise MeshParseError(f"{path.name}: truncated {name} block", offset, "byte")
            arr = np.frombuffer(data, dtype=dt, count=count, offset=offset)
            offset += need
            if name == "vertex":
                verts = np.stack([arr["x"], arr["y"], arr["z"]], axis=1).astype(np.float64)
            continue
        rows = []
        for _ in range(count):
            row = []
            for pname, kind, t, t2 in props:
                if kind == "scalar":
                    size = np.dtype(t).itemsize
                    if offset + size > len(data):
                        raise MeshParseError(f"{path.name}: truncated {name}", offset, "byte")
                    val = np.frombuffer(data, "<" + t, 1, offset)[0]
                    offset += size
                else:
                    csize = np.dtype(t).itemsize
                    if offset + csize > len(data):
                        raise MeshParseError(f"{path.name}: truncated {name}", offset, "byte")
                    n = int(np.frombuffer(data, "<" + t, 1, offset)[0])
                    offset += csize
                    isize = np.dtype(t2).itemsize
                    if offset + n * isize > len(data):
                        raise MeshParseError(f"{path.name}: truncated {name}", offset, "byte")
                    val = np.frombuffer(data, "<" + t2, n, offset).astype(np.int64)
                    offset += n * isize
                if pname in ("vertex_indices", "vertex_index"):
                    row = val
            rows.append(row)
        if name == "face":
            tris = []
            for r in rows:
                if len(r) < 3:
                    raise MeshParseError(f"{path.name}: face with {len(r)} vertices", offset, "byte")
                tris.extend([r[0], r[k], r[k + 1]] for k in range(1, len(r) - 1))
            faces = np.array(tris, dtype=np.int64).reshape(-1, 3)
    if verts is None or faces is None:
        raise MeshParseError(f"{path.name}: missing vertex or face element", offset, "byte")
    if faces.size and (faces.min() < 0 or faces.max() >= len(verts)):
        raise MeshParseError(f"{path.name}: face index out of range", offset, "byte")
    return verts, faces


def _ply_bytes(mesh: TriMesh, face_colors: np.ndarray | None = None) -> bytes:
    header = [
        "ply",
        "format binary_little_endian 1.0",
        f"element vertex {len(mesh.vertices)}",
        "property double x",
        "property double y",
        "property double z",
        f"element face {mesh.n_faces}",
        "property list uchar int vertex_indices",
    ]
    if face_colors is not None:
        header += ["property uchar red", "property uchar green", "property uchar blue"]
    header.append("end_header")
    out = ("\n".join(header) + "\n").encode("ascii")
    out += mesh.vertices.astype("<f8").tobytes()
    fields = [("n", "u1"), ("idx", "<i4", 3)]
    if face_colors is not None:
        fields.append(("rgb", "u1", 3))
    rec = np.zeros(mesh.n_faces, dtype=fields)
    rec["n"] = 3
    rec["idx"] = mesh.faces
    if face_colors is not None:
        rec["rgb"] = face_colors
    return out + rec.tobytes()


def _write_ply(path: Path, mesh: TriMesh) -> None:
    path.write_bytes(_ply_bytes(mesh))


def palette(label: int) -> tuple[int, int, int]:
    """Deterministic colour for an id; 0 is mid grey."""
    if label == 0:
        return (128, 128, 128)
    # splitmix64 finaliser, platform independent
    z = (int(label) + 0x9E3779B97F4A7C15) & 0xFFFFFFFFFFFFFFFF
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & 0xFFFFFFFFFFFFFFFF
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & 0xFFFFFFFFFFFFFFFF
    z ^= z >> 31
    return (64 + (z & 0xFF) % 192, 64 + ((z >> 8) & 0xFF) % 192, 64 + ((z >> 16) & 0xFF) % 192)


def write_colored_mesh(
    path: str | os.PathLike,
    mesh: TriMesh,
    labels: Sequence[int] | np.ndarray,
    palette_fn: Callable[[int], tuple[int, int, int]] = palette,
) -> None:
    labels = np.asarray(labels).reshape(-1)
    if len(labels) != mesh.n_faces:
        raise ArityError(f"{len(labels)} labels for {mesh.n_faces} faces")
    uniq, inv = np.unique(labels, return_inverse=True)
    lut = np.array([palette_fn(int(u)) for u in uniq], dtype=np.uint8).reshape(-1, 3)
    Path(path).write_bytes(_ply_bytes(mesh, lut[inv]))


def read_face_colors(path: str | os.PathLike) -> np.ndarray:
    """Per-face RGB of a file produced by write_colored_mesh."""
    data = Path(path).read_bytes()
    end = data.find(b"end_header\n") + len(b"end_header\n")
    header = data[:end].decode("ascii").splitlines()
    nv = int(next(l for l in header if l.startswith("element vertex")).split()[2])
    nf = int(next(l for l in header if l.startswith("element face")).split()[2])
    rec = np.frombuffer(data, dtype=[("n", "u1"), ("idx", "<i4", 3), ("rgb", "u1", 3)], count=nf, offset=end + 24 * nv)
    return rec["rgb"].copy()


# --------------------------------------------------------------------------
# Label images (.lbl)

_LBL_MAGIC = b"PLBL"
_LBL_VERSION = 1


@dataclass
class MaskLayer:
    instance_id: int
    class_id: int
    score: float
    mask: np.ndarray  # (H, W) bool


def resolve_layers(layers: Sequence[MaskLayer], width: int, height: int) -> LabelImage:
    """Flatten overlapping masks; each pixel takes the highest-scoring layer.

    Ties go to the lower instance id (then lower class id).
    """
    inst = np.zeros((height, width), dtype=np.uint32)
    cls = np.zeros((height, width), dtype=np.uint32)
    score = np.zeros((height, width), dtype=np.float32)
    if not layers:
        return LabelImage(inst, cls, score)
    order = sorted(range(len(layers)), key=lambda i: (-np.float32(layers[i].score), layers[i].instance_id, layers[i].class_id, i))
    taken = np.zeros((height, width), dtype=bool)
    for i in order:
        lay = layers[i]
        m = np.asarray(lay.mask, dtype=bool)
        if m.shape != (height, width):
            raise FormatError("mask layer shape mismatch")
        m = m & ~taken
        inst[m] = lay.instance_id
        cls[m] = lay.class_id
        score[m] = lay.score
        taken |= m
    return LabelImage(inst, cls, score)


def label_layers(labels: LabelImage) -> list[MaskLayer]:
    """One layer per labelled (instance, class) segment."""
    score = labels.score
    out = []
    for inst, cls in labels.segments():
        m = (labels.instance_id == inst) & (labels.class_id == cls)
        s = float(score[m].max()) if score is not None else 1.0
        out.append(MaskLayer(inst, cls, s, m))
    return out


def save_label_image(path: str | os.PathLike, labels: LabelImage) -> None:
    h, w = labels.shape
    save_label_layers(path, w, h, label_layers(labels))


def save_label_layers(path: str | os.PathLike, width: int, height: int, layers: Sequence[MaskLayer]) -> None:
    w, h = width, height
    buf = [_LBL_MAGIC, struct.pack("<IIII", _LBL_VERSION, w, h, len(layers))]
    for lay in layers:
        buf.append(struct.pack("<IIf", lay.instance_id, lay.class_id, lay.score))
        buf.append(np.asarray(lay.mask, dtype=np.uint8).tobytes())
    Path(path).write_bytes(b"".join(buf))


def read_label_layers(path: str | os.PathLike) -> tuple[int, int, list[MaskLayer]]:
    data = Path(path).read_bytes()
    if data[:4] != _LBL_MAGIC:
        raise FormatError(f"{path}: bad magic {data[:4]!r}")
    if len(data) < 20:
        raise FormatError(f"{path}: truncated header")
    version, w, h, n = struct.unpack_from("<IIII", data, 4)
    if version != _LBL_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    off = 20
    layers = []
    for k in range(n):
        if off + 12 + w * h > len(data):
            raise FormatError(f"{path}: layer {k} payload shorter than declared {w}x{h}")
        inst, cls, score = struct.unpack_from("<IIf", data, off)
        off += 12
        mask = np.frombuffer(data, dtype=np.uint8, count=w * h, offset=off).reshape(h, w)
        if mask.max(initial=0) > 1:
            raise FormatError(f"{path}: layer {k} mask is not binary")
        layers.append(MaskLayer(inst, cls, score, mask.astype(bool)))
        off += w * h
    if off != len(data):
        raise FormatError(f"{path}: {len(data) - off} trailing bytes after declared layers")
    return w, h, layers


def load_label_image(path: str | os.PathLike) -> LabelImage:
    w, h, layers = read_label_layers(path)
    return resolve_layers(layers, w, h)


# --------------------------------------------------------------------------
# Feature maps (.fmap)

_FMAP_MAGIC = b"PFMP"


def save_feature_map(path: str | os.PathLike, features: np.ndarray) -> None:
    features = np.asarray(features, dtype="<f4")
    h, w, d = features.shape
    Path(path).write_bytes(_FMAP_MAGIC + struct.pack("<III", w, h, d) + features.tobytes())


def load_feature_map(path: str | os.PathLike) -> np.ndarray:
    data = Path(path).read_bytes()
    if data[:4] != _FMAP_MAGIC:
        raise FormatError(f"{path}: bad magic")
    w, h, d = struct.unpack_from("<III", data, 4)
    if len(data) != 16 + 4 * w * h * d:
        raise FormatError(f"{path}: payload does not match {w}x{h}x{d}")
    arr = np.frombuffer(data, dtype="<f4", offset=16).reshape(h, w, d).astype(np.float32)
    if not np.isfinite(arr).all():
        raise FormatError(f"{path}: non-finite features")
    return arr


# --------------------------------------------------------------------------
# Netpbm images


def save_depth(path: str | os.PathLike, depth_m: np.ndarray) -> None:
    """16-bit PGM in millimetres (netpbm byte order)."""
    mm = np.round(np.asarray(depth_m, dtype=np.float64) * 1000.0)
    mm = np.clip(mm, 0, 65535).astype(">u2")
    h, w = mm.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n65535\n".encode("ascii") + mm.tobytes())


def _read_pnm(path, magic: bytes):
    data = Path(path).read_bytes()
    if data[:2] != magic:
        raise FormatError(f"{path}: expected {magic!r} netpbm file")
    tokens, pos = [], 2
    while len(tokens) < 3:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        tokens.append(int(data[start:pos]))
    return tokens, data, pos + 1


def load_depth(path: str | os.PathLike) -> np.ndarray:
    (w, h, maxval), data, off = _read_pnm(path, b"P5")
    dt = ">u2" if maxval > 255 else "u1"
    if len(data) - off != w * h * np.dtype(dt).itemsize:
        raise FormatError(f"{path}: payload does not match {w}x{h}")
    return np.frombuffer(data, dtype=dt, offset=off).reshape(h, w).astype(np.float64) / 1000.0


def save_ppm(path: str | os.PathLike, rgb: np.ndarray) -> None:
    img = np.clip(np.round(np.asarray(rgb, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)
    h, w, _ = img.shape
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode("ascii") + img.tobytes())


def load_ppm(path: str | os.PathLike) -> np.ndarray:
    (w, h, _), data, off = _read_pnm(path, b"P6")
    return np.frombuffer(data, dtype=np.uint8, offset=off, count=w * h * 3).reshape(h, w, 3) / 255.0


def save_pgm16(path: str | os.PathLike, img: np.ndarray) -> None:
    arr = np.clip(np.asarray(img), 0, 65535).astype(">u2")
    h, w = arr.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n65535\n".encode("ascii") + arr.tobytes())


# --------------------------------------------------------------------------
# Cameras, class tables, configs


def save_cameras(path: str | os.PathLike, frames: Iterable[Frame]) -> None:
    frames = list(frames)
    lines = []
    if frames:
        lines.append(f"# resolution {frames[0].width} {frames[0].height}")
    for fr in frames:
        vals = [fr.fx, fr.fy, fr.cx, fr.cy] + fr.pose.reshape(-1).tolist()
        lines.append(fr.frame_id + " " + " ".join(repr(float(v)) for v in vals))
    Path(path).write_text("\n".join(lines) + "\n")


def load_cameras(path: str | os.PathLike, width: int | None = None, height: int | None = None) -> list[Frame]:
    frames = []
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.strip()
        if line.startswith("# resolution"):
            _, _, w, h = line.split()
            width = width or int(w)
            height = height or int(h)
            continue
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 17:
            raise FormatError(f"{path}:{lineno}: expected 17 fields, got {len(parts)}")
        if width is None or height is None:
            raise FormatError(f"{path}: image resolution unknown")
        vals = [float(x) for x in parts[1:]]
        frames.append(Frame(parts[0], *vals[:4], np.array(vals[4:]).reshape(3, 4), width, height))
    return frames


def save_class_table(path: str | os.PathLike, table: ClassTable) -> None:
    Path(path).write_text("".join(f"{cid} {name} {kind}\n" for cid, (name, kind) in sorted(table.entries.items())))


def load_class_table(path: str | os.PathLike) -> ClassTable:
    entries = {}
    for raw in Path(path).read_text().splitlines():
        line = raw.split("#", 1)[0].strip()
        if line:
            cid, name, kind = line.split()
            entries[int(cid)] = (name, kind)
    return ClassTable(entries)


def load_config(path: str | os.PathLike) -> dict[str, str]:
    out = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise FormatError(f"{path}:{lineno}: expected key=value")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def save_config(path: str | os.PathLike, values: dict[str, object]) -> None:
    Path(path).write_text("".join(f"{k} = {v}\n" for k, v in values.items()))


# --------------------------------------------------------------------------
# Scene directories
#
#   <dir>/cameras.txt           trajectory (+ "# resolution W H")
#   <dir>/<id>.depth.pgm        depth
#   <dir>/<id>.lbl              labels
#   <dir>/<id>.fmap             features
#   <dir>/<id>.rgb.ppm          colour


def save_frames(directory: str | os.PathLike, frames: Sequence[Frame], write_cameras: bool = True) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    if write_cameras:
        save_cameras(d / "cameras.txt", frames)
    for fr in frames:
        if fr.depth is not None:
            save_depth(d / f"{fr.frame_id}.depth.pgm", fr.depth)
        if fr.labels is not None:
            save_label_image(d / f"{fr.frame_id}.lbl", fr.labels)
        if fr.features is not None:
            save_feature_map(d / f"{fr.frame_id}.fmap", fr.features)
        if fr.color is not None:
            save_ppm(d / f"{fr.frame_id}.rgb.ppm", fr.color)


def save_label_dir(directory: str | os.PathLike, labels: dict[str, LabelImage]) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for fid, lab in labels.items():
        save_label_image(d / f"{fid}.lbl", lab)


def load_label_dir(directory: str | os.PathLike) -> dict[str, LabelImage]:
    d = Path(directory)
    return {p.name[: -len(".lbl")]: load_label_image(p) for p in sorted(d.glob("*.lbl"))}


def load_frames(
    directory: str | os.PathLike,
    cameras: str | os.PathLike | None = None,
    labels_dir: str | os.PathLike | None = None,
    features_dir: str | os.PathLike | None = None,
) -> list[Frame]:
    d = Path(directory)
    frames = load_cameras(Path(cameras) if cameras else d / "cameras.txt")
    ldir = Path(labels_dir) if labels_dir else d
    fdir = Path(features_dir) if features_dir else d
    out = []
    for fr in frames:
        kw = {}
        p = d / f"{fr.frame_id}.depth.pgm"
        if p.exists():
            kw["depth"] = load_depth(p)
        p = ldir / f"{fr.frame_id}.lbl"
        if p.exists():
            kw["labels"] = load_label_image(p)
        p = fdir / f"{fr.frame_id}.fmap"
        if p.exists():
            kw["features"] = load_feature_map(p)
        p = d / f"{fr.frame_id}.rgb.ppm"
        if p.exists():
            kw["color"] = load_ppm(p)
        out.append(fr.with_(**kw))
    return out
