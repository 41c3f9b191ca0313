"""Procedural ground-truth scenes, trajectories, observations and corruptions.

A scene is an open-top room (floor and walls are stuff) holding boxes,
spheres and cylinders (things). Every face knows its GT region, so every
later stage can be checked exactly against the generator.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import scene_io
from .rasterizer import IdBuffer, rasterize
from .scene_io import STUFF, THING, UNKNOWN, UNLABELED, ClassTable, Frame, LabelImage, TriMesh

logger = logging.getLogger(__name__)

FEATURE_DIM = 96
FEATURE_SIGMA = 0.05
_EMBED_SEED = 0x5EED

DEFAULT_CLASSES = ClassTable(
    {
        1: ("floor", STUFF),
        2: ("wall", STUFF),
        3: ("chair", THING),
        4: ("table", THING),
        5: ("sofa", THING),
        6: ("cabinet", THING),
        7: ("lamp", THING),
        8: ("bin", THING),
        9: ("ball", THING),
        10: ("plant", THING),
    }
)
_SHAPE_BY_NAME = {
    "chair": "box", "table": "box", "sofa": "box", "cabinet": "box",
    "lamp": "cylinder", "bin": "cylinder", "ball": "sphere", "plant": "sphere",
}


class PlacementError(RuntimeError):
    pass


@dataclass(eq=False)
class SynthScene:
    mesh: TriMesh
    face_region: np.ndarray  # (F,) region index
    region_class: np.ndarray  # (R,) class id per region
    region_instance: np.ndarray  # (R,) GT thing instance id, 0 for stuff
    classes: ClassTable
    cameras: list[Frame]
    seed: int
    objects: list[dict] = field(default_factory=list)

    @property
    def face_instance(self) -> np.ndarray:
        return self.region_instance[self.face_region]

    @property
    def face_class(self) -> np.ndarray:
        return self.region_class[self.face_region]

    @property
    def n_things(self) -> int:
        return int(self.region_instance.max())

    def instance_class(self) -> dict[int, int]:
        return {int(i): int(c) for i, c in zip(self.region_instance, self.region_class) if i > 0}


@dataclass
class CorruptionSpec:
    p_drop: float = 0.0
    p_flip: float = 0.0
    permute_ids: bool = False
    erode_px: int = 0
    p_partial: float = 0.0

    def __post_init__(self):
        for name in ("p_drop", "p_flip", "p_partial"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")
        if self.erode_px < 0:
            raise ValueError("erode_px must be non-negative")


@dataclass
class Corruption:
    labels: list[LabelImage]
    # per frame: observed 2D id -> GT instance id (identity when not permuted)
    id_maps: list[dict[int, int]]
    dropped: list[list[int]]
    flipped: list[dict[int, int]]  # GT instance -> observed class
    omitted_classes: list[list[int]]


# --------------------------------------------------------------------------
# Geometry builders


def _grid(origin, u, v, nu: int, nv: int) -> tuple[np.ndarray, np.ndarray]:
    """Planar patch origin + s*u + t*v subdivided into nu x nv quads."""
    s = np.linspace(0.0, 1.0, nu + 1)
    t = np.linspace(0.0, 1.0, nv + 1)
    ss, tt = np.meshgrid(s, t, indexing="ij")
    verts = np.asarray(origin) + ss[..., None] * np.asarray(u) + tt[..., None] * np.asarray(v)
    verts = verts.reshape(-1, 3)
    idx = np.arange((nu + 1) * (nv + 1)).reshape(nu + 1, nv + 1)
    a, b, c, d = idx[:-1, :-1], idx[1:, :-1], idx[1:, 1:], idx[:-1, 1:]
    faces = np.concatenate([np.stack([a, b, c], -1).reshape(-1, 3), np.stack([a, c, d], -1).reshape(-1, 3)])
    return verts, faces


def _merge(parts: list[tuple[np.ndarray, np.ndarray]]) -> tuple[np.ndarray, np.ndarray]:
    """Concatenate parts and weld coincident vertices."""
    verts, faces, off = [], [], 0
    for v, f in parts:
        verts.append(v)
        faces.append(f + off)
        off += len(v)
    v = np.concatenate(verts)
    f = np.concatenate(faces)
    key = np.round(v, 9)
    uniq, first, inv = np.unique(key, axis=0, return_index=True, return_inverse=True)
    order = np.argsort(first)
    remap = np.empty(len(order), dtype=np.int64)
    remap[order] = np.arange(len(order))
    return v[first[order]], remap[inv.reshape(-1)][f]


def box_mesh(center, size, n_div: int = 4, bottom: bool = False):
    cx, cy, z0 = center
    sx, sy, sz = size
    x0, x1, y0, y1, z1 = cx - sx / 2, cx + sx / 2, cy - sy / 2, cy + sy / 2, z0 + sz
    parts = [
        _grid((x0, y0, z1), (sx, 0, 0), (0, sy, 0), n_div, n_div),  # top
        _grid((x0, y0, z0), (sx, 0, 0), (0, 0, sz), n_div, n_div),  # -y
        _grid((x1, y1, z0), (-sx, 0, 0), (0, 0, sz), n_div, n_div),  # +y
        _grid((x0, y1, z0), (0, -sy, 0), (0, 0, sz), n_div, n_div),  # -x
        _grid((x1, y0, z0), (0, sy, 0), (0, 0, sz), n_div, n_div),  # +x
    ]
    if bottom:
        parts.append(_grid((x0, y0, z0), (0, sy, 0), (sx, 0, 0), n_div, n_div))
    return _merge(parts)


def sphere_mesh(center, radius, n_lon: int = 16, n_lat: int = 10):
    theta = np.linspace(0, np.pi, n_lat + 1)[1:-1]
    phi = np.linspace(0, 2 * np.pi, n_lon, endpoint=False)
    tt, pp = np.meshgrid(theta, phi, indexing="ij")
    ring = np.stack([np.sin(tt) * np.cos(pp), np.sin(tt) * np.sin(pp), np.cos(tt)], -1).reshape(-1, 3)
    verts = np.concatenate([[[0, 0, 1.0]], ring, [[0, 0, -1.0]]]) * radius + np.asarray(center)
    faces = []
    n_ring = n_lat - 1
    south = 1 + n_ring * n_lon
    for j in range(n_lon):
        j2 = (j + 1) % n_lon
        faces.append([0, 1 + j, 1 + j2])
        for i in range(n_ring - 1):
            a, b = 1 + i * n_lon + j, 1 + i * n_lon + j2
            c, d = a + n_lon, b + n_lon
            faces += [[a, c, d], [a, d, b]]
        base = 1 + (n_ring - 1) * n_lon
        faces.append([base + j, south, base + j2])
    return verts, np.array(faces, dtype=np.int64)


def cylinder_mesh(center, radius, height, n_seg: int = 16, n_rings: int = 3):
    cx, cy, z0 = center
    phi = np.linspace(0, 2 * np.pi, n_seg, endpoint=False)
    zs = np.linspace(z0, z0 + height, n_rings + 1)
    ring = np.stack([cx + radius * np.cos(phi), cy + radius * np.sin(phi)], -1)
    verts = np.concatenate([np.column_stack([ring, np.full(n_seg, z)]) for z in zs])
    faces = []
    for r in range(n_rings):
        for j in range(n_seg):
            j2 = (j + 1) % n_seg
            a, b = r * n_seg + j, r * n_seg + j2
            faces += [[a, b, b + n_seg], [a, b + n_seg, a + n_seg]]
    top = len(verts)
    verts = np.concatenate([verts, [[cx, cy, z0 + height]]])
    base = n_rings * n_seg
    for j in range(n_seg):
        faces.append([base + j, base + (j + 1) % n_seg, top])
    return verts, np.array(faces, dtype=np.int64)


def room_mesh(size, n_floor: int = 12, n_wall: int = 5):
    lx, ly, h = size
    x0, y0 = -lx / 2, -ly / 2
    floor = _grid((x0, y0, 0), (lx, 0, 0), (0, ly, 0), n_floor, n_floor)
    walls = _merge(
        [
            _grid((x0, y0, 0), (lx, 0, 0), (0, 0, h), n_floor, n_wall),
            _grid((x0 + lx, y0, 0), (0, ly, 0), (0, 0, h), n_floor, n_wall),
            _grid((x0 + lx, y0 + ly, 0), (-lx, 0, 0), (0, 0, h), n_floor, n_wall),
            _grid((x0, y0 + ly, 0), (0, -ly, 0), (0, 0, h), n_floor, n_wall),
        ]
    )
    return floor, walls


def unit_cube_mesh() -> TriMesh:
    v = np.array([[x, y, z] for x in (0, 1) for y in (0, 1) for z in (0, 1)], dtype=np.float64)
    f = [[0, 1, 3], [0, 3, 2], [4, 6, 7], [4, 7, 5], [0, 4, 5], [0, 5, 1],
         [2, 3, 7], [2, 7, 6], [0, 2, 6], [0, 6, 4], [1, 5, 7], [1, 7, 3]]
    return TriMesh(v, np.array(f))


# --------------------------------------------------------------------------
# Cameras


def look_at(eye, target, up=(0.0, 0.0, 1.0)) -> np.ndarray:
    """World-to-camera [R|t] for an x-right, y-down, z-forward camera."""
    eye = np.asarray(eye, dtype=np.float64)
    f = np.asarray(target, dtype=np.float64) - eye
    f /= np.linalg.norm(f)
    right = np.cross(f, up)
    right /= np.linalg.norm(right)
    down = np.cross(f, right)
    r = np.stack([right, down, f])
    return np.hstack([r, (-r @ eye)[:, None]])


def orbit_trajectory(
    n_frames: int,
    radius: float,
    height: float,
    target=(0.0, 0.0, 0.0),
    width: int = 128,
    height_px: int = 96,
    focal: float = 104.0,
    jitter: float = 0.0,
    seed: int = 0,
) -> list[Frame]:
    rng = np.random.default_rng([seed, 0xCA3])
    frames = []
    for i in range(n_frames):
        a = 2 * np.pi * i / n_frames
        eye = np.array([radius * np.cos(a), radius * np.sin(a), height])
        tgt = np.asarray(target, dtype=np.float64) + rng.uniform(-jitter, jitter, 3) * np.array([1, 1, 0.3])
        frames.append(Frame(f"{i:04d}", focal, focal, width / 2, height_px / 2, look_at(eye, tgt), width, height_px))
    return frames


# --------------------------------------------------------------------------
# Scenes


def generate_scene(
    room_size=(6.0, 6.0, 2.5),
    n_things: int = 8,
    classes: ClassTable = DEFAULT_CLASSES,
    seed: int = 0,
    n_frames: int = 60,
    width: int = 256,
    height: int = 192,
) -> SynthScene:
    if n_things < 1:
        raise ValueError("n_things must be >= 1")
    rng = np.random.default_rng(seed)
    lx, ly, lz = room_size
    stuff = classes.stuff_ids()
    things = classes.thing_ids()
    if len(stuff) < 2 or not things:
        raise ValueError("class table needs two stuff classes (floor, wall) and at least one thing class")

    floor, walls = room_mesh(room_size)
    parts = [floor, walls]
    region_class = [stuff[0], stuff[1]]
    region_instance = [0, 0]
    objects = []
    placed: list[tuple[float, float, float, float]] = []
    margin = 0.15
    for i in range(n_things):
        cls = int(things[i % len(things)] if i < len(things) else rng.choice(things))
        shape = _SHAPE_BY_NAME.get(classes.name(cls), ["box", "sphere", "cylinder"][cls % 3])
        for _ in range(1000):
            if shape == "box":
                sx, sy, sz = rng.uniform(0.45, 1.0), rng.uniform(0.45, 1.0), rng.uniform(0.4, 1.0)
                hx, hy = sx / 2, sy / 2
            elif shape == "sphere":
                r = rng.uniform(0.28, 0.45)
                hx = hy = r
            else:
                r, hz = rng.uniform(0.18, 0.32), rng.uniform(0.5, 1.2)
                hx = hy = r
            cx = rng.uniform(-lx / 2 + 0.4 + hx, lx / 2 - 0.4 - hx)
            cy = rng.uniform(-ly / 2 + 0.4 + hy, ly / 2 - 0.4 - hy)
            box = (cx - hx, cy - hy, cx + hx, cy + hy)
            if all(box[2] + margin <= o[0] or o[2] + margin <= box[0] or box[3] + margin <= o[1] or o[3] + margin <= box[1] for o in placed):
                break
        else:
            raise PlacementError(f"could not place thing {i} without overlap after 1000 attempts")
        placed.append(box)
        if shape == "box":
            part = box_mesh((cx, cy, 0.0), (sx, sy, sz))
            zmax = sz
        elif shape == "sphere":
            part = sphere_mesh((cx, cy, r), r)
            zmax = 2 * r
        else:
            part = cylinder_mesh((cx, cy, 0.0), r, hz)
            zmax = hz
        parts.append(part)
        region_class.append(cls)
        region_instance.append(i + 1)
        objects.append({"instance": i + 1, "class": cls, "shape": shape, "aabb": [box[0], box[1], 0.0, box[2], box[3], zmax]})

    verts, faces, face_region = [], [], []
    off = 0
    for r, (v, f) in enumerate(parts):
        verts.append(v)
        faces.append(f + off)
        face_region.append(np.full(len(f), r))
        off += len(v)
    mesh = TriMesh(np.concatenate(verts), np.concatenate(faces))
    cams = orbit_trajectory(n_frames, 0.42 * min(lx, ly), 2.1, (0.0, 0.0, 0.3), width, height, 0.8125 * width, jitter=0.4, seed=seed)
    return SynthScene(
        mesh, np.concatenate(face_region), np.array(region_class), np.array(region_instance), classes, cams, seed, objects
    )


def generate_sphere_scene(
    radius: float = 0.5,
    n_frames: int = 24,
    width: int = 64,
    height: int = 48,
    seed: int = 0,
    floor: bool = True,
) -> SynthScene:
    """A sphere (thing) resting on a floor plane (stuff), viewed from outside."""
    classes = ClassTable({1: ("floor", STUFF), 2: ("wall", STUFF), 3: ("ball", THING)})
    parts, rc, ri = [], [], []
    if floor:
        parts.append(_grid((-2.0, -2.0, -radius), (4.0, 0, 0), (0, 4.0, 0), 8, 8))
        rc.append(1)
        ri.append(0)
    parts.append(sphere_mesh((0.0, 0.0, 0.0), radius, 32, 20))
    rc.append(3)
    ri.append(1)
    verts, faces, fr, off = [], [], [], 0
    for r, (v, f) in enumerate(parts):
        verts.append(v)
        faces.append(f + off)
        fr.append(np.full(len(f), r))
        off += len(v)
    mesh = TriMesh(np.concatenate(verts), np.concatenate(faces))
    cams = orbit_trajectory(n_frames, 2.6, 1.3, (0.0, 0.0, -0.1), width, height, 0.9 * width, jitter=0.1, seed=seed)
    return SynthScene(mesh, np.concatenate(fr), np.array(rc), np.array(ri), classes, cams, seed)


# --------------------------------------------------------------------------
# Observations


def class_embeddings(n_classes: int, dim: int = FEATURE_DIM) -> np.ndarray:
    """Fixed unit embedding per class id (row 0 is the background)."""
    rng = np.random.default_rng(_EMBED_SEED)
    e = rng.standard_normal((n_classes + 1, dim))
    return e / np.linalg.norm(e, axis=1, keepdims=True)


def face_colors(scene: SynthScene) -> np.ndarray:
    rng = np.random.default_rng(_EMBED_SEED + 1)
    base = rng.uniform(0.2, 0.9, (len(scene.classes) + 1, 3))
    tint = np.random.default_rng([_EMBED_SEED, 2]).uniform(-0.08, 0.08, (len(scene.region_class), 3))
    light = np.array([0.3, 0.5, 0.81])
    shade = 0.75 + 0.25 * np.abs(scene.mesh.face_normals @ (light / np.linalg.norm(light)))
    col = (base[scene.face_class] + tint[scene.face_region]) * shade[:, None]
    return np.clip(col, 0.0, 1.0)


def labels_from_idbuf(scene: SynthScene, idbuf: IdBuffer) -> LabelImage:
    fi = idbuf.face_index
    hit = fi >= 0
    inst = np.zeros(fi.shape, dtype=np.uint32)
    cls = np.zeros(fi.shape, dtype=np.uint32)
    inst[hit] = scene.face_instance[fi[hit]]
    cls[hit] = scene.face_class[fi[hit]]
    score = (cls > 0).astype(np.float32)
    return LabelImage(inst, cls, score)


def render_gt_frames(
    scene: SynthScene,
    n_frames: int | None = None,
    features: bool = True,
    feature_dim: int = FEATURE_DIM,
    return_idbufs: bool = False,
):
    """Exact depth, labels, colour and class-clustered features per camera."""
    cams = scene.cameras if n_frames is None else scene.cameras[:n_frames]
    emb = class_embeddings(len(scene.classes), feature_dim).astype(np.float32)
    fcol = face_colors(scene)
    frames, bufs = [], []
    for k, cam in enumerate(cams):
        ib = rasterize(scene.mesh, cam)
        hit = ib.covered()
        depth = np.where(hit, ib.depth, 0.0)
        labels = labels_from_idbuf(scene, ib)
        color = np.zeros((cam.height, cam.width, 3))
        color[hit] = fcol[ib.face_index[hit]]
        feats = None
        if features:
            rng = np.random.default_rng([scene.seed, k, 0xFEA7])
            noise = rng.standard_normal((cam.height, cam.width, feature_dim)).astype(np.float32) * np.float32(FEATURE_SIGMA)
            feats = emb[labels.class_id] + noise
        frames.append(cam.with_(depth=depth, labels=labels, color=color, features=feats))
        bufs.append(ib)
    return (frames, bufs) if return_idbufs else frames


# --------------------------------------------------------------------------
# Corruption


def corrupt(frames, spec: CorruptionSpec, seed: int, classes: ClassTable, n_instances: int | None = None) -> Corruption:
    """Apply the label corruption model independently to every frame."""
    labels_in = [f.labels if isinstance(f, Frame) else f for f in frames]
    if n_instances is None:
        n_instances = max((int(l.instance_id.max()) for l in labels_in), default=0)
    things = classes.thing_ids()
    out = Corruption([], [], [], [], [])
    struct_el = np.ones((2 * spec.erode_px + 1,) * 2, dtype=bool) if spec.erode_px else None
    for k, lab in enumerate(labels_in):
        rng = np.random.default_rng([seed, k])
        inst = lab.instance_id.copy()
        cls = lab.class_id.copy()
        score = None if lab.score is None else lab.score.copy()

        omitted = []
        if spec.p_partial > 0:
            for c in np.unique(cls[cls != UNKNOWN]).tolist():
                if rng.random() < spec.p_partial:
                    omitted.append(int(c))
        if omitted:
            m = np.isin(cls, omitted)
            inst[m] = UNLABELED
            cls[m] = UNKNOWN

        present = np.unique(inst[inst != UNLABELED]).tolist()
        dropped, flipped = [], {}
        survivors = []
        for g in present:
            m = inst == g
            if spec.p_drop > 0 and rng.random() < spec.p_drop:
                inst[m] = UNLABELED
                cls[m] = UNKNOWN
                dropped.append(int(g))
                continue
            survivors.append(int(g))
            if spec.p_flip > 0 and len(things) > 1 and rng.random() < spec.p_flip:
                cur = int(np.bincount(cls[m]).argmax())
                choices = [c for c in things if c != cur]
                new = int(choices[rng.integers(len(choices))])
                cls[m] = new
                flipped[int(g)] = new
            if struct_el is not None:
                keep = ndimage.binary_erosion(m, structure=struct_el, border_value=1)
                gone = m & ~keep
                inst[gone] = UNLABELED
                cls[gone] = UNKNOWN
        if spec.permute_ids:
            perm = rng.permutation(n_instances) + 1
            id_map = {}
            new_inst = inst.copy()
            for g in survivors:
                m = inst == g
                if m.any():
                    new_inst[m] = perm[g - 1]
                    id_map[int(perm[g - 1])] = g
            inst = new_inst
        else:
            id_map = {g: g for g in survivors if (inst == g).any()}
        if score is not None:
            score[cls == UNKNOWN] = 0.0
        out.labels.append(LabelImage(inst, cls, score))
        out.id_maps.append(id_map)
        out.dropped.append(dropped)
        out.flipped.append(flipped)
        out.omitted_classes.append(omitted)
    return out


# --------------------------------------------------------------------------
# Persistence


def write_scene(
    out_dir,
    scene: SynthScene,
    frames: list[Frame],
    observed: Corruption | None = None,
    spec: CorruptionSpec | None = None,
) -> Path:
    """Write mesh, class table, frames, clean GT labels and gt.json."""
    out = Path(out_dir)
    (out / "frames").mkdir(parents=True, exist_ok=True)
    scene_io.save_mesh(out / "mesh.ply", scene.mesh)
    scene_io.save_class_table(out / "classes.txt", scene.classes)
    obs_labels = observed.labels if observed is not None else [f.labels for f in frames]
    obs = [f.with_(labels=l) for f, l in zip(frames, obs_labels)]
    scene_io.save_frames(out / "frames", obs)
    scene_io.save_label_dir(out / "gt_labels", {f.frame_id: f.labels for f in frames})
    gt = {
        "seed": scene.seed,
        "classes": {str(c): list(v) for c, v in scene.classes.entries.items()},
        "instances": scene.objects,
        "face_region": scene.face_region.tolist(),
        "region_class": scene.region_class.tolist(),
        "region_instance": scene.region_instance.tolist(),
        "corruption": None if spec is None else vars(spec),
    }
    if observed is not None:
        gt["id_maps"] = {f.frame_id: {str(k): v for k, v in m.items()} for f, m in zip(frames, observed.id_maps)}
        gt["dropped"] = {f.frame_id: d for f, d in zip(frames, observed.dropped)}
        gt["flipped"] = {f.frame_id: {str(k): v for k, v in d.items()} for f, d in zip(frames, observed.flipped)}
        gt["omitted_classes"] = {f.frame_id: d for f, d in zip(frames, observed.omitted_classes)}
    (out / "gt.json").write_text(json.dumps(gt, indent=1, sort_keys=True))
    return out


def load_gt(scene_dir) -> dict:
    return json.loads((Path(scene_dir) / "gt.json").read_text())


def make_scene_dir(
    out_dir,
    seed: int = 0,
    n_things: int = 8,
    n_frames: int = 60,
    spec: CorruptionSpec | None = None,
    width: int = 256,
    height: int = 192,
    features: bool = True,
    sphere: bool = False,
) -> Path:
    """Generate, render, optionally corrupt and write one scene directory."""
    if sphere:
        scene = generate_sphere_scene(n_frames=n_frames, width=width, height=height, seed=seed)
    else:
        scene = generate_scene(n_things=n_things, seed=seed, n_frames=n_frames, width=width, height=height)
    frames = render_gt_frames(scene, features=features)
    observed = None
    if spec is not None:
        observed = corrupt(frames, spec, seed, scene.classes, scene.n_things)
    return write_scene(out_dir, scene, frames, observed, spec)
