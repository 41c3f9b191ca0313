"""Scene-level panoptic quality and companion semantic, instance and mesh metrics."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.spatial import cKDTree

from .scene_io import UNKNOWN, UNLABELED, ClassTable, LabelImage, TriMesh

MATCH_IOU = 0.5
MESH_SAMPLES = 100_000


class AlignmentError(ValueError):
    pass


def _check_aligned(pred: Sequence[LabelImage], gt: Sequence[LabelImage]) -> None:
    if len(pred) != len(gt):
        raise AlignmentError(f"{len(pred)} predicted frames vs {len(gt)} ground-truth frames")
    for k, (p, g) in enumerate(zip(pred, gt)):
        if p.shape != g.shape:
            raise AlignmentError(f"frame {k}: shape {p.shape} vs {g.shape}")


# --------------------------------------------------------------------------
# Segments


def segment_keys(labels: LabelImage, classes: ClassTable) -> np.ndarray:
    """Per-pixel (class, instance) packed as class << 32 | instance; -1 = no segment.

    Stuff pixels form one segment per class. Thing pixels need a non-zero
    instance id to belong to a segment.
    """
    cls = labels.class_id.astype(np.int64)
    inst = labels.instance_id.astype(np.int64)
    thing = classes.thing_mask(labels.class_id)
    inst = np.where(thing, inst, 0)
    key = (cls << 32) | inst
    dead = (cls == UNKNOWN) | (thing & (inst == UNLABELED))
    return np.where(dead, -1, key)


@dataclass
class PanopticResult:
    pq: float
    sq: float
    rq: float
    tp: int
    fp: int
    fn: int
    iou_sum: float
    per_class: dict[int, tuple[float, float, float]] = field(default_factory=dict)


def _ratios(iou_sum: float, tp: int, fp: int, fn: int) -> tuple[float, float, float]:
    denom = tp + 0.5 * fp + 0.5 * fn
    if denom == 0:
        return 0.0, 0.0, 0.0
    sq = iou_sum / tp if tp else 0.0
    rq = tp / denom
    return iou_sum / denom, sq, rq


def panoptic_quality_scene(
    pred: Sequence[LabelImage],
    gt: Sequence[LabelImage],
    classes: ClassTable,
) -> PanopticResult:
    """PQ over segments merged across all frames, pooled over classes.

    Ground-truth UNKNOWN pixels are void: they are removed from predicted
    segment areas for IoU, and predicted segments that are mostly void are
    not counted as false positives.
    """
    _check_aligned(pred, gt)
    pk = np.concatenate([segment_keys(p, classes).reshape(-1) for p in pred])
    gk = np.concatenate([segment_keys(g, classes).reshape(-1) for g in gt])
    gvoid = np.concatenate([(g.class_id == UNKNOWN).reshape(-1) for g in gt])

    p_ids, p_inv = np.unique(pk, return_inverse=True)
    g_ids, g_inv = np.unique(gk, return_inverse=True)
    p_area = np.bincount(p_inv, minlength=len(p_ids))
    g_area = np.bincount(g_inv, minlength=len(g_ids))
    p_void = np.bincount(p_inv, weights=gvoid, minlength=len(p_ids))
    pair = np.unique(p_inv * len(g_ids) + g_inv, return_counts=True)
    pi, gi = np.divmod(pair[0], len(g_ids))
    inter = pair[1]

    p_ok = p_ids >= 0
    g_ok = g_ids >= 0
    p_cls = np.where(p_ok, p_ids >> 32, -1)
    g_cls = np.where(g_ok, g_ids >> 32, -1)

    live = p_ok[pi] & g_ok[gi] & (p_cls[pi] == g_cls[gi])
    pi, gi, inter = pi[live], gi[live], inter[live]
    union = p_area[pi] - p_void[pi] + g_area[gi] - inter
    iou = inter / union
    hit = iou > MATCH_IOU
    pi, gi, iou = pi[hit], gi[hit], iou[hit]

    matched_p = np.zeros(len(p_ids), dtype=bool)
    matched_g = np.zeros(len(g_ids), dtype=bool)
    matched_p[pi] = True
    matched_g[gi] = True
    fp_mask = p_ok & ~matched_p & (p_void / np.maximum(p_area, 1) <= 0.5)
    fn_mask = g_ok & ~matched_g

    per_class = {}
    for c in sorted(set(p_cls[p_ok].tolist()) | set(g_cls[g_ok].tolist())):
        sel = g_cls[gi] == c
        per_class[int(c)] = _ratios(
            float(iou[sel].sum()), int(sel.sum()), int((fp_mask & (p_cls == c)).sum()), int((fn_mask & (g_cls == c)).sum())
        )
    tp, fp, fn = len(iou), int(fp_mask.sum()), int(fn_mask.sum())
    iou_sum = float(np.sort(iou).sum())
    pq, sq, rq = _ratios(iou_sum, tp, fp, fn)
    return PanopticResult(pq, sq, rq, tp, fp, fn, iou_sum, per_class)


# --------------------------------------------------------------------------
# Semantic


@dataclass
class SemanticResult:
    miou: float
    macc: float
    per_class: dict[int, tuple[float, float]]  # class -> (IoU, accuracy)
    confusion: np.ndarray  # (K+1, K+1) rows gt, cols pred, index = class id


def semantic_metrics(pred: Sequence[LabelImage], gt: Sequence[LabelImage], n_classes: int | None = None) -> SemanticResult:
    """Mean IoU and mean accuracy over classes present in gt; gt UNKNOWN excluded."""
    _check_aligned(pred, gt)
    pc = np.concatenate([p.class_id.reshape(-1) for p in pred]).astype(np.int64)
    gc = np.concatenate([g.class_id.reshape(-1) for g in gt]).astype(np.int64)
    keep = gc != UNKNOWN
    pc, gc = pc[keep], gc[keep]
    k = int(max(pc.max(initial=0), gc.max(initial=0), n_classes or 0)) + 1
    conf = np.bincount(gc * k + pc, minlength=k * k).reshape(k, k)
    per = {}
    for c in np.flatnonzero(conf.sum(axis=1)):
        if c == UNKNOWN:
            continue
        tp = conf[c, c]
        per[int(c)] = (tp / (conf[c].sum() + conf[:, c].sum() - tp), tp / conf[c].sum())
    if not per:
        return SemanticResult(0.0, 0.0, per, conf)
    vals = np.array(list(per.values()))
    return SemanticResult(float(vals[:, 0].mean()), float(vals[:, 1].mean()), per, conf)


# --------------------------------------------------------------------------
# Coverage


@dataclass
class CoverageResult:
    mcov: float
    mwcov: float
    best_iou: dict[int, float]  # gt instance -> best IoU


def coverage_metrics(
    pred: Sequence[LabelImage],
    gt: Sequence[LabelImage],
    classes: ClassTable | None = None,
) -> CoverageResult:
    """Class-agnostic coverage of merged gt thing instances by merged pred instances."""
    _check_aligned(pred, gt)
    pi = np.concatenate([p.instance_id.reshape(-1) for p in pred]).astype(np.int64)
    gi = np.concatenate([g.instance_id.reshape(-1) for g in gt]).astype(np.int64)
    if classes is not None:
        gthing = np.concatenate([classes.thing_mask(g.class_id).reshape(-1) for g in gt])
        gi = np.where(gthing, gi, UNLABELED)
    g_ids, g_inv = np.unique(gi, return_inverse=True)
    p_ids, p_inv = np.unique(pi, return_inverse=True)
    g_area = np.bincount(g_inv, minlength=len(g_ids))
    p_area = np.bincount(p_inv, minlength=len(p_ids))
    inter = np.bincount(g_inv * len(p_ids) + p_inv, minlength=len(g_ids) * len(p_ids)).reshape(len(g_ids), len(p_ids))
    union = g_area[:, None] + p_area[None, :] - inter
    iou = np.where(union > 0, inter / np.maximum(union, 1), 0.0)
    iou[:, p_ids == UNLABELED] = 0.0
    best = {}
    for r, g in enumerate(g_ids.tolist()):
        if g != UNLABELED:
            best[int(g)] = float(iou[r].max(initial=0.0))
    if not best:
        return CoverageResult(0.0, 0.0, best)
    ids = sorted(best)
    vals = np.array([best[g] for g in ids])
    areas = np.array([g_area[np.searchsorted(g_ids, g)] for g in ids], dtype=np.float64)
    return CoverageResult(float(vals.mean()), float((vals * areas).sum() / areas.sum()), best)


# --------------------------------------------------------------------------
# Mesh


def sample_surface(mesh: TriMesh, n: int, seed: int = 0) -> np.ndarray:
    """Area-uniform points on the mesh surface."""
    rng = np.random.default_rng(seed)
    areas = mesh.face_areas()
    face = rng.choice(len(areas), size=n, p=areas / areas.sum())
    r1 = np.sqrt(rng.random(n))
    r2 = rng.random(n)
    tri = mesh.triangles()[face]
    return (1 - r1)[:, None] * tri[:, 0] + (r1 * (1 - r2))[:, None] * tri[:, 1] + (r1 * r2)[:, None] * tri[:, 2]


def closest_on_triangles(p: np.ndarray, a: np.ndarray, b: np.ndarray, c: np.ndarray) -> np.ndarray:
    """Closest point on triangle (a, b, c) to p, row-wise (Voronoi-region method)."""
    ab, ac, ap = b - a, c - a, p - a
    d1 = np.einsum("ij,ij->i", ab, ap)
    d2 = np.einsum("ij,ij->i", ac, ap)
    bp = p - b
    d3 = np.einsum("ij,ij->i", ab, bp)
    d4 = np.einsum("ij,ij->i", ac, bp)
    cp = p - c
    d5 = np.einsum("ij,ij->i", ab, cp)
    d6 = np.einsum("ij,ij->i", ac, cp)
    vc = d1 * d4 - d3 * d2
    vb = d5 * d2 - d1 * d6
    va = d3 * d6 - d5 * d4

    out = np.empty_like(p)
    done = np.zeros(len(p), dtype=bool)

    def put(mask, value):
        m = mask & ~done
        out[m] = value[m] if value.ndim == 2 else value
        done[m] = True

    with np.errstate(divide="ignore", invalid="ignore"):
        put((d1 <= 0) & (d2 <= 0), a)
        put((d3 >= 0) & (d4 <= d3), b)
        v = d1 / (d1 - d3)
        put((vc <= 0) & (d1 >= 0) & (d3 <= 0), a + v[:, None] * ab)
        put((d6 >= 0) & (d5 <= d6), c)
        w = d2 / (d2 - d6)
        put((vb <= 0) & (d2 >= 0) & (d6 <= 0), a + w[:, None] * ac)
        w = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        put((va <= 0) & ((d4 - d3) >= 0) & ((d5 - d6) >= 0), b + w[:, None] * (c - b))
        denom = 1.0 / (va + vb + vc)
        v = vb * denom
        w = vc * denom
        put(np.ones(len(p), dtype=bool), a + v[:, None] * ab + w[:, None] * ac)
    return out


def point_triangle_distance(p, a, b, c) -> np.ndarray:
    return np.linalg.norm(p - closest_on_triangles(p, a, b, c), axis=1)


def nearest_distance_bruteforce(points: np.ndarray, mesh: TriMesh, chunk: int = 256) -> np.ndarray:
    tri = mesh.triangles()
    out = np.empty(len(points))
    for s in range(0, len(points), chunk):
        q = points[s : s + chunk]
        qq = np.repeat(q, len(tri), axis=0)
        t = np.tile(tri, (len(q), 1, 1))
        d = point_triangle_distance(qq, t[:, 0], t[:, 1], t[:, 2]).reshape(len(q), len(tri))
        out[s : s + chunk] = d.min(axis=1)
    return out


class SurfaceQuery:
    """Exact nearest-surface distance, pruned by a k-d tree over face centroids.

    A face whose centroid is farther than ``best + radius_max`` cannot beat the
    current best, so the candidate set is always complete.
    """

    def __init__(self, mesh: TriMesh, k: int = 16):
        self.tri = mesh.triangles()
        self.cent = self.tri.mean(axis=1)
        self.radius = float(np.linalg.norm(self.tri - self.cent[:, None, :], axis=2).max())
        self.tree = cKDTree(self.cent)
        self.k = min(k, len(self.tri))

    def _dist(self, q: np.ndarray, faces: np.ndarray) -> np.ndarray:
        t = self.tri[faces]
        return point_triangle_distance(q, t[:, 0], t[:, 1], t[:, 2])

    def distance(self, points: np.ndarray) -> np.ndarray:
        pts = np.asarray(points, dtype=np.float64)
        dc, fi = self.tree.query(pts, k=self.k)
        dc = dc.reshape(len(pts), -1)
        fi = fi.reshape(len(pts), -1)
        d = self._dist(np.repeat(pts, fi.shape[1], axis=0), fi.reshape(-1)).reshape(fi.shape)
        best = d.min(axis=1)
        if self.k < len(self.tri):
            unsure = np.flatnonzero(dc[:, -1] - self.radius < best)
            for i in unsure:
                cand = np.array(self.tree.query_ball_point(pts[i], best[i] + self.radius), dtype=np.int64)
                if len(cand):
                    best[i] = min(best[i], self._dist(np.repeat(pts[i : i + 1], len(cand), axis=0), cand).min())
        return best


@dataclass
class MeshResult:
    comp: float  # cm
    acc: float  # cm
    cl1: float  # cm


def mesh_metrics(pred: TriMesh, gt: TriMesh, n_samples: int = MESH_SAMPLES, seed: int = 0) -> MeshResult:
    """Accuracy (pred to gt), completeness (gt to pred) and their mean, in cm."""
    if pred.n_faces == 0 or gt.n_faces == 0:
        raise ValueError("mesh metrics need non-empty meshes")
    sp = sample_surface(pred, n_samples, seed)
    sg = sample_surface(gt, n_samples, seed + 1)
    acc = float(SurfaceQuery(gt).distance(sp).mean()) * 100.0
    comp = float(SurfaceQuery(pred).distance(sg).mean()) * 100.0
    return MeshResult(comp, acc, 0.5 * (acc + comp))


# --------------------------------------------------------------------------
# Report


@dataclass
class MetricReport:
    pq: float = 0.0
    sq: float = 0.0
    rq: float = 0.0
    miou: float = 0.0
    macc: float = 0.0
    mcov: float = 0.0
    mwcov: float = 0.0
    mesh: MeshResult | None = None
    per_class_pq: dict[int, tuple[float, float, float]] = field(default_factory=dict)
    per_class_sem: dict[int, tuple[float, float]] = field(default_factory=dict)
    extra: dict[str, float] = field(default_factory=dict)

    def check(self) -> None:
        for k in ("pq", "sq", "rq", "miou", "macc", "mcov", "mwcov"):
            v = getattr(self, k)
            assert 0.0 <= v <= 1.0, f"{k}={v} outside [0, 1]"
        assert abs(self.pq - self.sq * self.rq) <= 1e-9, "PQ != SQ x RQ"

    def to_text(self, classes: ClassTable | None = None) -> str:
        head = ["PQ_s", "SQ", "RQ", "mIoU", "mAcc", "mCov", "mW-Cov"]
        vals = [self.pq, self.sq, self.rq, self.miou, self.macc, self.mcov, self.mwcov]
        lines = [" | ".join(f"{h:>7}" for h in head), " | ".join(f"{100 * v:7.2f}" for v in vals)]
        if self.mesh is not None:
            lines += ["", f"{'Comp':>7} | {'Acc':>7} | {'C-L1':>7}  (cm)", f"{self.mesh.comp:7.3f} | {self.mesh.acc:7.3f} | {self.mesh.cl1:7.3f}"]
        if self.per_class_pq or self.per_class_sem:
            lines += ["", f"{'class':<12} {'PQ':>7} {'SQ':>7} {'RQ':>7} {'IoU':>7} {'Acc':>7}"]
            for c in sorted(set(self.per_class_pq) | set(self.per_class_sem)):
                name = classes.name(c) if classes is not None and c in classes.entries else str(c)
                pq = self.per_class_pq.get(c)
                sm = self.per_class_sem.get(c)
                cols = [f"{100 * v:7.2f}" for v in pq] if pq else ["      -"] * 3
                cols += [f"{100 * v:7.2f}" for v in sm] if sm else ["      -"] * 2
                lines.append(f"{name:<12} " + " ".join(cols))
        for k in sorted(self.extra):
            lines.append(f"{k} = {self.extra[k]:.6f}")
        return "\n".join(lines) + "\n"


def evaluate_frames(
    pred: Sequence[LabelImage],
    gt: Sequence[LabelImage],
    classes: ClassTable,
    pred_mesh: TriMesh | None = None,
    gt_mesh: TriMesh | None = None,
    mesh_samples: int = MESH_SAMPLES,
) -> MetricReport:
    pan = panoptic_quality_scene(pred, gt, classes)
    sem = semantic_metrics(pred, gt, len(classes))
    cov = coverage_metrics(pred, gt, classes)
    mesh = mesh_metrics(pred_mesh, gt_mesh, mesh_samples) if pred_mesh is not None and gt_mesh is not None else None
    rep = MetricReport(pan.pq, pan.sq, pan.rq, sem.miou, sem.macc, cov.mcov, cov.mwcov, mesh, pan.per_class, sem.per_class)
    rep.check()
    return rep
