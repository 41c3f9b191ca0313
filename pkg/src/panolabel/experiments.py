"""Measurement routines behind the acceptance checks and ``scripts/``.

Each routine builds its own synthetic input, runs the library, and scores the
result against ground truth the generator knows.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import associate as asc
from . import field as F
from . import instgraph, metrics, pipeline, rasterizer, scene_io, superface, synth
from . import propagate as prop_mod
from .scene_io import UNKNOWN

ASSOCIATION_CORRUPTION = synth.CorruptionSpec(p_drop=0.3, permute_ids=True, erode_px=2)


# --------------------------------------------------------------------------
# Association and correction


@dataclass
class AssociationTrial:
    seed: int
    n_gt: int
    n_recovered: int
    mapped_ok: int
    mapped_total: int
    class_ok: int  # matched-instance pixels carrying the GT class
    class_total: int
    flip_majority: list[int]  # GT instances whose observations are mostly flipped
    seconds: float

    @property
    def count_ok(self) -> bool:
        return self.n_gt == self.n_recovered

    @property
    def mapping_accuracy(self) -> float:
        return self.mapped_ok / max(self.mapped_total, 1)

    @property
    def class_accuracy(self) -> float:
        return self.class_ok / max(self.class_total, 1)


def superface_gt_instance(scene: synth.SynthScene, seg: superface.SuperfaceSegmentation) -> np.ndarray:
    """GT thing instance per superface by area-weighted face majority (0 = stuff)."""
    area = scene.mesh.face_areas()
    k = scene.n_things + 1
    tally = np.bincount(seg.face_to_sf * k + scene.face_instance, weights=area, minlength=seg.n_superfaces * k)
    return tally.reshape(seg.n_superfaces, k).argmax(axis=1)


def association_trial(
    seed: int,
    spec: synth.CorruptionSpec = ASSOCIATION_CORRUPTION,
    n_things: int = 8,
    n_frames: int = 60,
    width: int = 256,
    height: int = 192,
    theta: float = instgraph.DEFAULT_THETA,
    iou: float = asc.DEFAULT_IOU,
    deduct: str = instgraph.DEDUCT_ALL,
) -> AssociationTrial:
    scene = synth.generate_scene(n_things=n_things, seed=seed, n_frames=n_frames, width=width, height=height)
    frames = synth.render_gt_frames(scene, features=False)
    cor = synth.corrupt(frames, spec, seed, scene.classes, scene.n_things)

    t0 = time.perf_counter()
    seg = superface.segment(superface.build_normal_graph(scene.mesh))
    bufs = rasterizer.rasterize_all(scene.mesh, frames)
    graph = instgraph.build_scene_graph(bufs, cor.labels, seg, theta, scene.classes, deduct)
    clusters = instgraph.cut_and_cluster(graph)
    fids = [f.frame_id for f in frames]
    res = asc.associate(clusters, superface.superface_areas(scene.mesh, seg), seg, fids, bufs, cor.labels, iou, scene.classes)
    seconds = time.perf_counter() - t0

    sf_gt = superface_gt_instance(scene, seg)
    area = superface.superface_areas(scene.mesh, seg)
    gid_to_gt = {}
    for gid, inst in res.imap.instances.items():
        gid_to_gt[gid] = int(np.bincount(sf_gt[inst.nodes], weights=area[inst.nodes]).argmax())

    mapped_ok = mapped_total = 0
    for fid, id_map in zip(fids, cor.id_maps):
        m = res.matches[fid]
        for obs, gt in id_map.items():
            mapped_total += 1
            mapped_ok += obs in m and gid_to_gt[m[obs]] == gt

    class_ok = class_total = 0
    for fid, f in zip(fids, frames):
        lab = res.corrected[fid]
        sel = (lab.instance_id != 0) & scene.classes.thing_mask(lab.class_id)
        class_total += int(sel.sum())
        class_ok += int((lab.class_id[sel] == f.labels.class_id[sel]).sum())

    # pixel-weighted flip share per GT instance over its surviving observations
    flipped_px = np.zeros(scene.n_things + 1)
    seen_px = np.zeros(scene.n_things + 1)
    for lab, id_map, flips in zip(cor.labels, cor.id_maps, cor.flipped):
        for obs, gt in id_map.items():
            px = int((lab.instance_id == obs).sum())
            seen_px[gt] += px
            if gt in flips:
                flipped_px[gt] += px
    majority = [int(g) for g in np.flatnonzero((seen_px > 0) & (2 * flipped_px >= seen_px))]

    return AssociationTrial(
        seed, scene.n_things, len(res.imap.labelled_ids()), mapped_ok, mapped_total, class_ok, class_total, majority, seconds
    )


# --------------------------------------------------------------------------
# Propagation


def propagation_trial(seed: int = 0, p_partial: float = 0.5, n_frames: int = 30, width: int = 128, height: int = 96, depth: int = 0) -> float:
    """Pixel accuracy of propagated labels on pixels the corruption withheld."""
    scene = synth.generate_scene(seed=seed, n_frames=n_frames, width=width, height=height)
    frames = synth.render_gt_frames(scene)
    cor = synth.corrupt(frames, synth.CorruptionSpec(p_partial=p_partial), seed, scene.classes)
    labels = {f.frame_id: l for f, l in zip(frames, cor.labels)}
    dense, _, _, _ = prop_mod.propagate_frames(frames, labels, depth=depth, seed=seed)
    ok = total = 0
    for f, l in zip(frames, cor.labels):
        withheld = (l.class_id == UNKNOWN) & (f.labels.class_id != UNKNOWN)
        ok += int((dense[f.frame_id].class_id[withheld] == f.labels.class_id[withheld]).sum())
        total += int(withheld.sum())
    return ok / max(total, 1)


# --------------------------------------------------------------------------
# Field fitting on the sphere scene

SPHERE_BOUNDS = (np.array([-1.0, -1.0, -0.75]), np.array([1.0, 1.0, 1.25]))


@dataclass
class SphereFit:
    depth_mae_cells: float
    stage1_seconds: float
    sem_accuracy: float = math.nan
    inst_accuracy: float = math.nan
    stage2_seconds: float = math.nan


def _held_out(frames):
    return [f for k, f in enumerate(frames) if k % 4], [f for k, f in enumerate(frames) if k % 4 == 0]


def _eval_mask(f: scene_io.Frame, lo, hi) -> np.ndarray:
    o, d, scale = F.pixel_rays(f)
    z = f.depth.reshape(-1)
    tn, tf = F.ray_box(o, d, lo, hi)
    return (z > 0) & (z * scale >= tn) & (z * scale <= tf)


def sphere_fit(
    grid: int = 32,
    stage1_iters: int = 2000,
    stage2_iters: int = 300,
    lr: float = 0.01,
    xi: float = 20.0,
    tau_cells: float = 4.0,
    seed: int = 0,
) -> SphereFit:
    """Stage-1 depth error and stage-2 label accuracy on held-out views (every 4th frame)."""
    scene = synth.generate_sphere_scene(seed=seed)
    frames = synth.render_gt_frames(scene, features=False)
    train, test = _held_out(frames)
    lo, hi = SPHERE_BOUNDS
    cell = float((hi - lo)[0] / grid)
    classes = scene.classes
    sem_lut = {c: c - 1 for c in classes.entries}
    inst_lut = {1: 0}
    fld = F.VoxelField.create((grid,) * 3, lo, hi, len(classes), 1, 0, sdf_init=tau_cells * cell)
    pool = F.build_pool(train, sem_lut, inst_lut)
    cfg = F.LossConfig(xi=xi, tau=tau_cells * cell, w_feat=0.0)

    t0 = time.perf_counter()
    s1, _ = F.fit(fld, pool, 1, cfg, F.FitConfig(stage1_iters, lr, seed=seed))
    t1 = time.perf_counter() - t0
    errs = []
    for f in test:
        m = _eval_mask(f, lo, hi)
        r = F.render(s1, f, xi=xi)
        errs.append(np.abs(r.depth.reshape(-1)[m] - f.depth.reshape(-1)[m]))
    out = SphereFit(float(np.concatenate(errs).mean() / cell), t1)
    if stage2_iters <= 0:
        return out

    t0 = time.perf_counter()
    s2, _ = F.fit(s1, pool, 2, cfg, F.FitConfig(stage2_iters, lr, seed=seed + 1))
    out.stage2_seconds = time.perf_counter() - t0
    ok = iok = total = 0
    for f in test:
        m = _eval_mask(f, lo, hi)
        lab = pipeline.field_labels(F.render(s2, f, xi=xi), classes)
        ok += int((lab.class_id.reshape(-1)[m] == f.labels.class_id.reshape(-1)[m]).sum())
        iok += int((lab.instance_id.reshape(-1)[m] == f.labels.instance_id.reshape(-1)[m]).sum())
        total += int(m.sum())
    out.sem_accuracy = ok / total
    out.inst_accuracy = iok / total
    return out


# --------------------------------------------------------------------------
# Gradient checks


def random_problem(rng: np.random.Generator, res: int = 8, n_rays: int = 16, n_samples: int = 16):
    """A random small field crossed by a noisy surface, and a ray batch with every target."""
    fld = F.VoxelField.create((res,) * 3, (0, 0, 0), (1, 1, 1), n_sem=3, n_inst=2, n_feat=2)
    fld.data[:] = rng.normal(0.0, 0.5, fld.data.shape)
    normal = rng.normal(size=3)
    normal[2] = abs(normal[2]) + 1.0
    normal /= np.linalg.norm(normal)
    c = fld.centers()
    fld.data[..., 0] = (c - 0.5) @ normal + rng.normal(0.0, 0.05, c.shape[:3])
    o = np.c_[rng.uniform(0.1, 0.9, (n_rays, 2)), np.full(n_rays, 0.95)]
    d = np.c_[rng.normal(0, 0.3, (n_rays, 2)), -np.ones(n_rays)]
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    tn, tf = F.ray_box(o, d, fld.bmin, fld.bmax)
    rho = F.stratified(tn, tf, n_samples, rng)
    depth = rng.uniform(0.2, 0.7, n_rays)
    depth[rng.random(n_rays) < 0.2] = np.nan
    batch = F.RayBatch(
        o, d, rho, tn, tf, depth,
        rng.random((n_rays, 3)),
        rng.integers(-1, 3, n_rays),
        rng.integers(-1, 2, n_rays),
        rng.normal(size=(n_rays, 2)),
    )
    cfg = F.LossConfig(xi=float(rng.uniform(5, 30)), tau=float(rng.uniform(0.05, 0.2)), beta=float(rng.uniform(1, 8)))
    return fld, batch, cfg


def kink_signature(fld: F.VoxelField, batch: F.RayBatch, cfg: F.LossConfig) -> bytes:
    """Every discrete branch the loss takes; equal signatures mean a smooth segment."""
    r, n = batch.rho.shape
    s = F.sample(fld, batch.points().reshape(-1, 3), "sdf")[0].reshape(r, n)
    live = F.log_sigmoid(cfg.xi * s[:, 1:]) < F.log_sigmoid(cfg.xi * s[:, :-1])
    parts = [live]
    has = np.isfinite(batch.depth)
    b = np.where(has, batch.depth, 0.0)[:, None] - batch.rho
    near = np.abs(b) <= cfg.tau
    e = np.expm1(-cfg.beta * s)
    parts += [near & (s > b), ~near & (0 >= e) & (0 >= s - b), ~near & (e >= s - b)]
    a = F.ray_alphas(s, cfg.xi)
    u_d = (F.render_weights(a)[1] * batch.rho).sum(axis=1)
    parts.append(batch.depth > u_d)
    gn = np.linalg.norm(F.sdf_normal(fld, batch.points().reshape(-1, 3)), axis=1)
    parts.append(gn > 0)
    return b"".join(np.packbits(np.asarray(p, dtype=bool).reshape(-1)).tobytes() for p in parts)


@dataclass
class GradientCheck:
    checked: int = 0
    excluded: int = 0
    failures: list[tuple[int, int, float]] = field(default_factory=list)  # (trial, channel, rel err)
    worst: float = 0.0


def gradient_trials(n_trials: int = 100, seed: int = 0, eps: float = 1e-4, rtol: float = 1e-3) -> GradientCheck:
    """Directional derivative per channel vs central differences on random problems.

    A (trial, channel) pair is excluded when a branch of the loss changes
    within the +-eps stencil, i.e. a kink lies inside the difference step.
    """
    rng = np.random.default_rng(seed)
    out = GradientCheck()
    for trial in range(n_trials):
        fld, batch, cfg = random_problem(rng)
        grad = F.loss_gradient(fld, batch, cfg)
        for ch in range(fld.n_channels):
            direction = np.zeros_like(fld.data)
            direction[..., ch] = rng.normal(size=fld.resolution)
            direction /= np.abs(direction).max()
            plus, minus = fld.copy(), fld.copy()
            plus.data += eps * direction
            minus.data -= eps * direction
            sig = kink_signature(fld, batch, cfg)
            if kink_signature(plus, batch, cfg) != sig or kink_signature(minus, batch, cfg) != sig:
                out.excluded += 1
                continue
            fd = (F.losses(plus, batch, cfg).total - F.losses(minus, batch, cfg).total) / (2 * eps)
            an = float((grad * direction).sum())
            scale = max(abs(fd), abs(an))
            rel = abs(fd - an) / scale if scale > 1e-9 else 0.0
            out.checked += 1
            out.worst = max(out.worst, rel)
            if rel > rtol:
                out.failures.append((trial, ch, rel))
    return out


# --------------------------------------------------------------------------
# Rendering identities


@dataclass
class IdentityCheck:
    n_samples: int = 0
    violations: dict[str, int] = field(default_factory=dict)

    def add(self, name: str, bad: int) -> None:
        self.violations[name] = self.violations.get(name, 0) + int(bad)


def rendering_identities(n_samples: int = 1_000_000, n_per_ray: int = 64, seed: int = 0) -> IdentityCheck:
    rng = np.random.default_rng(seed)
    out = IdentityCheck()
    n_rays = n_samples // n_per_ray
    chunk = 4096
    for start in range(0, n_rays, chunk):
        r = min(chunk, n_rays - start)
        xi = np.exp(rng.uniform(np.log(0.5), np.log(500.0)))
        # mix smooth descending profiles, noise and plateaus
        kind = rng.integers(0, 3)
        if kind == 0:
            s = np.sort(rng.normal(0, 1, (r, n_per_ray)), axis=1)[:, ::-1]
        elif kind == 1:
            s = rng.normal(0, 1, (r, n_per_ray))
        else:
            s = np.round(rng.normal(0, 1, (r, n_per_ray)), 1)
        a = F.ray_alphas(s, xi)
        t, w = F.render_weights(a)
        out.n_samples += s.size
        out.add("alpha in [0,1]", ((a < 0) | (a > 1)).sum())
        out.add("T_0 = 1", (t[:, 0] != 1.0).sum())
        out.add("T monotone", (np.diff(t, axis=1) > 0).sum())
        out.add("sum T*alpha <= 1", (w.sum(axis=1) > 1.0).sum())
        out.add("weights >= 0", (w < 0).sum())
        out.add("alpha = 0 when s_next >= s_i", (a[:, :-1][s[:, 1:] >= s[:, :-1]] != 0).sum())
        out.add("last alpha = 0", (a[:, -1] != 0).sum())
    # the three scalar examples
    out.add("alpha(s, s) = 0", int(F.alpha(0.3, 0.3, 10.0) != 0.0))
    out.add("alpha receding = 0", int(F.alpha(-0.1, 0.1, 10.0) != 0.0))
    expected = -math.expm1(-1.0)  # (Phi(1) - Phi(-1)) / Phi(1) = 1 - e^-1
    out.add("alpha(0.1, -0.1, 10) = 1 - 1/e", int(abs(float(F.alpha(0.1, -0.1, 10.0)) - expected) > 1e-15))
    return out


# --------------------------------------------------------------------------
# End to end


def write_synth_scene(directory, seed: int, spec: synth.CorruptionSpec | None, n_frames: int = 60, width: int = 256, height: int = 192) -> Path:
    return synth.make_scene_dir(directory, seed, 8, n_frames, spec, width, height, features=False)


def run_pipeline(scene_dir, out_dir, **overrides) -> pipeline.Context:
    cfg = pipeline.PipelineConfig(scene=str(scene_dir), out=str(out_dir), **overrides)
    pipeline.run(cfg)
    return pipeline.Context(cfg)


@dataclass
class EndToEnd:
    pq: float
    baseline_pq: float
    report: str


def end_to_end(scene_dir, out_dir, **overrides) -> EndToEnd:
    """Fused-label PQ_s and the naive per-frame baseline PQ_s against synth GT."""
    ctx = run_pipeline(scene_dir, out_dir, **overrides)
    gt = ctx.gt_labels()
    ids = ctx.frame_ids()
    g = [gt[i] for i in ids]
    pq = metrics.panoptic_quality_scene(ctx.label_dir("pred"), g, ctx.classes).pq
    base = metrics.panoptic_quality_scene(ctx.observed(), g, ctx.classes).pq
    return EndToEnd(pq, base, ctx.path("report.txt").read_text())


def tree_bytes(root) -> dict[str, bytes]:
    root = Path(root)
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}
