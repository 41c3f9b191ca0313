"""End-to-end orchestration with resumable, file-backed stages.

Scene directory layout (as written by ``synth.write_scene``)::

    mesh.ply  classes.txt  frames/  [gt_labels/]

Every stage writes its artifacts under the output directory and then a stamp
file holding the run's parameters. A stage whose stamp exists and matches is
skipped unless ``force`` is set; once one stage runs, every later stage runs.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import shutil
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import associate as asc
from . import field as fld_mod
from . import instgraph, metrics, rasterizer, scene_io, superface
from . import propagate as prop_mod
from .scene_io import UNKNOWN, ClassTable, Frame, LabelImage

log = logging.getLogger("panolabel")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_DIVERGENCE = 4

STAGES = ("fit1", "superface", "graph", "associate", "propagate", "fuse", "fit2", "render", "metrics")


class ConfigError(ValueError):
    pass


class StageError(RuntimeError):
    def __init__(self, stage: str, artifact: Path, cause: BaseException):
        super().__init__(f"stage {stage!r} failed ({artifact}): {cause}")
        self.stage = stage
        self.artifact = artifact
        self.cause = cause


@dataclass
class PipelineConfig:
    scene: str = ""
    out: str = ""
    seed: int = 0
    threads: int = 1
    # superfaces
    sf_k: float = superface.DEFAULT_K
    sf_min_size: int = superface.DEFAULT_MIN_SIZE
    # graph and association
    theta: float = instgraph.DEFAULT_THETA
    deduct: str = instgraph.DEDUCT_ALL
    iou: float = asc.DEFAULT_IOU
    # propagation
    propagate: bool = True
    pca_dim: int = prop_mod.PCA_DIM
    prop_epochs: int = 50
    prop_lr: float = 0.1
    prop_batch: int = 4096
    prop_depth: int = 0
    prop_train_pixels: int = 200_000
    prop_pca_samples: int = 50_000
    # field
    field: bool = True
    grid: int = 32
    xi: float = 20.0
    tau_cells: float = 4.0
    beta: float = 5.0
    samples: int = fld_mod.DEFAULT_SAMPLES
    stage1_iters: int = 500
    stage1_lr: float = 0.01
    stage2_iters: int = 500
    stage2_lr: float = 0.01
    batch_rays: int = 512
    ray_stride: int = 2
    render_every: int = 10

    @classmethod
    def from_dict(cls, values: dict[str, str], base: Path | None = None) -> tuple["PipelineConfig", list[str]]:
        """Parse string values; returns the config and any key/type diagnostics."""
        diags = []
        kw = {}
        types = {f.name: f.type for f in dataclasses.fields(cls)}
        for key, raw in values.items():
            if key not in types:
                diags.append(f"unknown key {key!r}")
                continue
            t = types[key]
            try:
                if t in ("bool", bool):
                    low = str(raw).strip().lower()
                    if low not in ("1", "0", "true", "false", "yes", "no", "on", "off"):
                        raise ValueError(raw)
                    kw[key] = low in ("1", "true", "yes", "on")
                elif t in ("int", int):
                    kw[key] = int(raw)
                elif t in ("float", float):
                    kw[key] = float(raw)
                else:
                    kw[key] = str(raw)
            except ValueError:
                diags.append(f"{key}: cannot parse {raw!r} as {t}")
        cfg = cls(**kw)
        if base is not None:
            for key in ("scene", "out"):
                v = getattr(cfg, key)
                if v and not Path(v).is_absolute():
                    setattr(cfg, key, str((base / v).resolve()))
        return cfg, diags

    @classmethod
    def load(cls, path) -> tuple["PipelineConfig", list[str]]:
        p = Path(path)
        return cls.from_dict(scene_io.load_config(p), p.parent)

    def to_dict(self) -> dict[str, object]:
        return {f.name: getattr(self, f.name) for f in dataclasses.fields(self)}


_RANGES = {
    "sf_k": (0.0, None, False),
    "theta": (0.0, 1.0, True),
    "iou": (0.0, 1.0, True),
    "xi": (0.0, None, False),
    "tau_cells": (0.0, None, False),
    "beta": (0.0, None, False),
    "prop_lr": (0.0, None, False),
    "stage1_lr": (0.0, None, False),
    "stage2_lr": (0.0, None, False),
}
_MIN_INT = {
    "sf_min_size": 1,
    "threads": 1,
    "pca_dim": 1,
    "prop_epochs": 0,
    "prop_batch": 1,
    "prop_depth": 0,
    "prop_train_pixels": 1,
    "prop_pca_samples": 1,
    "grid": 5,
    "samples": 2,
    "stage1_iters": 0,
    "stage2_iters": 0,
    "batch_rays": 1,
    "ray_stride": 1,
    "render_every": 1,
}


def validate(cfg: PipelineConfig) -> list[str]:
    """Every out-of-range parameter and missing path; empty when valid."""
    diags = []
    for key, (lo, hi, hi_closed) in _RANGES.items():
        v = getattr(cfg, key)
        if not v > lo or (hi is not None and (v > hi if hi_closed else v >= hi)):
            rng = f"({lo}, {hi}{']' if hi_closed else ')'}" if hi is not None else f"> {lo}"
            diags.append(f"{key}={v} out of range {rng}")
    for key, lo in _MIN_INT.items():
        if getattr(cfg, key) < lo:
            diags.append(f"{key}={getattr(cfg, key)} must be >= {lo}")
    if cfg.deduct not in (instgraph.DEDUCT_ALL, instgraph.DEDUCT_OTHER_MASKS):
        diags.append(f"deduct={cfg.deduct!r} must be {instgraph.DEDUCT_ALL!r} or {instgraph.DEDUCT_OTHER_MASKS!r}")
    if not cfg.out:
        diags.append("out: output directory not set")
    if not cfg.scene:
        diags.append("scene: scene directory not set")
    else:
        root = Path(cfg.scene)
        for rel in ("mesh.ply", "classes.txt", "frames/cameras.txt"):
            if not (root / rel).exists():
                diags.append(f"missing path {root / rel}")
    return diags


def field_bounds(points: np.ndarray, grid: int) -> tuple[np.ndarray, np.ndarray, tuple[int, int, int]]:
    """Point bounds padded by two cells, with cubic cells and ``grid`` along the longest axis."""
    lo, hi = points.min(axis=0), points.max(axis=0)
    ext = hi - lo
    cell = ext.max() / (grid - 4)
    res = np.maximum(2, np.ceil(ext / cell - 1e-9).astype(int) + 4)
    mid = 0.5 * (lo + hi)
    half = 0.5 * res * cell
    return mid - half, mid + half, tuple(int(r) for r in res)


# --------------------------------------------------------------------------
# Run context


class Context:
    def __init__(self, cfg: PipelineConfig):
        self.cfg = cfg
        self.root = Path(cfg.scene)
        self.out = Path(cfg.out)
        self._mesh = self._classes = self._frames = self._idbufs = None

    @property
    def mesh(self) -> scene_io.TriMesh:
        if self._mesh is None:
            self._mesh = scene_io.load_mesh(self.root / "mesh.ply")
        return self._mesh

    @property
    def classes(self) -> ClassTable:
        if self._classes is None:
            self._classes = scene_io.load_class_table(self.root / "classes.txt")
        return self._classes

    @property
    def frames(self) -> list[Frame]:
        """Cameras with depth, colour and observed labels; features stay on disk."""
        if self._frames is None:
            d = self.root / "frames"
            out = []
            for f in scene_io.load_cameras(d / "cameras.txt"):
                kw = {}
                for suffix, key, loader in (
                    (".depth.pgm", "depth", scene_io.load_depth),
                    (".rgb.ppm", "color", scene_io.load_ppm),
                    (".lbl", "labels", scene_io.load_label_image),
                ):
                    p = d / f"{f.frame_id}{suffix}"
                    if p.exists():
                        kw[key] = loader(p)
                out.append(f.with_(**kw))
            if not out:
                raise scene_io.FormatError(f"{d}: no frames")
            self._frames = out
        return self._frames

    def features(self, frame: Frame) -> np.ndarray:
        return scene_io.load_feature_map(self.root / "frames" / f"{frame.frame_id}.fmap")

    def has_features(self) -> bool:
        return all((self.root / "frames" / f"{f.frame_id}.fmap").exists() for f in self.frames)

    @property
    def idbufs(self) -> list[rasterizer.IdBuffer]:
        if self._idbufs is None:
            self._idbufs = rasterizer.rasterize_all(self.mesh, self.frames, self.cfg.threads)
        return self._idbufs

    def frame_ids(self) -> list[str]:
        return [f.frame_id for f in self.frames]

    def observed(self) -> list[LabelImage]:
        out = []
        for f in self.frames:
            if f.labels is None:
                raise scene_io.FormatError(f"frame {f.frame_id} has no label file")
            out.append(f.labels)
        return out

    def gt_labels(self) -> dict[str, LabelImage] | None:
        d = self.root / "gt_labels"
        return scene_io.load_label_dir(d) if d.is_dir() else None

    def path(self, *parts) -> Path:
        return self.out.joinpath(*parts)

    def seg(self) -> superface.SuperfaceSegmentation:
        return superface.load_segmentation(self.path("superfaces.pseg"))

    def imap(self) -> asc.InstanceMap:
        return asc.load_imap(self.path("imap.json"), self.seg().n_superfaces)

    def label_dir(self, name: str) -> list[LabelImage]:
        labs = scene_io.load_label_dir(self.path(name))
        return [labs[fid] for fid in self.frame_ids()]

    def field_box(self) -> tuple[np.ndarray, np.ndarray, tuple[int, int, int]]:
        return field_bounds(self.mesh.vertices, self.cfg.grid)

    def loss_cfg(self, cell: float) -> fld_mod.LossConfig:
        return fld_mod.LossConfig(xi=self.cfg.xi, tau=self.cfg.tau_cells * cell, beta=self.cfg.beta)


# --------------------------------------------------------------------------
# Stages


def stage_fit1(ctx: Context) -> None:
    lo, hi, res = ctx.field_box()
    cell = float((hi - lo)[0] / res[0])
    cfg = ctx.loss_cfg(cell)
    f0 = fld_mod.VoxelField.create(res, lo, hi, n_feat=0, sdf_init=cfg.tau)
    pool = fld_mod.build_pool(ctx.frames, stride=ctx.cfg.ray_stride)
    fit_cfg = fld_mod.FitConfig(ctx.cfg.stage1_iters, ctx.cfg.stage1_lr, ctx.cfg.batch_rays, ctx.cfg.samples, ctx.cfg.seed)
    fitted, flog = fld_mod.fit(f0, pool, 1, cfg, fit_cfg)
    ctx.path("stage1").mkdir(parents=True, exist_ok=True)
    fld_mod.save_field(ctx.path("stage1", "field.pfld"), fitted)
    _write_loss_log(ctx.path("stage1", "loss.txt"), flog)


def stage_superface(ctx: Context) -> None:
    seg = superface.segment(superface.build_normal_graph(ctx.mesh), ctx.cfg.sf_k, ctx.cfg.sf_min_size)
    superface.save_segmentation(ctx.path("superfaces.pseg"), seg)


def stage_graph(ctx: Context) -> None:
    seg = ctx.seg()
    graph = instgraph.build_scene_graph(ctx.idbufs, ctx.observed(), seg, ctx.cfg.theta, ctx.classes, ctx.cfg.deduct)
    lines = [f"{a} {b} {v}" for (a, b), v in sorted(graph.edges().items())]
    ctx.path("graph.txt").write_text("# node_a node_b votes\n" + "".join(l + "\n" for l in lines))
    instgraph.save_clusters(ctx.path("clusters.pclu"), instgraph.cut_and_cluster(graph))


def stage_associate(ctx: Context) -> None:
    seg = ctx.seg()
    clusters = instgraph.load_clusters(ctx.path("clusters.pclu"))
    res = asc.associate(
        clusters,
        superface.superface_areas(ctx.mesh, seg),
        seg,
        ctx.frame_ids(),
        ctx.idbufs,
        ctx.observed(),
        ctx.cfg.iou,
        ctx.classes,
    )
    asc.save_imap(ctx.path("imap.json"), res.imap)
    _replace_dir(ctx.path("corrected"))
    scene_io.save_label_dir(ctx.path("corrected"), res.corrected)
    flagged = {fid: ids for fid, ids in res.flagged.items() if ids}
    ctx.path("flagged.json").write_text(json.dumps(flagged, indent=1, sort_keys=True))


def stage_propagate(ctx: Context) -> None:
    corrected = dict(zip(ctx.frame_ids(), ctx.label_dir("corrected")))
    _replace_dir(ctx.path("dense"))
    if not (ctx.cfg.propagate and ctx.has_features()):
        log.info("propagate: no feature maps or disabled; dense labels = corrected labels")
        scene_io.save_label_dir(ctx.path("dense"), corrected)
        return
    dense, _, pca, _ = prop_mod.propagate_frames(
        ctx.frames,
        corrected,
        pca_dim=ctx.cfg.pca_dim,
        pca_samples=ctx.cfg.prop_pca_samples,
        train_pixels=ctx.cfg.prop_train_pixels,
        epochs=ctx.cfg.prop_epochs,
        lr=ctx.cfg.prop_lr,
        batch=ctx.cfg.prop_batch,
        depth=ctx.cfg.prop_depth,
        seed=ctx.cfg.seed,
        features=ctx.features,
    )
    prop_mod.save_pca(ctx.path("pca.ppca"), pca)
    scene_io.save_label_dir(ctx.path("dense"), dense)


def stage_fuse(ctx: Context) -> None:
    seg = ctx.seg()
    imap = ctx.imap()
    fc, fi = asc.fuse_mesh_labels(imap, seg, ctx.idbufs, ctx.label_dir("dense"), ctx.classes)
    np.savetxt(ctx.path("face_labels.txt"), np.stack([fc, fi], axis=1), fmt="%d", header="class instance")
    panoptic = np.where(fi > 0, fi, 0) + (fc.astype(np.int64) << 16)
    scene_io.write_colored_mesh(ctx.path("fused_mesh.ply"), ctx.mesh, panoptic, scene_io.palette)
    _replace_dir(ctx.path("pred"))
    scene_io.save_label_dir(ctx.path("pred"), {f: asc.labels_from_faces(ib, fc, fi) for f, ib in zip(ctx.frame_ids(), ctx.idbufs)})


def _stage2_luts(ctx: Context, imap: asc.InstanceMap) -> tuple[dict[int, int], dict[int, int]]:
    sem = {c: c - 1 for c in ctx.classes.entries}
    inst = {gid: gid - 1 for gid in imap.instances}
    return sem, inst


def stage_fit2(ctx: Context) -> None:
    imap = ctx.imap()
    init = fld_mod.load_field(ctx.path("stage1", "field.pfld"))
    pca = prop_mod.load_pca(ctx.path("pca.ppca")) if ctx.path("pca.ppca").exists() else None
    n_feat = min(fld_mod.FEAT_DIM, pca.dim) if pca is not None else 0
    f0 = fld_mod.VoxelField.create(init.resolution, init.bmin, init.bmax, len(ctx.classes), max(len(imap), 1), n_feat)
    f0.data[..., :4] = init.data[..., :4]
    dense = ctx.label_dir("dense")
    frames = [f.with_(labels=l) for f, l in zip(ctx.frames, dense)]
    sem_lut, inst_lut = _stage2_luts(ctx, imap)
    feat_fn = None
    if n_feat:
        feat_fn = lambda f: pca.transform(ctx.features(f).reshape(-1, pca.mean.shape[0]))[:, :n_feat]
    pool = fld_mod.build_pool(frames, sem_lut, inst_lut, feat_fn, stride=ctx.cfg.ray_stride)
    cell = float(init.cell[0])
    cfg = ctx.loss_cfg(cell)
    if not n_feat:
        cfg.w_feat = 0.0
    fit_cfg = fld_mod.FitConfig(ctx.cfg.stage2_iters, ctx.cfg.stage2_lr, ctx.cfg.batch_rays, ctx.cfg.samples, ctx.cfg.seed + 1)
    fitted, flog = fld_mod.fit(f0, pool, 2, cfg, fit_cfg)
    ctx.path("stage2").mkdir(parents=True, exist_ok=True)
    fld_mod.save_field(ctx.path("stage2", "field.pfld"), fitted)
    _write_loss_log(ctx.path("stage2", "loss.txt"), flog)


def field_labels(rendered: fld_mod.Rendered, classes: ClassTable) -> LabelImage:
    """Argmax class and instance from rendered logits; instances only on thing pixels."""
    sem = rendered.sem.argmax(axis=-1) + 1
    thing = classes.thing_mask(sem)
    inst = rendered.inst.argmax(axis=-1) + 1 if rendered.inst is not None else np.zeros_like(sem)
    inst = np.where(thing, inst, 0)
    covered = rendered.opacity > 0.5
    return LabelImage(np.where(covered, inst, 0).astype(np.uint32), np.where(covered, sem, UNKNOWN).astype(np.uint32))


def rendered_frames(ctx: Context) -> list[Frame]:
    return ctx.frames[:: ctx.cfg.render_every]


def stage_render(ctx: Context) -> None:
    fitted = fld_mod.load_field(ctx.path("stage2", "field.pfld"))
    d = ctx.path("render")
    _replace_dir(d)
    for f in rendered_frames(ctx):
        r = fld_mod.render(fitted, f, ctx.cfg.samples, ctx.cfg.xi)
        scene_io.save_ppm(d / f"{f.frame_id}.rgb.ppm", r.color)
        scene_io.save_depth(d / f"{f.frame_id}.depth.pgm", r.depth)
        lab = field_labels(r, ctx.classes)
        scene_io.save_label_image(d / f"{f.frame_id}.sem.lbl", LabelImage(np.zeros_like(lab.class_id), lab.class_id))
        scene_io.save_label_image(d / f"{f.frame_id}.inst.lbl", lab)


def stage_metrics(ctx: Context) -> None:
    gt = ctx.gt_labels()
    lines = []
    if gt is None:
        log.warning("metrics: scene has no gt_labels/; report contains association statistics only")
    imap = ctx.imap()
    n_flagged = sum(len(v) for v in json.loads(ctx.path("flagged.json").read_text()).values())
    stats = {
        "instances_3d": len(imap),
        "instances_recovered": len(imap.labelled_ids()),
        "flagged_masks": n_flagged,
    }
    if gt is not None:
        ids = ctx.frame_ids()
        g = [gt[i] for i in ids]
        rep = metrics.evaluate_frames(ctx.label_dir("pred"), g, ctx.classes)
        lines.append("# fused 3D panoptic labels, rasterised into every frame")
        lines.append(rep.to_text(ctx.classes))
        base = metrics.evaluate_frames(ctx.observed(), g, ctx.classes)
        lines.append("# naive per-frame baseline (observed 2D labels as-is)")
        lines.append(base.to_text(ctx.classes))
        for name in ("corrected", "dense"):
            sem = metrics.semantic_metrics(ctx.label_dir(name), g, len(ctx.classes))
            lines.append(f"# {name} 2D labels: mIoU {100 * sem.miou:.2f}  mAcc {100 * sem.macc:.2f}\n")
        if ctx.cfg.field and ctx.path("render").is_dir():
            rf = rendered_frames(ctx)
            pred = [scene_io.load_label_image(ctx.path("render", f"{f.frame_id}.inst.lbl")) for f in rf]
            frep = metrics.evaluate_frames(pred, [gt[f.frame_id] for f in rf], ctx.classes)
            lines.append(f"# stage-2 field renderings ({len(rf)} frames)")
            lines.append(frep.to_text(ctx.classes))
        stats.update(pq_s=rep.pq, baseline_pq_s=base.pq)
    lines.append("# association")
    lines.extend(f"{k} = {v:.6f}" if isinstance(v, float) else f"{k} = {v}" for k, v in stats.items())
    ctx.path("report.txt").write_text("\n".join(lines) + "\n")


STAGE_FUNCS = {
    "fit1": stage_fit1,
    "superface": stage_superface,
    "graph": stage_graph,
    "associate": stage_associate,
    "propagate": stage_propagate,
    "fuse": stage_fuse,
    "fit2": stage_fit2,
    "render": stage_render,
    "metrics": stage_metrics,
}
STAGE_ARTIFACT = {
    "fit1": "stage1/field.pfld",
    "superface": "superfaces.pseg",
    "graph": "clusters.pclu",
    "associate": "imap.json",
    "propagate": "dense",
    "fuse": "pred",
    "fit2": "stage2/field.pfld",
    "render": "render",
    "metrics": "report.txt",
}
FIELD_STAGES = ("fit1", "fit2", "render")


def _write_loss_log(path: Path, flog: fld_mod.FitLog) -> None:
    rows = [f"{i + 1} {t:.9g} " + " ".join(f"{terms[k]:.9g}" for k in fld_mod.TERMS) for i, (t, terms) in enumerate(zip(flog.total, flog.terms))]
    path.write_text("# iter total " + " ".join(fld_mod.TERMS) + "\n" + "".join(r + "\n" for r in rows))


def _replace_dir(path: Path) -> None:
    if path.exists():
        shutil.rmtree(path)
    path.mkdir(parents=True)


def run(cfg: PipelineConfig, force: bool = False) -> Path:
    """Run every enabled stage in order; returns the report path."""
    diags = validate(cfg)
    if diags:
        raise ConfigError("; ".join(diags))
    ctx = Context(cfg)
    ctx.out.mkdir(parents=True, exist_ok=True)
    stamps = ctx.path("stamps")
    stamps.mkdir(exist_ok=True)
    # the output path and thread count do not influence results, so they stay out
    # of the recorded parameters and identical runs leave identical artifacts
    params = {k: v for k, v in cfg.to_dict().items() if k not in ("out", "threads")}
    scene_io.save_config(ctx.path("config.used.cfg"), params)
    signature = "".join(f"{k} = {v}\n" for k, v in params.items())
    dirty = force
    for name in STAGES:
        if name in FIELD_STAGES and not cfg.field:
            continue
        stamp = stamps / name
        if not dirty and stamp.exists() and stamp.read_text() == signature:
            log.info("%-9s skipped (artifact present)", name)
            continue
        # everything downstream of a recomputed stage is recomputed too
        dirty = True
        t0 = time.perf_counter()
        try:
            STAGE_FUNCS[name](ctx)
        except (fld_mod.DivergenceError, ConfigError, fld_mod.ConfigurationError):
            raise
        except (scene_io.FormatError, OSError, ValueError) as exc:
            raise StageError(name, ctx.path(STAGE_ARTIFACT[name]), exc) from exc
        stamp.write_text(signature)
        log.info("%-9s %.2fs", name, time.perf_counter() - t0)
    return ctx.path("report.txt")
