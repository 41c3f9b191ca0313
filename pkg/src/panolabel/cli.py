"""Command-line entry point: ``panolabel run config.cfg`` and per-stage subcommands."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import associate as asc
from . import field as fld_mod
from . import instgraph, metrics, pipeline, propagate, rasterizer, scene_io, superface, synth
from .pipeline import EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGENCE, EXIT_OK

log = logging.getLogger("panolabel")


def _classes_for(frames_dir: Path, explicit: str | None) -> scene_io.ClassTable:
    path = Path(explicit) if explicit else frames_dir.parent / "classes.txt"
    return scene_io.load_class_table(path)


def _load_frames(frames_dir, labels_dir=None) -> list[scene_io.Frame]:
    return scene_io.load_frames(frames_dir, labels_dir=labels_dir)


def cmd_run(a) -> int:
    cfg, diags = pipeline.PipelineConfig.load(a.config)
    if a.threads:
        cfg.threads = a.threads
    if a.skip_field:
        cfg.field = False
    diags += pipeline.validate(cfg)
    if diags:
        for d in diags:
            print(f"config: {d}", file=sys.stderr)
        return EXIT_CONFIG
    report = pipeline.run(cfg, force=a.force)
    if report.exists():
        sys.stdout.write(report.read_text())
    return EXIT_OK


def cmd_validate(a) -> int:
    cfg, diags = pipeline.PipelineConfig.load(a.config)
    diags += pipeline.validate(cfg)
    for d in diags:
        print(d)
    if not diags:
        print("ok")
    return EXIT_CONFIG if diags else EXIT_OK


def cmd_synth(a) -> int:
    spec = None
    if a.p_drop or a.p_flip or a.permute_ids or a.erode_px or a.p_partial:
        spec = synth.CorruptionSpec(a.p_drop, a.p_flip, a.permute_ids, a.erode_px, a.p_partial)
    synth.make_scene_dir(
        a.out, a.seed, a.things, a.frames, spec, a.width, a.height, not a.no_features, a.sphere
    )
    return EXIT_OK


def cmd_superface(a) -> int:
    mesh = scene_io.load_mesh(a.mesh)
    seg = superface.segment(superface.build_normal_graph(mesh), a.k, a.min_size)
    superface.save_segmentation(a.out, seg)
    print(f"{seg.n_superfaces} superfaces")
    return EXIT_OK


def cmd_graph(a) -> int:
    mesh = scene_io.load_mesh(a.mesh)
    seg = superface.load_segmentation(a.seg)
    frames = _load_frames(a.frames)
    classes = _classes_for(Path(a.frames), a.classes)
    bufs = rasterizer.rasterize_all(mesh, frames, a.threads)
    graph = instgraph.build_scene_graph(bufs, [f.labels for f in frames], seg, a.theta, classes, a.deduct)
    clusters = instgraph.cut_and_cluster(graph)
    instgraph.save_clusters(a.out, clusters)
    print(f"{clusters.n_clusters} clusters")
    return EXIT_OK


def cmd_associate(a) -> int:
    mesh = scene_io.load_mesh(a.mesh)
    seg = superface.load_segmentation(a.seg)
    frames = _load_frames(a.frames)
    classes = _classes_for(Path(a.frames), a.classes)
    bufs = rasterizer.rasterize_all(mesh, frames, a.threads)
    res = asc.associate(
        instgraph.load_clusters(a.clusters),
        superface.superface_areas(mesh, seg),
        seg,
        [f.frame_id for f in frames],
        bufs,
        [f.labels for f in frames],
        a.iou,
        classes,
    )
    scene_io.save_label_dir(a.out_labels, res.corrected)
    asc.save_imap(a.out_imap, res.imap)
    print(f"{len(res.imap.labelled_ids())} instances, {sum(map(len, res.flagged.values()))} flagged masks")
    return EXIT_OK


def cmd_propagate(a) -> int:
    frames = scene_io.load_frames(a.frames, features_dir=a.features)
    labels = {f.frame_id: f.labels for f in frames}
    dense, _, pca, _ = propagate.propagate_frames(
        frames, labels, pca_dim=a.pca, epochs=a.epochs, depth=a.depth, seed=a.seed
    )
    scene_io.save_label_dir(a.out, dense)
    if a.out_pca:
        propagate.save_pca(a.out_pca, pca)
    return EXIT_OK


def cmd_fit(a) -> int:
    frames = _load_frames(a.frames, a.labels)
    if a.stage == 1:
        if a.bounds:
            lo, hi = np.array(a.bounds[:3]), np.array(a.bounds[3:])
            cell = (hi - lo).max() / a.grid
            res = tuple(int(r) for r in np.maximum(2, np.round((hi - lo) / cell)))
        elif a.mesh:
            lo, hi, res = pipeline.field_bounds(scene_io.load_mesh(a.mesh).vertices, a.grid)
        else:
            print("fit --stage 1 needs --mesh or --bounds", file=sys.stderr)
            return EXIT_CONFIG
        cell = float((hi - lo)[0] / res[0])
        cfg = fld_mod.LossConfig(xi=a.xi, tau=a.tau_cells * cell, beta=a.beta)
        f0 = fld_mod.VoxelField.create(res, lo, hi, n_feat=0, sdf_init=cfg.tau)
        pool = fld_mod.build_pool(frames, stride=a.stride)
    else:
        if not (a.init and a.imap):
            print("fit --stage 2 needs --init and --imap", file=sys.stderr)
            return EXIT_CONFIG
        init = fld_mod.load_field(a.init)
        classes = _classes_for(Path(a.frames), a.classes)
        imap = asc.load_imap(a.imap)
        f0 = fld_mod.VoxelField.create(init.resolution, init.bmin, init.bmax, len(classes), max(len(imap), 1), 0)
        f0.data[..., :4] = init.data[..., :4]
        cfg = fld_mod.LossConfig(xi=a.xi, tau=a.tau_cells * float(init.cell[0]), beta=a.beta, w_feat=0.0)
        sem_lut = {c: c - 1 for c in classes.entries}
        inst_lut = {g: g - 1 for g in imap.instances}
        pool = fld_mod.build_pool(frames, sem_lut, inst_lut, stride=a.stride)
    fit_cfg = fld_mod.FitConfig(a.iters, a.lr, a.batch, a.samples, a.seed)
    fitted, flog = fld_mod.fit(f0, pool, a.stage, cfg, fit_cfg)
    fld_mod.save_field(a.out, fitted)
    print(f"final loss {flog.total[-1]:.6g}" if flog.total else "no iterations")
    return EXIT_OK


def cmd_render(a) -> int:
    fitted = fld_mod.load_field(a.field)
    frames = {f.frame_id: f for f in scene_io.load_cameras(Path(a.frames) / "cameras.txt")}
    if a.frame not in frames:
        print(f"frame {a.frame!r} not in {a.frames}", file=sys.stderr)
        return EXIT_DATA
    r = fld_mod.render(fitted, frames[a.frame], a.samples, a.xi)
    rgb, sem, inst, depth = a.out
    scene_io.save_ppm(rgb, r.color)
    scene_io.save_depth(depth, r.depth)
    if r.sem is not None:
        classes = _classes_for(Path(a.frames), a.classes)
        lab = pipeline.field_labels(r, classes)
        scene_io.save_label_image(sem, scene_io.LabelImage(np.zeros_like(lab.class_id), lab.class_id))
        scene_io.save_label_image(inst, lab)
    else:
        empty = scene_io.LabelImage.empty(r.depth.shape[1], r.depth.shape[0])
        scene_io.save_label_image(sem, empty)
        scene_io.save_label_image(inst, empty)
    return EXIT_OK


def cmd_metrics(a) -> int:
    pred = scene_io.load_label_dir(a.pred)
    gt = scene_io.load_label_dir(a.gt)
    missing = sorted(set(gt) - set(pred))
    if missing:
        print(f"no prediction for frames {missing[:5]}", file=sys.stderr)
        return EXIT_DATA
    classes = scene_io.load_class_table(a.classes) if a.classes else _classes_for(Path(a.gt), None)
    ids = sorted(gt)
    pm = scene_io.load_mesh(a.pred_mesh) if a.pred_mesh else None
    gm = scene_io.load_mesh(a.gt_mesh) if a.gt_mesh else None
    rep = metrics.evaluate_frames([pred[i] for i in ids], [gt[i] for i in ids], classes, pm, gm)
    text = rep.to_text(classes)
    Path(a.report).write_text(text)
    sys.stdout.write(text)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="panolabel", description="3D panoptic labelling from noisy 2D labels")
    p.add_argument("-v", "--verbose", action="store_true")
    p.add_argument("--threads", type=int, default=1)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("run", help="run the whole pipeline from a config file")
    s.add_argument("config")
    s.add_argument("--force", action="store_true", help="recompute stages whose artifacts exist")
    s.add_argument("--skip-field", action="store_true")
    s.set_defaults(func=cmd_run)

    s = sub.add_parser("validate", help="check a config file")
    s.add_argument("config")
    s.set_defaults(func=cmd_validate)

    s = sub.add_parser("synth", help="write a synthetic scene directory")
    s.add_argument("--things", type=int, default=8)
    s.add_argument("--frames", type=int, default=60)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--width", type=int, default=256)
    s.add_argument("--height", type=int, default=192)
    s.add_argument("--p-drop", type=float, default=0.0)
    s.add_argument("--p-flip", type=float, default=0.0)
    s.add_argument("--p-partial", type=float, default=0.0)
    s.add_argument("--erode-px", type=int, default=0)
    s.add_argument("--permute-ids", action="store_true")
    s.add_argument("--no-features", action="store_true")
    s.add_argument("--sphere", action="store_true", help="sphere-on-floor scene for field fitting")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("superface", help="segment a mesh into superfaces")
    s.add_argument("--mesh", required=True)
    s.add_argument("--k", type=float, default=superface.DEFAULT_K)
    s.add_argument("--min-size", type=int, default=superface.DEFAULT_MIN_SIZE)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_superface)

    s = sub.add_parser("graph", help="build the voting graph and cluster superfaces")
    s.add_argument("--mesh", required=True)
    s.add_argument("--seg", required=True)
    s.add_argument("--frames", required=True)
    s.add_argument("--classes")
    s.add_argument("--theta", type=float, default=instgraph.DEFAULT_THETA)
    s.add_argument("--deduct", choices=(instgraph.DEDUCT_ALL, instgraph.DEDUCT_OTHER_MASKS), default=instgraph.DEDUCT_ALL)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_graph)

    s = sub.add_parser("associate", help="assign global ids and correct 2D labels")
    s.add_argument("--clusters", required=True)
    s.add_argument("--mesh", required=True)
    s.add_argument("--seg", required=True)
    s.add_argument("--frames", required=True)
    s.add_argument("--classes")
    s.add_argument("--iou", type=float, default=asc.DEFAULT_IOU)
    s.add_argument("--out-labels", required=True)
    s.add_argument("--out-imap", required=True)
    s.set_defaults(func=cmd_associate)

    s = sub.add_parser("propagate", help="fill unlabelled pixels from features")
    s.add_argument("--frames", required=True, help="directory of labels (.lbl) plus cameras.txt and depth")
    s.add_argument("--features", help="directory of .fmap files (default: --frames)")
    s.add_argument("--pca", type=int, default=propagate.PCA_DIM)
    s.add_argument("--epochs", type=int, default=50)
    s.add_argument("--depth", type=int, choices=(0, 1), default=0)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.add_argument("--out-pca")
    s.set_defaults(func=cmd_propagate)

    s = sub.add_parser("fit", help="fit the voxel field")
    s.add_argument("--stage", type=int, choices=(1, 2), required=True)
    s.add_argument("--frames", required=True)
    s.add_argument("--labels", help="label directory overriding the frames' own .lbl files")
    s.add_argument("--classes")
    s.add_argument("--mesh", help="stage 1: bounds from this mesh")
    s.add_argument("--bounds", type=float, nargs=6, metavar=("X0", "Y0", "Z0", "X1", "Y1", "Z1"))
    s.add_argument("--init", help="stage 2: stage-1 field")
    s.add_argument("--imap", help="stage 2: instance map")
    s.add_argument("--grid", type=int, default=32)
    s.add_argument("--iters", type=int, default=2000)
    s.add_argument("--lr", type=float, default=0.01)
    s.add_argument("--batch", type=int, default=512)
    s.add_argument("--samples", type=int, default=fld_mod.DEFAULT_SAMPLES)
    s.add_argument("--stride", type=int, default=1)
    s.add_argument("--xi", type=float, default=20.0)
    s.add_argument("--tau-cells", type=float, default=4.0)
    s.add_argument("--beta", type=float, default=5.0)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_fit)

    s = sub.add_parser("render", help="render one frame from a fitted field")
    s.add_argument("--field", required=True)
    s.add_argument("--frames", required=True)
    s.add_argument("--frame", required=True)
    s.add_argument("--classes")
    s.add_argument("--samples", type=int, default=fld_mod.DEFAULT_SAMPLES)
    s.add_argument("--xi", type=float, default=20.0)
    s.add_argument("--out", nargs=4, required=True, metavar=("RGB_PPM", "SEM_LBL", "INST_LBL", "DEPTH_PGM"))
    s.set_defaults(func=cmd_render)

    s = sub.add_parser("metrics", help="evaluate predicted labels against ground truth")
    s.add_argument("--pred", required=True)
    s.add_argument("--gt", required=True)
    s.add_argument("--classes")
    s.add_argument("--pred-mesh")
    s.add_argument("--gt-mesh")
    s.add_argument("--report", required=True)
    s.set_defaults(func=cmd_metrics)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        return args.func(args)
    except pipeline.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except fld_mod.ConfigurationError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except fld_mod.DivergenceError as exc:
        print(f"numerical divergence: {exc}", file=sys.stderr)
        return EXIT_DIVERGENCE
    except pipeline.StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (scene_io.FormatError, scene_io.ArityError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
