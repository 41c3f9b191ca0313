import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from oracles import best_injective_matching
from panolabel import associate as asc
from panolabel import instgraph, superface, synth
from panolabel.experiments import association_trial
from panolabel.instgraph import InstanceClusters
from panolabel.rasterizer import IdBuffer
from panolabel.scene_io import UNKNOWN, ClassTable, FormatError, LabelImage
from panolabel.superface import SuperfaceSegmentation

CLASSES = ClassTable({1: ("floor", "stuff"), 2: ("chair", "thing"), 3: ("table", "thing"), 4: ("sofa", "thing")})
CHAIR, TABLE, SOFA = 2, 3, 4


def test_single_cluster_gets_id_one():
    imap = asc.assign_global_ids(InstanceClusters(np.array([1, 1, 1])), np.ones(3))
    assert list(imap.instances) == [1]
    assert imap.node_to_instance.tolist() == [1, 1, 1]


def test_ids_follow_descending_area():
    clusters = InstanceClusters(np.array([1, 2, 2]))
    imap = asc.assign_global_ids(clusters, np.array([2.0, 3.0, 2.0]))
    # cluster 2 covers 5 m2, cluster 1 covers 2 m2
    assert imap.node_to_instance.tolist() == [2, 1, 1]
    assert imap.instances[1].area == 5.0 and imap.instances[2].area == 2.0
    again = asc.assign_global_ids(clusters, np.array([2.0, 3.0, 2.0]))
    assert again.node_to_instance.tolist() == imap.node_to_instance.tolist()


def test_equal_area_ties_by_lowest_node():
    imap = asc.assign_global_ids(InstanceClusters(np.array([2, 1])), np.array([1.0, 1.0]))
    assert imap.node_to_instance.tolist() == [1, 2]


def one_node_per_column_block(n_blocks, width=4, height=3):
    fid = np.repeat(np.arange(1, n_blocks + 1), width)[None, :].repeat(height, 0).astype(np.int32)
    return IdBuffer(fid, np.ones(fid.shape)), SuperfaceSegmentation(np.arange(n_blocks))


def test_exact_projection_matches():
    buf, seg = one_node_per_column_block(2)
    imap = asc.assign_global_ids(InstanceClusters(np.array([1, 2])), np.array([1.0, 1.0]))
    inst = (buf.face_id == 2).astype(np.uint32) * 7
    lab = LabelImage(inst, np.where(inst > 0, CHAIR, 1).astype(np.uint32))
    assert asc.match_frame(imap, buf, seg, lab, 0.25, CLASSES) == {7: 2}


def test_disjoint_mask_unmatched():
    buf, seg = one_node_per_column_block(2)
    imap = asc.assign_global_ids(InstanceClusters(np.array([1, 1])), np.array([1.0, 1.0]))
    inst = np.zeros(buf.shape, np.uint32)
    lab = LabelImage(inst, inst)
    assert asc.match_frame(imap, buf, seg, lab, 0.25, CLASSES) == {}
    buf_bg = IdBuffer(np.zeros((3, 4), np.int32), np.full((3, 4), np.inf))
    lab = LabelImage(np.full((3, 4), 3, np.uint32), np.full((3, 4), CHAIR, np.uint32))
    assert asc.match_frame(imap, buf_bg, seg, lab, 0.25, CLASSES) == {}


def test_iou_table_brute_force(rng):
    proj = rng.integers(0, 4, (9, 11))
    masks = rng.integers(0, 5, (9, 11))
    ids3, ids2, iou = asc.iou_table(proj, masks)
    assert ids3.tolist() == [1, 2, 3] and ids2.tolist() == [1, 2, 3, 4]
    for a, i in enumerate(ids3):
        for b, j in enumerate(ids2):
            inter = np.sum((proj == i) & (masks == j))
            union = np.sum((proj == i) | (masks == j))
            assert iou[a, b] == pytest.approx(inter / union)


@given(st.integers(0, 100_000))
def test_greedy_equals_exhaustive_on_separated_masks(seed):
    # every true pair beats every cross overlap: the regime of well-separated objects
    rng = np.random.default_rng(seed)
    iou = rng.uniform(0.0, 0.3, (3, 3))
    iou[np.arange(3), np.arange(3)] = rng.uniform(0.6, 1.0, 3)
    iou = iou[rng.permutation(3)][:, rng.permutation(3)]
    assert sorted(asc.greedy_match(iou, 0.25)) == best_injective_matching(iou, 0.25)


@given(st.integers(0, 100_000), st.integers(1, 4), st.integers(1, 4))
def test_greedy_is_half_optimal(seed, rows, cols):
    rng = np.random.default_rng(seed)
    iou = np.round(rng.uniform(0, 1, (rows, cols)), 2)
    greedy = asc.greedy_match(iou, 0.25)
    best = best_injective_matching(iou, 0.25)
    g = sum(iou[i, j] for i, j in greedy)
    b = sum(iou[i, j] for i, j in best)
    assert g >= 0.5 * b - 1e-12
    assert len({i for i, _ in greedy}) == len(greedy) == len({j for _, j in greedy})
    assert all(iou[i, j] >= 0.25 for i, j in greedy)


def test_greedy_differs_from_optimal_when_cross_overlap_is_high():
    iou = np.array([[0.9, 0.8], [0.8, 0.0]])
    assert asc.greedy_match(iou, 0.25) == [(0, 0)]
    assert best_injective_matching(iou, 0.25) == [(0, 1), (1, 0)]


def imap_with(n):
    return asc.assign_global_ids(InstanceClusters(np.arange(1, n + 1)), np.ones(n))


def block_label(cls_by_id, sizes, width=50):
    inst, cls = [], []
    for j, (c, px) in enumerate(zip(cls_by_id, sizes), start=1):
        inst += [j] * px
        cls += [c] * px
    pad = (-len(inst)) % width
    inst += [0] * pad
    cls += [0] * pad
    return LabelImage(np.array(inst).reshape(-1, width), np.array(cls).reshape(-1, width))


def test_vote_majority_and_unknown():
    imap = imap_with(2)
    labels = {"a": block_label([CHAIR], [10]), "b": block_label([CHAIR], [10]), "c": block_label([TABLE], [10])}
    matches = {"a": {1: 1}, "b": {1: 1}, "c": {1: 1}}
    asc.vote_class(imap, labels, matches)
    assert imap.instances[1].class_id == CHAIR
    assert imap.instances[2].class_id == UNKNOWN
    assert imap.instances[1].matches == {"a": {1}, "b": {1}, "c": {1}}


def test_vote_pixel_weighted():
    imap = imap_with(1)
    labels = {"a": block_label([CHAIR], [100]), "b": block_label([TABLE], [150]), "c": block_label([CHAIR], [80])}
    asc.vote_class(imap, labels, {k: {1: 1} for k in labels})
    # brute-force recount
    tally = {}
    for lab in labels.values():
        for c in lab.class_id[lab.instance_id == 1].tolist():
            tally[c] = tally.get(c, 0) + 1
    assert tally == {CHAIR: 180, TABLE: 150}
    assert imap.instances[1].class_id == CHAIR


def test_vote_tie_goes_to_lower_class():
    imap = imap_with(1)
    labels = {"a": block_label([TABLE], [10]), "b": block_label([CHAIR], [10])}
    asc.vote_class(imap, labels, {k: {1: 1} for k in labels})
    assert imap.instances[1].class_id == CHAIR


def test_correct_mislabelled_mask():
    imap = imap_with(2)
    imap.instances[1].class_id = CHAIR
    lab = block_label([SOFA, TABLE], [20, 20])
    out, flagged = asc.correct_labels(imap, lab, {1: 1}, CLASSES)
    assert (out.class_id[lab.instance_id == 1] == CHAIR).all()
    assert (out.instance_id[lab.instance_id == 1] == 1).all()
    # the unmatched table keeps its class, loses its frame-local id, and is flagged
    assert flagged == [2]
    assert (out.class_id[lab.instance_id == 2] == TABLE).all()
    assert not out.instance_id[lab.instance_id == 2].any()


def test_consistent_frame_is_fixed_point():
    imap = imap_with(2)
    imap.instances[1].class_id = CHAIR
    imap.instances[2].class_id = TABLE
    lab = block_label([CHAIR, TABLE, 1], [20, 20, 10])
    out, flagged = asc.correct_labels(imap, lab, {1: 1, 2: 2}, CLASSES)
    assert out.instance_id.tobytes() == lab.instance_id.tobytes()
    assert out.class_id.tobytes() == lab.class_id.tobytes()
    assert flagged == []


def test_stuff_pixels_untouched():
    imap = imap_with(1)
    imap.instances[1].class_id = CHAIR
    lab = block_label([1, SOFA], [30, 20])
    out, _ = asc.correct_labels(imap, lab, {2: 1}, CLASSES)
    stuff = lab.class_id == 1
    assert np.array_equal(out.class_id[stuff], lab.class_id[stuff])
    assert np.array_equal(out.instance_id[stuff], lab.instance_id[stuff])


@pytest.fixture(scope="module")
def flipped_run():
    scene = synth.generate_scene(n_things=4, seed=4, n_frames=24, width=128, height=96)
    frames, bufs = synth.render_gt_frames(scene, features=False, return_idbufs=True)
    cor = synth.corrupt(frames, synth.CorruptionSpec(p_flip=0.2, permute_ids=True), 4, scene.classes, scene.n_things)
    seg = superface.segment(superface.build_normal_graph(scene.mesh))
    clusters = instgraph.cut_and_cluster(instgraph.build_scene_graph(bufs, cor.labels, seg, 0.3, scene.classes))
    fids = [f.frame_id for f in frames]
    res = asc.associate(clusters, superface.superface_areas(scene.mesh, seg), seg, fids, bufs, cor.labels, 0.25, scene.classes)
    return scene, frames, bufs, seg, cor, res


def test_flipped_instances_corrected_to_gt(flipped_run):
    scene, frames, _, _, cor, res = flipped_run
    assert any(cor.flipped)
    for f, flips, id_map in zip(frames, cor.flipped, cor.id_maps):
        lab = res.corrected[f.frame_id]
        for obs, gt in id_map.items():
            m = f.labels.instance_id == gt
            if gt in flips:
                assert (lab.class_id[m] == f.labels.class_id[m]).all()


def test_global_uniqueness_and_multiview_consistency(flipped_run):
    scene, frames, _, _, _, res = flipped_run
    owner, cls_of = {}, {}
    for f in frames:
        lab = res.corrected[f.frame_id]
        for gid in np.unique(lab.instance_id[lab.instance_id > 0]).tolist():
            m = lab.instance_id == gid
            gts = set(np.unique(f.labels.instance_id[m]).tolist())
            classes = set(np.unique(lab.class_id[m]).tolist())
            assert len(gts) == 1 and len(classes) == 1
            assert owner.setdefault(gid, gts) == gts
            assert cls_of.setdefault(gid, classes) == classes


def test_correction_is_idempotent(flipped_run):
    scene, frames, bufs, seg, _, res = flipped_run
    for f, b in zip(frames, bufs):
        once = res.corrected[f.frame_id]
        m = asc.match_frame(res.imap, b, seg, once, 0.25, scene.classes)
        twice, _ = asc.correct_labels(res.imap, once, m, scene.classes)
        assert twice.equals(once)


def test_recovered_mappings_equal_gt_permutations():
    trial = association_trial(3, synth.CorruptionSpec(p_drop=0.3, permute_ids=True), n_things=4, n_frames=24, width=128, height=96)
    assert trial.count_ok
    assert trial.mapped_total > 0 and trial.mapped_ok == trial.mapped_total


def test_instance_map_round_trip(tmp_path, flipped_run):
    scene, _, _, seg, _, res = flipped_run
    asc.save_imap(tmp_path / "imap.json", res.imap)
    back = asc.load_imap(tmp_path / "imap.json", seg.n_superfaces)
    assert back.to_json() == res.imap.to_json()
    assert np.array_equal(back.node_to_instance, res.imap.node_to_instance)
    doc = json.loads((tmp_path / "imap.json").read_text())
    doc["version"] = 99
    (tmp_path / "imap.json").write_text(json.dumps(doc))
    with pytest.raises(FormatError):
        asc.load_imap(tmp_path / "imap.json")


def test_fused_faces_take_instance_labels(flipped_run):
    scene, frames, bufs, seg, _, res = flipped_run
    face_cls, face_inst = asc.fuse_mesh_labels(res.imap, seg, bufs, [res.corrected[f.frame_id] for f in frames], scene.classes)
    for gid, inst in res.imap.instances.items():
        if inst.class_id != UNKNOWN:
            faces = np.isin(seg.face_to_sf, inst.nodes)
            assert (face_inst[faces] == gid).all() and (face_cls[faces] == inst.class_id).all()
    # thing superfaces without a 3D instance are never given a thing class
    orphan = face_inst == 0
    assert not scene.classes.thing_mask(face_cls[orphan].astype(np.uint32)).any()
