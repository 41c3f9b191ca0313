import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

import oracles
from panolabel import metrics
from panolabel.scene_io import ClassTable, LabelImage, TriMesh

CLASSES = ClassTable({1: ("floor", "stuff"), 2: ("chair", "thing"), 3: ("table", "thing")})


def lab(inst, cls):
    return LabelImage(np.array(inst), np.array(cls))


def test_fifty_tiny_cases_match_brute_force():
    for seed in range(50):
        pred, gt = oracles.random_label_case(seed)
        pan = metrics.panoptic_quality_scene(pred, gt, CLASSES)
        np.testing.assert_allclose((pan.pq, pan.sq, pan.rq), oracles.brute_panoptic(pred, gt, CLASSES), atol=1e-9)
        assert abs(pan.pq - pan.sq * pan.rq) <= 1e-9
        sem = metrics.semantic_metrics(pred, gt, len(CLASSES))
        np.testing.assert_allclose((sem.miou, sem.macc), oracles.brute_semantic(pred, gt, len(CLASSES)), atol=1e-9)
        cov = metrics.coverage_metrics(pred, gt, CLASSES)
        np.testing.assert_allclose((cov.mcov, cov.mwcov), oracles.brute_coverage(pred, gt, CLASSES), atol=1e-9)


@given(st.integers(0, 100_000))
def test_pq_factorises_and_stays_in_range(seed):
    pred, gt = oracles.random_label_case(seed, n_frames=3, h=5, w=5)
    rep = metrics.evaluate_frames(pred, gt, CLASSES)
    assert abs(rep.pq - rep.sq * rep.rq) <= 1e-9
    for v in (rep.pq, rep.sq, rep.rq, rep.miou, rep.macc, rep.mcov, rep.mwcov):
        assert 0.0 <= v <= 1.0


@given(st.integers(0, 100_000))
def test_instance_relabelling_invariance(seed):
    pred, gt = oracles.random_label_case(seed)
    perm = np.concatenate([[0], np.random.default_rng(seed).permutation(np.arange(1, 4)) + 10])
    renamed = [lab(perm[p.instance_id], p.class_id) for p in pred]
    a = metrics.panoptic_quality_scene(pred, gt, CLASSES)
    b = metrics.panoptic_quality_scene(renamed, gt, CLASSES)
    assert (a.pq, a.tp, a.fp, a.fn) == (b.pq, b.tp, b.fp, b.fn)
    ca, cb = metrics.coverage_metrics(pred, gt, CLASSES), metrics.coverage_metrics(renamed, gt, CLASSES)
    assert (ca.mcov, ca.mwcov) == (cb.mcov, cb.mwcov)


def test_identical_labels_score_one():
    pred, gt = oracles.random_label_case(7)
    rep = metrics.evaluate_frames(gt, gt, CLASSES)
    assert rep.pq == rep.sq == rep.rq == 1.0
    assert rep.miou == rep.macc == 1.0


def test_hand_panoptic_case():
    # one chair of 4 pixels, predicted with one extra pixel, plus a spurious table
    gt = lab([[1, 1, 0, 0], [1, 1, 0, 0]], [[2, 2, 1, 1], [2, 2, 1, 1]])
    pred = lab([[1, 1, 1, 0], [1, 1, 0, 5]], [[2, 2, 2, 1], [2, 2, 1, 3]])
    r = metrics.panoptic_quality_scene([pred], [gt], CLASSES)
    # chair IoU 4/5; floor IoU exactly 1/2 is not a match; the table is spurious
    assert (r.tp, r.fp, r.fn) == (1, 2, 1)
    assert r.sq == pytest.approx(0.8)
    assert r.rq == pytest.approx(1 / 2.5)
    assert r.pq == pytest.approx(0.32)


def test_mostly_void_prediction_not_penalised():
    gt = lab([[0, 0, 0, 1]], [[0, 0, 0, 2]])
    pred = lab([[7, 7, 7, 1]], [[3, 3, 3, 2]])
    r = metrics.panoptic_quality_scene([pred], [gt], CLASSES)
    assert (r.tp, r.fp, r.fn) == (1, 0, 0) and r.pq == 1.0


def test_hand_coverage_case():
    # A: 2 px covered exactly; B: 6 px, prediction covers half of it
    gt = lab([[1, 1, 2, 2, 2, 2, 2, 2]], [[2] * 8])
    pred = lab([[4, 4, 9, 9, 9, 0, 0, 0]], [[3] * 8])
    c = metrics.coverage_metrics([pred], [gt], CLASSES)
    assert c.best_iou == {1: 1.0, 2: 0.5}
    assert c.mcov == pytest.approx(0.75)
    assert c.mwcov == pytest.approx(0.625)


def test_semantic_means_over_gt_classes_only():
    gt = lab([[0, 0, 0, 0]], [[1, 1, 2, 0]])
    pred = lab([[0, 0, 0, 0]], [[1, 3, 2, 3]])
    s = metrics.semantic_metrics([pred], [gt], 3)
    assert set(s.per_class) == {1, 2}
    assert s.per_class[1] == (0.5, 0.5) and s.per_class[2] == (1.0, 1.0)
    assert s.miou == pytest.approx(0.75)


def test_alignment_errors():
    a = LabelImage.empty(3, 2)
    with pytest.raises(metrics.AlignmentError):
        metrics.panoptic_quality_scene([a], [a, a], CLASSES)
    with pytest.raises(metrics.AlignmentError):
        metrics.semantic_metrics([a], [LabelImage.empty(2, 3)])


def square(z):
    v = np.array([[0, 0, z], [1, 0, z], [1, 1, z], [0, 1, z]], float)
    return TriMesh(v, np.array([[0, 1, 2], [0, 2, 3]]))


def test_parallel_planes_one_centimetre():
    # interior points sit exactly 1 cm away; the rim adds a sliver of slant distance
    r = metrics.mesh_metrics(square(0.01), square(0.0), n_samples=20_000)
    for v in (r.comp, r.acc, r.cl1):
        assert v == pytest.approx(1.0, rel=0.01)


@given(st.integers(0, 100_000))
def test_closest_point_matches_scalar_oracle(seed):
    rng = np.random.default_rng(seed)
    p, a, b, c = rng.normal(size=(4, 20, 3))
    d = metrics.point_triangle_distance(p, a, b, c)
    ref = [oracles.point_triangle_distance(p[i], a[i], b[i], c[i]) for i in range(20)]
    np.testing.assert_allclose(d, ref, atol=1e-9)


def test_kd_query_matches_brute_force(small_scene):
    mesh = small_scene[0].mesh
    rng = np.random.default_rng(0)
    lo, hi = mesh.vertices.min(axis=0), mesh.vertices.max(axis=0)
    pts = rng.uniform(lo - 0.3, hi + 0.3, (300, 3))
    np.testing.assert_allclose(metrics.SurfaceQuery(mesh, k=4).distance(pts), metrics.nearest_distance_bruteforce(pts, mesh), atol=1e-12)


def test_chamfer_symmetric_and_zero_on_self(small_scene):
    mesh = small_scene[0].mesh
    a = metrics.mesh_metrics(square(0.0), square(0.02), n_samples=5000)
    b = metrics.mesh_metrics(square(0.02), square(0.0), n_samples=5000)
    assert a.cl1 == pytest.approx(b.cl1, rel=0.01)
    assert metrics.mesh_metrics(mesh, mesh, n_samples=2000).cl1 < 1e-9
    with pytest.raises(ValueError):
        metrics.mesh_metrics(TriMesh(np.zeros((0, 3)), np.zeros((0, 3), int)), mesh)


def test_report_text_lists_classes():
    pred, gt = oracles.random_label_case(3)
    rep = metrics.evaluate_frames(pred, gt, CLASSES)
    text = rep.to_text(CLASSES)
    assert "PQ_s" in text and "floor" in text
    assert text == metrics.evaluate_frames(pred, gt, CLASSES).to_text(CLASSES)
