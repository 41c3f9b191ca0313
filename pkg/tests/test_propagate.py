import warnings

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from oracles import central_difference
from panolabel import propagate as prop
from panolabel.scene_io import UNKNOWN, ArityError, FormatError, LabelImage


def test_white_64d_data_reconstructs_exactly():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((400, 64))
    x -= x.mean(axis=0)
    u, _, vt = np.linalg.svd(x, full_matrices=False)
    x = u @ vt * np.sqrt(400)  # covariance is exactly the identity
    pca = prop.fit_pca(x, 64)
    # any orthonormal basis spans the whole space, so the round trip is lossless
    np.testing.assert_allclose(pca.basis @ pca.basis.T, np.eye(64), atol=1e-5)
    np.testing.assert_allclose(pca.transform(x) @ pca.basis + pca.mean, x, atol=1e-8)


def test_axis_aligned_variances_recover_axes():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((400, 64))
    x -= x.mean(axis=0)
    u, _, vt = np.linalg.svd(x, full_matrices=False)
    scale = np.geomspace(8.0, 1.0, 64)
    x = u * np.sqrt(400) * scale  # exactly diagonal covariance, distinct variances
    pca = prop.fit_pca(x, 64)
    perm = np.abs(pca.basis).argmax(axis=1)
    assert sorted(perm.tolist()) == list(range(64))
    assert np.abs(pca.basis).max(axis=1).min() > 0.9
    recon = pca.transform(x) @ pca.basis + pca.mean
    np.testing.assert_allclose(recon, x, atol=1e-8)


def test_rank_one_line_in_128d():
    rng = np.random.default_rng(2)
    direction = rng.standard_normal(128)
    direction /= np.linalg.norm(direction)
    x = rng.standard_normal((100, 1)) * direction + 3.0
    with pytest.warns(prop.RankDeficientWarning):
        pca = prop.fit_pca(x, 64)
    total = np.trace(np.cov(x.T, bias=True))
    assert pca.explained[0] == pytest.approx(total, rel=1e-9)
    assert pca.explained[1:].max() == 0.0
    np.testing.assert_allclose(pca.basis @ pca.basis.T, np.eye(64), atol=1e-5)


def test_eigenvalues_match_dense_eigensolve():
    rng = np.random.default_rng(3)
    # decaying spectrum keeps power iteration well conditioned
    x = rng.standard_normal((200, 96)) @ np.diag(np.geomspace(4.0, 0.05, 96))
    pca = prop.fit_pca(x, 64)
    xc = x - x.mean(axis=0)
    eig = np.sort(np.linalg.eigvalsh(xc.T @ xc / len(x)))[::-1][:64]
    np.testing.assert_allclose(pca.explained, eig, rtol=1e-5)
    np.testing.assert_allclose(pca.basis @ pca.basis.T, np.eye(64), atol=1e-5)
    for v in pca.basis:
        assert v[np.argmax(np.abs(v))] > 0


def test_pca_needs_enough_samples():
    with pytest.raises(ValueError):
        prop.fit_pca(np.zeros((10, 96)), 64)


@pytest.fixture(scope="module")
def fitted_pca():
    x = np.random.default_rng(5).standard_normal((200, 70)) @ np.diag(np.geomspace(3.0, 0.1, 70))
    return prop.fit_pca(x, 64)


@given(st.integers(0, 100_000))
def test_projection_is_a_contraction(fitted_pca, seed):
    a, b = np.random.default_rng(seed).standard_normal((2, 70)) * 3
    assert np.linalg.norm(fitted_pca.transform(a) - fitted_pca.transform(b)) <= np.linalg.norm(a - b) + 1e-5


def test_transform_dimension_mismatch(fitted_pca):
    with pytest.raises(ArityError):
        fitted_pca.transform(np.zeros((3, 65)))


def two_clusters(n=400, seed=0):
    rng = np.random.default_rng(seed)
    x = np.concatenate([rng.normal(-2, 0.5, (n, 5)), rng.normal(2, 0.5, (n, 5))])
    y = np.repeat([3, 7], n)
    return x, y


def test_separable_classes_fully_recovered():
    x, y = two_clusters()
    test_x, test_y = two_clusters(seed=9)
    clf = prop.train_classifier(x, y, {3, 7}, epochs=20, batch=128)
    pred, conf = clf.predict(test_x)
    assert (pred == test_y).all()
    assert ((conf > 0.5) & (conf <= 1.0)).all()


def test_single_class_predicted_everywhere():
    x = np.random.default_rng(0).standard_normal((50, 4))
    clf = prop.train_classifier(x, np.full(50, 5), {5}, epochs=3)
    assert (clf.predict(np.random.default_rng(1).standard_normal((20, 4)))[0] == 5).all()


def test_unknown_rows_ignored_and_empty_class_warned():
    x, y = two_clusters(50)
    y = y.copy()
    y[:10] = UNKNOWN
    with warnings.catch_warnings(record=True) as rec:
        warnings.simplefilter("always")
        clf = prop.train_classifier(x, y, {3, 7, 9}, epochs=5)
    assert any("class 9" in str(w.message) for w in rec)
    assert 9 not in clf.predict(x)[0].tolist()
    assert UNKNOWN not in clf.class_ids.tolist()


@pytest.mark.parametrize("depth", [0, 1])
def test_gradient_matches_central_differences(depth):
    rng = np.random.default_rng(4)
    x = rng.standard_normal((30, 6))
    y = rng.integers(0, 4, 30)
    dims = [6] + [5] * depth + [4]
    layers = [(rng.standard_normal((dims[i + 1], dims[i])), rng.standard_normal(dims[i + 1])) for i in range(len(dims) - 1)]
    _, grads = prop.loss_and_grad(layers, x, y)
    eps = 1e-4
    for li, (w, b) in enumerate(layers):
        for param, grad in ((w, grads[li][0]), (b, grads[li][1])):
            flat = param.reshape(-1)
            for k in range(flat.size):
                def f(v, k=k):
                    old = flat[k]
                    flat[k] = v
                    out = prop.loss_and_grad(layers, x, y)[0]
                    flat[k] = old
                    return out
                fd = central_difference(f, flat[k], eps)
                g = grad.reshape(-1)[k]
                assert abs(fd - g) <= 1e-4 * max(abs(g), abs(fd), 1e-3)


def test_full_batch_loss_non_increasing():
    x, y = two_clusters(200)
    y = np.where(np.random.default_rng(0).random(len(y)) < 0.1, 10 - y, y)  # label noise keeps the loss off zero
    clf = prop.train_classifier(x, y, {3, 7}, epochs=30, batch=len(x))
    h = np.array(clf.history)
    assert (np.diff(h) <= 1e-9).all()


def test_training_deterministic():
    x, y = two_clusters(100)
    a = prop.train_classifier(x, y, {3, 7}, epochs=5, batch=32, depth=1, seed=3)
    b = prop.train_classifier(x, y, {3, 7}, epochs=5, batch=32, depth=1, seed=3)
    for (wa, ba), (wb, bb) in zip(a.layers, b.layers):
        assert wa.tobytes() == wb.tobytes() and ba.tobytes() == bb.tobytes()


def test_fill_only_and_constant_input():
    x, y = two_clusters(100)
    clf = prop.train_classifier(x, y, {3, 7}, epochs=10)
    cls = np.zeros((2, 3), np.uint32)
    cls[0, 0] = 3  # a labelled pixel the classifier would call 7
    lab = LabelImage(np.zeros((2, 3), np.uint32), cls)
    feats = np.full((6, 5), 2.0)
    out, conf = prop.propagate(clf, feats, lab)
    assert out.class_id[0, 0] == 3 and conf[0, 0] == 1.0
    assert (out.class_id.reshape(-1)[1:] == 7).all()
    # zero input reduces to the standardised mean, so every pixel takes one class
    out, _ = prop.propagate(clf, np.tile(clf.mu, (6, 1)), LabelImage.empty(3, 2))
    bias = clf.layers[-1][1]
    assert len(set(out.class_id.reshape(-1).tolist())) == 1
    assert out.class_id[0, 0] == clf.class_ids[np.argmax(bias)]
    with pytest.raises(ArityError):
        prop.propagate(clf, feats[:5], lab)
    with pytest.raises(ArityError):
        clf.predict(np.zeros((2, 4)))


def test_positional_encoding_shape_and_values():
    pe = prop.positional_encoding(np.array([[0.0, 0.5, 1.0]]))
    assert pe.shape == (1, prop.PE_DIM) == (1, 24)
    assert pe[0, 0] == 0.0 and pe[0, 12] == 1.0  # sin(0), cos(0) of the first band


def test_synth_frames_recover_masked_pixels(small_scene):
    from panolabel import synth

    scene = small_scene[0]
    frames = synth.render_gt_frames(scene, n_frames=4)
    cor = synth.corrupt(frames, synth.CorruptionSpec(p_partial=0.5), 0, scene.classes)
    labels = {f.frame_id: l for f, l in zip(frames, cor.labels)}
    dense, _, _, _ = prop.propagate_frames(frames, labels, epochs=20)
    ok = total = 0
    for f, l in zip(frames, cor.labels):
        withheld = (l.class_id == UNKNOWN) & (f.labels.class_id != UNKNOWN)
        ok += int((dense[f.frame_id].class_id[withheld] == f.labels.class_id[withheld]).sum())
        total += int(withheld.sum())
        known = l.class_id != UNKNOWN
        assert np.array_equal(dense[f.frame_id].class_id[known], l.class_id[known])
    assert total > 0 and ok / total >= 0.99


def test_pca_file_round_trip(tmp_path, fitted_pca):
    pca = fitted_pca
    prop.save_pca(tmp_path / "p.ppca", pca)
    back = prop.load_pca(tmp_path / "p.ppca")
    assert np.array_equal(back.basis, pca.basis) and np.array_equal(back.mean, pca.mean)
    (tmp_path / "p.ppca").write_bytes((tmp_path / "p.ppca").read_bytes()[:-8])
    with pytest.raises(FormatError):
        prop.load_pca(tmp_path / "p.ppca")
