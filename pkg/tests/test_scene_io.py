import struct

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from panolabel import scene_io, synth
from panolabel.scene_io import (
    ArityError,
    ClassTable,
    EmptyMeshError,
    FormatError,
    Frame,
    LabelImage,
    MaskLayer,
    MeshParseError,
    TriMesh,
)


def test_single_triangle_obj_normal(tmp_path):
    p = tmp_path / "tri.obj"
    p.write_text("v 0 0 0\nv 1 0 0\nv 0 1 0\nf 1 2 3\n")
    mesh = scene_io.load_mesh(p)
    assert mesh.n_faces == 1
    np.testing.assert_array_equal(mesh.face_normals[0], [0, 0, 1])


def test_unit_cube_ply(tmp_path):
    cube = synth.unit_cube_mesh()
    scene_io.save_mesh(tmp_path / "cube.ply", cube)
    mesh = scene_io.load_mesh(tmp_path / "cube.ply")
    assert len(mesh.vertices) == 8 and mesh.n_faces == 12
    assert len(np.unique(np.round(mesh.face_normals, 9), axis=0)) == 6


def test_room_scene_round_trips_bit_exact(tmp_path):
    scene = synth.generate_scene(seed=3, n_frames=2, width=32, height=24)
    for name in ("room.ply", "room.obj"):
        scene_io.save_mesh(tmp_path / name, scene.mesh)
        assert scene_io.load_mesh(tmp_path / name).equals(scene.mesh)


def test_obj_polygon_fan_and_negative_indices(tmp_path):
    p = tmp_path / "quad.obj"
    p.write_text("v 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\nf -4 -3 -2 -1\n")
    mesh = scene_io.load_mesh(p)
    assert mesh.faces.tolist() == [[0, 1, 2], [0, 2, 3]]


def test_obj_errors_carry_line_numbers(tmp_path):
    p = tmp_path / "bad.obj"
    p.write_text("v 0 0 0\nv 1 0 0\nf 1 2 7\n")
    with pytest.raises(MeshParseError) as exc:
        scene_io.load_mesh(p)
    assert "3" in str(exc.value)


def test_degenerate_faces_dropped_and_empty_rejected(tmp_path):
    p = tmp_path / "degen.obj"
    p.write_text("v 0 0 0\nv 1 0 0\nv 2 0 0\nv 0 1 0\nf 1 2 3\nf 1 2 4\n")
    assert scene_io.load_mesh(p).n_faces == 1
    p.write_text("v 0 0 0\nv 1 0 0\nv 2 0 0\nf 1 2 3\n")
    with pytest.raises(EmptyMeshError):
        scene_io.load_mesh(p)


def test_all_zero_label_payload(tmp_path):
    p = tmp_path / "zero.lbl"
    scene_io.save_label_layers(p, 5, 4, [])
    lab = scene_io.load_label_image(p)
    assert lab.shape == (4, 5)
    assert not lab.instance_id.any() and not lab.class_id.any()


def test_overlapping_layers_take_highest_score(tmp_path):
    a = np.zeros((4, 4), bool)
    a[:3, :3] = True
    b = np.zeros((4, 4), bool)
    b[1:, 1:] = True
    p = tmp_path / "ov.lbl"
    scene_io.save_label_layers(p, 4, 4, [MaskLayer(2, 5, 0.4, b), MaskLayer(1, 3, 0.9, a)])
    lab = scene_io.load_label_image(p)
    assert lab.instance_id[1, 1] == 1 and lab.class_id[1, 1] == 3
    assert lab.instance_id[3, 3] == 2 and lab.class_id[3, 3] == 5


def test_equal_scores_break_to_lower_instance():
    m = np.ones((2, 2), bool)
    lab = scene_io.resolve_layers([MaskLayer(7, 1, 0.5, m), MaskLayer(3, 2, 0.5, m)], 2, 2)
    assert (lab.instance_id == 3).all()


def test_label_truncated_and_version_rejected(tmp_path):
    p = tmp_path / "x.lbl"
    scene_io.save_label_layers(p, 4, 4, [MaskLayer(1, 1, 1.0, np.ones((4, 4), bool))])
    data = p.read_bytes()
    p.write_bytes(data[:-3])
    with pytest.raises(FormatError):
        scene_io.load_label_image(p)
    p.write_bytes(data[:4] + struct.pack("<I", 2) + data[8:])
    with pytest.raises(FormatError):
        scene_io.load_label_image(p)


def test_synth_gt_labels_round_trip(tmp_path, small_scene):
    _, frames, _ = small_scene
    for f in frames[:3]:
        scene_io.save_label_image(tmp_path / "l.lbl", f.labels)
        assert scene_io.load_label_image(tmp_path / "l.lbl").equals(f.labels)


label_images = st.integers(1, 6).flatmap(
    lambda h: st.integers(1, 6).flatmap(
        lambda w: st.tuples(
            arrays(np.uint32, (h, w), elements=st.integers(0, 5)),
            arrays(np.uint32, (h, w), elements=st.integers(0, 4)),
        )
    )
)


@given(label_images)
def test_label_image_round_trip_property(tmp_path_factory, pair):
    inst, cls = pair
    lab = LabelImage(inst, cls)
    p = tmp_path_factory.mktemp("lbl") / "x.lbl"
    scene_io.save_label_image(p, lab)
    back = scene_io.load_label_image(p)
    # pixels with class UNKNOWN carry no segment, so only labelled pixels round-trip
    known = cls != 0
    np.testing.assert_array_equal(back.class_id[known], cls[known])
    np.testing.assert_array_equal(back.instance_id[known], inst[known])
    assert not back.class_id[~known].any()


@given(arrays(np.float32, st.tuples(st.integers(1, 4), st.integers(1, 4), st.integers(1, 5)), elements=st.floats(-1e6, 1e6, width=32)))
def test_feature_map_round_trip_property(tmp_path_factory, feats):
    p = tmp_path_factory.mktemp("fmap") / "x.fmap"
    scene_io.save_feature_map(p, feats)
    np.testing.assert_array_equal(scene_io.load_feature_map(p), feats)


def test_feature_map_size_mismatch(tmp_path):
    p = tmp_path / "f.fmap"
    scene_io.save_feature_map(p, np.zeros((2, 2, 3), np.float32))
    p.write_bytes(p.read_bytes()[:-4])
    with pytest.raises(FormatError):
        scene_io.load_feature_map(p)


def test_depth_and_ppm_round_trip(tmp_path, rng):
    depth = np.round(rng.uniform(0, 10, (6, 7)), 3)
    scene_io.save_depth(tmp_path / "d.pgm", depth)
    np.testing.assert_allclose(scene_io.load_depth(tmp_path / "d.pgm"), depth, atol=5e-4)
    rgb = rng.integers(0, 256, (5, 4, 3)) / 255.0
    scene_io.save_ppm(tmp_path / "c.ppm", rgb)
    np.testing.assert_allclose(scene_io.load_ppm(tmp_path / "c.ppm"), rgb)


def test_cameras_round_trip(tmp_path):
    scene = synth.generate_scene(seed=1, n_frames=4, width=40, height=30)
    scene_io.save_cameras(tmp_path / "cameras.txt", scene.cameras)
    back = scene_io.load_cameras(tmp_path / "cameras.txt")
    for a, b in zip(scene.cameras, back):
        assert (a.frame_id, a.width, a.height) == (b.frame_id, b.width, b.height)
        np.testing.assert_array_equal(a.pose, b.pose)
        assert (a.fx, a.fy, a.cx, a.cy) == (b.fx, b.fy, b.cx, b.cy)


def test_frame_invariants():
    pose = np.hstack([np.eye(3), np.zeros((3, 1))])
    with pytest.raises(FormatError):
        Frame("f", 0.0, 1.0, 0, 0, pose, 4, 4)
    bad = pose.copy()
    bad[0, 0] = 2.0
    with pytest.raises(FormatError):
        Frame("f", 1.0, 1.0, 0, 0, bad, 4, 4)
    with pytest.raises(ArityError):
        Frame("f", 1.0, 1.0, 0, 0, pose, 4, 4, depth=np.zeros((3, 4)))
    with pytest.raises(FormatError):
        Frame("f", 1.0, 1.0, 0, 0, pose, 2, 2, features=np.full((2, 2, 1), np.nan))


def test_class_table_validation(tmp_path):
    with pytest.raises(FormatError):
        ClassTable({1: ("a", "thing"), 3: ("b", "stuff")})
    with pytest.raises(FormatError):
        ClassTable({1: ("a", "blob")})
    t = ClassTable({1: ("floor", "stuff"), 2: ("chair", "thing")})
    scene_io.save_class_table(tmp_path / "c.txt", t)
    assert scene_io.load_class_table(tmp_path / "c.txt") == t


def test_colored_mesh_single_face(tmp_path):
    p = tmp_path / "one.ply"
    tri = TriMesh(np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0]], float), np.array([[0, 1, 2]]))
    scene_io.write_colored_mesh(p, tri, [5])
    colors = scene_io.read_face_colors(p)
    assert colors.tolist() == [list(scene_io.palette(5))]
    assert p.read_bytes().count(bytes(scene_io.palette(5))) >= 1


def test_colored_mesh_deterministic_and_two_instances(tmp_path):
    cube = synth.unit_cube_mesh()
    labels = np.array([1] * 6 + [2] * 6)
    scene_io.write_colored_mesh(tmp_path / "a.ply", cube, labels)
    scene_io.write_colored_mesh(tmp_path / "b.ply", cube, labels)
    assert (tmp_path / "a.ply").read_bytes() == (tmp_path / "b.ply").read_bytes()
    assert len(np.unique(scene_io.read_face_colors(tmp_path / "a.ply"), axis=0)) == 2


def test_colored_mesh_arity(tmp_path):
    with pytest.raises(ArityError):
        scene_io.write_colored_mesh(tmp_path / "x.ply", synth.unit_cube_mesh(), [1, 2])


@given(st.integers(0, 2**40))
def test_palette_is_pure(label):
    c = scene_io.palette(label)
    assert c == scene_io.palette(label)
    assert all(0 <= v <= 255 for v in c)


def test_palette_frozen_values():
    # regression lock: stored meshes depend on these colours
    assert scene_io.palette(0) == (128, 128, 128)
    assert [scene_io.palette(i) for i in (1, 2, 3)] == [(65, 156, 66), (78, 150, 215), (109, 207, 65)]


def test_config_parsing(tmp_path):
    p = tmp_path / "c.cfg"
    p.write_text("# comment\na = 1\nb=two # trailing\n\n")
    assert scene_io.load_config(p) == {"a": "1", "b": "two"}
    p.write_text("no equals here\n")
    with pytest.raises(FormatError):
        scene_io.load_config(p)
