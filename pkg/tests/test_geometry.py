import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from clothrecon.errors import BehindCamera, DegenerateFace, IndexOutOfRange, ShapeMismatch
from clothrecon.geometry import (Camera, SurfaceState, TextureMap, bilinear_sample, build_template, dihedral_angles,
                                 grid_template, initial_state, project, unproject)

from conftest import random_rotation


def test_unit_right_triangle(unit_triangle):
    assert unit_triangle.rest_areas[0] == pytest.approx(0.5)
    np.testing.assert_allclose(unit_triangle.material_frames[0], np.eye(2), atol=1e-15)


def test_two_triangles_edge_count(hinge):
    assert len(hinge.edges) == 5
    assert len(hinge.interior_edges) == 1
    assert tuple(hinge.edges[hinge.interior_edges[0]]) == (1, 2)


def test_repeated_vertex_is_degenerate():
    with pytest.raises(DegenerateFace):
        build_template([[0, 0, 0], [1, 0, 0], [0, 1, 0]], [[0, 1, 1]])


def test_collinear_face_is_degenerate():
    with pytest.raises(DegenerateFace):
        build_template([[0, 0, 0], [1, 0, 0], [2, 0, 0]], [[0, 1, 2]])


def test_face_index_out_of_range():
    with pytest.raises(IndexOutOfRange):
        build_template([[0, 0, 0], [1, 0, 0], [0, 1, 0]], [[0, 1, 3]])


def test_uvs_outside_unit_square():
    with pytest.raises(ValueError):
        build_template([[0, 0, 0], [1, 0, 0], [0, 1, 0]], [[0, 1, 2]], [[0, 0], [1.5, 0], [0, 1]])


def test_material_frame_inverts_rest_edges(grid4):
    x = grid4.vertices
    f = grid4.faces
    for k in range(grid4.n_faces):
        ax = grid4.frame_axes[k]
        e = np.stack([x[f[k, 1]] - x[f[k, 0]], x[f[k, 2]] - x[f[k, 0]]], axis=1)  # 3x2
        dm = ax @ e
        np.testing.assert_allclose(grid4.material_frames[k] @ dm, np.eye(2), atol=1e-12)


def test_build_is_deterministic(grid4):
    again = build_template(grid4.vertices, grid4.faces, grid4.uvs)
    for name in ("rest_areas", "material_frames", "edges", "edge_faces", "warp"):
        assert np.array_equal(getattr(grid4, name), getattr(again, name))


@given(seed=st.integers(0, 2**31 - 1))
def test_rest_areas_invariant_under_rigid_motion(seed):
    rng = np.random.default_rng(seed)
    t = grid_template(4, 3, (0.3, 0.2))
    moved = t.vertices @ random_rotation(rng).T + rng.normal(size=3)
    t2 = build_template(moved, t.faces, t.uvs)
    np.testing.assert_allclose(t2.rest_areas, t.rest_areas, rtol=1e-12)


def test_grid_warp_follows_u():
    t = grid_template(3, 3, 1.0, axis_u=(0, 1, 0), axis_v=(1, 0, 0))
    for k in range(t.n_faces):
        world = t.warp[k] @ t.frame_axes[k]
        np.testing.assert_allclose(np.abs(world), [0, 1, 0], atol=1e-12)


def test_project_examples():
    cam = Camera(100, 100, 50, 50, 100, 100)
    uv, z = project(np.array([[0.0, 0, 1]]), cam)
    np.testing.assert_allclose(uv, [[50, 50]])
    assert z[0] == 1.0
    uv, _ = project(np.array([[1.0, 0, 2]]), cam)
    assert uv[0, 0] == pytest.approx(100.0)
    with pytest.raises(BehindCamera):
        project(np.array([[0.0, 0, -1]]), cam)


@given(seed=st.integers(0, 2**31 - 1))
def test_unproject_inverts_project(seed):
    rng = np.random.default_rng(seed)
    cam = Camera(90, 110, 40, 30, 80, 60, random_rotation(rng), rng.normal(size=3))
    pc = np.column_stack([rng.uniform(-1, 1, (20, 2)), rng.uniform(0.5, 3, 20)])
    p = (pc - cam.translation) @ cam.rotation
    uv, z = project(p, cam)
    np.testing.assert_allclose(unproject(uv, z, cam), p, atol=1e-12)


def test_camera_validation():
    with pytest.raises(ValueError):
        Camera(0, 100, 50, 50, 100, 100)
    with pytest.raises(ValueError):
        Camera(100, 100, 150, 50, 100, 100)
    with pytest.raises(ValueError):
        Camera(100, 100, 50, 50, 100, 100, rotation=np.diag([1.0, 1.0, -1.0]))


def test_look_at_is_orthonormal():
    cam = Camera.look_at((0.3, -1, 0.7), (0, 0, 0), (0, 0, 1), 100, 100, 64, 48)
    r = cam.rotation
    assert np.abs(r.T @ r - np.eye(3)).max() < 1e-12
    assert abs(np.linalg.det(r) - 1) < 1e-12
    # the target lands on the principal point
    uv, _ = project(np.zeros((1, 3)), cam)
    np.testing.assert_allclose(uv, [[32, 24]], atol=1e-9)


def test_initial_state(grid4):
    s = initial_state(grid4)
    assert s.time_index == 1
    assert s.positions.shape == (grid4.n_vertices, 3)
    assert np.array_equal(s.positions, grid4.vertices)
    assert not np.any(s.velocities)


def test_state_validation():
    with pytest.raises(ShapeMismatch):
        SurfaceState(np.zeros((3, 3)), np.zeros((2, 3)))
    with pytest.raises(ValueError):
        SurfaceState(np.full((3, 3), np.nan), np.zeros((3, 3)))


def test_texture_range_checked():
    with pytest.raises(ValueError):
        TextureMap(np.full((2, 2, 3), 1.5))


def test_bilinear_sample_texel_centres_and_clamp():
    rng = np.random.default_rng(0)
    img = rng.random((4, 5, 3))
    # texel (r, c) centre sits at uv = ((c + 0.5) / w, (r + 0.5) / h)
    for r, c in [(0, 0), (2, 3), (3, 4)]:
        uv = np.array([(c + 0.5) / 5, (r + 0.5) / 4])
        np.testing.assert_allclose(bilinear_sample(img, uv), img[r, c], atol=1e-15)
    np.testing.assert_allclose(bilinear_sample(img, np.array([-0.3, -0.2])), img[0, 0])
    np.testing.assert_allclose(bilinear_sample(img, np.array([1.3, 2.0])), img[3, 4])
    mid = bilinear_sample(img, np.array([1.0 / 5, 0.5 / 4]))
    np.testing.assert_allclose(mid, 0.5 * (img[0, 0] + img[0, 1]))


def test_dihedral_flat_and_folded(hinge):
    np.testing.assert_allclose(dihedral_angles(hinge.vertices, hinge), [np.pi])
    x = hinge.vertices.copy()
    x[3, 2] = 1.0  # lift the far corner
    ang = dihedral_angles(x, hinge)[0]
    assert abs(ang - np.pi) > 0.1
