import csv

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import stats

from clothrecon.errors import DegenerateConfiguration, EmptyCloud
from clothrecon.evaluation import (PointCloud, RigidTransform, chamfer, evaluate_sequence, icp_refine,
                                   nearest_sq_dists, procrustes_align, sample_surface)
from clothrecon.geometry import build_template, grid_template

from conftest import random_rotation


def brute_chamfer(a, b):
    d_ab = np.min(((a[:, None, :] - b[None, :, :]) ** 2).sum(-1), axis=1)
    d_ba = np.min(((b[:, None, :] - a[None, :, :]) ** 2).sum(-1), axis=1)
    return float(np.mean(d_ab) + np.mean(d_ba))


def test_chamfer_examples():
    a = np.array([[0.0, 0, 0]])
    b = np.array([[3.0, 4, 0]])
    assert chamfer(a, b) == 50.0
    assert chamfer(a, a) == 0.0
    two = np.array([[0.0, 0, 0], [1.0, 0, 0]])
    # each point of `two` is 0 or 1 away from the origin; the origin is 0 away from `two`
    assert chamfer(two, a) == 0.5
    with pytest.raises(EmptyCloud):
        chamfer(np.zeros((0, 3)), a)


@given(seed=st.integers(0, 2**32 - 1), n=st.integers(1, 200), m=st.integers(1, 200))
def test_chamfer_equals_brute_force_bitwise(seed, n, m):
    rng = np.random.default_rng(seed)
    a = rng.standard_normal((n, 3))
    b = rng.standard_normal((m, 3))
    assert chamfer(a, b) == brute_chamfer(a, b)


def test_chamfer_symmetric_and_rigid_invariant():
    rng = np.random.default_rng(0)
    a, b = rng.random((50, 3)), rng.random((70, 3))
    assert chamfer(a, b) == pytest.approx(chamfer(b, a), rel=1e-15)
    r = random_rotation(rng)
    t = rng.standard_normal(3)
    assert chamfer(a @ r.T + t, b @ r.T + t) == pytest.approx(chamfer(a, b), rel=1e-12)


def test_nearest_sq_dists_with_ties():
    src = np.array([[0.5, 0, 0]])
    dst = np.array([[0.0, 0, 0], [1.0, 0, 0]])
    assert nearest_sq_dists(src, dst)[0] == 0.25


def test_point_cloud_validity_mask():
    pc = PointCloud(np.arange(12.0).reshape(4, 3), valid=[True, False, True, False])
    assert len(pc) == 2
    with pytest.raises(ValueError):
        PointCloud([[np.nan, 0, 0]])
    with pytest.raises(ValueError):
        PointCloud(np.zeros((4, 3)), valid=[True])


def test_procrustes_recovers_similarity():
    rng = np.random.default_rng(1)
    a = rng.standard_normal((30, 3))
    r = random_rotation(rng)
    b = 1.7 * a @ r.T + [0.1, -2, 3]
    tf = procrustes_align(a, b)
    np.testing.assert_allclose(tf.rotation, r, atol=1e-12)
    assert tf.scale == pytest.approx(1.7)
    np.testing.assert_allclose(tf.apply(a), b, atol=1e-12)
    rigid = procrustes_align(a, a @ r.T, with_scale=False)
    assert rigid.scale == 1.0 and np.linalg.det(rigid.rotation) == pytest.approx(1.0)


def test_procrustes_handles_reflection_and_degenerate_input():
    rng = np.random.default_rng(2)
    a = rng.standard_normal((20, 3))
    mirrored = a * [1, 1, -1]
    assert np.linalg.det(procrustes_align(a, mirrored).rotation) == pytest.approx(1.0)
    with pytest.raises(DegenerateConfiguration):
        procrustes_align(a[:2], a[:2])
    line = np.outer(np.arange(5.0), [1, 2, 3])
    with pytest.raises(DegenerateConfiguration):
        procrustes_align(line, line)
    with pytest.raises(ValueError):
        procrustes_align(a, a[:10])


def test_rigid_transform_compose_and_validation():
    rng = np.random.default_rng(3)
    t1 = RigidTransform(random_rotation(rng), rng.standard_normal(3), 2.0)
    t2 = RigidTransform(random_rotation(rng), rng.standard_normal(3), 0.5)
    p = rng.standard_normal((5, 3))
    np.testing.assert_allclose(t1.compose(t2).apply(p), t1.apply(t2.apply(p)), atol=1e-12)
    with pytest.raises(ValueError):
        RigidTransform(np.ones((3, 3)))
    with pytest.raises(ValueError):
        RigidTransform(scale=0.0)


def test_icp_recovers_small_motion():
    rng = np.random.default_rng(4)
    t = grid_template(10, 10, 0.5)
    x = t.vertices.copy()
    x[:, 2] = 0.1 * np.sin(6 * x[:, 0]) * np.cos(4 * x[:, 1])
    dst = sample_surface(x, t.faces, 4000, rng)
    ang = 0.05
    r = np.array([[np.cos(ang), -np.sin(ang), 0], [np.sin(ang), np.cos(ang), 0], [0, 0, 1]])
    src = dst @ r.T + [0.01, -0.02, 0.005]
    tf = icp_refine(src, dst)
    assert chamfer(tf.apply(src), dst) < 1e-10
    with pytest.raises(EmptyCloud):
        icp_refine(np.zeros((0, 3)), dst)


def test_sample_surface_area_weighting():
    # two disjoint faces with a 3:1 area ratio
    x = np.array([[0, 0, 0], [3, 0, 0], [0, 2, 0], [5, 0, 0], [6, 0, 0], [5, 2, 0]], dtype=float)
    f = np.array([[0, 1, 2], [3, 4, 5]])
    n = 100_000
    pts = sample_surface(x, f, n, np.random.default_rng(5))
    observed = [np.sum(pts[:, 0] < 4), np.sum(pts[:, 0] >= 4)]
    assert stats.chisquare(observed, [0.75 * n, 0.25 * n]).pvalue > 1e-3
    assert np.all(pts[:, 2] == 0)
    with pytest.raises(DegenerateConfiguration):
        sample_surface(np.zeros((3, 3)), [[0, 1, 2]], 5)


def test_sample_surface_inside_triangle():
    x = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0]], dtype=float)
    pts = sample_surface(x, [[0, 1, 2]], 5000, 0)
    assert np.all(pts[:, :2] >= 0) and np.all(pts[:, 0] + pts[:, 1] <= 1 + 1e-12)
    assert stats.kstest(pts[:, 0], lambda u: 1 - (1 - u) ** 2).pvalue > 1e-3


def _sequence():
    t = grid_template(6, 6, 0.5)
    frames = []
    for k in range(4):
        x = t.vertices.copy()
        x[:, 2] = 0.05 * k * np.sin(5 * x[:, 0])
        frames.append(x)
    return t, frames


def test_evaluate_sequence_identical_is_zero():
    t, frames = _sequence()
    rng = np.random.default_rng(7)
    refs = [sample_surface(x, t.faces, 2000, rng) for x in frames]
    ev = evaluate_sequence(frames, t, refs, 2000, seed=7)
    assert max(ev.per_frame) < 1e-10


def test_evaluate_sequence_ignores_rigid_offset():
    t, frames = _sequence()
    rng = np.random.default_rng(8)
    refs = [sample_surface(x, t.faces, 3000, rng) for x in frames]
    moved = [x + [0.02, 0.01, -0.03] for x in frames]
    aligned = evaluate_sequence(moved, t, refs, 3000, seed=9)
    raw = evaluate_sequence(moved, t, refs, 3000, seed=9, align=False)
    assert aligned.mean < 0.2 * raw.mean
    static = evaluate_sequence([t.vertices] * 4, t, refs, 3000, seed=9)
    assert static.mean > aligned.mean
    with pytest.raises(ValueError):
        evaluate_sequence(frames[:2], t, refs, 100)


def test_csv_output(tmp_path):
    t, frames = _sequence()
    refs = [sample_surface(x, t.faces, 500, 0) for x in frames]
    ev = evaluate_sequence(frames, t, refs, 500)
    path = tmp_path / "chamfer.csv"
    ev.write_csv(path)
    rows = list(csv.DictReader(path.open()))
    assert [int(r["frame"]) for r in rows] == [1, 2, 3, 4]
    assert [float(r["chamfer"]) for r in rows] == ev.per_frame
    assert float(rows[0]["chamfer_x1e4"]) == pytest.approx(1e4 * ev.per_frame[0])
    assert ev.mean_scaled == pytest.approx(1e4 * ev.mean)


def test_unit_triangle_template_samples(unit_triangle):
    pts = sample_surface(unit_triangle.vertices, unit_triangle.faces, 100, 1)
    assert pts.shape == (100, 3)
    t = build_template(unit_triangle.vertices, unit_triangle.faces)
    assert t.n_vertices == 3
