"""Chamfer distance, rigid alignment and per-sequence evaluation."""
from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .errors import DegenerateConfiguration, EmptyCloud
from .geometry import SurfaceState, TemplateMesh


@dataclass(frozen=True, eq=False)
class PointCloud:
    points: np.ndarray  # (n, 3)
    valid: np.ndarray | None = None

    def __post_init__(self):
        p = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        if not np.all(np.isfinite(p)):
            raise ValueError("point cloud contains non-finite points")
        if self.valid is not None:
            v = np.asarray(self.valid, dtype=bool)
            if v.shape != (len(p),):
                raise ValueError("validity mask must have one entry per point")
            p = p[v]
        object.__setattr__(self, "points", p)
        object.__setattr__(self, "valid", None)

    def __len__(self):
        return len(self.points)


def _pts(c) -> np.ndarray:
    return c.points if isinstance(c, PointCloud) else np.asarray(c, dtype=np.float64).reshape(-1, 3)


@dataclass(frozen=True)
class RigidTransform:
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    scale: float = 1.0

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=np.float64)
        if np.abs(r.T @ r - np.eye(3)).max() > 1e-9:
            raise ValueError("rotation is not orthonormal")
        if not self.scale > 0:
            raise ValueError("scale must be positive")
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=np.float64))

    def apply(self, points) -> np.ndarray:
        return self.scale * _pts(points) @ self.rotation.T + self.translation

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """``self`` after ``other``."""
        return RigidTransform(self.rotation @ other.rotation,
                              self.scale * self.rotation @ other.translation + self.translation,
                              self.scale * other.scale)


def nearest_sq_dists(src, dst) -> np.ndarray:
    """Squared distance from every point of ``src`` to its nearest neighbour in ``dst``."""
    a, b = _pts(src), _pts(dst)
    _, idx = cKDTree(b).query(a, k=1)
    # recompute from coordinates so the result does not depend on the tree's arithmetic
    d = a - b[idx]
    return np.sum(d * d, axis=1)


def chamfer(g, m) -> float:
    """Symmetric mean of squared nearest-neighbour distances."""
    a, b = _pts(g), _pts(m)
    if len(a) == 0 or len(b) == 0:
        raise EmptyCloud("chamfer needs two non-empty clouds")
    return float(np.mean(nearest_sq_dists(a, b)) + np.mean(nearest_sq_dists(b, a)))


def procrustes_align(src, dst, with_scale: bool = True) -> RigidTransform:
    """Least-squares similarity ``dst ~ s R src + t`` (Umeyama), with det R = +1."""
    a, b = _pts(src), _pts(dst)
    if len(a) != len(b):
        raise ValueError("correspondence sets differ in size")
    if len(a) < 3:
        raise DegenerateConfiguration("need at least 3 correspondences")
    ma, mb = a.mean(0), b.mean(0)
    ac, bc = a - ma, b - mb
    if np.linalg.matrix_rank(ac, tol=1e-12 * max(1.0, np.abs(ac).max())) < 2:
        raise DegenerateConfiguration("correspondences are collinear")
    cov = bc.T @ ac / len(a)
    u, s, vt = np.linalg.svd(cov)
    d = np.ones(3)
    if np.linalg.det(u) * np.linalg.det(vt) < 0:
        d[2] = -1.0
    r = u @ np.diag(d) @ vt
    var_a = np.sum(ac * ac) / len(a)
    scale = float(np.sum(s * d) / var_a) if with_scale else 1.0
    t = mb - scale * r @ ma
    return RigidTransform(r, t, scale)


def icp_refine(src, dst, init: RigidTransform | None = None, max_iter: int = 50, tol: float = 1e-7):
    """Point-to-point ICP with fixed scale; returns the transform mapping ``src`` onto ``dst``."""
    a, b = _pts(src), _pts(dst)
    if len(a) == 0 or len(b) == 0:
        raise EmptyCloud("icp needs two non-empty clouds")
    tf = init or RigidTransform()
    tree = cKDTree(b)
    prev = None
    for _ in range(max_iter):
        moved = tf.apply(a)
        dist, idx = tree.query(moved, k=1)
        rms = float(np.sqrt(np.mean(dist ** 2)))
        if prev is not None and abs(prev - rms) < tol:
            break
        prev = rms
        step = procrustes_align(moved, b[idx], with_scale=False)
        tf = step.compose(tf)
    return tf


def sample_surface(positions, faces, n: int, rng=None) -> np.ndarray:
    """Uniform area-weighted samples on a triangle mesh."""
    rng = np.random.default_rng(rng)
    x = np.asarray(positions, dtype=np.float64)
    f = np.asarray(faces)
    a, b, c = x[f[:, 0]], x[f[:, 1]], x[f[:, 2]]
    area = 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)
    if area.sum() <= 0:
        raise DegenerateConfiguration("mesh has zero area")
    which = rng.choice(len(f), size=n, p=area / area.sum())
    r1 = np.sqrt(rng.random(n))
    r2 = rng.random(n)
    w0, w1, w2 = 1 - r1, r1 * (1 - r2), r1 * r2
    return w0[:, None] * a[which] + w1[:, None] * b[which] + w2[:, None] * c[which]


@dataclass
class SequenceEvaluation:
    per_frame: list  # Chamfer per frame, native units (m^2)
    transforms: list

    @property
    def mean(self) -> float:
        return float(np.mean(self.per_frame))

    @property
    def mean_scaled(self) -> float:
        """Mean Chamfer times 1e4."""
        return 1e4 * self.mean

    def write_csv(self, path):
        tmp = f"{path}.tmp"
        with open(tmp, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["frame", "chamfer", "chamfer_x1e4", "scale", "tx", "ty", "tz",
                        "r00", "r01", "r02", "r10", "r11", "r12", "r20", "r21", "r22"])
            for i, (c, tf) in enumerate(zip(self.per_frame, self.transforms), start=1):
                w.writerow([i, repr(c), repr(1e4 * c), repr(tf.scale), *map(repr, tf.translation),
                            *map(repr, tf.rotation.ravel())])
        os.replace(tmp, path)


def evaluate_sequence(states, template: TemplateMesh, references, samples_per_mesh: int = 10_000,
                      seed: int = 0, align: bool = True) -> SequenceEvaluation:
    """Per-frame Chamfer between reconstructed meshes and reference clouds.

    Frame 1 is initialised by rigid Procrustes between template vertices and
    their nearest reference points, then refined by ICP; later frames start
    ICP from the previous frame's transform. Scale stays at 1 throughout:
    nearest-point matches pull boundary vertices inwards, so a fitted scale
    would shrink the mesh.
    """
    if len(states) != len(references):
        raise ValueError(f"{len(states)} reconstructed frames but {len(references)} references")
    rng = np.random.default_rng(seed)
    per_frame, tfs = [], []
    tf = RigidTransform()
    for k, (s, ref) in enumerate(zip(states, references)):
        x = s.positions if isinstance(s, SurfaceState) else np.asarray(s, dtype=np.float64)
        g = _pts(ref)
        pts = sample_surface(x, template.faces, samples_per_mesh, rng)
        if align:
            if k == 0:
                _, idx = cKDTree(g).query(x, k=1)
                tf = procrustes_align(x, g[idx], with_scale=False)
            tf = icp_refine(pts, g, tf)
            pts = tf.apply(pts)
        per_frame.append(chamfer(g, pts))
        tfs.append(tf)
    return SequenceEvaluation(per_frame, tfs)
