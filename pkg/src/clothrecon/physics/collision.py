"""Vertex-level collision response against a ground plane and obstacle meshes.

All constraints that are active at the end of a step are resolved together by
one orthogonal projection onto ``{x : C x = c}``, computed from a QR
factorisation of ``C^T``. The same factor gives the gradient map
``I - Q Q^T`` used by the adjoint (with the active set frozen).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_triangular

from .params import CollisionObstacle, SimConfig

_ACTIVE_TOL = 1e-12
_MAX_ROUNDS = 16


@dataclass(frozen=True, eq=False)
class ConstraintSet:
    vertices: np.ndarray  # (m,)
    normals: np.ndarray  # (m, 3)
    offsets: np.ndarray  # (m,)  n . x = offset after projection
    velocity_targets: np.ndarray  # (m,)  n . v = target after projection
    keys: tuple = ()

    @property
    def size(self) -> int:
        return len(self.vertices)

    def factor(self):
        """``(dofs, C, Q, R)`` restricted to the dofs of the involved vertices."""
        verts = np.unique(self.vertices)
        slot = {v: i for i, v in enumerate(verts)}
        m = self.size
        c = np.zeros((m, 3 * len(verts)))
        for r, (v, n) in enumerate(zip(self.vertices, self.normals)):
            c[r, 3 * slot[v]:3 * slot[v] + 3] = n
        q, rr = np.linalg.qr(c.T)
        dofs = (3 * verts[:, None] + np.arange(3)).ravel()
        return dofs, c, q, rr


def empty_constraints() -> ConstraintSet:
    return ConstraintSet(np.zeros(0, dtype=np.int64), np.zeros((0, 3)), np.zeros(0), np.zeros(0), ())


def closest_points_on_triangles(p, a, b, c):
    """Closest point on triangle (a, b, c) to p, row-wise; returns (point, barycentrics)."""
    ab, ac, ap = b - a, c - a, p - a
    d1 = np.einsum("ij,ij->i", ab, ap)
    d2 = np.einsum("ij,ij->i", ac, ap)
    bp = p - b
    d3 = np.einsum("ij,ij->i", ab, bp)
    d4 = np.einsum("ij,ij->i", ac, bp)
    cp = p - c
    d5 = np.einsum("ij,ij->i", ab, cp)
    d6 = np.einsum("ij,ij->i", ac, cp)
    va = d3 * d6 - d5 * d4
    vb = d5 * d2 - d1 * d6
    vc = d1 * d4 - d3 * d2
    bary = np.zeros((len(p), 3))
    done = np.zeros(len(p), dtype=bool)

    def take(mask, w):
        nonlocal done
        mask = mask & ~done
        bary[mask] = w[mask]
        done |= mask

    one = np.ones(len(p))
    zero = np.zeros(len(p))
    with np.errstate(divide="ignore", invalid="ignore"):
        take((d1 <= 0) & (d2 <= 0), np.stack([one, zero, zero], 1))
        take((d3 >= 0) & (d4 <= d3), np.stack([zero, one, zero], 1))
        v = d1 / (d1 - d3)
        take((vc <= 0) & (d1 >= 0) & (d3 <= 0), np.stack([1 - v, v, zero], 1))
        take((d6 >= 0) & (d5 <= d6), np.stack([zero, zero, one], 1))
        w = d2 / (d2 - d6)
        take((vb <= 0) & (d2 >= 0) & (d6 <= 0), np.stack([1 - w, zero, w], 1))
        w = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        take((va <= 0) & ((d4 - d3) >= 0) & ((d5 - d6) >= 0), np.stack([zero, 1 - w, w], 1))
        denom = 1.0 / (va + vb + vc)
        v = vb * denom
        w = vc * denom
        take(np.ones(len(p), dtype=bool), np.stack([1 - v - w, v, w], 1))
    q = bary[:, :1] * a + bary[:, 1:2] * b + bary[:, 2:] * c
    return q, bary


def detect(x, config: SimConfig, obstacle: CollisionObstacle | None, t: int):
    """Constraint rows violated by positions ``x`` at (1-based) frame ``t``."""
    rows = []
    if config.ground_height is not None:
        off = config.ground_height + config.thickness
        for i in np.flatnonzero(x[:, 2] < off - _ACTIVE_TOL):
            rows.append((("g", int(i)), int(i), np.array([0.0, 0.0, 1.0]), off, 0.0))
    if obstacle is not None and len(obstacle.faces):
        pos, vel = obstacle.frame(t)
        fa = obstacle.faces
        a, b, c = pos[fa[:, 0]], pos[fa[:, 1]], pos[fa[:, 2]]
        nrm = np.cross(b - a, c - a)
        nrm /= np.linalg.norm(nrm, axis=1, keepdims=True)
        nv, nf = len(x), len(fa)
        pp = np.repeat(x, nf, axis=0)
        q, bary = closest_points_on_triangles(pp, np.tile(a, (nv, 1)), np.tile(b, (nv, 1)), np.tile(c, (nv, 1)))
        dist = np.linalg.norm(pp - q, axis=1).reshape(nv, nf)
        best = np.argmin(dist, axis=1)
        for i in range(nv):
            f = best[i]
            k = i * nf + f
            n = nrm[f]
            sd = n @ (x[i] - q[k])
            if sd < obstacle.thickness - _ACTIVE_TOL and dist[i, f] < obstacle.max_depth + obstacle.thickness:
                vq = bary[k] @ vel[fa[f]]
                rows.append((("o", int(i), int(f)), int(i), n, float(n @ a[f] + obstacle.thickness), float(n @ vq)))
    return rows


def _constraints(rows) -> ConstraintSet:
    if not rows:
        return empty_constraints()
    keys, verts, normals, offs, vts = zip(*rows)
    return ConstraintSet(np.array(verts, dtype=np.int64), np.array(normals), np.array(offs), np.array(vts),
                         tuple(keys))


def _independent(cs: ConstraintSet) -> ConstraintSet:
    """Drop rows whose normals are linearly dependent on earlier ones."""
    if cs.size == 0:
        return cs
    keep = []
    for r in range(cs.size):
        trial = keep + [r]
        sub = ConstraintSet(cs.vertices[trial], cs.normals[trial], cs.offsets[trial], cs.velocity_targets[trial])
        _, _, _, rr = sub.factor()
        if abs(rr[-1, -1]) > 1e-10:
            keep.append(r)
    if len(keep) == cs.size:
        return cs
    return ConstraintSet(cs.vertices[keep], cs.normals[keep], cs.offsets[keep], cs.velocity_targets[keep],
                         tuple(cs.keys[i] for i in keep))


def apply_projection(x, v, cs: ConstraintSet):
    """Project positions onto ``C x = offsets`` and velocities onto ``C v = targets``."""
    if cs.size == 0:
        return x.copy(), v.copy()
    dofs, c, q, rr = cs.factor()
    xf = x.reshape(-1).copy()
    vf = v.reshape(-1).copy()
    xs = xf[dofs]
    vs = vf[dofs]
    xf[dofs] = xs + q @ solve_triangular(rr, cs.offsets - c @ xs, trans="T")
    vf[dofs] = vs + q @ solve_triangular(rr, cs.velocity_targets - c @ vs, trans="T")
    return xf.reshape(x.shape), vf.reshape(v.shape)


def project_gradient(grad, cs: ConstraintSet) -> np.ndarray:
    """Transpose of the projection Jacobian, ``(I - Q Q^T) grad``, active set frozen."""
    if cs.size == 0:
        return grad.copy()
    dofs, _, q, _ = cs.factor()
    g = grad.reshape(-1).copy()
    gs = g[dofs]
    g[dofs] = gs - q @ (q.T @ gs)
    return g.reshape(grad.shape)


def collision_response(x, v, config: SimConfig, obstacle: CollisionObstacle | None = None, t: int = 1):
    """Resolve all contacts jointly; the active set grows until nothing is violated."""
    if config.ground_height is None and obstacle is None:
        return x.copy(), v.copy(), empty_constraints()
    active: dict = {}
    xc, vc = x, v
    cs = empty_constraints()
    for _ in range(_MAX_ROUNDS):
        new = [r for r in detect(xc, config, obstacle, t) if r[0] not in active]
        if not new:
            break
        for r in new:
            active[r[0]] = r
        cs = _independent(_constraints(list(active.values())))
        xc, vc = apply_projection(x, v, cs)
    return xc, vc, cs
