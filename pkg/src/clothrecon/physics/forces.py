"""Force and Jacobian assembly for the cloth model."""
from __future__ import annotations

import weakref
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .._jax import jax, jnp
from ..errors import NonPositiveDensity, ShapeMismatch
from ..geometry import SurfaceState, TemplateMesh
from . import elements as el
from .params import ORIENTATION_BINS, STRAIN_SAMPLES, PhysicsParams, SimConfig


@dataclass
class ForceAssembly:
    """Forces (N, 3) with optional sparse Jacobians over the flattened 3N dofs."""

    force: np.ndarray
    dfdx: sp.csr_matrix | None = None
    dfdv: sp.csr_matrix | None = None
    mass: np.ndarray | None = None


def _orientation_weights(alpha):
    w = np.zeros((len(alpha), 3))
    t = np.clip(alpha, 0.0, np.pi / 2) / (np.pi / 4)
    lo = t <= 1.0
    w[lo, 0] = 1.0 - t[lo]
    w[lo, 1] = t[lo]
    w[~lo, 1] = 2.0 - t[~lo]
    w[~lo, 2] = t[~lo] - 1.0
    return w


class ClothModel:
    """Rest-state data of a template arranged for vectorised evaluation.

    Built once per template (see :func:`model_for`) and reused by the forward
    step and the adjoint.
    """

    def __init__(self, template: TemplateMesh):
        self.template = template
        n = template.n_vertices
        self.n_vertices = n
        self.n_dof = 3 * n
        faces = template.faces
        self.faces = faces
        self.vertex_area = np.bincount(faces.ravel(), np.repeat(template.rest_areas / 3.0, 3), minlength=n)

        # bending stencils: edge (v0, v1), opposite corners v2 in face 0 and v3 in face 1
        idx = template.interior_edges
        stencils = np.zeros((len(idx), 4), dtype=np.int64)
        coef = np.zeros(len(idx))
        alpha = np.zeros(len(idx))
        x = template.vertices
        for k, e in enumerate(idx):
            a, b = template.edges[e]
            f0, f1 = template.edge_faces[e]
            o0 = [v for v in faces[f0] if v != a and v != b][0]
            o1 = [v for v in faces[f1] if v != a and v != b][0]
            stencils[k] = (a, b, o0, o1)
            ed = x[b] - x[a]
            coef[k] = 3.0 * (ed @ ed) / (template.rest_areas[f0] + template.rest_areas[f1])
            axes = template.frame_axes[f0]
            warp3 = template.warp[f0, 0] * axes[0] + template.warp[f0, 1] * axes[1]
            alpha[k] = np.arccos(min(1.0, abs(ed @ warp3) / np.linalg.norm(ed)))
        self.stencils = stencils
        self.bend_coef = coef
        self.bend_weights = _orientation_weights(alpha)
        self.edge_alpha = alpha

        self._j = dict(
            faces=jnp.asarray(faces), dm_inv=jnp.asarray(template.material_frames),
            warp=jnp.asarray(template.warp), area=jnp.asarray(template.rest_areas),
            stencils=jnp.asarray(stencils), coef=jnp.asarray(coef),
            weights=jnp.asarray(self.bend_weights), vertex_area=jnp.asarray(self.vertex_area),
        )
        self._build_pattern()

    def _build_pattern(self):
        n = self.n_dof
        fd = (3 * self.faces[:, :, None] + np.arange(3)).reshape(-1, 9)
        ed = (3 * self.stencils[:, :, None] + np.arange(3)).reshape(-1, 12)
        rows = [np.repeat(fd, 9, axis=1).ravel(), np.repeat(ed, 12, axis=1).ravel(), np.arange(n)]
        cols = [np.tile(fd, (1, 9)).ravel(), np.tile(ed, (1, 12)).ravel(), np.arange(n)]
        keys = np.concatenate(rows) * n + np.concatenate(cols)
        uniq, inverse = np.unique(keys, return_inverse=True)
        inverse = inverse.reshape(-1)
        nf, ne = fd.shape[0] * 81, ed.shape[0] * 144
        self._inv_face = inverse[:nf]
        self._inv_edge = inverse[nf:nf + ne]
        self._inv_diag = inverse[nf + ne:]
        self._indices = (uniq % n).astype(np.int32)
        self._indptr = np.concatenate([[0], np.cumsum(np.bincount(uniq // n, minlength=n))]).astype(np.int32)
        self._nnz = len(uniq)

    def sparse(self, face_blocks=None, edge_blocks=None, diag=None) -> sp.csr_matrix:
        """CSR matrix from 9x9 face blocks, 12x12 hinge blocks and a diagonal."""
        data = np.zeros(self._nnz)
        if face_blocks is not None:
            data += np.bincount(self._inv_face, np.asarray(face_blocks).ravel(), minlength=self._nnz)
        if edge_blocks is not None and len(self._inv_edge):
            data += np.bincount(self._inv_edge, np.asarray(edge_blocks).ravel(), minlength=self._nnz)
        if diag is not None:
            data += np.bincount(self._inv_diag, np.asarray(diag).ravel(), minlength=self._nnz)
        return sp.csr_matrix((data, self._indices, self._indptr), shape=(self.n_dof, self.n_dof))

    def scatter(self, element_vals, index) -> np.ndarray:
        """Sum per-element, per-corner vectors (E, k, 3) into vertices."""
        out = np.zeros((self.n_vertices, 3))
        vals = np.asarray(element_vals).reshape(-1, 3)
        idx = np.asarray(index).ravel()
        for c in range(3):
            out[:, c] = np.bincount(idx, vals[:, c], minlength=self.n_vertices)
        return out

    # -- evaluation -----------------------------------------------------------------
    def stretching(self, x, stretch, gauss_newton=False):
        """Energy, forces and per-face 9x9 energy Hessians (exact or Gauss-Newton)."""
        fn = _stretch_eval_gn if gauss_newton else _stretch_eval
        e, g, h = fn(jnp.asarray(x), jnp.asarray(stretch), self._j["faces"], self._j["dm_inv"],
                     self._j["warp"], self._j["area"])
        return float(e), self.scatter(-np.asarray(g), self.faces), np.asarray(h)

    def bending(self, x, bend, gauss_newton=False):
        if len(self.stencils) == 0:
            return 0.0, np.zeros((self.n_vertices, 3)), np.zeros((0, 12, 12))
        fn = _bend_eval_gn if gauss_newton else _bend_eval
        e, g, h = fn(jnp.asarray(x), jnp.asarray(bend), self._j["stencils"], self._j["coef"], self._j["weights"])
        return float(e), self.scatter(-np.asarray(g), self.stencils), np.asarray(h)

    def wind(self, x, v, wind, rho):
        f, c, nrm = _wind_eval(jnp.asarray(x), jnp.asarray(v), jnp.asarray(wind), rho, self._j["faces"])
        c = np.asarray(c)
        nrm = np.asarray(nrm)
        nn = c[:, None, None] * nrm[:, :, None] * nrm[:, None, :]
        blocks = -np.tile(nn, (1, 3, 3))
        return self.scatter(np.asarray(f), self.faces), blocks

    def internal_energy(self, x, stretch, bend) -> float:
        return self.stretching(x, stretch)[0] + self.bending(x, bend)[0]

    def masses(self, density) -> np.ndarray:
        if not density > 0:
            raise NonPositiveDensity(f"density must be positive, got {density}")
        return density * self.vertex_area

    def adjoint_terms(self, x, v, params: PhysicsParams, lam, dv, h, gravity):
        """Gradients of ``lam . (b - A dv)`` w.r.t. (x, v, d, S, B, w) with lam, dv held fixed."""
        j = self._j
        out = _phi_grad(jnp.asarray(x), jnp.asarray(v), params.density, jnp.asarray(params.stretch),
                        jnp.asarray(params.bend), jnp.asarray(params.wind), jnp.asarray(lam), jnp.asarray(dv),
                        float(h), jnp.asarray(gravity, dtype=jnp.float64), float(params.air_density),
                        j["vertex_area"], j["faces"], j["dm_inv"], j["warp"], j["area"], j["stencils"], j["coef"],
                        j["weights"])
        return tuple(np.asarray(o) for o in out)


_vmap_se = jax.vmap(el.stretch_energy, (0, 0, 0, 0, None))
_vmap_sg = jax.vmap(el.stretch_grad, (0, 0, 0, 0, None))
_vmap_sh = jax.vmap(el.stretch_hess, (0, 0, 0, 0, None))
_vmap_sgn = jax.vmap(el.stretch_gn_hess, (0, 0, 0, 0, None))
_vmap_sform = jax.vmap(el.stretch_gn_form, (0, 0, 0, 0, 0, 0, None))
_vmap_be = jax.vmap(el.bend_energy, (0, 0, 0, None))
_vmap_bg = jax.vmap(el.bend_grad, (0, 0, 0, None))
_vmap_bh = jax.vmap(el.bend_hess, (0, 0, 0, None))
_vmap_bgn = jax.vmap(el.bend_gn_hess, (0, 0, 0, None))
_vmap_bform = jax.vmap(el.bend_gn_form, (0, 0, 0, 0, 0, None))
_vmap_wind = jax.vmap(el.wind_force, (0, 0, None, None))
_vmap_geom = jax.vmap(el.face_geometry)


def _coeffs(stretch):
    return el.ramp_coefficients(STRAIN_SAMPLES, stretch.reshape(4, 6))


def _make_stretch_eval(hess):
    @jax.jit
    def fn(x, stretch, faces, dm_inv, warp, area):
        c = _coeffs(stretch)
        xf = x[faces]
        e = jnp.sum(_vmap_se(xf, dm_inv, warp, area, c))
        g = _vmap_sg(xf, dm_inv, warp, area, c)
        h = hess(xf, dm_inv, warp, area, c).reshape(-1, 9, 9)
        return e, g, h
    return fn


def _make_bend_eval(hess):
    @jax.jit
    def fn(x, bend, stencils, coef, weights):
        table = bend.reshape(3, 5)
        x4 = x[stencils]
        e = jnp.sum(_vmap_be(x4, coef, weights, table))
        g = _vmap_bg(x4, coef, weights, table)
        h = hess(x4, coef, weights, table).reshape(-1, 12, 12)
        return e, g, h
    return fn


_stretch_eval = _make_stretch_eval(_vmap_sh)
_stretch_eval_gn = _make_stretch_eval(_vmap_sgn)
_bend_eval = _make_bend_eval(_vmap_bh)
_bend_eval_gn = _make_bend_eval(_vmap_bgn)


@jax.jit
def _wind_eval(x, v, wind, rho, faces):
    f = _vmap_wind(x[faces], v[faces], wind, rho)
    area, nrm = _vmap_geom(x[faces])
    return f, rho * area / 9.0, nrm


def _phi(x, v, density, stretch, bend, wind, lam, dv, h, gravity, rho,
         vertex_area, faces, dm_inv, warp, area, stencils, coef, weights):
    c = _coeffs(stretch)
    u = v + dv
    xf, lf, uf = x[faces], lam[faces], u[faces]
    total = -h * jnp.sum(lf * _vmap_sg(xf, dm_inv, warp, area, c))
    total = total - h * h * jnp.sum(_vmap_sform(xf, lf, uf, dm_inv, warp, area, c))
    if stencils.shape[0]:
        table = bend.reshape(3, 5)
        x4, l4, u4 = x[stencils], lam[stencils], u[stencils]
        total = total - h * jnp.sum(l4 * _vmap_bg(x4, coef, weights, table))
        total = total - h * h * jnp.sum(_vmap_bform(x4, l4, u4, coef, weights, table))
    total = total + h * jnp.sum(lf * _vmap_wind(xf, v[faces], wind, rho))
    m = density * vertex_area
    total = total + h * jnp.sum(m[:, None] * lam * gravity) - jnp.sum(m[:, None] * lam * dv)
    fa, nrm = _vmap_geom(xf)
    lam_f = jnp.sum(lf, axis=1)
    dv_f = jnp.sum(dv[faces], axis=1)
    total = total - h * jnp.sum(rho * fa / 9.0 * jnp.sum(nrm * lam_f, 1) * jnp.sum(nrm * dv_f, 1))
    return total


_phi_grad = jax.jit(jax.grad(_phi, argnums=(0, 1, 2, 3, 4, 5)))

_models: "weakref.WeakKeyDictionary[TemplateMesh, ClothModel]" = weakref.WeakKeyDictionary()


def model_for(template: TemplateMesh) -> ClothModel:
    m = _models.get(template)
    if m is None:
        m = ClothModel(template)
        _models[template] = m
    return m


def _positions(state):
    return state.positions if isinstance(state, SurfaceState) else np.asarray(state, dtype=np.float64)


def mass_matrix(template: TemplateMesh, density: float) -> np.ndarray:
    """Diagonal of the lumped mass matrix over the 3N dofs."""
    return np.repeat(model_for(template).masses(density), 3)


def stretching_forces(state, template: TemplateMesh, stretch) -> ForceAssembly:
    model = model_for(template)
    _, f, hess = model.stretching(_positions(state), np.asarray(stretch, dtype=np.float64).reshape(-1))
    return ForceAssembly(f, dfdx=model.sparse(face_blocks=-hess))


def bending_forces(state, template: TemplateMesh, bend) -> ForceAssembly:
    model = model_for(template)
    _, f, hess = model.bending(_positions(state), np.asarray(bend, dtype=np.float64).reshape(-1))
    return ForceAssembly(f, dfdx=model.sparse(edge_blocks=-hess))


def external_forces(state: SurfaceState, template: TemplateMesh, wind, air_density=1.0, gravity=(0, 0, 0),
                    corrective=None, density=None):
    """Wind drag and gravity as forces, correctives as a velocity increment.

    The drag's dependence on positions (through face normals and areas) is
    treated explicitly, so only ``dfdv`` is returned. Gravity needs ``density``.
    """
    model = model_for(template)
    n = template.n_vertices
    if corrective is None:
        corrective = np.zeros((n, 3))
    corrective = np.asarray(corrective, dtype=np.float64)
    if corrective.shape != (n, 3):
        raise ShapeMismatch(f"corrective must be ({n}, 3), got {corrective.shape}")
    f, blocks = model.wind(state.positions, state.velocities, np.asarray(wind, dtype=np.float64), float(air_density))
    g = np.asarray(gravity, dtype=np.float64)
    mass = None
    if density is not None:
        mass = model.masses(density)
        f = f + mass[:, None] * g
    elif np.any(g != 0):
        raise ValueError("gravity requires the material density")
    return ForceAssembly(f, dfdv=model.sparse(face_blocks=blocks),
                         mass=None if mass is None else np.repeat(mass, 3)), corrective.copy()


@dataclass
class SystemAssembly:
    force: np.ndarray  # (N, 3) total force at the start of the step
    matrix: sp.csr_matrix  # M - h df/dv + h^2 H, H the Gauss-Newton stiffness
    rhs: np.ndarray  # (3N,)
    mass: np.ndarray  # (3N,)


def assemble_system(model: ClothModel, x, v, params: PhysicsParams, config: SimConfig) -> SystemAssembly:
    h = config.h
    _, fs, hs = model.stretching(x, params.stretch, gauss_newton=True)
    _, fb, hb = model.bending(x, params.bend, gauss_newton=True)
    fw, dblocks = model.wind(x, v, params.wind, params.air_density)
    m = model.masses(params.density)
    f = fs + fb + fw + m[:, None] * np.asarray(config.gravity)
    mass = np.repeat(m, 3)
    # stiffness part alone gives K v for the right-hand side
    hess = model.sparse(face_blocks=hs, edge_blocks=hb)
    a = model.sparse(face_blocks=h * h * hs - h * dblocks, edge_blocks=h * h * hb, diag=mass)
    rhs = h * f.ravel() - h * h * (hess @ v.ravel())
    return SystemAssembly(f, a, rhs, mass)
