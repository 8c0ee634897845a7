"""Per-element energies written in JAX so that forces, Jacobians and the
higher derivatives used by the adjoint all come from one definition.

Stiffness varies piecewise linearly with the deformation measure ``s``.  For a
stiffness curve ``k(s)`` the element uses the potential
``psi(s) = int_0^s k(t) t dt``, which keeps forces continuous across samples
and reduces to ``k s^2 / 2`` for a constant curve.

Two second-order operators exist per element: the exact Hessian of the energy
and a definite one used by the implicit integrator.  For stretching the latter
is ``J^T Cbar J`` (``Cbar`` the secant stiffness) plus the geometric stiffness
of the tensile part of the stress; compressive stress is dropped.  For bending
it is the Gauss-Newton term ``k dq dq^T``.  Both are positive semi-definite for
any deformation and coincide with the exact Hessian at zero strain, so the
linear system stays positive definite when cloth buckles.
"""
from __future__ import annotations

from .._jax import jax, jnp
from .params import DIHEDRAL_OFFSETS, STRAIN_SAMPLES


def ramp_coefficients(knots, k):
    """Closed-form pieces of ``psi`` for stiffness samples ``k`` (..., K).

    On segment ``i`` (``knots[i] <= s < knots[i+1]``, the last one extending to
    infinity with constant stiffness) ``psi(s) = c0 + a s^2 / 2 + b s^3 / 3``.
    """
    knots = jnp.asarray(knots)
    dk = k[..., 1:] - k[..., :-1]
    ds = knots[1:] - knots[:-1]
    m = dk / ds
    a = jnp.concatenate([k[..., :-1] - m * knots[:-1], k[..., -1:]], axis=-1)
    b = jnp.concatenate([m, jnp.zeros_like(k[..., -1:])], axis=-1)
    inc = a[..., :-1] * (knots[1:] ** 2 - knots[:-1] ** 2) / 2 + b[..., :-1] * (knots[1:] ** 3 - knots[:-1] ** 3) / 3
    cum = jnp.concatenate([jnp.zeros_like(k[..., :1]), jnp.cumsum(inc, axis=-1)], axis=-1)
    c0 = cum - a * knots ** 2 / 2 - b * knots ** 3 / 3
    return a, b, c0


def _segment(knots, s):
    return jnp.clip(jnp.searchsorted(jnp.asarray(knots), s, side="right") - 1, 0, len(knots) - 1)


def _half_secant(coeffs, knots, mag, sq):
    """``psi(s) / s^2`` for magnitude ``mag`` with ``sq = mag^2`` (finite at 0)."""
    a, b, c0 = coeffs
    i = _segment(knots, mag)
    pos = sq > 0
    sq_safe = jnp.where(pos, sq, 1.0)
    # c0 vanishes on the first segment, so the ratio is regular at s = 0
    return c0[..., i] / sq_safe + a[..., i] / 2 + b[..., i] * mag / 3


def _safe_sqrt(q):
    pos = q > 0
    return jnp.where(pos, jnp.sqrt(jnp.where(pos, q, 1.0)), 0.0)


# -- stretching ----------------------------------------------------------------------

def green_strain(xf, dm_inv, warp):
    """(e11, e22, e12) of the Green strain, expressed along warp / weft."""
    ds = jnp.stack([xf[1] - xf[0], xf[2] - xf[0]], axis=1)
    f = ds @ dm_inv
    green = 0.5 * (f.T @ f - jnp.eye(2))
    c, s = warp[0], warp[1]
    rot = jnp.array([[c, -s], [s, c]])
    g = rot.T @ green @ rot
    return jnp.stack([g[0, 0], g[1, 1], g[0, 1]])


def secant_stiffness(strain, coeffs):
    """3x3 matrix ``Cbar`` with ``W = strain^T Cbar strain / 2``."""
    e11, e22, e12 = strain[0], strain[1], strain[2]
    sq = e11 ** 2 + e22 ** 2 + 2.0 * e12 ** 2
    g = _half_secant(coeffs, STRAIN_SAMPLES, _safe_sqrt(sq), sq)  # rows C11, C12, C22, C33
    z = jnp.zeros_like(g[0])
    return 2.0 * jnp.array([[g[0], g[1], z], [g[1], g[2], z], [z, z, 4.0 * g[3]]])


def _strain_energy(strain, coeffs):
    return 0.5 * strain @ secant_stiffness(strain, coeffs) @ strain


def psd_part(m):
    """Positive semi-definite part of a symmetric 2x2 matrix (eigenvalues clamped at 0)."""
    a, b, c = m[0, 0], m[0, 1], m[1, 1]
    mid = 0.5 * (a + c)
    r = _safe_sqrt((0.5 * (a - c)) ** 2 + b * b)
    hi, lo = mid + r, mid - r
    r_safe = jnp.where(r > 0, r, 1.0)
    one_side = hi * (m - lo * jnp.eye(2)) / (2.0 * r_safe)
    return jnp.where(lo >= 0, m, jnp.where(hi <= 0, jnp.zeros_like(m), one_side))


_CORNER = jnp.array([[-1.0, -1.0], [1.0, 0.0], [0.0, 1.0]])


def tensile_geometric(xf, dm_inv, warp, coeffs):
    """3x3 corner coupling ``K`` whose Kronecker product with I3 is the tensile geometric stiffness."""
    e = green_strain(xf, dm_inv, warp)
    sig = jax.grad(_strain_energy)(e, coeffs)
    s_w = jnp.array([[sig[0], 0.5 * sig[2]], [0.5 * sig[2], sig[1]]])
    c, s = warp[0], warp[1]
    rot = jnp.array([[c, -s], [s, c]])
    s_loc = psd_part(rot @ s_w @ rot.T)
    t = dm_inv @ s_loc @ dm_inv.T
    return _CORNER @ t @ _CORNER.T


def stretch_energy(xf, dm_inv, warp, area, coeffs):
    """Membrane energy of one face.

    ``xf`` (3, 3) current corners, ``dm_inv`` inverse rest-edge matrix,
    ``warp`` (cos, sin) of the warp axis in the local frame, ``coeffs`` the
    (a, b, c0) tables from :func:`ramp_coefficients` for the 4 x 6 samples.
    """
    return area * _strain_energy(green_strain(xf, dm_inv, warp), coeffs)


def stretch_gn_form(xf, lam, u, dm_inv, warp, area, coeffs):
    """``lam^T H_gn u`` for the face, differentiable in every argument."""
    e, de_l = jax.jvp(lambda y: green_strain(y, dm_inv, warp), (xf,), (lam,))
    de_u = jax.jvp(lambda y: green_strain(y, dm_inv, warp), (xf,), (u,))[1]
    geo = jnp.sum(lam * (tensile_geometric(xf, dm_inv, warp, coeffs) @ u))
    return area * (de_l @ secant_stiffness(e, coeffs) @ de_u + geo)


def stretch_gn_hess(xf, dm_inv, warp, area, coeffs):
    e = green_strain(xf, dm_inv, warp)
    j = jax.jacfwd(lambda y: green_strain(y, dm_inv, warp))(xf).reshape(3, 9)
    geo = jnp.kron(tensile_geometric(xf, dm_inv, warp, coeffs), jnp.eye(3))
    return area * (j.T @ secant_stiffness(e, coeffs) @ j + geo)


# -- bending -------------------------------------------------------------------------

def dihedral_offset(x4):
    """Signed deviation of the hinge angle from flat (dihedral minus pi)."""
    x0, x1, x2, x3 = x4[0], x4[1], x4[2], x4[3]
    e = x1 - x0
    n1 = jnp.cross(e, x2 - x0)
    n2 = jnp.cross(x3 - x0, e)
    sin = jnp.dot(jnp.cross(n1, n2), e) / jnp.linalg.norm(e)
    cos = jnp.dot(n1, n2)
    return -jnp.arctan2(sin, cos)


def _bend_secant(q, weights, bend_table):
    """``2 psi(q) / q^2`` for the hinge's blended stiffness curve."""
    k5 = weights @ bend_table
    side = jnp.where(q >= 0, k5[2:], k5[2::-1])
    coeffs = ramp_coefficients(DIHEDRAL_OFFSETS, side)
    aq = jnp.abs(q)
    return 2.0 * _half_secant(coeffs, DIHEDRAL_OFFSETS, aq, q * q)


def bend_energy(x4, coef, weights, bend_table):
    """Hinge energy for the stencil (edge v0-v1, opposite v2 and v3)."""
    q = dihedral_offset(x4)
    return 0.5 * coef * _bend_secant(q, weights, bend_table) * q * q


def bend_gn_form(x4, lam, u, coef, weights, bend_table):
    q, dq_l = jax.jvp(dihedral_offset, (x4,), (lam,))
    dq_u = jax.jvp(dihedral_offset, (x4,), (u,))[1]
    return coef * _bend_secant(q, weights, bend_table) * dq_l * dq_u


def bend_gn_hess(x4, coef, weights, bend_table):
    q = dihedral_offset(x4)
    g = jax.grad(dihedral_offset)(x4).reshape(12)
    return coef * _bend_secant(q, weights, bend_table) * jnp.outer(g, g)


# -- wind ----------------------------------------------------------------------------

def face_geometry(xf):
    cr = jnp.cross(xf[1] - xf[0], xf[2] - xf[0])
    norm = jnp.linalg.norm(cr)
    return 0.5 * norm, cr / norm


def wind_force(xf, vf, wind, rho):
    """Linear drag on one face, split equally over its corners."""
    area, n = face_geometry(xf)
    rel = wind - jnp.mean(vf, axis=0)
    f = rho * area * jnp.dot(rel, n) * n
    return jnp.broadcast_to(f / 3.0, (3, 3))


stretch_grad = jax.grad(stretch_energy)
stretch_hess = jax.hessian(stretch_energy)
bend_grad = jax.grad(bend_energy)
bend_hess = jax.hessian(bend_energy)
