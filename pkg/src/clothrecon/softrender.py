"""Soft rasterisation of textured triangle meshes.

Every triangle contributes a coverage probability ``sigmoid(+-d^2 / sigma)`` to
each nearby pixel (``d`` the pixel-centre distance to the triangle boundary in
pixels, sign + inside).  Alpha aggregates coverages as ``1 - prod(1 - D)``;
colour is a softmax over inverse depth weighted by coverage, as in the soft
rasteriser of PyTorch3D.

Only pixel/triangle pairs inside the triangle's bounding box grown by the
falloff radius are evaluated.  The pair list is built in numpy from the current
geometry and the per-pair arithmetic runs in JAX so vertex gradients come from
``jax.vjp``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from ._jax import jax, jnp
from .errors import BehindCamera, ShapeMismatch
from .geometry import Camera, SurfaceState, TemplateMesh, TextureMap, bilinear_sample, project

# coverage below this is treated as exactly zero when selecting pairs
_ALPHA_CUTOFF = 1e-12


@dataclass(frozen=True)
class RenderConfig:
    """Soft-rasteriser constants.

    ``sigma`` is in pixels squared; ``None`` means ``1e-4 * min(H, W)^2``.
    ``gamma`` is relative to the depth range ``zfar - znear``.
    """

    sigma: float | None = None
    gamma: float = 1e-4
    background_color: tuple = (0.0, 0.0, 0.0)
    znear: float = 0.05
    zfar: float = 10.0
    # triangles below this coverage do not take part in colour blending
    color_cutoff: float = 1e-4

    def __post_init__(self):
        if self.sigma is not None and not self.sigma > 0:
            raise ValueError("sigma must be positive")
        if not self.gamma > 0:
            raise ValueError("gamma must be positive")
        if not 0 < self.znear < self.zfar:
            raise ValueError("need 0 < znear < zfar")

    def sigma_for(self, camera: Camera) -> float:
        if self.sigma is not None:
            return float(self.sigma)
        return 1e-4 * min(camera.width, camera.height) ** 2


@dataclass(frozen=True, eq=False)
class RenderOutput:
    color: np.ndarray  # (H, W, 3)
    alpha: np.ndarray  # (H, W)
    _backward: object = field(default=None, repr=False)

    def backward(self, grad_color=None, grad_alpha=None) -> np.ndarray:
        """Vertex-position gradient (N, 3) for upstream image gradients."""
        if self._backward is None:
            raise ValueError("this render carries no geometry to differentiate")
        h, w = self.alpha.shape
        gc = np.zeros((h, w, 3)) if grad_color is None else np.asarray(grad_color, dtype=np.float64)
        ga = np.zeros((h, w)) if grad_alpha is None else np.asarray(grad_alpha, dtype=np.float64)
        if gc.shape != (h, w, 3) or ga.shape != (h, w):
            raise ShapeMismatch("image gradients must match the render resolution")
        return self._backward(gc, ga)


# -- pair selection ------------------------------------------------------------------

def _bucket(k: int) -> int:
    """Round ``k`` up to a coarse size grid to limit recompilation."""
    if k <= 1024:
        return 1024
    e = int(np.ceil(np.log(k / 1024) / np.log(1.25)))
    return int(1024 * 1.25 ** e) + 1


def pixel_pairs(screen, faces, width, height, margin):
    """Pixel / face pairs whose pixel centre lies within ``margin`` px of the face's bounding box."""
    tri = screen[faces]
    lo = np.floor(tri.min(axis=1) - margin - 0.5).astype(np.int64) + 1
    hi = np.ceil(tri.max(axis=1) + margin - 0.5).astype(np.int64) - 1
    lo = np.maximum(lo, 0)
    hi[:, 0] = np.minimum(hi[:, 0], width - 1)
    hi[:, 1] = np.minimum(hi[:, 1], height - 1)
    nx = np.maximum(hi[:, 0] - lo[:, 0] + 1, 0)
    ny = np.maximum(hi[:, 1] - lo[:, 1] + 1, 0)
    counts = nx * ny
    total = int(counts.sum())
    face_idx = np.repeat(np.arange(len(faces)), counts)
    if total == 0:
        return np.zeros(0, dtype=np.int64), face_idx
    offs = np.arange(total) - np.repeat(np.cumsum(counts) - counts, counts)
    nxr = nx[face_idx]
    col = lo[face_idx, 0] + offs % nxr
    row = lo[face_idx, 1] + offs // nxr
    return row * width + col, face_idx


# -- per-pair arithmetic -------------------------------------------------------------

def _cross2(a, b):
    return a[..., 0] * b[..., 1] - a[..., 1] * b[..., 0]


def _segment_d2(p, a, b):
    ab = b - a
    t = jnp.clip(jnp.sum((p - a) * ab, -1) / jnp.maximum(jnp.sum(ab * ab, -1), 1e-30), 0.0, 1.0)
    q = a + t[..., None] * ab
    return jnp.sum((p - q) ** 2, -1)


def _bilinear(tex, uv):
    h, w = tex.shape[:2]
    px = uv[..., 0] * w - 0.5
    py = uv[..., 1] * h - 0.5
    x0 = jnp.floor(px)
    y0 = jnp.floor(py)
    fx = (px - x0)[..., None]
    fy = (py - y0)[..., None]
    x0i = x0.astype(jnp.int32)
    y0i = y0.astype(jnp.int32)
    xa = jnp.clip(x0i, 0, w - 1)
    xb = jnp.clip(x0i + 1, 0, w - 1)
    ya = jnp.clip(y0i, 0, h - 1)
    yb = jnp.clip(y0i + 1, 0, h - 1)
    top = tex[ya, xa] * (1 - fx) + tex[ya, xb] * fx
    bot = tex[yb, xa] * (1 - fx) + tex[yb, xb] * fx
    return top * (1 - fy) + bot * fy


def _screen(x, rot, trans, intr):
    pc = x @ rot.T + trans
    z = pc[:, 2]
    uv = jnp.stack([intr[0] * pc[:, 0] / z + intr[2], intr[1] * pc[:, 1] / z + intr[3]], axis=1)
    return uv, z


def _pair_terms(x, rot, trans, intr, faces, face_uv, pix, fidx, width, sigma):
    """Coverage logits, clipped perspective-correct barycentrics and depth per pair."""
    s, z = _screen(x, rot, trans, intr)
    f = faces[fidx]
    a, b, c = s[f[:, 0]], s[f[:, 1]], s[f[:, 2]]
    p = jnp.stack([(pix % width).astype(jnp.float64) + 0.5, (pix // width).astype(jnp.float64) + 0.5], axis=1)
    area = _cross2(b - a, c - a)
    ok = jnp.abs(area) > 1e-12
    area_s = jnp.where(ok, area, 1.0)
    bary = jnp.stack([_cross2(b - p, c - p), _cross2(c - p, a - p), _cross2(a - p, b - p)], axis=1) / area_s[:, None]
    inside = ok & jnp.all(bary >= 0, axis=1)
    d2 = jnp.minimum(jnp.minimum(_segment_d2(p, a, b), _segment_d2(p, b, c)), _segment_d2(p, c, a))
    logit = jnp.where(inside, 1.0, -1.0) * d2 / sigma
    zf = z[f]
    bc = jnp.clip(bary, 0.0, None)
    bc = bc / jnp.maximum(jnp.sum(bc, axis=1, keepdims=True), 1e-5)
    bz = bc / zf
    norm = jnp.sum(bz, axis=1, keepdims=True)
    uv = jnp.einsum("ki,kij->kj", bz / norm, face_uv[fidx])
    # depth for compositing comes from the triangle's plane, extrapolated outside
    # it, so neighbours on one smooth surface agree and do not bleed into each other
    inv = jnp.sum(bary / zf, axis=1)
    depth = jnp.where(ok & (inv > 1e-8), 1.0 / jnp.where(inv > 1e-8, inv, 1.0), 1.0 / norm[:, 0])
    return logit, uv, depth


def _render_core(x, rot, trans, intr, faces, face_uv, tex, pix, fidx, valid, bg, consts, n_pix, width):
    sigma, gamma, znear, zfar, cutoff = consts[0], consts[1], consts[2], consts[3], consts[4]
    logit, uv, depth = _pair_terms(x, rot, trans, intr, faces, face_uv, pix, fidx, width, sigma)
    log_miss = jnp.where(valid, -jax.nn.softplus(logit), 0.0)
    alpha = 1.0 - jnp.exp(jax.ops.segment_sum(log_miss, pix, n_pix))

    cov = jax.nn.sigmoid(logit)
    cand = valid & (cov > cutoff)
    zinv = (zfar - depth) / (zfar - znear)
    eps = 1e-10
    zmax = jax.ops.segment_max(jnp.where(cand, zinv, -jnp.inf), pix, n_pix)
    zmax = jax.lax.stop_gradient(jnp.maximum(zmax, eps))
    # weights start from zero at the cutoff so triangles enter the blend continuously
    w = jnp.where(cand, (cov - cutoff) * jnp.exp(jnp.where(cand, zinv - zmax[pix], 0.0) / gamma), 0.0)
    col = _bilinear(tex, uv)
    delta = jnp.maximum(jnp.exp((eps - zmax) / gamma), eps)
    num = jax.ops.segment_sum(w[:, None] * col, pix, n_pix) + delta[:, None] * bg
    den = jax.ops.segment_sum(w, pix, n_pix) + delta
    return num / den[:, None], alpha


_render_fwd = jax.jit(_render_core, static_argnames=("n_pix", "width"))


def _render_bwd_core(x, rot, trans, intr, faces, face_uv, tex, pix, fidx, valid, bg, consts, gc, ga, n_pix, width):
    def f(xx):
        return _render_core(xx, rot, trans, intr, faces, face_uv, tex, pix, fidx, valid, bg, consts, n_pix, width)

    _, vjp = jax.vjp(f, x)
    return vjp((gc, ga))[0]


_render_bwd = jax.jit(_render_bwd_core, static_argnames=("n_pix", "width"))


def _positions(state) -> np.ndarray:
    return state.positions if isinstance(state, SurfaceState) else np.asarray(state, dtype=np.float64)


def _texture_image(texture) -> np.ndarray:
    if isinstance(texture, TextureMap):
        return texture.image
    img = np.asarray(texture, dtype=np.float64)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ShapeMismatch(f"texture must be (H, W, 3), got {img.shape}")
    return img


def rasterize(state, template: TemplateMesh, texture, camera: Camera, config: RenderConfig | None = None,
              faces=None) -> RenderOutput:
    """Soft-rasterise the textured surface; ``faces`` overrides the template's triangles."""
    config = config or RenderConfig()
    x = _positions(state)
    faces = template.faces if faces is None else np.asarray(faces, dtype=np.int64).reshape(-1, 3)
    h, w = camera.height, camera.width
    bg = np.asarray(config.background_color, dtype=np.float64)
    if len(faces) == 0:
        return RenderOutput(np.broadcast_to(bg, (h, w, 3)).copy(), np.zeros((h, w)),
                            lambda gc, ga: np.zeros_like(x))
    screen, _ = project(x, camera)
    sigma = config.sigma_for(camera)
    margin = np.sqrt(sigma * np.log(1.0 / _ALPHA_CUTOFF))
    pix, fidx = pixel_pairs(screen, faces, w, h, margin)
    k = len(pix)
    kb = _bucket(k)
    valid = np.zeros(kb, dtype=bool)
    valid[:k] = True
    pix = np.concatenate([pix, np.full(kb - k, h * w)])  # padding lands in a spare pixel slot
    fidx = np.concatenate([fidx, np.zeros(kb - k, dtype=np.int64)])

    tex = _texture_image(texture)
    face_uv = template.uvs[faces]
    intr = np.array([camera.fx, camera.fy, camera.cx, camera.cy])
    consts = np.array([sigma, config.gamma, config.znear, config.zfar, config.color_cutoff])
    args = (jnp.asarray(camera.rotation), jnp.asarray(camera.translation), jnp.asarray(intr), jnp.asarray(faces),
            jnp.asarray(face_uv), jnp.asarray(tex), jnp.asarray(pix), jnp.asarray(fidx), jnp.asarray(valid),
            jnp.asarray(bg), jnp.asarray(consts))
    n_pix = h * w + 1
    color, alpha = _render_fwd(jnp.asarray(x), *args, n_pix=n_pix, width=w)
    color = np.asarray(color)[:-1].reshape(h, w, 3)
    alpha = np.clip(np.asarray(alpha)[:-1].reshape(h, w), 0.0, 1.0)

    def backward(gc, ga):
        gc_full = np.concatenate([gc.reshape(-1, 3), np.zeros((1, 3))])
        ga_full = np.concatenate([ga.reshape(-1), np.zeros(1)])
        g = _render_bwd(jnp.asarray(x), *args, jnp.asarray(gc_full), jnp.asarray(ga_full), n_pix=n_pix, width=w)
        return np.asarray(g)

    return RenderOutput(color, alpha, backward)


# -- filtering -----------------------------------------------------------------------

def gaussian_kernel(sigma: float) -> np.ndarray:
    r = int(np.ceil(3 * sigma))
    t = np.arange(-r, r + 1, dtype=np.float64)
    k = np.exp(-0.5 * (t / sigma) ** 2)
    return k / k.sum()


def blur_matrix(n: int, sigma: float) -> np.ndarray:
    """Dense (n, n) matrix applying the truncated Gaussian with half-sample symmetric padding."""
    k = gaussian_kernel(sigma)
    r = len(k) // 2
    m = np.zeros((n, n))
    for off, wgt in zip(range(-r, r + 1), k):
        idx = np.arange(n) + off
        # reflect about the outer pixel edges: -1 -> 0, n -> n-1, repeating for wide kernels
        period = 2 * n
        idx = np.mod(idx, period)
        idx = np.where(idx >= n, period - 1 - idx, idx)
        np.add.at(m, (np.arange(n), idx), wgt)
    return m


def gaussian_filter(mask, sigma: float) -> np.ndarray:
    """Separable Gaussian blur, radius ceil(3 sigma), reflect padding."""
    if not sigma > 0:
        raise ValueError("sigma must be positive")
    mask = np.asarray(mask, dtype=np.float64)
    h, w = mask.shape[:2]
    return blur_matrix(h, sigma) @ mask @ blur_matrix(w, sigma).T


# -- hard rasterisation --------------------------------------------------------------

def _hard_raster(points2d, depth, faces, width, height):
    """Nearest covering face per pixel: returns (face index or -1, barycentrics, depth)."""
    n_pix = width * height
    face_of = np.full(n_pix, -1, dtype=np.int64)
    zbuf = np.full(n_pix, np.inf)
    bary_out = np.zeros((n_pix, 3))
    if len(faces) == 0:
        return face_of, bary_out, zbuf
    pix, fidx = pixel_pairs(points2d, faces, width, height, 0.0)
    if len(pix) == 0:
        return face_of, bary_out, zbuf
    f = faces[fidx]
    a, b, c = points2d[f[:, 0]], points2d[f[:, 1]], points2d[f[:, 2]]
    p = np.stack([pix % width + 0.5, pix // width + 0.5], axis=1)
    area = _np_cross2(b - a, c - a)
    ok = np.abs(area) > 1e-12
    area_s = np.where(ok, area, 1.0)
    bary = np.stack([_np_cross2(b - p, c - p), _np_cross2(c - p, a - p), _np_cross2(a - p, b - p)], 1) / area_s[:, None]
    inside = ok & np.all(bary >= -1e-12, axis=1)
    pix, fidx, bary = pix[inside], fidx[inside], bary[inside]
    if depth is None:
        z = np.zeros(len(pix))
        bp = bary
    else:
        bz = bary / depth[faces[fidx]]
        norm = bz.sum(axis=1)
        z = 1.0 / norm
        bp = bz / norm[:, None]
    # nearest wins; ties resolved towards the lower face index for determinism
    order = np.lexsort((fidx, z, pix))
    pix, fidx, bp, z = pix[order], fidx[order], bp[order], z[order]
    first = np.ones(len(pix), dtype=bool)
    first[1:] = pix[1:] != pix[:-1]
    face_of[pix[first]] = fidx[first]
    zbuf[pix[first]] = z[first]
    bary_out[pix[first]] = bp[first]
    return face_of, bary_out, zbuf


def _np_cross2(a, b):
    return a[:, 0] * b[:, 1] - a[:, 1] * b[:, 0]


def render_depth(state, template: TemplateMesh, camera: Camera, faces=None) -> np.ndarray:
    """Camera-space depth of the nearest covering triangle; ``inf`` where nothing is hit."""
    x = _positions(state)
    faces = template.faces if faces is None else np.asarray(faces, dtype=np.int64).reshape(-1, 3)
    h, w = camera.height, camera.width
    if len(faces) == 0:
        return np.full((h, w), np.inf)
    screen, z = project(x, camera)
    _, _, zbuf = _hard_raster(screen, z, faces, w, h)
    return zbuf.reshape(h, w)


def acquire_texture(image, template: TemplateMesh, camera: Camera, size=(256, 256), state=None,
                    occlusion_tol=1e-3) -> TextureMap:
    """Texture atlas from an image of the surface in its template configuration.

    Each texel centre is mapped through the UV layout to a point on the
    surface, projected into ``image`` and sampled bilinearly.  Texels outside
    the layout or hidden behind other parts of the surface are filled from the
    nearest valid texel.
    """
    image = np.asarray(image, dtype=np.float64)
    th, tw = size
    x = template.vertices if state is None else _positions(state)
    uv_px = template.uvs * np.array([tw, th])
    face_of, bary, _ = _hard_raster(uv_px, None, template.faces, tw, th)
    hit = face_of >= 0
    tex = np.zeros((th * tw, 3))
    valid = np.zeros(th * tw, dtype=bool)
    if np.any(hit):
        f = template.faces[face_of[hit]]
        pts = np.einsum("ki,kij->kj", bary[hit], x[f])
        try:
            scr, z = project(pts, camera)
        except BehindCamera:
            pc = camera.to_camera(pts)
            front = pc[:, 2] > 0
            scr = np.zeros((len(pts), 2))
            z = np.full(len(pts), np.inf)
            scr[front], z[front] = project(pts[front], camera)
        ih, iw = image.shape[:2]
        inside = (scr[:, 0] >= 0) & (scr[:, 0] <= iw) & (scr[:, 1] >= 0) & (scr[:, 1] <= ih) & np.isfinite(z)
        depth = render_depth(x, template, camera)
        col = np.clip(np.floor(scr[:, 0]).astype(np.int64), 0, iw - 1)
        row = np.clip(np.floor(scr[:, 1]).astype(np.int64), 0, ih - 1)
        visible = inside & (z <= depth[row, col] + occlusion_tol)
        samples = np.zeros((len(pts), 3))
        uvn = scr[visible] / np.array([iw, ih])
        samples[visible] = bilinear_sample(image, uvn)
        idx = np.flatnonzero(hit)
        tex[idx] = samples
        valid[idx] = visible
    tex = tex.reshape(th, tw, 3)
    valid = valid.reshape(th, tw)
    if not valid.any():
        return TextureMap(np.zeros((th, tw, 3)))
    if not valid.all():
        _, (ri, ci) = ndimage.distance_transform_edt(~valid, return_indices=True)
        tex = tex[ri, ci]
    return TextureMap(np.clip(tex, 0.0, 1.0))
