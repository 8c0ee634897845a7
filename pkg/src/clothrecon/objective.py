"""Photometric and silhouette energies and their gradients.

E = sum over frames t in the window of E_p(t) + lam * E_s(t), with

* E_p: mean smoothed l1 colour residual between the rendering, composited
  over the observed background plate, and the observed image;
* E_s: smoothed l1 norm of the difference of Gaussian-blurred silhouettes.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeMismatch
from .geometry import Camera, SurfaceState, TemplateMesh
from .softrender import RenderConfig, RenderOutput, blur_matrix, rasterize

L1_EPS = 1e-8


def smooth_abs(r):
    """``sqrt(r^2 + eps^2) - eps``: zero with zero slope at 0, |r| - eps far from it."""
    return np.sqrt(r * r + L1_EPS * L1_EPS) - L1_EPS


def smooth_abs_grad(r):
    return r / np.sqrt(r * r + L1_EPS * L1_EPS)


@dataclass(frozen=True, eq=False)
class FrameObservation:
    image: np.ndarray  # (H, W, 3) in [0, 1]
    mask: np.ndarray  # (H, W) in {0, 1}
    index: int
    background: np.ndarray | None = None  # (H, W, 3) plate without the cloth

    def __post_init__(self):
        img = np.asarray(self.image, dtype=np.float64)
        m = np.asarray(self.mask)
        if img.ndim != 3 or img.shape[2] != 3:
            raise ShapeMismatch(f"image must be (H, W, 3), got {img.shape}")
        if m.shape != img.shape[:2]:
            raise ShapeMismatch(f"mask {m.shape} does not match image {img.shape[:2]}")
        if not np.all(np.isfinite(img)):
            raise ValueError("image contains non-finite values")
        if not np.all((m == 0) | (m == 1)):
            raise ValueError("mask must be binary {0, 1}")
        object.__setattr__(self, "image", img)
        object.__setattr__(self, "mask", m.astype(np.float64))
        if self.background is not None:
            bg = np.asarray(self.background, dtype=np.float64)
            if bg.shape != img.shape:
                raise ShapeMismatch("background plate must match the image")
            object.__setattr__(self, "background", bg)


@dataclass
class EnergyReport:
    photometric: dict = field(default_factory=dict)  # frame -> E_p(t)
    silhouette: dict = field(default_factory=dict)  # frame -> E_s(t)
    lam: float = 0.5
    grad_norms: dict = field(default_factory=dict)  # frame -> |dE/dx_t|

    def frame_energy(self, t: int) -> float:
        return self.photometric[t] + self.lam * self.silhouette[t]

    @property
    def photometric_total(self) -> float:
        return float(sum(self.photometric.values()))

    @property
    def silhouette_total(self) -> float:
        return float(sum(self.silhouette.values()))

    @property
    def total(self) -> float:
        return self.photometric_total + self.lam * self.silhouette_total

    @property
    def frames(self):
        return sorted(self.photometric)


def _plate(observation: FrameObservation, fallback) -> np.ndarray:
    if observation.background is not None:
        return observation.background
    return np.broadcast_to(np.asarray(fallback, dtype=np.float64), observation.image.shape)


def photometric_energy(render: RenderOutput, observation: FrameObservation, background=(0.0, 0.0, 0.0),
                       region: str = "union"):
    """``(E_p, dE/dcolor, dE/dalpha)``.

    ``region="union"`` evaluates pixels inside the observed mask or with rendered
    alpha above 0.5 and normalises by their count; ``"all"`` uses every pixel.
    """
    if render.color.shape != observation.image.shape:
        raise ShapeMismatch(f"render {render.color.shape} vs observation {observation.image.shape}")
    plate = _plate(observation, background)
    a = render.alpha[..., None]
    comp = a * render.color + (1.0 - a) * plate
    res = comp - observation.image
    if region == "union":
        sel = (observation.mask > 0) | (render.alpha > 0.5)
    elif region == "all":
        sel = np.ones(render.alpha.shape, dtype=bool)
    else:
        raise ValueError(f"unknown region {region!r}")
    count = int(sel.sum())
    if count == 0:
        return 0.0, np.zeros_like(render.color), np.zeros_like(render.alpha)
    w = sel[..., None] / count
    energy = float(np.sum(smooth_abs(res) * w))
    g_comp = smooth_abs_grad(res) * w
    g_color = g_comp * a
    g_alpha = np.sum(g_comp * (render.color - plate), axis=-1)
    return energy, g_color, g_alpha


class SilhouetteFilter:
    """Gaussian blur with cached separable matrices for one image size."""

    def __init__(self, height: int, width: int, sigma: float):
        if not sigma > 0:
            raise ValueError("sigma must be positive")
        self.sigma = sigma
        self.rows = blur_matrix(height, sigma)
        self.cols = blur_matrix(width, sigma)

    def __call__(self, m):
        return self.rows @ m @ self.cols.T

    def transpose(self, g):
        return self.rows.T @ g @ self.cols


_filters: dict = {}


def _filter(h, w, sigma) -> SilhouetteFilter:
    key = (h, w, float(sigma))
    f = _filters.get(key)
    if f is None:
        f = _filters[key] = SilhouetteFilter(h, w, sigma)
    return f


def silhouette_energy(alpha, observation, sigma: float = 7.0, mode: str = "straight_through"):
    """``(E_s, dE/dalpha)`` for a rendered alpha map and an observed mask.

    In the default mode the forward value uses the rendered silhouette
    binarised at 0.5 and the gradient passes straight through to the soft alpha.
    ``mode="soft"`` uses the soft alpha for both, which makes the value
    differentiable (useful for finite-difference checks).
    """
    alpha = np.asarray(alpha, dtype=np.float64)
    mask = observation.mask if isinstance(observation, FrameObservation) else np.asarray(observation, np.float64)
    if alpha.shape != mask.shape:
        raise ShapeMismatch(f"alpha {alpha.shape} vs mask {mask.shape}")
    if mode == "straight_through":
        b = (alpha > 0.5).astype(np.float64)
    elif mode == "soft":
        b = alpha
    else:
        raise ValueError(f"unknown silhouette mode {mode!r}")
    g = _filter(*alpha.shape, sigma)
    diff = g(b) - g(mask)
    energy = float(np.sum(smooth_abs(diff)))
    return energy, g.transpose(smooth_abs_grad(diff))


def total_energy(states, observations, texture, template: TemplateMesh, camera: Camera, lam: float = 0.5,
                 window=None, render_config: RenderConfig | None = None, sigma: float = 7.0,
                 region: str = "union", silhouette_mode: str = "straight_through"):
    """Energy over the frames in ``window`` and its gradient w.r.t. their vertex positions.

    ``states`` and ``observations`` are indexed by frame (lists of
    ``SurfaceState``/``FrameObservation`` or dicts keyed by frame index).
    Returns ``(EnergyReport, {frame: dE/dx_t})``.
    """
    render_config = render_config or RenderConfig()
    st = {s.time_index: s for s in states} if not isinstance(states, dict) else states
    ob = {o.index: o for o in observations} if not isinstance(observations, dict) else observations
    if window is None:
        window = [t for t in sorted(st) if t >= 2 and t in ob]
    report = EnergyReport(lam=lam)
    grads = {}
    for t in window:
        if t < 2:
            raise ValueError("frame 1 is the template and takes no part in the energy")
        s, o = st[t], ob[t]
        x = s.positions if isinstance(s, SurfaceState) else s
        r = rasterize(x, template, texture, camera, render_config)
        ep, gc, ga = photometric_energy(r, o, render_config.background_color, region)
        if lam != 0.0:
            es, gs = silhouette_energy(r.alpha, o, sigma, silhouette_mode)
            ga = ga + lam * gs
        else:
            es = silhouette_energy(r.alpha, o, sigma, silhouette_mode)[0]
        g = r.backward(gc, ga)
        report.photometric[t] = ep
        report.silhouette[t] = es
        report.grad_norms[t] = float(np.linalg.norm(g))
        grads[t] = g
    return report, grads
