"""Reverse-mode gradients through the simulator.

Each forward step solves ``A dv = b`` and then projects the state onto the
active contact constraints.  Going backwards, the projection contributes its
orthogonal complement ``I - Q Q^T`` (active set frozen) and the linear solve
contributes one adjoint solve ``A lam = g`` with the same CG routine; the
partial derivatives of ``lam . (b - A dv)`` then give the gradients with
respect to the step inputs and the physical parameters.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import NaNDetected, TapeMismatch
from .geometry import SurfaceState
from .physics.collision import project_gradient
from .physics.forces import assemble_system, model_for
from .physics.integrator import StepTape, free_mask, step
from .physics.params import PhysicsParams
from .physics.solver import pcg


@dataclass
class GradPhi:
    """Gradient of a scalar with respect to the physical parameters and the initial state."""

    density: float
    stretch: np.ndarray  # (24,)
    bend: np.ndarray  # (15,)
    wind: np.ndarray  # (3,)
    correctives: np.ndarray  # (T-1, N, 3); row k belongs to F_{k+1}
    x0: np.ndarray | None = field(default=None)
    v0: np.ndarray | None = field(default=None)

    @classmethod
    def zeros(cls, n_frames: int, n_vertices: int) -> "GradPhi":
        return cls(0.0, np.zeros(24), np.zeros(15), np.zeros(3), np.zeros((max(n_frames - 1, 0), n_vertices, 3)))

    def add_(self, other: "GradPhi") -> "GradPhi":
        self.density += other.density
        self.stretch = self.stretch + other.stretch
        self.bend = self.bend + other.bend
        self.wind = self.wind + other.wind
        self.correctives = self.correctives + other.correctives
        return self

    def is_finite(self) -> bool:
        parts = [np.atleast_1d(self.density), self.stretch, self.bend, self.wind, self.correctives]
        return all(np.all(np.isfinite(p)) for p in parts)

    def flat(self, include_correctives=True) -> np.ndarray:
        parts = [np.atleast_1d(self.density), self.stretch, self.bend, self.wind]
        if include_correctives:
            parts.append(self.correctives.ravel())
        return np.concatenate(parts)


@dataclass
class StepGrad:
    """Parameter gradient contributed by a single step."""

    density: float
    stretch: np.ndarray
    bend: np.ndarray
    wind: np.ndarray
    corrective: np.ndarray  # (N, 3), for the increment applied in this step
    corrective_index: int


def replay(tape: StepTape):
    """Re-run the recorded step; returns the new state."""
    start = SurfaceState(tape.x_prev, tape.v_prev, tape.time_index - 1)
    return step(start, tape.template, tape.params, tape.config, tape.obstacle)


def backward_step(tape: StepTape, grad_x, grad_v):
    """Pull ``(dL/dx_t, dL/dv_t)`` back through one step.

    Returns ``(dL/dx_{t-1}, dL/dv_{t-1}, StepGrad)``.
    """
    n = tape.template.n_vertices
    grad_x = np.asarray(grad_x, dtype=np.float64)
    grad_v = np.asarray(grad_v, dtype=np.float64)
    if grad_x.shape != (n, 3) or grad_v.shape != (n, 3):
        raise TapeMismatch(f"gradients must be ({n}, 3), got {grad_x.shape} and {grad_v.shape}")
    if not (np.all(np.isfinite(grad_x)) and np.all(np.isfinite(grad_v))):
        raise NaNDetected(f"non-finite incoming gradient at frame {tape.time_index}")

    cfg = tape.config
    h = cfg.h
    model = model_for(tape.template)
    free = free_mask(n, cfg.pinned)

    # collision projection (active set frozen)
    gx = project_gradient(grad_x, tape.constraints)
    gv = project_gradient(grad_v, tape.constraints)
    # x' = x + h v'  and  v' = free * (v + dv + F)
    g_new_v = (gv + h * gx) * free[:, None]

    # adjoint of the linear solve; A is symmetric
    sys = assemble_system(model, tape.x_prev, tape.v_prev, tape.params, cfg)
    lam, _, _ = pcg(sys.matrix, g_new_v.ravel(), tol=cfg.solver_tol, max_iter=cfg.max_iter(3 * n),
                    free=np.repeat(free, 3))
    lam = lam.reshape(n, 3)
    gxp, gvp, gd, gs, gb, gw = model.adjoint_terms(tape.x_prev, tape.v_prev, tape.params, lam, tape.delta_v, h,
                                                   cfg.gravity)
    grad_x_prev = gx + gxp
    grad_v_prev = g_new_v + gvp
    sg = StepGrad(float(gd), gs.reshape(-1), gb.reshape(-1), gw.reshape(-1), g_new_v.copy(),
                  tape.corrective_index)
    return grad_x_prev, grad_v_prev, sg


def _check_tapes(tapes):
    if not tapes:
        raise TapeMismatch("no tapes to differentiate")
    first = tapes[0]
    for a, b in zip(tapes[:-1], tapes[1:]):
        if b.time_index != a.time_index + 1:
            raise TapeMismatch(f"tapes are not consecutive ({a.time_index} then {b.time_index})")
        if b.template is not first.template:
            raise TapeMismatch("tapes were recorded on different templates")
        if not np.array_equal(b.x_prev, a.x_out) or not np.array_equal(b.v_prev, a.v_out):
            raise TapeMismatch(f"tape for frame {b.time_index} does not start where frame {a.time_index} ended")


def backward_rollout(tapes, grad_positions, grad_velocities=None, n_frames=None) -> GradPhi:
    """Accumulate gradients over a window of steps in reverse order.

    ``grad_positions`` maps a frame index (1-based, as ``SurfaceState.time_index``)
    to dL/dx for that frame; missing frames contribute nothing. Same for
    ``grad_velocities``. The result also carries dL/dx and dL/dv of the state
    the window started from (``x0``, ``v0``).
    """
    _check_tapes(tapes)
    n = tapes[0].template.n_vertices
    grad_velocities = grad_velocities or {}
    first = tapes[0].time_index - 1
    last = tapes[-1].time_index
    for k in list(grad_positions) + list(grad_velocities):
        if not first <= k <= last:
            raise TapeMismatch(f"gradient given for frame {k}, window covers {first}..{last}")
    if n_frames is None:
        n_frames = tapes[0].params.n_frames or last
    out = GradPhi.zeros(n_frames, n)

    zero = np.zeros((n, 3))
    gx = np.asarray(grad_positions.get(last, zero), dtype=np.float64)
    gv = np.asarray(grad_velocities.get(last, zero), dtype=np.float64)
    for tape in reversed(tapes):
        gx, gv, sg = backward_step(tape, gx, gv)
        out.density += sg.density
        out.stretch += sg.stretch
        out.bend += sg.bend
        out.wind += sg.wind
        k = sg.corrective_index
        if 0 <= k < out.correctives.shape[0]:
            out.correctives[k] += sg.corrective
        t = tape.time_index - 1
        gx = gx + np.asarray(grad_positions.get(t, zero))
        gv = gv + np.asarray(grad_velocities.get(t, zero))
    out.x0 = gx
    out.v0 = gv
    if not out.is_finite():
        raise NaNDetected("non-finite parameter gradient")
    return out


def params_from_flat(base: PhysicsParams, vec, include_correctives=True) -> PhysicsParams:
    """Inverse of :meth:`GradPhi.flat` for building perturbed parameter sets."""
    p = base.copy()
    vec = np.asarray(vec, dtype=np.float64)
    p.density = float(vec[0])
    p.stretch = vec[1:25].copy()
    p.bend = vec[25:40].copy()
    p.wind = vec[40:43].copy()
    if include_correctives and p.correctives is not None:
        p.correctives = vec[43:].reshape(p.correctives.shape).copy()
    return p


def params_flat(p: PhysicsParams, include_correctives=True) -> np.ndarray:
    parts = [np.atleast_1d(p.density), p.stretch, p.bend, p.wind]
    if include_correctives and p.correctives is not None:
        parts.append(p.correctives.ravel())
    return np.concatenate(parts)


@dataclass
class GradCheckReport:
    analytic: np.ndarray
    numeric: np.ndarray
    rel_err: np.ndarray
    passed: np.ndarray  # per component: within rel_tol, or both below the absolute floor
    seconds: float

    @property
    def fraction(self) -> float:
        return float(np.mean(self.passed))


def random_smooth_loss(n_vertices: int, rng):
    """``L(x) = sum(a * x) + 0.5 * sum(b * x^2)`` with random a and b >= 0; returns ``(L, dL/dx)``."""
    a = rng.standard_normal((n_vertices, 3))
    b = np.abs(rng.standard_normal((n_vertices, 3)))

    def loss(x):
        return float(np.sum(a * x) + 0.5 * np.sum(b * x * x)), a + b * x

    return loss


def gradient_check(template, params: PhysicsParams, config, n_frames: int, loss, rel_step: float = 1e-5,
                   rel_tol: float = 1e-3, abs_floor: float = 1e-8, start=None) -> GradCheckReport:
    """Adjoint gradient of ``loss(final positions)`` against central differences, component by component.

    A component passes when ``|a - fd| <= rel_tol * |fd|`` or ``|a - fd| <= abs_floor``.
    Perturbations are ``rel_step * max(|p|, 1e-2)``.
    """
    import time

    from .physics.integrator import simulate

    t0 = time.perf_counter()
    params = params.with_frames(n_frames, template.n_vertices) if params.n_frames != n_frames else params
    states, tapes = simulate(template, params, config, n_frames, return_tapes=True, start=start)
    _, g_last = loss(states[-1].positions)
    analytic = backward_rollout(tapes, {states[-1].time_index: g_last}, n_frames=n_frames).flat()

    base = params_flat(params)
    numeric = np.empty_like(base)
    for i in range(len(base)):
        eps = rel_step * max(abs(base[i]), 1e-2)
        vals = []
        for sgn in (1.0, -1.0):
            v = base.copy()
            v[i] += sgn * eps
            st = simulate(template, params_from_flat(params, v), config, n_frames, start=start)
            vals.append(loss(st[-1].positions)[0])
        numeric[i] = (vals[0] - vals[1]) / (2 * eps)
    diff = np.abs(analytic - numeric)
    rel = diff / np.maximum(np.abs(numeric), 1e-300)
    passed = (diff <= rel_tol * np.abs(numeric)) | (diff <= abs_floor)
    return GradCheckReport(analytic, numeric, rel, passed, time.perf_counter() - t0)


def gradcheck_scene(seed: int = 0, grid: int = 5, n_frames: int = 3):
    """Small perturbed cloth used by the gradient check: pins, gravity, wind and random correctives."""
    from .geometry import SurfaceState, grid_template
    from .physics.params import SimConfig, default_params

    rng = np.random.default_rng(seed)
    template = grid_template(grid, grid, 0.5, axis_u=(1.0, 0.0, 0.3))
    n = template.n_vertices
    p = default_params(n_frames, n)
    p.wind = np.array([0.1, 0.05, 0.2])
    p.correctives = 0.01 * rng.standard_normal(p.correctives.shape)
    p.stretch = p.stretch * (1 + 0.3 * rng.random(24))
    p.bend = p.bend * (1 + 0.3 * rng.random(15))
    # tight CG tolerance so finite differences are not swamped by solver noise
    cfg = SimConfig(pinned=(0, grid - 1), gravity=(0.0, 0.0, -0.1), solver_tol=1e-14)
    start = SurfaceState(template.vertices + 0.01 * rng.standard_normal((n, 3)),
                         0.01 * rng.standard_normal((n, 3)), 1)
    return template, p, cfg, start, random_smooth_loss(n, rng)
