"""Adam over the physical parameters with an adaptively growing frame window."""
from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .adjoint import backward_rollout
from .errors import NonFiniteEnergy, SolverDiverged
from .geometry import Camera, TemplateMesh, initial_state
from .objective import FrameObservation, total_energy
from .physics.integrator import simulate
from .physics.params import CollisionObstacle, PhysicsParams, SimConfig, default_params
from .softrender import RenderConfig

log = logging.getLogger(__name__)

BLOCKS = ("density", "stretch", "bend", "wind", "correctives")
ABLATIONS = ("full", "no_F", "no_adaptive", "no_Es", "only_F")


@dataclass
class OptimConfig:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    lam: float = 0.5
    sigma: float = 7.0  # silhouette blur, px
    initial_window: int = 5
    max_iters_per_frame: int = 50
    global_max_iters: int = 2000
    no_correctives: bool = False
    no_adaptive: bool = False
    no_silhouette: bool = False
    only_correctives: bool = False
    corrective_l2_weight: float = 0.0
    # a frame energy below this counts as meeting the threshold even before b exists
    energy_tol: float = 1e-7
    # Adam runs on p / scale. Density and stiffness use their initial values as
    # scale; wind and correctives start at zero, so they need explicit scales.
    wind_scale: float = 10.0
    corrective_scale: float = 0.01
    region: str = "union"
    silhouette_mode: str = "straight_through"

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.initial_window < 1:
            raise ValueError("initial_window must be at least 1")
        if self.max_iters_per_frame < 1:
            raise ValueError("max_iters_per_frame must be at least 1")

    @classmethod
    def for_ablation(cls, mode: str, **kw) -> "OptimConfig":
        if mode not in ABLATIONS:
            raise ValueError(f"unknown ablation {mode!r}; choose from {ABLATIONS}")
        flags = {"no_F": {"no_correctives": True}, "no_adaptive": {"no_adaptive": True},
                 "no_Es": {"no_silhouette": True}, "only_F": {"only_correctives": True}}.get(mode, {})
        return cls(**{**kw, **flags})

    @property
    def effective_lam(self) -> float:
        return 0.0 if self.no_silhouette else self.lam

    def trainable(self) -> tuple:
        if self.only_correctives:
            return ("correctives",)
        if self.no_correctives:
            return ("density", "stretch", "bend", "wind")
        return BLOCKS


@dataclass
class AdamMoments:
    m: np.ndarray
    v: np.ndarray
    t: int = 0


def adam_update(param, grad, moments: AdamMoments | None, config: OptimConfig, lower=None):
    """One bias-corrected Adam step; ``lower`` optionally clamps the result from below."""
    param = np.asarray(param, dtype=np.float64)
    grad = np.asarray(grad, dtype=np.float64)
    if param.shape != grad.shape:
        from .errors import ShapeMismatch

        raise ShapeMismatch(f"parameter {param.shape} and gradient {grad.shape} differ")
    if moments is None:
        moments = AdamMoments(np.zeros_like(param), np.zeros_like(param))
    t = moments.t + 1
    m = config.beta1 * moments.m + (1 - config.beta1) * grad
    v = config.beta2 * moments.v + (1 - config.beta2) * grad * grad
    mhat = m / (1 - config.beta1 ** t)
    vhat = v / (1 - config.beta2 ** t)
    new = param - config.learning_rate * mhat / (np.sqrt(vhat) + config.eps)
    if lower is not None:
        new = np.maximum(new, lower)
    return new, AdamMoments(m, v, t)


@dataclass
class AdaptiveState:
    """Active window ``1..t_a`` and the frame-addition threshold ``b``."""

    t_a: int
    n_frames: int
    cap: int
    tol: float = 0.0
    b: float | None = None
    iters_on_frame: int = 0
    events: list = field(default_factory=list)  # (iteration, new t_a, reason, frame energy)

    def observe(self, iteration: int, frame_energy: float) -> str | None:
        """Record one iteration on the current window; returns "add", "done" or None."""
        self.iters_on_frame += 1
        capped = self.iters_on_frame >= self.cap
        below = frame_energy < self.tol or (self.b is not None and frame_energy < self.b)
        if self.t_a >= self.n_frames:
            if below or capped:
                self.events.append((iteration, self.t_a, "threshold" if below else "cap", frame_energy))
                return "done"
            return None
        if below or capped:
            if self.b is None:
                # the threshold is the energy the initial window's last frame has when the next frame joins
                self.b = frame_energy
            self.t_a += 1
            self.iters_on_frame = 0
            self.events.append((iteration, self.t_a, "threshold" if below else "cap", frame_energy))
            return "add"
        return None


@dataclass
class IterationRecord:
    iteration: int
    t_a: int
    energy: float
    photometric: dict
    silhouette: dict
    seconds: float

    def to_json(self) -> str:
        d = asdict(self)
        d["photometric"] = {str(k): v for k, v in self.photometric.items()}
        d["silhouette"] = {str(k): v for k, v in self.silhouette.items()}
        return json.dumps(d)


@dataclass
class ReconstructionResult:
    states: list
    params: PhysicsParams
    history: list
    adaptive: AdaptiveState
    status: str = "converged"

    @property
    def energies(self) -> np.ndarray:
        return np.array([r.energy for r in self.history])

    def write_log(self, path):
        from .io import atomic_write_text

        atomic_write_text(path, "".join(r.to_json() + "\n" for r in self.history))


class _Parametrization:
    """Maps physical parameters to the scaled variables Adam works on."""

    def __init__(self, init: PhysicsParams, config: OptimConfig):
        def rel(a):
            a = np.abs(np.asarray(a, dtype=np.float64))
            floor = 1e-3 * a.max() if a.size and a.max() > 0 else 1.0
            return np.maximum(a, floor)

        self.scale = {
            "density": rel(np.atleast_1d(init.density)),
            "stretch": rel(init.stretch),
            "bend": rel(init.bend),
            "wind": np.full(3, config.wind_scale),
            "correctives": config.corrective_scale,
        }

    def get(self, p: PhysicsParams, name: str) -> np.ndarray:
        val = np.atleast_1d(p.density) if name == "density" else getattr(p, name)
        return val / self.scale[name]

    def set(self, p: PhysicsParams, name: str, z: np.ndarray):
        val = z * self.scale[name]
        if name == "density":
            p.density = float(max(val[0], 1e-6))
        elif name == "stretch":
            s = np.maximum(val, 0.0).reshape(4, 6)
            # keep each sampled 2x2 stiffness block positive semi-definite
            bound = np.sqrt(s[0] * s[2])
            s[1] = np.clip(s[1], -bound, bound)
            p.stretch = s.reshape(-1)
        elif name == "bend":
            p.bend = np.maximum(val, 0.0)
        else:
            setattr(p, name, val)


def _grad_block(g, name):
    return np.atleast_1d(g.density) if name == "density" else getattr(g, name)


def reconstruct(template: TemplateMesh, observations, camera: Camera, sim_config: SimConfig,
                optim_config: OptimConfig | None = None, texture=None, init: PhysicsParams | None = None,
                render_config: RenderConfig | None = None, obstacle: CollisionObstacle | None = None,
                callback=None, log_path=None) -> ReconstructionResult:
    """Recover physical parameters whose rollout explains the observed frames.

    ``observations`` covers frames 1..T (frame 1 may be absent; it is the
    template). ``texture`` is the texture map used for rendering.
    """
    cfg = optim_config or OptimConfig()
    obs = {o.index: o for o in observations} if not isinstance(observations, dict) else dict(observations)
    n_frames = max(obs)
    if n_frames < 2:
        raise ValueError("need observations up to at least frame 2")
    n = template.n_vertices
    # defaults: elastic blocks at their nominal values, wind and correctives zero
    params = (init.copy() if init is not None else default_params()).with_frames(n_frames, n)
    param_map = _Parametrization(params, cfg)
    trainable = cfg.trainable()
    moments = {k: None for k in trainable}
    lam = cfg.effective_lam

    start_window = n_frames if cfg.no_adaptive else min(cfg.initial_window, n_frames)
    if cfg.no_adaptive:
        # the same iteration budget the adaptive schedule could spend at most
        cap = cfg.max_iters_per_frame * max(n_frames - min(cfg.initial_window, n_frames) + 1, 1)
    else:
        cap = cfg.max_iters_per_frame
    adaptive = AdaptiveState(start_window, n_frames, cap, cfg.energy_tol)
    history = []
    status = "converged"
    log_fh = open(log_path, "w") if log_path else None
    try:
        for it in range(cfg.global_max_iters):
            t0 = time.perf_counter()
            t_a = adaptive.t_a
            window_params = params.copy()
            try:
                states, tapes = simulate(template, window_params, sim_config, t_a, obstacle, return_tapes=True)
            except SolverDiverged as exc:
                exc.iteration = it
                raise
            report, grads = total_energy(states, obs, texture, template, camera, lam=lam,
                                         window=[t for t in range(2, t_a + 1) if t in obs],
                                         render_config=render_config, sigma=cfg.sigma, region=cfg.region,
                                         silhouette_mode=cfg.silhouette_mode)
            energy = report.total
            active_f = params.correctives[: t_a - 1]
            if cfg.corrective_l2_weight and "correctives" in trainable:
                energy += cfg.corrective_l2_weight * float(np.sum(active_f ** 2))
            if not np.isfinite(energy):
                raise NonFiniteEnergy(f"energy became {energy} at iteration {it} (window 1..{t_a})")
            gphi = backward_rollout(tapes, grads, n_frames=n_frames)
            if cfg.corrective_l2_weight:
                gphi.correctives[: t_a - 1] += 2 * cfg.corrective_l2_weight * active_f
            for name in trainable:
                z = param_map.get(params, name)
                gz = _grad_block(gphi, name) * param_map.scale[name]
                z, moments[name] = adam_update(z, gz, moments[name], cfg)
                param_map.set(params, name, z)

            rec = IterationRecord(it, t_a, energy, dict(report.photometric), dict(report.silhouette),
                                  time.perf_counter() - t0)
            history.append(rec)
            if log_fh:
                log_fh.write(rec.to_json() + "\n")
                log_fh.flush()
            last = max(t for t in range(2, t_a + 1) if t in obs)
            action = adaptive.observe(it, report.frame_energy(last))
            log.info("iter %d window %d E=%.6g %s", it, t_a, energy, action or "")
            if callback is not None:
                callback(it, params, report, adaptive)
            if action == "done":
                break
        else:
            status = "iteration_limit"
    finally:
        if log_fh:
            log_fh.close()
    final = simulate(template, params, sim_config, n_frames, obstacle)
    return ReconstructionResult(final, params, history, adaptive, status)


def ablation_run(template, observations, camera, sim_config, mode: str, optim_config: OptimConfig | None = None,
                 **kw) -> ReconstructionResult:
    """``reconstruct`` with one of the ablation modes applied."""
    base = asdict(optim_config) if optim_config is not None else {}
    for k in ("no_correctives", "no_adaptive", "no_silhouette", "only_correctives"):
        base.pop(k, None)
    cfg = OptimConfig.for_ablation(mode, **base)
    return reconstruct(template, observations, camera, sim_config, cfg, **kw)


def static_states(template: TemplateMesh, n_frames: int):
    """The template repeated over all frames (the no-motion baseline)."""
    s = initial_state(template)
    return [type(s)(s.positions, s.velocities, t) for t in range(1, n_frames + 1)]
