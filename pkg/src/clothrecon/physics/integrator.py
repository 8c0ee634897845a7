"""Linearised backward-Euler time stepping."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import NaNDetected
from ..geometry import SurfaceState, TemplateMesh, initial_state
from .collision import ConstraintSet, collision_response
from .forces import assemble_system, model_for
from .params import CollisionObstacle, PhysicsParams, SimConfig
from .solver import pcg


@dataclass(frozen=True, eq=False)
class StepTape:
    """Inputs and outputs of one forward step, enough to replay or differentiate it."""

    template: TemplateMesh
    params: PhysicsParams
    config: SimConfig
    obstacle: CollisionObstacle | None
    x_prev: np.ndarray
    v_prev: np.ndarray
    time_index: int  # index of the state produced by the step
    delta_v: np.ndarray  # (N, 3) solution of the linear system
    corrective: np.ndarray  # (N, 3) increment that was applied
    constraints: ConstraintSet
    x_out: np.ndarray
    v_out: np.ndarray
    solver_iterations: int = 0

    @property
    def corrective_index(self) -> int:
        return self.time_index - 2


def free_mask(n_vertices: int, pinned) -> np.ndarray:
    m = np.ones(n_vertices)
    if len(pinned):
        m[np.asarray(pinned)] = 0.0
    return m


def step(state: SurfaceState, template: TemplateMesh, params: PhysicsParams, config: SimConfig,
         obstacle: CollisionObstacle | None = None, return_tape: bool = False):
    """Advance one frame: implicit solve, corrective increment, position update, contacts."""
    model = model_for(template)
    n = template.n_vertices
    config.validate(n)
    h = config.h
    x = state.positions
    v = state.velocities
    t = state.time_index + 1
    corrective = params.corrective(state.time_index - 1, n)

    sys = assemble_system(model, x, v, params, config)
    free = free_mask(n, config.pinned)
    dv, iters, _ = pcg(sys.matrix, sys.rhs, tol=config.solver_tol, max_iter=config.max_iter(3 * n),
                       free=np.repeat(free, 3))
    dv = dv.reshape(n, 3)
    v_new = (v + dv + corrective) * free[:, None]
    x_new = x + h * v_new
    if not (np.all(np.isfinite(x_new)) and np.all(np.isfinite(v_new))):
        raise NaNDetected(f"non-finite state produced at frame {t}")
    x_out, v_out, cs = collision_response(x_new, v_new, config, obstacle, t)
    out = SurfaceState(x_out, v_out, t)
    if not return_tape:
        return out
    tape = StepTape(template, params, config, obstacle, x.copy(), v.copy(), t, dv, corrective.copy(), cs,
                    out.positions, out.velocities, iters)
    return out, tape


def simulate(template: TemplateMesh, params: PhysicsParams, config: SimConfig, n_frames: int,
             obstacle: CollisionObstacle | None = None, return_tapes: bool = False, start=None):
    """Roll out frames 1..n_frames starting from the template (or ``start``)."""
    if params.correctives is not None and params.correctives.shape[0] < n_frames - 1:
        raise ValueError(f"params carry {params.correctives.shape[0]} corrective frames, need {n_frames - 1}")
    s = initial_state(template) if start is None else start
    states = [s]
    tapes = []
    for _ in range(n_frames - 1):
        if return_tapes:
            s, tape = step(s, template, params, config, obstacle, return_tape=True)
            tapes.append(tape)
        else:
            s = step(s, template, params, config, obstacle)
        states.append(s)
    return (states, tapes) if return_tapes else states
