"""Physical parameter blocks and simulator configuration."""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from ..errors import NonPositiveDensity, ShapeMismatch

# strain magnitudes at which the 6 stretching samples are placed
STRAIN_SAMPLES = np.array([0.0, 0.01, 0.02, 0.05, 0.1, 0.2])
# |dihedral - pi| sample offsets; the 5 bending samples sit at pi + {-pi/4, -pi/8, 0, pi/8, pi/4}
DIHEDRAL_OFFSETS = np.array([0.0, np.pi / 8, np.pi / 4])
DIHEDRAL_SAMPLES = np.pi + np.array([-np.pi / 4, -np.pi / 8, 0.0, np.pi / 8, np.pi / 4])
# edge orientation bins relative to the warp axis
ORIENTATION_BINS = np.array([0.0, np.pi / 4, np.pi / 2])

STRETCH_ROWS = ("C11", "C12", "C22", "C33")

DEFAULT_DENSITY = 0.15  # kg/m^2
DEFAULT_STRETCH = np.repeat([20.0, 6.0, 20.0, 20.0], 6)  # N/m, rows C11, C12, C22, C33
DEFAULT_BEND = np.full(15, 1e-5)  # N m
AIR_DENSITY = 1.0  # kg/m^3, never optimised


def _vec(a, n, name):
    a = np.array(a, dtype=np.float64, copy=True).reshape(-1)
    if a.shape != (n,):
        raise ShapeMismatch(f"{name} must have {n} entries, got {a.size}")
    return a


@dataclass(eq=False)
class PhysicsParams:
    """Everything the simulator is parametrised by.

    ``stretch`` holds 24 values laid out as 4 stiffness entries (C11, C12, C22,
    C33) x 6 strain samples; ``bend`` holds 3 orientation bins x 5 dihedral
    samples. ``correctives`` are per-frame, per-vertex velocity increments with
    shape ``(T - 1, N, 3)``; entry ``k`` is applied on the step that produces
    frame ``k + 2``.
    """

    density: float = DEFAULT_DENSITY
    stretch: np.ndarray = field(default_factory=lambda: DEFAULT_STRETCH.copy())
    bend: np.ndarray = field(default_factory=lambda: DEFAULT_BEND.copy())
    wind: np.ndarray = field(default_factory=lambda: np.zeros(3))
    correctives: np.ndarray | None = None
    air_density: float = AIR_DENSITY

    def __post_init__(self):
        self.density = float(self.density)
        if not self.density > 0:
            raise NonPositiveDensity(f"density must be positive, got {self.density}")
        self.stretch = _vec(self.stretch, 24, "stretch")
        self.bend = _vec(self.bend, 15, "bend")
        self.wind = _vec(self.wind, 3, "wind")
        if self.correctives is not None:
            c = np.array(self.correctives, dtype=np.float64, copy=True)
            if c.ndim != 3 or c.shape[2] != 3:
                raise ShapeMismatch(f"correctives must be (T-1, N, 3), got {c.shape}")
            self.correctives = c
        if np.any(self.stretch < 0) or np.any(self.bend < 0):
            raise ValueError("stiffness samples must be non-negative")

    @property
    def stretch_table(self) -> np.ndarray:
        return self.stretch.reshape(4, 6)

    @property
    def bend_table(self) -> np.ndarray:
        return self.bend.reshape(3, 5)

    @property
    def n_frames(self) -> int | None:
        return None if self.correctives is None else self.correctives.shape[0] + 1

    def corrective(self, k: int, n_vertices: int) -> np.ndarray:
        """Velocity increment for corrective index ``k`` (zero when absent)."""
        if self.correctives is None or k >= self.correctives.shape[0]:
            return np.zeros((n_vertices, 3))
        c = self.correctives[k]
        if c.shape != (n_vertices, 3):
            raise ShapeMismatch(f"corrective frame has shape {c.shape}, expected ({n_vertices}, 3)")
        return c

    def with_frames(self, n_frames: int, n_vertices: int) -> "PhysicsParams":
        """Copy whose corrective block covers exactly ``n_frames`` (zero padded)."""
        c = np.zeros((max(n_frames - 1, 0), n_vertices, 3))
        if self.correctives is not None:
            k = min(c.shape[0], self.correctives.shape[0])
            c[:k] = self.correctives[:k]
        return replace(self, correctives=c)

    def copy(self) -> "PhysicsParams":
        return replace(self, stretch=self.stretch.copy(), bend=self.bend.copy(), wind=self.wind.copy(),
                       correctives=None if self.correctives is None else self.correctives.copy())


def default_params(n_frames: int | None = None, n_vertices: int | None = None) -> PhysicsParams:
    p = PhysicsParams()
    if n_frames is not None:
        p = p.with_frames(n_frames, n_vertices)
    return p


@dataclass(frozen=True)
class SimConfig:
    h: float = 1.0
    gravity: tuple = (0.0, 0.0, 0.0)  # m/step^2
    pinned: tuple = ()
    solver_tol: float = 1e-9
    solver_max_iter: int | None = None  # None -> 10 * 3|V|
    ground_height: float | None = None  # z of a ground plane, None disables it
    thickness: float = 1e-3  # collision margin for the ground plane

    def __post_init__(self):
        if not self.h > 0:
            raise ValueError("time step must be positive")
        object.__setattr__(self, "gravity", tuple(float(g) for g in self.gravity))
        object.__setattr__(self, "pinned", tuple(sorted(int(i) for i in set(self.pinned))))
        if len(self.gravity) != 3:
            raise ShapeMismatch("gravity must be a 3-vector")

    def validate(self, n_vertices: int):
        if self.pinned and (self.pinned[0] < 0 or self.pinned[-1] >= n_vertices):
            raise ValueError("pinned vertex index out of range")

    def max_iter(self, n_dof: int) -> int:
        return self.solver_max_iter if self.solver_max_iter is not None else 10 * n_dof


@dataclass(frozen=True, eq=False)
class CollisionObstacle:
    """Moving triangle mesh the cloth must stay outside of.

    ``positions``/``velocities`` have shape ``(T, No, 3)``, one entry per frame
    (index 0 is frame 1). Face winding defines the outside.
    """

    faces: np.ndarray
    positions: np.ndarray
    velocities: np.ndarray
    thickness: float = 1e-3
    max_depth: float = 0.05  # deeper points are not considered in contact

    def __post_init__(self):
        pos = np.asarray(self.positions, dtype=np.float64)
        vel = np.asarray(self.velocities, dtype=np.float64)
        if pos.ndim == 2:
            pos = pos[None]
        if vel.ndim == 2:
            vel = vel[None]
        if pos.shape != vel.shape or pos.shape[-1] != 3:
            raise ShapeMismatch("obstacle positions and velocities must both be (T, No, 3)")
        if not self.thickness > 0:
            raise ValueError("obstacle thickness must be positive")
        object.__setattr__(self, "faces", np.asarray(self.faces, dtype=np.int64))
        object.__setattr__(self, "positions", pos)
        object.__setattr__(self, "velocities", vel)

    def frame(self, t: int):
        """Obstacle geometry at (1-based) frame ``t``; the last frame is held."""
        k = min(max(t - 1, 0), self.positions.shape[0] - 1)
        return self.positions[k], self.velocities[k]

    @classmethod
    def static(cls, vertices, faces, thickness=1e-3, max_depth=0.05):
        v = np.asarray(vertices, dtype=np.float64)
        return cls(faces, v[None], np.zeros_like(v)[None], thickness, max_depth)
