"""Differentiable cloth simulator: forces, implicit integration and contacts."""
from .collision import ConstraintSet, collision_response, project_gradient
from .forces import (ClothModel, ForceAssembly, assemble_system, bending_forces, external_forces, mass_matrix,
                     model_for, stretching_forces)
from .integrator import StepTape, simulate, step
from .params import (AIR_DENSITY, DIHEDRAL_SAMPLES, STRAIN_SAMPLES, CollisionObstacle, PhysicsParams, SimConfig,
                     default_params)
from .solver import pcg

__all__ = [
    "AIR_DENSITY", "DIHEDRAL_SAMPLES", "STRAIN_SAMPLES", "ClothModel", "CollisionObstacle", "ConstraintSet",
    "ForceAssembly", "PhysicsParams", "SimConfig", "StepTape", "assemble_system", "bending_forces",
    "collision_response", "default_params", "external_forces", "mass_matrix", "model_for", "pcg",
    "project_gradient", "simulate", "step", "stretching_forces",
]
