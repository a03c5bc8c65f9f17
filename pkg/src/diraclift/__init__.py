"""Dirac symplectification lift for constrained, dissipative mechanics,
with a learned momentum-inpainting encoder and an exactly-symplectic step
predictor.

Modules:
    geometry      extended phase space, canonical form, gauge, analytic lift
    systems       benchmark mechanical systems and their ground truth
    integrators   RK4 + projection data generation, implicit midpoint step
    autodiff      minimal reverse-mode tape over numpy arrays
    nets          recurrent encoder, velocity head, symplectic modules
    training      flow-matching / one-step losses, Adam, rollout evaluation
    dataio        CSV + weight archives, run configuration, seeded RNG
    verification  property suites (canonical, pullback, symplecticity, ...)
    cli           file-to-file pipeline subcommands
"""

from . import (autodiff, cli, dataio, geometry, integrators, nets, systems,
               training, verification)
from .geometry import (LiftedPoint, LiftedTrajectory, PhasePoint, Trajectory,
                       canonical_form, dirac_lift, extended_hamiltonian,
                       gauge_residual, lifted_dimension, pullback_residual,
                       symplectic_pairing)
from .systems import (ControlSignal, DampedDrivenOscillator, MechanicalSystem,
                      PendulumOnCircle, TwoLinkPinned, constraint_multipliers,
                      dynamics_rhs, hamiltonian, nonconservative_power)

__version__ = "0.1.0"

__all__ = [
    "autodiff", "cli", "dataio", "geometry", "integrators", "nets", "systems",
    "training", "verification",
    "PhasePoint", "LiftedPoint", "Trajectory", "LiftedTrajectory",
    "canonical_form", "dirac_lift", "extended_hamiltonian", "gauge_residual",
    "lifted_dimension", "pullback_residual", "symplectic_pairing",
    "MechanicalSystem", "DampedDrivenOscillator", "PendulumOnCircle",
    "TwoLinkPinned", "ControlSignal", "hamiltonian", "constraint_multipliers",
    "dynamics_rhs", "nonconservative_power",
]
