"""Optimal and suboptimal consensus control of Cucker-Smale ensembles.

Modules:

* ``ensemble``: state, controlled dynamics, moments, cost, rollouts
* ``pmp``: open-loop optimal control by adjoint gradient descent
* ``sdre``: state-dependent Riccati feedback and frozen-Riccati MPC
* ``mdpc``: moment-driven predictive control with variance bounds
* ``surrogate``: supervised feedback surrogates (u-models and V-models)
* ``harness`` / ``cli``: experiments, reproduction pipelines, benchmark
"""
from ._jit import USE_NUMBA
from .ensemble import (EnsembleState, MomentTrace, SimParams, Trajectory, kernel_eval, mean_velocity,
                       random_state, simulate, step, total_cost, velocity_variance)
from .errors import (CareConvergenceError, FlockctlError, InputError, NumericalBlowupError,
                     TrainingDivergenceError)

__version__ = "0.1.0"

__all__ = [
    "USE_NUMBA", "EnsembleState", "MomentTrace", "SimParams", "Trajectory", "kernel_eval", "mean_velocity",
    "random_state", "simulate", "step", "total_cost", "velocity_variance", "CareConvergenceError",
    "FlockctlError", "InputError", "NumericalBlowupError", "TrainingDivergenceError",
]
