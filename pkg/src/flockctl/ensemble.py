"""Ensemble state, controlled Cucker-Smale dynamics, moments and cost.

State arrays are agent-major: ``positions[i]`` and ``velocities[i]`` are the
``d``-vectors of agent ``i``. Controls are plain ``(N, d)`` arrays.
"""
import math
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .errors import InputError, NumericalBlowupError


@dataclass(frozen=True)
class SimParams:
    """Model and discretisation parameters.

    ``kernel_exponent`` is the exponent of the interaction kernel, not the
    kernel upper bound used by the variance estimates.
    """
    kernel_gain: float = 1.0
    kernel_exponent: float = 1.0
    gamma: float = 0.1
    horizon: float = 10.0
    dt: float = 0.01
    target_velocity: tuple = None
    integrator: str = "euler"

    def __post_init__(self):
        if not self.kernel_gain > 0:
            raise InputError("kernel_gain must be > 0")
        if not self.kernel_exponent >= 0:
            raise InputError("kernel_exponent must be >= 0")
        if not self.gamma > 0:
            raise InputError("gamma must be > 0")
        if not (self.horizon > 0 and self.dt > 0):
            raise InputError("horizon and dt must be > 0")
        if self.dt > self.horizon * (1 + 1e-12):
            raise InputError("dt must not exceed the horizon")
        if self.integrator not in ("euler", "rk4"):
            raise InputError(f"unknown integrator {self.integrator!r}")

    @property
    def n_steps(self):
        return max(1, int(round(self.horizon / self.dt)))

    def target(self, d):
        if self.target_velocity is None:
            return np.zeros(d)
        t = np.asarray(self.target_velocity, dtype=float)
        if t.shape != (d,):
            raise InputError(f"target_velocity must have shape ({d},)")
        return t


@dataclass(frozen=True)
class EnsembleState:
    positions: np.ndarray
    velocities: np.ndarray
    time: float = 0.0

    def __post_init__(self):
        x = np.array(self.positions, dtype=float)
        v = np.array(self.velocities, dtype=float)
        if x.ndim == 1:
            x = x[:, None]
        if v.ndim == 1:
            v = v[:, None]
        if x.ndim != 2 or x.shape != v.shape or x.shape[0] < 1 or x.shape[1] < 1:
            raise InputError(f"positions {x.shape} and velocities {v.shape} must be equal N x d arrays")
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(v))):
            raise InputError("state contains non-finite entries")
        if not (math.isfinite(self.time) and self.time >= 0):
            raise InputError("time must be finite and >= 0")
        x.flags.writeable = False
        v.flags.writeable = False
        object.__setattr__(self, "positions", x)
        object.__setattr__(self, "velocities", v)
        object.__setattr__(self, "time", float(self.time))

    @property
    def n_agents(self):
        return self.positions.shape[0]

    @property
    def dim(self):
        return self.positions.shape[1]

    @classmethod
    def consensus(cls, positions, velocity, time=0.0):
        x = np.asarray(positions, dtype=float)
        v = np.broadcast_to(np.asarray(velocity, dtype=float), x.shape)
        return cls(x, v, time)


@dataclass
class MomentTrace:
    """Per-step empirical moments.

    ``variance`` is measured about the fixed target velocity,
    ``variance_about_mean`` about the instantaneous mean.
    """
    times: np.ndarray
    mean_velocity: np.ndarray
    variance: np.ndarray
    variance_about_mean: np.ndarray


@dataclass
class Trajectory:
    times: np.ndarray            # (n+1,)
    positions: np.ndarray        # (n+1, N, d)
    velocities: np.ndarray       # (n+1, N, d)
    controls: np.ndarray         # (n, N, d)
    cost_accumulated: float = 0.0
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.times)

    def state(self, h):
        return EnsembleState(self.positions[h], self.velocities[h], self.times[h])

    @property
    def states(self):
        return [self.state(h) for h in range(len(self))]

    @property
    def final_state(self):
        return self.state(len(self) - 1)


def kernel_eval(r, params=SimParams()):
    """Cucker-Smale kernel ``K / (1 + r^2)^beta``."""
    r = float(r)
    if not (math.isfinite(r) and r >= 0):
        raise InputError(f"kernel distance must be finite and >= 0, got {r}")
    return params.kernel_gain / (1.0 + r * r) ** params.kernel_exponent


def mean_velocity(state):
    return state.velocities.mean(axis=0)


def velocity_variance(state, target=None):
    """``(1/N) sum_i |v_i - target|^2``; ``target`` defaults to zero."""
    v = state.velocities
    t = np.zeros(v.shape[1]) if target is None else np.asarray(target, dtype=float)
    return float(np.mean(np.sum((v - t) ** 2, axis=1)))


def variance_about_mean(state):
    return velocity_variance(state, mean_velocity(state))


def _check_control(control, shape):
    if control is None:
        return np.zeros(shape)
    u = np.asarray(control, dtype=float)
    if u.shape != shape:
        raise InputError(f"control shape {u.shape} does not match state {shape}")
    return u


def drift_arrays(x, v, u, params):
    """Rates ``(xdot, vdot)`` for raw arrays; ``u`` may be ``None``."""
    vdot = kernels.alignment(x, v, params.kernel_gain, params.kernel_exponent)
    if u is not None:
        vdot = vdot + u
    return v, vdot


def drift(state, control, params):
    u = _check_control(control, state.positions.shape)
    xdot, vdot = drift_arrays(state.positions, state.velocities, u, params)
    return xdot.copy(), vdot


def step_arrays(x, v, u, params, dt=None):
    """One integrator step on raw arrays; control is held over the step."""
    h = params.dt if dt is None else dt
    if params.integrator == "euler":
        xd, vd = drift_arrays(x, v, u, params)
        return x + h * xd, v + h * vd
    k1x, k1v = drift_arrays(x, v, u, params)
    k2x, k2v = drift_arrays(x + 0.5 * h * k1x, v + 0.5 * h * k1v, u, params)
    k3x, k3v = drift_arrays(x + 0.5 * h * k2x, v + 0.5 * h * k2v, u, params)
    k4x, k4v = drift_arrays(x + h * k3x, v + h * k3v, u, params)
    return (x + h / 6.0 * (k1x + 2 * k2x + 2 * k3x + k4x),
            v + h / 6.0 * (k1v + 2 * k2v + 2 * k3v + k4v))


def step(state, control, params):
    u = _check_control(control, state.positions.shape)
    with np.errstate(over="ignore", invalid="ignore"):
        x, v = step_arrays(state.positions, state.velocities, u, params)
    t = state.time + params.dt
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(v))):
        raise NumericalBlowupError(f"non-finite state at t={t:.6g}", time=t)
    return EnsembleState(x, v, t)


def running_cost(v, u, gamma):
    """Integrand of the consensus cost at one time instant."""
    dev = v - v.mean(axis=0)
    val = np.sum(dev * dev)
    if u is not None:
        val += gamma * np.sum(u * u)
    return val / v.shape[0]


class Recorder:
    """Accumulates a rollout on the uniform grid and builds the outputs."""

    def __init__(self, state0, params):
        self.params = params
        n, N, d = params.n_steps, state0.n_agents, state0.dim
        self.target = params.target(d)
        self.times = state0.time + params.dt * np.arange(n + 1)
        self.x = np.empty((n + 1, N, d))
        self.v = np.empty((n + 1, N, d))
        self.u = np.empty((n, N, d))
        self.x[0] = state0.positions
        self.v[0] = state0.velocities
        self.h = 0
        self.cost = 0.0

    @property
    def n_steps(self):
        return self.u.shape[0]

    def current(self):
        return self.x[self.h], self.v[self.h]

    def advance(self, u):
        """Apply control ``u`` over the current step and store the new state."""
        h = self.h
        x, v = self.x[h], self.v[h]
        self.u[h] = u
        self.cost += self.params.dt * running_cost(v, u, self.params.gamma)
        with np.errstate(over="ignore", invalid="ignore"):
            xn, vn = step_arrays(x, v, u, self.params)
        if not (np.all(np.isfinite(xn)) and np.all(np.isfinite(vn))):
            raise NumericalBlowupError(f"non-finite state at t={self.times[h + 1]:.6g}", time=self.times[h + 1])
        self.x[h + 1] = xn
        self.v[h + 1] = vn
        self.h = h + 1
        return xn, vn

    def finish(self):
        traj = Trajectory(self.times, self.x, self.v, self.u, float(self.cost))
        return traj, moments_of(traj, self.target)


def moments_of(traj, target=None):
    v = traj.velocities
    t = np.zeros(v.shape[2]) if target is None else np.asarray(target, dtype=float)
    vbar = v.mean(axis=1)
    var = np.mean(np.sum((v - t) ** 2, axis=2), axis=1)
    var_m = np.mean(np.sum((v - vbar[:, None, :]) ** 2, axis=2), axis=1)
    return MomentTrace(traj.times.copy(), vbar, var, var_m)


def simulate(state0, feedback, params):
    """Closed-loop rollout on ``[t0, t0 + T]``.

    ``feedback`` maps an :class:`EnsembleState` to an ``(N, d)`` control, or
    is ``None`` for the uncontrolled system. Returns ``(Trajectory,
    MomentTrace)``; the cost uses the left-rectangle rule.
    """
    rec = Recorder(state0, params)
    shape = state0.positions.shape
    zero = np.zeros(shape)
    for h in range(rec.n_steps):
        x, v = rec.current()
        if feedback is None:
            u = zero
        else:
            u = _check_control(feedback(EnsembleState(x, v, rec.times[h])), shape)
        rec.advance(u)
    return rec.finish()


def total_cost(traj, params):
    gamma = params.gamma
    dt = params.dt
    return float(sum(dt * running_cost(traj.velocities[h], traj.controls[h], gamma)
                     for h in range(traj.controls.shape[0])))


def random_state(rng, n_agents, dim, position_box=(0.0, 1.0), velocity_box=(0.0, 1.0)):
    x = rng.uniform(position_box[0], position_box[1], size=(n_agents, dim))
    v = rng.uniform(velocity_box[0], velocity_box[1], size=(n_agents, dim))
    return EnsembleState(x, v, 0.0)
