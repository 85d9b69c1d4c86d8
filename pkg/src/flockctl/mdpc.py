"""Moment-driven predictive control.

A linearisation of the alignment term around the consensus equilibrium with
kernel value ``pbar`` gives ``w' = P w + u``. Its Riccati gain matrix is fully
described by a diagonal and an off-diagonal scalar, ``kd(t)`` and ``ko(t)``,
obtained from two coupled scalar ODEs. The resulting open-loop control is
applied to the nonlinear ensemble, and the linear model is re-anchored to
measured velocities whenever the predicted spread of the variance bounds
exceeds a tolerance.

Throughout, ``nu`` is the control weight of the reduced ODEs; the controller
uses ``nu = gamma``.
"""
from dataclasses import dataclass, field

import numpy as np

from .ensemble import Recorder, SimParams, velocity_variance
from .errors import InputError, NumericalBlowupError


@dataclass
class ReducedGains:
    times: np.ndarray
    kd: np.ndarray
    ko: np.ndarray
    pbar: float
    nu: float

    @property
    def dt(self):
        return self.times[1] - self.times[0]

    def index(self, t):
        if t < self.times[0] - 1e-9 or t > self.times[-1] + 1e-9:
            raise InputError(f"t={t} outside [{self.times[0]}, {self.times[-1]}]")
        return int(min(max(round((t - self.times[0]) / self.dt), 0), len(self.times) - 1))

    def at(self, t):
        h = self.index(t)
        return self.kd[h], self.ko[h]


@dataclass(frozen=True)
class BoundParams:
    """Kernel range ``[-alpha_low, beta_up]`` used by the variance bounds.

    ``eta_decay`` multiplies ``pbar`` in the decay factor ``eta`` of the
    linear model. The bounds act on the standard deviation, whose linear-model
    decay rate is ``pbar + kd/nu``, hence the default 1; pass 2 for the
    variance-rate variant.
    """
    alpha_low: float = 0.0
    beta_up: float = 1.0
    eta_decay: float = 1.0

    def __post_init__(self):
        if self.alpha_low < 0 or self.beta_up < 0:
            raise InputError("kernel bounds must be >= 0")


@dataclass(frozen=True)
class MdpcConfig:
    delta_tol: float = 0.1
    params: SimParams = SimParams()
    pbar: float = None

    def __post_init__(self):
        if not self.delta_tol > 0:
            raise InputError("delta_tol must be > 0")

    @property
    def kernel_at_zero(self):
        return self.params.kernel_gain if self.pbar is None else self.pbar


@dataclass
class UpdateLog:
    update_times: list = field(default_factory=list)
    update_steps: list = field(default_factory=list)

    def __len__(self):
        return len(self.update_times)


@dataclass
class MdpcResult:
    trajectory: object
    updates: UpdateLog
    moments: object
    lower: np.ndarray
    upper: np.ndarray
    gains: ReducedGains

    def __iter__(self):
        return iter((self.trajectory, self.updates, self.moments))


def build_P(N, pbar):
    if N < 1 or not pbar > 0:
        raise InputError("N >= 1 and pbar > 0 required")
    P = np.full((N, N), pbar / N)
    np.fill_diagonal(P, pbar * (1 - N) / N)
    return P


def _reduced_rhs(kd, ko, N, pbar, nu):
    """Time derivatives ``(kd', ko')``."""
    al = (N - 1) / N
    m = kd - ko / N
    dkd = 2 * pbar * al * m + (kd * kd + al / N * ko * ko) / nu - 1.0
    dko = -2 * pbar * m + (2 * kd * ko + al * ko * ko - ko * ko / N) / nu
    return dkd, dko


def solve_reduced_riccati(T, dt, N, pbar, nu):
    """Backward RK4 for ``kd, ko`` from ``kd(T) = ko(T) = 0``."""
    if not (T > 0 and dt > 0 and N >= 1 and pbar > 0 and nu > 0):
        raise InputError("positive T, dt, N, pbar, nu required")
    n = max(1, int(round(T / dt)))
    h = T / n
    kd = np.zeros(n + 1)
    ko = np.zeros(n + 1)
    a, b = 0.0, 0.0
    for k in range(n, 0, -1):
        # integrate in reversed time s = T - t, so d/ds = -d/dt
        k1 = _reduced_rhs(a, b, N, pbar, nu)
        k2 = _reduced_rhs(a - 0.5 * h * k1[0], b - 0.5 * h * k1[1], N, pbar, nu)
        k3 = _reduced_rhs(a - 0.5 * h * k2[0], b - 0.5 * h * k2[1], N, pbar, nu)
        k4 = _reduced_rhs(a - h * k3[0], b - h * k3[1], N, pbar, nu)
        a = a - h / 6 * (k1[0] + 2 * k2[0] + 2 * k3[0] + k4[0])
        b = b - h / 6 * (k1[1] + 2 * k2[1] + 2 * k3[1] + k4[1])
        if not (np.isfinite(a) and np.isfinite(b)):
            raise NumericalBlowupError(f"reduced Riccati blew up at t={(k - 1) * h:.6g}", time=(k - 1) * h)
        kd[k - 1], ko[k - 1] = a, b
    return ReducedGains(np.linspace(0.0, T, n + 1), kd, ko, float(pbar), float(nu))


def expand_K22(gains, t, N):
    """Full ``N x N`` gain: ``kd/N`` on the diagonal, ``ko/N^2`` elsewhere."""
    kd, ko = gains.at(t)
    K = np.full((N, N), ko / N ** 2)
    np.fill_diagonal(K, kd / N)
    return K


def riccati_feedback(gains, t, velocities, gamma, target=None):
    """Linear-model feedback from the reduced gains (nearest grid node)."""
    w = np.asarray(velocities, dtype=float)
    if target is not None:
        w = w - target
    kd, ko = gains.at(t)
    N = w.shape[0]
    return -((kd - ko / N) * w + (ko / N) * w.sum(axis=0)) / gamma


def _cumtrapz(y, dx):
    out = np.empty_like(y)
    out[0] = 0.0
    np.cumsum(0.5 * dx * (y[1:] + y[:-1]), out=out[1:])
    return out


def variance_bound_curves(h0, sigma2_t0, gains, bounds, pbar=None, nu=None):
    """Lower and upper variance bounds on the grid from node ``h0`` to ``T``.

    Integrals run over the elapsed time ``s in [0, t - t0]`` with integrands
    shifted to ``t0 + s`` and are evaluated by the trapezoid rule. The lower
    bound is clipped at zero once ``B+`` exceeds one.
    Returns ``(elapsed, lower, upper)``.
    """
    pbar = gains.pbar if pbar is None else pbar
    nu = gains.nu if nu is None else nu
    dt = gains.dt
    kd = gains.kd[h0:]
    s = dt * np.arange(kd.size)
    eta = np.exp(-bounds.eta_decay * pbar * s - _cumtrapz(kd, dt) / nu)
    a, b = bounds.alpha_low, bounds.beta_up
    b_plus = _cumtrapz(eta * kd * np.exp(b * s), dt) / nu
    b_minus = _cumtrapz(eta * kd * np.exp(-a * s), dt) / nu
    lower = sigma2_t0 * np.exp(-2.0 * b * s) * np.clip(1.0 - b_plus, 0.0, None) ** 2
    upper = sigma2_t0 * np.exp(2.0 * a * s) * (1.0 + b_minus) ** 2
    return s, lower, upper


def variance_bounds(t0, t, sigma2_t0, gains, bounds, pbar=None, nu=None):
    """``(lower, upper)`` bound on the variance at ``t`` given its value at ``t0``."""
    if t < t0:
        raise InputError("t must be >= t0")
    if sigma2_t0 < 0:
        raise InputError("sigma2_t0 must be >= 0")
    h0, h1 = gains.index(t0), gains.index(t)
    _, lo, up = variance_bound_curves(h0, sigma2_t0, gains, bounds, pbar, nu)
    return float(lo[h1 - h0]), float(up[h1 - h0])


def variance_gap(t0, t, sigma2_t0, gains, bounds, pbar=None, nu=None):
    lo, up = variance_bounds(t0, t, sigma2_t0, gains, bounds, pbar, nu)
    return up - lo


def _next_trigger(h0, sigma2, gains, bounds, delta_tol):
    s, lo, up = variance_bound_curves(h0, sigma2, gains, bounds)
    hit = np.flatnonzero((up - lo)[1:] > delta_tol)
    nxt = None if hit.size == 0 else h0 + 1 + int(hit[0])
    return nxt, lo, up


def run_mdpc(state0, config, bounds=BoundParams(), gains=None):
    """Adaptive re-linearisation loop.

    The control at every step is computed from the linear shadow model and
    applied unchanged to the nonlinear ensemble. At each trigger time the
    shadow velocities are reset to the measured ones and the next trigger is
    predicted from the measured variance about the target.
    """
    params = config.params
    if params.integrator != "euler":
        raise InputError("run_mdpc uses explicit Euler stepping")
    N, d = state0.positions.shape
    pbar = config.kernel_at_zero
    if gains is None:
        gains = solve_reduced_riccati(params.horizon, params.dt, N, pbar, params.gamma)
    rec = Recorder(state0, params)
    n = rec.n_steps
    if gains.kd.size != n + 1:
        raise InputError("gain grid must match the simulation grid")
    target = rec.target
    P = build_P(N, pbar)
    w = state0.velocities - target
    z = state0.positions.copy()
    lower = np.empty(n + 1)
    upper = np.empty(n + 1)
    log = UpdateLog()
    sigma2 = velocity_variance(state0, target)
    nxt, lo, up = _next_trigger(0, sigma2, gains, bounds, config.delta_tol)
    lower[:], upper[:] = lo, up
    dt = params.dt
    for h in range(n + 1):
        x, v = rec.current()
        if h == nxt:
            w = v - target
            t = rec.times[h]
            log.update_times.append(float(t - state0.time))
            log.update_steps.append(h)
            sigma2 = float(np.mean(np.sum(w * w, axis=1)))
            nxt, lo, up = _next_trigger(h, sigma2, gains, bounds, config.delta_tol)
            lower[h:], upper[h:] = lo, up
        if h == n:
            break
        u = riccati_feedback(gains, rec.times[h] - state0.time, w, params.gamma)
        rec.advance(u)
        z = z + dt * w
        w = w + dt * (P @ w + u)
    traj, moments = rec.finish()
    traj.meta["update_times"] = list(log.update_times)
    return MdpcResult(traj, log, moments, lower, upper, gains)
