"""Open-loop optimal control by forward-backward sweeps and reduced gradients.

The control is a grid function ``u[h]`` held constant on ``[t_h, t_{h+1})``.
The cost is the left-rectangle discretisation of the consensus cost along the
explicit-Euler trajectory, and the costates are the exact discrete adjoints of
that scheme, so the reduced gradient is exact for the discrete problem:

    dJ/du[h] = dt * ((2 gamma / N) u[h] + q[h + 1])

The costate arrays ``p, q`` have ``n + 1`` entries; entry ``h`` belongs to
the state at ``t_h`` and entry ``n`` is the terminal value ``(0, 0)``.
"""
import logging
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .ensemble import EnsembleState
from .errors import InputError, NumericalBlowupError

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class GradientSolverConfig:
    max_iters: int = 300
    initial_step: float = 1.0
    armijo_factor: float = 0.5
    sufficient_decrease: float = 1e-4
    grad_tolerance: float = 1e-6
    max_backtracks: int = 60
    # Barzilai-Borwein trial steps, still subject to the Armijo test.
    bb_steps: bool = True

    def __post_init__(self):
        if self.max_iters < 0 or not self.initial_step > 0 or not self.grad_tolerance > 0:
            raise InputError("max_iters >= 0, initial_step > 0 and grad_tolerance > 0 required")
        if not 0 < self.armijo_factor < 1:
            raise InputError("armijo_factor must lie in (0, 1)")


@dataclass
class AdjointState:
    p: np.ndarray
    q: np.ndarray


@dataclass
class OpenLoopSolution:
    times: np.ndarray
    positions: np.ndarray
    velocities: np.ndarray
    controls: np.ndarray
    p: np.ndarray
    q: np.ndarray
    cost: float
    initial_gradient: np.ndarray
    iterations: int = 0
    converged: bool = False
    cost_history: list = field(default_factory=list)
    grad_norm: float = float("nan")

    def adjoint(self, h):
        return AdjointState(self.p[h], self.q[h])


def forward_sweep(state0, controls, params):
    """Euler rollout under fixed grid controls.

    Returns ``(positions, velocities, cost)`` with ``n + 1`` states.
    """
    controls = np.asarray(controls, dtype=float)
    if controls.ndim != 3 or controls.shape[1:] != state0.positions.shape:
        raise InputError("controls must have shape (n, N, d)")
    xs, vs, cost = kernels.euler_sweep(state0.positions, state0.velocities, controls, params.dt,
                                       params.kernel_gain, params.kernel_exponent, params.gamma)
    if not np.all(np.isfinite(vs[-1])) or not np.all(np.isfinite(xs[-1])):
        raise NumericalBlowupError("forward sweep produced non-finite states")
    return xs, vs, cost


def objective(state0, controls, params):
    return forward_sweep(state0, controls, params)[2]


def backward_sweep(positions, velocities, controls, params):
    """Discrete adjoint recursion from ``(p, q)(T) = (0, 0)``.

    ``lambda_h = lambda_{h+1} + dt * (J_h^T lambda_{h+1} + grad l_h)`` with the
    Jacobian of the alignment drift derived from the controlled dynamics.
    """
    if controls.shape[0] + 1 != positions.shape[0]:
        raise InputError("positions must have one more entry than controls")
    p, q = kernels.adjoint_sweep(positions, velocities, params.dt, params.kernel_gain, params.kernel_exponent)
    if not (np.all(np.isfinite(p[0])) and np.all(np.isfinite(q[0]))):
        raise NumericalBlowupError("backward sweep produced non-finite costates")
    return p, q


def control_gradient(controls, q, params):
    """Gradient density ``(2 gamma / N) u + q`` per step.

    ``q`` is either the full costate trajectory (``n + 1`` entries, the one
    from :func:`backward_sweep`) or already aligned with the controls.
    """
    N = controls.shape[1]
    if q.shape[0] == controls.shape[0] + 1:
        q = q[1:]
    return (2.0 * params.gamma / N) * controls + q


def _l2(a, b, dt):
    return dt * float(np.vdot(a, b))


def solve_pmp(state0, params, config=GradientSolverConfig(), initial_controls=None):
    """Reduced-gradient descent with Armijo backtracking from ``u = 0``.

    Non-convergence is reported through ``converged=False`` on the result.
    """
    n = params.n_steps
    N, d = state0.positions.shape
    dt = params.dt
    u = np.zeros((n, N, d)) if initial_controls is None else np.array(initial_controls, dtype=float)
    xs, vs, J = forward_sweep(state0, u, params)
    p, q = backward_sweep(xs, vs, u, params)
    g = control_gradient(u, q, params)
    history = [J]
    step = config.initial_step
    prev_u = prev_g = None
    converged = False
    it = 0
    gnorm = float(np.max(np.abs(g))) if g.size else 0.0
    while True:
        if gnorm <= config.grad_tolerance:
            converged = True
            break
        if it >= config.max_iters:
            break
        if config.bb_steps and prev_u is not None:
            du, dg = u - prev_u, g - prev_g
            curv = float(np.vdot(du, dg))
            if curv > 0:
                step = float(np.vdot(du, du)) / curv
        slope = _l2(g, g, dt)
        accepted = False
        for _ in range(config.max_backtracks):
            trial = u - step * g
            xt, vt, Jt = forward_sweep(state0, trial, params)
            if Jt <= J - config.sufficient_decrease * step * slope:
                accepted = True
                break
            step *= config.armijo_factor
        if not accepted:
            log.warning("Armijo line search failed at iteration %d (J=%.6g)", it, J)
            break
        prev_u, prev_g = u, g
        u, xs, vs, J = trial, xt, vt, Jt
        p, q = backward_sweep(xs, vs, u, params)
        g = control_gradient(u, q, params)
        gnorm = float(np.max(np.abs(g)))
        history.append(J)
        it += 1
        if not config.bb_steps:
            step = min(step / config.armijo_factor, 1e6)
    if not converged:
        log.warning("solve_pmp stopped after %d iterations, |grad|_inf=%.3g", it, gnorm)
    return OpenLoopSolution(
        times=state0.time + dt * np.arange(n + 1),
        positions=xs, velocities=vs, controls=u, p=p, q=q, cost=float(J),
        initial_gradient=np.concatenate([p[0].ravel(), q[0].ravel()]),
        iterations=it, converged=converged, cost_history=history, grad_norm=gnorm)


def extract_sample(sol):
    """Training labels ``(u0, V, gradV)`` from an extremal.

    ``gradV`` uses the flat layout ``(x_1, ..., x_N, v_1, ..., v_N)`` with the
    coordinates of each agent contiguous.
    """
    return sol.controls[0].copy(), float(sol.cost), sol.initial_gradient.copy()


def open_loop_feedback(sol):
    """Feedback that replays the open-loop control on its own grid."""
    t0 = sol.times[0]
    dt = sol.times[1] - sol.times[0]
    n = sol.controls.shape[0]

    def feedback(state):
        h = min(max(int(round((state.time - t0) / dt)), 0), n - 1)
        return sol.controls[h]
    return feedback


def receding_horizon_feedback(params, config=GradientSolverConfig(), replan_steps=None):
    """Replans the open-loop problem every ``replan_steps`` steps.

    With ``replan_steps=None`` one solve over the whole horizon is replayed.
    Each replan solves over the full horizon ``T`` from the current state.
    """
    cache = {}

    def feedback(state):
        h = int(round(state.time / params.dt))
        start = cache.get("start")
        if start is None or (replan_steps is not None and h - start >= replan_steps):
            sol = solve_pmp(EnsembleState(state.positions, state.velocities, 0.0), params, config,
                            initial_controls=cache.get("warm"))
            cache.update(start=h, sol=sol)
            if replan_steps is not None:
                warm = np.concatenate([sol.controls[replan_steps:],
                                       np.zeros((min(replan_steps, sol.controls.shape[0]),) + sol.controls.shape[1:])])
                cache["warm"] = warm
        k = min(h - cache["start"], cache["sol"].controls.shape[0] - 1)
        return cache["sol"].controls[k]
    return feedback
