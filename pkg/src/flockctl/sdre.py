"""State-dependent Riccati feedback for the Cucker-Smale consensus problem.

Flat vectors use the layout ``(x_1, ..., x_N, v_1, ..., v_N)`` with the ``d``
coordinates of each agent contiguous, so a velocity block index is
``i * d + c``.

Because the control enters only the velocities and the cost weighs only
velocity deviations, the full Riccati solution has zero position blocks and
only the ``dN x dN`` velocity block ``Pi`` is computed. The consensus
directions ``1_N (x) e_c`` are unobservable and marginally stable, so the
velocity CARE is solved on their orthogonal complement and ``Pi`` vanishes on
them.
"""
import functools
from dataclasses import dataclass

import numpy as np
import scipy.linalg

from . import kernels
from .ensemble import EnsembleState, Recorder, SimParams
from .errors import CareConvergenceError, InputError


@dataclass
class SemilinearOperators:
    A_vel: np.ndarray
    Q_vel: np.ndarray
    R: np.ndarray


@dataclass
class CareSolution:
    Pi_vel: np.ndarray
    residual_norm: float
    iterations: int = 0
    closed_loop_abscissa: float = float("nan")


def flatten_state(state):
    return np.concatenate([state.positions.ravel(), state.velocities.ravel()])


def unflatten_state(s, n_agents, dim, time=0.0):
    s = np.asarray(s, dtype=float)
    m = n_agents * dim
    if s.shape != (2 * m,):
        raise InputError(f"flat state must have length {2 * m}")
    return EnsembleState(s[:m].reshape(n_agents, dim), s[m:].reshape(n_agents, dim), time)


def laplacian(state, params):
    """``N x N`` alignment matrix ``L`` with ``L v = drift`` per coordinate."""
    W = kernels.kernel_matrix(state.positions, params.kernel_gain, params.kernel_exponent)
    N = W.shape[0]
    np.fill_diagonal(W, 0.0)
    L = W - np.diag(W.sum(axis=1))
    return L / N


def build_A_vel(state, params):
    """Velocity block of the semilinear factorisation, ``A_vel vec(v) = drift``."""
    return np.kron(laplacian(state, params), np.eye(state.dim))


def averaging_operator(N, d):
    return np.kron(np.full((N, N), 1.0 / N), np.eye(d))


def build_cost_operators(N, d, gamma):
    """``(Q_vel, R)`` with ``v^T Q_vel v = (1/N) sum_i |v_i - vbar|^2``."""
    if N < 1 or d < 1:
        raise InputError("N and d must be >= 1")
    n = N * d
    C = averaging_operator(N, d)
    Q = (np.eye(n) + C.T @ C - 2 * C) / N
    Q = 0.5 * (Q + Q.T)
    R = (gamma / N) * np.eye(n)
    return Q, R


@functools.lru_cache(maxsize=32)
def consensus_complement(N, d):
    """Orthonormal basis ``(dN, d(N-1))`` of the complement of consensus."""
    U = scipy.linalg.null_space(np.ones((1, N)))
    return np.kron(U, np.eye(d))


def _lyapunov(F, M):
    """Solve ``F^T X + X F = -M``.

    Symmetric ``F`` goes through an eigendecomposition, anything else through
    Bartels-Stewart.
    """
    if np.allclose(F, F.T, rtol=0, atol=1e-14 * max(1.0, np.abs(F).max())):
        lam, V = np.linalg.eigh(0.5 * (F + F.T))
        Mt = V.T @ M @ V
        X = V @ (-Mt / (lam[:, None] + lam[None, :])) @ V.T
    else:
        X = scipy.linalg.solve_continuous_lyapunov(F.T, -M)
    return 0.5 * (X + X.T)


def care_residual(A, Pi, Q, S):
    return A.T @ Pi + Pi @ A - Pi @ S @ Pi + Q


def solve_care(A, Q, R, B=None, tol=1e-9, max_iter=60, initial=None, basis=None):
    """Newton-Kleinman iteration for ``A^T P + P A - P B R^-1 B^T P + Q = 0``.

    ``basis`` restricts the solve to an ``A``-invariant subspace spanned by
    orthonormal columns; the returned matrix vanishes on its complement.
    ``initial`` must be stabilising; without it a shifted multiple of ``R`` is
    used (``B`` = identity) or zero for Hurwitz ``A``.
    """
    A = np.atleast_2d(np.asarray(A, dtype=float))
    Q = np.atleast_2d(np.asarray(Q, dtype=float))
    R = np.atleast_2d(np.asarray(R, dtype=float))
    n = A.shape[0]
    B = np.eye(n) if B is None else np.atleast_2d(np.asarray(B, dtype=float))
    S = B @ np.linalg.solve(R, B.T)
    S = 0.5 * (S + S.T)
    if basis is not None:
        U = basis
        Ar, Qr, Sr = U.T @ A @ U, U.T @ Q @ U, U.T @ S @ U
        P = None if initial is None else U.T @ initial @ U
    else:
        Ar, Qr, Sr, P = A, Q, S, initial
    m = Ar.shape[0]
    if P is None:
        abscissa = np.max(np.linalg.eigvals(Ar).real) if m else 0.0
        if abscissa < 0:
            P = np.zeros((m, m))
        elif np.allclose(Sr, np.diag(np.diag(Sr))) and np.all(np.diag(Sr) > 0):
            P = np.diag((abscissa + 1.0) / np.diag(Sr))
        else:
            raise InputError("a stabilising initial guess is required for this B")
    res = np.inf
    it = 0
    for it in range(1, max_iter + 1):
        F = Ar - Sr @ P
        P = _lyapunov(F, Qr + P @ Sr @ P)
        res = np.linalg.norm(care_residual(Ar, P, Qr, Sr))
        if not np.isfinite(res):
            break
        if res <= tol:
            break
    Pi = U @ P @ U.T if basis is not None else P
    Pi = 0.5 * (Pi + Pi.T)
    full_res = float(np.linalg.norm(care_residual(A, Pi, Q, S)))
    if not full_res <= tol:
        raise CareConvergenceError(f"CARE residual {full_res:.3e} above tolerance {tol:.1e}", residual=full_res)
    abscissa = float(np.max(np.linalg.eigvals(A - S @ Pi).real))
    return CareSolution(Pi, full_res, it, abscissa)


def averaged_initial_guess(state, params):
    """Exact CARE solution for the constant averaged-kernel matrix.

    Its closed loop is stable for every connected alignment graph, which
    makes it a valid Newton-Kleinman start for any state.
    """
    N, d = state.positions.shape
    if N == 1:
        return np.zeros((d, d))
    W = kernels.kernel_matrix(state.positions, params.kernel_gain, params.kernel_exponent)
    pbar = (W.sum() - np.trace(W)) / (N * (N - 1))
    r = params.gamma / N
    q = 1.0 / N
    pi = r * (-pbar + np.sqrt(pbar ** 2 + q / r))
    C = averaging_operator(N, d)
    return pi * (np.eye(N * d) - C)


def solve_state_care(state, params, tol=1e-9, initial=None):
    """Frozen velocity CARE at ``state``."""
    N, d = state.positions.shape
    A = build_A_vel(state, params)
    Q, R = build_cost_operators(N, d, params.gamma)
    if N == 1:
        return CareSolution(np.zeros((d, d)), 0.0, 0, 0.0)
    if initial is None:
        initial = averaged_initial_guess(state, params)
    return solve_care(A, Q, R, tol=tol, initial=initial, basis=consensus_complement(N, d))


def sdre_feedback(state, params, care):
    """``u = -R^-1 Pi_vel vec(v)`` reshaped to ``(N, d)``."""
    N = state.n_agents
    u = -(N / params.gamma) * (care.Pi_vel @ state.velocities.ravel())
    return u.reshape(state.positions.shape)


def frozen_sdre_mpc(state0, params, refresh_steps=1, tol=1e-9):
    """Frozen-Riccati receding horizon loop.

    The CARE is re-solved every ``refresh_steps`` steps at the current state
    (warm-started from the previous solution) and the resulting gain is held
    in between. Returns ``(Trajectory, MomentTrace)``.
    """
    if refresh_steps < 1:
        raise InputError("refresh_steps must be >= 1")
    rec = Recorder(state0, params)
    care = None
    n_solves = 0
    for h in range(rec.n_steps):
        x, v = rec.current()
        st = EnsembleState(x, v, rec.times[h])
        if h % refresh_steps == 0:
            try:
                care = solve_state_care(st, params, tol=tol,
                                        initial=None if care is None else care.Pi_vel)
            except CareConvergenceError as exc:
                exc.time = rec.times[h]
                raise CareConvergenceError(f"{exc} at t={rec.times[h]:.4g}", exc.residual, rec.times[h]) from exc
            n_solves += 1
        rec.advance(sdre_feedback(st, params, care))
    traj, moments = rec.finish()
    traj.meta["care_solves"] = n_solves
    return traj, moments


def sdre_sample(state, params, tol=1e-9):
    """Training labels ``(u, V, gradV)`` from the quadratic ansatz.

    ``V = v^T Pi_vel v`` and ``gradV = (0, 2 Pi_vel v)`` in the flat layout.
    """
    care = solve_state_care(state, params, tol=tol)
    v = state.velocities.ravel()
    Pv = care.Pi_vel @ v
    V = float(max(v @ Pv, 0.0))
    grad = np.concatenate([np.zeros_like(v), 2.0 * Pv])
    return sdre_feedback(state, params, care), V, grad
