"""Pairwise Cucker-Smale kernels.

Every routine here is O(N^2 d) and sits inside the time loops of all
controllers. Each exists twice: a vectorised numpy version (``*_numpy``) and a
pair-loop numba version (``*_numba``). The unsuffixed names dispatch on
``flockctl._jit.USE_NUMBA``.

Conventions: ``x``, ``v``, ``q`` are ``(N, d)`` float64 arrays, agent rows.
The kernel is ``a(r) = K / (1 + r^2)^beta`` and ``phi(s) = a(sqrt(s))``.
"""
import numpy as np

from ._jit import USE_NUMBA, njit


def kernel_matrix(x, K=1.0, beta=1.0):
    """Dense ``(N, N)`` matrix of ``a(|x_j - x_i|)``; the diagonal is ``K``."""
    diff = x[None, :, :] - x[:, None, :]
    r2 = np.einsum("ijk,ijk->ij", diff, diff)
    return K * (1.0 + r2) ** (-beta)


def alignment_numpy(x, v, K=1.0, beta=1.0):
    W = kernel_matrix(x, K, beta)
    n = x.shape[0]
    return (W @ v - W.sum(axis=1)[:, None] * v) / n


def adjoint_position_numpy(x, v, q, K=1.0, beta=1.0):
    n = x.shape[0]
    diff = x[:, None, :] - x[None, :, :]  # x_i - x_j
    r2 = np.einsum("ijk,ijk->ij", diff, diff)
    dphi = -beta * K * (1.0 + r2) ** (-beta - 1.0)
    dv = v[None, :, :] - v[:, None, :]  # v_j - v_i
    dq = q[:, None, :] - q[None, :, :]  # q_i - q_j
    w = dphi * np.einsum("ijk,ijk->ij", dv, dq)
    return (2.0 / n) * np.einsum("ij,ijk->ik", w, diff)


@njit(fastmath=False)
def alignment_numba(x, v, K=1.0, beta=1.0):
    n, d = x.shape
    out = np.zeros((n, d))
    for i in range(n):
        for j in range(i + 1, n):
            r2 = 0.0
            for k in range(d):
                t = x[j, k] - x[i, k]
                r2 += t * t
            if beta == 1.0:
                a = K / (1.0 + r2)
            else:
                a = K * (1.0 + r2) ** (-beta)
            for k in range(d):
                dv = v[j, k] - v[i, k]
                out[i, k] += a * dv
                out[j, k] -= a * dv
    inv = 1.0 / n
    for i in range(n):
        for k in range(d):
            out[i, k] *= inv
    return out


@njit(fastmath=False)
def adjoint_terms_numba(x, v, q, K=1.0, beta=1.0):
    n, d = x.shape
    pos = np.zeros((n, d))
    vel = np.zeros((n, d))
    for i in range(n):
        for j in range(i + 1, n):
            r2 = 0.0
            for k in range(d):
                t = x[j, k] - x[i, k]
                r2 += t * t
            if beta == 1.0:
                a = K / (1.0 + r2)
                dphi = -K / ((1.0 + r2) * (1.0 + r2))
            else:
                a = K * (1.0 + r2) ** (-beta)
                dphi = -beta * K * (1.0 + r2) ** (-beta - 1.0)
            ip = 0.0
            for k in range(d):
                ip += (v[j, k] - v[i, k]) * (q[i, k] - q[j, k])
                dq = q[j, k] - q[i, k]
                vel[i, k] += a * dq
                vel[j, k] -= a * dq
            w = dphi * ip
            for k in range(d):
                dx = x[i, k] - x[j, k]
                pos[i, k] += w * dx
                pos[j, k] -= w * dx
    inv = 1.0 / n
    for i in range(n):
        for k in range(d):
            pos[i, k] *= 2.0 * inv
            vel[i, k] *= inv
    return pos, vel


def adjoint_terms_numpy(x, v, q, K=1.0, beta=1.0):
    return adjoint_position_numpy(x, v, q, K, beta), alignment_numpy(x, q, K, beta)


def alignment(x, v, K=1.0, beta=1.0):
    """Velocity drift ``(1/N) sum_j a(|x_j - x_i|) (v_j - v_i)`` per agent."""
    if USE_NUMBA:
        return alignment_numba(x, v, float(K), float(beta))
    return alignment_numpy(x, v, K, beta)


def adjoint_terms(x, v, q, K=1.0, beta=1.0):
    """Transposed-Jacobian products of the alignment drift against ``q``.

    Returns ``(pos, vel)`` where ``pos[i] = sum_k d(drift_k)/dx_i . q_k`` and
    ``vel[i] = sum_k d(drift_k)/dv_i . q_k``.
    """
    if USE_NUMBA:
        return adjoint_terms_numba(x, v, q, float(K), float(beta))
    return adjoint_terms_numpy(x, v, q, K, beta)


# Whole-horizon sweeps used by the open-loop gradient solver. Moving the time
# loop into compiled code removes the per-step interpreter overhead, which
# dominates for small and moderate N.

def euler_sweep_numpy(x0, v0, u, dt, K=1.0, beta=1.0, gamma=0.1):
    n = u.shape[0]
    N, d = x0.shape
    xs = np.empty((n + 1, N, d))
    vs = np.empty((n + 1, N, d))
    xs[0], vs[0] = x0, v0
    cost = 0.0
    for h in range(n):
        x, v = xs[h], vs[h]
        dev = v - v.mean(axis=0)
        cost += dt * (np.sum(dev * dev) + gamma * np.sum(u[h] * u[h])) / N
        xs[h + 1] = x + dt * v
        vs[h + 1] = v + dt * (alignment_numpy(x, v, K, beta) + u[h])
    return xs, vs, cost


@njit(fastmath=False)
def euler_sweep_numba(x0, v0, u, dt, K=1.0, beta=1.0, gamma=0.1):
    n = u.shape[0]
    N, d = x0.shape
    xs = np.empty((n + 1, N, d))
    vs = np.empty((n + 1, N, d))
    xs[0] = x0
    vs[0] = v0
    mean = np.empty(d)
    cost = 0.0
    for h in range(n):
        x = xs[h]
        v = vs[h]
        a = alignment_numba(x, v, K, beta)
        for k in range(d):
            s = 0.0
            for i in range(N):
                s += v[i, k]
            mean[k] = s / N
        c = 0.0
        cu = 0.0
        for i in range(N):
            for k in range(d):
                t = v[i, k] - mean[k]
                c += t * t
                cu += u[h, i, k] * u[h, i, k]
                xs[h + 1, i, k] = x[i, k] + dt * v[i, k]
                vs[h + 1, i, k] = v[i, k] + dt * (a[i, k] + u[h, i, k])
        cost += dt * (c + gamma * cu) / N
    return xs, vs, cost


def adjoint_sweep_numpy(xs, vs, dt, K=1.0, beta=1.0):
    n = xs.shape[0] - 1
    N = xs.shape[1]
    p = np.zeros_like(xs)
    q = np.zeros_like(vs)
    for h in range(n - 1, -1, -1):
        x, v = xs[h], vs[h]
        ph, qh = p[h + 1], q[h + 1]
        pos, vel = adjoint_terms_numpy(x, v, qh, K, beta)
        p[h] = ph + dt * pos
        q[h] = qh + dt * (ph + vel + (2.0 / N) * (v - v.mean(axis=0)))
    return p, q


@njit(fastmath=False)
def adjoint_sweep_numba(xs, vs, dt, K=1.0, beta=1.0):
    n = xs.shape[0] - 1
    N, d = xs.shape[1], xs.shape[2]
    p = np.zeros_like(xs)
    q = np.zeros_like(vs)
    mean = np.empty(d)
    for h in range(n - 1, -1, -1):
        v = vs[h]
        pos, vel = adjoint_terms_numba(xs[h], v, q[h + 1], K, beta)
        for k in range(d):
            s = 0.0
            for i in range(N):
                s += v[i, k]
            mean[k] = s / N
        for i in range(N):
            for k in range(d):
                p[h, i, k] = p[h + 1, i, k] + dt * pos[i, k]
                q[h, i, k] = q[h + 1, i, k] + dt * (p[h + 1, i, k] + vel[i, k]
                                                    + (2.0 / N) * (v[i, k] - mean[k]))
    return p, q


def euler_sweep(x0, v0, u, dt, K=1.0, beta=1.0, gamma=0.1):
    """Explicit Euler rollout under grid controls ``u`` of shape ``(n, N, d)``.

    Returns ``(xs, vs, cost)`` with the left-rectangle running cost.
    """
    if USE_NUMBA:
        return euler_sweep_numba(np.ascontiguousarray(x0, dtype=np.float64),
                                 np.ascontiguousarray(v0, dtype=np.float64),
                                 np.ascontiguousarray(u, dtype=np.float64),
                                 float(dt), float(K), float(beta), float(gamma))
    return euler_sweep_numpy(x0, v0, u, dt, K, beta, gamma)


def adjoint_sweep(xs, vs, dt, K=1.0, beta=1.0):
    """Discrete adjoint of :func:`euler_sweep` from zero terminal costates."""
    if USE_NUMBA:
        return adjoint_sweep_numba(np.ascontiguousarray(xs), np.ascontiguousarray(vs),
                                   float(dt), float(K), float(beta))
    return adjoint_sweep_numpy(xs, vs, dt, K, beta)
