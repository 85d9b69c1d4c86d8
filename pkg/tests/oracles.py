"""Reference computations that share no code with the package."""
import numpy as np
from scipy.integrate import solve_ivp


def cs_drift(x, v, K=1.0, beta=1.0):
    """Velocity drift by the literal double sum, including the j = i term."""
    N = x.shape[0]
    out = np.zeros_like(v)
    for i in range(N):
        for j in range(N):
            r2 = float(np.sum((x[j] - x[i]) ** 2))
            out[i] += K / (1.0 + r2) ** beta * (v[j] - v[i])
    return out / N


def cost_integrand(v, u, gamma):
    N = v.shape[0]
    vbar = v.mean(axis=0)
    return (np.sum((vbar - v) ** 2) + gamma * np.sum(u ** 2)) / N


def fine_cost(x0, v0, gamma, T, feedback=None, K=1.0, beta=1.0):
    """Cost of a closed-loop run by adaptive integration with the cost as an extra state."""
    N, d = x0.shape
    m = N * d

    def rhs(t, y):
        x = y[:m].reshape(N, d)
        v = y[m:2 * m].reshape(N, d)
        u = np.zeros((N, d)) if feedback is None else feedback(x, v)
        return np.concatenate([v.ravel(), (cs_drift(x, v, K, beta) + u).ravel(), [cost_integrand(v, u, gamma)]])

    y0 = np.concatenate([x0.ravel(), v0.ravel(), [0.0]])
    sol = solve_ivp(rhs, (0.0, T), y0, method="DOP853", rtol=1e-11, atol=1e-13)
    return sol.y[-1, -1]


def central_gradient(f, z, h=1e-6):
    z = np.asarray(z, dtype=float)
    g = np.zeros_like(z)
    for idx in np.ndindex(z.shape):
        e = np.zeros_like(z)
        e[idx] = h
        g[idx] = (f(z + e) - f(z - e)) / (2 * h)
    return g


def full_riccati_rk4(N, pbar, nu, T, dt):
    """Backward RK4 for ``-K' = KP + PK - (N/nu) K^2 + I/N`` with ``K(T) = 0``.

    Returns the ``(n+1, N, N)`` forward-indexed solution.
    """
    P = np.full((N, N), pbar / N)
    np.fill_diagonal(P, pbar * (1 - N) / N)
    eye = np.eye(N) / N

    def dK(K):  # forward-time derivative
        return -(K @ P + P @ K - (N / nu) * K @ K + eye)

    n = int(round(T / dt))
    Ks = np.zeros((n + 1, N, N))
    K = np.zeros((N, N))
    for k in range(n, 0, -1):
        k1 = dK(K)
        k2 = dK(K - 0.5 * dt * k1)
        k3 = dK(K - 0.5 * dt * k2)
        k4 = dK(K - dt * k3)
        K = K - dt / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
        Ks[k - 1] = K
    return Ks


def full_riccati_rhs(K, N, pbar, nu):
    P = np.full((N, N), pbar / N)
    np.fill_diagonal(P, pbar * (1 - N) / N)
    return -(K @ P + P @ K - (N / nu) * K @ K + np.eye(N) / N)


def care_spectral(L, d, q, r):
    """CARE solution for ``A = kron(L, I_d)`` with symmetric ``L``, ``Q = q (I - C)``, ``R = r I``.

    On each eigenvector of ``L`` orthogonal to the ones vector the scalar
    equation ``2 lam pi - pi^2 / r + q = 0`` has the stabilising root
    ``r (lam + sqrt(lam^2 + q / r))``; the consensus eigenvector gets 0.
    """
    N = L.shape[0]
    lam, U = np.linalg.eigh(L)
    ones = np.ones(N) / np.sqrt(N)
    pis = r * (lam + np.sqrt(lam ** 2 + q / r))
    # project out the consensus direction explicitly
    Pi = U @ np.diag(pis) @ U.T
    Pc = np.eye(N) - np.outer(ones, ones)
    Pi = Pc @ Pi @ Pc
    return np.kron(Pi, np.eye(d))


def mlp_by_hand(z, W1, b1, W2, b2):
    """2-layer tanh network evaluated entry by entry."""
    h = [np.tanh(sum(W1[i, k] * z[k] for k in range(len(z))) + b1[i]) for i in range(W1.shape[0])]
    return np.array([sum(W2[o, i] * h[i] for i in range(len(h))) + b2[o] for o in range(W2.shape[0])])


def derivative4(y, h):
    """Fourth-order finite-difference derivative along axis 0 (five-point stencils)."""
    y = np.asarray(y, dtype=float)
    d = np.empty_like(y)
    d[2:-2] = (y[:-4] - 8 * y[1:-3] + 8 * y[3:-1] - y[4:]) / (12 * h)
    d[0] = (-25 * y[0] + 48 * y[1] - 36 * y[2] + 16 * y[3] - 3 * y[4]) / (12 * h)
    d[1] = (-3 * y[0] - 10 * y[1] + 18 * y[2] - 6 * y[3] + y[4]) / (12 * h)
    d[-1] = (25 * y[-1] - 48 * y[-2] + 36 * y[-3] - 16 * y[-4] + 3 * y[-5]) / (12 * h)
    d[-2] = (3 * y[-1] + 10 * y[-2] - 18 * y[-3] + 6 * y[-4] - y[-5]) / (12 * h)
    return d
