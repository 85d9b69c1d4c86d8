"""Supervised surrogates of the feedback law.

Feedforward networks ``z -> l_M(... l_1(z))`` with ``l_m(z) = act(A_m z + b_m)``
on hidden layers and a linear output layer, trained with mini-batch Adam.
Two model kinds exist:

* u-models map the flat state to the flat control (``output_dim = dN``);
* V-models map the flat state to a scalar value and are trained with the
  gradient-augmented loss ``L0(V) + mu * L0(grad V)``; their control is
  ``-(N / 2 gamma)`` times the velocity block of the input gradient.

Parameter gradients of the gradient-augmented loss need second derivatives of
the activations; they are computed by differentiating the input-gradient
recursion in reverse.
"""
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .ensemble import EnsembleState, Recorder
from .errors import FlockctlError, InputError, TrainingDivergenceError
from .sdre import flatten_state

log = logging.getLogger(__name__)


def _tanh(a):
    t = np.tanh(a)
    return t, 1.0 - t * t


def _tanh_dd(t, d1):
    return -2.0 * t * d1


def _sigmoid(a):
    s = 0.5 * (1.0 + np.tanh(0.5 * a))
    return s, s * (1.0 - s)


def _sigmoid_dd(s, d1):
    return d1 * (1.0 - 2.0 * s)


# name -> (value and first derivative, second derivative from (value, first))
ACTIVATIONS = {
    "tanh": (_tanh, _tanh_dd),
    "sigmoid": (_sigmoid, _sigmoid_dd),
}


STRUCTURES = ("plain", "consensus")


@dataclass(frozen=True)
class NetworkSpec:
    """Layer sizes and activations of a feedforward network.

    ``structure="consensus"`` wraps the raw network ``phi`` with the
    symmetries of the flocking problem (needs ``agent_dim``). Inputs are
    centred agent-wise, which removes common translations of positions and
    velocities. A u-model returns ``phi(x, w) - phi(x, 0)`` with zero
    agent-mean, so the control vanishes at consensus. A V-model returns
    ``(phi(x, w) + phi(x, -w)) / 2 - phi(x, 0)``, which is zero with zero
    gradient at consensus.
    """
    input_dim: int
    hidden_widths: tuple
    output_dim: int
    activations: tuple = None
    structure: str = "plain"
    agent_dim: int = None

    def __post_init__(self):
        widths = tuple(int(w) for w in self.hidden_widths)
        object.__setattr__(self, "hidden_widths", widths)
        acts = self.activations
        if acts is None:
            acts = ("tanh",) * len(widths)
        elif isinstance(acts, str):
            acts = (acts,) * len(widths)
        acts = tuple(acts)
        object.__setattr__(self, "activations", acts)
        if self.input_dim < 1 or self.output_dim < 1 or any(w < 1 for w in widths):
            raise InputError("all layer widths must be >= 1")
        if len(acts) != len(widths):
            raise InputError("one activation per hidden layer required")
        for a in acts:
            if a not in ACTIVATIONS:
                raise InputError(f"unknown activation {a!r}")
        if self.structure not in STRUCTURES:
            raise InputError(f"structure must be one of {STRUCTURES}")
        if self.structure == "consensus":
            d = self.agent_dim
            if d is None or d < 1 or self.input_dim % (2 * d):
                raise InputError("consensus structure needs agent_dim dividing input_dim / 2")
            if self.output_dim not in (1, self.input_dim // 2):
                raise InputError("consensus structure needs a scalar or control-sized output")

    @property
    def layer_sizes(self):
        return (self.input_dim,) + self.hidden_widths + (self.output_dim,)


@dataclass
class Network:
    spec: NetworkSpec
    weights: list
    biases: list
    metadata: dict = field(default_factory=dict)

    @property
    def n_layers(self):
        return len(self.weights)

    def copy(self):
        return Network(self.spec, [w.copy() for w in self.weights], [b.copy() for b in self.biases],
                       dict(self.metadata))

    def __call__(self, z):
        return forward(self, z)


@dataclass(frozen=True)
class TrainConfig:
    mu: float = 0.0
    learning_rate: float = 1e-3
    batch_size: int = 200
    epochs: int = 100
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.mu < 0 or not self.learning_rate > 0 or self.batch_size < 1 or self.epochs < 0:
            raise InputError("invalid training configuration")


@dataclass
class TrainingSample:
    state: np.ndarray
    u_label: np.ndarray
    v_label: float
    gradv_label: np.ndarray


@dataclass
class Dataset:
    """Column-stacked samples; row ``i`` is one :class:`TrainingSample`."""
    states: np.ndarray
    u: np.ndarray
    V: np.ndarray
    gradV: np.ndarray
    n_agents: int
    dim: int
    dropped: int = 0

    def __len__(self):
        return self.states.shape[0]

    def __getitem__(self, i):
        return TrainingSample(self.states[i], self.u[i], float(self.V[i]), self.gradV[i])

    def subset(self, idx):
        return Dataset(self.states[idx], self.u[idx], self.V[idx], self.gradV[idx], self.n_agents, self.dim)


def init_network(spec, seed=0):
    """Glorot-uniform weights, zero biases."""
    rng = np.random.default_rng(seed)
    sizes = spec.layer_sizes
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        lim = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-lim, lim, size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    return Network(spec, weights, biases)


def _as_batch(net, z):
    Z = np.asarray(z, dtype=float)
    single = Z.ndim == 1
    Z = np.atleast_2d(Z)
    if Z.ndim != 2 or Z.shape[1] != net.spec.input_dim:
        raise InputError(f"input has dimension {Z.shape[-1]}, network expects {net.spec.input_dim}")
    return Z, single


def _center_blocks(Y, n_blocks, d):
    B = Y.shape[0]
    R = Y.reshape(B, n_blocks, -1, d)
    return (R - R.mean(axis=2, keepdims=True)).reshape(Y.shape)


def _passes(spec):
    """``(coefficient, velocity sign)`` of each raw evaluation in the model output."""
    if spec.structure == "plain":
        return ((1.0, 1.0),)
    if spec.output_dim == 1:
        return ((0.5, 1.0), (0.5, -1.0), (-1.0, 0.0))
    return ((1.0, 1.0), (-1.0, 0.0))


def _pass_input(spec, Zc, sign):
    if sign == 1.0:
        return Zc
    Z = Zc.copy()
    Z[:, spec.input_dim // 2:] *= sign
    return Z


def _preprocess(spec, Z):
    if spec.structure == "plain":
        return Z
    return _center_blocks(Z, 2, spec.agent_dim)


def _postprocess(spec, Y):
    """Output projection; self-adjoint, so it also maps output cotangents."""
    if spec.structure == "plain" or spec.output_dim == 1:
        return Y
    return _center_blocks(Y, 1, spec.agent_dim)


def _input_adjoint(spec, G, sign):
    """Transpose of ``z -> pass input`` applied to input cotangents."""
    if sign != 1.0:
        G = G.copy()
        G[:, spec.input_dim // 2:] *= sign
    return _preprocess(spec, G)


def _forward_cache(net, Z):
    hs, d1s = [Z], []
    h = Z
    for m in range(net.n_layers - 1):
        act = ACTIVATIONS[net.spec.activations[m]][0]
        h, d1 = act(h @ net.weights[m].T + net.biases[m])
        hs.append(h)
        d1s.append(d1)
    y = h @ net.weights[-1].T + net.biases[-1]
    return y, hs, d1s


def forward_raw(net, z):
    """The bare layer chain, without the structural wrapper."""
    Z, single = _as_batch(net, z)
    y = _forward_cache(net, Z)[0]
    return y[0] if single else y


def forward(net, z):
    Z, single = _as_batch(net, z)
    spec = net.spec
    if spec.structure == "plain":
        y = _forward_cache(net, Z)[0]
    else:
        Zc = _preprocess(spec, Z)
        passes = _passes(spec)
        # one stacked evaluation is cheaper than a chain call per pass
        ys = _forward_cache(net, np.vstack([_pass_input(spec, Zc, s) for _, s in passes]))[0]
        ys = ys.reshape(len(passes), Z.shape[0], -1)
        y = _postprocess(spec, sum(c * yk for (c, _), yk in zip(passes, ys)))
    return y[0] if single else y


def _raw_jacobian(net, z):
    """``(output_dim, input_dim)`` Jacobian of the bare chain at one input."""
    _, _, d1s = _forward_cache(net, z[None, :])
    M = net.weights[-1]
    for m in range(net.n_layers - 2, -1, -1):
        M = (M * d1s[m][0][None, :]) @ net.weights[m]
    return M


def _raw_scalar_gradients(net, Z):
    """Input gradients of a scalar-output chain, one row per input."""
    _, _, d1s = _forward_cache(net, Z)
    delta = np.broadcast_to(net.weights[-1][0], (Z.shape[0], net.weights[-1].shape[1]))
    for m in range(net.n_layers - 2, -1, -1):
        delta = (d1s[m] * delta) @ net.weights[m]
    return delta


def input_gradient(net, z):
    """Jacobian ``d out / d z`` of shape ``(input_dim, output_dim)``.

    For scalar-output networks the gradient vector ``(input_dim,)`` is
    returned instead; a batch of inputs gives one gradient row per input.
    """
    Z, single = _as_batch(net, z)
    spec = net.spec
    if spec.output_dim == 1:
        Zc = _preprocess(spec, Z)
        g = sum(c * _input_adjoint(spec, _raw_scalar_gradients(net, _pass_input(spec, Zc, s)), s)
                for c, s in _passes(spec))
        return g[0] if single else g
    if not single:
        return np.stack([input_gradient(net, z) for z in Z])
    Zc = _preprocess(spec, Z)
    M = sum(c * _input_adjoint(spec, _raw_jacobian(net, _pass_input(spec, Zc, s)[0]), s)
            for c, s in _passes(spec))
    return _postprocess(spec, M.T.copy())


def _pass_loss_terms(net, Z, need_delta):
    y, hs, d1s = _forward_cache(net, Z)
    L = net.n_layers
    deltas = gammas = None
    if need_delta:
        W = net.weights
        deltas = [None] * L
        gammas = [None] * (L - 1)
        deltas[L - 1] = np.broadcast_to(W[-1][0], (Z.shape[0], W[-1].shape[1]))
        for m in range(L - 2, -1, -1):
            gammas[m] = d1s[m] * deltas[m + 1]
            deltas[m] = gammas[m] @ W[m]
    return y, hs, d1s, deltas, gammas


def _pass_backward(net, cache, ybar, dbar, dW, db):
    """Accumulate parameter gradients of one raw evaluation.

    ``ybar`` is the output cotangent, ``dbar`` the cotangent of the input
    gradient (``None`` when no gradient term is present).
    """
    _, hs, d1s, deltas, gammas = cache
    W = net.weights
    L = net.n_layers
    abar = [np.zeros_like(d) for d in d1s]
    if dbar is not None:
        for m in range(L - 1):
            gbar = dbar @ W[m].T
            dW[m] += gammas[m].T @ dbar
            dd = ACTIVATIONS[net.spec.activations[m]][1]
            abar[m] += gbar * deltas[m + 1] * dd(hs[m + 1], d1s[m])
            dbar = gbar * d1s[m]
        dW[L - 1][0] += dbar.sum(axis=0)
    dW[L - 1] += ybar.T @ hs[L - 1]
    db[L - 1] += ybar.sum(axis=0)
    hbar = ybar @ W[L - 1]
    for m in range(L - 2, -1, -1):
        a = hbar * d1s[m] + abar[m]
        dW[m] += a.T @ hs[m]
        db[m] += a.sum(axis=0)
        hbar = a @ W[m]


def loss_and_grad(net, Z, Y, G=None, mu=0.0, need_grad=True):
    """Loss ``mean((y - Y)^2) + mu * mean((grad_z y - G)^2)`` and its
    parameter gradients ``(loss, dW, db)``.

    The gradient term is only defined for scalar-output networks.
    """
    spec = net.spec
    Z = np.atleast_2d(np.asarray(Z, dtype=float))
    Y = np.asarray(Y, dtype=float).reshape(Z.shape[0], -1)
    use_g = mu > 0 and G is not None
    if use_g and spec.output_dim != 1:
        raise InputError("gradient-augmented loss needs a scalar-output network")
    Zc = _preprocess(spec, Z)
    passes = _passes(spec)
    caches = [_pass_loss_terms(net, _pass_input(spec, Zc, s), use_g) for _, s in passes]
    y = _postprocess(spec, sum(c * k[0] for (c, _), k in zip(passes, caches)))
    r = y - Y
    val = float(np.mean(r * r))
    if use_g:
        g = sum(c * _input_adjoint(spec, k[3][0], s) for (c, s), k in zip(passes, caches))
        gr = g - np.asarray(G, dtype=float)
        val += mu * float(np.mean(gr * gr))
    if not need_grad:
        return val, None, None
    dW = [np.zeros_like(w) for w in net.weights]
    db = [np.zeros_like(b) for b in net.biases]
    ybar = _postprocess(spec, 2.0 * r / r.size)
    gbar = 2.0 * mu * gr / gr.size if use_g else None
    for (c, s), k in zip(passes, caches):
        dbar = None if gbar is None else c * _input_adjoint(spec, gbar, s)
        _pass_backward(net, k, c * ybar, dbar, dW, db)
    return val, dW, db


def loss(net, Z, Y, G=None, mu=0.0):
    return loss_and_grad(net, Z, Y, G, mu, need_grad=False)[0]


class Adam:
    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, params, grads):
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def _targets(dataset, spec):
    if spec.output_dim == 1:
        return dataset.V.reshape(-1, 1), dataset.gradV
    if spec.output_dim != dataset.u.shape[1]:
        raise InputError("output_dim must be 1 (V-model) or the control dimension (u-model)")
    return dataset.u, None


def train(dataset, spec, config=TrainConfig(), network=None):
    """Mini-batch Adam; returns the trained network with ``metadata['loss_history']``.

    Deterministic for a fixed seed: the initialisation and the per-epoch
    shuffles come from one seeded generator.
    """
    if len(dataset) == 0:
        raise InputError("empty dataset")
    Y, G = _targets(dataset, spec)
    Z = dataset.states
    net = init_network(spec, config.seed) if network is None else network.copy()
    rng = np.random.default_rng([config.seed, 1])
    params = net.weights + net.biases
    opt = Adam(params, config.learning_rate, config.beta1, config.beta2, config.eps)
    nL = net.n_layers
    history = []
    n = len(dataset)
    bs = min(config.batch_size, n)
    t0 = time.perf_counter()
    for epoch in range(config.epochs):
        perm = rng.permutation(n)
        tot = 0.0
        for start in range(0, n, bs):
            idx = perm[start:start + bs]
            # overflow is reported through the finiteness check below
            with np.errstate(over="ignore", invalid="ignore"):
                val, dW, db = loss_and_grad(net, Z[idx], Y[idx], None if G is None else G[idx], config.mu)
            if not np.isfinite(val):
                raise TrainingDivergenceError(f"non-finite loss in epoch {epoch}", epoch)
            opt.step(params, dW + db)
            tot += val * len(idx)
        history.append(tot / n)
    net.weights, net.biases = params[:nL], params[nL:]
    net.metadata.update(loss_history=history, train_seconds=time.perf_counter() - t0,
                        mu=config.mu, epochs=config.epochs, learning_rate=config.learning_rate,
                        batch_size=bs, seed=config.seed, n_samples=n)
    return net


def prmse(network, Z, Y):
    """Percent RMSE: ``100 * RMSE(pred, Y) / RMS(Y)``."""
    Y = np.asarray(Y, dtype=float)
    pred = forward(network, Z).reshape(Y.shape)
    scale = np.sqrt(np.mean(Y * Y))
    if scale == 0:
        raise InputError("PRMSE undefined for all-zero labels")
    return 100.0 * float(np.sqrt(np.mean((pred - Y) ** 2))) / scale


def control_from_value_model(network, state, gamma):
    """``-(N / 2 gamma)`` times the velocity block of the value gradient."""
    N, d = state.positions.shape
    if network.spec.output_dim != 1:
        raise InputError("value model must have scalar output")
    g = input_gradient(network, flatten_state(state))
    return -(N / (2.0 * gamma)) * g[N * d:].reshape(N, d)


def control_from_u_model(network, state):
    return forward(network, flatten_state(state)).reshape(state.positions.shape)


def learned_feedback(network, kind, gamma):
    if kind == "u":
        return lambda st: control_from_u_model(network, st)
    if kind == "V":
        return lambda st: control_from_value_model(network, st, gamma)
    raise InputError(f"model kind must be 'u' or 'V', got {kind!r}")


def rollout_learned(state0, network, params, kind=None):
    """Euler receding-horizon rollout with the learned feedback.

    Wall-clock seconds are stored in ``trajectory.meta['wall_seconds']``.
    """
    kind = kind or ("V" if network.spec.output_dim == 1 else "u")
    fb = learned_feedback(network, kind, params.gamma)
    t0 = time.perf_counter()
    rec = Recorder(state0, params)
    for h in range(rec.n_steps):
        x, v = rec.current()
        rec.advance(fb(EnsembleState(x, v, rec.times[h])))
    traj, moments = rec.finish()
    traj.meta["wall_seconds"] = time.perf_counter() - t0
    return traj, moments


def sample_states(count, n_agents, dim, position_box=(0.0, 1.0), velocity_box=(0.0, 1.0), seed=0):
    """``(count, 2 d N)`` i.i.d. uniform flat states."""
    if count < 1:
        raise InputError("count must be >= 1")
    rng = np.random.default_rng([seed, 2])
    m = n_agents * dim
    x = rng.uniform(position_box[0], position_box[1], size=(count, m))
    v = rng.uniform(velocity_box[0], velocity_box[1], size=(count, m))
    return np.hstack([x, v])


def _label_one(args):
    s, labeler, params, n_agents, dim, pmp_config = args
    from . import pmp, sdre
    state = EnsembleState(s[:n_agents * dim].reshape(n_agents, dim), s[n_agents * dim:].reshape(n_agents, dim))
    try:
        if labeler == "sdre":
            u, V, g = sdre.sdre_sample(state, params)
        elif labeler == "pmp":
            sol = pmp.solve_pmp(state, params, pmp_config or pmp.GradientSolverConfig())
            u, V, g = pmp.extract_sample(sol)
        else:
            raise InputError(f"unknown labeler {labeler!r}")
    except InputError:
        raise
    except (FlockctlError, np.linalg.LinAlgError) as exc:
        return None, str(exc)
    return (u.ravel(), V, g), None


def generate_dataset(states, labeler, params, n_agents, dim, pmp_config=None, n_jobs=1):
    """Label each flat state with the PMP or SDRE solver.

    Failed solves are dropped and counted in ``Dataset.dropped``.
    """
    labeler = labeler.lower()
    states = np.atleast_2d(np.asarray(states, dtype=float))
    jobs = [(s, labeler, params, n_agents, dim, pmp_config) for s in states]
    if n_jobs == 1:
        results = [_label_one(j) for j in jobs]
    else:
        with ProcessPoolExecutor(max_workers=n_jobs) as ex:
            results = list(ex.map(_label_one, jobs, chunksize=16))
    keep, us, Vs, gs = [], [], [], []
    for i, (res, err) in enumerate(results):
        if res is None:
            log.warning("sample %d dropped: %s", i, err)
            continue
        keep.append(i)
        us.append(res[0])
        Vs.append(res[1])
        gs.append(res[2])
    m = n_agents * dim
    return Dataset(states[keep],
                   np.array(us).reshape(-1, m), np.array(Vs, dtype=float),
                   np.array(gs).reshape(-1, 2 * m), n_agents, dim, dropped=len(states) - len(keep))
