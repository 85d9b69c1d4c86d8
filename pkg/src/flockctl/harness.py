"""Experiment configuration, method dispatch, reproduction pipelines, benchmark.

Configuration files are INI files. Section names only group keys for
readability; every key must be a field of :class:`ExperimentConfig`::

    [simulation]
    n_agents = 50
    dim = 2
    gamma = 0.1
    horizon = 10
    dt = 0.01
    position_box = 0, 1
    velocity_box = -1, 1

    [experiment]
    method = mdpc
    seeds = 0, 1, 2
    out = runs

    [mdpc]
    delta_tol = 0.1

Values given on the command line override file values.
"""
import configparser
import dataclasses
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import _jit, io, kernels, mdpc, pmp, sdre, surrogate
from .ensemble import SimParams, random_state, simulate
from .errors import FlockctlError, InputError

log = logging.getLogger(__name__)

METHODS = ("uncontrolled", "pmp", "sdre-mpc", "mdpc", "learned-u", "learned-v")


@dataclass(frozen=True)
class ExperimentConfig:
    method: str = "uncontrolled"
    # simulation
    n_agents: int = 50
    dim: int = 2
    kernel_gain: float = 1.0
    kernel_exponent: float = 1.0
    gamma: float = 0.1
    horizon: float = 10.0
    dt: float = 0.01
    integrator: str = "euler"
    position_box: tuple = (0.0, 1.0)
    velocity_box: tuple = (0.0, 1.0)
    seeds: tuple = (0,)
    out: str = "runs"
    n_jobs: int = 1
    # mdpc
    delta_tol: float = 0.1
    pbar: float = None
    alpha_low: float = 0.0
    beta_up: float = 1.0
    eta_decay: float = 1.0
    # sdre
    refresh_steps: int = 1
    care_tol: float = 1e-9
    # pmp
    pmp_max_iters: int = 300
    pmp_grad_tolerance: float = 1e-6
    # learning
    model_path: str = None
    labeler: str = "sdre"
    labelers: tuple = ("sdre", "pmp")
    samples: int = 10000
    pmp_samples: int = 200
    test_samples: int = 2000
    data_seed: int = 1000
    hidden_widths: tuple = (128, 128)
    activation: str = "tanh"
    structure: str = "consensus"
    epochs: int = 100
    learning_rate: float = 1e-3
    batch_size: int = 200
    mu: float = 1000.0
    train_seed: int = 0

    def __post_init__(self):
        if self.method not in METHODS:
            raise InputError(f"method must be one of {METHODS}, got {self.method!r}")
        if self.n_agents < 1 or self.dim < 1:
            raise InputError("n_agents and dim must be >= 1")
        if len(self.seeds) == 0:
            raise InputError("at least one seed required")
        for box in (self.position_box, self.velocity_box):
            if len(box) != 2 or not box[0] <= box[1]:
                raise InputError(f"invalid box {box}")
        if self.method.startswith("learned") and self.model_path is None:
            raise InputError(f"method {self.method} needs model_path")
        if self.labeler not in ("pmp", "sdre") or any(lab not in ("pmp", "sdre") for lab in self.labelers):
            raise InputError("labelers must be 'pmp' or 'sdre'")
        self.sim_params()

    def sim_params(self, **changes):
        return SimParams(self.kernel_gain, self.kernel_exponent, self.gamma, self.horizon, self.dt,
                         None, self.integrator, **changes)

    def pmp_config(self):
        return pmp.GradientSolverConfig(max_iters=self.pmp_max_iters, grad_tolerance=self.pmp_grad_tolerance)

    def bound_params(self):
        return mdpc.BoundParams(self.alpha_low, self.beta_up, self.eta_decay)

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)

    def to_dict(self):
        return dataclasses.asdict(self)


def _parse_value(name, text):
    f = {fl.name: fl for fl in dataclasses.fields(ExperimentConfig)}[name]
    default = f.default
    text = text.strip()
    if text == "" or text.lower() == "none":
        return None
    if isinstance(default, tuple):
        parts = [p.strip() for p in text.replace(";", ",").split(",") if p.strip()]
        if name in ("seeds", "hidden_widths"):
            return tuple(int(p) for p in parts)
        if name == "labelers":
            return tuple(parts)
        return tuple(float(p) for p in parts)
    if isinstance(default, bool):
        return text.lower() in ("1", "true", "yes", "on")
    if isinstance(default, int):
        return int(text)
    if isinstance(default, float) or name == "pbar":
        return float(text)
    return text


def load_config(path=None, overrides=None):
    """Config from an INI file, then ``overrides`` (CLI values) on top."""
    values = {}
    names = {f.name for f in dataclasses.fields(ExperimentConfig)}
    if path is not None:
        cp = configparser.ConfigParser()
        if not cp.read(path):
            raise InputError(f"cannot read config file {path}")
        for section in cp.sections():
            for key, text in cp.items(section):
                key = key.replace("-", "_")
                if key not in names:
                    raise InputError(f"unknown config key {key!r} in section [{section}]")
                values[key] = _parse_value(key, text)
    for key, val in (overrides or {}).items():
        if val is not None:
            if key not in names:
                raise InputError(f"unknown config key {key!r}")
            values[key] = val
    return ExperimentConfig(**values)


@dataclass
class RunReport:
    method: str
    seed: int
    config: dict
    timings: dict = field(default_factory=dict)
    total_seconds: float = 0.0
    final_cost: float = float("nan")
    final_variance: float = float("nan")
    final_variance_about_mean: float = float("nan")
    update_times: list = None
    files: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)

    def to_dict(self):
        return dataclasses.asdict(self)


def _with_context(exc, context):
    """Prefix an exception message in place, keeping its type and attributes."""
    exc.args = (f"{context}: {exc.args[0] if exc.args else exc}",) + tuple(exc.args[1:])
    return exc


class _Clock:
    """Contiguous phase timer: the phases tile the measured total."""

    def __init__(self):
        self.t0 = self.last = time.perf_counter()
        self.phases = {}

    def mark(self, name):
        now = time.perf_counter()
        self.phases[name] = self.phases.get(name, 0.0) + now - self.last
        self.last = now

    @property
    def total(self):
        return self.last - self.t0


def initial_state(config, seed):
    rng = np.random.default_rng(seed)
    return random_state(rng, config.n_agents, config.dim, config.position_box, config.velocity_box)


def run_dir(config, seed, label=None):
    return Path(config.out) / f"{label or config.method}_seed{seed}"


def run_experiment(config, seed=None, label=None, model=None):
    """One method from one seeded initial state; writes CSVs and ``report.json``.

    ``model`` may pass an in-memory network for the learned methods instead
    of ``config.model_path``.
    """
    seed = config.seeds[0] if seed is None else seed
    clock = _Clock()
    params = config.sim_params()
    state0 = initial_state(config, seed)
    outdir = run_dir(config, seed, label)
    outdir.mkdir(parents=True, exist_ok=True)
    report = RunReport(config.method, int(seed), config.to_dict())
    files = {}
    method = config.method
    if method.startswith("learned") and model is None:
        model = io.load_model(config.model_path)
    clock.mark("setup")
    try:
        if method == "uncontrolled":
            traj, moments = simulate(state0, None, params)
        elif method == "pmp":
            sol = pmp.solve_pmp(state0, params, config.pmp_config())
            clock.mark("solve")
            traj, moments = simulate(state0, pmp.open_loop_feedback(sol), params)
            report.extra.update(cost=sol.cost, iterations=sol.iterations, converged=sol.converged)
        elif method == "sdre-mpc":
            traj, moments = sdre.frozen_sdre_mpc(state0, params, config.refresh_steps, config.care_tol)
            report.extra["care_solves"] = traj.meta["care_solves"]
        elif method == "mdpc":
            cfg = mdpc.MdpcConfig(config.delta_tol, params, config.pbar)
            res = mdpc.run_mdpc(state0, cfg, config.bound_params())
            traj, moments = res.trajectory, res.moments
            report.update_times = list(res.updates.update_times)
        else:
            kind = "u" if method == "learned-u" else "V"
            expected = 1 if kind == "V" else config.n_agents * config.dim
            if model.spec.output_dim != expected:
                raise InputError(f"{method} needs a model with output_dim {expected}")
            traj, moments = surrogate.rollout_learned(state0, model, params, kind)
            report.extra["rollout_seconds"] = traj.meta["wall_seconds"]
    except FlockctlError as exc:
        raise _with_context(exc, f"{method} run (seed {seed}) failed")
    clock.mark("rollout")
    files["trajectory"] = io.write_trajectory_csv(outdir / "trajectory.csv", traj)
    files["moments"] = io.write_moments_csv(outdir / "moments.csv", moments)
    if method == "mdpc":
        files["bounds"] = io.write_bounds_csv(outdir / "bounds.csv", moments.times, res.lower, res.upper,
                                              moments.variance)
        files["updates"] = io.write_json(outdir / "updates.json", {
            "delta_tol": config.delta_tol, "update_times": res.updates.update_times,
            "step_count": len(res.updates)})
    if method == "pmp":
        files["pmp"] = io.write_json(outdir / "pmp.json", {
            "cost": sol.cost, "iterations": sol.iterations, "converged": sol.converged})
    report.final_cost = float(traj.cost_accumulated)
    report.final_variance = float(moments.variance[-1])
    report.final_variance_about_mean = float(moments.variance_about_mean[-1])
    report.files = {k: str(v) for k, v in files.items()}
    report.files["report"] = str(outdir / "report.json")
    clock.mark("write")
    report.timings = dict(clock.phases)
    report.total_seconds = clock.total
    io.write_json(outdir / "report.json", report.to_dict())
    report.extra["moments"] = moments
    return report


def _run_one(args):
    config, seed = args
    rep = run_experiment(config, seed)
    rep.extra.pop("moments", None)
    return rep


def run_seeds(config):
    """``run_experiment`` over ``config.seeds``, optionally in a process pool."""
    jobs = [(config, s) for s in config.seeds]
    if config.n_jobs == 1 or len(jobs) == 1:
        return [_run_one(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=config.n_jobs) as ex:
        return list(ex.map(_run_one, jobs))


def make_dataset(config, labeler, count, seed):
    states = surrogate.sample_states(count, config.n_agents, config.dim, config.position_box,
                                     config.velocity_box, seed)
    return surrogate.generate_dataset(states, labeler, config.sim_params(), config.n_agents, config.dim,
                                      config.pmp_config(), n_jobs=config.n_jobs)


def model_spec(config, kind):
    m = config.n_agents * config.dim
    return surrogate.NetworkSpec(2 * m, config.hidden_widths, 1 if kind == "V" else m,
                                 config.activation, config.structure, config.dim)


def train_model(config, dataset, kind):
    mu = config.mu if kind == "V" else 0.0
    tc = surrogate.TrainConfig(mu=mu, learning_rate=config.learning_rate, batch_size=config.batch_size,
                               epochs=config.epochs, seed=config.train_seed)
    return surrogate.train(dataset, model_spec(config, kind), tc)


def model_prmse(net, dataset):
    """PRMSE of a u-model on controls, of a V-model on values and gradients."""
    if net.spec.output_dim == 1:
        g = surrogate.input_gradient(net, dataset.states)
        return {"V": surrogate.prmse(net, dataset.states, dataset.V),
                "gradV": 100.0 * float(np.sqrt(np.mean((g - dataset.gradV) ** 2))
                                       / np.sqrt(np.mean(dataset.gradV ** 2)))}
    return {"u": surrogate.prmse(net, dataset.states, dataset.u)}


def run_pipeline_test1(config):
    """Datasets, four learned models, and a paired comparison over the seeds.

    Writes ``models/``, ``datasets/``, per-run folders, ``comparison.csv``
    (mean variance about the mean per method over the seeds) and
    ``test1_report.json``. Returns ``(reports, summary)``.
    """
    out = Path(config.out)
    clock = _Clock()
    models = {}
    summary = {"prmse": {}, "dropped": {}, "timings": {}}
    for lab in config.labelers:
        count = config.samples if lab == "sdre" else config.pmp_samples
        n_test = config.test_samples if lab == "sdre" else max(1, count // 5)
        try:
            train_set = make_dataset(config, lab, count, config.data_seed)
            test_set = make_dataset(config, lab, n_test, config.data_seed + 1)
        except FlockctlError as exc:
            raise _with_context(exc, f"data generation ({lab}) failed")
        io.write_dataset_csv(out / "datasets" / f"{lab}_train.csv", train_set)
        summary["dropped"][lab] = train_set.dropped + test_set.dropped
        clock.mark(f"data-{lab}")
        for kind in ("u", "V"):
            name = f"learned-{kind.lower()}-{lab}"
            try:
                net = train_model(config, train_set, kind)
            except FlockctlError as exc:
                raise _with_context(exc, f"training {name} failed")
            io.save_model(out / "models" / f"{name}.json", net)
            summary["prmse"][name] = model_prmse(net, test_set)
            models[name] = net
            clock.mark(f"train-{name}")
    methods = ["uncontrolled", "pmp", "sdre-mpc"] + list(models)
    reports = []
    curves = {m: [] for m in methods}
    for seed in config.seeds:
        for m in methods:
            if m.startswith("learned"):
                cfg = config.replace(method="learned-u" if "-u-" in m else "learned-v",
                                     model_path=str(out / "models" / f"{m}.json"))
                rep = run_experiment(cfg, seed, label=m, model=models[m])
            else:
                rep = run_experiment(config.replace(method=m), seed)
            rep.method = m
            curves[m].append(rep.extra.pop("moments").variance_about_mean)
            reports.append(rep)
        clock.mark("rollouts")
    times = config.sim_params().dt * np.arange(config.sim_params().n_steps + 1)
    cols = {"t": times}
    cols.update({m: np.mean(curves[m], axis=0) for m in methods})
    io.write_columns_csv(out / "comparison.csv", cols)
    summary["timings"] = dict(clock.phases)
    summary["final_variance_about_mean"] = {
        m: [r.final_variance_about_mean for r in reports if r.method == m] for m in methods}
    summary["rollout_seconds"] = {
        m: [r.timings["rollout"] for r in reports if r.method == m] for m in methods}
    io.write_json(out / "test1_report.json", summary)
    return reports, summary


def run_pipeline_test2(config, tolerances=(1.0, 0.1)):
    """MdPC at each tolerance plus the uncontrolled reference for every seed.

    Returns ``(reports, summary)``; ``summary`` holds per-method final
    variances and update counts.
    """
    reports = []
    summary = {"final_variance": {}, "update_counts": {}}
    for seed in config.seeds:
        rep = run_experiment(config.replace(method="uncontrolled"), seed)
        rep.extra.pop("moments")
        reports.append(rep)
        summary["final_variance"].setdefault("uncontrolled", []).append(rep.final_variance)
        for tol in tolerances:
            label = f"mdpc-{tol:g}"
            try:
                rep = run_experiment(config.replace(method="mdpc", delta_tol=tol), seed, label=label)
            except FlockctlError as exc:
                raise _with_context(exc, f"{label}, seed {seed}")
            rep.extra.pop("moments")
            rep.method = label
            reports.append(rep)
            summary["final_variance"].setdefault(label, []).append(rep.final_variance)
            summary["update_counts"].setdefault(label, []).append(len(rep.update_times))
    io.write_json(Path(config.out) / "test2_report.json", summary)
    return reports, summary


def _best_of(fn, repeats):
    best = np.inf
    for _ in range(repeats):
        t = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t)
    return best


def bench(sizes=(10, 50, 200), dim=2, steps=200, repeats=3, seed=0):
    """Timings of the numpy and numba kernel paths (seconds, best of ``repeats``).

    Returns rows ``{kernel, N, numpy, numba, speedup}``; ``numba`` is NaN
    when numba is unavailable.
    """
    rng = np.random.default_rng(seed)
    rows = []
    for N in sizes:
        x = rng.uniform(size=(N, dim))
        v = rng.uniform(size=(N, dim))
        q = rng.normal(size=(N, dim))
        u = rng.normal(size=(steps, N, dim))
        cases = {
            "alignment": (lambda: kernels.alignment_numpy(x, v, 1.0, 1.0),
                          lambda: kernels.alignment_numba(x, v, 1.0, 1.0)),
            "adjoint_terms": (lambda: kernels.adjoint_terms_numpy(x, v, q, 1.0, 1.0),
                              lambda: kernels.adjoint_terms_numba(x, v, q, 1.0, 1.0)),
            "euler_sweep": (lambda: kernels.euler_sweep_numpy(x, v, u, 0.01, 1.0, 1.0, 0.1),
                            lambda: kernels.euler_sweep_numba(x, v, u, 0.01, 1.0, 1.0, 0.1)),
        }
        for name, (f_np, f_nb) in cases.items():
            inner = 1 if name == "euler_sweep" else steps
            t_np = _best_of(lambda: [f_np() for _ in range(inner)], repeats)
            if _jit.HAVE_NUMBA:
                f_nb()
                t_nb = _best_of(lambda: [f_nb() for _ in range(inner)], repeats)
            else:
                t_nb = float("nan")
            rows.append({"kernel": name, "N": N, "numpy": t_np, "numba": t_nb, "speedup": t_np / t_nb})
    return rows
