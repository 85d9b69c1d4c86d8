"""CSV and JSON files for trajectories, moments, bounds, datasets and models.

Floats are written with Python's shortest round-trip representation, so every
file reads back bit-exactly.
"""
import csv
import json
from pathlib import Path

import numpy as np

from .ensemble import MomentTrace, Trajectory
from .errors import InputError
from .surrogate import Dataset, Network, NetworkSpec


def _agent_cols(prefix, N, d):
    return [f"{prefix}{i + 1}_{c + 1}" for i in range(N) for c in range(d)]


def _write_rows(path, header, rows):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)
    return path


def _read_rows(path):
    with Path(path).open(newline="") as fh:
        r = csv.reader(fh)
        header = next(r)
        rows = [row for row in r if row]
    return header, rows


def _floats(row):
    return [float(x) if x != "" else np.nan for x in row]


def write_trajectory_csv(path, traj):
    n1, N, d = traj.positions.shape
    header = ["t"] + _agent_cols("x", N, d) + _agent_cols("v", N, d) + _agent_cols("u", N, d)
    X = traj.positions.reshape(n1, -1).tolist()
    V = traj.velocities.reshape(n1, -1).tolist()
    U = traj.controls.reshape(n1 - 1, -1).tolist() + [[""] * (N * d)]
    rows = ([t] + x + v + u for t, x, v, u in zip(traj.times.tolist(), X, V, U))
    return _write_rows(path, header, rows)


def read_trajectory_csv(path):
    header, rows = _read_rows(path)
    m = (len(header) - 1) // 3
    last = header[1 + m - 1]
    N, d = (int(s) for s in last[1:].split("_"))
    A = np.array([_floats(r) for r in rows])
    n1 = A.shape[0]
    if not np.all(np.isnan(A[-1, 1 + 2 * m:])):
        raise InputError("last trajectory row must have empty controls")
    return Trajectory(A[:, 0].copy(),
                      A[:, 1:1 + m].reshape(n1, N, d).copy(),
                      A[:, 1 + m:1 + 2 * m].reshape(n1, N, d).copy(),
                      A[:-1, 1 + 2 * m:].reshape(n1 - 1, N, d).copy())


def write_moments_csv(path, moments):
    d = moments.mean_velocity.shape[1]
    header = ["t"] + [f"vbar_{c + 1}" for c in range(d)] + ["sigma2"]
    rows = ([t] + vb + [s] for t, vb, s in zip(moments.times.tolist(), moments.mean_velocity.tolist(),
                                             moments.variance.tolist()))
    return _write_rows(path, header, rows)


def read_moments_csv(path):
    """``MomentTrace`` with ``variance_about_mean`` left empty (not stored)."""
    header, rows = _read_rows(path)
    A = np.array([_floats(r) for r in rows])
    return MomentTrace(A[:, 0].copy(), A[:, 1:-1].copy(), A[:, -1].copy(), np.full(A.shape[0], np.nan))


def write_bounds_csv(path, times, lower, upper, sigma2):
    rows = zip(*(np.asarray(a, dtype=float).tolist() for a in (times, lower, upper, sigma2)))
    return _write_rows(path, ["t", "lower", "upper", "sigma2"], rows)


def read_bounds_csv(path):
    """Dict of the four columns."""
    header, rows = _read_rows(path)
    A = np.array([_floats(r) for r in rows])
    return {name: A[:, k].copy() for k, name in enumerate(header)}


def write_columns_csv(path, columns):
    """Equal-length named columns, in insertion order."""
    names = list(columns)
    arrays = [np.asarray(columns[k], dtype=float) for k in names]
    if len({a.shape for a in arrays}) > 1:
        raise InputError("all columns must have the same length")
    return _write_rows(path, names, zip(*(a.tolist() for a in arrays)))


def read_columns_csv(path):
    return read_bounds_csv(path)


def write_dataset_csv(path, dataset):
    m = dataset.n_agents * dataset.dim
    header = ([f"s_{k + 1}" for k in range(2 * m)] + [f"u_{k + 1}" for k in range(m)] + ["V"]
              + [f"gV_{k + 1}" for k in range(2 * m)])
    A = np.hstack([dataset.states, dataset.u, dataset.V[:, None], dataset.gradV])
    return _write_rows(path, header, A.tolist())


def read_dataset_csv(path, dim):
    """Dataset file back to :class:`Dataset`; ``dim`` is the agent dimension."""
    header, rows = _read_rows(path)
    m = sum(h.startswith("u_") for h in header)
    if m % dim:
        raise InputError(f"control width {m} not divisible by dim={dim}")
    A = np.array([_floats(r) for r in rows]).reshape(-1, len(header))
    return Dataset(A[:, :2 * m].copy(), A[:, 2 * m:3 * m].copy(), A[:, 3 * m].copy(),
                   A[:, 3 * m + 1:].copy(), m // dim, dim)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, Path):
        return str(obj)
    return obj


def write_json(path, obj):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(_jsonable(obj), indent=2, sort_keys=False) + "\n")
    return path


def read_json(path):
    return json.loads(Path(path).read_text())


def model_to_dict(net):
    s = net.spec
    return {
        "spec": {"input_dim": s.input_dim, "hidden_widths": list(s.hidden_widths),
                 "output_dim": s.output_dim, "structure": s.structure, "agent_dim": s.agent_dim},
        "activations": list(s.activations),
        "weights": [w.tolist() for w in net.weights],
        "biases": [b.tolist() for b in net.biases],
        "metadata": _jsonable(net.metadata),
    }


def model_from_dict(data):
    sd = data["spec"]
    spec = NetworkSpec(sd["input_dim"], tuple(sd["hidden_widths"]), sd["output_dim"],
                       tuple(data["activations"]), sd.get("structure", "plain"), sd.get("agent_dim"))
    weights = [np.array(w, dtype=float).reshape(o, i)
               for w, i, o in zip(data["weights"], spec.layer_sizes[:-1], spec.layer_sizes[1:])]
    biases = [np.array(b, dtype=float) for b in data["biases"]]
    return Network(spec, weights, biases, dict(data.get("metadata", {})))


def save_model(path, net):
    return write_json(path, model_to_dict(net))


def load_model(path):
    return model_from_dict(read_json(path))
