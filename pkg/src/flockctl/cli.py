"""Command line entry point (``flockctl``)."""
import argparse
import json
import logging
import sys
from pathlib import Path

from . import harness, io
from .errors import FlockctlError

RUN_COMMANDS = {"simulate": "uncontrolled", "pmp": "pmp", "sdre-mpc": "sdre-mpc", "mdpc": "mdpc"}


def _common(p):
    p.add_argument("--config", type=Path, help="INI experiment file")
    p.add_argument("--seed", type=int, help="single seed (overrides the seed list)")
    p.add_argument("--seeds", type=lambda s: tuple(int(x) for x in s.split(",")), help="comma-separated seeds")
    p.add_argument("--out", help="output directory")
    p.add_argument("--n", dest="n_agents", type=int, help="number of agents")
    p.add_argument("--gamma", type=float)
    p.add_argument("--horizon", type=float)
    p.add_argument("--dt", type=float)
    p.add_argument("--jobs", dest="n_jobs", type=int, help="worker processes")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser():
    ap = argparse.ArgumentParser(prog="flockctl", description="Consensus control of Cucker-Smale ensembles.")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in RUN_COMMANDS:
        p = sub.add_parser(name, help=f"run the {RUN_COMMANDS[name]} method")
        _common(p)
        if name == "mdpc":
            p.add_argument("--delta-tol", dest="delta_tol", type=float)
        if name == "sdre-mpc":
            p.add_argument("--refresh-steps", dest="refresh_steps", type=int)
    p = sub.add_parser("gen-data", help="label sampled states with a solver")
    _common(p)
    p.add_argument("--labeler", choices=("pmp", "sdre"))
    p.add_argument("--samples", type=int)
    p = sub.add_parser("train", help="fit a u-model or V-model to a dataset file")
    _common(p)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--kind", choices=("u", "V"), default="u")
    p.add_argument("--epochs", type=int)
    p.add_argument("--mu", type=float)
    p = sub.add_parser("rollout", help="closed-loop run with a trained model")
    _common(p)
    p.add_argument("--model", dest="model_path", required=True)
    for name in ("test1", "test2"):
        p = sub.add_parser(name, help=f"reproduction pipeline {name}")
        _common(p)
        if name == "test1":
            p.add_argument("--samples", type=int)
            p.add_argument("--epochs", type=int)
    p = sub.add_parser("bench", help="numpy versus numba kernel timings")
    p.add_argument("--sizes", type=lambda s: tuple(int(x) for x in s.split(",")), default=(10, 50, 200))
    p.add_argument("--steps", type=int, default=200)
    p.add_argument("--out")
    p.add_argument("-v", "--verbose", action="store_true")
    return ap


def _overrides(args, **extra):
    skip = {"command", "config", "seed", "verbose", "data", "kind", "sizes", "steps"}
    ov = {k: v for k, v in vars(args).items() if k not in skip and v is not None}
    if getattr(args, "seed", None) is not None:
        ov["seeds"] = (args.seed,)
    ov.update(extra)
    return ov


def _emit(obj):
    print(json.dumps(io._jsonable(obj), indent=2))


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return _dispatch(args)
    except (FlockctlError, OSError, ValueError, KeyError) as exc:
        print(f"flockctl {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


def _dispatch(args):
    cmd = args.command
    if cmd == "bench":
        rows = harness.bench(sizes=args.sizes, steps=args.steps)
        if args.out:
            io.write_json(Path(args.out) / "bench.json", rows)
        _emit(rows)
        return 0
    if cmd in RUN_COMMANDS or cmd == "rollout":
        method = RUN_COMMANDS.get(cmd)
        if cmd == "rollout":
            model = io.load_model(args.model_path)
            method = "learned-v" if model.spec.output_dim == 1 else "learned-u"
        config = harness.load_config(args.config, _overrides(args, method=method))
        reports = harness.run_seeds(config)
        _emit([{k: v for k, v in r.to_dict().items() if k != "config"} for r in reports])
        return 0
    if cmd == "gen-data":
        config = harness.load_config(args.config, _overrides(args))
        ds = harness.make_dataset(config, config.labeler, config.samples, config.data_seed)
        path = io.write_dataset_csv(Path(config.out) / f"dataset_{config.labeler}.csv", ds)
        _emit({"path": path, "samples": len(ds), "dropped": ds.dropped})
        return 0
    if cmd == "train":
        config = harness.load_config(args.config, _overrides(args))
        ds = io.read_dataset_csv(args.data, config.dim)
        config = config.replace(n_agents=ds.n_agents)
        net = harness.train_model(config, ds, args.kind)
        path = io.save_model(Path(config.out) / f"model_{args.kind}.json", net)
        _emit({"path": path, "final_loss": net.metadata["loss_history"][-1],
               "train_prmse": harness.model_prmse(net, ds)})
        return 0
    if cmd == "test1":
        config = harness.load_config(args.config, _overrides(args))
        _, summary = harness.run_pipeline_test1(config)
        _emit(summary)
        return 0
    if cmd == "test2":
        ov = _overrides(args)
        config = harness.load_config(args.config, ov)
        if args.config is None and "velocity_box" not in ov:
            config = config.replace(velocity_box=(-1.0, 1.0))
        _, summary = harness.run_pipeline_test2(config)
        _emit(summary)
        return 0
    raise AssertionError(cmd)


if __name__ == "__main__":
    sys.exit(main())
