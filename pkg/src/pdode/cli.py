"""Command-line interface.

Subcommands: ``generate``, ``simulate``, ``estimate``, ``evaluate``,
``demo bottleneck``, and ``experiment``.  Exit codes: 0 success, 1 usage
error, 2 data error, 3 non-convergence (estimate only; artifacts are
still written).
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NOT_CONVERGED = 3


class _Parser(argparse.ArgumentParser):
    """argparse exits with code 2 on usage errors; the contract wants 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> _Parser:
    parser = _Parser(prog="pdode", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    gen = sub.add_parser("generate", help="build ground-truth demand and route shares")
    gen.add_argument("--config", required=True)
    gen.add_argument("--out", required=True)

    sim = sub.add_parser("simulate", help="simulate multi-day observed flows")
    sim.add_argument("--config", required=True)
    sim.add_argument("--truth", required=True, help="directory written by generate")
    sim.add_argument("--out", required=True)

    est = sub.add_parser("estimate", help="estimate demand from observed flows")
    est.add_argument("--network", required=True)
    est.add_argument("--obs", required=True, help="observations CSV")
    est.add_argument("--out", required=True)
    est.add_argument("--distance", default="w2",
                     choices=["l1", "l2", "w2", "kl", "bhattacharyya"])
    est.add_argument("--samples", type=int, default=10, help="demand samples per pass")
    est.add_argument("--epochs", type=int, default=200)
    est.add_argument("--seed", type=int, default=0)
    est.add_argument("--ddode", action="store_true", help="freeze the std at its floor")
    est.add_argument("--interval-length", type=float, default=100.0, help="seconds")
    est.add_argument("--num-intervals", type=int, default=None,
                     help="default: inferred from the observations file")
    est.add_argument("--batch-size", type=int, default=10)
    est.add_argument("--learning-rate", type=float, default=0.3)
    est.add_argument("--optimizer", default="adagrad",
                     choices=["adagrad", "adam", "adadelta"])
    est.add_argument("--tolerance", type=float, default=1e-3)
    est.add_argument("--dispersion", type=float, default=0.1)
    est.add_argument("--max-paths", type=int, default=10)
    est.add_argument("--paths", default=None, help="fixed path table file")
    est.add_argument("--q-init-max", type=float, default=None)

    ev = sub.add_parser("evaluate", help="score an estimate against the truth")
    ev.add_argument("--truth", required=True, help="directory written by generate")
    ev.add_argument("--estimate", required=True, help="directory written by estimate")
    ev.add_argument("--out", required=True, help="report JSON file")
    ev.add_argument("--eval-samples", type=int, default=200)
    ev.add_argument("--seed", type=int, default=0)

    demo = sub.add_parser("demo", help="built-in demonstrations")
    demo_sub = demo.add_subparsers(dest="demo_name", required=True, parser_class=_Parser)
    bn = demo_sub.add_parser("bottleneck", help="capacity-censoring bias demo")
    bn.add_argument("--capacity", type=float, default=2000.0, help="veh/hour")
    bn.add_argument("--inflow-mean", type=float, default=2000.0, help="veh/hour")
    bn.add_argument("--inflow-std", type=float, default=200.0, help="veh/hour")
    bn.add_argument("--days", type=int, default=200)
    bn.add_argument("--epochs", type=int, default=120)
    bn.add_argument("--seed", type=int, default=0)
    bn.add_argument("--out", default=None, help="optional report JSON file")

    exp = sub.add_parser("experiment", help="run a full config-driven study")
    exp.add_argument("--config", required=True)
    exp.add_argument("--out", required=True)

    return parser


def _study_from_config(config_path):
    from .experiment import load_config, load_study

    cfg = load_config(config_path)
    return load_study(cfg)


def cmd_generate(args) -> int:
    from .evaluate import generate_truth
    from .demand import pdod_to_csv
    from .experiment import _parse_demand_spec, choice_to_csv, load_config, load_study

    cfg = load_config(args.config)
    setup = load_study(cfg)
    eq = cfg.get("equilibrium", {})
    spec = _parse_demand_spec(cfg["demand_spec"])
    truth, choice = generate_truth(
        setup.net, setup.paths, setup.grid, spec,
        seed=int(eq.get("seed", 0)),
        dispersion=float(eq.get("dispersion", 0.1)),
        equilibrium_samples=int(eq.get("num_samples", 10)),
        equilibrium_max_iters=int(eq.get("max_iters", 50)),
        equilibrium_tol=float(eq.get("tol", 1e-4)),
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    pdod_to_csv(truth, setup.net.num_od_pairs, out / "truth_pdod.csv")
    choice_to_csv(choice, out / "equilibrium_p.csv")
    meta = {
        "network_file": str(Path(cfg["_config_dir"]) / cfg["network"]["file"]),
        "paths": cfg.get("paths", {}),
        "time_grid": cfg["time_grid"],
        "equilibrium": eq,
        "observation": cfg.get("observation", {}),
    }
    with open(out / "meta.json", "w", encoding="utf-8") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(f"wrote truth demand and route shares to {out}")
    return EXIT_OK


def _load_truth_dir(truth_dir):
    from .demand import pdod_from_csv
    from .experiment import choice_from_csv
    from .net import TimeGrid, enumerate_paths, load_network, load_paths

    truth_dir = Path(truth_dir)
    with open(truth_dir / "meta.json", encoding="utf-8") as fh:
        meta = json.load(fh)
    net = load_network(meta["network_file"])
    paths_cfg = meta.get("paths", {})
    if "file" in paths_cfg:
        paths = load_paths(net, paths_cfg["file"])
    else:
        paths = enumerate_paths(net, int(paths_cfg.get("max_paths_per_od", 10)))
    grid = TimeGrid(
        num_intervals=int(meta["time_grid"]["num_intervals"]),
        interval_length=float(meta["time_grid"]["interval_length"]),
    )
    truth = pdod_from_csv(truth_dir / "truth_pdod.csv")
    dispersion = float(meta.get("equilibrium", {}).get("dispersion", 0.1))
    choice = choice_from_csv(truth_dir / "equilibrium_p.csv", dispersion)
    return net, paths, grid, truth, choice, meta


def cmd_simulate(args) -> int:
    from .evaluate import observations_to_csv, simulate_observations
    from .experiment import load_config

    cfg = load_config(args.config)
    net, paths, grid, truth, choice, _meta = _load_truth_dir(args.truth)
    ob = cfg["observation"]
    obs = simulate_observations(
        net, paths, grid, truth, choice,
        days=int(ob["days"]),
        observed_link_ids=[int(l) for l in ob["observed_links"]],
        noise_std=float(ob.get("noise_std", 0.0)),
        seed=int(ob.get("seed", 0)),
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    observations_to_csv(obs, out / "observations.csv")
    print(f"wrote {obs.days} days of observations to {out / 'observations.csv'}")
    return EXIT_OK


def cmd_estimate(args) -> int:
    from .estimator import EstimationConfig, estimate
    from .demand import pdod_to_csv
    from .evaluate import observations_from_csv
    from .experiment import loss_history_to_csv
    from .net import TimeGrid, enumerate_paths, load_network, load_paths

    net = load_network(args.network)
    obs = observations_from_csv(args.obs)
    if args.paths:
        paths = load_paths(net, args.paths)
    else:
        paths = enumerate_paths(net, args.max_paths)
    num_intervals = args.num_intervals or obs.num_intervals
    grid = TimeGrid(num_intervals=num_intervals, interval_length=args.interval_length)
    if obs.num_intervals != grid.num_intervals:
        raise ValueError(
            f"observations cover {obs.num_intervals} intervals, expected {grid.num_intervals}"
        )
    cfg = EstimationConfig(
        distance_kind=args.distance,
        num_samples=args.samples,
        batch_size=args.batch_size,
        optimizer=args.optimizer,
        learning_rate=args.learning_rate,
        max_epochs=args.epochs,
        tolerance=args.tolerance,
        seed=args.seed,
        ddode_mode=args.ddode,
        dispersion=args.dispersion,
        q_init_max=args.q_init_max,
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    state = estimate(net, paths, grid, obs.flows, obs.observed_indices(net), cfg)
    pdod_to_csv(state.pdod, net.num_od_pairs, out / "estimated_pdod.csv")
    loss_history_to_csv(state, out / "loss_history.csv")
    meta = {
        "status": state.status,
        "epochs": state.epoch,
        "distance": cfg.distance_kind.value,
        "ddode_mode": cfg.ddode_mode,
        "seed": cfg.seed,
        "observations_file": str(Path(args.obs).resolve()),
        "observed_links": list(obs.observed_link_ids),
    }
    with open(out / "meta.json", "w", encoding="utf-8") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")
    final_loss = state.loss_history[-1][1]
    print(f"status={state.status} epochs={state.epoch} final_loss={final_loss:.6g}")
    if state.status != "converged":
        return EXIT_NOT_CONVERGED
    return EXIT_OK


def cmd_evaluate(args) -> int:
    from .demand import pdod_from_csv
    from .evaluate import evaluate
    from .experiment import report_to_json

    net, paths, grid, truth, choice, meta = _load_truth_dir(args.truth)
    est_dir = Path(args.estimate)
    estimated = pdod_from_csv(est_dir / "estimated_pdod.csv")
    with open(est_dir / "meta.json", encoding="utf-8") as fh:
        est_meta = json.load(fh)
    observed_links = [int(l) for l in est_meta["observed_links"]]
    eq = meta.get("equilibrium", {})
    report = evaluate(
        truth, choice, estimated, net, paths, grid, observed_links,
        num_eval_samples=args.eval_samples,
        seed=args.seed,
        dispersion=float(eq.get("dispersion", 0.1)),
        equilibrium_samples=int(eq.get("num_samples", 10)),
        equilibrium_max_iters=int(eq.get("max_iters", 50)),
        equilibrium_tol=float(eq.get("tol", 1e-4)),
    )
    report_to_json(report, args.out)
    for name, score in report.scores().items():
        print(f"{name}={score:.6g}")
    return EXIT_OK


def cmd_demo_bottleneck(args) -> int:
    from .evaluate import bottleneck_demo
    from .experiment import fmt

    report = bottleneck_demo(
        capacity_vph=args.capacity,
        inflow_mean_vph=args.inflow_mean,
        inflow_std_vph=args.inflow_std,
        days=args.days,
        max_epochs=args.epochs,
        seed=args.seed,
    )
    for name, value in report.scores().items():
        print(f"{name}={fmt(value)}")
    if args.out:
        payload = {k: float(fmt(v)) for k, v in report.scores().items()}
        with open(args.out, "w", encoding="utf-8") as fh:
            json.dump(payload, fh, indent=2, sort_keys=True)
            fh.write("\n")
    return EXIT_OK


def cmd_experiment(args) -> int:
    from .experiment import run_experiment

    result = run_experiment(args.config, args.out)
    print(f"experiment complete; artifacts in {result.out_dir}")
    for name in result.manifest.get("artifacts", []):
        print(f"  {name}")
    return EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    handlers = {
        "generate": cmd_generate,
        "simulate": cmd_simulate,
        "estimate": cmd_estimate,
        "evaluate": cmd_evaluate,
        "experiment": cmd_experiment,
    }
    try:
        if args.command == "demo":
            return cmd_demo_bottleneck(args)
        return handlers[args.command](args)
    except (ValueError, KeyError, OSError, json.JSONDecodeError) as exc:
        print(f"pdode: error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except RuntimeError as exc:  # includes ExperimentError and EstimationError
        print(f"pdode: error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
