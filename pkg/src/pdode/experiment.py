"""Experiment harness: config-driven generate/simulate/estimate/evaluate runs.

A JSON config describes one study; :func:`run_experiment` executes the
stages and writes plain-CSV/JSON artifacts to an output directory so any
plotting tool can work with them.  All floating point output uses six
significant digits, and every stage is seeded, so reruns of the same
config are byte-identical.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .behavior import RouteChoiceMatrix
from .demand import PDOD, pdod_to_csv
from .distance import DistanceKind
from .estimator import EstimationConfig, EstimationState, estimate
from .evaluate import (
    BottleneckReport,
    EvaluationReport,
    ObservationSet,
    TriangularDemandSpec,
    UniformDemandSpec,
    bottleneck_demo,
    evaluate,
    generate_truth,
    observations_to_csv,
    simulate_observations,
)
from .net import Network, PathTable, TimeGrid, enumerate_paths, load_network, load_paths


class ExperimentError(RuntimeError):
    """A stage failed; the message carries the stage tag."""

    def __init__(self, stage: str, message: str):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage


def fmt(value: float) -> str:
    """Project-wide float formatting: six significant digits."""
    return f"{float(value):.6g}"


def data_path(name: str) -> Path:
    """Path of a bundled data file (network or config)."""
    return Path(__file__).parent / "data" / name


def load_config(config_file) -> dict:
    path = Path(config_file)
    if not path.exists():
        raise ExperimentError("config", f"config file not found: {path}")
    try:
        with open(path, encoding="utf-8") as fh:
            cfg = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ExperimentError("config", f"{path}: invalid JSON: {exc}") from exc
    if not isinstance(cfg, dict):
        raise ExperimentError("config", f"{path}: top level must be an object")
    cfg["_config_dir"] = str(path.parent.resolve())
    return cfg


def _resolve_file(cfg: dict, name: str) -> Path:
    """Resolve a file reference relative to the config's directory."""
    p = Path(name)
    if not p.is_absolute():
        p = Path(cfg.get("_config_dir", ".")) / p
    return p


def _parse_demand_spec(section: dict):
    kind = section.get("kind")
    fields = {k: v for k, v in section.items() if k != "kind"}
    try:
        if kind == "triangular":
            return TriangularDemandSpec(**fields)
        if kind == "uniform":
            return UniformDemandSpec(**fields)
    except (TypeError, ValueError) as exc:
        raise ExperimentError("config", f"bad demand_spec: {exc}") from exc
    raise ExperimentError("config", f"unknown demand_spec kind {kind!r}")


def _parse_distances(names) -> list[DistanceKind]:
    try:
        return [DistanceKind.from_name(str(n)) for n in names]
    except ValueError as exc:
        raise ExperimentError("config", str(exc)) from exc


@dataclass
class StudySetup:
    """Loaded network, paths, grid, and the parsed config sections."""

    net: Network
    paths: PathTable
    grid: TimeGrid
    config: dict


def load_study(cfg: dict) -> StudySetup:
    try:
        net_file = _resolve_file(cfg, cfg["network"]["file"])
        net = load_network(net_file)
        paths_cfg = cfg.get("paths", {})
        if "file" in paths_cfg:
            paths = load_paths(net, _resolve_file(cfg, paths_cfg["file"]))
        else:
            paths = enumerate_paths(net, int(paths_cfg.get("max_paths_per_od", 10)))
        tg = cfg["time_grid"]
        grid = TimeGrid(
            num_intervals=int(tg["num_intervals"]),
            interval_length=float(tg["interval_length"]),
        )
    except ExperimentError:
        raise
    except (KeyError, TypeError) as exc:
        raise ExperimentError("config", f"missing or malformed section: {exc}") from exc
    except ValueError as exc:
        raise ExperimentError("network", str(exc)) from exc
    return StudySetup(net=net, paths=paths, grid=grid, config=cfg)


def choice_to_csv(choice: RouteChoiceMatrix, out_file) -> None:
    """Route shares as rows (interval, path_index, od_index, prob)."""
    with open(out_file, "w", newline="", encoding="utf-8") as fh:
        fh.write("interval,path_index,od_index,prob\n")
        for h in range(choice.num_intervals):
            for k in range(choice.num_paths):
                fh.write(f"{h + 1},{k},{choice.od_of[k]},{fmt(choice.probs[h, k])}\n")


def choice_from_csv(in_file, dispersion: float) -> RouteChoiceMatrix:
    rows = []
    with open(in_file, newline="", encoding="utf-8") as fh:
        header = fh.readline().strip()
        if header != "interval,path_index,od_index,prob":
            raise ValueError(f"{in_file}: unexpected route-share header {header!r}")
        for line in fh:
            line = line.strip()
            if line:
                h, k, od, p = line.split(",")
                rows.append((int(h), int(k), int(od), float(p)))
    if not rows:
        raise ValueError(f"{in_file}: empty route-share file")
    num_h = max(r[0] for r in rows)
    num_k = max(r[1] for r in rows) + 1
    probs = np.zeros((num_h, num_k))
    od_of = [0] * num_k
    for h, k, od, p in rows:
        probs[h - 1, k] = p
        od_of[k] = od
    return RouteChoiceMatrix(
        probs=probs,
        dispersion=dispersion,
        od_of=tuple(od_of),
        num_od_pairs=max(od_of) + 1,
    )


def loss_history_to_csv(state: EstimationState, out_file) -> None:
    with open(out_file, "w", newline="", encoding="utf-8") as fh:
        fh.write("epoch,loss\n")
        for epoch, loss in state.loss_history:
            fh.write(f"{epoch},{fmt(loss)}\n")


def report_to_json(report: EvaluationReport, out_file) -> None:
    payload = {k: float(fmt(v)) for k, v in report.scores().items()}
    with open(out_file, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def scatter_to_csv(report: EvaluationReport, name: str, out_file) -> None:
    truth, estimated = report.scatter[name]
    with open(out_file, "w", newline="", encoding="utf-8") as fh:
        fh.write("true,estimated\n")
        for t, e in zip(truth, estimated):
            fh.write(f"{fmt(t)},{fmt(e)}\n")


@dataclass
class ExperimentResult:
    """In-memory handles to everything an experiment produced."""

    out_dir: Path
    manifest: dict
    truth: PDOD | None = None
    truth_choice: RouteChoiceMatrix | None = None
    observations: ObservationSet | None = None
    states: dict[str, EstimationState] = field(default_factory=dict)
    reports: dict[str, EvaluationReport] = field(default_factory=dict)
    bottleneck: BottleneckReport | None = None


def _estimation_labels(est_cfg: dict) -> list[tuple[str, DistanceKind, bool]]:
    """(label, distance, ddode_mode) per estimation run in the config."""
    distances = _parse_distances(est_cfg.get("distances", ["w2"]))
    runs = [(kind.value, kind, False) for kind in distances]
    if est_cfg.get("include_ddode", False):
        ddode_kind = DistanceKind.from_name(est_cfg.get("ddode_distance", "l2"))
        runs.append(("ddode", ddode_kind, True))
    return runs


def run_estimation_study(cfg: dict, out_dir: Path) -> ExperimentResult:
    setup = load_study(cfg)
    net, paths, grid = setup.net, setup.paths, setup.grid
    result = ExperimentResult(out_dir=out_dir, manifest={})
    timings: dict[str, float] = {}

    stage = "generate"
    t0 = time.time()
    try:
        spec = _parse_demand_spec(cfg["demand_spec"])
        eq = cfg.get("equilibrium", {})
        truth, truth_choice = generate_truth(
            net, paths, grid, spec,
            seed=int(eq.get("seed", 0)),
            dispersion=float(eq.get("dispersion", 0.1)),
            equilibrium_samples=int(eq.get("num_samples", 10)),
            equilibrium_max_iters=int(eq.get("max_iters", 50)),
            equilibrium_tol=float(eq.get("tol", 1e-4)),
        )
    except ExperimentError:
        raise
    except Exception as exc:
        raise ExperimentError(stage, str(exc)) from exc
    timings[stage] = time.time() - t0
    truth_dir = out_dir / "truth"
    truth_dir.mkdir(parents=True, exist_ok=True)
    pdod_to_csv(truth, net.num_od_pairs, truth_dir / "truth_pdod.csv")
    choice_to_csv(truth_choice, truth_dir / "equilibrium_p.csv")
    result.truth, result.truth_choice = truth, truth_choice

    stage = "simulate"
    t0 = time.time()
    try:
        ob = cfg["observation"]
        observed_links = [int(l) for l in ob["observed_links"]]
        observations = simulate_observations(
            net, paths, grid, truth, truth_choice,
            days=int(ob["days"]),
            observed_link_ids=observed_links,
            noise_std=float(ob.get("noise_std", 0.0)),
            seed=int(ob.get("seed", 0)),
        )
    except ExperimentError:
        raise
    except Exception as exc:
        raise ExperimentError(stage, str(exc)) from exc
    timings[stage] = time.time() - t0
    observations_to_csv(observations, out_dir / "observations.csv")
    result.observations = observations

    stage = "estimate"
    est_cfg = cfg.get("estimation", {})
    runs = _estimation_labels(est_cfg)
    observed_idx = observations.observed_indices(net)
    base_seed = int(est_cfg.get("seed", 0))
    for offset, (label, kind, ddode) in enumerate(runs):
        t0 = time.time()
        try:
            run_cfg = EstimationConfig(
                distance_kind=kind,
                num_samples=int(est_cfg.get("num_samples", 10)),
                batch_size=int(est_cfg.get("batch_size", 10)),
                optimizer=str(est_cfg.get("optimizer", "adagrad")),
                learning_rate=float(est_cfg.get("learning_rate", 0.3)),
                max_epochs=int(est_cfg.get("max_epochs", 200)),
                tolerance=float(est_cfg.get("tolerance", 1e-3)),
                seed=base_seed + offset,
                ddof=int(est_cfg.get("ddof", 1)),
                ddode_mode=ddode,
                dispersion=float(cfg.get("equilibrium", {}).get("dispersion", 0.1)),
                q_init_max=est_cfg.get("q_init_max"),
            )
            state = estimate(net, paths, grid, observations.flows, observed_idx, run_cfg)
        except ExperimentError:
            raise
        except Exception as exc:
            raise ExperimentError(stage, f"{label}: {exc}") from exc
        timings[f"{stage}:{label}"] = time.time() - t0
        run_dir = out_dir / "estimates" / label
        run_dir.mkdir(parents=True, exist_ok=True)
        pdod_to_csv(state.pdod, net.num_od_pairs, run_dir / "estimated_pdod.csv")
        loss_history_to_csv(state, run_dir / "loss_history.csv")
        with open(run_dir / "run.json", "w", encoding="utf-8") as fh:
            json.dump(
                {"status": state.status, "epochs": state.epoch, "seed": run_cfg.seed,
                 "distance": kind.value, "ddode_mode": ddode},
                fh, indent=2, sort_keys=True,
            )
            fh.write("\n")
        result.states[label] = state

    stage = "evaluate"
    ev = cfg.get("evaluation", {})
    eval_dir = out_dir / "evaluation"
    eval_dir.mkdir(parents=True, exist_ok=True)
    eq = cfg.get("equilibrium", {})
    for label, state in result.states.items():
        t0 = time.time()
        try:
            report = evaluate(
                truth, truth_choice, state.pdod, net, paths, grid,
                observed_link_ids=observations.observed_link_ids,
                num_eval_samples=int(ev.get("num_eval_samples", 200)),
                seed=int(ev.get("seed", 0)),
                dispersion=float(eq.get("dispersion", 0.1)),
                equilibrium_samples=int(eq.get("num_samples", 10)),
                equilibrium_max_iters=int(eq.get("max_iters", 50)),
                equilibrium_tol=float(eq.get("tol", 1e-4)),
            )
        except ExperimentError:
            raise
        except Exception as exc:
            raise ExperimentError(stage, f"{label}: {exc}") from exc
        timings[f"{stage}:{label}"] = time.time() - t0
        report_to_json(report, eval_dir / f"report_{label}.json")
        for name in report.scatter:
            scatter_to_csv(report, name, eval_dir / f"scatter_{label}_{name}.csv")
        result.reports[label] = report

    comparison = out_dir / "comparison.csv"
    with open(comparison, "w", newline="", encoding="utf-8") as fh:
        fh.write(
            "label,r2_ol_mean,r2_ol_std,r2_al_mean,r2_al_std,r2_od_mean,r2_od_std,"
            "final_loss,epochs,status\n"
        )
        for label, report in result.reports.items():
            state = result.states[label]
            scores = report.scores()
            fh.write(
                ",".join(
                    [label]
                    + [fmt(scores[k]) for k in (
                        "r2_ol_mean", "r2_ol_std", "r2_al_mean",
                        "r2_al_std", "r2_od_mean", "r2_od_std",
                    )]
                    + [fmt(state.loss_history[-1][1]), str(state.epoch), state.status]
                )
                + "\n"
            )

    result.manifest = {
        "experiment": "estimation",
        "stages": ["generate", "simulate", "estimate", "evaluate"],
        "labels": [label for label, *_ in runs],
        "timings_seconds": {k: float(fmt(v)) for k, v in timings.items()},
        "artifacts": sorted(
            str(p.relative_to(out_dir)) for p in out_dir.rglob("*") if p.is_file()
        ),
    }
    return result


def run_bottleneck_study(cfg: dict, out_dir: Path) -> ExperimentResult:
    t0 = time.time()
    try:
        report = bottleneck_demo(
            capacity_vph=float(cfg.get("capacity_vph", 2000.0)),
            inflow_mean_vph=float(cfg.get("inflow_mean_vph", 2000.0)),
            inflow_std_vph=float(cfg.get("inflow_std_vph", 200.0)),
            days=int(cfg.get("days", 200)),
            num_intervals=int(cfg.get("num_intervals", 10)),
            interval_length=float(cfg.get("interval_length", 100.0)),
            seed=int(cfg.get("seed", 0)),
            num_samples=int(cfg.get("num_samples", 20)),
            batch_size=int(cfg.get("batch_size", 20)),
            max_epochs=int(cfg.get("max_epochs", 120)),
            learning_rate=float(cfg.get("learning_rate", 0.5)),
        )
    except ExperimentError:
        raise
    except Exception as exc:
        raise ExperimentError("bottleneck", str(exc)) from exc
    payload = {k: float(fmt(v)) for k, v in report.scores().items()}
    with open(out_dir / "bottleneck_report.json", "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
    manifest = {
        "experiment": "bottleneck",
        "stages": ["bottleneck"],
        "timings_seconds": {"bottleneck": float(fmt(time.time() - t0))},
        "artifacts": ["bottleneck_report.json", "manifest.json"],
    }
    return ExperimentResult(out_dir=out_dir, manifest=manifest, bottleneck=report)


def run_experiment(config_file, out_dir) -> ExperimentResult:
    """Execute the config's stages and write all artifacts under out_dir."""
    cfg = load_config(config_file)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    kind = cfg.get("experiment", "estimation")
    if kind == "estimation":
        result = run_estimation_study(cfg, out_dir)
    elif kind == "bottleneck":
        result = run_bottleneck_study(cfg, out_dir)
    else:
        raise ExperimentError("config", f"unknown experiment kind {kind!r}")
    with open(out_dir / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(result.manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return result
