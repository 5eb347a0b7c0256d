"""Command-line entry point.

Exit codes: 0 success, 2 infeasible synthesis, 3 simulation divergence,
4 configuration or I/O error.
"""
from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

import numpy as np

from .datagen import DataBatch, SimulationDiverged, Trajectory, check_richness, collect_data, simulate
from .dynamics import build_lifted_system
from .experiments import (
    EXIT_CONFIG,
    EXIT_DIVERGED,
    EXIT_INFEASIBLE,
    EXIT_OK,
    ConfigError,
    ExperimentConfig,
    MetricsReport,
    acc_controller,
    build_platoon,
    build_profile,
    compute_metrics,
    run_case,
    synthesize_groups,
    write_config_csv,
)
from .plotting import emit_plots
from .runtime import CaccController, ControllerBundle, ControllerFault
from .synthesis import split_subplatoons

log = logging.getLogger("ddcacc")


def _load_config(args, case: str | None = None) -> ExperimentConfig:
    base = ExperimentConfig.defaults(case or getattr(args, "case", None) or "case1")
    cfg = ExperimentConfig.load(args.config, base) if args.config else base
    if args.seed is not None:
        cfg.seed = args.seed
    if args.out is not None:
        cfg.output_dir = str(args.out)
    if getattr(args, "split", None) is not None:
        cfg.synthesis.max_subplatoon = args.split
    if getattr(args, "profile", None) is not None:
        cfg.profile.file = str(args.profile)
    cfg.validate()
    return cfg


def _emit_rows(rows, header, stream=None) -> None:
    writer = csv.writer(stream or sys.stdout, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)


def cmd_collect(args) -> int:
    cfg = _load_config(args)
    out = Path(cfg.output_dir)
    spec, _ = build_platoon(cfg)
    profile = build_profile(cfg)
    try:
        batch, traj = collect_data(spec, acc_controller(cfg, spec, dither=True), cfg.collection.T,
                                   np.asarray(cfg.initial_states, dtype=float), profile=profile,
                                   mode=cfg.collection.mode)
    except SimulationDiverged as exc:
        print(f"collection failed: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    out.mkdir(parents=True, exist_ok=True)
    batch.save(out / "data.npz")
    traj.to_csv(out / "trajectory_collect.csv")
    write_config_csv(cfg.to_dict(), out / "config.csv")
    rep = check_richness(batch.Z0)
    _emit_rows([[batch.T, rep.rank, rep.n_z, repr(rep.smallest_singular_value), batch.digest()]],
               ["T", "rank", "n_z", "smallest_singular_value", "digest"])
    return EXIT_OK


def cmd_synthesize(args) -> int:
    cfg = _load_config(args)
    out = Path(cfg.output_dir)
    spec, boxes = build_platoon(cfg)
    try:
        batch = DataBatch.load(args.data)
    except (OSError, KeyError, ValueError) as exc:
        raise ConfigError(f"cannot read data batch {args.data}: {exc}") from exc
    sys_full = build_lifted_system(spec)
    if batch.Z0.shape[0] != sys_full.n_z or batch.X1.shape[0] != sys_full.n_x:
        raise ConfigError("data batch does not match the configured platoon")
    sc = cfg.synthesis
    split = sc.max_subplatoon if sc.max_subplatoon is not None else spec.n
    groups = split_subplatoons(spec, split)
    results = synthesize_groups(cfg, spec, boxes, batch, groups)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for k, g in enumerate(results):
        g.result.save(out / f"synthesis_{k + 1}.npz")
        rows.append([k + 1, " ".join(str(i + 1) for i in g.group.indices), g.result.status,
                     repr(float(g.result.gamma)), repr(g.spectral_radius), repr(g.result.solve_time)])
    _emit_rows(rows, ["group", "vehicles", "status", "gamma", "spectral_radius", "solve_time"])
    if not all(g.result.feasible for g in results):
        return EXIT_INFEASIBLE
    bundle = ControllerBundle.from_groups(groups, [g.result.K for g in results], spec.t_s, spec.n)
    bundle.save(out / "controller.npz")
    return EXIT_OK


def cmd_simulate(args) -> int:
    """Collection segment under ACC, then the chosen controller for the rest of the profile."""
    cfg = _load_config(args)
    out = Path(cfg.output_dir)
    spec, _ = build_platoon(cfg)
    profile = build_profile(cfg)
    x0 = np.asarray(cfg.initial_states, dtype=float)
    try:
        _, collected = collect_data(spec, acc_controller(cfg, spec, dither=True), cfg.collection.T, x0,
                                    profile=profile, mode=cfg.collection.mode)
        if args.controller == "acc":
            ctl, name = acc_controller(cfg, spec, dither=False), "acc"
        else:
            try:
                bundle = ControllerBundle.load(args.controller)
            except (OSError, KeyError, ValueError) as exc:
                raise ConfigError(f"cannot read controller {args.controller}: {exc}") from exc
            if bundle.n_vehicles != spec.n:
                raise ConfigError("controller does not match the configured platoon")
            ctl, name = CaccController(bundle), "cacc"
        t0 = float(collected.t[-1])
        tail = simulate(spec, ctl, profile, profile.t_end - t0, collected.states[-1], t0=t0,
                        leader_offset=collected.leader_offset, substeps=cfg.evaluation.substeps)
    except (SimulationDiverged, ControllerFault) as exc:
        print(f"simulation diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    traj = collected.concat(tail)
    out.mkdir(parents=True, exist_ok=True)
    path = out / f"trajectory_{name}.csv"
    traj.to_csv(path)
    start = cfg.evaluation.start if cfg.evaluation.start is not None else cfg.profile.hold_s
    m = compute_metrics(traj, spec.h_star, (start, None))
    report = MetricsReport(controllers={name: m}, window=(start, float(traj.t[-1])))
    _emit_rows(report.rows(), ["section", "name", "quantity", "index", "value"])
    return EXIT_OK


def cmd_run(args) -> int:
    cfg = _load_config(args, case=args.case)
    outcome = run_case(cfg)
    _emit_rows(outcome.metrics.rows(), ["section", "name", "quantity", "index", "value"])
    if outcome.message:
        print(outcome.message, file=sys.stderr)
    return outcome.exit_code


def cmd_metrics(args) -> int:
    try:
        traj = Trajectory.from_csv(args.trajectory, h_star=args.h_star)
    except (OSError, ValueError) as exc:
        raise ConfigError(f"cannot read trajectory {args.trajectory}: {exc}") from exc
    m = compute_metrics(traj, args.h_star, (args.start, args.end))
    end = args.end if args.end is not None else float(traj.t[-1])
    report = MetricsReport(controllers={args.name: m}, window=(args.start, end))
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        report.to_csv(args.out)
    _emit_rows(report.rows(), ["section", "name", "quantity", "index", "value"])
    return EXIT_OK


def cmd_plot(args) -> int:
    trajs = {}
    for item in args.trajectory:
        name, _, path = item.partition("=")
        if not path:
            raise ConfigError(f"expected NAME=PATH, got {item!r}")
        try:
            trajs[name] = Trajectory.from_csv(path, h_star=args.h_star)
        except (OSError, ValueError) as exc:
            raise ConfigError(f"cannot read trajectory {path}: {exc}") from exc
    try:
        files = emit_plots(trajs, args.h_star, args.out, fmt=args.format)
    except OSError as exc:
        raise ConfigError(f"cannot write plots to {args.out}: {exc}") from exc
    for f in files:
        print(f)
    return EXIT_OK


class _Parser(argparse.ArgumentParser):
    """Usage errors exit with the configuration error code."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="ddcacc", description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, split=True):
        p.add_argument("--config", type=Path, help="YAML configuration file")
        p.add_argument("--seed", type=int, help="perturbation seed")
        p.add_argument("--out", type=Path, help="output directory")
        p.add_argument("--profile", type=Path, help="drive-cycle CSV (time_s,speed_mps)")
        if split:
            p.add_argument("--split", type=int, help="maximum sub-platoon size")

    p = sub.add_parser("collect", help="record a data batch under ACC with dither")
    common(p, split=False)
    p.add_argument("--case", choices=["case1", "case2"], default="case1")
    p.set_defaults(func=cmd_collect)

    p = sub.add_parser("synthesize", help="solve the synthesis problem for a recorded batch")
    common(p)
    p.add_argument("--case", choices=["case1", "case2"], default="case1")
    p.add_argument("--data", type=Path, required=True, help="data batch (.npz) from 'collect'")
    p.set_defaults(func=cmd_synthesize)

    p = sub.add_parser("simulate", help="evaluate a controller on the configured profile")
    common(p, split=False)
    p.add_argument("--case", choices=["case1", "case2"], default="case1")
    p.add_argument("--controller", required=True, help="controller bundle (.npz) or 'acc'")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("run", help="full pipeline for one case")
    p.add_argument("case", choices=["case1", "case2"])
    common(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("metrics", help="scalar metrics of a trajectory CSV")
    p.add_argument("--trajectory", type=Path, required=True)
    p.add_argument("--name", default="controller")
    p.add_argument("--h-star", type=float, default=20.0)
    p.add_argument("--start", type=float, default=75.0)
    p.add_argument("--end", type=float)
    p.add_argument("--out", type=Path, help="also write the metrics CSV here")
    p.set_defaults(func=cmd_metrics)

    p = sub.add_parser("plot", help="velocity and gap figures from trajectory CSVs")
    p.add_argument("--trajectory", action="append", required=True, metavar="NAME=PATH")
    p.add_argument("--h-star", type=float, default=20.0)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--format", choices=["svg", "pdf"], default="svg")
    p.set_defaults(func=cmd_plot)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
