"""Experiment configuration, the end-to-end case pipelines and scalar metrics."""
from __future__ import annotations

import csv
import dataclasses
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import yaml

from .datagen import (
    AccController,
    DataBatch,
    ReferenceProfile,
    SimulationDiverged,
    Trajectory,
    bundled_cycle_path,
    check_richness,
    collect_data,
    load_drive_cycle,
    restrict_batch,
    simulate,
)
from .dynamics import (
    CASE1_NOMINAL,
    CASE2_HV,
    HvParams,
    ParamBox,
    PlatoonSpec,
    VehicleParams,
    build_lifted_system,
    disturbance_bound,
    params_to_dict,
    perturb_params,
)
from .runtime import CaccController, ControllerBundle, ControllerFault
from .synthesis import SubPlatoon, SynthesisResult, SynthesisSettings, split_subplatoons, synthesize, verify_closed_loop

log = logging.getLogger(__name__)

EXIT_OK, EXIT_INFEASIBLE, EXIT_DIVERGED, EXIT_CONFIG = 0, 2, 3, 4


class ConfigError(ValueError):
    """Invalid configuration or unreadable input file."""


# ---------------------------------------------------------------------------
# configuration


@dataclass
class AccConfig:
    k_p: float = 0.23
    k_v: float = 0.74
    nominal_mass: float = 1500.0
    # dither amplitude in m/s^2-equivalent (scaled by the nominal mass)
    dither: float = 1.5
    dither_hold: Optional[float] = 0.25
    dither_seed: int = 1


@dataclass
class CollectionConfig:
    T: int = 500
    mode: str = "high_fidelity"


@dataclass
class ProfileConfig:
    file: Optional[str] = None  # None selects the bundled US06 cycle
    units: Optional[str] = None
    hold_s: float = 75.0
    hold_speed: float = 20.0
    transition_s: float = 10.0
    interpolation: str = "linear"


@dataclass
class SynthesisConfig:
    eps1: float = 1.0
    eps2: float = 1.0
    lam1: float = 1.0
    lam2: float = 0.1
    norm: str = "spectral"
    grid: bool = True
    grid_eps1: tuple = (1.0, 10.0, 100.0)
    grid_eps2: tuple = (0.01, 0.1, 1.0)
    backend: str = "clarabel"
    max_subplatoon: Optional[int] = None  # None deploys one controller for the whole platoon
    time_monolithic: bool = False  # also solve the whole-platoon problem when splitting
    delta: Optional[float] = None  # override of the bound computed from the parameter box
    delta_inflation: float = 1.0  # factor on delta for sub-platoons not led by the platoon leader

    def settings(self) -> SynthesisSettings:
        return SynthesisSettings(
            eps1=self.eps1, eps2=self.eps2, lam1=self.lam1, lam2=self.lam2, norm=self.norm,
            grid=False, backend=self.backend,
        )

    @property
    def eps_pairs(self) -> list[tuple[float, float]]:
        if not self.grid:
            return [(float(self.eps1), float(self.eps2))]
        return [(float(a), float(b)) for a in self.grid_eps1 for b in self.grid_eps2]


@dataclass
class EvaluationConfig:
    start: Optional[float] = None  # metrics window start; None uses the end of the hold
    substeps: int = 10


@dataclass
class ExperimentConfig:
    name: str = "case1"
    vehicles: tuple = ("AV", "AV", "AV", "AV")
    av_nominal: dict = field(default_factory=lambda: dataclasses.asdict(CASE1_NOMINAL))
    hv_params: dict = field(default_factory=lambda: dataclasses.asdict(CASE2_HV))
    h_star: float = 20.0
    v_star: float = 20.0
    t_s: float = 0.05
    initial_states: tuple = ((65.0, 20.0, 0.0), (40.0, 15.0, 0.0), (25.0, 18.0, 0.0), (0.0, 15.0, 0.0))
    perturbation: float = 0.1
    seed: int = 0
    acc: AccConfig = field(default_factory=AccConfig)
    collection: CollectionConfig = field(default_factory=CollectionConfig)
    profile: ProfileConfig = field(default_factory=ProfileConfig)
    synthesis: SynthesisConfig = field(default_factory=SynthesisConfig)
    evaluation: EvaluationConfig = field(default_factory=EvaluationConfig)
    output_dir: str = "out"
    plot_format: str = "svg"

    @classmethod
    def case1(cls) -> "ExperimentConfig":
        return cls(output_dir="out/case1")

    @classmethod
    def case2(cls) -> "ExperimentConfig":
        return cls(
            name="case2",
            vehicles=("AV", "HV", "AV"),
            initial_states=((45.0, 20.0, 0.0), (20.0, 15.0, 0.0), (0.0, 20.0, 0.0)),
            output_dir="out/case2",
        )

    @classmethod
    def defaults(cls, case: str) -> "ExperimentConfig":
        try:
            return {"case1": cls.case1, "case2": cls.case2}[case]()
        except KeyError:
            raise ConfigError(f"unknown case {case!r}") from None

    # -- (de)serialization ------------------------------------------------
    def to_dict(self) -> dict:
        return _plain(dataclasses.asdict(self))

    @classmethod
    def from_dict(cls, data: dict, base: Optional["ExperimentConfig"] = None) -> "ExperimentConfig":
        if not isinstance(data, dict):
            raise ConfigError("configuration must be a mapping")
        if base is None:
            # custom names start from the Case 1 defaults
            name = str(data.get("name", "case1"))
            base = cls.defaults(name if name in ("case1", "case2") else "case1")
        try:
            cfg = _merge(base, data)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path, base: Optional["ExperimentConfig"] = None) -> "ExperimentConfig":
        try:
            with open(path, encoding="utf-8") as fh:
                data = yaml.safe_load(fh) or {}
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except yaml.YAMLError as exc:
            raise ConfigError(f"malformed config {path}: {exc}") from exc
        return cls.from_dict(data, base)

    def dump(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            yaml.safe_dump(self.to_dict(), fh, sort_keys=False)

    def validate(self) -> None:
        types = [str(v).upper() for v in self.vehicles]
        if not types or any(t not in ("AV", "HV") for t in types):
            raise ConfigError("vehicles must be a non-empty list of 'AV'/'HV'")
        if types[0] != "AV":
            raise ConfigError("the platoon leader must be an AV")
        self.vehicles = tuple(types)
        states = np.asarray(self.initial_states, dtype=float)
        if states.shape != (len(types), 3):
            raise ConfigError(f"initial_states needs {len(types)} rows of (p, v, a)")
        if np.any(np.diff(states[:, 0]) >= 0):
            raise ConfigError("initial positions must decrease along the platoon")
        if self.collection.T < 1:
            raise ConfigError("collection.T must be at least 1")
        if self.collection.mode not in ("high_fidelity", "design"):
            raise ConfigError(f"unknown collection mode {self.collection.mode!r}")
        if not 0 <= self.perturbation < 1:
            raise ConfigError("perturbation must lie in [0, 1)")
        if self.profile.file is not None and not Path(self.profile.file).is_file():
            raise ConfigError(f"profile file {self.profile.file} does not exist")
        if self.synthesis.max_subplatoon is not None and self.synthesis.max_subplatoon < 1:
            raise ConfigError("synthesis.max_subplatoon must be at least 1")
        if self.plot_format not in ("svg", "pdf"):
            raise ConfigError("plot_format must be 'svg' or 'pdf'")
        try:
            VehicleParams(**self.av_nominal)
            HvParams(**self.hv_params)
            self.synthesis.settings()
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc
        if self.collection.T * self.t_s > self.profile.hold_s + 1e-9:
            raise ConfigError("data collection must fit inside the constant-speed hold")


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    return obj


def _merge(base, data: dict):
    """Returns a copy of dataclass ``base`` with fields from ``data``; unknown keys are errors."""
    names = {f.name: f for f in dataclasses.fields(base)}
    updates = {}
    for key, val in data.items():
        if key not in names:
            raise ConfigError(f"unknown config key {key!r} in {type(base).__name__}")
        cur = getattr(base, key)
        if dataclasses.is_dataclass(cur):
            if not isinstance(val, dict):
                raise ConfigError(f"{key} must be a mapping")
            updates[key] = _merge(cur, val)
        elif isinstance(cur, dict) and isinstance(val, dict):
            merged = dict(cur)
            merged.update(val)
            updates[key] = merged
        elif isinstance(cur, tuple) and isinstance(val, list):
            updates[key] = tuple(tuple(v) if isinstance(v, list) else v for v in val)
        else:
            updates[key] = val
    return dataclasses.replace(base, **updates)


# ---------------------------------------------------------------------------
# building blocks


def build_platoon(cfg: ExperimentConfig) -> tuple[PlatoonSpec, list[ParamBox]]:
    """Draws the true AV parameters around the nominal values and returns the parameter boxes."""
    rng = np.random.default_rng(cfg.seed)
    nominal = VehicleParams(**cfg.av_nominal)
    hv = HvParams(**cfg.hv_params)
    vehicles, boxes = [], []
    for kind in cfg.vehicles:
        if kind == "AV":
            vehicles.append(perturb_params(nominal, cfg.perturbation, rng))
            boxes.append(ParamBox.around(nominal, cfg.perturbation))
        else:
            vehicles.append(hv)
            boxes.append(ParamBox.point(hv))
    spec = PlatoonSpec(tuple(vehicles), h_star=cfg.h_star, v_star=cfg.v_star, t_s=cfg.t_s)
    return spec, boxes


def build_profile(cfg: ExperimentConfig) -> ReferenceProfile:
    p = cfg.profile
    path = Path(p.file) if p.file else bundled_cycle_path()
    try:
        return load_drive_cycle(path, hold_s=p.hold_s, hold_speed=p.hold_speed, transition_s=p.transition_s,
                                units=p.units, mode=p.interpolation)
    except OSError as exc:
        raise ConfigError(f"cannot read profile {path}: {exc}") from exc


def acc_controller(cfg: ExperimentConfig, spec: PlatoonSpec, dither: bool) -> AccController:
    a = cfg.acc
    return AccController(
        spec, a.nominal_mass, k_p=a.k_p, k_v=a.k_v,
        dither=a.dither if dither else 0.0, dither_until=cfg.collection.T * cfg.t_s,
        seed=a.dither_seed, dither_hold=a.dither_hold,
    )


@dataclass
class GroupSynthesis:
    group: SubPlatoon
    batch: DataBatch
    result: SynthesisResult
    delta: float
    spectral_radius: Optional[float] = None


def synthesize_groups(cfg: ExperimentConfig, spec: PlatoonSpec, boxes, full_batch: DataBatch,
                      groups: list[SubPlatoon]) -> list[GroupSynthesis]:
    """One SDP per group on the group's rows of the collected data."""
    sc = cfg.synthesis
    out = []
    for grp in groups:
        sub_sys = build_lifted_system(grp.spec)
        batch = restrict_batch(full_batch, spec, grp.indices)
        if sc.delta is not None:
            delta = float(sc.delta)
        else:
            delta, _ = disturbance_bound([boxes[i] for i in grp.indices], grp.spec)
        if not grp.leading:
            delta *= sc.delta_inflation
        best, last, total = None, None, 0.0
        for e1, e2 in sc.eps_pairs:
            settings = dataclasses.replace(sc.settings(), eps1=e1, eps2=e2)
            last = synthesize(batch, sub_sys.D, delta, settings, seed=cfg.seed)
            total += last.solve_time
            if last.feasible and (best is None or _objective(last) < _objective(best)):
                best = last
        chosen = best if best is not None else last
        chosen.residuals = dict(chosen.residuals, total_solve_time=total)
        rho = verify_closed_loop(chosen, batch, sub_sys.D).spectral_radius if chosen.feasible else None
        log.info("group %s: status=%s gamma=%.4g rho=%s time=%.2fs", grp.indices, chosen.status,
                 chosen.gamma, rho, total)
        out.append(GroupSynthesis(grp, batch, chosen, delta, rho))
    return out


def _objective(res: SynthesisResult) -> float:
    return res.lam1 * res.gamma + res.lam2 * res.eta


# ---------------------------------------------------------------------------
# metrics


@dataclass
class ControllerMetrics:
    rms_velocity: np.ndarray  # per vehicle
    rms_spacing: np.ndarray  # per inter-vehicle gap (followers 2..n)
    min_gap: float
    max_abs_u: float


@dataclass
class MetricsReport:
    controllers: dict = field(default_factory=dict)
    solve_times: dict = field(default_factory=dict)
    statuses: dict = field(default_factory=dict)
    spectral_radii: dict = field(default_factory=dict)
    window: tuple = (0.0, 0.0)

    def rows(self, timings: bool = True) -> list[list]:
        """Report rows; ``timings=False`` drops the machine-dependent solve times."""
        rows = [["window", "", "start", "", repr(float(self.window[0]))],
                ["window", "", "end", "", repr(float(self.window[1]))]]
        for name, m in self.controllers.items():
            for i, val in enumerate(m.rms_velocity):
                rows.append(["controller", name, "rms_velocity", i + 1, repr(float(val))])
            for i, val in enumerate(m.rms_spacing):
                rows.append(["controller", name, "rms_spacing", i + 2, repr(float(val))])
            rows.append(["controller", name, "min_gap", "", repr(float(m.min_gap))])
            rows.append(["controller", name, "max_abs_u", "", repr(float(m.max_abs_u))])
        for key, val in (self.solve_times.items() if timings else ()):
            rows.append(["synthesis", key, "solve_time", "", repr(float(val))])
        for key, val in self.statuses.items():
            rows.append(["synthesis", key, "status", "", val])
        for key, val in self.spectral_radii.items():
            rows.append(["synthesis", key, "spectral_radius", "", repr(float(val))])
        return rows

    def to_csv(self, path, timings: bool = False) -> None:
        """Writes the report; solve times are left out by default so reruns are byte-identical."""
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["section", "name", "quantity", "index", "value"])
            writer.writerows(self.rows(timings))

    @classmethod
    def from_csv(cls, path) -> "MetricsReport":
        rep = cls()
        acc: dict = {}
        start = end = 0.0
        with open(path, newline="", encoding="utf-8") as fh:
            for row in csv.DictReader(fh):
                sec, name, qty, val = row["section"], row["name"], row["quantity"], row["value"]
                if sec == "window":
                    start, end = (float(val), end) if qty == "start" else (start, float(val))
                elif sec == "controller":
                    acc.setdefault(name, {}).setdefault(qty, []).append(float(val))
                elif qty == "solve_time":
                    rep.solve_times[name] = float(val)
                elif qty == "status":
                    rep.statuses[name] = val
                elif qty == "spectral_radius":
                    rep.spectral_radii[name] = float(val)
        for name, d in acc.items():
            rep.controllers[name] = ControllerMetrics(
                np.array(d.get("rms_velocity", [])), np.array(d.get("rms_spacing", [])),
                d["min_gap"][0], d["max_abs_u"][0],
            )
        rep.window = (start, end)
        return rep


def compute_metrics(traj: Trajectory, h_star: float, window: tuple[float, Optional[float]] = (0.0, None)) -> ControllerMetrics:
    """RMS velocity deviation per vehicle, RMS spacing error per gap, minimum gap and peak effort."""
    try:
        w = traj.window(*window)
    except ValueError:
        raise ValueError("empty metrics window") from None
    v_err = w.errors[:, :, 1]
    h_err = w.errors[:, 1:, 0]
    rms_v = np.sqrt(np.mean(v_err**2, axis=0))
    rms_h = np.sqrt(np.mean(h_err**2, axis=0)) if h_err.shape[1] else np.zeros(0)
    gaps = h_err + h_star
    min_gap = float(gaps.min()) if gaps.size else float("inf")
    return ControllerMetrics(rms_v, rms_h, min_gap, float(np.abs(w.u).max()))


# ---------------------------------------------------------------------------
# pipelines


@dataclass
class CaseOutcome:
    config: ExperimentConfig
    spec: PlatoonSpec
    exit_code: int
    metrics: MetricsReport
    trajectories: dict = field(default_factory=dict)
    deployed: list = field(default_factory=list)  # GroupSynthesis of the evaluated controller
    monolithic: list = field(default_factory=list)
    collection: Optional[Trajectory] = None
    message: str = ""
    files: list = field(default_factory=list)


def run_case(cfg: ExperimentConfig, outdir: Optional[Path] = None, write: bool = True) -> CaseOutcome:
    """Collect under ACC, synthesize, evaluate CACC and ACC on the full profile, and write artifacts."""
    cfg.validate()
    outdir = Path(outdir or cfg.output_dir)
    spec, boxes = build_platoon(cfg)
    profile = build_profile(cfg)
    x0 = np.asarray(cfg.initial_states, dtype=float)
    T = cfg.collection.T
    eval_start = cfg.evaluation.start if cfg.evaluation.start is not None else cfg.profile.hold_s
    metrics = MetricsReport(window=(float(eval_start), float(profile.t_end)))
    outcome = CaseOutcome(cfg, spec, EXIT_OK, metrics)

    try:
        batch, collected = collect_data(spec, acc_controller(cfg, spec, dither=True), T, x0, profile=profile,
                                        mode=cfg.collection.mode)
    except SimulationDiverged as exc:
        outcome.exit_code, outcome.message = EXIT_DIVERGED, f"data collection failed: {exc}"
        return _finish(outcome, outdir, write)
    outcome.collection = collected
    richness = check_richness(batch.Z0)
    metrics.statuses["richness"] = f"rank {richness.rank}/{richness.n_z}"

    sc = cfg.synthesis
    split = sc.max_subplatoon is not None and sc.max_subplatoon < spec.n
    whole = split_subplatoons(spec, spec.n)
    try:
        groups = split_subplatoons(spec, sc.max_subplatoon) if split else whole
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    deployed = synthesize_groups(cfg, spec, boxes, batch, groups)
    outcome.deployed = deployed
    tag = "split" if split else "monolithic"
    for k, g in enumerate(deployed):
        key = f"{tag}_{k + 1}"
        metrics.solve_times[key] = g.result.solve_time
        metrics.solve_times[key + "_grid_total"] = g.result.residuals.get("total_solve_time", g.result.solve_time)
        metrics.statuses[key] = g.result.status
        if g.spectral_radius is not None:
            metrics.spectral_radii[key] = g.spectral_radius
    if split and sc.time_monolithic:
        outcome.monolithic = synthesize_groups(cfg, spec, boxes, batch, whole)
        mono = outcome.monolithic[0]
        metrics.solve_times["monolithic_1"] = mono.result.solve_time
        metrics.solve_times["monolithic_1_grid_total"] = mono.result.residuals.get("total_solve_time", 0.0)
        metrics.statuses["monolithic_1"] = mono.result.status
        if mono.spectral_radius is not None:
            metrics.spectral_radii["monolithic_1"] = mono.spectral_radius

    if not all(g.result.feasible for g in deployed):
        bad = [g.group.indices for g in deployed if not g.result.feasible]
        outcome.exit_code = EXIT_INFEASIBLE
        outcome.message = f"synthesis infeasible for vehicle groups {bad}"
        return _finish(outcome, outdir, write)

    bundle = ControllerBundle.from_groups([g.group for g in deployed], [g.result.K for g in deployed], spec.t_s, spec.n)
    t0 = float(collected.t[-1])
    duration = profile.t_end - t0
    runs = {"cacc": CaccController(bundle), "acc": acc_controller(cfg, spec, dither=False)}
    for name, ctl in runs.items():
        try:
            tail = simulate(spec, ctl, profile, duration, collected.states[-1], t0=t0,
                            leader_offset=collected.leader_offset, substeps=cfg.evaluation.substeps)
        except (SimulationDiverged, ControllerFault) as exc:
            outcome.exit_code = EXIT_DIVERGED
            outcome.message = f"{name} evaluation diverged: {exc}"
            return _finish(outcome, outdir, write, bundle=bundle)
        full = collected.concat(tail)
        outcome.trajectories[name] = full
        metrics.controllers[name] = compute_metrics(full, spec.h_star, (eval_start, None))
        gaps = full.errors[:, 1:, 0] + spec.h_star
        if gaps.size and gaps.min() <= 0:
            log.warning("%s run has a collision (min gap %.3f m)", name, gaps.min())
    return _finish(outcome, outdir, write, bundle=bundle)


def _finish(outcome: CaseOutcome, outdir: Path, write: bool, bundle: Optional[ControllerBundle] = None) -> CaseOutcome:
    if not write:
        return outcome
    from .plotting import emit_plots

    try:
        outdir.mkdir(parents=True, exist_ok=True)
        files = []
        cfg_echo = outcome.config.to_dict()
        cfg_echo["drawn_vehicles"] = _plain([params_to_dict(v) for v in outcome.spec.vehicles])
        with open(outdir / "config.yaml", "w", encoding="utf-8") as fh:
            yaml.safe_dump(cfg_echo, fh, sort_keys=False)
        write_config_csv(cfg_echo, outdir / "config.csv")
        files += [outdir / "config.yaml", outdir / "config.csv"]
        outcome.metrics.to_csv(outdir / "metrics.csv")
        files.append(outdir / "metrics.csv")
        if outcome.metrics.solve_times:
            with open(outdir / "timings.json", "w", encoding="utf-8") as fh:
                json.dump(outcome.metrics.solve_times, fh, indent=2)
        for name, traj in outcome.trajectories.items():
            traj.to_csv(outdir / f"trajectory_{name}.csv")
            files.append(outdir / f"trajectory_{name}.csv")
        for k, g in enumerate(outcome.deployed):
            g.result.save(outdir / f"synthesis_{k + 1}.npz")
            g.batch.save(outdir / f"data_{k + 1}.npz")
        if bundle is not None:
            bundle.save(outdir / "controller.npz")
        if outcome.message:
            (outdir / "status.txt").write_text(outcome.message + "\n", encoding="utf-8")
        if outcome.trajectories:
            files += emit_plots(outcome.trajectories, outcome.spec.h_star, outdir, fmt=outcome.config.plot_format)
        outcome.files = files
    except OSError as exc:
        outcome.exit_code = EXIT_CONFIG
        outcome.message = f"cannot write artifacts to {outdir}: {exc}"
    return outcome


def write_config_csv(cfg: dict, path) -> None:
    """Flattened ``key,value`` echo of a nested configuration."""
    rows = []

    def walk(prefix, obj):
        if isinstance(obj, dict):
            for k, v in obj.items():
                walk(f"{prefix}.{k}" if prefix else str(k), v)
        elif isinstance(obj, list) and obj and isinstance(obj[0], (dict, list)):
            for i, v in enumerate(obj):
                walk(f"{prefix}[{i}]", v)
        else:
            rows.append([prefix, repr(obj) if isinstance(obj, float) else obj])

    walk("", cfg)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["key", "value"])
        writer.writerows(rows)


def run_case1(cfg: Optional[ExperimentConfig] = None, outdir=None, write: bool = True) -> CaseOutcome:
    return run_case(cfg or ExperimentConfig.case1(), outdir, write)


def run_case2(cfg: Optional[ExperimentConfig] = None, outdir=None, write: bool = True) -> CaseOutcome:
    return run_case(cfg or ExperimentConfig.case2(), outdir, write)
