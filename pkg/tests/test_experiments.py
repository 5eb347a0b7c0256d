import json
from pathlib import Path

import numpy as np
import pytest
import yaml

from ddcacc.datagen import Trajectory
from ddcacc.experiments import (
    EXIT_INFEASIBLE,
    EXIT_OK,
    ConfigError,
    ControllerMetrics,
    ExperimentConfig,
    MetricsReport,
    build_platoon,
    compute_metrics,
    run_case,
    write_config_csv,
)
from ddcacc.plotting import emit_plots, gap_figure

from conftest import small_config


def _trajectory(errors, t_s=0.05, h_star=20.0):
    K1, n, _ = errors.shape
    t = t_s * np.arange(K1)
    states = np.zeros_like(errors)
    return Trajectory(t, states, errors, np.zeros((K1, n)), np.zeros((K1, n)), np.full(K1, 20.0), 0.0, t_s, h_star)


class TestConfig:
    def test_case1_defaults(self):
        cfg = ExperimentConfig.case1()
        assert (cfg.h_star, cfg.t_s, cfg.collection.T) == (20.0, 0.05, 500)
        assert cfg.initial_states == ((65.0, 20.0, 0.0), (40.0, 15.0, 0.0), (25.0, 18.0, 0.0), (0.0, 15.0, 0.0))
        assert cfg.vehicles == ("AV",) * 4 and cfg.profile.hold_s == 75.0
        cfg.validate()

    def test_case2_defaults(self):
        cfg = ExperimentConfig.case2()
        assert cfg.vehicles == ("AV", "HV", "AV")
        assert cfg.initial_states == ((45.0, 20.0, 0.0), (20.0, 15.0, 0.0), (0.0, 20.0, 0.0))
        hv = cfg.hv_params
        assert (hv["alpha"], hv["beta"], hv["tau"], hv["h_s"], hv["h_g"], hv["v_max"]) == (0.2, 0.4, 0.7, 5.0, 50.0, 40.0)

    def test_yaml_round_trip(self, tmp_path):
        cfg = ExperimentConfig.case2()
        cfg.synthesis.max_subplatoon = 2
        cfg.dump(tmp_path / "c.yaml")
        assert ExperimentConfig.load(tmp_path / "c.yaml").to_dict() == cfg.to_dict()

    def test_partial_override(self, tmp_path):
        (tmp_path / "c.yaml").write_text("seed: 7\nsynthesis:\n  eps1: 3.0\n")
        cfg = ExperimentConfig.load(tmp_path / "c.yaml")
        assert cfg.seed == 7 and cfg.synthesis.eps1 == 3.0 and cfg.synthesis.eps2 == 1.0

    @pytest.mark.parametrize("text", [
        "bogus: 1\n",
        "synthesis:\n  nope: 2\n",
        "collection:\n  T: 0\n",
        "vehicles: [HV, AV]\ninitial_states: [[20, 20, 0], [0, 20, 0]]\n",
        "initial_states: [[0, 20, 0]]\n",
        "profile:\n  file: /does/not/exist.csv\n",
        "perturbation: 1.5\n",
        "[1, 2\n",
    ])
    def test_invalid(self, tmp_path, text):
        (tmp_path / "c.yaml").write_text(text)
        with pytest.raises(ConfigError):
            ExperimentConfig.load(tmp_path / "c.yaml")

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError):
            ExperimentConfig.load(tmp_path / "absent.yaml")

    def test_perturbation_seeded(self):
        cfg = ExperimentConfig.case1()
        a, boxes = build_platoon(cfg)
        b, _ = build_platoon(cfg)
        assert a == b
        assert all(box.contains(v) for box, v in zip(boxes, a.vehicles))
        cfg.seed = 1
        assert build_platoon(cfg)[0] != a

    def test_hv_not_perturbed(self):
        spec, boxes = build_platoon(ExperimentConfig.case2())
        assert spec.vehicles[1] == boxes[1].nominal == boxes[1].upper

    def test_config_csv(self, tmp_path):
        write_config_csv({"a": 1.5, "b": {"c": [1, 2]}, "d": [{"e": 0.1}]}, tmp_path / "c.csv")
        lines = (tmp_path / "c.csv").read_text().splitlines()
        assert lines == ["key,value", "a,1.5", "b.c,\"[1, 2]\"", "d[0].e,0.1"]


class TestMetrics:
    def test_equilibrium(self):
        m = compute_metrics(_trajectory(np.zeros((100, 3, 3))), 20.0)
        assert np.all(m.rms_velocity == 0.0) and np.all(m.rms_spacing == 0.0)
        assert m.min_gap == 20.0 and m.rms_spacing.shape == (2,)

    @pytest.mark.parametrize("amp", [0.5, 3.0])
    def test_sinusoid(self, amp):
        # an integer number of periods on a uniform grid gives exactly A / sqrt(2)
        t = np.arange(2000) * 0.05
        err = np.zeros((2000, 2, 3))
        err[:, :, 1] = amp * np.sin(2 * np.pi * t / 10.0)[:, None]
        err[:, 1, 0] = amp * np.cos(2 * np.pi * t / 5.0)
        m = compute_metrics(_trajectory(err), 20.0)
        assert m.rms_velocity == pytest.approx([amp / np.sqrt(2)] * 2, rel=1e-12)
        assert m.rms_spacing == pytest.approx([amp / np.sqrt(2)], rel=1e-12)
        assert m.min_gap == pytest.approx(20.0 - amp)

    def test_window(self):
        err = np.zeros((100, 2, 3))
        err[:50, :, 1] = 5.0
        m = compute_metrics(_trajectory(err), 20.0, (2.5, None))
        assert np.all(m.rms_velocity == 0.0)

    def test_empty_window(self):
        with pytest.raises(ValueError):
            compute_metrics(_trajectory(np.zeros((10, 2, 3))), 20.0, (100.0, None))

    def test_report_round_trip(self, tmp_path):
        rep = MetricsReport(
            controllers={"cacc": ControllerMetrics(np.array([0.1, 1 / 3]), np.array([2 / 7]), 17.25, 99.5)},
            solve_times={"split_1": 1.25}, statuses={"split_1": "optimal"}, spectral_radii={"split_1": 0.97},
            window=(75.0, 675.0),
        )
        rep.to_csv(tmp_path / "m.csv", timings=True)
        back = MetricsReport.from_csv(tmp_path / "m.csv")
        assert back.rows() == rep.rows()

    def test_file_omits_timings_by_default(self, tmp_path):
        rep = MetricsReport(solve_times={"split_1": 1.25}, statuses={"split_1": "optimal"})
        rep.to_csv(tmp_path / "m.csv")
        assert "solve_time" not in (tmp_path / "m.csv").read_text()
        assert MetricsReport.from_csv(tmp_path / "m.csv").statuses == {"split_1": "optimal"}


class TestPlots:
    def test_empty_trajectory_writes_nothing(self, tmp_path):
        empty = _trajectory(np.zeros((0, 2, 3)))
        with pytest.raises(ValueError):
            emit_plots({"cacc": empty}, 20.0, tmp_path / "p")
        assert not (tmp_path / "p").exists() or not any((tmp_path / "p").iterdir())

    def test_files_and_reference_line(self, tmp_path):
        traj = _trajectory(np.random.default_rng(0).normal(size=(50, 3, 3)))
        files = emit_plots({"cacc": traj, "acc": traj}, 20.0, tmp_path)
        assert sorted(f.name for f in files) == ["gaps.svg", "velocity_deviation.svg"]
        assert sorted(p.name for p in tmp_path.iterdir()) == ["gaps.svg", "velocity_deviation.svg"]
        fig = gap_figure({"cacc": traj}, 20.0)
        flat = [ln for ln in fig.axes[0].lines if np.all(np.asarray(ln.get_ydata()) == 20.0)]
        assert flat and "desired gap" in flat[0].get_label()

    def test_unwritable_directory(self, tmp_path):
        blocker = tmp_path / "file"
        blocker.write_text("x")
        traj = _trajectory(np.zeros((5, 2, 3)))
        with pytest.raises(OSError):
            emit_plots({"cacc": traj}, 20.0, blocker / "sub")


@pytest.fixture(scope="module")
def small_run(tmp_path_factory):
    cfg = small_config(tmp_path_factory.mktemp("small"))
    return cfg, run_case(cfg)


class TestPipeline:
    def test_exit_and_artifacts(self, small_run):
        cfg, out = small_run
        assert out.exit_code == EXIT_OK, out.message
        names = sorted(p.name for p in Path(cfg.output_dir).iterdir())
        csvs = [n for n in names if n.endswith(".csv")]
        plots = [n for n in names if n.endswith(".svg")]
        assert sorted(csvs) == ["config.csv", "metrics.csv", "trajectory_acc.csv", "trajectory_cacc.csv"]
        assert sorted(plots) == ["gaps.svg", "velocity_deviation.svg"]

    def test_config_echo_has_drawn_parameters(self, small_run):
        cfg, _ = small_run
        echo = yaml.safe_load((Path(cfg.output_dir) / "config.yaml").read_text())
        assert len(echo["drawn_vehicles"]) == 2 and echo["drawn_vehicles"][0]["type"] == "AV"
        assert ExperimentConfig.from_dict({k: v for k, v in echo.items() if k != "drawn_vehicles"}).to_dict() == cfg.to_dict()

    def test_spacing_errors_decay(self, small_run):
        cfg, out = small_run
        traj = out.trajectories["cacc"]
        h = np.abs(traj.window(cfg.profile.hold_s).errors[:, 1:, 0])
        assert h[-40:].max() < 0.2 * max(h[:40].max(), 0.1)

    def test_metrics_file_matches_report(self, small_run):
        cfg, out = small_run
        back = MetricsReport.from_csv(Path(cfg.output_dir) / "metrics.csv")
        assert back.rows() == out.metrics.rows(timings=False)
        timings = json.loads((Path(cfg.output_dir) / "timings.json").read_text())
        assert timings == out.metrics.solve_times and timings["monolithic_1"] > 0

    def test_richness_refusal(self, tmp_path):
        cfg = small_config(tmp_path)
        cfg.collection.T = 9  # n_z - 1 for two AVs
        out = run_case(cfg)
        assert out.exit_code == EXIT_INFEASIBLE
        assert out.metrics.statuses["richness"] == "rank 9/10"
        assert (tmp_path / "out" / "status.txt").exists()
