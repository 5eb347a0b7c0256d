import pytest

from ddcacc.experiments import ExperimentConfig


def small_config(tmp_path, **synthesis):
    """Two nominal AVs on a constant 20 m/s profile: a fast end-to-end run."""
    profile = tmp_path / "constant.csv"
    profile.write_text("time_s,speed_mps\n0,20\n40,20\n")
    cfg = ExperimentConfig.from_dict({
        "name": "small",
        "vehicles": ["AV", "AV"],
        "initial_states": [[40.0, 20.5, 0.0], [20.0, 19.5, 0.0]],
        "perturbation": 0.0,
        "acc": {"dither": 2.0},
        "profile": {"file": str(profile), "hold_s": 30.0},
        "synthesis": {"grid": False, "eps1": 100.0, "eps2": 0.1, **synthesis},
        "output_dir": str(tmp_path / "out"),
    })
    return cfg


@pytest.fixture
def small_cfg(tmp_path):
    return small_config(tmp_path)


# one line per acceptance criterion, filled in by test_acceptance
ACCEPTANCE: dict = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[key]
        terminalreporter.write_line(f"criterion {key}: {'PASS' if ok else 'FAIL'}  {detail}")
