"""Platoon simulation, data collection and reference-profile handling."""
from __future__ import annotations

import csv
import hashlib
import logging
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from .dynamics import (
    HvParams,
    LiftedSystem,
    PlatoonSpec,
    VehicleParams,
    air_resistance,
    build_lifted_system,
    hv_disturbance,
    av_disturbance,
    lift,
    range_policy,
)

log = logging.getLogger(__name__)

SPEED_UNITS = {"mps": 1.0, "kph": 1.0 / 3.6, "mph": 0.44704}


class DriveCycleError(ValueError):
    pass


class SimulationDiverged(RuntimeError):
    """Raised when a state or control becomes non-finite."""

    def __init__(self, message: str, t: float, step: int):
        super().__init__(f"{message} at t={t:.3f} s (step {step})")
        self.t = t
        self.step = step


# ---------------------------------------------------------------------------
# reference profiles


@dataclass(frozen=True)
class ReferenceProfile:
    """Reference speed as a function of time.

    ``mode`` is ``"linear"`` (piecewise-linear between knots) or ``"zoh"``
    (each knot's speed held until the next knot).
    """

    times: np.ndarray
    speeds: np.ndarray
    mode: str = "linear"
    _cum: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        t = np.asarray(self.times, dtype=float)
        s = np.asarray(self.speeds, dtype=float)
        if t.ndim != 1 or t.shape != s.shape or t.size == 0:
            raise ValueError("times and speeds must be equal-length 1-D arrays")
        if np.any(np.diff(t) <= 0):
            raise ValueError("profile times must be strictly increasing")
        if np.any(s < 0) or not np.all(np.isfinite(s)):
            raise ValueError("profile speeds must be finite and non-negative")
        if self.mode not in ("linear", "zoh"):
            raise ValueError(f"unknown interpolation mode {self.mode!r}")
        object.__setattr__(self, "times", t)
        object.__setattr__(self, "speeds", s)
        dt = np.diff(t)
        if self.mode == "linear":
            seg = 0.5 * (s[:-1] + s[1:]) * dt
        else:
            seg = s[:-1] * dt
        object.__setattr__(self, "_cum", np.concatenate([[0.0], np.cumsum(seg)]))

    @classmethod
    def constant(cls, speed: float, duration: float) -> "ReferenceProfile":
        return cls(np.array([0.0, duration]), np.array([speed, speed]))

    @property
    def t_end(self) -> float:
        return float(self.times[-1])

    @property
    def duration(self) -> float:
        return float(self.times[-1] - self.times[0])

    def speed(self, t):
        t = np.asarray(t, dtype=float)
        if self.mode == "linear":
            out = np.interp(t, self.times, self.speeds)
        else:
            idx = np.clip(np.searchsorted(self.times, t, side="right") - 1, 0, len(self.times) - 1)
            out = self.speeds[idx]
        return float(out) if out.ndim == 0 else out

    def position(self, t) -> float:
        """Distance covered by a vehicle driving exactly at the reference."""
        return virtual_leader_position(self, t)


def virtual_leader_position(profile: ReferenceProfile, t: float) -> float:
    t0, t1 = profile.times[0], profile.times[-1]
    if not t0 - 1e-12 <= t <= t1 + 1e-9:
        raise ValueError(f"t={t} outside profile range [{t0}, {t1}]")
    t = min(max(t, t0), t1)
    k = int(np.clip(np.searchsorted(profile.times, t, side="right") - 1, 0, len(profile.times) - 2))
    tk, sk = profile.times[k], profile.speeds[k]
    tau = t - tk
    if profile.mode == "linear":
        slope = (profile.speeds[k + 1] - sk) / (profile.times[k + 1] - tk)
        part = sk * tau + 0.5 * slope * tau * tau
    else:
        part = sk * tau
    return float(profile._cum[k] + part)


def _read_cycle_rows(path: Path, units: Optional[str]):
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DriveCycleError(f"{path}: empty file") from None
        if len(header) != 2 or header[0] != "time_s" or not header[1].startswith("speed_"):
            raise DriveCycleError(f"{path}: expected header 'time_s,speed_mps', got {','.join(header)!r}")
        col_unit = header[1][len("speed_"):]
        unit = units or col_unit
        if unit not in SPEED_UNITS:
            raise DriveCycleError(f"{path}: unknown speed unit {unit!r}")
        times, speeds = [], []
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != 2:
                raise DriveCycleError(f"{path}:{lineno}: expected 2 fields, got {len(row)}")
            try:
                times.append(float(row[0]))
                speeds.append(float(row[1]) * SPEED_UNITS[unit])
            except ValueError:
                raise DriveCycleError(f"{path}:{lineno}: malformed row {','.join(row)!r}") from None
    if not times:
        raise DriveCycleError(f"{path}: no samples")
    times, speeds = np.array(times), np.array(speeds)
    bad = np.nonzero(np.diff(times) <= 0)[0]
    if bad.size:
        raise DriveCycleError(f"{path}:{bad[0] + 3}: time is not strictly increasing")
    if np.any(speeds < 0):
        raise DriveCycleError(f"{path}: negative speed")
    return times, speeds


def load_drive_cycle(
    path,
    hold_s: float = 75.0,
    hold_speed: float = 20.0,
    transition_s: float = 10.0,
    units: Optional[str] = None,
    mode: str = "linear",
) -> ReferenceProfile:
    """Reads a ``time_s,speed_mps`` CSV and prepends a constant-speed hold.

    The cycle's first sample lands at ``t = hold_s``.  When that sample's
    speed differs from ``hold_speed`` the cycle is delayed by
    ``transition_s`` and the two are joined by a linear ramp.
    """
    times, speeds = _read_cycle_rows(Path(path), units)
    times = times - times[0]
    if hold_s <= 0:
        return ReferenceProfile(times, speeds, mode)
    if np.isclose(speeds[0], hold_speed):
        knots_t = np.concatenate([[0.0], hold_s + times])
        knots_v = np.concatenate([[hold_speed], speeds])
    else:
        if transition_s <= 0:
            raise DriveCycleError("transition_s must be positive when the cycle starts off the hold speed")
        knots_t = np.concatenate([[0.0, hold_s], hold_s + transition_s + times])
        knots_v = np.concatenate([[hold_speed, hold_speed], speeds])
    return ReferenceProfile(knots_t, knots_v, mode)


def bundled_cycle_path(name: str = "us06") -> Path:
    return Path(str(resources.files("ddcacc") / "data" / f"{name}.csv"))


# ---------------------------------------------------------------------------
# simulation


@dataclass
class Trajectory:
    """Uniformly sampled platoon run.  Arrays are indexed ``[step, vehicle]``."""

    t: np.ndarray
    states: np.ndarray  # (K+1, n, 3): p, v, a
    errors: np.ndarray  # (K+1, n, 3): h_err, v_err, a
    u: np.ndarray  # (K+1, n) effort applied from t[k] to t[k+1]
    w: np.ndarray  # (K+1, n)
    ref_speed: np.ndarray  # (K+1,)
    leader_offset: float
    t_s: float
    h_star: float = 0.0

    def __len__(self):
        return len(self.t)

    @property
    def gaps(self) -> np.ndarray:
        """Inter-vehicular distances; column 0 is the leader's virtual gap."""
        return self.errors[:, :, 0] + self.h_star

    def select(self, indices) -> "Trajectory":
        """Restriction to a subset of vehicles (errors keep their true predecessors)."""
        idx = list(indices)
        return Trajectory(
            self.t, self.states[:, idx], self.errors[:, idx], self.u[:, idx], self.w[:, idx],
            self.ref_speed, self.leader_offset, self.t_s, self.h_star,
        )

    def concat(self, other: "Trajectory") -> "Trajectory":
        """Joins a continuation run whose first sample repeats our last one."""
        if not np.isclose(other.t[0], self.t[-1]):
            raise ValueError("continuation must start at the final sample")
        return Trajectory(
            t=np.concatenate([self.t, other.t[1:]]),
            states=np.concatenate([self.states, other.states[1:]]),
            errors=np.concatenate([self.errors, other.errors[1:]]),
            u=np.concatenate([self.u[:-1], other.u]),
            w=np.concatenate([self.w, other.w[1:]]),
            ref_speed=np.concatenate([self.ref_speed, other.ref_speed[1:]]),
            leader_offset=self.leader_offset,
            t_s=self.t_s,
            h_star=self.h_star,
        )

    def window(self, t_start: float, t_end: float | None = None) -> "Trajectory":
        mask = self.t >= t_start - 1e-9
        if t_end is not None:
            mask &= self.t <= t_end + 1e-9
        if not mask.any():
            raise ValueError("empty window")
        return Trajectory(
            self.t[mask], self.states[mask], self.errors[mask], self.u[mask], self.w[mask],
            self.ref_speed[mask], self.leader_offset, self.t_s, self.h_star,
        )

    def to_csv(self, path) -> None:
        """One row per vehicle per step: ``t, vehicle, p, v, a, u, h_err, v_err, w``."""
        n = self.states.shape[1]
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["t", "vehicle", "p", "v", "a", "u", "h_err", "v_err", "w"])
            for k in range(len(self.t)):
                for i in range(n):
                    p, v, a = self.states[k, i]
                    writer.writerow(
                        [
                            repr(float(self.t[k])), i + 1, repr(float(p)), repr(float(v)),
                            repr(float(a)), repr(float(self.u[k, i])),
                            repr(float(self.errors[k, i, 0])), repr(float(self.errors[k, i, 1])),
                            repr(float(self.w[k, i])),
                        ]
                    )

    @classmethod
    def from_csv(cls, path, t_s: float | None = None, h_star: float = 0.0) -> "Trajectory":
        data = np.genfromtxt(path, delimiter=",", names=True)
        if data.size == 0:
            raise ValueError(f"{path}: empty trajectory")
        data = np.atleast_1d(data)
        n = int(data["vehicle"].max())
        K1 = data.size // n
        grid = lambda col: data[col].reshape(K1, n)
        t = grid("t")[:, 0]
        states = np.stack([grid("p"), grid("v"), grid("a")], axis=-1)
        errors = np.stack([grid("h_err"), grid("v_err"), grid("a")], axis=-1)
        ref = states[:, 0, 1] - errors[:, 0, 1]
        t_s = t_s if t_s is not None else float(t[1] - t[0]) if K1 > 1 else 0.0
        return cls(t, states, errors, grid("u"), grid("w"), ref, 0.0, t_s, h_star)


Controller = Callable[[float, np.ndarray], np.ndarray]


class _PlatoonModel:
    """Vectorized continuous-time right-hand side of the true platoon."""

    def __init__(self, spec: PlatoonSpec):
        self.spec = spec
        n = spec.n
        self.is_av = np.array([isinstance(v, VehicleParams) for v in spec.vehicles])
        nan = np.full(n, np.nan)
        self.tau = np.array([v.tau for v in spec.vehicles])
        self.m, self.R, self.d = nan.copy(), nan.copy(), nan.copy()
        self.alpha, self.beta = nan.copy(), nan.copy()
        self.hv = [i for i in range(n) if not self.is_av[i]]
        for i, veh in enumerate(spec.vehicles):
            if isinstance(veh, VehicleParams):
                self.m[i], self.R[i], self.d[i] = veh.m, air_resistance(veh), veh.d
            else:
                self.alpha[i], self.beta[i] = veh.alpha, veh.beta
        self.av = np.nonzero(self.is_av)[0]

    def rhs(self, s: np.ndarray, u: np.ndarray) -> np.ndarray:
        p, v, a = s[:, 0], s[:, 1], s[:, 2]
        out = np.empty_like(s)
        out[:, 0] = v
        out[:, 1] = a
        av = self.av
        out[av, 2] = (
            -(a[av] + self.R[av] * v[av] ** 2 + self.d[av] / self.m[av]) / self.tau[av]
            - 2.0 * self.R[av] * v[av] * a[av]
            + u[av] / (self.tau[av] * self.m[av])
        )
        for i in self.hv:
            prm = self.spec.vehicles[i]
            h = p[i - 1] - p[i]
            out[i, 2] = (
                prm.alpha * (range_policy(h, prm) - v[i]) + prm.beta * (v[i - 1] - v[i]) - a[i]
            ) / prm.tau
        return out

    def rk4(self, s: np.ndarray, u: np.ndarray, h: float, substeps: int) -> np.ndarray:
        dt = h / substeps
        for _ in range(substeps):
            k1 = self.rhs(s, u)
            k2 = self.rhs(s + 0.5 * dt * k1, u)
            k3 = self.rhs(s + 0.5 * dt * k2, u)
            k4 = self.rhs(s + dt * k3, u)
            s = s + (dt / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
        return s


def error_state(spec: PlatoonSpec, states: np.ndarray, vl_pos: float, ref_speed: float) -> np.ndarray:
    """Maps physical ``(p, v, a)`` rows to error rows ``(h_err, v_err, a)``."""
    p = states[:, 0]
    h = np.empty_like(p)
    h[0] = vl_pos - p[0]
    h[1:] = p[:-1] - p[1:]
    return np.stack([h - spec.h_star, states[:, 1] - ref_speed, states[:, 2]], axis=1)


def disturbances(spec: PlatoonSpec, errors: np.ndarray, ref_speed: float) -> np.ndarray:
    """True ``w`` of every vehicle for the given error state."""
    w = np.empty(spec.n)
    for i, veh in enumerate(spec.vehicles):
        if isinstance(veh, VehicleParams):
            w[i] = av_disturbance(veh, ref_speed)
        else:
            w[i] = hv_disturbance(veh, errors[i, 0] + spec.h_star, ref_speed)
    return w


def step_design_consistent(sys: LiftedSystem, x, u, w) -> np.ndarray:
    """One step of ``x+ = A Z(x) + B u + D w``."""
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float).reshape(-1)
    w = np.asarray(w, dtype=float).reshape(-1)
    if u.size != sys.n_u or w.size != sys.n_w:
        raise ValueError(f"expected u of size {sys.n_u} and w of size {sys.n_w}")
    return sys.A @ lift(x, sys) + sys.B @ u + sys.D @ w


def simulate(
    spec: PlatoonSpec,
    controller: Controller,
    profile: ReferenceProfile,
    duration: float,
    initial_states,
    *,
    t0: float = 0.0,
    leader_offset: float | None = None,
    mode: str = "high_fidelity",
    substeps: int = 10,
) -> Trajectory:
    """Runs the platoon for ``duration`` seconds on the ``spec.t_s`` grid.

    ``initial_states`` holds one ``(p, v, a)`` row per vehicle.  The virtual
    leader sits at ``leader_offset + profile.position(t)``; by default the
    offset places it ``h_star`` ahead of the leader at ``t0``.

    ``mode="high_fidelity"`` integrates the nonlinear vehicle models with
    RK4 (``substeps`` per sample).  ``mode="design"`` steps the Euler design
    model exactly, which requires a constant reference equal to
    ``spec.v_star``.
    """
    if duration <= 0:
        raise ValueError("duration must be positive")
    if mode not in ("high_fidelity", "design"):
        raise ValueError(f"unknown mode {mode!r}")
    t_s = spec.t_s
    K = int(round(duration / t_s))
    n = spec.n
    states = np.asarray(initial_states, dtype=float).reshape(n, 3).copy()
    if leader_offset is None:
        leader_offset = states[0, 0] + spec.h_star - profile.position(t0)

    t = t0 + t_s * np.arange(K + 1)
    if t[-1] > profile.t_end + 1e-9:
        raise ValueError(f"run ends at {t[-1]:.2f} s beyond the profile end {profile.t_end:.2f} s")
    ref = np.asarray(profile.speed(t), dtype=float)
    vl = np.array([leader_offset + profile.position(tk) for tk in t])

    X = np.empty((K + 1, n, 3))
    E = np.empty((K + 1, n, 3))
    U = np.zeros((K + 1, n))
    W = np.empty((K + 1, n))

    model = _PlatoonModel(spec)
    sys = None
    if mode == "design":
        if not np.allclose(ref, spec.v_star):
            raise ValueError("design-consistent mode needs a constant reference at v_star")
        sys = build_lifted_system(spec)
        err = error_state(spec, states, vl[0], ref[0])
    av = model.av
    for k in range(K + 1):
        if mode == "high_fidelity":
            err = error_state(spec, states, vl[k], ref[k])
        else:
            # positions follow from the gaps; the virtual leader is the anchor
            p = vl[k] - np.cumsum(err[:, 0] + spec.h_star)
            states = np.stack([p, err[:, 1] + ref[k], err[:, 2]], axis=1)
        if not (np.all(np.isfinite(states)) and np.all(np.isfinite(err))):
            raise SimulationDiverged("non-finite platoon state", float(t[k]), k)
        X[k], E[k] = states, err
        W[k] = disturbances(spec, err, ref[k])
        u = np.zeros(n)
        u_av = np.asarray(controller(float(t[k]), err), dtype=float)
        if u_av.shape == (n,):
            u[av] = u_av[av]
        else:
            u[av] = u_av
        if not np.all(np.isfinite(u)):
            raise SimulationDiverged("non-finite control effort", float(t[k]), k)
        U[k] = u
        if k == K:
            break
        if mode == "high_fidelity":
            states = model.rk4(states, u, t_s, substeps)
        else:
            x = step_design_consistent(sys, err.reshape(-1), u[av], W[k])
            err = x.reshape(n, 3)
    return Trajectory(t, X, E, U, W, ref, float(leader_offset), t_s, spec.h_star)


# ---------------------------------------------------------------------------
# ACC baseline


class AccController:
    """Constant-gap PD adaptive cruise control used as baseline and for data collection.

    ``a_cmd = k_p (h - h_star) + k_v (v_pred - v)`` is converted to engine
    effort with the nominal mass.  A seeded uniform dither of amplitude
    ``dither * m_nom`` is added while ``t < dither_until``; a fresh draw is
    taken every ``dither_hold`` seconds (every sample when ``None``).
    """

    def __init__(
        self,
        spec: PlatoonSpec,
        nominal_mass,
        k_p: float = 0.23,
        k_v: float = 0.74,
        dither: float = 0.0,
        dither_until: float = np.inf,
        seed: int | None = 0,
        dither_hold: float | None = None,
    ):
        self.n = spec.n
        self.av = np.array(spec.av_indices)
        self.m_nom = np.broadcast_to(np.asarray(nominal_mass, dtype=float), (len(self.av),)).copy()
        self.k_p, self.k_v = k_p, k_v
        self.dither = dither
        self.dither_until = dither_until
        self.dither_hold = dither_hold
        self.rng = np.random.default_rng(seed)
        self._draw = np.zeros(len(self.av))
        self._next_draw = -np.inf

    def accel_command(self, err: np.ndarray) -> np.ndarray:
        v_err = err[:, 1]
        v_pred_err = np.concatenate([[0.0], v_err[:-1]])
        return self.k_p * err[:, 0] + self.k_v * (v_pred_err - v_err)

    def __call__(self, t: float, err: np.ndarray) -> np.ndarray:
        u = np.zeros(self.n)
        u[self.av] = self.m_nom * self.accel_command(err)[self.av]
        if self.dither > 0 and t < self.dither_until - 1e-12:
            if self.dither_hold is None or t >= self._next_draw - 1e-9:
                self._draw = self.rng.uniform(-1.0, 1.0, len(self.av))
                if self.dither_hold is not None:
                    start = t if np.isinf(self._next_draw) else self._next_draw
                    self._next_draw = start + self.dither_hold
            u[self.av] += self.dither * self.m_nom * self._draw
        return u


def acc_baseline(h_err: float, v_rel: float, k_p: float, k_v: float, m_nom: float, dither: float = 0.0) -> float:
    """Scalar form of the ACC law: effort for gap error ``h_err`` and ``v_rel = v_pred - v``."""
    return m_nom * (k_p * h_err + k_v * v_rel) + dither


# ---------------------------------------------------------------------------
# data batches


@dataclass
class DataBatch:
    U0: np.ndarray
    X0: np.ndarray
    X1: np.ndarray
    Z0: np.ndarray
    t_s: float
    W0: Optional[np.ndarray] = None
    mode: str = "high_fidelity"

    def __post_init__(self):
        T = self.X0.shape[1]
        mats = [self.U0, self.X1, self.Z0] + ([self.W0] if self.W0 is not None else [])
        if any(m.shape[1] != T for m in mats):
            raise ValueError("all data sequences need the same number of columns")

    @property
    def T(self) -> int:
        return self.X0.shape[1]

    def digest(self) -> str:
        h = hashlib.sha256()
        for arr in (self.U0, self.X0, self.X1, self.Z0):
            h.update(np.ascontiguousarray(arr, dtype=np.float64).tobytes())
        return h.hexdigest()[:16]

    def save(self, path) -> None:
        extra = {"W0": self.W0} if self.W0 is not None else {}
        np.savez(path, U0=self.U0, X0=self.X0, X1=self.X1, Z0=self.Z0, t_s=self.t_s, mode=self.mode, **extra)

    @classmethod
    def load(cls, path) -> "DataBatch":
        with np.load(path, allow_pickle=False) as f:
            return cls(
                U0=f["U0"], X0=f["X0"], X1=f["X1"], Z0=f["Z0"], t_s=float(f["t_s"]),
                W0=f["W0"] if "W0" in f else None, mode=str(f["mode"]),
            )


def batch_from_trajectory(traj: Trajectory, sys: LiftedSystem, T: int, start: int = 0, mode: str = "high_fidelity") -> DataBatch:
    if T < 1:
        raise ValueError("T must be at least 1")
    if start + T >= len(traj.t):
        raise ValueError(f"trajectory has {len(traj.t)} samples, need {start + T + 1}")
    n = traj.states.shape[1]
    x = traj.errors.reshape(len(traj.t), 3 * n).T
    X0 = x[:, start : start + T]
    X1 = x[:, start + 1 : start + T + 1]
    U0 = traj.u[start : start + T, list(sys.av_indices)].T
    W0 = traj.w[start : start + T].T
    return DataBatch(U0=U0.copy(), X0=X0.copy(), X1=X1.copy(), Z0=lift(X0, sys), t_s=traj.t_s, W0=W0.copy(), mode=mode)


def collect_data(
    spec: PlatoonSpec,
    controller: Controller,
    T: int,
    initial_states,
    profile: ReferenceProfile | None = None,
    mode: str = "high_fidelity",
) -> tuple[DataBatch, Trajectory]:
    """Runs ``T`` samples under ``controller`` and groups them into data sequences."""
    if T < 1:
        raise ValueError("T must be at least 1")
    if profile is None:
        profile = ReferenceProfile.constant(spec.v_star, T * spec.t_s)
    traj = simulate(spec, controller, profile, T * spec.t_s, initial_states, mode=mode)
    gaps = traj.errors[:, 1:, 0] + spec.h_star
    if gaps.size and gaps.min() <= 0:
        raise SimulationDiverged("collision during data collection", float(traj.t[np.argmin(gaps.min(axis=1))]), int(np.argmin(gaps.min(axis=1))))
    return batch_from_trajectory(traj, build_lifted_system(spec), T, mode=mode), traj


@dataclass(frozen=True)
class RichnessReport:
    rank: int
    n_z: int
    smallest_singular_value: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.rank == self.n_z


def check_richness(Z0: np.ndarray) -> RichnessReport:
    """Numerical row rank of ``Z0`` with the usual ``max(dim) * eps * s_max`` tolerance."""
    Z0 = np.atleast_2d(np.asarray(Z0, dtype=float))
    n_z, T = Z0.shape
    sv = np.linalg.svd(Z0, compute_uv=False) if Z0.size else np.zeros(0)
    s_max = sv[0] if sv.size else 0.0
    tol = max(n_z, T) * np.finfo(float).eps * s_max
    rank = int(np.sum(sv > tol))
    smallest = float(sv[-1]) if sv.size == n_z else 0.0
    return RichnessReport(rank=rank, n_z=n_z, smallest_singular_value=smallest, tolerance=float(tol))


def restrict_batch(batch: DataBatch, spec: PlatoonSpec, indices) -> DataBatch:
    """Rows of ``batch`` that belong to the consecutive vehicle group ``indices``."""
    idx = list(indices)
    av = spec.av_indices
    n_x = 3 * spec.n
    x_rows = [3 * i + k for i in idx for k in range(3)]
    av_in = [av.index(i) for i in idx if i in av]
    q_rows = [n_x + 2 * j + k for j in av_in for k in range(2)]
    return DataBatch(
        U0=batch.U0[av_in].copy(), X0=batch.X0[x_rows].copy(), X1=batch.X1[x_rows].copy(),
        Z0=batch.Z0[x_rows + q_rows].copy(), t_s=batch.t_s,
        W0=None if batch.W0 is None else batch.W0[idx].copy(), mode=batch.mode,
    )
