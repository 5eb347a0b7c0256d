"""Vehicle models, the platooning error system and its polynomial lifting.

Error state of vehicle ``i`` is ``x_i = (h_err, v_err, a)`` with
``h_err = h_i - h_star`` and ``v_err = v_i - v_star``.  AVs contribute the
monomials ``(v_err * a, v_err**2)`` to the lifted vector ``Z(x)``; HVs
contribute none and take no control input.
"""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence, Union

import numpy as np


@dataclass(frozen=True)
class VehicleParams:
    """Physical parameters of one automated vehicle (SI units)."""

    tau: float  # engine time constant (s)
    sigma: float  # specific mass of the air
    M: float  # cross-sectional area (m^2)
    c: float  # drag coefficient
    d: float  # mechanical drag (N)
    m: float  # mass (kg)

    def __post_init__(self):
        for f in dataclasses.fields(self):
            val = getattr(self, f.name)
            if not (np.isfinite(val) and val > 0):
                raise ValueError(f"VehicleParams.{f.name} must be positive, got {val}")

    @property
    def R(self) -> float:
        return air_resistance(self)


@dataclass(frozen=True)
class HvParams:
    """Car-following parameters of one human-driven vehicle."""

    alpha: float  # headway gain (1/s)
    beta: float  # relative-velocity gain (1/s)
    tau: float  # driver-vehicle lag (s)
    h_s: float  # standstill gap (m)
    h_g: float  # free-flow gap (m)
    v_max: float  # maximum desired speed (m/s)

    def __post_init__(self):
        for f in dataclasses.fields(self):
            val = getattr(self, f.name)
            # zero gains are allowed so the gain-free limit can be studied
            lower_ok = val >= 0 if f.name in ("alpha", "beta") else val > 0
            if not (np.isfinite(val) and lower_ok):
                raise ValueError(f"HvParams.{f.name} must be positive, got {val}")
        if self.h_s >= self.h_g:
            raise ValueError("HvParams requires h_s < h_g")


Params = Union[VehicleParams, HvParams]

CASE1_NOMINAL = VehicleParams(tau=0.2, sigma=1.0, M=2.2, c=0.35, d=150.0, m=1500.0)
CASE2_HV = HvParams(alpha=0.2, beta=0.4, tau=0.7, h_s=5.0, h_g=50.0, v_max=40.0)


@dataclass(frozen=True)
class ParamBox:
    """Elementwise bounds on the parameters of one vehicle."""

    lower: Params
    nominal: Params
    upper: Params

    def __post_init__(self):
        kinds = {type(self.lower), type(self.nominal), type(self.upper)}
        if len(kinds) != 1:
            raise TypeError("ParamBox bounds must share one parameter type")
        for f in dataclasses.fields(self.nominal):
            lo, nom, hi = (getattr(p, f.name) for p in (self.lower, self.nominal, self.upper))
            if not lo <= nom <= hi:
                raise ValueError(f"ParamBox violates lower <= nominal <= upper for {f.name}")

    @classmethod
    def point(cls, params: Params) -> "ParamBox":
        return cls(params, params, params)

    @classmethod
    def around(cls, params: Params, frac: float) -> "ParamBox":
        """Box of relative half-width ``frac`` around ``params``.

        Only the physical coefficients of an HV are widened; its gap and speed
        thresholds are kept fixed (they must keep ``h_s < h_g``).
        """
        if not 0 <= frac < 1:
            raise ValueError("frac must lie in [0, 1)")
        names = [f.name for f in dataclasses.fields(params)]
        if isinstance(params, HvParams):
            names = ["alpha", "beta", "tau"]
        lo = dataclasses.replace(params, **{k: getattr(params, k) * (1 - frac) for k in names})
        hi = dataclasses.replace(params, **{k: getattr(params, k) * (1 + frac) for k in names})
        return cls(lo, params, hi)

    def contains(self, params: Params) -> bool:
        if type(params) is not type(self.nominal):
            return False
        return all(
            getattr(self.lower, f.name) <= getattr(params, f.name) <= getattr(self.upper, f.name)
            for f in dataclasses.fields(params)
        )


class VehicleState(NamedTuple):
    p: float
    v: float
    a: float


class ErrorState(NamedTuple):
    h_err: float
    v_err: float
    a: float


@dataclass(frozen=True)
class PlatoonSpec:
    vehicles: tuple
    h_star: float = 20.0
    v_star: float = 20.0
    t_s: float = 0.05

    def __post_init__(self):
        object.__setattr__(self, "vehicles", tuple(self.vehicles))
        if not self.vehicles:
            raise ValueError("platoon must contain at least one vehicle")
        for veh in self.vehicles:
            if not isinstance(veh, (VehicleParams, HvParams)):
                raise TypeError(f"unsupported vehicle entry {veh!r}")
        if isinstance(self.vehicles[0], HvParams):
            raise ValueError("the platoon leader must be an AV")
        if self.h_star <= 0 or self.v_star <= 0 or self.t_s <= 0:
            raise ValueError("h_star, v_star and t_s must be positive")

    @property
    def n(self) -> int:
        return len(self.vehicles)

    @property
    def av_indices(self) -> list[int]:
        """Zero-based indices of the AVs."""
        return [i for i, veh in enumerate(self.vehicles) if isinstance(veh, VehicleParams)]

    @property
    def hv_indices(self) -> list[int]:
        return [i for i, veh in enumerate(self.vehicles) if isinstance(veh, HvParams)]

    @property
    def n_av(self) -> int:
        return len(self.av_indices)

    def with_vehicles(self, vehicles: Sequence[Params]) -> "PlatoonSpec":
        return dataclasses.replace(self, vehicles=tuple(vehicles))


@dataclass(frozen=True)
class LiftedSystem:
    """Continuous and discrete matrices of ``x+ = A Z(x) + B u + D w``.

    ``layout`` maps the zero-based index of each AV to the slice of ``Z``
    holding its two monomials.
    """

    A_c: np.ndarray
    B_c: np.ndarray
    D_c: np.ndarray
    av_indices: tuple
    layout: dict = field(default_factory=dict)
    t_s: float | None = None
    A: np.ndarray | None = None
    B: np.ndarray | None = None
    D: np.ndarray | None = None

    @property
    def n_x(self) -> int:
        return self.A_c.shape[0]

    @property
    def n_z(self) -> int:
        return self.A_c.shape[1]

    @property
    def n_u(self) -> int:
        return self.B_c.shape[1]

    @property
    def n_w(self) -> int:
        return self.D_c.shape[1]


def air_resistance(params: VehicleParams) -> float:
    return params.sigma * params.M * params.c / (2.0 * params.m)


def av_drift(v, a, params: VehicleParams):
    """Open-loop jerk ``f(v, a)`` of an AV (works on arrays)."""
    R = air_resistance(params)
    return -(a + R * v**2 + params.d / params.m) / params.tau - 2.0 * R * v * a


def av_derivative(state: VehicleState, params: VehicleParams, u: float) -> VehicleState:
    p, v, a = state
    jerk = av_drift(v, a, params) + u / (params.tau * params.m)
    return VehicleState(v, a, jerk)


def range_policy(h, params: HvParams):
    """Spacing-dependent desired speed of an HV; accepts scalars or arrays."""
    h_arr = np.asarray(h, dtype=float)
    ratio = np.clip((h_arr - params.h_s) / (params.h_g - params.h_s), 0.0, 1.0)
    out = 0.5 * params.v_max * (1.0 - np.cos(np.pi * ratio))
    return float(out) if out.ndim == 0 else out


def hv_derivative(state: VehicleState, pred: VehicleState, params: HvParams) -> tuple:
    """Returns ``(dh/dt, dv/dt, da/dt)`` for an HV following ``pred``."""
    h = pred.p - state.p
    jerk = (
        params.alpha * (range_policy(h, params) - state.v)
        + params.beta * (pred.v - state.v)
        - state.a
    ) / params.tau
    return (pred.v - state.v, state.a, jerk)


def equilibrium_effort(params: VehicleParams, v: float) -> float:
    """Engine effort holding an AV at constant speed ``v``."""
    return -params.tau * params.m * av_drift(v, 0.0, params)


def build_av_error_blocks(params: VehicleParams, v_star: float):
    """Returns ``(A_i, C_i, E_i, B_i, D_i)`` of an AV's error dynamics."""
    R, tau = air_resistance(params), params.tau
    A_i = np.array(
        [
            [0.0, -1.0, 0.0],
            [0.0, 0.0, 1.0],
            [0.0, -2.0 * R * v_star / tau, -(1.0 + 2.0 * tau * R * v_star) / tau],
        ]
    )
    C_i = np.zeros((3, 3))
    C_i[0, 1] = 1.0
    E_i = np.array([[0.0, 0.0], [0.0, 0.0], [-2.0 * R, -R / tau]])
    B_i = np.array([[0.0], [0.0], [1.0 / (tau * params.m)]])
    D_i = np.array([[0.0], [0.0], [1.0]])
    return A_i, C_i, E_i, B_i, D_i


def build_hv_error_blocks(params: HvParams):
    """Returns ``(A_i, C_i, D_i)``; HVs have no input and no lifted terms."""
    al, be, tau = params.alpha, params.beta, params.tau
    A_i = np.array([[0.0, -1.0, 0.0], [0.0, 0.0, 1.0], [0.0, -(al + be) / tau, -1.0 / tau]])
    C_i = np.zeros((3, 3))
    C_i[0, 1] = 1.0
    C_i[2, 1] = be / tau
    D_i = np.array([[0.0], [0.0], [1.0]])
    return A_i, C_i, D_i


def assemble_polynomial_system(spec: PlatoonSpec) -> LiftedSystem:
    """Continuous-time lifted error system of the whole platoon.

    The leader's predecessor coupling is dropped (its virtual predecessor
    tracks the reference exactly).  HV monomials and inputs are deleted
    rather than kept as zero rows/columns, so ``n_z = 3n + 2 n_av`` and
    ``n_u = n_av``.
    """
    if isinstance(spec.vehicles[0], HvParams):
        raise ValueError("the platoon leader must be an AV")
    n = spec.n
    av = spec.av_indices
    n_x, n_av = 3 * n, len(av)
    n_z = n_x + 2 * n_av
    A_c = np.zeros((n_x, n_z))
    B_c = np.zeros((n_x, n_av))
    D_c = np.zeros((n_x, n))
    layout = {}
    for i, veh in enumerate(spec.vehicles):
        rows = slice(3 * i, 3 * i + 3)
        if isinstance(veh, VehicleParams):
            A_i, C_i, E_i, B_i, D_i = build_av_error_blocks(veh, spec.v_star)
            j = av.index(i)
            zslice = slice(n_x + 2 * j, n_x + 2 * j + 2)
            layout[i] = zslice
            A_c[rows, zslice] = E_i
            B_c[rows, j] = B_i[:, 0]
        else:
            A_i, C_i, D_i = build_hv_error_blocks(veh)
        A_c[rows, rows] = A_i
        if i > 0:
            A_c[rows, 3 * (i - 1) : 3 * i] = C_i
        D_c[rows, i] = D_i[:, 0]
    return LiftedSystem(A_c=A_c, B_c=B_c, D_c=D_c, av_indices=tuple(av), layout=layout)


def discretize(sys: LiftedSystem, t_s: float) -> LiftedSystem:
    """Forward-Euler discretization ``A = [I, 0] + t_s A_c``, ``B = t_s B_c``, ``D = t_s D_c``."""
    if t_s <= 0:
        raise ValueError("t_s must be positive")
    shift = np.zeros_like(sys.A_c)
    shift[:, : sys.n_x] = np.eye(sys.n_x)
    return dataclasses.replace(
        sys, t_s=t_s, A=shift + t_s * sys.A_c, B=t_s * sys.B_c, D=t_s * sys.D_c
    )


def build_lifted_system(spec: PlatoonSpec) -> LiftedSystem:
    return discretize(assemble_polynomial_system(spec), spec.t_s)


def lift(x, sys: LiftedSystem) -> np.ndarray:
    """``Z(x) = [x; Q(x)]``.  Also accepts a matrix whose columns are states."""
    x = np.asarray(x, dtype=float)
    if x.shape[0] != sys.n_x:
        raise ValueError(f"state has {x.shape[0]} rows, expected {sys.n_x}")
    return lift_states(x, sys.av_indices)


def lift_states(x, av_indices: Sequence[int]) -> np.ndarray:
    """Lifting for a stacked error state with AVs at the given (zero-based) vehicle positions."""
    x = np.asarray(x, dtype=float)
    parts = [x]
    for i in av_indices:
        v_err, a = x[3 * i + 1], x[3 * i + 2]
        parts.append(np.stack([v_err * a, v_err * v_err]))
    return np.concatenate(parts, axis=0)


def av_disturbance(params: VehicleParams, v_star: float) -> float:
    return -(params.m * air_resistance(params) * v_star**2 + params.d) / (params.tau * params.m)


def hv_disturbance(params: HvParams, h, v_star: float):
    return params.alpha * (range_policy(h, params) - v_star) / params.tau


def true_disturbance(vehicle: Params, spec: PlatoonSpec, h=None):
    """Disturbance ``w_i`` entering the jerk channel of one vehicle.

    ``h`` (the vehicle's gap) is required for HVs only.
    """
    if isinstance(vehicle, VehicleParams):
        return av_disturbance(vehicle, spec.v_star)
    if h is None:
        raise ValueError("HV disturbance needs the current gap h")
    return hv_disturbance(vehicle, h, spec.v_star)


def disturbance_bound(boxes: Sequence[ParamBox], spec: PlatoonSpec) -> tuple[float, np.ndarray]:
    """Returns ``(delta, per_vehicle_deltas)`` bounding ``|w_i|``."""
    if not boxes:
        raise ValueError("empty platoon")
    if len(boxes) != spec.n:
        raise ValueError("need one ParamBox per vehicle")
    v_star = spec.v_star
    deltas = np.empty(spec.n)
    for i, box in enumerate(boxes):
        if type(box.nominal) is not type(spec.vehicles[i]):
            raise TypeError(f"ParamBox {i} does not match vehicle type")
        lo, hi = box.lower, box.upper
        if isinstance(box.nominal, VehicleParams):
            # interval evaluation of R over the box
            R_hi = hi.sigma * hi.M * hi.c / (2.0 * lo.m)
            deltas[i] = (hi.m * R_hi * v_star**2 + hi.d) / (lo.tau * lo.m)
        else:
            deltas[i] = hi.alpha * max(v_star, hi.v_max - v_star) / lo.tau
    return float(deltas.max()), deltas


def perturb_params(params: VehicleParams, frac: float, rng: np.random.Generator) -> VehicleParams:
    """Independent uniform relative deviation in ``[-frac, frac]`` per parameter."""
    names = [f.name for f in dataclasses.fields(params)]
    scale = 1.0 + rng.uniform(-frac, frac, size=len(names))
    return dataclasses.replace(params, **{k: getattr(params, k) * s for k, s in zip(names, scale)})


def params_to_dict(params: Params) -> dict:
    out = {"type": "AV" if isinstance(params, VehicleParams) else "HV"}
    out.update(dataclasses.asdict(params))
    return out


def params_from_dict(data: dict) -> Params:
    data = dict(data)
    kind = data.pop("type", "AV").upper()
    if kind == "AV":
        return VehicleParams(**{k: float(v) for k, v in data.items()})
    if kind == "HV":
        return HvParams(**{k: float(v) for k, v in data.items()})
    raise ValueError(f"unknown vehicle type {kind!r}")


def hv_reference_gap(params: HvParams, v_star: float) -> float:
    """Gap at which the range policy returns ``v_star`` (where ``w = 0``)."""
    if not 0 <= v_star <= params.v_max:
        raise ValueError("v_star outside the HV speed range")
    ratio = math.acos(1.0 - 2.0 * v_star / params.v_max) / math.pi
    return params.h_s + ratio * (params.h_g - params.h_s)
