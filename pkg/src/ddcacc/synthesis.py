"""Data-driven controller synthesis for the lifted platoon model.

The controller ``u = K Z(x)`` is obtained from a semidefinite program in the
decision variables ``P`` (symmetric), ``Y``, ``G2`` and the attenuation
level ``gamma``.  Only recorded data ``(U0, Z0, X1)``, the known input map
``D`` of the disturbance and a bound ``delta`` on its magnitude are used.

``Y`` only enters the program through ``X1 Y``, ``Y^T Y`` and ``Z0 Y``, so
restricting it to the row space of ``[Z0; X1]`` loses nothing: the reduced
matrix inequality is an orthogonal congruence of the full one with the
``T``-sized identity block shrunk to the rank ``r`` of the data.  The same
holds for ``G2``.  The full-size form is still available for checking.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.sparse as sp

from .conic import Affine, ConicProgram, OK_STATUSES, bmat, get_backend
from .datagen import DataBatch, check_richness
from .dynamics import HvParams, PlatoonSpec

MARGIN = 1e-6
RESIDUAL_TOL = 1e-6
COND_WARN = 1e12


@dataclass(frozen=True)
class SynthesisSettings:
    eps1: float = 1.0
    eps2: float = 1.0
    lam1: float = 1.0
    lam2: float = 0.1
    norm: str = "spectral"
    grid: bool = False
    grid_values: tuple = (0.1, 1.0, 10.0)
    backend: str = "clarabel"
    reduce: bool = True
    margin: float = MARGIN

    def __post_init__(self):
        if self.eps1 <= 0 or self.eps2 <= 0:
            raise ValueError("eps1 and eps2 must be positive")
        if self.lam1 < 0 or self.lam2 < 0:
            raise ValueError("objective weights must be non-negative")
        if self.norm not in ("spectral", "frobenius"):
            raise ValueError(f"unknown norm {self.norm!r}")
        object.__setattr__(self, "grid_values", tuple(float(v) for v in self.grid_values))


@dataclass
class SynthesisProblem:
    """Data and design constants of one synthesis instance."""

    U0: np.ndarray
    Z0: np.ndarray
    X1: np.ndarray
    D: np.ndarray
    delta: float
    eps1: float = 1.0
    eps2: float = 1.0
    lam1: float = 1.0
    lam2: float = 0.1
    norm: str = "spectral"
    margin: float = MARGIN

    def __post_init__(self):
        self.U0, self.Z0, self.X1, self.D = (np.atleast_2d(np.asarray(a, dtype=float)) for a in (self.U0, self.Z0, self.X1, self.D))
        n_x, T = self.X1.shape
        if self.Z0.shape[1] != T or self.U0.shape[1] != T:
            raise ValueError("U0, Z0 and X1 need the same number of columns")
        if self.Z0.shape[0] < n_x:
            raise ValueError("Z0 must have at least n_x rows")
        if self.D.shape[0] != n_x:
            raise ValueError(f"D has {self.D.shape[0]} rows, expected {n_x}")
        if self.eps1 <= 0 or self.eps2 <= 0:
            raise ValueError("eps1 and eps2 must be positive")
        if self.delta < 0:
            raise ValueError("delta must be non-negative")

    @classmethod
    def from_batch(cls, batch: DataBatch, D: np.ndarray, delta: float, settings: SynthesisSettings | None = None, **overrides):
        s = settings or SynthesisSettings()
        kw = dict(eps1=s.eps1, eps2=s.eps2, lam1=s.lam1, lam2=s.lam2, norm=s.norm, margin=s.margin)
        kw.update(overrides)
        return cls(U0=batch.U0, Z0=batch.Z0, X1=batch.X1, D=D, delta=delta, **kw)

    @property
    def T(self) -> int:
        return self.X1.shape[1]

    @property
    def n_x(self) -> int:
        return self.X1.shape[0]

    @property
    def n_z(self) -> int:
        return self.Z0.shape[0]

    @property
    def n_q(self) -> int:
        return self.n_z - self.n_x

    @property
    def n_u(self) -> int:
        return self.U0.shape[0]

    @property
    def n_w(self) -> int:
        return self.D.shape[1]

    @property
    def Delta(self) -> np.ndarray:
        return self.delta * np.sqrt(self.T) * np.eye(self.n_w)

    @property
    def dims(self) -> dict:
        return {"n_x": self.n_x, "n_z": self.n_z, "n_u": self.n_u, "n_w": self.n_w, "T": self.T}

    def lmi_side(self, reduced_rank: Optional[int] = None) -> int:
        inner = self.T if reduced_rank is None else reduced_rank
        return 4 * self.n_x + 2 * self.n_w + inner


@dataclass(frozen=True)
class ReducedCoordinates:
    """Exact parametrization of the ``Y`` satisfying ``Z0 Y = [P; 0]``.

    ``Y = Psi_Z M P + Psi_N Xi`` where ``Psi_Z`` spans the row space of
    ``Z0``, ``M = Psi_Z^T pinv(Z0) [I; 0]`` and ``Psi_N`` spans the part of
    the row space of ``X1`` orthogonal to it.  Components of ``Y`` outside
    both only enlarge ``Y^T Y`` and are dropped.
    """

    Psi_Z: np.ndarray
    M: np.ndarray
    Psi_N: np.ndarray

    @property
    def basis(self) -> np.ndarray:
        return np.hstack([self.Psi_Z, self.Psi_N])

    def Y(self, P, Xi) -> np.ndarray:
        return self.Psi_Z @ (self.M @ P) + self.Psi_N @ Xi


def reduced_coordinates(problem: SynthesisProblem, rtol: float = 1e-9) -> ReducedCoordinates:
    """Requires full row rank of ``Z0``; directions below ``rtol * s_max`` are dropped."""
    U, s, Vt = np.linalg.svd(problem.Z0, full_matrices=False)
    if s.size == 0 or s[-1] <= max(problem.Z0.shape) * np.finfo(float).eps * s[0]:
        raise ValueError("Z0 does not have full row rank")
    Psi_Z = Vt.T
    sel = np.vstack([np.eye(problem.n_x), np.zeros((problem.n_q, problem.n_x))])
    M = (U.T @ sel) / s[:, None]
    X1_perp = problem.X1 - (problem.X1 @ Psi_Z) @ Psi_Z.T
    _, s2, Vt2 = np.linalg.svd(X1_perp, full_matrices=False)
    scale = max(s[0], np.linalg.norm(problem.X1, 2))
    keep = int(np.sum(s2 > rtol * scale))
    return ReducedCoordinates(Psi_Z, M, Vt2[:keep].T)


def _blocks(problem: SynthesisProblem, P, X1Y, Y, gI_w, gI_x, I_inner):
    """Block layout of the matrix inequality shared by the affine and numeric builders."""
    e1, e2 = problem.eps1, problem.eps2
    D = problem.D
    DDelta = D @ problem.Delta
    return [
        [P, None, P, X1Y.T, None, Y.T, None],
        [None, gI_w, None, None, D.T, None, None],
        [P, None, gI_x, None, None, None, None],
        [X1Y, None, None, (e1 / (1.0 + e1)) * P, None, None, DDelta],
        [None, D, None, None, P / e1, None, None],
        [Y, None, None, None, None, e2 * I_inner, None],
        [None, None, None, DDelta.T, None, None, np.eye(problem.n_w) / e2],
    ]


def _dense_bmat(blocks, sizes) -> np.ndarray:
    offs = np.concatenate([[0], np.cumsum(sizes)])
    out = np.zeros((offs[-1], offs[-1]))
    for i, row in enumerate(blocks):
        for j, blk in enumerate(row):
            if blk is not None:
                out[offs[i] : offs[i + 1], offs[j] : offs[j + 1]] = blk
    return out


def lmi_matrix(problem: SynthesisProblem, P: np.ndarray, Y: np.ndarray, gamma: float) -> np.ndarray:
    """Numeric value of the full matrix inequality at ``(P, Y, gamma)``."""
    n_x, n_w, T = problem.n_x, problem.n_w, problem.T
    blocks = _blocks(problem, P, problem.X1 @ Y, Y, gamma * np.eye(n_w), gamma * np.eye(n_x), np.eye(T))
    return _dense_bmat(blocks, [n_x, n_w, n_x, n_x, n_x, T, n_w])


def lmi_min_eig(problem: SynthesisProblem, P, Y, gamma) -> float:
    L = lmi_matrix(problem, P, Y, gamma)
    return float(np.linalg.eigvalsh(0.5 * (L + L.T)).min())


@dataclass
class AssembledProgram:
    program: ConicProgram
    problem: SynthesisProblem
    coords: Optional[ReducedCoordinates]
    lmi_size: int

    def unpack(self, x: np.ndarray) -> dict:
        prog = self.program
        P = np.atleast_2d(prog.value("P", x))
        P = 0.5 * (P + P.T)
        if self.coords is None:
            Y, G2 = (np.atleast_2d(prog.expr(k).value(x)) for k in ("Y", "G2"))
            eta = prog.value("eta", x)
        else:
            Xi = prog.expr("Xi").value(x) if self.coords.Psi_N.shape[1] else np.zeros((0, P.shape[0]))
            Y, G2, eta = self.coords.Y(P, np.atleast_2d(Xi).reshape(-1, P.shape[0])), None, float("nan")
        return {"P": P, "Y": Y, "G2": G2, "gamma": prog.value("gamma", x), "eta": eta}


def assemble_lmi(problem: SynthesisProblem) -> AssembledProgram:
    """Conic program in the printed form: variables ``P, Y, G2, gamma, eta``.

    The equalities are passed as such and the matrix inequality has side
    ``4 n_x + 2 n_w + T``.
    """
    n_x, n_q, n_w, T = problem.n_x, problem.n_q, problem.n_w, problem.T
    mu = problem.margin
    prog = ConicProgram()
    for name, shape, sym in (("P", (n_x, n_x), True), ("Y", (T, n_x), False), ("G2", (T, n_q), False),
                             ("gamma", 1, False), ("eta", 1, False)):
        prog.variable(name, shape, symmetric=sym)
    # re-read so every expression spans the final variable count
    P, Y, G2, gamma, eta = (prog.expr(k) for k in ("P", "Y", "G2", "gamma", "eta"))

    prog.add_equality(problem.Z0 @ Y - bmat([[P], [np.zeros((n_q, n_x))]]), 0.0, name="interpolation_P")
    prog.add_equality(problem.Z0 @ G2, np.vstack([np.zeros((n_x, n_q)), np.eye(n_q)]), name="interpolation_G2")
    prog.add_equality(problem.X1 @ G2, 0.0, name="nullspace")
    _add_common(prog, problem, P, problem.X1 @ Y, Y, gamma, T)
    if problem.norm == "spectral":
        prog.add_psd(bmat([[_scalar_identity(eta, n_q), G2.T], [G2, _scalar_identity(eta, T)]]), name="g2_norm")
    else:
        prog.add_soc(eta, G2, name="g2_norm")
    prog.minimize(problem.lam1 * gamma + problem.lam2 * eta)
    return AssembledProgram(prog, problem, None, problem.lmi_side())


def assemble_reduced(problem: SynthesisProblem, coords: Optional[ReducedCoordinates] = None) -> AssembledProgram:
    """Equality-free program in ``P, Xi, gamma`` with ``Y`` from :class:`ReducedCoordinates`.

    Its matrix inequality is the printed one under an orthogonal congruence,
    with the ``T x T`` identity block cut to the dimension of the basis.
    """
    coords = coords or reduced_coordinates(problem)
    n_x = problem.n_x
    p = coords.Psi_N.shape[1]
    prog = ConicProgram()
    prog.variable("P", (n_x, n_x), symmetric=True)
    prog.variable("Xi", (p, n_x))
    prog.variable("gamma", 1)
    P, Xi, gamma = (prog.expr(k) for k in ("P", "Xi", "gamma"))
    theta = coords.M @ P if p == 0 else bmat([[coords.M @ P], [Xi]])
    X1Y = (problem.X1 @ coords.basis) @ theta
    inner = coords.basis.shape[1]
    side = _add_common(prog, problem, P, X1Y, theta, gamma, inner)
    prog.minimize(problem.lam1 * gamma)
    return AssembledProgram(prog, problem, coords, side)


def _add_common(prog, problem, P, X1Y, Y, gamma, inner) -> int:
    n_x, n_w, mu = problem.n_x, problem.n_w, problem.margin
    prog.add_psd(P - mu * np.eye(n_x), name="P")
    prog.add_nonneg(gamma - mu, name="gamma")
    L = bmat(_blocks(problem, P, X1Y, Y, _scalar_identity(gamma, n_w), _scalar_identity(gamma, n_x), np.eye(inner)))
    prog.add_psd(L - mu * np.eye(L.shape[0]), name="lmi")
    return L.shape[0]


def _scalar_identity(s: Affine, k: int) -> Affine:
    """``s * I_k`` for a scalar affine ``s``."""
    e = sp.csr_matrix(np.eye(k).ravel(order="F").reshape(-1, 1))
    return Affine((k, k), s.const[0, 0] * np.eye(k), e @ s.coef)


@dataclass
class SynthesisResult:
    K: Optional[np.ndarray]
    P: Optional[np.ndarray]
    Y: Optional[np.ndarray]
    G2: Optional[np.ndarray]
    gamma: float
    eta: float
    status: str
    residuals: dict = field(default_factory=dict)
    solve_time: float = 0.0
    eps1: float = 1.0
    eps2: float = 1.0
    lam1: float = 1.0
    lam2: float = 0.1
    delta: float = 0.0
    dims: dict = field(default_factory=dict)
    batch_digest: str = ""
    seed: Optional[int] = None
    lmi_size: int = 0
    messages: list = field(default_factory=list)

    @property
    def feasible(self) -> bool:
        return self.status in OK_STATUSES and self.K is not None

    @property
    def G1(self) -> np.ndarray:
        return self.Y @ np.linalg.inv(self.P)

    def save(self, path) -> None:
        meta = {
            k: getattr(self, k)
            for k in ("gamma", "eta", "status", "residuals", "solve_time", "eps1", "eps2", "lam1", "lam2",
                      "delta", "dims", "batch_digest", "seed", "lmi_size", "messages")
        }
        arrays = {k: getattr(self, k) for k in ("K", "P", "Y", "G2") if getattr(self, k) is not None}
        np.savez(path, meta=json.dumps(meta, default=float), **arrays)

    @classmethod
    def load(cls, path) -> "SynthesisResult":
        with np.load(path, allow_pickle=False) as f:
            meta = json.loads(str(f["meta"]))
            arrays = {k: (np.array(f[k]) if k in f else None) for k in ("K", "P", "Y", "G2")}
        return cls(**arrays, **meta)


def extract_gain(U0: np.ndarray, Y: np.ndarray, G2: np.ndarray, P: np.ndarray) -> tuple[np.ndarray, list]:
    """``K = U0 [Y P^-1, G2]``; returns the gain and any conditioning warnings."""
    msgs = []
    cond = np.linalg.cond(P)
    if not np.isfinite(cond) or cond > COND_WARN:
        msgs.append(f"P is ill-conditioned (cond={cond:.3g})")
    G1 = np.linalg.solve(P.T, Y.T).T
    return U0 @ np.hstack([G1, G2]), msgs


def min_norm_g2(problem: SynthesisProblem) -> np.ndarray:
    """Minimum-norm solution of ``Z0 G2 = [0; I]``, ``X1 G2 = 0``.

    It minimizes every unitarily invariant norm over the solution set, so it
    is optimal for both the spectral and the Frobenius regularizer.
    """
    C = np.vstack([problem.Z0, problem.X1])
    rhs = np.vstack([np.zeros((problem.n_x, problem.n_q)), np.eye(problem.n_q), np.zeros((problem.n_x, problem.n_q))])
    return np.linalg.lstsq(C, rhs, rcond=None)[0]


def constraint_residuals(problem: SynthesisProblem, P, Y, G2) -> dict:
    n_x, n_q = problem.n_x, problem.n_q
    r_p = problem.Z0 @ Y - np.vstack([P, np.zeros((n_q, n_x))])
    r_g = problem.Z0 @ G2 - np.vstack([np.zeros((n_x, n_q)), np.eye(n_q)])
    r_n = problem.X1 @ G2
    return {"interpolation_P": _absmax(r_p), "interpolation_G2": _absmax(r_g), "nullspace": _absmax(r_n)}


def _absmax(a) -> float:
    return float(np.abs(a).max()) if np.size(a) else 0.0


def _g2_norm(G2, norm: str) -> float:
    if G2.size == 0:
        return 0.0
    return float(np.linalg.norm(G2, 2) if norm == "spectral" else np.linalg.norm(G2, "fro"))


def solve_sdp(problem: SynthesisProblem, backend: str = "clarabel", reduce: bool = True, **backend_settings) -> SynthesisResult:
    """Solves one instance; infeasibility comes back as a status, never as an exception."""
    base = dict(eps1=problem.eps1, eps2=problem.eps2, lam1=problem.lam1, lam2=problem.lam2,
                delta=problem.delta, dims=problem.dims)
    richness = check_richness(problem.Z0)
    if not richness.passed:
        return SynthesisResult(
            None, None, None, None, float("nan"), float("nan"), "infeasible", solve_time=0.0,
            messages=[f"data not rich enough: rank(Z0)={richness.rank} < n_z={problem.n_z}"], **base,
        )
    assembled = assemble_reduced(problem) if reduce else assemble_lmi(problem)
    out = get_backend(backend, **backend_settings).solve(assembled.program)
    result = SynthesisResult(None, None, None, None, float("nan"), float("nan"), out.status,
                             solve_time=out.solve_time, lmi_size=problem.lmi_side(), **base)
    result.messages.append(
        f"backend={backend} raw_status={out.raw_status} iterations={out.iterations} solved_side={assembled.lmi_size}"
    )
    if out.x is None:
        return result
    sol = assembled.unpack(out.x)
    P, Y, G2 = sol["P"], sol["Y"], sol["G2"]
    if G2 is None:
        G2 = min_norm_g2(problem)
    gamma = float(sol["gamma"])
    res = constraint_residuals(problem, P, Y, G2)
    res["lmi_min_eig"] = lmi_min_eig(problem, P, Y, gamma)
    res["P_min_eig"] = float(np.linalg.eigvalsh(P).min())
    res["margin"] = problem.margin
    K, msgs = extract_gain(problem.U0, Y, G2, P)
    result.messages += msgs
    eq_ok = max(res["interpolation_P"], res["interpolation_G2"], res["nullspace"]) <= RESIDUAL_TOL
    cert_ok = res["lmi_min_eig"] >= -1e-7 and res["P_min_eig"] > 0
    if not (eq_ok and cert_ok):
        # equalities that cannot be met mean the data admit no solution
        result.status = "infeasible" if cert_ok else "numerical_error"
        result.messages.append(f"solution failed the certificate check: {res}")
    result.K, result.P, result.Y, result.G2 = K, P, Y, G2
    result.gamma, result.eta = gamma, _g2_norm(G2, problem.norm)
    result.residuals = res
    return result


def synthesize(batch: DataBatch, D: np.ndarray, delta: float, settings: SynthesisSettings | None = None,
               seed: Optional[int] = None) -> SynthesisResult:
    """Solves with the configured ``(eps1, eps2)`` or the best point of the grid.

    With ``settings.grid`` every pair from ``grid_values`` is tried and the
    feasible result with the smallest objective wins; ``solve_time`` then
    reports the time of the winning solve and ``messages`` the total.
    """
    s = settings or SynthesisSettings()
    pairs = [(s.eps1, s.eps2)]
    if s.grid:
        pairs = [(a, b) for a in s.grid_values for b in s.grid_values]
    best, total, last = None, 0.0, None
    for e1, e2 in pairs:
        problem = SynthesisProblem.from_batch(batch, D, delta, s, eps1=e1, eps2=e2)
        res = solve_sdp(problem, backend=s.backend, reduce=s.reduce)
        total += res.solve_time
        last = res
        if not res.feasible:
            continue
        obj = s.lam1 * res.gamma + s.lam2 * res.eta
        if best is None or obj < best[0]:
            best = (obj, res)
    chosen = best[1] if best else last
    chosen.batch_digest = batch.digest()
    chosen.seed = seed
    chosen.messages.append(f"grid_points={len(pairs)} total_solve_time={total:.4f}")
    chosen.residuals = dict(chosen.residuals, total_solve_time=total)
    return chosen


@dataclass
class ClosedLoopDiagnostics:
    A_bar: np.ndarray
    E_bar: np.ndarray
    spectral_radius: float
    identity_residual: float
    nullspace_residual: float

    def __post_init__(self):
        if not (np.all(np.isfinite(self.A_bar)) and np.all(np.isfinite(self.E_bar))):
            raise ValueError("closed-loop matrices are not finite")


def verify_closed_loop(result: SynthesisResult, batch: DataBatch, D: np.ndarray) -> ClosedLoopDiagnostics:
    """Closed-loop matrices of the data-based representation, using the recorded ``W0``."""
    if batch.W0 is None:
        raise ValueError("batch carries no recorded disturbance W0")
    if not result.feasible:
        raise ValueError("result has no controller")
    G1 = result.G1
    M = batch.X1 - D @ batch.W0
    A_bar, E_bar = M @ G1, M @ result.G2
    ident = batch.Z0 @ np.hstack([G1, result.G2]) - np.eye(batch.Z0.shape[0])
    rho = float(np.max(np.abs(np.linalg.eigvals(A_bar))))
    return ClosedLoopDiagnostics(
        A_bar, E_bar, rho, _absmax(ident), _absmax(batch.X1 @ result.G2)
    )


def lemma2_bound_check(M: np.ndarray, N: np.ndarray, W: np.ndarray, Delta: np.ndarray, eps: float,
                       tol: float = 1e-12) -> tuple[bool, float]:
    """Checks ``M W^T N + N^T W M^T <= M M^T / eps + eps N^T Delta Delta^T N``.

    Shapes: ``M`` is ``n x T``, ``W`` is ``n_w x T``, ``N`` is ``n_w x n``
    and ``Delta`` is ``n_w x n_w``.  Returns ``(holds, min_eigenvalue)`` of
    right minus left.  Raises ``ValueError`` if ``W W^T <= Delta Delta^T``
    is violated.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    adm = Delta @ Delta.T - W @ W.T
    scale = max(1.0, float(np.abs(Delta @ Delta.T).max()))
    if np.linalg.eigvalsh(0.5 * (adm + adm.T)).min() < -tol * scale:
        raise ValueError("W is not admissible: W W^T exceeds Delta Delta^T")
    lhs = M @ W.T @ N + N.T @ W @ M.T
    rhs = M @ M.T / eps + eps * N.T @ Delta @ Delta.T @ N
    diff = rhs - lhs
    margin = float(np.linalg.eigvalsh(0.5 * (diff + diff.T)).min())
    return margin >= -1e-9 * max(1.0, float(np.abs(rhs).max())), margin


@dataclass(frozen=True)
class SubPlatoon:
    """A consecutive group of vehicles sharing one controller."""

    indices: tuple
    spec: PlatoonSpec
    leading: bool

    @property
    def av_indices(self) -> list[int]:
        """Global indices of the AVs in this group."""
        return [self.indices[i] for i in self.spec.av_indices]


def split_subplatoons(spec: PlatoonSpec, max_size: int) -> list[SubPlatoon]:
    """Consecutive partition into groups of at most ``max_size`` vehicles headed by AVs.

    A boundary that would put an HV at the head of a group is moved back one
    vehicle at a time until an AV heads the next group.  Only when no AV is
    left to move back to is the boundary pushed forward, exceeding
    ``max_size``.
    """
    if max_size < 1:
        raise ValueError("max_size must be at least 1")
    n = spec.n
    is_hv = [isinstance(v, HvParams) for v in spec.vehicles]
    groups, start = [], 0
    while start < n:
        end = min(start + max_size, n)
        # pull the boundary back so the next group starts at an AV
        while start < end < n and is_hv[end]:
            end -= 1
        if end == start:
            # no AV inside the window; push the boundary forward instead
            end = min(start + max_size, n)
            while end < n and is_hv[end]:
                end += 1
        groups.append(list(range(start, end)))
        start = end
    out = []
    for k, grp in enumerate(groups):
        if is_hv[grp[0]]:
            raise ValueError(f"cannot split: group {grp} would be headed by an HV")
        out.append(SubPlatoon(tuple(grp), spec.with_vehicles([spec.vehicles[i] for i in grp]), k == 0))
    return out
