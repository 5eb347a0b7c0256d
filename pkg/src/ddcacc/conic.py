"""Solver-agnostic description of linear conic programs and native backends.

A :class:`ConicProgram` holds a flat decision vector ``x`` partitioned into
named variables, a linear objective ``c @ x``, linear equalities
``A_eq x = b_eq``, elementwise non-negativity constraints, second-order cones
and PSD constraints ``F(x) >> 0`` on affine symmetric matrix expressions.

Matrix expressions are kept as :class:`Affine` objects: a constant part plus
a sparse coefficient matrix acting on ``x``, both over the column-major
vectorization of the expression.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.sparse as sp


class Affine:
    """Affine matrix expression ``const + mat(coef @ x)`` of a fixed shape."""

    # make numpy defer ``array @ Affine`` and ``array + Affine`` to this class
    __array_ufunc__ = None

    def __init__(self, shape, const=None, coef=None, n_vars: int = 0):
        self.shape = (int(shape[0]), int(shape[1]))
        size = self.shape[0] * self.shape[1]
        self.const = np.zeros(self.shape) if const is None else np.asarray(const, dtype=float).reshape(self.shape)
        if coef is None:
            coef = sp.csr_matrix((size, n_vars))
        self.coef = sp.csr_matrix(coef)
        if self.coef.shape[0] != size:
            raise ValueError("coefficient rows must match the expression size")

    @classmethod
    def constant(cls, value) -> "Affine":
        value = np.atleast_2d(np.asarray(value, dtype=float))
        return cls(value.shape, const=value)

    @classmethod
    def zeros(cls, rows: int, cols: int) -> "Affine":
        return cls((rows, cols))

    @property
    def n_vars(self) -> int:
        return self.coef.shape[1]

    @property
    def T(self) -> "Affine":
        r, c = self.shape
        # entry (i, j) sits at j*r + i; in the transpose it sits at i*c + j
        idx = np.arange(r * c)
        i, j = idx % r, idx // r
        perm = sp.csr_matrix((np.ones(r * c), (i * c + j, idx)), shape=(r * c, r * c))
        return Affine((c, r), self.const.T, perm @ self.coef)

    def _widen(self, n: int) -> sp.csr_matrix:
        if self.n_vars == n:
            return self.coef
        coef = self.coef.tocoo()
        return sp.csr_matrix((coef.data, (coef.row, coef.col)), shape=(coef.shape[0], n))

    def __add__(self, other) -> "Affine":
        other = as_affine(other)
        if other.shape != self.shape:
            raise ValueError(f"shape mismatch {self.shape} vs {other.shape}")
        n = max(self.n_vars, other.n_vars)
        return Affine(self.shape, self.const + other.const, self._widen(n) + other._widen(n))

    __radd__ = __add__

    def __neg__(self) -> "Affine":
        return Affine(self.shape, -self.const, -self.coef)

    def __sub__(self, other) -> "Affine":
        return self + (-as_affine(other))

    def __rsub__(self, other) -> "Affine":
        return as_affine(other) - self

    def __mul__(self, scalar) -> "Affine":
        scalar = float(scalar)
        return Affine(self.shape, scalar * self.const, scalar * self.coef)

    __rmul__ = __mul__

    def __truediv__(self, scalar) -> "Affine":
        return self * (1.0 / float(scalar))

    def __rmatmul__(self, left) -> "Affine":
        L = np.atleast_2d(np.asarray(left, dtype=float))
        r, c = self.shape
        if L.shape[1] != r:
            raise ValueError(f"cannot multiply {L.shape} by {self.shape}")
        coef = sp.kron(sp.identity(c, format="csr"), sp.csr_matrix(L), format="csr") @ self.coef
        return Affine((L.shape[0], c), L @ self.const, coef)

    def __matmul__(self, right) -> "Affine":
        if isinstance(right, Affine):
            raise TypeError("product of two affine expressions is not affine")
        R = np.atleast_2d(np.asarray(right, dtype=float))
        r, c = self.shape
        if R.shape[0] != c:
            raise ValueError(f"cannot multiply {self.shape} by {R.shape}")
        coef = sp.kron(sp.csr_matrix(R.T), sp.identity(r, format="csr"), format="csr") @ self.coef
        return Affine((r, R.shape[1]), self.const @ R, coef)

    def value(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        flat = self._widen(x.size) @ x
        return self.const + flat.reshape(self.shape, order="F")


def as_affine(obj) -> Affine:
    if isinstance(obj, Affine):
        return obj
    return Affine.constant(obj)


def bmat(blocks) -> Affine:
    """Block matrix from a nested list of affine expressions, arrays or ``None`` (zeros).

    Every block row must contain at least one sized entry to fix its height,
    and likewise for every block column.
    """
    nr, nc = len(blocks), len(blocks[0])
    heights, widths = [None] * nr, [None] * nc
    for bi, row in enumerate(blocks):
        if len(row) != nc:
            raise ValueError("ragged block matrix")
        for bj, blk in enumerate(row):
            if blk is None:
                continue
            shape = blk.shape if isinstance(blk, Affine) else np.atleast_2d(blk).shape
            for store, k, val in ((heights, bi, shape[0]), (widths, bj, shape[1])):
                if store[k] is None:
                    store[k] = val
                elif store[k] != val:
                    raise ValueError(f"inconsistent block size at ({bi}, {bj})")
    if None in heights or None in widths:
        raise ValueError("every block row and column needs one sized entry")
    R, C = sum(heights), sum(widths)
    row_off = np.concatenate([[0], np.cumsum(heights)])
    col_off = np.concatenate([[0], np.cumsum(widths)])
    n = max((b.n_vars for row in blocks for b in row if isinstance(b, Affine)), default=0)
    const = np.zeros((R, C))
    rows, cols, vals = [], [], []
    for bi, row in enumerate(blocks):
        for bj, blk in enumerate(row):
            if blk is None:
                continue
            blk = as_affine(blk)
            r0, c0 = row_off[bi], col_off[bj]
            const[r0 : r0 + blk.shape[0], c0 : c0 + blk.shape[1]] = blk.const
            coo = blk.coef.tocoo()
            if coo.nnz:
                i, j = coo.row % blk.shape[0], coo.row // blk.shape[0]
                rows.append((c0 + j) * R + r0 + i)
                cols.append(coo.col)
                vals.append(coo.data)
    if rows:
        coef = sp.csr_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(R * C, n)
        )
    else:
        coef = sp.csr_matrix((R * C, n))
    return Affine((R, C), const, coef)


@dataclass(frozen=True)
class VarInfo:
    name: str
    shape: tuple
    offset: int
    size: int
    symmetric: bool


@dataclass
class PsdConstraint:
    name: str
    expr: Affine

    @property
    def size(self) -> int:
        return self.expr.shape[0]


@dataclass
class SolveOutput:
    """What a backend returns: status string, primal vector and objective."""

    status: str
    x: Optional[np.ndarray]
    objective: float
    solve_time: float
    iterations: int = 0
    raw_status: str = ""


OK_STATUSES = ("optimal", "optimal_inaccurate")


class ConicProgram:
    """Container for a linear conic program built from :class:`Affine` pieces."""

    def __init__(self):
        self.variables: dict[str, VarInfo] = {}
        self.n_vars = 0
        self._eq: list[tuple[str, Affine, np.ndarray]] = []
        self._nonneg: list[tuple[str, Affine]] = []
        self._soc: list[tuple[str, Affine, Affine]] = []
        self.psd: list[PsdConstraint] = []
        self._objective: Optional[Affine] = None

    # variables ------------------------------------------------------------
    def variable(self, name: str, shape, symmetric: bool = False) -> Affine:
        if name in self.variables:
            raise ValueError(f"duplicate variable {name!r}")
        shape = (shape, 1) if np.isscalar(shape) else tuple(shape)
        r, c = shape
        if symmetric:
            if r != c:
                raise ValueError("symmetric variables must be square")
            size = r * (r + 1) // 2
        else:
            size = r * c
        info = VarInfo(name, (r, c), self.n_vars, size, symmetric)
        self.variables[name] = info
        self.n_vars += size
        return self.expr(name)

    def expr(self, name: str) -> Affine:
        info = self.variables[name]
        r, c = info.shape
        if info.symmetric:
            # upper triangle, column-major: (i, j) with i <= j
            tri = {}
            k = 0
            for j in range(c):
                for i in range(j + 1):
                    tri[(i, j)] = k
                    k += 1
            rows, cols = [], []
            for j in range(c):
                for i in range(r):
                    rows.append(j * r + i)
                    cols.append(info.offset + tri[(min(i, j), max(i, j))])
        else:
            rows = list(range(r * c))
            cols = [info.offset + k for k in rows]
        coef = sp.csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(r * c, self.n_vars))
        return Affine((r, c), None, coef)

    def value(self, name: str, x: np.ndarray) -> np.ndarray:
        out = self.expr(name).value(x)
        return float(out[0, 0]) if out.shape == (1, 1) else out

    # constraints ----------------------------------------------------------
    def add_equality(self, lhs: Affine, rhs, name: str = "") -> None:
        lhs = as_affine(lhs)
        rhs = np.broadcast_to(np.asarray(rhs, dtype=float), lhs.shape)
        self._eq.append((name, lhs, np.array(rhs)))

    def add_nonneg(self, expr: Affine, name: str = "") -> None:
        self._nonneg.append((name, as_affine(expr)))

    def add_soc(self, t: Affine, x: Affine, name: str = "") -> None:
        """``||vec(x)||_2 <= t`` for scalar ``t``."""
        if t.shape != (1, 1):
            raise ValueError("SOC bound must be scalar")
        self._soc.append((name, t, as_affine(x)))

    def add_psd(self, expr: Affine, name: str = "") -> None:
        if expr.shape[0] != expr.shape[1]:
            raise ValueError("PSD constraint needs a square expression")
        self.psd.append(PsdConstraint(name, expr))

    def minimize(self, expr: Affine) -> None:
        if expr.shape != (1, 1):
            raise ValueError("objective must be scalar")
        self._objective = expr

    # standard-form views ----------------------------------------------------
    @property
    def objective_vector(self) -> np.ndarray:
        if self._objective is None:
            return np.zeros(self.n_vars)
        return np.asarray(self._objective._widen(self.n_vars).todense()).ravel()

    @property
    def objective_offset(self) -> float:
        return 0.0 if self._objective is None else float(self._objective.const[0, 0])

    def equality_system(self) -> tuple[sp.csr_matrix, np.ndarray]:
        """``A_eq x = b_eq`` stacked over all equality constraints."""
        if not self._eq:
            return sp.csr_matrix((0, self.n_vars)), np.zeros(0)
        A = sp.vstack([lhs._widen(self.n_vars) for _, lhs, _ in self._eq], format="csr")
        b = np.concatenate([(rhs - lhs.const).ravel(order="F") for _, lhs, rhs in self._eq])
        return A, b

    def equality_triplets(self):
        """``(rows, cols, vals, rhs)`` of the stacked equality system."""
        A, b = self.equality_system()
        coo = A.tocoo()
        return coo.row, coo.col, coo.data, b

    def nonneg_system(self):
        if not self._nonneg:
            return sp.csr_matrix((0, self.n_vars)), np.zeros(0)
        G = sp.vstack([e._widen(self.n_vars) for _, e in self._nonneg], format="csr")
        h = np.concatenate([e.const.ravel(order="F") for _, e in self._nonneg])
        return G, h

    @property
    def soc_constraints(self):
        return list(self._soc)

    @property
    def dims(self) -> dict:
        A, _ = self.equality_system()
        return {
            "n_vars": self.n_vars,
            "n_eq": A.shape[0],
            "psd_sizes": [c.size for c in self.psd],
        }

    def residuals(self, x: np.ndarray) -> dict:
        """Max equality residual, min nonneg slack and min PSD eigenvalue at ``x``."""
        A, b = self.equality_system()
        out = {"equality": float(np.max(np.abs(A @ x - b))) if b.size else 0.0}
        G, h = self.nonneg_system()
        out["nonneg"] = float(np.min(G @ x + h)) if h.size else 0.0
        eigs = [np.linalg.eigvalsh(_sym(c.expr.value(x))).min() for c in self.psd]
        out["psd"] = float(min(eigs)) if eigs else 0.0
        return out


def _sym(M):
    return 0.5 * (M + M.T)


def svec_matrix(n: int, lower: bool = False) -> sp.csr_matrix:
    """Maps the column-major vec of an ``n x n`` matrix to the scaled svec of its symmetric part.

    ``lower=False`` gives the upper triangle stacked by columns (Clarabel);
    ``lower=True`` the lower triangle stacked by columns (SCS).  Off-diagonal
    entries carry the usual ``sqrt(2)`` factor.
    """
    rows, cols, vals = [], [], []
    k = 0
    half = np.sqrt(2.0) / 2.0
    for j in range(n):
        rng = range(j + 1) if not lower else range(j, n)
        for i in rng:
            if i == j:
                rows.append(k); cols.append(j * n + i); vals.append(1.0)
            else:
                rows += [k, k]
                cols += [j * n + i, i * n + j]
                vals += [half, half]
            k += 1
    return sp.csr_matrix((vals, (rows, cols)), shape=(n * (n + 1) // 2, n * n))


# ---------------------------------------------------------------------------
# backends


class ClarabelBackend:
    """Interior-point backend on the Clarabel solver."""

    name = "clarabel"

    def __init__(self, **settings):
        # chordal decomposition breaks down on the dense coupling blocks here
        self.settings = {"verbose": False, "max_iter": 400, "tol_gap_abs": 1e-9, "tol_gap_rel": 1e-9,
                         "tol_feas": 1e-9, "chordal_decomposition_enable": False}
        self.settings.update(settings)

    def _status(self, raw: str) -> str:
        raw = raw.lower()
        if raw == "solved":
            return "optimal"
        if raw == "almostsolved":
            return "optimal_inaccurate"
        if "primalinfeasible" in raw:
            return "infeasible"
        if "dualinfeasible" in raw:
            return "unbounded"
        if "maxiterations" in raw or "maxtime" in raw:
            return "max_iterations"
        return "numerical_error"

    def solve(self, prog: ConicProgram) -> SolveOutput:
        import clarabel

        n = prog.n_vars
        blocks_A, blocks_b, cones = [], [], []
        A_eq, b_eq = prog.equality_system()
        if b_eq.size:
            blocks_A.append(A_eq)
            blocks_b.append(b_eq)
            cones.append(clarabel.ZeroConeT(b_eq.size))
        G, h = prog.nonneg_system()
        if h.size:
            blocks_A.append(-G)
            blocks_b.append(h)
            cones.append(clarabel.NonnegativeConeT(h.size))
        for _, t, x in prog.soc_constraints:
            stacked = bmat([[t], [Affine((x.shape[0] * x.shape[1], 1), x.const.reshape(-1, 1, order="F"), x.coef)]])
            blocks_A.append(-stacked._widen(n))
            blocks_b.append(stacked.const.ravel(order="F"))
            cones.append(clarabel.SecondOrderConeT(stacked.shape[0]))
        for c in prog.psd:
            S = svec_matrix(c.size)
            blocks_A.append(-(S @ c.expr._widen(n)))
            blocks_b.append(S @ c.expr.const.ravel(order="F"))
            cones.append(clarabel.PSDTriangleConeT(c.size))
        A = sp.vstack(blocks_A, format="csc")
        b = np.concatenate(blocks_b)
        q = prog.objective_vector
        P = sp.csc_matrix((n, n))
        settings = clarabel.DefaultSettings()
        for key, val in self.settings.items():
            setattr(settings, key, val)
        t0 = time.perf_counter()
        solver = clarabel.DefaultSolver(P, q, A, b, cones, settings)
        sol = solver.solve()
        elapsed = time.perf_counter() - t0
        raw = str(sol.status).split(".")[-1]
        status = self._status(raw)
        x = np.array(sol.x) if status in OK_STATUSES else None
        obj = float(sol.obj_val) + prog.objective_offset if x is not None else float("nan")
        return SolveOutput(status, x, obj, elapsed, int(sol.iterations), raw)


class ScsBackend:
    """First-order backend on SCS; handles large PSD blocks cheaply but less accurately."""

    name = "scs"

    def __init__(self, **settings):
        self.settings = {"verbose": False, "eps_abs": 1e-9, "eps_rel": 1e-9, "max_iters": 200000}
        self.settings.update(settings)

    def solve(self, prog: ConicProgram) -> SolveOutput:
        import scs

        n = prog.n_vars
        blocks_A, blocks_b = [], []
        cone = {}
        A_eq, b_eq = prog.equality_system()
        if b_eq.size:
            blocks_A.append(A_eq)
            blocks_b.append(b_eq)
            cone["z"] = int(b_eq.size)
        G, h = prog.nonneg_system()
        if h.size:
            blocks_A.append(-G)
            blocks_b.append(h)
            cone["l"] = int(h.size)
        if prog.soc_constraints:
            cone["q"] = []
            for _, t, x in prog.soc_constraints:
                stacked = bmat([[t], [Affine((x.shape[0] * x.shape[1], 1), x.const.reshape(-1, 1, order="F"), x.coef)]])
                blocks_A.append(-stacked._widen(n))
                blocks_b.append(stacked.const.ravel(order="F"))
                cone["q"].append(stacked.shape[0])
        if prog.psd:
            cone["s"] = []
            for c in prog.psd:
                S = svec_matrix(c.size, lower=True)
                blocks_A.append(-(S @ c.expr._widen(n)))
                blocks_b.append(S @ c.expr.const.ravel(order="F"))
                cone["s"].append(c.size)
        data = {"A": sp.vstack(blocks_A, format="csc"), "b": np.concatenate(blocks_b), "c": prog.objective_vector}
        t0 = time.perf_counter()
        solver = scs.SCS(data, cone, **self.settings)
        sol = solver.solve()
        elapsed = time.perf_counter() - t0
        raw = sol["info"]["status"]
        status = {
            "solved": "optimal",
            "solved_inaccurate": "optimal_inaccurate",
            "infeasible": "infeasible",
            "infeasible_inaccurate": "infeasible",
            "unbounded": "unbounded",
            "unbounded_inaccurate": "unbounded",
        }.get(raw, "numerical_error")
        x = np.array(sol["x"]) if status in OK_STATUSES else None
        obj = float(sol["info"]["pobj"]) + prog.objective_offset if x is not None else float("nan")
        return SolveOutput(status, x, obj, elapsed, int(sol["info"]["iter"]), raw)


BACKENDS = {"clarabel": ClarabelBackend, "scs": ScsBackend}


def get_backend(name: str = "clarabel", **settings):
    try:
        return BACKENDS[name](**settings)
    except KeyError:
        raise ValueError(f"unknown backend {name!r}; choose from {sorted(BACKENDS)}") from None
