import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ddcacc.conic import get_backend
from ddcacc.datagen import AccController, DataBatch, collect_data, restrict_batch
from ddcacc.dynamics import CASE1_NOMINAL, CASE2_HV, ParamBox, PlatoonSpec, build_lifted_system, disturbance_bound
from ddcacc.synthesis import (
    SynthesisProblem,
    SynthesisResult,
    SynthesisSettings,
    assemble_lmi,
    assemble_reduced,
    constraint_residuals,
    extract_gain,
    lemma2_bound_check,
    lmi_matrix,
    min_norm_g2,
    reduced_coordinates,
    solve_sdp,
    split_subplatoons,
    synthesize,
    verify_closed_loop,
)

CASE1_X0 = np.array([(65.0, 20.0, 0.0), (40.0, 15.0, 0.0), (25.0, 18.0, 0.0), (0.0, 15.0, 0.0)])


def _design_batch(n_av=2, T=500, seed=0):
    spec = PlatoonSpec((CASE1_NOMINAL,) * n_av)
    acc = AccController(spec, 1500.0, dither=2.0, seed=seed, dither_hold=0.25)
    x0 = np.array([(20.0 * (n_av - i), 20.0 + 0.5 * (-1) ** i, 0.0) for i in range(n_av)])
    batch, _ = collect_data(spec, acc, T, x0, mode="design")
    return spec, batch


@pytest.fixture(scope="module")
def design_2av():
    spec, batch = _design_batch()
    sys = build_lifted_system(spec)
    delta, _ = disturbance_bound([ParamBox.point(CASE1_NOMINAL)] * 2, spec)
    res = solve_sdp(SynthesisProblem.from_batch(batch, sys.D, delta, eps1=100.0, eps2=0.1))
    return spec, batch, sys, delta, res


@pytest.fixture(scope="module")
def case1_pair():
    """First sub-platoon of a perturbed Case 1 collection."""
    rng = np.random.default_rng(0)
    from ddcacc.dynamics import perturb_params

    spec = PlatoonSpec(tuple(perturb_params(CASE1_NOMINAL, 0.1, rng) for _ in range(4)))
    acc = AccController(spec, 1500.0, dither=1.0, dither_until=25.0, seed=1, dither_hold=0.25)
    batch, _ = collect_data(spec, acc, 500, CASE1_X0)
    group = split_subplatoons(spec, 2)[0]
    sub = restrict_batch(batch, spec, group.indices)
    sys = build_lifted_system(group.spec)
    delta, _ = disturbance_bound([ParamBox.around(CASE1_NOMINAL, 0.1)] * 2, group.spec)
    res = synthesize(sub, sys.D, delta, SynthesisSettings(eps1=100.0, eps2=0.1))
    return sub, sys, res


class TestProblemShapes:
    def test_case1_monolithic_side(self):
        prob = SynthesisProblem(np.zeros((4, 500)), np.zeros((20, 500)), np.zeros((12, 500)), np.zeros((12, 4)), 1.0)
        assert prob.lmi_side() == 12 + 4 + 12 + 12 + 12 + 500 + 4 == 556

    def test_lmi_matrix_side(self):
        spec, batch = _design_batch(T=40)
        sys = build_lifted_system(spec)
        prob = SynthesisProblem.from_batch(batch, sys.D, 1.0)
        L = lmi_matrix(prob, np.eye(6), np.zeros((40, 6)), 1.0)
        assert L.shape == (prob.lmi_side(),) * 2 == (4 * 6 + 2 * 2 + 40,) * 2
        assert np.array_equal(L, L.T)

    def test_zero_delta_removes_coupling(self):
        spec, batch = _design_batch(T=40)
        sys = build_lifted_system(spec)
        prob = SynthesisProblem.from_batch(batch, sys.D, 0.0)
        L = lmi_matrix(prob, np.eye(6), np.ones((40, 6)), 1.0)
        # rows of the fourth block against the last block column
        assert np.all(L[3 * 6 + 2 : 4 * 6 + 2, -2:] == 0.0)

    def test_interpolation_rhs(self, design_2av):
        _, batch, sys, delta, _ = design_2av
        prob = SynthesisProblem.from_batch(batch, sys.D, delta)
        G2 = min_norm_g2(prob)
        rhs = np.vstack([np.zeros((6, 4)), np.eye(4)])
        assert np.abs(prob.Z0 @ G2 - rhs).max() < 1e-9
        assert np.abs(prob.X1 @ G2).max() < 1e-9

    def test_case1_interpolation_rhs_shape(self):
        prob = SynthesisProblem(np.zeros((4, 30)), np.zeros((20, 30)), np.zeros((12, 30)), np.zeros((12, 4)), 1.0)
        assert prob.n_q == 8

    def test_validation(self):
        with pytest.raises(ValueError):
            SynthesisProblem(np.zeros((1, 5)), np.zeros((5, 4)), np.zeros((3, 5)), np.zeros((3, 1)), 1.0)
        with pytest.raises(ValueError):
            SynthesisProblem(np.zeros((1, 5)), np.zeros((5, 5)), np.zeros((3, 5)), np.zeros((3, 1)), -1.0)
        with pytest.raises(ValueError):
            SynthesisSettings(norm="nuclear")


class TestGainExtraction:
    def test_identity_P(self):
        rng = np.random.default_rng(1)
        U0, Y, G2 = rng.normal(size=(2, 30)), rng.normal(size=(30, 6)), rng.normal(size=(30, 4))
        K, msgs = extract_gain(U0, Y, G2, np.eye(6))
        assert np.allclose(K, U0 @ np.hstack([Y, G2])) and not msgs

    def test_data_identity(self, design_2av):
        _, batch, _, _, res = design_2av
        lhs = np.vstack([res.K, np.eye(10)])
        rhs = np.vstack([batch.U0, batch.Z0]) @ np.hstack([res.G1, res.G2])
        assert np.abs(lhs - rhs).max() < 1e-6

    def test_ill_conditioned_warning(self):
        P = np.diag([1.0, 1e-14])
        _, msgs = extract_gain(np.ones((1, 3)), np.ones((3, 2)), np.ones((3, 0)), P)
        assert msgs and "ill-conditioned" in msgs[0]


class TestSolve:
    def test_design_2av_feasible(self, design_2av):
        _, batch, sys, _, res = design_2av
        assert res.feasible and np.isfinite(res.gamma) and res.gamma > 0
        r = res.residuals
        assert max(r["interpolation_P"], r["interpolation_G2"], r["nullspace"]) <= 1e-6
        assert r["lmi_min_eig"] >= -1e-7
        diag = verify_closed_loop(res, batch, sys.D)
        assert diag.spectral_radius < 1.0
        assert np.allclose(diag.E_bar, -sys.D @ batch.W0 @ res.G2, atol=1e-8)

    def test_case1_subplatoon_feasible(self, case1_pair):
        sub, sys, res = case1_pair
        assert sub.Z0.shape == (10, 500)
        assert res.feasible and np.isfinite(res.gamma)
        assert res.residuals["lmi_min_eig"] >= -1e-7
        assert verify_closed_loop(res, sub, sys.D).spectral_radius < 1.0

    def test_too_few_samples(self):
        spec, batch = _design_batch(T=1)
        sys = build_lifted_system(spec)
        res = solve_sdp(SynthesisProblem.from_batch(batch, sys.D, 1.0))
        assert res.status == "infeasible" and not res.feasible and res.K is None
        assert "rank" in res.messages[0]

    @pytest.mark.parametrize("eps1, eps2", [(10.0, 1.0), (100.0, 0.1)])
    def test_reduced_matches_full(self, eps1, eps2):
        # single AV, short batch: the full printed program is small enough to solve directly
        spec, batch = _design_batch(n_av=1, T=24, seed=3)
        sys = build_lifted_system(spec)
        prob = SynthesisProblem.from_batch(batch, sys.D, 0.05, eps1=eps1, eps2=eps2, lam2=0.0, margin=0.0)
        backend = get_backend("clarabel")
        full, red = assemble_lmi(prob), assemble_reduced(prob)
        out_f, out_r = backend.solve(full.program), backend.solve(red.program)
        assert out_f.status == out_r.status == "optimal"
        # same optimum up to interior-point accuracy on the larger program
        assert out_f.objective == pytest.approx(out_r.objective, rel=1e-4)
        assert full.lmi_size == prob.lmi_side() and red.lmi_size < full.lmi_size

    def test_larger_delta_never_lowers_gamma(self):
        spec, batch = _design_batch(n_av=1, T=24, seed=3)
        sys = build_lifted_system(spec)
        gammas = []
        for delta in (0.05, 1.0, 2.0, 5.0):
            res = solve_sdp(SynthesisProblem.from_batch(batch, sys.D, delta, eps1=10.0, eps2=1.0, lam2=0.0))
            gammas.append(res.gamma if res.feasible else np.inf)
        assert np.isfinite(gammas[0]) and gammas[2] > 2 * gammas[0]
        assert all(b >= a * (1 - 1e-6) for a, b in zip(gammas, gammas[1:])), gammas

    def test_reduced_parametrization_is_exact(self, design_2av):
        _, batch, sys, delta, _ = design_2av
        prob = SynthesisProblem.from_batch(batch, sys.D, delta)
        coords = reduced_coordinates(prob)
        rng = np.random.default_rng(0)
        P = rng.normal(size=(6, 6))
        Xi = rng.normal(size=(coords.Psi_N.shape[1], 6))
        res = constraint_residuals(prob, P, coords.Y(P, Xi), min_norm_g2(prob))
        assert res["interpolation_P"] < 1e-9

    def test_frobenius_norm(self, design_2av):
        _, batch, sys, delta, ref = design_2av
        res = solve_sdp(SynthesisProblem.from_batch(batch, sys.D, delta, eps1=100.0, eps2=0.1, norm="frobenius"))
        assert res.feasible
        assert res.eta == pytest.approx(np.linalg.norm(res.G2, "fro"))
        assert res.gamma == pytest.approx(ref.gamma, rel=1e-4)

    def test_pure_gamma_objective(self, design_2av):
        _, batch, sys, delta, ref = design_2av
        res = solve_sdp(SynthesisProblem.from_batch(batch, sys.D, delta, eps1=100.0, eps2=0.1, lam2=0.0))
        assert res.gamma == pytest.approx(ref.gamma, rel=1e-4)

    def test_save_load(self, design_2av, tmp_path):
        res = design_2av[-1]
        res.save(tmp_path / "s.npz")
        back = SynthesisResult.load(tmp_path / "s.npz")
        assert np.array_equal(back.K, res.K) and back.status == res.status
        assert back.residuals == res.residuals and back.dims == res.dims

    def test_scalar_toy_matches_identified_model(self):
        # x+ = a x + b u + w with n_x = n_z = 1; no lifted monomials
        a, b = 1.05, 0.5
        rng = np.random.default_rng(7)
        T = 12
        x = np.empty(T + 1)
        x[0] = 1.0
        u = rng.normal(size=T)
        for k in range(T):
            x[k + 1] = a * x[k] + b * u[k]
        batch = DataBatch(U0=u[None], X0=x[None, :-1], X1=x[None, 1:], Z0=x[None, :-1], t_s=1.0, W0=np.zeros((1, T)))
        res = solve_sdp(SynthesisProblem.from_batch(batch, np.ones((1, 1)), 1e-3, eps1=1.0, eps2=1.0))
        assert res.feasible
        ident = np.linalg.lstsq(np.vstack([batch.X0, batch.U0]).T, batch.X1.T, rcond=None)[0].ravel()
        assert ident == pytest.approx([a, b], rel=1e-10)
        closed = ident[0] + ident[1] * res.K[0, 0]
        assert closed == pytest.approx((batch.X1 @ res.G1).item(), abs=1e-8)
        assert abs(closed) < 1.0


class TestBoundInequality:
    def test_zero_disturbance(self):
        rng = np.random.default_rng(0)
        M, N = rng.normal(size=(3, 8)), rng.normal(size=(2, 3))
        ok, margin = lemma2_bound_check(M, N, np.zeros((2, 8)), np.eye(2), 0.5)
        assert ok and margin >= -1e-12

    def test_scalar_instance(self):
        # 2 m w n <= m^2 + n^2 delta^2 T with |w| = delta sqrt(T): equality at m = n delta sqrt(T)
        delta, T = 0.5, 4
        d = delta * np.sqrt(T)
        ok, margin = lemma2_bound_check(np.array([[d]]), np.array([[1.0]]), np.array([[d]]), np.array([[d]]), 1.0)
        assert ok and margin == pytest.approx(0.0, abs=1e-12)

    def test_inadmissible_rejected(self):
        with pytest.raises(ValueError):
            lemma2_bound_check(np.ones((1, 2)), np.ones((1, 1)), np.array([[2.0, 0.0]]), np.eye(1), 1.0)

    @settings(max_examples=60, deadline=None)
    @given(st.integers(1, 6), st.integers(1, 4), st.integers(1, 20), st.floats(1e-2, 1e2), st.integers(0, 2**32 - 1))
    def test_random_admissible(self, n, n_w, T, eps, seed):
        rng = np.random.default_rng(seed)
        M, N = rng.normal(size=(n, T)), rng.normal(size=(n_w, n))
        Delta = rng.uniform(0.1, 2.0) * np.eye(n_w)
        W = rng.normal(size=(n_w, T))
        W *= Delta[0, 0] / max(np.linalg.norm(W, 2), 1e-12) * rng.uniform(0, 1)
        assert lemma2_bound_check(M, N, W, Delta, eps)[0]


class TestSplit:
    def test_case1_pairs(self):
        spec = PlatoonSpec((CASE1_NOMINAL,) * 4)
        groups = split_subplatoons(spec, 2)
        assert [g.indices for g in groups] == [(0, 1), (2, 3)]
        assert [g.leading for g in groups] == [True, False]

    def test_identity_split(self):
        spec = PlatoonSpec((CASE1_NOMINAL,) * 4)
        for size in (4, 9):
            groups = split_subplatoons(spec, size)
            assert len(groups) == 1 and groups[0].indices == (0, 1, 2, 3)

    def test_mixed_head_rule(self):
        spec = PlatoonSpec((CASE1_NOMINAL, CASE2_HV, CASE1_NOMINAL))
        groups = split_subplatoons(spec, 2)
        assert [g.indices for g in groups] == [(0, 1), (2,)]
        assert groups[0].av_indices == [0] and groups[1].av_indices == [2]

    def test_boundary_pulled_back(self):
        spec = PlatoonSpec((CASE1_NOMINAL, CASE1_NOMINAL, CASE2_HV, CASE1_NOMINAL))
        assert [g.indices for g in split_subplatoons(spec, 2)] == [(0,), (1, 2), (3,)]

    def test_boundary_pushed_forward(self):
        spec = PlatoonSpec((CASE1_NOMINAL, CASE2_HV, CASE2_HV, CASE1_NOMINAL))
        assert [g.indices for g in split_subplatoons(spec, 1)] == [(0, 1, 2), (3,)]

    @settings(max_examples=80, deadline=None)
    @given(st.lists(st.booleans(), min_size=1, max_size=10), st.integers(1, 6))
    def test_partition_properties(self, hv_flags, size):
        vehicles = [CASE1_NOMINAL] + [CASE2_HV if f else CASE1_NOMINAL for f in hv_flags]
        spec = PlatoonSpec(tuple(vehicles))
        groups = split_subplatoons(spec, size)
        flat = [i for g in groups for i in g.indices]
        assert flat == list(range(spec.n))
        assert all(g.spec.vehicles[0] is not CASE2_HV for g in groups)

    def test_invalid_size(self):
        with pytest.raises(ValueError):
            split_subplatoons(PlatoonSpec((CASE1_NOMINAL,)), 0)
