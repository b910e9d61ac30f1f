import numpy as np
import pytest

from flatmpc.flat_core import (FlatSpec, assemble_flat_lti, build_extension,
                               riccati_synthesis)
from flatmpc.gp_affine import AffineGP, AffineKernelParams, DimensionGP, gamma_terms
from flatmpc.socp_filter import (ConeProgram, FilterConfig, assemble_socp,
                                 filter_step, lipschitz_bound, lyapunov_data,
                                 quantile, solve_socp, stability_lhs_rhs)


def quadrotor_parts(om=10.0, T=50):
    lti = assemble_flat_lti(FlatSpec(m=2, rho=(4, 4), dt=0.01))
    q0 = 100.0
    Q = np.kron(np.eye(2), np.diag([q0, q0 / om**2, q0 / om**4, q0 / om**6]))
    R = np.diag([q0 / om**8] * 2)
    return lti, riccati_synthesis(lti, Q, R, T), build_extension([2, 0], 0.01)


def synthetic_gp(rng, n=60, signal=4.0, beta_sig=(9.0, 4.0), noise=1e-3,
                 targets=None):
    n_z, m = 8, 2
    p = AffineKernelParams(signal, np.full(n_z, 2.0), np.asarray(beta_sig, float),
                           np.full((m, n_z), 2.0), noise)
    Z = rng.normal(size=(n, n_z)) * 0.5
    Nu = rng.uniform(-1, 1, size=(n, m))
    if targets is None:
        y0 = 2.0 * Nu[:, 0] - Nu[:, 1] + 0.5 * Z[:, 2]
        y1 = 1.5 * Nu[:, 1] + 0.3 * Z[:, 6]
    else:
        y0, y1 = targets(Z, Nu)
    dims = [DimensionGP(p, Z, Nu, y0), DimensionGP(p, Z, Nu, y1)]
    return AffineGP(dims=dims)


def default_filter_cfg(**kw):
    base = dict(nu_min=np.array([-1.0, -1.0]), nu_max=np.array([1.0, 1.0]),
                u_min=np.array([-100.0, -100.0]), u_max=np.array([100.0, 100.0]),
                betas=np.array([2.0, 2.0]), delta_state=np.array([]))
    base.update(kw)
    return FilterConfig(**base)


class TestQuantile:
    def test_median(self):
        assert quantile(0.5) == 0.0

    def test_pinned_value(self):
        assert quantile(0.975) == pytest.approx(1.959964, abs=1e-6)

    def test_against_bisection_oracle(self):
        import math

        def cdf(x):
            return 0.5 * math.erfc(-x / math.sqrt(2.0))

        for p in (1e-8, 1e-4, 0.02, 0.3, 0.5, 0.7, 0.99, 1 - 1e-4, 1 - 1e-8):
            lo, hi = -40.0, 40.0
            for _ in range(200):
                mid = 0.5 * (lo + hi)
                if cdf(mid) < p:
                    lo = mid
                else:
                    hi = mid
            assert quantile(p) == pytest.approx(0.5 * (lo + hi), abs=1e-9)

    def test_antisymmetry(self):
        for p in (0.01, 0.1, 0.3, 0.45):
            assert quantile(p) == pytest.approx(-quantile(1 - p), abs=1e-12)

    def test_rejects_out_of_range(self):
        for bad in (0.0, 1.0, -0.1, 1.5):
            with pytest.raises(ValueError):
                quantile(bad)


class TestLyapunovData:
    def test_zero_error(self):
        lti, ric, _ = quadrotor_parts()
        v_ref = np.array([0.3, -0.2])
        lyap = lyapunov_data(ric, lti, np.zeros(8), v_ref, epsilon=1e-6)
        np.testing.assert_allclose(lyap.w1, np.zeros(2), atol=1e-15)
        np.testing.assert_allclose(lyap.w4, np.zeros(2), atol=1e-15)
        assert lyap.w3 == pytest.approx(-1e-6)
        np.testing.assert_array_equal(lyap.v_nom, v_ref)

    def test_w2_diagonal_for_quadrotor(self):
        lti, ric, _ = quadrotor_parts()
        W2 = lti.B_d.T @ ric.P @ lti.B_d
        off = W2 - np.diag(np.diag(W2))
        assert np.abs(off).max() <= 1e-10 * np.abs(np.diag(W2)).max()

    def test_decrease_budget_positive_for_random_errors(self):
        lti, ric, _ = quadrotor_parts()
        rng = np.random.default_rng(0)
        A_cl = lti.A_d - lti.B_d @ ric.K
        M = ric.P - A_cl.T @ ric.P @ A_cl
        assert np.linalg.eigvalsh(0.5 * (M + M.T)).min() > 0
        for _ in range(50):
            e = rng.normal(size=8)
            lyap = lyapunov_data(ric, lti, e, np.zeros(2), epsilon=1e-6)
            assert lyap.w3 + 1e-6 > 0

    def test_rejects_non_pd_w2(self):
        lti, ric, _ = quadrotor_parts()
        bad = type(ric)(K=ric.K, P=np.zeros((8, 8)))
        with pytest.raises(ValueError):
            lyapunov_data(bad, lti, np.zeros(8), np.zeros(2))


class TestLipschitzBound:
    def test_point_box_single_evaluation(self):
        rng = np.random.default_rng(1)
        lti, ric, _ = quadrotor_parts()
        gp = synthetic_gp(rng)
        gam = gamma_terms(gp, rng.normal(size=8) * 0.3)
        lyap = lyapunov_data(ric, lti, rng.normal(size=8) * 1e-3, np.zeros(2))
        s = np.array([0.3, -0.4])
        lip = lipschitz_bound(gam, lyap, s, s, rho_bar=2.0)
        mu = gam.mean(s)
        sd = gam.stddev(s)
        expected = 2.0 * lyap.W2_diag * (np.abs(mu - lyap.v_nom + lyap.w4) + 2.0 * sd)
        np.testing.assert_allclose(lip.L, expected, rtol=1e-12)

    def test_vertex_enumeration_dominates_dense_grid(self):
        rng = np.random.default_rng(2)
        lti, ric, _ = quadrotor_parts()
        nu_min, nu_max = np.array([-1.0, -0.5]), np.array([0.8, 0.7])
        for trial in range(50):
            gp = synthetic_gp(rng, n=30)
            gam = gamma_terms(gp, rng.normal(size=8) * 0.4)
            lyap = lyapunov_data(ric, lti, rng.normal(size=8) * 1e-3,
                                 rng.normal(size=2))
            lip = lipschitz_bound(gam, lyap, nu_min, nu_max, rho_bar=2.33)
            grid = np.linspace(0.0, 1.0, 50)
            best = np.zeros(2)
            for a in grid:
                s0 = nu_min[0] + a * (nu_max[0] - nu_min[0])
                s1_vals = nu_min[1] + grid * (nu_max[1] - nu_min[1])
                S = np.column_stack([np.full(50, s0), s1_vals])
                for s in S:
                    mu = gam.mean(s)
                    sd = gam.stddev(s)
                    vals = 2.0 * lyap.W2_diag * (
                        np.abs(mu - lyap.v_nom + lyap.w4) + 2.33 * sd)
                    best = np.maximum(best, vals)
            assert np.all(lip.L >= best - 1e-9)


class TestStabilityCones:
    def build_instance(self, seed=7, e_scale=2e-3, target_scale=1.0):
        rng = np.random.default_rng(seed)
        lti, ric, ext = quadrotor_parts()
        ts = target_scale
        gp = synthetic_gp(rng, signal=4.0 * ts**2,
                          beta_sig=(100.0 * ts**2, 100.0 * ts**2), noise=1e-3,
                          targets=lambda Z, Nu: (
                              ts * (3 * Nu[:, 0] - 5 * Nu[:, 1] + Z[:, 2]),
                              ts * (4 * Nu[:, 1] + Z[:, 6])))
        z_star = rng.normal(size=8) * 0.3
        e = rng.normal(size=8) * e_scale
        v_ref = np.array([0.5, -0.3])
        cfg = default_filter_cfg()
        gam = gamma_terms(gp, z_star)
        lyap = lyapunov_data(ric, lti, e, v_ref, 1e-6)
        lip = lipschitz_bound(gam, lyap, cfg.nu_min, cfg.nu_max, quantile(0.99))
        prog = assemble_socp(gam, lyap, lip, z_star, v_ref, [], lti, ext,
                             np.zeros(3), cfg)
        return rng, gam, lyap, lip, cfg, prog

    def test_objective_row_structure(self):
        rng, gam, lyap, lip, cfg, prog = self.build_instance()
        v_star = np.array([0.5, -0.3])
        expected = 2.0 * (gam.gamma1 - v_star) @ gam.gamma2 + gam.gamma4.sum(axis=0)
        np.testing.assert_allclose(prog.objective[:2], expected, rtol=1e-12)
        # the q1 coefficient carries the epigraph normalization scale
        assert prog.objective[2] > 0.0
        assert prog.objective[3] == 0.0

    def test_no_false_accepts_and_few_false_rejects(self):
        rng, gam, lyap, lip, cfg, prog = self.build_instance()
        s3 = prog.socs[2]
        N = (lyap.W2_diag[:, None] * gam.gamma2).T @ gam.gamma2
        s_q2 = -s3.c[3]
        false_accept = 0
        false_reject = 0
        n_raw = 0
        for _ in range(1000):
            nu = rng.uniform(cfg.nu_min, cfg.nu_max)
            lhs, rhs = stability_lhs_rhs(gam, lyap, lip, cfg.betas, nu)
            raw_ok = lhs <= rhs + 1e-8
            q2 = nu @ N @ nu / s_q2
            y = np.concatenate([nu, [0.0, q2]])
            cone_ok = np.linalg.norm(s3.A @ y - s3.b) <= s3.c @ y + s3.d + 1e-8
            n_raw += raw_ok
            if cone_ok and not raw_ok:
                false_accept += 1
            if raw_ok and not cone_ok:
                false_reject += 1
        assert false_accept == 0
        if n_raw:
            assert false_reject / n_raw <= 0.05

    def test_cone1_epigraph_tight_at_optimum(self):
        # densely trained affine map gives a comfortably feasible instance
        rng = np.random.default_rng(21)
        lti, ric, ext = quadrotor_parts()
        n = 150
        p = AffineKernelParams(4.0, np.full(8, 3.0), np.array([9.0, 9.0]),
                               np.full((2, 8), 3.0), 1e-8)
        Z = rng.normal(size=(n, 8)) * 0.2
        Nu = rng.uniform(-1, 1, size=(n, 2))
        V = np.array([0.4, -0.7]) + Nu @ np.array([[2.0, -0.5], [0.3, 1.5]]).T
        gp = AffineGP(dims=[DimensionGP(p, Z, Nu, V[:, 0]),
                            DimensionGP(p, Z, Nu, V[:, 1])])
        cfg = default_filter_cfg(epsilon=0.0)
        z_star = np.zeros(8)
        e = np.zeros(8)
        e[0] = 2e-3
        gam = gamma_terms(gp, z_star)
        lyap = lyapunov_data(ric, lti, e, np.zeros(2), 0.0)
        lip = lipschitz_bound(gam, lyap, cfg.nu_min, cfg.nu_max, quantile(0.99))
        prog = assemble_socp(gam, lyap, lip, z_star, np.array([0.9, 0.1]), [],
                             lti, ext, np.zeros(3), cfg)
        y, slacks, report = solve_socp(prog)
        assert report.status == "optimal"
        M = gam.gamma2.T @ gam.gamma2 + gam.gamma5.sum(axis=0)
        nu = y[:2]
        s_q1 = prog.objective[2]
        assert s_q1 * y[2] == pytest.approx(
            nu @ M @ nu, abs=1e-6 * max(1, abs(s_q1 * y[2])))

    def test_state_cone_zero_variance_limit(self):
        # with vanishing GP variance the tightened half-space reduces to the
        # raw linear constraint on the predicted mean state
        rng = np.random.default_rng(9)
        lti, ric, ext = quadrotor_parts()
        n_z, m = 8, 2
        p = AffineKernelParams(1e-18, np.full(n_z, 2.0), np.full(m, 1e-18),
                               np.full((m, n_z), 2.0), 1e-12)
        dims = [DimensionGP(p, np.zeros((0, n_z)), np.zeros((0, m)), np.zeros(0))
                for _ in range(2)]
        gp = AffineGP(dims=dims)
        z_star = rng.normal(size=8) * 0.1
        h = np.zeros(8)
        h[0] = 1.0
        b = 0.7
        cfg = default_filter_cfg(delta_state=np.array([0.01]))
        gam = gamma_terms(gp, z_star)
        lyap = lyapunov_data(ric, lti, np.zeros(8), np.zeros(2), 1e-6)
        lip = lipschitz_bound(gam, lyap, cfg.nu_min, cfg.nu_max, quantile(0.99))
        prog = assemble_socp(gam, lyap, lip, z_star, np.zeros(2), [(h, b)],
                             lti, ext, np.zeros(3), cfg)
        sc = prog.socs[3]
        assert np.abs(sc.A).max() <= 1e-8
        assert np.abs(sc.b).max() <= 1e-8
        # c' y + d >= 0 must equal b - h'(A z* + B mu(nu)) for any nu
        nu = rng.uniform(-1, 1, size=2)
        y = np.concatenate([nu, [0.0, 0.0]])
        mean_next = lti.A_d @ z_star + lti.B_d @ gam.mean(nu)
        np.testing.assert_allclose(sc.c @ y + sc.d, b - h @ mean_next, atol=1e-12)

    def test_tightening_monotone_in_variance(self):
        # inflating gamma3 can only shrink the admissible set of the state cone
        rng, gam, lyap, lip, cfg0, _ = self.build_instance()
        lti, ric, ext = quadrotor_parts()
        h = np.zeros(8)
        h[4] = 1.0
        cfg = default_filter_cfg(delta_state=np.array([0.01]))
        import dataclasses as dc

        from flatmpc.gp_affine import GammaTerms

        def margin(gamma_terms_obj, nu):
            prog = assemble_socp(gamma_terms_obj, lyap, lip, np.zeros(8),
                                 np.zeros(2), [(h, 1.0)], lti, ext, np.zeros(3), cfg)
            sc = prog.socs[3]
            y = np.concatenate([nu, [0.0, 0.0]])
            return sc.c @ y + sc.d - np.linalg.norm(sc.A @ y - sc.b)

        nu = np.array([0.2, -0.1])
        base = margin(gam, nu)
        inflated = GammaTerms(gamma1=gam.gamma1, gamma2=gam.gamma2,
                              gamma3=gam.gamma3 * 4.0, gamma4=gam.gamma4,
                              gamma5=gam.gamma5)
        assert margin(inflated, nu) <= base + 1e-12


class TestFilterStep:
    def test_exact_gp_limit_recovers_linearizing_input(self):
        # GP trained densely on an exactly affine map with tiny noise: the
        # filter should return (nearly) the exact linearizing input
        rng = np.random.default_rng(11)
        lti, ric, ext = quadrotor_parts()
        n, n_z, m = 220, 8, 2
        alpha_true = np.array([0.4, -0.7])
        beta_true = np.array([[2.0, -0.5], [0.3, 1.5]])

        p = AffineKernelParams(4.0, np.full(n_z, 3.0), np.array([9.0, 9.0]),
                               np.full((m, n_z), 3.0), 1e-8)
        Z = rng.normal(size=(n, n_z)) * 0.2
        Nu = rng.uniform(-1, 1, size=(n, m))
        V = alpha_true + Nu @ beta_true.T
        gp = AffineGP(dims=[DimensionGP(p, Z, Nu, V[:, 0]),
                            DimensionGP(p, Z, Nu, V[:, 1])])
        cfg = default_filter_cfg(epsilon=0.0)
        z_star = np.zeros(8)
        v_star = np.array([0.9, 0.1])
        nu_exact = np.linalg.solve(beta_true, v_star - alpha_true)
        z_hat = np.zeros(8)
        z_hat[0] = 2e-3          # small error keeps the decrease budget positive
        res = filter_step(gp, ric, lti, ext, z_star, v_star, z_hat,
                          np.zeros(8), v_star, np.zeros(3), [], cfg)
        assert res.status == "optimal"
        np.testing.assert_allclose(res.nu_star, nu_exact, atol=5e-3)

    def test_zero_error_consistent_reference_feasible_at_zero_epsilon(self):
        # satisfiable at e = 0 only in the vanishing-uncertainty limit
        rng = np.random.default_rng(12)
        lti, ric, ext = quadrotor_parts()
        p = AffineKernelParams(1e-18, np.full(8, 2.0), np.full(2, 1e-18),
                               np.full((2, 8), 2.0), 1e-12)
        gp = AffineGP(dims=[
            DimensionGP(p, np.zeros((0, 8)), np.zeros((0, 2)), np.zeros(0))
            for _ in range(2)])
        cfg = default_filter_cfg(epsilon=0.0)
        z_star = rng.normal(size=8) * 0.1
        v_ref = np.zeros(2)
        res = filter_step(gp, ric, lti, ext, z_star, v_ref, z_star, z_star,
                          v_ref, np.zeros(3), [], cfg)
        assert res.status == "optimal"

    def test_prior_gp_structural_sanity(self):
        # a zero-data prior predicts v = 0 for every input, so decrease can
        # only be certified in the vanishing-prior-variance hover case
        lti, ric, ext = quadrotor_parts()
        p = AffineKernelParams(1e-18, np.full(8, 2.0), np.full(2, 1e-18),
                               np.full((2, 8), 2.0), 1e-12)
        gp = AffineGP(dims=[
            DimensionGP(p, np.zeros((0, 8)), np.zeros((0, 2)), np.zeros(0))
            for _ in range(2)])
        cfg = default_filter_cfg(epsilon=0.0)
        res = filter_step(gp, ric, lti, ext, np.zeros(8), np.zeros(2),
                          np.zeros(8), np.zeros(8), np.zeros(2), np.zeros(3), [], cfg)
        assert res.status == "optimal"
        assert np.all(np.isfinite(res.nu_star))
        # with informative prior variance the same hover instance cannot
        # certify strict decrease: a definitive non-optimal status, no crash
        p2 = AffineKernelParams(1.0, np.full(8, 2.0), np.ones(2),
                                np.full((2, 8), 2.0), 1e-4)
        gp2 = AffineGP(dims=[
            DimensionGP(p2, np.zeros((0, 8)), np.zeros((0, 2)), np.zeros(0))
            for _ in range(2)])
        res2 = filter_step(gp2, ric, lti, ext, np.zeros(8), np.zeros(2),
                           np.zeros(8), np.zeros(8), np.zeros(2), np.zeros(3), [], cfg)
        assert res2.status != "optimal"

    def test_input_bounds_respected_through_extension(self):
        rng = np.random.default_rng(13)
        lti, ric, ext = quadrotor_parts()
        gp = synthetic_gp(rng, n=80)
        cfg = default_filter_cfg(
            u_min=np.array([0.05, -0.4]), u_max=np.array([0.2, 0.4]),
            epsilon=0.0)
        eta_prev = np.array([0.1, 0.5, 0.0])
        z_star = rng.normal(size=8) * 0.05
        gam = gamma_terms(gp, z_star)
        v_ref = gam.mean(np.zeros(2))
        z_hat = z_star + 2e-3 * rng.normal(size=8)
        res = filter_step(gp, ric, lti, ext, z_star, v_ref, z_hat, z_star,
                          v_ref, eta_prev, [], cfg)
        assert res.status == "optimal"
        from flatmpc.flat_core import extension_step
        _, u = extension_step(ext, eta_prev, res.nu_star)
        assert u[0] <= cfg.u_max[0] + 1e-8
        assert u[0] >= cfg.u_min[0] - 1e-8
        assert abs(u[1]) <= 0.4 + 1e-8

    def test_cone_program_json_round_trip(self):
        rng, gam, lyap, lip, cfg, prog = TestStabilityCones().build_instance()
        text = prog.to_json()
        back = ConeProgram.from_json(text, m=2)
        y1, s1, r1 = solve_socp(prog)
        y2, s2, r2 = solve_socp(back)
        assert np.array_equal(y1, y2)
