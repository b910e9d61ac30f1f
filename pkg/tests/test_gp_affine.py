import numpy as np
import pytest

from flatmpc.gp_affine import (AffineGP, AffineKernelParams, DimensionGP,
                               GPDataPoint, confidence_multiplier, fit,
                               gamma_terms, kernel_eval, load_artifact,
                               sample_training_data, save_artifact)
from flatmpc.quadrotor2d import QuadParams, lemniscate_reference, psi_true


def make_params(n_z=4, m=2, noise=1e-2, seed=0):
    rng = np.random.default_rng(seed)
    return AffineKernelParams(
        alpha_signal_var=1.5,
        alpha_lengthscales=rng.uniform(0.8, 2.0, n_z),
        beta_signal_vars=np.array([0.8, 1.2][:m]),
        beta_lengthscales=rng.uniform(0.8, 2.0, (m, n_z)),
        noise_var=noise,
    )


def make_gp(n=40, n_z=4, m=2, seed=0, noise=1e-2):
    rng = np.random.default_rng(seed)
    params = make_params(n_z, m, noise, seed)
    Z = rng.normal(size=(n, n_z))
    Nu = rng.normal(size=(n, m))
    y = rng.normal(size=n)
    return DimensionGP(params, Z, Nu, y), rng


def direct_posterior(dim_gp, z_star, nu):
    """Oracle: textbook posterior from pairwise kernel evaluations."""
    p, Z, Nu, y = dim_gp.params, dim_gp.Z, dim_gp.Nu, dim_gp.y
    n = Z.shape[0]
    K = np.array([[kernel_eval(p, (Z[i], Nu[i]), (Z[j], Nu[j]))
                   for j in range(n)] for i in range(n)])
    G = K + (p.noise_var + dim_gp.jitter) * np.eye(n)
    kv = np.array([kernel_eval(p, (z_star, nu), (Z[j], Nu[j])) for j in range(n)])
    kss = kernel_eval(p, (z_star, nu), (z_star, nu))
    Ginv = np.linalg.inv(G)
    return kv @ Ginv @ y, kss - kv @ Ginv @ kv


class TestKernel:
    def test_zero_distance_zero_inputs(self):
        p = make_params()
        z = np.zeros(4)
        val = kernel_eval(p, (z, np.zeros(2)), (z, np.zeros(2)))
        assert val == pytest.approx(p.alpha_signal_var)

    def test_disjoint_unit_inputs_drop_cross_term(self):
        p = make_params()
        rng = np.random.default_rng(1)
        z_i, z_j = rng.normal(size=4), rng.normal(size=4)
        val = kernel_eval(p, (z_i, np.array([1.0, 0.0])), (z_j, np.array([0.0, 1.0])))
        alpha_only = kernel_eval(p, (z_i, np.zeros(2)), (z_j, np.zeros(2)))
        assert val == pytest.approx(alpha_only, abs=1e-15)

    def test_gram_positive_definite_with_noise(self):
        rng = np.random.default_rng(2)
        p = make_params()
        pts = [(rng.normal(size=4), rng.normal(size=2)) for _ in range(30)]
        K = np.array([[kernel_eval(p, a, b) for b in pts] for a in pts])
        eig = np.linalg.eigvalsh(K + p.noise_var * np.eye(30))
        assert eig.min() > 0

    def test_rejects_nonpositive_hyperparameters(self):
        with pytest.raises(ValueError):
            AffineKernelParams(0.0, np.ones(3), np.ones(2), np.ones((2, 3)), 1e-2)
        with pytest.raises(ValueError):
            AffineKernelParams(1.0, np.zeros(3), np.ones(2), np.ones((2, 3)), 1e-2)


class TestGammaDecomposition:
    def test_matches_direct_posterior(self):
        dim_gp, rng = make_gp()
        worst_mu = worst_var = 0.0
        for _ in range(100):
            z_star = rng.normal(size=4)
            nu = rng.normal(size=2)
            mu, var = dim_gp.predict(z_star, nu)
            mu_d, var_d = direct_posterior(dim_gp, z_star, nu)
            worst_mu = max(worst_mu, abs(mu - mu_d))
            worst_var = max(worst_var, abs(var - var_d))
        assert worst_mu <= 1e-8
        assert worst_var <= 1e-8

    def test_empty_training_set_returns_prior(self):
        p = make_params()
        gp0 = DimensionGP(p, np.zeros((0, 4)), np.zeros((0, 2)), np.zeros(0))
        g1, g2, g3, g4, g5 = gp0.gamma(np.ones(4))
        assert g1 == 0.0
        np.testing.assert_array_equal(g2, np.zeros(2))
        assert g3 == pytest.approx(p.alpha_signal_var)
        np.testing.assert_array_equal(g4, np.zeros(2))
        np.testing.assert_allclose(g5, np.diag(p.beta_signal_vars))

    def test_gamma5_psd_after_symmetrization(self):
        dim_gp, rng = make_gp(n=60, seed=3)
        for _ in range(25):
            _, _, _, _, g5 = dim_gp.gamma(rng.normal(size=4))
            assert np.linalg.eigvalsh(g5).min() >= -1e-10

    def test_variance_nonnegative_over_input_box(self):
        dim_gp, rng = make_gp(n=50, seed=4)
        z_star = rng.normal(size=4)
        g1, g2, g3, g4, g5 = dim_gp.gamma(z_star)
        for _ in range(1000):
            nu = rng.uniform(-2, 2, size=2)
            var = g3 + g4 @ nu + nu @ g5 @ nu
            assert var >= -1e-10

    def test_factorization_reproduces_identity(self):
        dim_gp, _ = make_gp(n=50, seed=5)
        K = dim_gp.L @ dim_gp.L.T
        assert np.abs(K @ dim_gp.G_inv - np.eye(50)).max() <= 1e-8

    def test_dimension_independence(self):
        rng = np.random.default_rng(6)
        p = make_params()
        Z = rng.normal(size=(30, 4))
        Nu = rng.normal(size=(30, 2))
        y0, y1 = rng.normal(size=30), rng.normal(size=30)
        gp_a = AffineGP(dims=[DimensionGP(p, Z, Nu, y0), DimensionGP(p, Z, Nu, y1)])
        gp_b = AffineGP(dims=[DimensionGP(p, Z, Nu, y0),
                              DimensionGP(p, Z, Nu, y1 + 5.0)])
        z_star = rng.normal(size=4)
        ga = gamma_terms(gp_a, z_star)
        gb = gamma_terms(gp_b, z_star)
        assert np.array_equal(ga.gamma1[0], gb.gamma1[0])
        assert np.array_equal(ga.gamma2[0], gb.gamma2[0])
        assert np.array_equal(ga.gamma3[0], gb.gamma3[0])


class TestFit:
    def test_requires_two_points(self):
        p = make_params()
        pt = GPDataPoint(z=np.zeros(4), nu=np.zeros(2), v=np.zeros(2))
        with pytest.raises(ValueError):
            fit([pt], p)

    def test_ascent_over_initialization(self):
        rng = np.random.default_rng(7)
        pts = [GPDataPoint(z=rng.normal(size=4), nu=rng.normal(size=2),
                           v=rng.normal(size=2)) for _ in range(25)]
        init = make_params()
        gps = fit(pts, init, restarts=2, max_iter=60, seed=0)
        for d in gps.dims:
            assert d.fit_report["lml"] >= d.fit_report["lml_init"] - 1e-9

    def test_duplicate_point_keeps_likelihood_finite(self):
        rng = np.random.default_rng(8)
        pts = [GPDataPoint(z=rng.normal(size=4), nu=rng.normal(size=2),
                           v=rng.normal(size=2)) for _ in range(10)]
        pts.append(pts[0])
        gps = fit(pts, make_params(), restarts=1, max_iter=30, seed=0)
        for d in gps.dims:
            assert np.isfinite(d.log_marginal_likelihood())

    def test_recovers_lengthscale_scale_from_prior_draws(self):
        # draw targets from the kernel's own prior and check the fitted
        # hyperparameters land in the right decade (statistical)
        rng = np.random.default_rng(9)
        n, n_z, m = 200, 2, 2
        true = AffineKernelParams(
            alpha_signal_var=2.0, alpha_lengthscales=np.array([1.0, 1.0]),
            beta_signal_vars=np.array([1.5, 1.0]),
            beta_lengthscales=np.ones((2, 2)), noise_var=1e-4)
        Z = rng.uniform(-2, 2, size=(n, n_z))
        Nu = rng.uniform(-1, 1, size=(n, m))
        from flatmpc.gp_affine import _gram
        K = _gram(true, Z, Nu)
        L = np.linalg.cholesky(K + 1e-10 * np.eye(n))
        y = L @ rng.standard_normal(n) + 1e-2 * rng.standard_normal(n)
        pts = [GPDataPoint(z=Z[i], nu=Nu[i], v=np.array([y[i], y[i]])) for i in range(n)]
        init = AffineKernelParams(1.0, np.full(n_z, 2.0), np.ones(m),
                                  np.full((m, n_z), 2.0), 1e-2)
        gps = fit(pts, init, restarts=3, max_iter=150, seed=1)
        fitted = gps.dims[0].params
        # log-lengthscales of the alpha kernel within ~20 percent
        ratio = np.log(fitted.alpha_lengthscales) - np.log(true.alpha_lengthscales)
        assert np.abs(ratio).max() < np.log(1.5)

    def test_interpolation_with_tiny_noise(self):
        rng = np.random.default_rng(10)
        n = 25
        Z = rng.uniform(-1, 1, size=(n, 4))
        Nu = rng.uniform(-1, 1, size=(n, 2))
        y = np.sin(Z[:, 0]) + Nu[:, 1]
        p = AffineKernelParams(1.0, np.full(4, 1.5), np.ones(2),
                               np.full((2, 4), 1.5), 1e-8)
        gp = DimensionGP(p, Z, Nu, y)
        for i in range(n):
            mu, _ = gp.predict(Z[i], Nu[i])
            assert mu == pytest.approx(y[i], abs=1e-4)


class TestConfidenceMultiplier:
    def test_fixed_passthrough(self):
        gp, _ = make_gp()
        assert confidence_multiplier(gp, 0.01, mode="fixed", fixed_value=2.0) == 2.0

    def test_monotone_in_delta(self):
        gp, _ = make_gp()
        vals = [confidence_multiplier(gp, d, mode="rkhs", rkhs_bound=1.0)
                for d in (0.2, 0.1, 0.01, 0.001)]
        assert all(b >= a for a, b in zip(vals, vals[1:]))

    def test_rejects_bad_delta(self):
        gp, _ = make_gp()
        for bad in (0.0, 1.0, -0.5, 2.0):
            with pytest.raises(ValueError):
                confidence_multiplier(gp, bad)

    def test_holdout_coverage_at_two_sigma(self):
        # calibration experiment: true function drawn near the kernel family
        rng = np.random.default_rng(11)
        n, n_hold = 150, 150
        Z = rng.uniform(-1, 1, size=(n + n_hold, 4))
        Nu = rng.uniform(-1, 1, size=(n + n_hold, 2))
        f = np.cos(Z[:, 0]) * (1 + 0.5 * Nu[:, 0]) + 0.3 * Z[:, 2] * Nu[:, 1]
        noise = 0.05
        y = f + noise * rng.standard_normal(n + n_hold)
        pts = [GPDataPoint(z=Z[i], nu=Nu[i], v=np.array([y[i], 0.0]))
               for i in range(n)]
        init = AffineKernelParams(1.0, np.full(4, 1.5), np.ones(2),
                                  np.full((2, 4), 1.5), noise**2)
        gps = fit(pts, init, restarts=2, max_iter=120, seed=2)
        dim = gps.dims[0]
        inside = 0
        for i in range(n, n + n_hold):
            mu, var = dim.predict(Z[i], Nu[i])
            sd = np.sqrt(max(var, 0.0) + dim.params.noise_var)
            inside += abs(y[i] - mu) <= 2.0 * sd
        assert inside / n_hold >= 0.85


class TestSampling:
    def test_paper_scale_deterministic(self):
        ref = lemniscate_reference(1.0, 0.5, 6.0, 0.01, 300, center=(0.0, 1.0))
        p = QuadParams()
        kw = dict(z_jitter=0.05 * np.ones(8), nu_min=np.array([-40.0, -0.2]),
                  nu_max=np.array([40.0, 0.2]), noise_std=0.1, seed=7)
        pts1 = sample_training_data(ref, p, 600, **kw)
        pts2 = sample_training_data(ref, p, 600, **kw)
        assert len(pts1) == 600
        for a, b in zip(pts1, pts2):
            assert np.array_equal(a.z, b.z)
            assert np.array_equal(a.nu, b.nu)
            assert np.array_equal(a.v, b.v)

    def test_zero_jitter_zero_noise_targets_exact(self):
        ref = lemniscate_reference(1.0, 0.5, 6.0, 0.01, 100, center=(0.0, 1.0))
        p = QuadParams()
        pts = sample_training_data(ref, p, 50, z_jitter=np.zeros(8),
                                   nu_min=np.array([-1.0, -0.1]),
                                   nu_max=np.array([1.0, 0.1]),
                                   noise_std=0.0, seed=3)
        for pt in pts:
            v, _, _ = psi_true(pt.z, pt.nu, p)
            np.testing.assert_allclose(pt.v, v, rtol=0, atol=1e-12)

    def test_rejects_bad_count(self):
        ref = lemniscate_reference(1.0, 0.5, 6.0, 0.01, 10)
        with pytest.raises(ValueError):
            sample_training_data(ref, QuadParams(), 0, np.zeros(8),
                                 np.zeros(2), np.ones(2), 0.1)


class TestArtifact:
    def test_save_load_round_trip(self, tmp_path):
        rng = np.random.default_rng(12)
        p = make_params()
        Z = rng.normal(size=(20, 4))
        Nu = rng.normal(size=(20, 2))
        gp = AffineGP(dims=[DimensionGP(p, Z, Nu, rng.normal(size=20)),
                            DimensionGP(p, Z, Nu, rng.normal(size=20))])
        path = tmp_path / "gp.json"
        save_artifact(gp, path)
        back = load_artifact(path)
        z_star, nu = rng.normal(size=4), rng.normal(size=2)
        mu1, var1 = gp.predict(z_star, nu)
        mu2, var2 = back.predict(z_star, nu)
        np.testing.assert_array_equal(mu1, mu2)
        np.testing.assert_array_equal(var1, var2)

    def test_identical_bytes_across_saves(self, tmp_path):
        rng = np.random.default_rng(13)
        p = make_params()
        Z = rng.normal(size=(10, 4))
        Nu = rng.normal(size=(10, 2))
        gp = AffineGP(dims=[DimensionGP(p, Z, Nu, rng.normal(size=10))])
        p1, p2 = tmp_path / "a.json", tmp_path / "b.json"
        save_artifact(gp, p1)
        save_artifact(gp, p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_version_check(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text('{"version": 99, "dims": []}')
        with pytest.raises(ValueError):
            load_artifact(path)
