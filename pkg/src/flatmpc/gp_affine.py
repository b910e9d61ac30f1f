"""Gaussian-process regression of the flat-input transformation.

Each flat-input component is modeled by an independent GP whose kernel
encodes affinity in the extended input:

    k((z, nu), (z', nu')) = k_a(z, z') + nu' diag(k_b1(z,z'), ..., k_bm(z,z')) nu'

with squared-exponential k_a and k_bj over the flat state.  The posterior
mean is then affine and the posterior variance quadratic in nu; the
query-point coefficients of those forms (the gamma terms) are what the
safety filter consumes.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize

__all__ = [
    "GPDataPoint",
    "AffineKernelParams",
    "GammaTerms",
    "DimensionGP",
    "AffineGP",
    "kernel_eval",
    "fit",
    "gamma_terms",
    "confidence_multiplier",
    "sample_training_data",
    "save_artifact",
    "load_artifact",
]

_LOG_BOUNDS = (-14.0, 16.0)


@dataclass(frozen=True)
class GPDataPoint:
    """One training sample: input (z, nu) with noisy flat-input target v."""

    z: np.ndarray
    nu: np.ndarray
    v: np.ndarray

    def __post_init__(self):
        for name in ("z", "nu", "v"):
            a = np.asarray(getattr(self, name), dtype=float)
            if not np.all(np.isfinite(a)):
                raise ValueError(f"{name} must be finite")
            a.setflags(write=False)
            object.__setattr__(self, name, a)


@dataclass(frozen=True)
class AffineKernelParams:
    """Hyperparameters of the affine kernel for one output dimension.

    alpha_* parametrize k_a; beta_* hold one row per extended-input
    component for the k_bj; noise_var is the observation noise variance.
    """

    alpha_signal_var: float
    alpha_lengthscales: np.ndarray
    beta_signal_vars: np.ndarray
    beta_lengthscales: np.ndarray
    noise_var: float

    def __post_init__(self):
        al = np.asarray(self.alpha_lengthscales, dtype=float)
        bv = np.asarray(self.beta_signal_vars, dtype=float)
        bl = np.atleast_2d(np.asarray(self.beta_lengthscales, dtype=float))
        if self.alpha_signal_var <= 0 or self.noise_var <= 0:
            raise ValueError("variances must be strictly positive")
        if np.any(al <= 0) or np.any(bv <= 0) or np.any(bl <= 0):
            raise ValueError("lengthscales and signal variances must be strictly positive")
        if bl.shape != (bv.shape[0], al.shape[0]):
            raise ValueError(f"beta_lengthscales must be {(bv.shape[0], al.shape[0])}, got {bl.shape}")
        for name, a in (("alpha_lengthscales", al), ("beta_signal_vars", bv),
                        ("beta_lengthscales", bl)):
            a.setflags(write=False)
            object.__setattr__(self, name, a)

    @property
    def n_z(self) -> int:
        return self.alpha_lengthscales.shape[0]

    @property
    def m(self) -> int:
        return self.beta_signal_vars.shape[0]

    def to_log_vector(self) -> np.ndarray:
        return np.log(np.concatenate([
            [self.alpha_signal_var], self.alpha_lengthscales,
            self.beta_signal_vars, self.beta_lengthscales.ravel(),
            [self.noise_var],
        ]))

    @classmethod
    def from_log_vector(cls, theta: np.ndarray, n_z: int, m: int) -> "AffineKernelParams":
        v = np.exp(np.asarray(theta, dtype=float))
        k = 1 + n_z
        return cls(
            alpha_signal_var=float(v[0]),
            alpha_lengthscales=v[1:k],
            beta_signal_vars=v[k:k + m],
            beta_lengthscales=v[k + m:k + m + m * n_z].reshape(m, n_z),
            noise_var=float(v[-1]),
        )

    def to_dict(self) -> dict:
        return {
            "alpha_signal_var": self.alpha_signal_var,
            "alpha_lengthscales": self.alpha_lengthscales.tolist(),
            "beta_signal_vars": self.beta_signal_vars.tolist(),
            "beta_lengthscales": self.beta_lengthscales.tolist(),
            "noise_var": self.noise_var,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "AffineKernelParams":
        return cls(
            alpha_signal_var=float(d["alpha_signal_var"]),
            alpha_lengthscales=np.asarray(d["alpha_lengthscales"], dtype=float),
            beta_signal_vars=np.asarray(d["beta_signal_vars"], dtype=float),
            beta_lengthscales=np.asarray(d["beta_lengthscales"], dtype=float),
            noise_var=float(d["noise_var"]),
        )


@dataclass(frozen=True)
class GammaTerms:
    """Query-point coefficients of the affine mean / quadratic variance.

    For output dimension i: mean(nu) = gamma1[i] + gamma2[i] @ nu and
    var(nu) = gamma3[i] + gamma4[i] @ nu + nu @ gamma5[i] @ nu.
    """

    gamma1: np.ndarray          # (m,)
    gamma2: np.ndarray          # (m, m): row i is gamma2 of dimension i
    gamma3: np.ndarray          # (m,)
    gamma4: np.ndarray          # (m, m)
    gamma5: np.ndarray          # (m, m, m): gamma5[i] symmetric PSD

    def mean(self, nu: np.ndarray) -> np.ndarray:
        return self.gamma1 + self.gamma2 @ nu

    def variance(self, nu: np.ndarray) -> np.ndarray:
        quad = np.einsum("j,ijk,k->i", nu, self.gamma5, nu)
        return self.gamma3 + self.gamma4 @ nu + quad

    def stddev(self, nu: np.ndarray) -> np.ndarray:
        return np.sqrt(np.maximum(self.variance(nu), 0.0))


def _se_cross(Z1: np.ndarray, Z2: np.ndarray, signal_var: float,
              lengthscales: np.ndarray) -> np.ndarray:
    D = (Z1[:, None, :] - Z2[None, :, :]) / lengthscales
    return signal_var * np.exp(-0.5 * np.einsum("ijk,ijk->ij", D, D))


def kernel_eval(params: AffineKernelParams, a_i, a_j) -> float:
    """Affine kernel value between two (z, nu) input pairs."""
    z_i, nu_i = (np.asarray(x, dtype=float) for x in a_i)
    z_j, nu_j = (np.asarray(x, dtype=float) for x in a_j)
    k = _se_cross(z_i[None], z_j[None], params.alpha_signal_var,
                  params.alpha_lengthscales)[0, 0]
    for l in range(params.m):
        kb = _se_cross(z_i[None], z_j[None], params.beta_signal_vars[l],
                       params.beta_lengthscales[l])[0, 0]
        k += nu_i[l] * kb * nu_j[l]
    return float(k)


def _gram(params: AffineKernelParams, Z: np.ndarray, Nu: np.ndarray) -> np.ndarray:
    K = _se_cross(Z, Z, params.alpha_signal_var, params.alpha_lengthscales)
    for l in range(params.m):
        Kb = _se_cross(Z, Z, params.beta_signal_vars[l], params.beta_lengthscales[l])
        K += np.outer(Nu[:, l], Nu[:, l]) * Kb
    return K


def _chol_with_jitter(K: np.ndarray, noise_var: float) -> tuple[np.ndarray, float]:
    """Cholesky of K + noise_var I, escalating a diagonal jitter on failure."""
    n = K.shape[0]
    jitter = 0.0
    for _ in range(8):
        try:
            L = np.linalg.cholesky(K + (noise_var + jitter) * np.eye(n))
            return L, jitter
        except np.linalg.LinAlgError:
            jitter = 1e-10 if jitter == 0.0 else jitter * 10.0
    raise np.linalg.LinAlgError(
        f"Gram matrix not positive definite even with jitter {jitter:.1e}"
    )


def _extended_precision_inverse(K: np.ndarray, noise_var: float) -> tuple[np.ndarray, np.ndarray, float]:
    """Cholesky factor, inverse, and jitter of K + noise_var I in extended
    precision.

    The posterior variance decomposition cancels the prior against the data
    term almost exactly; with near-noiseless smooth targets the float64
    factorization alone loses enough digits to leave variance artifacts far
    above the true posterior scale.  Factoring in 80-bit floats pushes that
    artifact floor down by roughly three orders of magnitude.  The returned
    factors are float64; only the factorization itself runs extended.
    """
    n = K.shape[0]
    jitter = 0.0
    for _ in range(8):
        A = np.asarray(K, dtype=np.longdouble) + np.longdouble(noise_var + jitter) * np.eye(n, dtype=np.longdouble)
        L = np.zeros_like(A)
        ok = True
        for j in range(n):
            d = A[j, j] - L[j, :j] @ L[j, :j]
            if d <= 0:
                ok = False
                break
            L[j, j] = np.sqrt(d)
            if j + 1 < n:
                L[j + 1:, j] = (A[j + 1:, j] - L[j + 1:, :j] @ L[j, :j]) / L[j, j]
        if ok:
            # row-wise forward substitution for L^-1, still extended
            Linv = np.zeros_like(L)
            eye_ld = np.eye(n, dtype=np.longdouble)
            for i in range(n):
                Linv[i, :] = (eye_ld[i] - L[i, :i] @ Linv[:i, :]) / L[i, i]
            return L.astype(float), Linv.astype(float), jitter
        jitter = 1e-10 if jitter == 0.0 else jitter * 10.0
    raise np.linalg.LinAlgError(
        f"Gram matrix not positive definite even with jitter {jitter:.1e}"
    )


class DimensionGP:
    """Trained GP of a single flat-input component.

    Holds the hyperparameters, training inputs, the Cholesky factor of the
    noisy Gram matrix, its solve against the targets, and the cached
    inverse used for fast query-time gamma terms.
    """

    def __init__(self, params: AffineKernelParams, Z: np.ndarray, Nu: np.ndarray,
                 y: np.ndarray, fit_report: dict | None = None,
                 extended_precision: bool = True,
                 nu_scale: np.ndarray | None = None):
        self.params = params
        self.Z = np.asarray(Z, dtype=float)
        self.nu_scale = (np.ones(params.m) if nu_scale is None
                         else np.asarray(nu_scale, dtype=float))
        if np.any(self.nu_scale <= 0):
            raise ValueError("nu_scale must be strictly positive")
        # inputs are stored in normalized units; the bilinear kernel absorbs
        # the scale into the beta signal variances, and the gamma terms are
        # mapped back, so wide physical input ranges cannot blow up the
        # magnitudes inside the posterior cancellation
        self.Nu = np.asarray(Nu, dtype=float) / self.nu_scale
        self.y = np.asarray(y, dtype=float)
        self.fit_report = dict(fit_report or {})
        n = self.Z.shape[0]
        if n:
            K = _gram(params, self.Z, self.Nu)
            if extended_precision:
                self.L, Linv, self.jitter = _extended_precision_inverse(
                    K, params.noise_var)
            else:
                self.L, self.jitter = _chol_with_jitter(K, params.noise_var)
                Linv = np.linalg.solve(self.L, np.eye(n))
            self.G_inv = Linv.T @ Linv
            self.alpha_w = self.G_inv @ self.y
            # log det(I + K / noise_var): information-gain proxy for the
            # RKHS confidence multiplier
            self.log_det_ratio = float(
                2.0 * np.sum(np.log(np.diag(self.L)))
                - n * np.log(params.noise_var + self.jitter)
            )
        else:
            self.L = np.zeros((0, 0))
            self.jitter = 0.0
            self.alpha_w = np.zeros(0)
            self.G_inv = np.zeros((0, 0))
            self.log_det_ratio = 0.0

    @property
    def n_train(self) -> int:
        return self.Z.shape[0]

    def _cross_vectors(self, z_star: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Cross-covariance split into its nu-independent and nu-linear parts."""
        p = self.params
        c_alpha = _se_cross(z_star[None], self.Z, p.alpha_signal_var,
                            p.alpha_lengthscales)[0]
        C = np.empty((self.n_train, p.m))
        for l in range(p.m):
            kb = _se_cross(z_star[None], self.Z, p.beta_signal_vars[l],
                           p.beta_lengthscales[l])[0]
            C[:, l] = kb * self.Nu[:, l]
        return c_alpha, C

    def gamma(self, z_star: np.ndarray) -> tuple[float, np.ndarray, float, np.ndarray, np.ndarray]:
        p = self.params
        s = self.nu_scale
        prior_var = p.alpha_signal_var
        prior_diag = np.diag(p.beta_signal_vars / s**2)
        if self.n_train == 0:
            m = p.m
            return 0.0, np.zeros(m), float(prior_var), np.zeros(m), prior_diag
        c_alpha, C = self._cross_vectors(np.asarray(z_star, dtype=float))
        g1 = float(c_alpha @ self.alpha_w)
        g2 = (C.T @ self.alpha_w) / s
        Gc = self.G_inv @ c_alpha
        GC = self.G_inv @ C
        g3 = float(prior_var - c_alpha @ Gc)
        g4 = -2.0 * (C.T @ Gc) / s
        g5 = np.diag(p.beta_signal_vars) - C.T @ GC
        g5 = 0.5 * (g5 + g5.T) / np.outer(s, s)
        return g1, g2, g3, g4, g5

    def predict(self, z_star: np.ndarray, nu: np.ndarray) -> tuple[float, float]:
        """Direct posterior mean/variance at a single query (z, nu)."""
        g1, g2, g3, g4, g5 = self.gamma(z_star)
        nu = np.asarray(nu, dtype=float)
        mean = g1 + g2 @ nu
        var = g3 + g4 @ nu + nu @ g5 @ nu
        return float(mean), float(var)

    def log_marginal_likelihood(self) -> float:
        n = self.n_train
        return float(
            -0.5 * self.y @ self.alpha_w
            - np.sum(np.log(np.diag(self.L)))
            - 0.5 * n * np.log(2.0 * np.pi)
        )


@dataclass
class AffineGP:
    """Bundle of independent per-output-dimension GPs sharing the input set."""

    dims: list[DimensionGP]

    @property
    def m(self) -> int:
        return len(self.dims)

    def gamma_terms(self, z_star: np.ndarray) -> GammaTerms:
        return gamma_terms(self, z_star)

    def predict(self, z_star: np.ndarray, nu: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        out = [d.predict(z_star, nu) for d in self.dims]
        return np.array([o[0] for o in out]), np.array([o[1] for o in out])


def gamma_terms(gp: AffineGP, z_star: np.ndarray) -> GammaTerms:
    """Query-point decomposition of every dimension's posterior at z_star."""
    m = gp.m
    g1 = np.empty(m)
    g2 = np.empty((m, m))
    g3 = np.empty(m)
    g4 = np.empty((m, m))
    g5 = np.empty((m, m, m))
    for i, d in enumerate(gp.dims):
        g1[i], g2[i], g3[i], g4[i], g5[i] = d.gamma(z_star)
    return GammaTerms(gamma1=g1, gamma2=g2, gamma3=g3, gamma4=g4, gamma5=g5)


def _neg_lml_and_grad(theta: np.ndarray, Z: np.ndarray, Nu: np.ndarray,
                      y: np.ndarray, n_z: int, m: int) -> tuple[float, np.ndarray]:
    p = AffineKernelParams.from_log_vector(theta, n_z, m)
    n = Z.shape[0]
    K_alpha = _se_cross(Z, Z, p.alpha_signal_var, p.alpha_lengthscales)
    K_betas = [_se_cross(Z, Z, p.beta_signal_vars[l], p.beta_lengthscales[l])
               for l in range(m)]
    K = K_alpha.copy()
    for l in range(m):
        K += np.outer(Nu[:, l], Nu[:, l]) * K_betas[l]
    try:
        L, jitter = _chol_with_jitter(K, p.noise_var)
    except np.linalg.LinAlgError:
        return 1e12, np.zeros_like(theta)
    alpha_w = np.linalg.solve(L.T, np.linalg.solve(L, y))
    lml = (-0.5 * y @ alpha_w - np.sum(np.log(np.diag(L)))
           - 0.5 * n * np.log(2.0 * np.pi))

    Linv = np.linalg.solve(L, np.eye(n))
    G_inv = Linv.T @ Linv
    # dL/dtheta_j = 0.5 tr((aa' - G^-1) dG/dtheta_j)
    A = np.outer(alpha_w, alpha_w) - G_inv

    grads = np.empty_like(theta)
    idx = 0
    grads[idx] = 0.5 * np.sum(A * K_alpha)
    idx += 1
    for d in range(n_z):
        D = (Z[:, None, d] - Z[None, :, d]) ** 2 / p.alpha_lengthscales[d] ** 2
        grads[idx] = 0.5 * np.sum(A * (K_alpha * D))
        idx += 1
    outer_nu = [np.outer(Nu[:, l], Nu[:, l]) for l in range(m)]
    for l in range(m):
        grads[idx] = 0.5 * np.sum(A * (outer_nu[l] * K_betas[l]))
        idx += 1
    for l in range(m):
        base = outer_nu[l] * K_betas[l]
        for d in range(n_z):
            D = (Z[:, None, d] - Z[None, :, d]) ** 2 / p.beta_lengthscales[l, d] ** 2
            grads[idx] = 0.5 * np.sum(A * (base * D))
            idx += 1
    grads[idx] = 0.5 * (p.noise_var + jitter) * np.trace(A)
    return -lml, -grads


def _stack_points(data: list[GPDataPoint]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    Z = np.stack([d.z for d in data])
    Nu = np.stack([d.nu for d in data])
    V = np.stack([d.v for d in data])
    return Z, Nu, V


def fit(
    data: list[GPDataPoint],
    init: AffineKernelParams | list[AffineKernelParams],
    restarts: int = 5,
    max_iter: int = 200,
    grad_tol: float = 1e-5,
    seed: int = 0,
) -> AffineGP:
    """Fit one GP per output dimension by maximizing the marginal likelihood.

    Multi-start L-BFGS in log-parameter space with analytic gradients; the
    first start is the provided init (shared or one per output dimension),
    the rest are seeded log-perturbations.  Per-dimension fits share the
    input set but nothing else.

    Raises:
        ValueError: on fewer than two data points.
    """
    if len(data) < 2:
        raise ValueError(f"need at least 2 data points, got {len(data)}")
    Z, Nu, V = _stack_points(data)
    n_z, m = Z.shape[1], Nu.shape[1]
    inits = list(init) if isinstance(init, (list, tuple)) else [init] * m
    if len(inits) != m:
        raise ValueError(f"need one init per output dimension, got {len(inits)}")
    for ini in inits:
        if ini.n_z != n_z or ini.m != m:
            raise ValueError("init dimensions do not match the data")
    rng = np.random.default_rng(seed)
    # internal input normalization keeps the bilinear kernel magnitudes
    # balanced regardless of the physical input ranges
    nu_scale = np.maximum(np.abs(Nu).max(axis=0), 1e-12)
    Nu_s = Nu / nu_scale
    dims = []
    for i in range(m):
        init_i = inits[i]
        init_scaled = AffineKernelParams(
            alpha_signal_var=init_i.alpha_signal_var,
            alpha_lengthscales=init_i.alpha_lengthscales,
            beta_signal_vars=init_i.beta_signal_vars * nu_scale**2,
            beta_lengthscales=init_i.beta_lengthscales,
            noise_var=init_i.noise_var,
        )
        theta0 = init_scaled.to_log_vector()
        starts = [theta0] + [theta0 + rng.normal(scale=0.5, size=theta0.shape)
                             for _ in range(max(0, restarts - 1))]
        y = V[:, i]
        best = None
        n_converged = 0
        for theta_start in starts:
            res = minimize(
                _neg_lml_and_grad, theta_start, args=(Z, Nu_s, y, n_z, m),
                jac=True, method="L-BFGS-B",
                bounds=[_LOG_BOUNDS] * theta0.shape[0],
                options={"maxiter": max_iter, "gtol": grad_tol},
            )
            n_converged += int(res.success)
            if best is None or res.fun < best.fun:
                best = res
        if n_converged == 0:
            warnings.warn(
                f"GP dimension {i}: no optimizer start converged "
                f"(best message: {best.message})", RuntimeWarning)
        # ascent guarantee relative to the provided init
        f_init, _ = _neg_lml_and_grad(theta0, Z, Nu_s, y, n_z, m)
        theta_best = best.x if best.fun <= f_init else theta0
        params = AffineKernelParams.from_log_vector(theta_best, n_z, m)
        report = {
            "lml": float(-min(best.fun, f_init)),
            "lml_init": float(-f_init),
            "converged_starts": n_converged,
            "n_starts": len(starts),
        }
        dims.append(DimensionGP(params, Z, Nu, y, fit_report=report,
                                nu_scale=nu_scale))
    return AffineGP(dims=dims)


def confidence_multiplier(
    gp_dim: DimensionGP,
    delta: float,
    mode: str = "fixed",
    fixed_value: float = 2.0,
    rkhs_bound: float = 1.0,
) -> float:
    """Scalar multiplier of the posterior stddev in the mean-error envelope.

    "fixed" returns the configured constant; "rkhs" evaluates the
    information-gain bound B + sigma_n sqrt(2 (gamma_n + 1 + ln(1/delta)))
    from the stored Gram factorization.  Monotonically non-increasing delta
    never decreases the result.
    """
    if not 0.0 < delta < 1.0:
        raise ValueError(f"delta must be in (0, 1), got {delta}")
    if mode == "fixed":
        return float(fixed_value)
    if mode == "rkhs":
        info_gain = 0.5 * gp_dim.log_det_ratio
        sigma_n = np.sqrt(gp_dim.params.noise_var)
        return float(rkhs_bound + sigma_n * np.sqrt(
            2.0 * (info_gain + 1.0 + np.log(1.0 / delta))))
    raise ValueError(f"unknown confidence mode {mode!r}")


def sample_training_data(
    reference,
    quad_params,
    n: int,
    z_jitter: np.ndarray,
    nu_min: np.ndarray,
    nu_max: np.ndarray,
    noise_std: float,
    seed: int = 0,
) -> list[GPDataPoint]:
    """Sample (z, nu, v) triples around a reference trajectory.

    Flat states are Gaussian-jittered around uniformly drawn reference
    samples, extended inputs are uniform in their box, and targets are the
    true transformation plus i.i.d. Gaussian noise.  States violating the
    specific-force floor are redrawn.  Deterministic under a fixed seed.
    """
    from . import quadrotor2d as q2d

    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    z_jitter = np.asarray(z_jitter, dtype=float)
    nu_min = np.asarray(nu_min, dtype=float)
    nu_max = np.asarray(nu_max, dtype=float)
    rng = np.random.default_rng(seed)
    points: list[GPDataPoint] = []
    attempts = 0
    while len(points) < n:
        attempts += 1
        if attempts > 50 * n:
            raise RuntimeError(
                "sampling keeps violating the specific-force floor; "
                "reduce z_jitter or lower f_min")
        k = int(rng.integers(len(reference)))
        z = reference.z_ref[k] + z_jitter * rng.standard_normal(8)
        nu = rng.uniform(nu_min, nu_max)
        try:
            v, _, _ = q2d.psi_true(z, nu, quad_params)
        except q2d.FlatnessSingularityError:
            continue
        v = v + noise_std * rng.standard_normal(v.shape)
        points.append(GPDataPoint(z=z, nu=nu, v=v))
    return points


# ---------------------------------------------------------------------------
# Artifact serialization (versioned JSON)
# ---------------------------------------------------------------------------

ARTIFACT_VERSION = 1


def save_artifact(gp: AffineGP, path) -> None:
    payload = {
        "version": ARTIFACT_VERSION,
        "dims": [
            {
                "params": d.params.to_dict(),
                "Z": d.Z.tolist(),
                "Nu": (d.Nu * d.nu_scale).tolist(),
                "nu_scale": d.nu_scale.tolist(),
                "y": d.y.tolist(),
                "fit_report": d.fit_report,
            }
            for d in gp.dims
        ],
    }
    with open(path, "w") as fh:
        json.dump(payload, fh, sort_keys=True)


def load_artifact(path) -> AffineGP:
    with open(path) as fh:
        payload = json.load(fh)
    if payload.get("version") != ARTIFACT_VERSION:
        raise ValueError(f"unsupported GP artifact version {payload.get('version')}")
    dims = [
        DimensionGP(
            AffineKernelParams.from_dict(d["params"]),
            np.asarray(d["Z"], dtype=float),
            np.asarray(d["Nu"], dtype=float),
            np.asarray(d["y"], dtype=float),
            fit_report=d.get("fit_report"),
            nu_scale=(np.asarray(d["nu_scale"], dtype=float)
                      if "nu_scale" in d else None),
        )
        for d in payload["dims"]
    ]
    return AffineGP(dims=dims)
