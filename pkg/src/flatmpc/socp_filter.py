"""Second-order-cone safety filter.

Per-step assembly and solution of the cone program that picks the extended
input closest (in expectation) to the MPC's desired flat input while
certifying probabilistic Lyapunov decrease, probabilistic half-space
flat-state satisfaction one step ahead, and hard input bounds through the
dynamic extension.

Decision vector y = [nu; q1; q2] where q1 is the epigraph variable of the
quadratic tracking cost and q2 bounds the input-dependent quadratic part of
the stability constraint.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import conic_backend
from .conic_backend import SolverReport
from .flat_core import DiscreteFlatLTI, ExtensionSpec, RiccatiResult, extension_step
from .gp_affine import AffineGP, GammaTerms, gamma_terms

__all__ = [
    "LyapunovData",
    "LipschitzBound",
    "ConeProgram",
    "FilterResult",
    "FilterConfig",
    "quantile",
    "lyapunov_data",
    "lipschitz_bound",
    "assemble_socp",
    "solve_socp",
    "filter_step",
]


# Acklam's rational approximation of the inverse normal CDF, used as the
# Newton starting point.
_ACKLAM_A = (-3.969683028665376e+01, 2.209460984245205e+02,
             -2.759285104469687e+02, 1.383577518672690e+02,
             -3.066479806614716e+01, 2.506628277459239e+00)
_ACKLAM_B = (-5.447609879822406e+01, 1.615858368580409e+02,
             -1.556989798598866e+02, 6.680131188771972e+01,
             -1.328068155288572e+01)
_ACKLAM_C = (-7.784894002430293e-03, -3.223964580411365e-01,
             -2.400758277161838e+00, -2.549732539343734e+00,
             4.374664141464968e+00, 2.938163982698783e+00)
_ACKLAM_D = (7.784695709041462e-03, 3.224671290700398e-01,
             2.445134137142996e+00, 3.754408661907416e+00)


def quantile(p: float) -> float:
    """Inverse standard normal CDF, accurate to well below 1e-9.

    Rational initial guess refined by Newton steps on the complementary
    error function.
    """
    if not 0.0 < p < 1.0:
        raise ValueError(f"probability must be in (0, 1), got {p}")
    a, b, c, d = _ACKLAM_A, _ACKLAM_B, _ACKLAM_C, _ACKLAM_D
    p_low = 0.02425
    if p < p_low:
        q = math.sqrt(-2.0 * math.log(p))
        x = (((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) / \
            ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0)
    elif p <= 1.0 - p_low:
        q = p - 0.5
        r = q * q
        x = (((((a[0] * r + a[1]) * r + a[2]) * r + a[3]) * r + a[4]) * r + a[5]) * q / \
            (((((b[0] * r + b[1]) * r + b[2]) * r + b[3]) * r + b[4]) * r + 1.0)
    else:
        q = math.sqrt(-2.0 * math.log(1.0 - p))
        x = -(((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) / \
            ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0)
    for _ in range(3):
        err = 0.5 * math.erfc(-x / math.sqrt(2.0)) - p
        pdf = math.exp(-0.5 * x * x) / math.sqrt(2.0 * math.pi)
        if pdf == 0.0:
            break
        x -= err / pdf
    return x


@dataclass(frozen=True)
class LyapunovData:
    """Error-dependent coefficients of the Lyapunov decrease constraint."""

    w1: np.ndarray              # (m,)
    W2_diag: np.ndarray         # (m,) diagonal of B' P B
    w3: float
    w4: np.ndarray              # (m,)
    v_nom: np.ndarray           # (m,) nominal flat input -K e + v_ref
    e: np.ndarray               # (n_z,) tracking error
    epsilon: float

    @property
    def rhs_budget(self) -> float:
        """w3 + w1' W2^-1 w1 / 4, the decrease budget of the current error."""
        return self.w3 + 0.25 * float(self.w1 @ (self.w1 / self.W2_diag))


@dataclass(frozen=True)
class LipschitzBound:
    """Per-dimension Lipschitz constants of the componentwise quadratic."""

    L: np.ndarray               # (m,)
    rho_bar: float


@dataclass(frozen=True)
class SOC:
    A: np.ndarray
    b: np.ndarray
    c: np.ndarray
    d: float


@dataclass(frozen=True)
class ConeProgram:
    """Standard-form data of the per-step safety filter program."""

    objective: np.ndarray       # (m + 2,)
    socs: tuple[SOC, ...]
    G_lin: np.ndarray
    h_lin: np.ndarray
    lb: np.ndarray
    ub: np.ndarray
    m: int

    def to_json(self) -> str:
        return conic_backend.cone_problem_to_json(
            self.objective, [(s.A, s.b, s.c, s.d) for s in self.socs],
            self.G_lin, self.h_lin, self.lb, self.ub)

    @classmethod
    def from_json(cls, text: str, m: int | None = None) -> "ConeProgram":
        c, socs, G, h, lb, ub = conic_backend.cone_problem_from_json(text)
        return cls(objective=c, socs=tuple(SOC(*s) for s in socs),
                   G_lin=G, h_lin=h, lb=lb, ub=ub,
                   m=int(m if m is not None else c.shape[0] - 2))


@dataclass(frozen=True)
class FilterResult:
    nu_star: np.ndarray
    status: str
    objective: float
    cone_slacks: np.ndarray     # margin c'y + d - ||Ay - b|| per cone
    next_state_mean: np.ndarray
    next_state_cov_diag: np.ndarray
    report: SolverReport


@dataclass(frozen=True)
class FilterConfig:
    """Static configuration of the safety filter."""

    nu_min: np.ndarray
    nu_max: np.ndarray
    u_min: np.ndarray
    u_max: np.ndarray
    betas: np.ndarray           # (m,) confidence multipliers beta_bar_i
    delta_state: np.ndarray     # per-half-space risk levels delta_j
    delta_bar: float = 0.99     # probability level of the Lipschitz quantile
    epsilon: float = 1e-6
    thrust_overshoot_tightening: bool = False

    def __post_init__(self):
        for name in ("nu_min", "nu_max", "u_min", "u_max", "betas", "delta_state"):
            a = np.asarray(getattr(self, name), dtype=float)
            a.setflags(write=False)
            object.__setattr__(self, name, a)


def lyapunov_data(
    riccati: RiccatiResult,
    lti: DiscreteFlatLTI,
    e_k: np.ndarray,
    v_ref: np.ndarray,
    epsilon: float = 1e-6,
) -> LyapunovData:
    """Coefficients of the decrease condition for the current tracking error.

    Raises ValueError when B' P B is not diagonal positive definite (it is
    exactly diagonal for chain-blocked P).
    """
    e_k = np.asarray(e_k, dtype=float)
    v_ref = np.asarray(v_ref, dtype=float)
    A, B = lti.A_d, lti.B_d
    K, P = riccati.K, riccati.P
    A_cl = A - B @ K
    W2 = B.T @ P @ B
    W2_diag = np.diag(W2).copy()
    off = np.abs(W2 - np.diag(W2_diag)).max()
    if off > 1e-10 * max(W2_diag.max(), 1e-300) or W2_diag.min() <= 0:
        raise ValueError("B' P B must be diagonal positive definite")
    w1 = 2.0 * B.T @ (P @ (A_cl @ e_k))
    w3 = float(e_k @ (P @ e_k) - (A_cl @ e_k) @ (P @ (A_cl @ e_k))) - epsilon
    w4 = 0.5 * w1 / W2_diag
    v_nom = -K @ e_k + v_ref
    return LyapunovData(w1=w1, W2_diag=W2_diag, w3=w3, w4=w4,
                        v_nom=v_nom, e=e_k, epsilon=epsilon)


def lipschitz_bound(
    gamma: GammaTerms,
    lyap: LyapunovData,
    nu_min: np.ndarray,
    nu_max: np.ndarray,
    rho_bar: float,
) -> LipschitzBound:
    """Vertex-enumerated Lipschitz constants over the extended-input box.

    The maximized expression is convex in the input (affine mean inside an
    absolute value plus the square root of a convex quadratic), so the
    maximum over the box is attained at a vertex and the enumeration is
    exact.
    """
    nu_min = np.asarray(nu_min, dtype=float)
    nu_max = np.asarray(nu_max, dtype=float)
    m = nu_min.shape[0]
    L = np.zeros(m)
    for mask in range(1 << m):
        s = np.where([(mask >> j) & 1 for j in range(m)], nu_max, nu_min)
        mu = gamma.mean(s)
        sd = gamma.stddev(s)
        vals = 2.0 * lyap.W2_diag * (np.abs(mu - lyap.v_nom + lyap.w4) + rho_bar * sd)
        L = np.maximum(L, vals)
    return LipschitzBound(L=L, rho_bar=rho_bar)


def _chol_psd(M: np.ndarray, base_ridge: float = 1e-12) -> np.ndarray:
    """Cholesky factor with an escalating ridge for PSD-but-singular input."""
    scale = max(np.abs(M).max(), 1.0)
    ridge = 0.0
    for _ in range(10):
        try:
            return np.linalg.cholesky(M + ridge * scale * np.eye(M.shape[0]))
        except np.linalg.LinAlgError:
            ridge = base_ridge if ridge == 0.0 else ridge * 10.0
    raise np.linalg.LinAlgError("matrix is not positive semidefinite")


def _soc_sqrt_blocks(gamma: GammaTerms, weights: np.ndarray, m: int,
                     nu_abs_max: np.ndarray, rcond: float = 1e-10):
    """Stacked rows representing sum_i weights_i^2 * variance_i(nu).

    For each dimension i with weight w_i the block contributes rows whose
    squared norm upper-bounds w_i^2 var_i(nu) over the input box and equals
    it when the variance decomposition is numerically clean.  gamma5 is
    factored by eigendecomposition with a relative cutoff: directions below
    the cutoff cannot support a stable gamma5^-1 gamma4 solve, so their
    affine and quadratic contributions are folded into the constant term as
    box-wide upper bounds instead (which can only enlarge the represented
    variance, preserving the over-approximation direction).
    """
    rows, offs = [], []
    for i in range(m):
        w = float(weights[i])
        g3, g4, g5 = float(gamma.gamma3[i]), gamma.gamma4[i], gamma.gamma5[i]
        lam, V = np.linalg.eigh(0.5 * (g5 + g5.T))
        lam = np.maximum(lam, 0.0)
        lam_max = lam.max() if lam.size else 0.0
        keep = lam > rcond * max(lam_max, 1e-300)
        Vk = V[:, keep]
        sq = np.sqrt(lam[keep])
        R = sq[:, None] * Vk.T                   # ||R nu||^2 = nu' g5_par nu
        u = 0.5 * (Vk.T @ g4) / sq if sq.size else np.zeros(0)
        g4_perp = g4 - Vk @ (Vk.T @ g4)
        # box-wide bounds of the truncated affine and quadratic parts
        const = max(g3, 0.0) + float(np.abs(g4_perp) @ nu_abs_max)
        if lam_max > 0:
            const += rcond * lam_max * float(nu_abs_max @ nu_abs_max)
        tail = math.sqrt(max(const - float(u @ u), 0.0))
        k = R.shape[0]
        A_blk = np.zeros((k + 1, m))
        A_blk[:k, :] = w * R
        b_blk = np.concatenate([-w * u, [w * tail]])
        rows.append(A_blk)
        offs.append(b_blk)
    return np.vstack(rows), np.concatenate(offs)


def assemble_socp(
    gamma: GammaTerms,
    lyap: LyapunovData,
    lip: LipschitzBound,
    z_star: np.ndarray,
    v_star: np.ndarray,
    halfspaces,
    lti: DiscreteFlatLTI,
    ext: ExtensionSpec,
    eta_prev: np.ndarray,
    cfg: FilterConfig,
) -> ConeProgram:
    """Assemble the per-step cone program.

    Cones: #1 epigraph of the quadratic tracking cost in q1; #2 epigraph of
    the input-quadratic stability term in q2; #3 the Lyapunov decrease
    constraint with the stacked per-dimension uncertainty blocks (scaled by
    sqrt(m) so the sum of square roots is dominated, keeping the
    reformulation conservative) and q2 moved to the linear side; one
    additional cone per tightened half-space.  Linear rows map the extended
    input to system-input bounds through the extension; box rows bound nu.

    Both auxiliary variables are kept O(1) by normalizing their epigraphs
    with the box-maximum of the quadratic they bound; the stability cone is
    assembled in original Lyapunov units with the matching coefficient on
    q2.  The feasible set in nu is unchanged; only the parametrization of
    (q1, q2) differs, which keeps the rotated-cone encodings well
    conditioned across the wildly different W2 / input-box scales.
    """
    m = lyap.W2_diag.shape[0]
    n_y = m + 2
    z_star = np.asarray(z_star, dtype=float)
    v_star = np.asarray(v_star, dtype=float)
    g2 = gamma.gamma2
    nu_abs_max = np.maximum(np.abs(cfg.nu_min), np.abs(cfg.nu_max))

    socs: list[SOC] = []

    # cone 1: s1*q1 >= nu' M nu with M = sum g2 g2' + g5, q1 in [0, ~1]
    M = 0.5 * (g2.T @ g2 + gamma.gamma5.sum(axis=0))
    M += M.T
    s_q1 = max(float(nu_abs_max @ np.abs(M) @ nu_abs_max), 1e-300)
    L_M = _chol_psd(M / s_q1)
    A1 = np.zeros((m + 1, n_y))
    A1[:m, :m] = 2.0 * L_M.T
    A1[m, m] = -1.0
    b1 = np.zeros(m + 1)
    b1[m] = -1.0
    c1 = np.zeros(n_y)
    c1[m] = 1.0
    socs.append(SOC(A=A1, b=b1, c=c1, d=1.0))

    obj = np.zeros(n_y)
    obj[:m] = 2.0 * (gamma.gamma1 - v_star) @ g2 + gamma.gamma4.sum(axis=0)
    obj[m] = s_q1

    # cone 2: s2*q2 >= nu' N nu with N = sum W2_ii g2_i g2_i', q2 in [0, ~1]
    N = 0.5 * ((lyap.W2_diag[:, None] * g2).T @ g2)
    N += N.T
    s_q2 = max(float(nu_abs_max @ np.abs(N) @ nu_abs_max), 1e-300)
    L_N = _chol_psd(N / s_q2)
    A2 = np.zeros((m + 1, n_y))
    A2[:m, :m] = 2.0 * L_N.T
    A2[m, m + 1] = -1.0
    b2 = np.zeros(m + 1)
    b2[m] = -1.0
    c2 = np.zeros(n_y)
    c2[m + 1] = 1.0
    socs.append(SOC(A=A2, b=b2, c=c2, d=1.0))

    # cone 3: stability. sqrt(m) * ||stacked L_i beta_i blocks|| <= c3' y + d3
    weights = math.sqrt(m) * lip.L * cfg.betas
    A3_nu, b3 = _soc_sqrt_blocks(gamma, weights, m, nu_abs_max)
    A3 = np.zeros((A3_nu.shape[0], n_y))
    A3[:, :m] = A3_nu
    c3 = np.zeros(n_y)
    c3[:m] = -2.0 * ((lyap.W2_diag * (gamma.gamma1 + lyap.w4 - lyap.v_nom)) @ g2)
    c3[m + 1] = -s_q2
    mean_dev = gamma.gamma1 - lyap.v_nom + lyap.w4
    d3 = lyap.rhs_budget - float(lyap.W2_diag @ mean_dev**2)
    socs.append(SOC(A=A3, b=b3, c=c3, d=d3))

    # cones 4..: one-step PRS tightening of each half-space
    A_d, B_d = lti.A_d, lti.B_d
    free_next = A_d @ z_star
    for j, (h_vec, b_j) in enumerate(halfspaces):
        h_vec = np.asarray(h_vec, dtype=float)
        rho_j = quantile(1.0 - float(cfg.delta_state[j]))
        hB = h_vec @ B_d                      # per-chain scalars h_{j,i}' B_{d,i}
        w_state = rho_j * np.abs(hB)
        As_nu, bs = _soc_sqrt_blocks(gamma, w_state, m, nu_abs_max)
        As = np.zeros((As_nu.shape[0], n_y))
        As[:, :m] = As_nu
        cs = np.zeros(n_y)
        cs[:m] = -(hB @ g2)
        ds = float(b_j - h_vec @ free_next - hB @ gamma.gamma1)
        socs.append(SOC(A=As, b=bs, c=cs, d=ds))

    # linear rows: u_min <= C (A_ext eta + B_ext nu) <= u_max
    CB = ext.C_ext @ ext.B_d_ext
    u_free = ext.C_ext @ (ext.A_d_ext @ np.asarray(eta_prev, dtype=float))
    u_max = cfg.u_max.copy()
    u_min = cfg.u_min.copy()
    if cfg.thrust_overshoot_tightening and ext.orders[0] >= 2:
        # brakeable-set margin: the thrust rate eta[1] needs
        # rate^2 / (2 nu1_max) of headroom before the bound
        rate = float(eta_prev[1])
        if rate > 0:
            u_max[0] -= rate**2 / (2.0 * float(cfg.nu_max[0]))
        elif rate < 0:
            u_min[0] += rate**2 / (2.0 * float(-cfg.nu_min[0]))
    G_rows = np.zeros((2 * m, n_y))
    G_rows[:m, :m] = CB
    G_rows[m:, :m] = -CB
    h_rows = np.concatenate([u_max - u_free, u_free - u_min])

    lb = np.concatenate([cfg.nu_min, [-np.inf, -np.inf]])
    ub = np.concatenate([cfg.nu_max, [np.inf, np.inf]])
    return ConeProgram(objective=obj, socs=tuple(socs), G_lin=G_rows,
                       h_lin=h_rows, lb=lb, ub=ub, m=m)


def solve_socp(prog: ConeProgram) -> tuple[np.ndarray, np.ndarray, SolverReport]:
    """Solve the assembled program; returns (y, per-cone margins, report)."""
    res = conic_backend.solve_cone(
        prog.objective, [(s.A, s.b, s.c, s.d) for s in prog.socs],
        G_lin=prog.G_lin, h_lin=prog.h_lin, lb=prog.lb, ub=prog.ub)
    y = res.x
    slacks = np.array([
        float(s.c @ y + s.d - np.linalg.norm(s.A @ y - s.b)) for s in prog.socs
    ])
    return y, slacks, res.report


def filter_step(
    gps: AffineGP,
    riccati: RiccatiResult,
    lti: DiscreteFlatLTI,
    ext: ExtensionSpec,
    z_star: np.ndarray,
    v_star: np.ndarray,
    z_hat: np.ndarray,
    z_ref: np.ndarray,
    v_ref: np.ndarray,
    eta_prev: np.ndarray,
    halfspaces,
    cfg: FilterConfig,
) -> FilterResult:
    """One full safety-filter evaluation.

    Composes the gamma decomposition at the MPC linearization point, the
    Lyapunov data of the current error, the Lipschitz bounds over the input
    box, the cone program, and its solution.  A non-optimal status is
    returned as-is; no input is fabricated.
    """
    gamma = gamma_terms(gps, z_star)
    lyap = lyapunov_data(riccati, lti, np.asarray(z_hat) - np.asarray(z_ref),
                         v_ref, cfg.epsilon)
    rho_bar = quantile(cfg.delta_bar)
    lip = lipschitz_bound(gamma, lyap, cfg.nu_min, cfg.nu_max, rho_bar)
    prog = assemble_socp(gamma, lyap, lip, z_star, v_star, halfspaces,
                         lti, ext, eta_prev, cfg)
    y, slacks, report = solve_socp(prog)
    m = prog.m
    nu = y[:m]
    mean_v = gamma.mean(nu)
    var_v = np.maximum(gamma.variance(nu), 0.0)
    next_mean = lti.A_d @ np.asarray(z_star, dtype=float) + lti.B_d @ mean_v
    next_cov_diag = (lti.B_d**2) @ var_v
    return FilterResult(
        nu_star=nu,
        status=report.status,
        objective=float(prog.objective @ y),
        cone_slacks=slacks,
        next_state_mean=next_mean,
        next_state_cov_diag=next_cov_diag,
        report=report,
    )


def stability_lhs_rhs(
    gamma: GammaTerms, lyap: LyapunovData, lip: LipschitzBound,
    betas: np.ndarray, nu: np.ndarray,
) -> tuple[float, float]:
    """Raw componentwise stability inequality at a candidate input.

    Returns (lhs, rhs) of the scalar decrease condition; the cone program
    is a conservative reformulation of lhs <= rhs.
    """
    nu = np.asarray(nu, dtype=float)
    mu = gamma.mean(nu)
    sd = gamma.stddev(nu)
    lhs = float(lyap.W2_diag @ (mu - lyap.v_nom + lyap.w4) ** 2
                + (lip.L * np.asarray(betas)) @ sd)
    return lhs, lyap.rhs_budget
