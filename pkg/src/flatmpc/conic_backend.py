"""Dense small-scale convex solver backends.

A dual active-set method for strictly convex quadratic programs and a
primal-dual interior-point method with Nesterov-Todd scaling and Mehrotra
predictor-corrector steps for second-order cone programs.  Both are
deterministic: identical inputs produce identical outputs.

Cone program standard form solved here:

    minimize    c' y
    subject to  ||A_i y - b_i|| <= c_i' y + d_i     (second-order cones)
                G y <= h                            (linear inequalities)
                lb <= y <= ub                       (box, +-inf allowed)
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass

import numpy as np

__all__ = [
    "SolverReport",
    "QPResult",
    "ConeResult",
    "solve_qp",
    "solve_cone",
    "cone_problem_to_json",
    "cone_problem_from_json",
]

_TINY = 1e-14


@dataclass(frozen=True)
class SolverReport:
    status: str
    iterations: int
    primal_residual: float
    dual_residual: float
    duality_gap: float
    wall_time_us: float


@dataclass(frozen=True)
class QPResult:
    x: np.ndarray
    multipliers: np.ndarray
    report: SolverReport


@dataclass(frozen=True)
class ConeResult:
    x: np.ndarray
    report: SolverReport


# ---------------------------------------------------------------------------
# Quadratic programming: dual active set on  min 1/2 x'Hx + g'x  s.t. Gx <= h
# ---------------------------------------------------------------------------

def solve_qp(
    H: np.ndarray,
    g: np.ndarray,
    G: np.ndarray | None = None,
    h: np.ndarray | None = None,
    warm_set: list[int] | None = None,
    max_iter: int = 100,
    tol: float = 1e-10,
) -> QPResult:
    """Solve a strictly convex QP with inequality constraints.

    Starts from the unconstrained minimizer and adds the most violated
    constraint until primal feasible with nonnegative multipliers.  The
    optional warm_set seeds the initial working set (indices of rows of G);
    it only affects the path, not the unique optimum.
    """
    t0 = time.perf_counter()
    H = np.asarray(H, dtype=float)
    g = np.asarray(g, dtype=float)
    n = g.shape[0]
    if H.shape != (n, n):
        raise ValueError(f"H must be {(n, n)}, got {H.shape}")
    try:
        L = np.linalg.cholesky(0.5 * (H + H.T))
    except np.linalg.LinAlgError as exc:
        raise ValueError("H must be symmetric positive definite") from exc

    def h_solve(rhs):
        return np.linalg.solve(L.T, np.linalg.solve(L, rhs))

    x_free = -h_solve(g)
    if G is None or len(G) == 0:
        report = _qp_report("optimal", 0, 0.0, _qp_stationarity(H, g, None, None, x_free), 0.0, t0)
        return QPResult(x=x_free, multipliers=np.zeros(0), report=report)

    G = np.asarray(G, dtype=float)
    h = np.asarray(h, dtype=float)
    n_con = G.shape[0]
    HinvGT = h_solve(G.T)            # n x n_con, reused by every working set
    GHinvG = G @ HinvGT              # n_con x n_con
    GHinvg = G @ h_solve(g)

    work: list[int] = []
    if warm_set:
        work = [int(i) for i in warm_set if 0 <= int(i) < n_con]
        work = sorted(set(work))

    x = x_free
    lam_work = np.zeros(0)
    status = "max_iterations"
    for it in range(max_iter):
        if work:
            idx = np.array(work, dtype=int)
            S = GHinvG[np.ix_(idx, idx)]
            rhs = -(h[idx] + GHinvg[idx])
            try:
                lam_work = np.linalg.solve(S, rhs)
            except np.linalg.LinAlgError:
                lam_work, *_ = np.linalg.lstsq(S, rhs, rcond=None)
            if lam_work.size and lam_work.min() < -tol:
                drop = int(idx[np.argmin(lam_work)])
                work.remove(drop)
                continue
            x = -h_solve(g + G[idx].T @ lam_work)
        else:
            lam_work = np.zeros(0)
            x = x_free

        viol = G @ x - h
        worst = int(np.argmax(viol))
        if viol[worst] <= tol * max(1.0, np.abs(h).max()):
            status = "optimal"
            break
        if worst in work:
            # numerically stuck on a degenerate row
            status = "max_iterations"
            break
        work.append(worst)
        work.sort()
        if lam_work.size and np.abs(lam_work).max() > 1e12:
            status = "infeasible"
            break
    else:
        it = max_iter - 1

    multipliers = np.zeros(n_con)
    if work and lam_work.size == len(work):
        multipliers[np.array(work, dtype=int)] = np.maximum(lam_work, 0.0)

    pres = max(0.0, float((G @ x - h).max())) if status == "optimal" else float("nan")
    dres = _qp_stationarity(H, g, G, multipliers, x)
    gap = float(abs(multipliers @ (G @ x - h)))
    report = _qp_report(status, it + 1, pres, dres, gap, t0)
    return QPResult(x=x, multipliers=multipliers, report=report)


def _qp_stationarity(H, g, G, lam, x) -> float:
    r = H @ x + g
    if G is not None and lam is not None:
        r = r + G.T @ lam
    return float(np.abs(r).max())


def _qp_report(status, iters, pres, dres, gap, t0) -> SolverReport:
    return SolverReport(
        status=status,
        iterations=iters,
        primal_residual=pres,
        dual_residual=dres,
        duality_gap=gap,
        wall_time_us=(time.perf_counter() - t0) * 1e6,
    )


# ---------------------------------------------------------------------------
# Second-order cone programming: NT-scaled Mehrotra predictor-corrector IPM
# ---------------------------------------------------------------------------

class _Cones:
    """Product cone R+^l x Q^{d_1} x ... x Q^{d_N} with blockwise Jordan algebra."""

    def __init__(self, n_lin: int, soc_dims: list[int]):
        self.n_lin = n_lin
        self.soc_dims = list(soc_dims)
        self.dim = n_lin + sum(soc_dims)
        self.degree = n_lin + len(soc_dims)
        self.slices = []
        off = n_lin
        for d in soc_dims:
            self.slices.append(slice(off, off + d))
            off += d

    def identity(self) -> np.ndarray:
        e = np.zeros(self.dim)
        e[: self.n_lin] = 1.0
        for sl in self.slices:
            e[sl.start] = 1.0
        return e

    def margin(self, v: np.ndarray) -> float:
        """Distance-to-boundary indicator: positive iff v is interior."""
        vals = []
        if self.n_lin:
            vals.append(v[: self.n_lin].min())
        for sl in self.slices:
            vals.append(v[sl.start] - np.linalg.norm(v[sl][1:]))
        return min(vals) if vals else np.inf

    def shift_interior(self, v: np.ndarray) -> np.ndarray:
        a = self.margin(v)
        if a > 0:
            return v
        return v + (1.0 - a) * self.identity()

    def product(self, u: np.ndarray, v: np.ndarray) -> np.ndarray:
        out = np.empty(self.dim)
        nl = self.n_lin
        out[:nl] = u[:nl] * v[:nl]
        for sl in self.slices:
            ub, vb = u[sl], v[sl]
            out[sl.start] = ub @ vb
            out[sl.start + 1:sl.stop] = ub[0] * vb[1:] + vb[0] * ub[1:]
        return out

    def solve_product(self, lam: np.ndarray, d: np.ndarray) -> np.ndarray:
        """Solve lam o x = d blockwise."""
        out = np.empty(self.dim)
        nl = self.n_lin
        out[:nl] = d[:nl] / lam[:nl]
        for sl in self.slices:
            lb, db = lam[sl], d[sl]
            l0 = lb[0]
            rho = 2.0 * l0 * l0 - lb @ lb
            x0 = (l0 * db[0] - lb[1:] @ db[1:]) / rho
            out[sl.start] = x0
            out[sl.start + 1:sl.stop] = (db[1:] - x0 * lb[1:]) / l0
        return out

    def max_step(self, u: np.ndarray, du: np.ndarray) -> float:
        """Largest alpha with u + t du in the cone for all t in [0, alpha)."""
        alpha = np.inf
        nl = self.n_lin
        if nl:
            un, dn = u[:nl], du[:nl]
            neg = dn < 0
            if neg.any():
                alpha = float(np.min(-un[neg] / dn[neg]))
        ul = u.tolist()
        dl = du.tolist()
        for sl in self.slices:
            i0, i1 = sl.start, sl.stop
            u0, d0 = ul[i0], dl[i0]
            a = d0 * d0
            b = u0 * d0
            c = u0 * u0
            for j in range(i0 + 1, i1):
                a -= dl[j] * dl[j]
                b -= ul[j] * dl[j]
                c -= ul[j] * ul[j]
            roots = []
            if abs(a) < _TINY:
                if b < -_TINY:
                    roots.append(-c / (2 * b))
            else:
                disc = b * b - a * c
                if disc >= 0:
                    sq = math.sqrt(disc)
                    r1, r2 = (-b - sq) / a, (-b + sq) / a
                    if r1 > _TINY:
                        roots.append(r1)
                    if r2 > _TINY:
                        roots.append(r2)
            if d0 < -_TINY:
                roots.append(-u0 / d0)
            if roots:
                alpha = min(alpha, min(roots))
        return alpha


class _ScalingBreakdown(ArithmeticError):
    """Iterate hit the cone boundary; NT scaling no longer exists."""


class _Scaling:
    """Nesterov-Todd scaling W with lam = W z = W^-1 s.

    Materialized as dense block-diagonal matrices; the problems served here
    are small enough that assembled matmuls beat per-block dispatch.
    """

    def __init__(self, cones: _Cones, s: np.ndarray, z: np.ndarray):
        self.cones = cones
        W = np.zeros((cones.dim, cones.dim))
        Winv = np.zeros((cones.dim, cones.dim))
        nl = cones.n_lin
        if nl:
            sl_, zl_ = s[:nl], z[:nl]
            if sl_.min() <= 0 or zl_.min() <= 0:
                raise _ScalingBreakdown
            w_lin = np.sqrt(sl_ / zl_)
            idx = np.arange(nl)
            W[idx, idx] = w_lin
            Winv[idx, idx] = 1.0 / w_lin
        for sl in cones.slices:
            sb, zb = s[sl], z[sl]
            rs = sb[0] ** 2 - sb[1:] @ sb[1:]
            rz = zb[0] ** 2 - zb[1:] @ zb[1:]
            if rs <= 0 or rz <= 0:
                raise _ScalingBreakdown
            sbar = sb / np.sqrt(rs)
            zbar = zb / np.sqrt(rz)
            gamma = np.sqrt((1.0 + sbar @ zbar) / 2.0)
            wbar = np.empty_like(sb)
            wbar[0] = (sbar[0] + zbar[0]) / (2 * gamma)
            wbar[1:] = (sbar[1:] - zbar[1:]) / (2 * gamma)
            eta = (rs / rz) ** 0.25
            W[sl, sl] = eta * self._soc_matrix(wbar)
            Winv[sl, sl] = self._soc_matrix(
                np.concatenate([[wbar[0]], -wbar[1:]])) / eta
        self.W = W
        self.Winv = Winv

    @staticmethod
    def _soc_matrix(wbar: np.ndarray) -> np.ndarray:
        d = wbar.shape[0]
        M = np.empty((d, d))
        M[0, 0] = wbar[0]
        M[0, 1:] = wbar[1:]
        M[1:, 0] = wbar[1:]
        M[1:, 1:] = np.eye(d - 1) + np.outer(wbar[1:], wbar[1:]) / (1.0 + wbar[0])
        return M

    def apply(self, v: np.ndarray) -> np.ndarray:
        return self.W @ v

    def apply_inv(self, v: np.ndarray) -> np.ndarray:
        return self.Winv @ v


def _certificates(G, h, c, x, s, z, rtol: float = 1e-7) -> str | None:
    """Detect primal-infeasibility / unboundedness certificates in (z, x, s)."""
    hz = float(h @ z)
    if hz < -1e-12:
        zc = z / (-hz)
        if np.linalg.norm(G.T @ zc) <= rtol * max(1.0, np.linalg.norm(zc)):
            return "infeasible"
    cx = float(c @ x)
    if cx < -1e-12:
        xc, sc = x / (-cx), s / (-cx)
        if np.linalg.norm(G @ xc + sc) <= rtol * max(1.0, np.linalg.norm(xc)):
            return "unbounded"
    return None


def _stack_cone_rows(c_obj, socs, G_lin, h_lin, lb, ub):
    """Convert the user form into  min c'y  s.t.  Gy + s = h, s in K."""
    n = c_obj.shape[0]
    rows, rhs = [], []
    if G_lin is not None and len(G_lin):
        rows.append(np.asarray(G_lin, dtype=float))
        rhs.append(np.asarray(h_lin, dtype=float))
    if lb is not None:
        for j, v in enumerate(np.asarray(lb, dtype=float)):
            if np.isfinite(v):
                r = np.zeros(n)
                r[j] = -1.0
                rows.append(r[None, :])
                rhs.append(np.array([-v]))
    if ub is not None:
        for j, v in enumerate(np.asarray(ub, dtype=float)):
            if np.isfinite(v):
                r = np.zeros(n)
                r[j] = 1.0
                rows.append(r[None, :])
                rhs.append(np.array([v]))

    soc_rows, soc_rhs, soc_dims = [], [], []
    for A, b, ci, di in socs:
        A = np.atleast_2d(np.asarray(A, dtype=float))
        b = np.atleast_1d(np.asarray(b, dtype=float))
        ci = np.asarray(ci, dtype=float)
        lin_scale = max(np.abs(ci).max(initial=0.0), abs(float(di)), 1e-300)
        norm_scale = max(np.abs(A).max(initial=0.0), np.abs(b).max(initial=0.0))
        if norm_scale <= 1e-9 * lin_scale:
            # numerically nil norm part: the cone is the half-space
            # 0 <= c'y + d, and encoding it as a cone wrecks the NT scaling
            rows.append(-ci[None, :] / lin_scale)
            rhs.append(np.array([float(di) / lin_scale]))
            continue
        scale = max(norm_scale, lin_scale)
        block = np.vstack([-ci[None, :] / scale, A / scale])
        soc_rows.append(block)
        soc_rhs.append(np.concatenate([[float(di) / scale], b / scale]))
        soc_dims.append(A.shape[0] + 1)

    n_lin = int(sum(r.shape[0] for r in rows))
    G = np.vstack(rows + soc_rows) if rows + soc_rows else np.zeros((0, n))
    h = np.concatenate(rhs + soc_rhs) if rhs + soc_rhs else np.zeros(0)
    # equilibrate linear rows
    if n_lin:
        sc = np.maximum(np.abs(G[:n_lin]).max(axis=1), np.abs(h[:n_lin]))
        sc = np.where(sc > 1e-12, sc, 1.0)
        G[:n_lin] /= sc[:, None]
        h[:n_lin] /= sc
    return G, h, _Cones(n_lin, soc_dims)


def solve_cone(
    c_obj: np.ndarray,
    socs: list[tuple[np.ndarray, np.ndarray, np.ndarray, float]],
    G_lin: np.ndarray | None = None,
    h_lin: np.ndarray | None = None,
    lb: np.ndarray | None = None,
    ub: np.ndarray | None = None,
    max_iter: int = 50,
    feas_tol: float = 1e-9,
    gap_tol: float = 1e-9,
) -> ConeResult:
    """Solve the standard-form cone program (see module docstring)."""
    t0 = time.perf_counter()
    c = np.asarray(c_obj, dtype=float)
    n = c.shape[0]
    G, h, cones = _stack_cone_rows(c, socs, G_lin, h_lin, lb, ub)
    if cones.dim == 0:
        raise ValueError("cone program without any constraints is unbounded")

    # column equilibration (cone-safe: cones act on the row/slack space) and
    # objective normalization; the minimizer is unscaled on exit
    col = np.sqrt(np.maximum(np.abs(G).max(axis=0), 1e-12))
    col_scale = 1.0 / np.clip(col, 1e-6, 1e6)
    G = G * col_scale[None, :]
    c = c * col_scale
    obj_scale = max(1.0, np.abs(c).max())
    c = c / obj_scale

    # interior starting point from least-squares projections
    x = np.linalg.lstsq(G, h, rcond=None)[0]
    s = cones.shift_interior(h - G @ x)
    z = cones.shift_interior(np.linalg.lstsq(G.T, -c, rcond=None)[0])

    # acceptance thresholds of the solver contract (looser than the targets
    # the iteration aims for, so near-boundary breakdown still certifies)
    accept_feas, accept_gap = 1e-8, 1e-7

    status = "numerical_failure"
    it = 0
    pres = dres = gap = np.inf
    best_score = np.inf
    best = None
    stall = 0
    hn, cn = 1.0 + np.linalg.norm(h), 1.0 + np.linalg.norm(c)
    for it in range(1, max_iter + 1):
        rx = G.T @ z + c
        rz = G @ x + s - h
        gap = float(s @ z)
        mu = gap / cones.degree
        pres = float(np.linalg.norm(rz)) / hn
        dres = float(np.linalg.norm(rx)) / cn
        obj = float(c @ x)
        relgap = gap / max(1.0, abs(obj))
        score = max(pres, dres, min(abs(gap), abs(relgap)))
        if score < best_score:
            best_score = score
            best = (x.copy(), pres, dres, gap)
            stall = 0
        else:
            stall += 1
        if pres <= feas_tol and dres <= feas_tol and (gap <= gap_tol or relgap <= gap_tol):
            status = "optimal"
            break
        # centrality blow-up after boundary degradation: keep the best iterate
        if best_score < 1e-6 and score > 1e3 * best_score:
            break
        cert = _certificates(G, h, c, x, s, z)
        if cert is not None:
            status = cert
            break
        # while the iterates diverge along a candidate certificate ray, keep
        # iterating so the certificate can sharpen instead of stalling out
        diverging = (float(h @ z) < -10.0 * hn) or (float(c @ x) < -10.0 * cn)
        if (stall >= 4 and not diverging) or mu <= 0:
            break

        try:
            W = _Scaling(cones, s, z)
        except _ScalingBreakdown:
            break
        lam = W.apply(z)

        Gs = W.Winv @ G
        M = Gs.T @ Gs
        try:
            Lc = np.linalg.cholesky(M + 1e-14 * np.eye(n))
        except np.linalg.LinAlgError:
            break

        def m_solve(rhs):
            dx = np.linalg.solve(Lc.T, np.linalg.solve(Lc, rhs))
            # one step of iterative refinement keeps the KKT solve accurate
            # when the scaling becomes ill-conditioned near the boundary
            return dx + np.linalg.solve(Lc.T, np.linalg.solve(Lc, rhs - M @ dx))

        def kkt_pass(d_c, rx_, rz_):
            dtil = cones.solve_product(lam, d_c)
            rhs_z = rz_ + W.apply(dtil)
            dx = m_solve(-rx_ - Gs.T @ (W.Winv @ rhs_z))
            dz = W.Winv @ (W.Winv @ (G @ dx + rhs_z))
            # recover ds from the primal Newton equation exactly
            ds = -rz_ - G @ dx
            return dx, ds, dz

        def kkt_refined(d_c, rx_, rz_):
            dx, ds, dz = kkt_pass(d_c, rx_, rz_)
            # full-system refinement passes for the dual/complementarity rows;
            # repeated while they keep paying off, which matters close to the
            # boundary where the scaled system loses digits
            prev = np.inf
            for _ in range(3):
                r2 = -rx_ - G.T @ dz
                r3 = d_c - cones.product(lam, W.apply(dz) + W.Winv @ ds)
                res_norm = np.linalg.norm(r2) + np.linalg.norm(r3)
                if not np.isfinite(res_norm) or res_norm >= 0.25 * prev:
                    break
                prev = res_norm
                ex, es, ez = kkt_pass(r3, -r2, np.zeros_like(rz_))
                dx, ds, dz = dx + ex, ds + es, dz + ez
            return dx, ds, dz

        # predictor
        d_aff = -cones.product(lam, lam)
        dxa, dsa, dza = kkt_refined(d_aff, rx, rz)
        alpha_aff = min(1.0, cones.max_step(s, dsa), cones.max_step(z, dza))
        mu_aff = float((s + alpha_aff * dsa) @ (z + alpha_aff * dza)) / cones.degree
        sigma = max(0.0, min(1.0, (mu_aff / mu))) ** 3

        # corrector
        corr = cones.product(W.Winv @ dsa, W.apply(dza))
        d_comb = d_aff + sigma * mu * cones.identity() - corr
        dx, ds, dz = kkt_refined(d_comb, rx, rz)
        alpha = min(1.0, 0.99 * cones.max_step(s, ds), 0.99 * cones.max_step(z, dz))
        if alpha <= 1e-13:
            break
        x = x + alpha * dx
        s = s + alpha * ds
        z = z + alpha * dz
    else:
        status = "max_iterations"

    if status not in ("infeasible", "unbounded") and best is not None:
        xb, presb, dresb, gapb = best
        if status != "optimal":
            relgap = abs(gapb) / max(1.0, abs(float(c @ xb)))
            if presb <= accept_feas and dresb <= accept_feas and min(abs(gapb), relgap) <= accept_gap:
                status = "optimal"
            else:
                # the iterates may hold a clear divergence ray even though
                # the in-loop certificate tolerance was never met
                cert = _certificates(G, h, c, x, s, z, rtol=1e-5)
                if cert is not None:
                    status = cert
        x, pres, dres, gap = xb, presb, dresb, gapb

    report = SolverReport(
        status=status,
        iterations=it,
        primal_residual=pres,
        dual_residual=dres,
        duality_gap=gap,
        wall_time_us=(time.perf_counter() - t0) * 1e6,
    )
    return ConeResult(x=x * col_scale, report=report)


# ---------------------------------------------------------------------------
# Problem dump / load (shared schema with the safety filter's dump flag)
# ---------------------------------------------------------------------------

def cone_problem_to_json(c_obj, socs, G_lin, h_lin, lb, ub) -> str:
    def arr(a):
        return np.asarray(a, dtype=float).tolist() if a is not None else None

    payload = {
        "version": 1,
        "objective": arr(c_obj),
        "socs": [
            {"A": arr(A), "b": arr(b), "c": arr(ci), "d": float(di)}
            for A, b, ci, di in socs
        ],
        "lin_G": arr(G_lin),
        "lin_h": arr(h_lin),
        "lb": arr(lb),
        "ub": arr(ub),
    }
    return json.dumps(payload, sort_keys=True)


def cone_problem_from_json(text: str):
    payload = json.loads(text)
    if payload.get("version") != 1:
        raise ValueError(f"unsupported cone problem version {payload.get('version')}")

    def arr(key):
        v = payload.get(key)
        return np.asarray(v, dtype=float) if v is not None else None

    socs = [
        (np.asarray(s["A"], dtype=float), np.asarray(s["b"], dtype=float),
         np.asarray(s["c"], dtype=float), float(s["d"]))
        for s in payload["socs"]
    ]
    return arr("objective"), socs, arr("lin_G"), arr("lin_h"), arr("lb"), arr("ub")
