"""Finite-horizon convex flat MPC.

Condensed (state-eliminated) quadratic program over the discretized flat
system, tracking a flat state/input reference under half-space flat-state
constraints.  Input constraints are deliberately absent here; they are the
safety filter's responsibility.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .conic_backend import SolverReport, solve_qp
from .flat_core import DiscreteFlatLTI

__all__ = ["MPCSetup", "MPCSolution", "FlatMPC", "build_qp"]


@dataclass(frozen=True)
class MPCSetup:
    """Weights, horizon, and half-space rows (h_j, b_j) of the tracking OCP."""

    lti: DiscreteFlatLTI
    Q: np.ndarray
    R: np.ndarray
    T: int
    halfspaces: tuple[tuple[np.ndarray, float], ...] = ()

    def __post_init__(self):
        n, m = self.lti.spec.n_z, self.lti.spec.m
        Q = np.asarray(self.Q, dtype=float)
        R = np.asarray(self.R, dtype=float)
        if Q.shape != (n, n) or R.shape != (m, m):
            raise ValueError("weight dimensions do not match the flat system")
        if self.T < 1:
            raise ValueError(f"horizon must be >= 1, got {self.T}")
        hs = tuple((np.asarray(h, dtype=float), float(b)) for h, b in self.halfspaces)
        for h, _ in hs:
            if h.shape != (n,):
                raise ValueError(f"half-space normal must have shape {(n,)}")
        object.__setattr__(self, "Q", Q)
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "halfspaces", hs)


@dataclass(frozen=True)
class MPCSolution:
    """First-step pair (z_star, v_star) plus the full horizon trajectories.

    z_star is the stage-k flat state of the optimal trajectory (the current
    estimate), the linearization point for the downstream GP query; v_star
    is the first optimal flat input.
    """

    z_star: np.ndarray
    v_star: np.ndarray
    z_traj: np.ndarray          # (T+1, n_z) including the initial state
    v_traj: np.ndarray          # (T, m)
    status: str
    objective: float
    multipliers: np.ndarray
    report: SolverReport


def build_qp(
    setup: MPCSetup,
    z_hat: np.ndarray,
    z_ref_window: np.ndarray,
    v_ref_window: np.ndarray,
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Condense the tracking OCP into (H, g, G, h) over the input sequence.

    Minimizes V'HV + 2 g'V (plus a constant) subject to G V <= h, where V
    stacks the T flat inputs, states are eliminated through the dynamics,
    and each half-space is imposed at every step of the horizon.
    """
    ctl = FlatMPC(setup)
    H = ctl._H
    g, offsets = ctl._gradient_and_offsets(z_hat, z_ref_window, v_ref_window)
    if setup.halfspaces:
        G, h = ctl._constraint_rows(offsets)
    else:
        G, h = np.zeros((0, H.shape[0])), np.zeros(0)
    return H, g, G, h


class FlatMPC:
    """Condensed-QP flat MPC with precomputed prediction matrices.

    One instance per control loop; the constant Hessian factorization and
    constraint geometry are built once, the per-step work is a gradient
    assembly and a QP backend call (warm-started with the previous active
    set).
    """

    def __init__(self, setup: MPCSetup):
        self.setup = setup
        lti, T = setup.lti, setup.T
        n, m = lti.spec.n_z, lti.spec.m
        A, B = lti.A_d, lti.B_d

        # powers A^1..A^T and the block-Toeplitz input-to-state map
        self._A_pow = np.empty((T + 1, n, n))
        self._A_pow[0] = np.eye(n)
        for k in range(1, T + 1):
            self._A_pow[k] = A @ self._A_pow[k - 1]
        # B_bar[(k-1)*n:k*n, j*m:(j+1)*m] = A^(k-1-j) B for j < k
        self._B_bar = np.zeros((T * n, T * m))
        for k in range(1, T + 1):
            for j in range(k):
                self._B_bar[(k - 1) * n:k * n, j * m:(j + 1) * m] = \
                    self._A_pow[k - 1 - j] @ B
        Q_bar = np.kron(np.eye(T), setup.Q)
        self._R_big = np.kron(np.eye(T), setup.R)
        self._QB = Q_bar @ self._B_bar
        self._H = self._B_bar.T @ self._QB + self._R_big
        self._H = 0.5 * (self._H + self._H.T)

        # constant constraint geometry: rows h_j' z_k <= b_j for k = 1..T
        if setup.halfspaces:
            rows = []
            for h_vec, _ in setup.halfspaces:
                hB = np.kron(np.eye(T), h_vec[None, :]) @ self._B_bar
                rows.append(hB)
            self._G = np.vstack(rows)
        else:
            self._G = np.zeros((0, T * m))
        self._warm_set: list[int] | None = None

    @property
    def n_z(self) -> int:
        return self.setup.lti.spec.n_z

    @property
    def m(self) -> int:
        return self.setup.lti.spec.m

    def _free_response(self, z_hat: np.ndarray) -> np.ndarray:
        """Stacked A^k z_hat for k = 1..T."""
        T, n = self.setup.T, self.n_z
        out = np.empty(T * n)
        for k in range(1, T + 1):
            out[(k - 1) * n:k * n] = self._A_pow[k] @ z_hat
        return out

    def _gradient_and_offsets(self, z_hat, z_ref_window, v_ref_window):
        T, n, m = self.setup.T, self.n_z, self.m
        z_hat = np.asarray(z_hat, dtype=float)
        z_ref_window = np.asarray(z_ref_window, dtype=float)
        v_ref_window = np.asarray(v_ref_window, dtype=float)
        if z_ref_window.shape != (T + 1, n):
            raise ValueError(f"z_ref_window must be {(T + 1, n)}, got {z_ref_window.shape}")
        if v_ref_window.shape != (T, m):
            raise ValueError(f"v_ref_window must be {(T, m)}, got {v_ref_window.shape}")
        free = self._free_response(z_hat)
        dev = free - z_ref_window[1:].ravel()
        g = self._QB.T @ dev - self._R_big @ v_ref_window.ravel()
        return g, free

    def _constraint_rows(self, free: np.ndarray):
        T, n = self.setup.T, self.n_z
        rhs = []
        for h_vec, b in self.setup.halfspaces:
            hz_free = (np.kron(np.eye(T), h_vec[None, :]) @ free)
            rhs.append(b - hz_free)
        return self._G, np.concatenate(rhs)

    def solve(
        self,
        z_hat: np.ndarray,
        z_ref_window: np.ndarray,
        v_ref_window: np.ndarray,
        warm_start: bool = True,
    ) -> MPCSolution:
        """Solve the tracking QP from the current flat state estimate.

        The reference window carries the current-step reference in row 0
        and the T lookahead rows after it.  Without active half-spaces the
        first input reproduces the finite-horizon LQR feedback law.
        """
        setup = self.setup
        T, n, m = setup.T, self.n_z, self.m
        g, free = self._gradient_and_offsets(z_hat, z_ref_window, v_ref_window)
        if setup.halfspaces:
            G, h = self._constraint_rows(free)
        else:
            G, h = None, None
        res = solve_qp(2.0 * self._H, 2.0 * g, G, h,
                       warm_set=self._warm_set if warm_start else None)
        V = res.x
        if warm_start and res.report.status == "optimal":
            self._warm_set = [int(i) for i in np.nonzero(res.multipliers > 0)[0]]

        states = np.empty((T + 1, n))
        states[0] = np.asarray(z_hat, dtype=float)
        states[1:] = (free + self._B_bar @ V).reshape(T, n)
        v_traj = V.reshape(T, m)
        dev = states[1:] - z_ref_window[1:]
        dv = v_traj - v_ref_window
        objective = float(
            np.einsum("ki,ij,kj->", dev, setup.Q, dev)
            + np.einsum("ki,ij,kj->", dv, setup.R, dv)
        )
        return MPCSolution(
            z_star=states[0],
            v_star=v_traj[0],
            z_traj=states,
            v_traj=v_traj,
            status=res.report.status,
            objective=objective,
            multipliers=res.multipliers,
            report=res.report,
        )
