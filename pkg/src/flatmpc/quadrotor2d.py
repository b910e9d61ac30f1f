"""Planar quadrotor ground truth.

Continuous nonlinear dynamics of the 2D attitude-loop quadrotor, fixed-step
RK4 simulation of the plant coupled with the continuous thrust extension,
the algebraic maps between physical and flat coordinates, the true affine
flat-input transformation, and analytic figure-eight reference generation.

State layouts (plain arrays, SI units):
    physical state  s  = [x, x_dot, z, z_dot, theta, theta_dot]
    flat state      zf = [x, x_dot, x_ddot, x_dddot, z, z_dot, z_ddot, z_dddot]
    system input    u  = [T_c, theta_c]
    extended input  nu = [T_c_ddot, theta_c]
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

__all__ = [
    "QuadParams",
    "ReferenceTrajectory",
    "FlatnessSingularityError",
    "dynamics_rhs",
    "integrate",
    "flat_to_physical",
    "physical_to_flat",
    "psi_true",
    "psi_inverse",
    "lemniscate_reference",
]


class FlatnessSingularityError(ValueError):
    """Raised when the specific force drops below the admissible minimum."""


@dataclass(frozen=True)
class QuadParams:
    """Identified 2D quadrotor model parameters.

    The thrust map produces specific force beta2 + beta1 * T_c; the attitude
    loop follows theta_ddot = alpha1 theta + alpha2 theta_dot + alpha3 theta_c.
    f_min guards the flat-map singularity at free fall.
    """

    beta1: float = 1.0
    beta2: float = 0.0
    alpha1: float = -140.0
    alpha2: float = -17.0
    alpha3: float = 140.0
    g: float = 9.81
    f_min: float = 1.0

    def __post_init__(self):
        if not self.beta1 > 0:
            raise ValueError(f"beta1 must be positive, got {self.beta1}")
        if self.alpha3 == 0:
            raise ValueError("alpha3 must be nonzero")
        if not self.g > 0:
            raise ValueError(f"g must be positive, got {self.g}")
        if not self.f_min > 0:
            raise ValueError(f"f_min must be positive, got {self.f_min}")


@dataclass(frozen=True)
class ReferenceTrajectory:
    """Sampled flat reference: z_ref[k] in R^8 and flat input v_ref[k] in R^2."""

    z_ref: np.ndarray
    v_ref: np.ndarray
    dt: float

    def __post_init__(self):
        z = np.asarray(self.z_ref, dtype=float)
        v = np.asarray(self.v_ref, dtype=float)
        if z.ndim != 2 or z.shape[1] != 8:
            raise ValueError(f"z_ref must be (N, 8), got {z.shape}")
        if v.shape != (z.shape[0], 2):
            raise ValueError(f"v_ref must be ({z.shape[0]}, 2), got {v.shape}")
        z.setflags(write=False)
        v.setflags(write=False)
        object.__setattr__(self, "z_ref", z)
        object.__setattr__(self, "v_ref", v)

    def __len__(self) -> int:
        return self.z_ref.shape[0]

    def to_csv(self, path) -> None:
        header = ["t"] + [f"z{i}" for i in range(8)] + ["v0", "v1"]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            for k in range(len(self)):
                row = [repr(k * self.dt)]
                row += [repr(float(x)) for x in self.z_ref[k]]
                row += [repr(float(x)) for x in self.v_ref[k]]
                w.writerow(row)


def dynamics_rhs(state: np.ndarray, u: np.ndarray, p: QuadParams) -> np.ndarray:
    """Time derivative of the physical state under input u = [T_c, theta_c]."""
    x, x_dot, z, z_dot, theta, theta_dot = state
    force = p.beta2 + p.beta1 * u[0]
    return np.array([
        x_dot,
        np.sin(theta) * force,
        z_dot,
        np.cos(theta) * force - p.g,
        theta_dot,
        p.alpha1 * theta + p.alpha2 * theta_dot + p.alpha3 * u[1],
    ])


def _augmented_rhs(y: np.ndarray, nu: np.ndarray, p: QuadParams) -> np.ndarray:
    # y = [physical state (6); T_c; T_c_dot], nu = [T_c_ddot, theta_c] held constant
    ds = dynamics_rhs(y[:6], np.array([y[6], nu[1]]), p)
    return np.concatenate([ds, [y[7], nu[0]]])


def integrate(
    state: np.ndarray,
    eta: np.ndarray,
    nu: np.ndarray,
    dt: float,
    p: QuadParams,
    substeps: int = 10,
) -> tuple[np.ndarray, np.ndarray]:
    """Advance plant and continuous thrust extension one control period.

    The thrust chain is integrated inside the plant with T_c_ddot = nu[0]
    held constant over the step (so it matches the discrete extension
    exactly at sample instants) and theta_c = nu[1] applied zero-order-hold.
    Fixed-step RK4 with the given number of substeps.

    Args:
        state: physical state (6,).
        eta: thrust chain state [T_c, T_c_dot].
        nu: extended input held over the step.
        dt: control period in seconds.
        p: plant parameters.
        substeps: RK4 substeps per control period.

    Returns:
        (state, eta) at the end of the step.
    """
    if not dt > 0:
        raise ValueError(f"dt must be positive, got {dt}")
    y = np.concatenate([np.asarray(state, dtype=float), np.asarray(eta, dtype=float)])
    nu = np.asarray(nu, dtype=float)
    h = dt / substeps
    for _ in range(substeps):
        k1 = _augmented_rhs(y, nu, p)
        k2 = _augmented_rhs(y + 0.5 * h * k1, nu, p)
        k3 = _augmented_rhs(y + 0.5 * h * k2, nu, p)
        k4 = _augmented_rhs(y + h * k3, nu, p)
        y = y + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
    return y[:6], y[6:]


def _force_and_angle(zf: np.ndarray, p: QuadParams) -> tuple[float, float]:
    ax = zf[2]
    az = zf[6] + p.g
    force = float(np.hypot(ax, az))
    if force < p.f_min:
        raise FlatnessSingularityError(
            f"specific force {force:.4f} below f_min={p.f_min} (flat map singular)"
        )
    return force, float(np.arctan2(ax, az))


def flat_to_physical(zf: np.ndarray, p: QuadParams) -> tuple[np.ndarray, float, float]:
    """Recover the physical state and thrust chain from a flat state.

    Returns (state, T_c, T_c_dot).  Raises FlatnessSingularityError when the
    specific force falls below f_min.
    """
    zf = np.asarray(zf, dtype=float)
    force, theta = _force_and_angle(zf, p)
    s, c = np.sin(theta), np.cos(theta)
    theta_dot = (c * zf[3] - s * zf[7]) / force
    t_c = (force - p.beta2) / p.beta1
    t_c_dot = (s * zf[3] + c * zf[7]) / p.beta1
    state = np.array([zf[0], zf[1], zf[4], zf[5], theta, theta_dot])
    return state, float(t_c), float(t_c_dot)


def physical_to_flat(
    state: np.ndarray, t_c: float, t_c_dot: float, p: QuadParams
) -> np.ndarray:
    """Flat state from the physical state and the current thrust chain."""
    x, x_dot, z, z_dot, theta, theta_dot = state
    s, c = np.sin(theta), np.cos(theta)
    force = p.beta2 + p.beta1 * t_c
    force_dot = p.beta1 * t_c_dot
    return np.array([
        x, x_dot, s * force, c * force * theta_dot + s * force_dot,
        z, z_dot, c * force - p.g, -s * force * theta_dot + c * force_dot,
    ])


def psi_true(
    zf: np.ndarray, nu: np.ndarray, p: QuadParams
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """True flat-input transformation v = alpha(z) + beta(z) nu.

    Computes the fourth output derivatives [x''''; z''''] produced by the
    extended input nu = [T_c_ddot, theta_c] at the flat state zf, returning
    (v, alpha, beta) with v = alpha + beta @ nu.
    """
    zf = np.asarray(zf, dtype=float)
    nu = np.asarray(nu, dtype=float)
    force, theta = _force_and_angle(zf, p)
    s, c = np.sin(theta), np.cos(theta)
    theta_dot = (c * zf[3] - s * zf[7]) / force
    force_dot = s * zf[3] + c * zf[7]
    theta_ddot_free = p.alpha1 * theta + p.alpha2 * theta_dot
    alpha = np.array([
        -s * theta_dot**2 * force + c * theta_ddot_free * force + 2 * c * theta_dot * force_dot,
        -c * theta_dot**2 * force - s * theta_ddot_free * force - 2 * s * theta_dot * force_dot,
    ])
    beta = np.array([
        [s * p.beta1, c * p.alpha3 * force],
        [c * p.beta1, -s * p.alpha3 * force],
    ])
    return alpha + beta @ nu, alpha, beta


def psi_inverse(zf: np.ndarray, v: np.ndarray, p: QuadParams) -> np.ndarray:
    """Extended input reproducing the flat input v exactly: nu = beta^-1 (v - alpha)."""
    _, alpha, beta = psi_true(zf, np.zeros(2), p)
    return np.linalg.solve(beta, np.asarray(v, dtype=float) - alpha)


def lemniscate_reference(
    amplitude_x: float,
    amplitude_z: float,
    period: float,
    dt: float,
    n_steps: int,
    center: tuple[float, float] = (0.0, 0.0),
) -> ReferenceTrajectory:
    """Figure-eight flat reference with analytic derivatives up to order 4.

    Output y(t) = center + (A_x sin(w t), A_z sin(2 w t)) with w = 2 pi / period.
    """
    if not period > 0:
        raise ValueError(f"period must be positive, got {period}")
    w = 2.0 * np.pi / period
    t = np.arange(n_steps) * dt
    sx, cx = np.sin(w * t), np.cos(w * t)
    sz, cz = np.sin(2 * w * t), np.cos(2 * w * t)
    ax, az = amplitude_x, amplitude_z
    z_ref = np.column_stack([
        center[0] + ax * sx,
        ax * w * cx,
        -ax * w**2 * sx,
        -ax * w**3 * cx,
        center[1] + az * sz,
        az * 2 * w * cz,
        -az * (2 * w) ** 2 * sz,
        -az * (2 * w) ** 3 * cz,
    ])
    v_ref = np.column_stack([
        ax * w**4 * sx,
        az * (2 * w) ** 4 * sz,
    ])
    return ReferenceTrajectory(z_ref=z_ref, v_ref=v_ref, dt=dt)
