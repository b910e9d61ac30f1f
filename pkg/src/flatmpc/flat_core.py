"""Chained-integrator flat systems.

Exact zero-order-hold discretization of multi-chain integrator dynamics,
the discrete dynamic extension that maps extended inputs to system inputs,
and finite-horizon Riccati synthesis of the nominal gain and Lyapunov
matrix.  All types are immutable after construction and all operations are
pure functions.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from math import factorial

import numpy as np

__all__ = [
    "FlatSpec",
    "DiscreteFlatLTI",
    "ExtensionSpec",
    "RiccatiResult",
    "discretize_chain",
    "assemble_flat_lti",
    "build_extension",
    "extension_step",
    "riccati_synthesis",
    "lyapunov_value",
]


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class FlatSpec:
    """Chain orders and sampling time of a multi-output flat system.

    Attributes:
        m: number of flat-output components.
        rho: chain order per output component (length m, each >= 1).
        dt: sampling time in seconds.
    """

    m: int
    rho: tuple[int, ...]
    dt: float

    def __post_init__(self):
        object.__setattr__(self, "rho", tuple(int(r) for r in self.rho))
        if self.m < 1:
            raise ValueError(f"m must be >= 1, got {self.m}")
        if len(self.rho) != self.m:
            raise ValueError(f"rho must have {self.m} entries, got {len(self.rho)}")
        if any(r < 1 for r in self.rho):
            raise ValueError(f"every chain order must be >= 1, got {self.rho}")
        if not self.dt > 0:
            raise ValueError(f"dt must be positive, got {self.dt}")

    @property
    def n_z(self) -> int:
        """Total flat-state dimension (sum of chain orders)."""
        return int(sum(self.rho))

    def chain_slices(self) -> list[slice]:
        """Index slice of each chain inside the stacked flat state."""
        out, off = [], 0
        for r in self.rho:
            out.append(slice(off, off + r))
            off += r
        return out


@dataclass(frozen=True)
class DiscreteFlatLTI:
    """Exactly discretized flat system z[k+1] = A_d z[k] + B_d v[k]."""

    spec: FlatSpec
    A_d: np.ndarray
    B_d: np.ndarray

    def __post_init__(self):
        n, m = self.spec.n_z, self.spec.m
        object.__setattr__(self, "A_d", _frozen(self.A_d))
        object.__setattr__(self, "B_d", _frozen(self.B_d))
        if self.A_d.shape != (n, n):
            raise ValueError(f"A_d must be {(n, n)}, got {self.A_d.shape}")
        if self.B_d.shape != (n, m):
            raise ValueError(f"B_d must be {(n, m)}, got {self.B_d.shape}")

    def b_columns(self) -> list[np.ndarray]:
        """Per-chain column segment of B_d (the only nonzero block per chain)."""
        return [self.B_d[sl, i] for i, sl in enumerate(self.spec.chain_slices())]


@dataclass(frozen=True)
class ExtensionSpec:
    """Discrete dynamic extension eta[k] = A eta[k-1] + B nu[k], u[k] = C eta[k].

    Each input with extension order d > 0 owns an exactly discretized
    d-chain driven by its nu component (the d-th derivative of that input);
    inputs with order 0 pass their nu component through a one-step slot so
    that u = C eta holds uniformly.
    """

    orders: tuple[int, ...]
    dt: float
    A_d_ext: np.ndarray
    B_d_ext: np.ndarray
    C_ext: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "orders", tuple(int(d) for d in self.orders))
        object.__setattr__(self, "A_d_ext", _frozen(self.A_d_ext))
        object.__setattr__(self, "B_d_ext", _frozen(self.B_d_ext))
        object.__setattr__(self, "C_ext", _frozen(self.C_ext))

    @property
    def m(self) -> int:
        return len(self.orders)

    @property
    def eta_dim(self) -> int:
        return int(sum(max(d, 1) for d in self.orders))

    def block_slices(self) -> list[slice]:
        out, off = [], 0
        for d in self.orders:
            w = max(d, 1)
            out.append(slice(off, off + w))
            off += w
        return out


@dataclass(frozen=True)
class RiccatiResult:
    """First-step gain K and cost-to-go P of the finite-horizon recursion."""

    K: np.ndarray
    P: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "K", _frozen(self.K))
        object.__setattr__(self, "P", _frozen(self.P))


def discretize_chain(rho: int, dt: float) -> tuple[np.ndarray, np.ndarray]:
    """Exact ZOH discretization of a single integrator chain of order rho.

    Returns the rho x rho upper-triangular Toeplitz transition block with
    entries dt^j / j! on the j-th superdiagonal, and the input column with
    entry dt^(rho-r) / (rho-r)! in row r.
    """
    if rho < 1:
        raise ValueError(f"chain order must be >= 1, got {rho}")
    if not dt > 0:
        raise ValueError(f"dt must be positive, got {dt}")
    A = np.zeros((rho, rho))
    B = np.zeros(rho)
    for i in range(rho):
        for j in range(i, rho):
            A[i, j] = dt ** (j - i) / factorial(j - i)
        B[i] = dt ** (rho - i) / factorial(rho - i)
    return A, B


def assemble_flat_lti(spec: FlatSpec) -> DiscreteFlatLTI:
    """Block-diagonal composition of discretize_chain over all chains."""
    n, m = spec.n_z, spec.m
    A = np.zeros((n, n))
    B = np.zeros((n, m))
    for i, sl in enumerate(spec.chain_slices()):
        Ai, Bi = discretize_chain(spec.rho[i], spec.dt)
        A[sl, sl] = Ai
        B[sl, i] = Bi
    return DiscreteFlatLTI(spec=spec, A_d=A, B_d=B)


def build_extension(orders: list[int] | tuple[int, ...], dt: float) -> ExtensionSpec:
    """Assemble the discrete dynamic extension for the given per-input orders.

    orders[i] is the number of derivatives appended to input i (0 keeps the
    input direct).
    """
    orders = tuple(int(d) for d in orders)
    if any(d < 0 for d in orders):
        raise ValueError(f"extension orders must be >= 0, got {orders}")
    if not dt > 0:
        raise ValueError(f"dt must be positive, got {dt}")
    m = len(orders)
    dim = sum(max(d, 1) for d in orders)
    A = np.zeros((dim, dim))
    B = np.zeros((dim, m))
    C = np.zeros((m, dim))
    off = 0
    for i, d in enumerate(orders):
        if d == 0:
            # pass-through slot: eta_i[k] = nu_i[k]
            B[off, i] = 1.0
            C[i, off] = 1.0
            off += 1
        else:
            Ai, Bi = discretize_chain(d, dt)
            A[off:off + d, off:off + d] = Ai
            B[off:off + d, i] = Bi
            C[i, off] = 1.0
            off += d
    return ExtensionSpec(orders=orders, dt=dt, A_d_ext=A, B_d_ext=B, C_ext=C)


def extension_step(
    ext: ExtensionSpec, eta_prev: np.ndarray, nu: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Advance the extension one step and emit the system input.

    Returns (eta, u) with eta = A_d_ext eta_prev + B_d_ext nu and
    u = C_ext eta.
    """
    eta_prev = np.asarray(eta_prev, dtype=float)
    nu = np.asarray(nu, dtype=float)
    if eta_prev.shape != (ext.eta_dim,):
        raise ValueError(f"eta_prev must have shape {(ext.eta_dim,)}, got {eta_prev.shape}")
    if nu.shape != (ext.m,):
        raise ValueError(f"nu must have shape {(ext.m,)}, got {nu.shape}")
    eta = ext.A_d_ext @ eta_prev + ext.B_d_ext @ nu
    u = ext.C_ext @ eta
    return eta, u


def _check_block_diag_pd(Q: np.ndarray, spec: FlatSpec, name: str) -> None:
    n = spec.n_z
    if Q.shape != (n, n):
        raise ValueError(f"{name} must be {(n, n)}, got {Q.shape}")
    mask = np.ones((n, n), dtype=bool)
    for sl in spec.chain_slices():
        mask[sl, sl] = False
    scale = max(np.abs(Q).max(), 1.0)
    if np.abs(Q[mask]).max(initial=0.0) > 1e-12 * scale:
        raise ValueError(f"{name} must be block diagonal matching the chains")
    if np.linalg.eigvalsh(Q).min() <= 0:
        raise ValueError(f"{name} must be positive definite")


def riccati_synthesis(
    lti: DiscreteFlatLTI, Q: np.ndarray, R: np.ndarray, T: int
) -> RiccatiResult:
    """Backward finite-horizon Riccati recursion with terminal weight Q.

    Runs T backward steps from P_T = Q and returns the step-0 gain
    K = (R + B' P_1 B)^-1 B' P_1 A together with the step-0 cost-to-go P_0.
    With block-diagonal Q and diagonal R every iterate stays block diagonal,
    so P inherits the chain block structure exactly.

    Raises:
        ValueError: on invalid weights or horizon.
        RuntimeError: if the resulting gain fails to stabilize the chain.
    """
    Q = np.asarray(Q, dtype=float)
    R = np.asarray(R, dtype=float)
    spec = lti.spec
    m = spec.m
    _check_block_diag_pd(Q, spec, "Q")
    if R.shape != (m, m):
        raise ValueError(f"R must be {(m, m)}, got {R.shape}")
    if np.abs(R - np.diag(np.diag(R))).max() > 1e-12 * max(np.abs(R).max(), 1.0):
        raise ValueError("R must be diagonal")
    if np.diag(R).min() <= 0:
        raise ValueError("R must be positive definite")
    if T < 1:
        raise ValueError(f"horizon must be >= 1, got {T}")

    A, B = lti.A_d, lti.B_d
    P = Q.copy()
    K = np.zeros((m, spec.n_z))
    for _ in range(T):
        S = R + B.T @ P @ B
        K = np.linalg.solve(S, B.T @ P @ A)
        P = Q + A.T @ P @ A - A.T @ P @ B @ K
    P = 0.5 * (P + P.T)

    radius = np.abs(np.linalg.eigvals(A - B @ K)).max()
    if radius >= 1.0:
        raise RuntimeError(
            f"Riccati gain does not stabilize the chain (spectral radius {radius:.6f})"
        )
    return RiccatiResult(K=K, P=P)


def lyapunov_value(P: np.ndarray, e: np.ndarray) -> float:
    """Quadratic Lyapunov value e' P e of a tracking error."""
    e = np.asarray(e, dtype=float)
    return float(e @ P @ e)
