"""Closed-loop simulation orchestration.

Wires the flat MPC, the GP-based safety filter, the dynamic extension, and
the quadrotor plant into the per-step loop, runs seeded episodes, trains
the GP artifact, and aggregates metrics.  Everything is driven by a JSON
run configuration and is deterministic under (config, seed).
"""

from __future__ import annotations

import csv
import dataclasses
import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import gp_affine, quadrotor2d as q2d
from .flat_core import (FlatSpec, assemble_flat_lti, build_extension,
                        extension_step, lyapunov_value, riccati_synthesis)
from .fmpc import FlatMPC, MPCSetup
from .gp_affine import AffineGP, fit as gp_fit, sample_training_data
from .socp_filter import FilterConfig, filter_step

__all__ = ["RunConfig", "StepLog", "RunMetrics", "ControlStack",
           "run_episode", "train_pipeline", "compare", "default_config"]


@dataclass
class RunConfig:
    """Full configuration of an experiment; round-trips through JSON."""

    # plant
    beta1: float = 1.0
    beta2: float = 0.0
    alpha1: float = -140.0
    alpha2: float = -17.0
    alpha3: float = 140.0
    gravity: float = 9.81
    f_min: float = 1.0
    rk4_substeps: int = 10
    # flat system / MPC
    dt: float = 0.01
    horizon: int = 50
    q_chain: tuple[float, ...] = (100.0, 0.4444444444444444, 0.0019753086419753086, 1e-4)
    r_input: float = 3.9018442310656e-08
    # reference
    amplitude_x: float = 1.0
    amplitude_z: float = 0.5
    period: float = 6.0
    center: tuple[float, float] = (0.0, 1.0)
    # GP training
    gp_n_train: int = 600
    gp_seed: int = 1234
    gp_noise_std: float = 0.05
    gp_z_jitter: tuple[float, ...] = (0.04, 0.1, 0.5, 8.0, 0.04, 0.1, 0.5, 8.0)
    gp_restarts: int = 5
    gp_max_iter: int = 200
    gp_holdout_fraction: float = 0.2
    gp_rmse_gate: float = 0.05
    gp_init_lengthscale: float = 2.0
    beta_mode: str = "fixed"
    beta_value: float = 2.0
    rkhs_bound: float = 10.0
    # risk levels
    delta_gp: tuple[float, ...] = (0.01, 0.01)
    delta_bar: float = 0.99
    epsilon: float = 1e-6
    # constraints
    halfspaces: tuple[tuple[tuple[float, ...], float], ...] = ()
    delta_state: tuple[float, ...] = ()
    u_min: tuple[float, ...] = (2.0, -0.2)
    u_max: tuple[float, ...] = (20.0, 0.2)
    nu_min: tuple[float, ...] = (-800.0, -0.2)
    nu_max: tuple[float, ...] = (800.0, 0.2)
    thrust_overshoot_tightening: bool = False
    # episode
    n_periods: float = 2.0
    init_ball_radius: float = 0.015
    start_mode: str = "ball"
    n_trials: int = 30
    transient_fraction: float = 0.1
    max_consecutive_infeasible: int = 5

    @property
    def n_steps(self) -> int:
        return int(round(self.n_periods * self.period / self.dt))

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), sort_keys=True, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "RunConfig":
        raw = json.loads(text)
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        kwargs = {}
        for f in dataclasses.fields(cls):
            if f.name not in raw:
                continue
            v = raw[f.name]
            if isinstance(v, list):
                v = _tuplify(v)
            kwargs[f.name] = v
        return cls(**kwargs)

    @classmethod
    def load(cls, path) -> "RunConfig":
        return cls.from_json(Path(path).read_text())


def _tuplify(v):
    return tuple(_tuplify(x) if isinstance(x, list) else x for x in v)


def default_config() -> RunConfig:
    return RunConfig()


@dataclass(frozen=True)
class StepLog:
    k: int
    z_hat: np.ndarray
    z_ref: np.ndarray
    v_star: np.ndarray
    nu_star: np.ndarray
    u: np.ndarray
    lyapunov: float
    filter_status: str
    tightening_margins: np.ndarray
    active_constraints: int
    fmpc_us: float
    filter_us: float


@dataclass(frozen=True)
class RunMetrics:
    rmse: float
    rmse_post_transient: float
    max_halfspace_violation: float
    lyapunov_decrease_freq: float
    infeasible_steps: int
    aborted: bool
    mean_step_ms: float
    p95_step_ms: float
    mean_fmpc_ms: float
    mean_filter_ms: float


class ControlStack:
    """All precomputed control components for one configuration."""

    def __init__(self, cfg: RunConfig, gps: AffineGP | None = None):
        self.cfg = cfg
        self.params = q2d.QuadParams(
            beta1=cfg.beta1, beta2=cfg.beta2, alpha1=cfg.alpha1,
            alpha2=cfg.alpha2, alpha3=cfg.alpha3, g=cfg.gravity, f_min=cfg.f_min)
        self.flat_spec = FlatSpec(m=2, rho=(4, 4), dt=cfg.dt)
        self.lti = assemble_flat_lti(self.flat_spec)
        self.Q = np.kron(np.eye(2), np.diag(cfg.q_chain))
        self.R = np.diag([cfg.r_input, cfg.r_input])
        self.riccati = riccati_synthesis(self.lti, self.Q, self.R, cfg.horizon)
        self.ext = build_extension([2, 0], cfg.dt)
        hs = tuple((np.asarray(h, dtype=float), float(b)) for h, b in cfg.halfspaces)
        self.halfspaces = hs
        self.mpc = FlatMPC(MPCSetup(lti=self.lti, Q=self.Q, R=self.R,
                                    T=cfg.horizon, halfspaces=hs))
        self.gps = gps
        delta_state = cfg.delta_state if cfg.delta_state else (0.01,) * len(hs)
        if len(delta_state) != len(hs):
            raise ValueError("delta_state must have one entry per half-space")
        betas = np.full(2, cfg.beta_value)
        if gps is not None and cfg.beta_mode == "rkhs":
            betas = np.array([
                gp_affine.confidence_multiplier(
                    d, cfg.delta_gp[i], mode="rkhs", rkhs_bound=cfg.rkhs_bound)
                for i, d in enumerate(gps.dims)
            ])
        self.filter_cfg = FilterConfig(
            nu_min=np.asarray(cfg.nu_min, dtype=float),
            nu_max=np.asarray(cfg.nu_max, dtype=float),
            u_min=np.asarray(cfg.u_min, dtype=float),
            u_max=np.asarray(cfg.u_max, dtype=float),
            betas=betas,
            delta_state=np.asarray(delta_state, dtype=float),
            delta_bar=cfg.delta_bar,
            epsilon=cfg.epsilon,
            thrust_overshoot_tightening=cfg.thrust_overshoot_tightening,
        )

    def reference(self, n_steps: int | None = None) -> q2d.ReferenceTrajectory:
        cfg = self.cfg
        n = (n_steps if n_steps is not None else cfg.n_steps) + cfg.horizon + 1
        return q2d.lemniscate_reference(
            cfg.amplitude_x, cfg.amplitude_z, cfg.period, cfg.dt, n, cfg.center)


def _thrust_guard(nu1: float, eta: np.ndarray, dt: float, fcfg) -> float:
    """Keep the open-loop thrust double integrator inside its bounds.

    The exact-inversion baseline has no Eq.-(19)-style rows, so the clipped
    extended input could wind the thrust chain through its limits; this
    clamps the one-step prediction and brakes when the stopping distance
    would overshoot a bound.
    """
    t_c, rate = float(eta[0]), float(eta[1])
    lo, hi = float(fcfg.u_min[0]), float(fcfg.u_max[0])
    n_lo, n_hi = float(fcfg.nu_min[0]), float(fcfg.nu_max[0])
    if rate > 0 and t_c + rate**2 / (2.0 * n_hi) >= hi:
        return n_lo
    if rate < 0 and t_c - rate**2 / (2.0 * -n_lo) <= lo:
        return n_hi
    half = 0.5 * dt * dt
    nu1 = min(nu1, (hi - t_c - dt * rate) / half)
    nu1 = max(nu1, (lo - t_c - dt * rate) / half)
    return float(np.clip(nu1, n_lo, n_hi))


def _initial_flat_state(stack: ControlStack, reference, rng) -> np.ndarray:
    cfg = stack.cfg
    z0 = reference.z_ref[0].copy()
    if cfg.start_mode == "hover":
        z0[1:4] = 0.0
        z0[5:8] = 0.0
        return z0
    if cfg.start_mode != "ball":
        raise ValueError(f"unknown start_mode {cfg.start_mode!r}")
    # uniform ball offsets on position and velocity
    for idx in ((0, 4), (1, 5)):
        ang = rng.uniform(0.0, 2.0 * np.pi)
        rad = cfg.init_ball_radius * np.sqrt(rng.uniform())
        z0[idx[0]] += rad * np.cos(ang)
        z0[idx[1]] += rad * np.sin(ang)
    return z0


def run_episode(
    cfg: RunConfig,
    mode: str,
    seed: int,
    gps: AffineGP | None = None,
    stack: ControlStack | None = None,
) -> tuple[list[StepLog], RunMetrics]:
    """Run one closed-loop episode.

    mode "learned" routes the MPC output through the GP safety filter;
    mode "exact-psi" inverts the true transformation instead (clipped to
    the extended-input box).  Episodes abort once the filter reports more
    than the configured number of consecutive non-optimal steps.
    """
    if mode not in ("learned", "exact-psi"):
        raise ValueError(f"unknown mode {mode!r}")
    if mode == "learned" and gps is None and (stack is None or stack.gps is None):
        raise ValueError("learned mode requires a trained GP artifact")
    if stack is None:
        stack = ControlStack(cfg, gps=gps)
    elif gps is not None and stack.gps is None:
        stack.gps = gps
    reference = stack.reference()
    rng = np.random.default_rng(seed)
    z0 = _initial_flat_state(stack, reference, rng)
    state, t_c, t_c_dot = q2d.flat_to_physical(z0, stack.params)
    eta = np.array([t_c, t_c_dot, 0.0])

    n_steps = cfg.n_steps
    T = cfg.horizon
    logs: list[StepLog] = []
    consecutive_infeasible = 0
    aborted = False
    nu_prev = np.zeros(2)
    mpc = stack.mpc
    mpc._warm_set = None

    for k in range(n_steps):
        z_hat = q2d.physical_to_flat(state, eta[0], eta[1], stack.params)
        z_ref_win = reference.z_ref[k:k + T + 1]
        v_ref_win = reference.v_ref[k:k + T]

        t0 = time.perf_counter()
        sol = mpc.solve(z_hat, z_ref_win, v_ref_win)
        fmpc_us = (time.perf_counter() - t0) * 1e6

        t0 = time.perf_counter()
        if mode == "exact-psi":
            nu = q2d.psi_inverse(sol.z_star, sol.v_star, stack.params)
            nu = np.clip(nu, stack.filter_cfg.nu_min, stack.filter_cfg.nu_max)
            nu[0] = _thrust_guard(nu[0], eta, cfg.dt, stack.filter_cfg)
            status = "optimal"
            margins = np.zeros(0)
        else:
            fres = filter_step(
                stack.gps, stack.riccati, stack.lti, stack.ext,
                sol.z_star, sol.v_star, z_hat, reference.z_ref[k],
                reference.v_ref[k], eta, stack.halfspaces, stack.filter_cfg)
            status = fres.status
            margins = fres.cone_slacks
            nu = fres.nu_star if status == "optimal" else nu_prev
        filter_us = (time.perf_counter() - t0) * 1e6

        if status == "optimal":
            consecutive_infeasible = 0
        else:
            consecutive_infeasible += 1

        eta_next, u = extension_step(stack.ext, eta, nu)
        e_k = z_hat - reference.z_ref[k]
        logs.append(StepLog(
            k=k, z_hat=z_hat, z_ref=reference.z_ref[k].copy(),
            v_star=sol.v_star, nu_star=nu.copy(), u=u,
            lyapunov=lyapunov_value(stack.riccati.P, e_k),
            filter_status=status,
            tightening_margins=margins,
            active_constraints=int(np.count_nonzero(sol.multipliers > 1e-9)),
            fmpc_us=fmpc_us, filter_us=filter_us,
        ))
        nu_prev = nu

        if consecutive_infeasible > cfg.max_consecutive_infeasible:
            aborted = True
            break
        # plant integrates the thrust chain continuously from its pre-step
        # state; the discrete extension agrees with it at the sample instant
        state, chain = q2d.integrate(state, eta[:2], nu, cfg.dt, stack.params,
                                     substeps=cfg.rk4_substeps)
        eta = np.array([chain[0], chain[1], eta_next[2]])

    metrics = _metrics(cfg, stack, logs, aborted)
    return logs, metrics


def _metrics(cfg: RunConfig, stack: ControlStack, logs: list[StepLog],
             aborted: bool) -> RunMetrics:
    if not logs:
        return RunMetrics(np.nan, np.nan, 0.0, 0.0, 0, aborted,
                          np.nan, np.nan, np.nan, np.nan)
    pos_err = np.array([
        [log.z_hat[0] - log.z_ref[0], log.z_hat[4] - log.z_ref[4]] for log in logs])
    sq = np.sum(pos_err**2, axis=1)
    cut = int(len(logs) * cfg.transient_fraction)
    rmse = float(np.sqrt(np.mean(sq)))
    rmse_post = float(np.sqrt(np.mean(sq[cut:]))) if cut < len(logs) else np.nan

    viol = 0.0
    for h, b in stack.halfspaces:
        vals = np.array([h @ log.z_hat - b for log in logs
                         if log.filter_status == "optimal"])
        if vals.size:
            viol = max(viol, float(np.maximum(vals, 0.0).max()))

    v_vals = np.array([log.lyapunov for log in logs])
    opt = np.array([log.filter_status == "optimal" for log in logs])
    decrease = 0
    count = 0
    for k in range(len(logs) - 1):
        if opt[k]:
            count += 1
            if v_vals[k + 1] < v_vals[k]:
                decrease += 1
    freq = decrease / count if count else 0.0

    step_ms = np.array([(log.fmpc_us + log.filter_us) * 1e-3 for log in logs])
    return RunMetrics(
        rmse=rmse,
        rmse_post_transient=rmse_post,
        max_halfspace_violation=viol,
        lyapunov_decrease_freq=float(freq),
        infeasible_steps=int(np.sum(~opt)),
        aborted=aborted,
        mean_step_ms=float(step_ms.mean()),
        p95_step_ms=float(np.percentile(step_ms, 95)),
        mean_fmpc_ms=float(np.mean([log.fmpc_us for log in logs]) * 1e-3),
        mean_filter_ms=float(np.mean([log.filter_us for log in logs]) * 1e-3),
    )


# ---------------------------------------------------------------------------
# GP training pipeline
# ---------------------------------------------------------------------------

def train_pipeline(cfg: RunConfig, out_dir) -> tuple[Path, dict]:
    """Sample data, fit the per-dimension GPs, evaluate held-out calibration,
    and write the artifact plus a calibration report.

    Raises RuntimeError when the held-out relative RMSE exceeds the gate.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    stack = ControlStack(cfg)
    reference = stack.reference()
    n_total = int(round(cfg.gp_n_train / (1.0 - cfg.gp_holdout_fraction)))
    points = sample_training_data(
        reference, stack.params, n_total,
        z_jitter=np.asarray(cfg.gp_z_jitter, dtype=float),
        nu_min=np.asarray(cfg.nu_min, dtype=float),
        nu_max=np.asarray(cfg.nu_max, dtype=float),
        noise_std=cfg.gp_noise_std, seed=cfg.gp_seed)
    train, held = points[:cfg.gp_n_train], points[cfg.gp_n_train:]

    # data-scaled initial hyperparameters, one per output dimension
    n_z = 8
    V = np.stack([p.v for p in train])
    nu_scale = np.maximum(np.std(np.stack([p.nu for p in train]), axis=0), 1e-6)
    inits = []
    for i in range(2):
        target_std = max(float(np.std(V[:, i])), 1e-3)
        inits.append(gp_affine.AffineKernelParams(
            alpha_signal_var=target_std**2,
            alpha_lengthscales=np.full(n_z, cfg.gp_init_lengthscale),
            beta_signal_vars=(target_std / nu_scale)**2,
            beta_lengthscales=np.full((2, n_z), cfg.gp_init_lengthscale),
            noise_var=max(cfg.gp_noise_std**2, 1e-12),
        ))
    gps = gp_fit(train, inits, restarts=cfg.gp_restarts,
                 max_iter=cfg.gp_max_iter, seed=cfg.gp_seed)

    report = evaluate_calibration(gps, held)
    report["n_train"] = len(train)
    report["n_holdout"] = len(held)
    artifact = out_dir / "gp_artifact.json"
    gp_affine.save_artifact(gps, artifact)
    (out_dir / "gp_calibration.json").write_text(json.dumps(report, indent=2, sort_keys=True))
    if max(report["relative_rmse"]) > cfg.gp_rmse_gate:
        raise RuntimeError(
            f"held-out relative RMSE {report['relative_rmse']} exceeds the "
            f"gate {cfg.gp_rmse_gate}")
    return artifact, report


def evaluate_calibration(gps: AffineGP, held: list) -> dict:
    """Held-out relative RMSE (of output range) and 2-sigma coverage per dim."""
    Z = np.stack([p.z for p in held])
    Nu = np.stack([p.nu for p in held])
    V = np.stack([p.v for p in held])
    rel_rmse, coverage = [], []
    for i, dim in enumerate(gps.dims):
        mu = np.empty(len(held))
        sd = np.empty(len(held))
        for j in range(len(held)):
            mean, var = dim.predict(Z[j], Nu[j])
            mu[j] = mean
            # predictive spread vs noisy targets includes observation noise
            sd[j] = np.sqrt(max(var, 0.0) + dim.params.noise_var)
        err = V[:, i] - mu
        rng_out = float(V[:, i].max() - V[:, i].min())
        rel_rmse.append(float(np.sqrt(np.mean(err**2)) / max(rng_out, 1e-12)))
        coverage.append(float(np.mean(np.abs(err) <= 2.0 * sd)))
    return {"relative_rmse": rel_rmse, "coverage_2sigma": coverage}


# ---------------------------------------------------------------------------
# Batch comparison and export
# ---------------------------------------------------------------------------

def compare(cfg: RunConfig, gps: AffineGP, modes=("exact-psi", "learned"),
            seeds=None) -> dict:
    """Run every mode over the configured trials; returns per-mode metrics."""
    if seeds is None:
        seeds = list(range(cfg.n_trials))
    out = {}
    for mode in modes:
        stack = ControlStack(cfg, gps=gps if mode == "learned" else None)
        rows = []
        for seed in seeds:
            _, met = run_episode(cfg, mode, seed, stack=stack)
            rows.append(met)
        out[mode] = rows
    return out


def metrics_table_csv(results: dict, path) -> None:
    fields = [f.name for f in dataclasses.fields(RunMetrics)]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["mode", "seed"] + fields)
        for mode, rows in results.items():
            for seed, met in enumerate(rows):
                w.writerow([mode, seed] + [repr(getattr(met, f)) for f in fields])


def steplogs_csv(logs: list[StepLog], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        header = (["k"] + [f"z{i}" for i in range(8)] + [f"zref{i}" for i in range(8)]
                  + ["v0", "v1", "nu0", "nu1", "u0", "u1", "lyapunov", "status",
                     "active_constraints", "fmpc_us", "filter_us"])
        w.writerow(header)
        for log in logs:
            row = ([log.k] + [repr(float(x)) for x in log.z_hat]
                   + [repr(float(x)) for x in log.z_ref]
                   + [repr(float(x)) for x in log.v_star]
                   + [repr(float(x)) for x in log.nu_star]
                   + [repr(float(x)) for x in log.u]
                   + [repr(log.lyapunov), log.filter_status,
                      log.active_constraints, repr(log.fmpc_us), repr(log.filter_us)])
            w.writerow(row)


def plot_tracking_svg(logs: list[StepLog], path) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    t = np.array([log.k for log in logs]) * 1.0
    err = np.array([np.hypot(log.z_hat[0] - log.z_ref[0],
                             log.z_hat[4] - log.z_ref[4]) for log in logs])
    fig, ax = plt.subplots(figsize=(7, 3))
    ax.semilogy(t, np.maximum(err, 1e-12))
    ax.set_xlabel("step")
    ax.set_ylabel("position error [m]")
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)
