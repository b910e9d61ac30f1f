"""Flat MPC with a learned-input-transformation SOCP safety filter.

A control-stack library for multi-input differentially flat systems: an
exactly discretized chained-integrator flat model, a convex flat MPC, an
affine-kernel Gaussian-process model of the nonlinear flat-input
transformation, a second-order-cone safety filter, small dense convex
solver backends, and a closed-loop simulation harness around a planar
quadrotor benchmark.
"""

from .flat_core import (DiscreteFlatLTI, ExtensionSpec, FlatSpec, RiccatiResult,
                        assemble_flat_lti, build_extension, discretize_chain,
                        extension_step, lyapunov_value, riccati_synthesis)
from .gp_affine import (AffineGP, AffineKernelParams, GammaTerms, GPDataPoint,
                        gamma_terms)
from .harness import RunConfig, RunMetrics, StepLog, run_episode, train_pipeline
from .quadrotor2d import QuadParams, ReferenceTrajectory

__version__ = "0.1.0"
