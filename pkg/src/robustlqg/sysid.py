"""Single-trajectory OLS identification of the FIR plant and its error bounds.

The estimator regresses each output sample on the reversed window of the
last T inputs; the H-infinity error splits into an FIR-estimation part
(measured or bounded via sqrt(T) x block spectral norm) and a geometric
truncation tail.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .hinf import hinf_norm_sdp
from .lti import (FirTm, StateSpace, Trajectory, fir_truncation_horizon,
                  markov_parameters, phi_margin, spectral_radius)


class InsufficientDataError(ValueError):
    """Trajectory shorter than the regression window."""


class UnidentifiableError(RuntimeError):
    """Regressor Gram matrix is rank deficient; singular values attached."""

    def __init__(self, message: str, singular_values: np.ndarray):
        super().__init__(message)
        self.singular_values = singular_values


@dataclass(frozen=True)
class RegressionData:
    """Stacked outputs Y (N x p) against reversed input windows U (N x Tm)."""

    Y: np.ndarray
    U: np.ndarray
    T: int

    def __post_init__(self):
        Y = np.asarray(self.Y, float)
        U = np.asarray(self.U, float)
        if Y.ndim != 2 or U.ndim != 2 or Y.shape[0] != U.shape[0]:
            raise ValueError("Y and U must be matrices with equal row counts")
        if Y.shape[0] < 1:
            raise ValueError("need at least one regression row")
        if U.shape[1] % self.T != 0:
            raise ValueError("U column count not divisible by T")
        object.__setattr__(self, "Y", Y)
        object.__setattr__(self, "U", U)

    @property
    def N(self) -> int:
        return self.Y.shape[0]

    @property
    def m(self) -> int:
        return self.U.shape[1] // self.T

    @property
    def p(self) -> int:
        return self.Y.shape[1]


@dataclass(frozen=True)
class SampleBoundParams:
    """Problem-dependent constants of the high-probability error bound.

    Their exact formulas live in the cited identification literature; they
    are user-supplied inputs here and default to 1.0 with a warning.
    """

    R_w: float = 1.0
    R_v: float = 1.0
    R_e: float = 1.0
    c: float = 1.0

    def __post_init__(self):
        for name in ("R_w", "R_v", "R_e"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")
        if self.c <= 0:
            raise ValueError("c must be positive")

    @staticmethod
    def defaults() -> "SampleBoundParams":
        warnings.warn(
            "SampleBoundParams left at defaults (R_w=R_v=R_e=c=1): the "
            "theoretical bound is shape-only; use oracle mode for calibrated "
            "uncertainty", stacklevel=2)
        return SampleBoundParams()

    @property
    def R_total(self) -> float:
        return self.R_w + self.R_v + self.R_e


def build_regression(traj: Trajectory, T: int) -> RegressionData:
    """Assemble N = horizon - T + 1 rows [u_t', u_{t-1}', ..., u_{t-T+1}']."""
    if T < 1:
        raise ValueError("T must be >= 1")
    H = traj.horizon
    if H < T:
        raise InsufficientDataError(f"insufficient data: horizon {H} < T {T}")
    m = traj.u.shape[1]
    N = H - T + 1
    U = np.zeros((N, T * m))
    for k in range(T):
        U[:, k * m:(k + 1) * m] = traj.u[T - 1 - k:H - k]
    Y = traj.y[T - 1:]
    return RegressionData(Y=Y, U=U, T=T)


def ols_estimate(data: RegressionData, rcond: float = 1e-10,
                 return_diagnostics: bool = False):
    """OLS estimate of the FIR blocks, with forced strict properness.

    The raw leading block is zeroed (the true plant has no feedthrough) and
    kept as a diagnostic.  Rank deficiency below rcond (relative) aborts
    rather than regularizing.
    """
    svals = np.linalg.svd(data.U, compute_uv=False)
    if svals[0] == 0.0 or svals[-1] < rcond * svals[0]:
        raise UnidentifiableError(
            f"unidentifiable: regressor singular values span "
            f"[{svals[-1]:.3g}, {svals[0]:.3g}]", svals)
    G_flat, *_ = np.linalg.lstsq(data.U, data.Y, rcond=None)
    G_flat = G_flat.T  # p x Tm
    T, m, p = data.T, data.m, data.p
    coeffs = np.stack([G_flat[:, k * m:(k + 1) * m] for k in range(T)])
    g0_raw = coeffs[0].copy()
    coeffs[0] = 0.0
    G = FirTm(coeffs, strictly_proper=True)
    if return_diagnostics:
        return G, {"g0_raw": g0_raw, "singular_values": svals}
    return G


def truncation_tail_bound(ss: StateSpace, T: int) -> float:
    """Geometric bound Phi ||C|| ||B|| rho^T / (1 - rho) on the tail past T."""
    rho = spectral_radius(ss.A)
    phi = phi_margin(ss.A)
    if rho == 0.0:
        return 0.0
    nB = float(np.linalg.norm(ss.B, 2))
    nC = float(np.linalg.norm(ss.C, 2))
    return phi * nC * nB * rho ** T / (1.0 - rho)


def choose_fir_length(eps: float, ss: StateSpace) -> int:
    """Smallest window T whose truncation tail bound is at most eps/2.

    rho = 0 returns n + 1 (the impulse response is then exactly FIR).
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    rho = spectral_radius(ss.A)
    if rho >= 1.0:
        raise ValueError("plant must be stable")
    if rho == 0.0:
        return ss.n + 1
    phi = phi_margin(ss.A)
    nB = float(np.linalg.norm(ss.B, 2))
    nC = float(np.linalg.norm(ss.C, 2))
    denom = 2.0 * phi * nC * nB
    if denom == 0.0:
        return 1
    arg = eps * (1.0 - rho) / denom
    if arg >= 1.0:
        return 1
    return max(1, int(np.ceil(np.log(arg) / np.log(rho))))


def required_trajectory_length(eps: float, T: int, params: SampleBoundParams,
                               sigma_u: float, m: int,
                               max_fixed_point_iters: int = 100) -> int:
    """Smallest N clearing both branches of the sample-size requirement.

    The N-dependent log^2(2Nm) branch is resolved by fixed-point iteration
    from N0 = cTm.
    """
    if min(eps, T, sigma_u, m) <= 0:
        raise ValueError("all inputs must be positive")
    branch1 = 4.0 * T * params.R_total ** 2 / (sigma_u ** 2 * eps ** 2)

    def branch2(N: float) -> float:
        return params.c * T * m * np.log(2 * T * m) ** 2 * np.log(2 * N * m) ** 2

    N = max(branch1, params.c * T * m, 2.0)
    for _ in range(max_fixed_point_iters):
        target = max(branch1, branch2(N))
        if N > target:
            return int(np.ceil(N))
        N = np.ceil(target) + 1.0
    raise RuntimeError("sample-size fixed point did not converge")


@dataclass(frozen=True)
class EstimationErrorReport:
    """Oracle H-inf error and the certified sqrt(T)-block bound.

    oracle: certified norm of (G_hat - truncated true response) plus the
    geometric tail past L_tail.  block_bound: sqrt(T) x spectral norm of the
    stacked coefficient difference plus the tail past T (the looser but
    data-computable shape).
    """

    oracle: float
    block_bound: float
    L_tail: int
    T: int

    def __float__(self) -> float:
        return self.oracle


def estimation_error_hinf(G_hat: FirTm, ss_true: StateSpace,
                          L_tail: Optional[int] = None) -> EstimationErrorReport:
    """H-inf distance between the estimate and the true plant response."""
    rho = spectral_radius(ss_true.A)
    if rho >= 1.0:
        raise ValueError("true plant must be stable")
    if L_tail is None:
        L_tail = max(fir_truncation_horizon(ss_true), G_hat.L)
    L_tail = max(L_tail, G_hat.L)
    G_true = markov_parameters(ss_true, L_tail)
    diff = G_hat.truncate(L_tail) - G_true
    oracle = hinf_norm_sdp(diff) + truncation_tail_bound(ss_true, L_tail)

    T = G_hat.L
    G_true_T = markov_parameters(ss_true, T)
    block = np.hstack([(G_hat.coeffs[k] - G_true_T.coeffs[k]) for k in range(T)])
    block_bound = (np.sqrt(T) * float(np.linalg.norm(block, 2))
                   + truncation_tail_bound(ss_true, T))
    return EstimationErrorReport(oracle=oracle, block_bound=block_bound,
                                 L_tail=L_tail, T=T)
