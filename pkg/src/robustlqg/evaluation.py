"""Ground-truth side: Riccati-optimal baseline, exact closed-loop LQG cost,
robust-stability sampling, and the suboptimality-bound machinery.

Costs are exact (discrete Lyapunov equations on the interconnected
realization); impulse-response truncation survives only as an independent
test oracle.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np
from scipy.linalg import solve_discrete_lyapunov

from .hinf import hinf_norm_sdp
from .lti import (ControllerSS, FirTm, LqgWeights, StateSpace, _controller_matrices,
                  fir_convolve, fir_to_statespace, markov_parameters,
                  spectral_radius)
from .synthesis import ResponseQuad, SynthesisConfig, h_factor, inner_solve

__all__ = [
    "ControllerSS", "SuboptReport", "dare_solve", "optimal_lqg",
    "closed_loop_cost", "closed_loop_matrices", "closed_loop_responses",
    "hinf_norm_statespace", "u_star_hinf_norm", "g_star_hinf_norm", "g_of",
    "suboptimality_bound", "subopt_report", "sample_delta",
    "robust_stability_check", "RobustnessReport", "RobustnessTrial",
    "e1_witness_check", "WitnessReport", "UnstableClosedLoopError",
]


class UnstableClosedLoopError(RuntimeError):
    """Closed-loop spectral radius >= 1 (synthesis or uncertainty failure)."""


def dare_solve(A: np.ndarray, B: np.ndarray, Q_mat: np.ndarray,
               R_mat: np.ndarray, tol: float = 1e-12,
               max_iters: int = 100_000) -> np.ndarray:
    """Fixed point of P <- A'PA - A'PB (R + B'PB)^-1 B'PA + Q.

    Plain Riccati iteration; converges for the stable plants this package
    admits.  Nonconvergence raises with the last residual.
    """
    A = np.atleast_2d(np.asarray(A, float))
    B = np.atleast_2d(np.asarray(B, float))
    Q = np.atleast_2d(np.asarray(Q_mat, float))
    R = np.atleast_2d(np.asarray(R_mat, float))
    P = Q.copy()
    for _ in range(max_iters):
        APA = A.T @ P @ A
        BPB = R + B.T @ P @ B
        APB = A.T @ P @ B
        P_next = APA - APB @ np.linalg.solve(BPB, APB.T) + Q
        P_next = 0.5 * (P_next + P_next.T)
        resid = float(np.linalg.norm(P_next - P, "fro"))
        P = P_next
        if resid <= tol:
            return P
    raise RuntimeError(f"Riccati iteration did not converge (residual {resid:.3g})")


def optimal_lqg(ss_true: StateSpace,
                weights: Optional[LqgWeights] = None
                ) -> Tuple[ControllerSS, float]:
    """Kalman filter + LQR gain assembled into the optimal output-feedback law.

    The input-side process noise has covariance sigma_w^2 B B'; the policy
    sees the current output, so the filter runs in current-estimator form
    (nonzero feedthrough K_lqr M).  Returns the controller and its exact cost.
    """
    weights = weights or LqgWeights()
    A, B, C = ss_true.A, ss_true.B, ss_true.C
    Qy = weights.q_matrix(ss_true.p)
    R = weights.r_matrix(ss_true.m)

    P = dare_solve(A, B, C.T @ Qy @ C, R)
    K_lqr = -np.linalg.solve(R + B.T @ P @ B, B.T @ P @ A)

    S = dare_solve(A.T, C.T, weights.sigma_w ** 2 * (B @ B.T),
                   weights.sigma_v ** 2 * np.eye(ss_true.p))
    M = np.linalg.solve(C @ S @ C.T + weights.sigma_v ** 2 * np.eye(ss_true.p),
                        C @ S).T

    ABK = A + B @ K_lqr
    IMC = np.eye(ss_true.n) - M @ C
    ctrl = ControllerSS(A_k=ABK @ IMC, B_k=ABK @ M,
                        C_k=K_lqr @ IMC, D_k=K_lqr @ M)
    J_star = closed_loop_cost(ss_true, ctrl, weights)
    return ctrl, J_star


def closed_loop_matrices(ss: StateSpace, controller) -> Tuple[np.ndarray, ...]:
    """(Acl, Bv, Bw, Cy, Cu, Dyv, Duv, Duw) of the plant/controller loop.

    Inputs are the unit-variance noises (v, w); outputs (y, u) with
    u = pi + w, y = C x + v.
    """
    k = _controller_matrices(controller)
    A, B, C = ss.A, ss.B, ss.C
    n, q = ss.n, k.q
    Acl = np.block([[A + B @ k.D_k @ C, B @ k.C_k],
                    [k.B_k @ C, k.A_k]])
    Bv = np.vstack([B @ k.D_k, k.B_k])
    Bw = np.vstack([B, np.zeros((q, ss.m))])
    Cy = np.hstack([C, np.zeros((ss.p, q))])
    Cu = np.hstack([k.D_k @ C, k.C_k])
    Dyv = np.eye(ss.p)
    Duv = k.D_k
    Duw = np.eye(ss.m)
    return Acl, Bv, Bw, Cy, Cu, Dyv, Duv, Duw


def closed_loop_cost(ss_true: StateSpace, controller,
                     weights: Optional[LqgWeights] = None) -> float:
    """Exact LQG cost sqrt(E[y'Qy + u'Ru]) of the loop on the true plant.

    Checks internal stability first; the H2 value comes from the discrete
    Lyapunov equation of the interconnection driven by (w, v) with outputs
    (Q^(1/2) y, R^(1/2) u).
    """
    weights = weights or LqgWeights()
    Acl, Bv, Bw, Cy, Cu, Dyv, Duv, Duw = closed_loop_matrices(ss_true, controller)
    rho = spectral_radius(Acl)
    if rho >= 1.0:
        raise UnstableClosedLoopError(f"closed loop unstable (rho = {rho:.6g})")
    Qs = weights.q_sqrt(ss_true.p)
    Rs = weights.r_sqrt(ss_true.m)
    sv, sw = weights.sigma_v, weights.sigma_w
    Ccl = np.vstack([Qs @ Cy, Rs @ Cu])
    Bcl = np.hstack([sv * Bv, sw * Bw])
    Dcl = np.block([[sv * Qs @ Dyv, np.zeros((ss_true.p, ss_true.m))],
                    [sv * Rs @ Duv, sw * Rs @ Duw]])
    X = solve_discrete_lyapunov(Acl.T, Ccl.T @ Ccl)
    J2 = float(np.trace(Bcl.T @ X @ Bcl) + np.trace(Dcl.T @ Dcl))
    return float(np.sqrt(max(J2, 0.0)))


def closed_loop_responses(ss: StateSpace, controller, L: int) -> ResponseQuad:
    """First L impulse-response coefficients of the four closed-loop maps."""
    Acl, Bv, Bw, Cy, Cu, Dyv, Duv, Duw = closed_loop_matrices(ss, controller)
    p, m = ss.p, ss.m
    Y = np.zeros((L, p, p))
    U = np.zeros((L, m, p))
    W = np.zeros((L, p, m))
    Z = np.zeros((L, m, m))
    Y[0], U[0], W[0], Z[0] = Dyv, Duv, np.zeros((p, m)), Duw
    Mv, Mw = Bv, Bw
    for k in range(1, L):
        Y[k] = Cy @ Mv
        U[k] = Cu @ Mv
        W[k] = Cy @ Mw
        Z[k] = Cu @ Mw
        Mv = Acl @ Mv
        Mw = Acl @ Mw
    return ResponseQuad(Y=FirTm(Y), U=FirTm(U), W=FirTm(W), Z=FirTm(Z))


def hinf_norm_statespace(A: np.ndarray, B: np.ndarray, C: np.ndarray,
                         D: np.ndarray, n_grid: int = 4096,
                         refine: bool = True) -> float:
    """Dense-grid sup of sigma_max(C (zI - A)^-1 B + D) on the unit circle.

    One local refinement pass around the coarse argmax.
    """
    A = np.atleast_2d(np.asarray(A, float))
    if A.size and spectral_radius(A) >= 1.0:
        raise UnstableClosedLoopError("H-inf norm requires a stable realization")
    B = np.atleast_2d(np.asarray(B, float))
    C = np.atleast_2d(np.asarray(C, float))
    D = np.atleast_2d(np.asarray(D, float))

    def gains(omegas: np.ndarray) -> np.ndarray:
        out = np.empty(omegas.size)
        n = A.shape[0]
        I = np.eye(n)
        for i, w in enumerate(omegas):
            z = np.exp(1j * w)
            H = C @ np.linalg.solve(z * I - A, B) + D if n else D
            out[i] = np.linalg.svd(H, compute_uv=False)[0] if H.size else 0.0
        return out

    if A.size == 0 or B.size == 0 or C.size == 0:
        return float(np.linalg.svd(D, compute_uv=False)[0]) if D.size else 0.0
    omegas = np.linspace(0.0, np.pi, n_grid)
    vals = gains(omegas)
    best = int(np.argmax(vals))
    peak = float(vals[best])
    if refine:
        dw = np.pi / (n_grid - 1)
        lo = max(omegas[best] - 2 * dw, 0.0)
        hi = min(omegas[best] + 2 * dw, np.pi)
        peak = max(peak, float(np.max(gains(np.linspace(lo, hi, 65)))))
    return peak


def u_star_hinf_norm(ss: StateSpace, controller, n_grid: int = 4096) -> float:
    """H-inf norm of the v -> u closed-loop map (the optimal Youla response)."""
    Acl, Bv, _, _, Cu, _, Duv, _ = closed_loop_matrices(ss, controller)
    return hinf_norm_statespace(Acl, Bv, Cu, Duv, n_grid=n_grid)


def g_star_hinf_norm(ss: StateSpace, n_grid: int = 4096) -> float:
    """H-inf norm of the open-loop plant response."""
    return hinf_norm_statespace(ss.A, ss.B, ss.C,
                                np.zeros((ss.p, ss.m)), n_grid=n_grid)


def g_of(eps: float, u_star_hinf: float, g_star_hinf: float) -> float:
    """Witness-side inflation eps*g*(2 + u g) + eps^2 (2 + u g)^2, g = ||G*||inf."""
    t = 2.0 + u_star_hinf * g_star_hinf
    return eps * g_star_hinf * t + eps ** 2 * t ** 2


def suboptimality_bound(eps: float, alpha: float, u_star_hinf: float,
                        g_star_hinf: float, g_hat_hinf: float) -> float:
    """Right side of the relative-gap bound: 20 eps ||U*|| + h + g."""
    return (20.0 * eps * u_star_hinf
            + h_factor(eps, alpha, g_hat_hinf)
            + g_of(eps, u_star_hinf, g_star_hinf))


@dataclass(frozen=True)
class SuboptReport:
    """Measured relative LQG gap against the theoretical right-hand side."""

    J_star: float
    J_hat: float
    relative_gap: float
    bound_rhs: float
    u_star_hinf: float
    g_star_hinf: float
    eps: float
    alpha: float
    bound_applicable: bool

    def to_json(self) -> str:
        import json
        return json.dumps(self.__dict__)


def subopt_report(ss_true: StateSpace, J_hat: float, J_star: float,
                  u_star_hinf: float, g_star_hinf: float, g_hat_hinf: float,
                  eps: float, alpha: float,
                  conservatism: float = 1.01) -> SuboptReport:
    """Assemble the gap report; the precondition check inflates ||U*|| by 1%."""
    gap = (J_hat ** 2 - J_star ** 2) / J_star ** 2
    rhs = suboptimality_bound(eps, alpha, u_star_hinf, g_star_hinf, g_hat_hinf)
    applicable = eps < 1.0 / (5.0 * conservatism * u_star_hinf)
    return SuboptReport(J_star=J_star, J_hat=J_hat, relative_gap=gap,
                        bound_rhs=rhs, u_star_hinf=u_star_hinf,
                        g_star_hinf=g_star_hinf, eps=eps, alpha=alpha,
                        bound_applicable=applicable)


# ---------------------------------------------------------------------------
# Robust stability sampling


@dataclass(frozen=True)
class RobustnessTrial:
    trial: int
    delta_hinf: float
    spectral_radius: float
    stable: bool


@dataclass(frozen=True)
class RobustnessReport:
    fraction_stable: float
    trials: Tuple[RobustnessTrial, ...]

    def to_csv(self) -> str:
        lines = ["trial,delta_hinf,spectral_radius,stable"]
        for t in self.trials:
            lines.append(f"{t.trial},{t.delta_hinf!r},{t.spectral_radius!r},"
                         f"{int(t.stable)}")
        return "\n".join(lines) + "\n"


def sample_delta(G_hat: FirTm, target_hinf: float, rng: np.random.Generator
                 ) -> FirTm:
    """Strictly proper Gaussian FIR rescaled to a certified H-inf norm target."""
    coeffs = rng.standard_normal(G_hat.coeffs.shape)
    coeffs[0] = 0.0
    raw = FirTm(coeffs, strictly_proper=True)
    nrm = hinf_norm_sdp(raw)
    if nrm == 0.0:
        return raw
    return raw * (target_hinf / nrm)


def robust_stability_check(G_hat: FirTm, controller, eps: float,
                           trials: int = 200, seed: int = 0) -> RobustnessReport:
    """Fraction of sampled norm-bounded plants the controller stabilizes.

    Perturbations are Gaussian FIRs at the model's horizon rescaled to
    0.95 eps; each perturbed plant is realized in state space and the loop's
    spectral radius checked.
    """
    if trials < 1:
        raise ValueError("trials must be >= 1")
    rng = np.random.default_rng(seed)
    rows: List[RobustnessTrial] = []
    n_stable = 0
    for t in range(trials):
        delta = sample_delta(G_hat, 0.95 * eps, rng)
        plant = fir_to_statespace(G_hat + delta)
        Acl = closed_loop_matrices(plant, controller)[0]
        rho = spectral_radius(Acl)
        ok = rho < 1.0
        n_stable += ok
        rows.append(RobustnessTrial(trial=t, delta_hinf=0.95 * eps,
                                    spectral_radius=rho, stable=ok))
    return RobustnessReport(fraction_stable=n_stable / trials,
                            trials=tuple(rows))


# ---------------------------------------------------------------------------
# Feasibility-witness verification


@dataclass(frozen=True)
class WitnessReport:
    eta: float
    gamma_tilde: float
    residual: float
    residual_tol: float
    u_tilde_hinf: float
    u_tilde_bound: float
    witness_psi: float
    solver_psi: float
    feasible: bool
    norm_ok: bool
    dominates: bool


def _neumann_inverse(V: FirTm, L: int, tol: float = 1e-13,
                     max_terms: int = 400) -> FirTm:
    """(I + V)^-1 as a truncated alternating Neumann series at horizon L."""
    acc = FirTm.identity(V.p).truncate(L)
    term = acc
    for _ in range(max_terms):
        term = fir_convolve(term, V * -1.0, truncate=L)
        acc = acc + term
        if float(np.max(np.abs(term.coeffs))) < tol:
            break
    return acc


def e1_witness_check(ss_true: StateSpace, G_hat: FirTm, eps: float,
                     alpha: Optional[float] = None,
                     L_tail: Optional[int] = None,
                     weights: Optional[LqgWeights] = None,
                     solver: Optional["SolverOptions"] = None) -> WitnessReport:
    """Verify the feasibility witness built from the optimal responses.

    Constructs Y*(I + Delta U*)^-1 etc. by truncated Neumann series, checks
    (i) the achievability residuals against the model, (ii) the witness
    parameter norm against sqrt(2)||U*||/(1 - eta), and (iii) that the
    solver's value at gamma-tilde is dominated by the witness cost.
    """
    from .cones import SolverOptions  # local import keeps module load light
    weights = weights or LqgWeights()
    ctrl, _ = optimal_lqg(ss_true, weights)
    Acl = closed_loop_matrices(ss_true, ctrl)[0]
    rho_cl = spectral_radius(Acl)
    if L_tail is None:
        L_tail = int(np.ceil(np.log(1e-8) / np.log(max(rho_cl, 1e-3))))
        L_tail = max(L_tail, 4 * G_hat.L, 32)
    star = closed_loop_responses(ss_true, ctrl, L_tail)
    u_star = u_star_hinf_norm(ss_true, ctrl)
    eta = eps * u_star
    if eta >= 0.2:
        raise ValueError(f"precondition eta < 1/5 violated (eta = {eta:.4g})")
    gamma_tilde = np.sqrt(2.0) * eta / (eps * (1.0 - eta))
    if alpha is None:
        alpha = gamma_tilde

    G_true = markov_parameters(ss_true, L_tail)
    delta = G_true - G_hat.truncate(L_tail)
    V1 = fir_convolve(delta, star.U, truncate=L_tail)
    V2 = fir_convolve(star.U, delta, truncate=L_tail)
    N1 = _neumann_inverse(V1, L_tail)
    N2 = _neumann_inverse(V2, L_tail)
    Yt = fir_convolve(star.Y, N1, truncate=L_tail)
    Ut = fir_convolve(star.U, N1, truncate=L_tail)
    Wt = fir_convolve(Yt, G_hat, truncate=L_tail)
    Zt = fir_convolve(N2, star.Z, truncate=L_tail)
    quad = ResponseQuad(Y=Yt, U=Ut, W=Wt, Z=Zt)
    residual = quad.residual(G_hat.truncate(L_tail))
    # truncation floor: closed-loop tail at L_tail, inflated for safety
    scale = max(1.0, float(np.max(np.abs(star.Y.coeffs))))
    residual_tol = max(1e-8, 1e3 * scale * rho_cl ** L_tail / max(1e-12, 1.0 - rho_cl))

    u_tilde = hinf_norm_sdp(Ut)
    u_bound = np.sqrt(2.0) * u_star / (1.0 - eta)
    h = h_factor(eps, alpha, hinf_norm_sdp(G_hat))
    witness_phi = float(np.sqrt(
        (1.0 + h) * np.sum(Yt.coeffs ** 2) + np.sum(Wt.coeffs ** 2)
        + np.sum(Ut.coeffs ** 2) + np.sum(Zt.coeffs ** 2)))
    witness_psi = witness_phi / (1.0 - eps * gamma_tilde)

    cfg = SynthesisConfig(eps=eps, alpha=alpha, L_u=L_tail,
                          solver=solver or SolverOptions())
    _, phi_s, _ = inner_solve(G_hat.truncate(L_tail), cfg, gamma_tilde)
    solver_psi = phi_s / (1.0 - eps * gamma_tilde)

    return WitnessReport(
        eta=float(eta), gamma_tilde=float(gamma_tilde), residual=float(residual),
        residual_tol=float(residual_tol), u_tilde_hinf=float(u_tilde),
        u_tilde_bound=float(u_bound), witness_psi=float(witness_psi),
        solver_psi=float(solver_psi),
        feasible=bool(residual <= residual_tol),
        norm_ok=bool(u_tilde <= u_bound + 1e-6),
        dominates=bool(solver_psi <= witness_psi * (1.0 + 1e-6) + 1e-9))
