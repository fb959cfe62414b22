"""Robust output-feedback synthesis over FIR closed-loop response maps.

For a stable FIR plant model the four closed-loop maps are generated by a
single stable parameter U through Y = I + G U, W = Y G, Z = I + U G, which
satisfies the achievability identities exactly (no truncation slack).  The
robust program minimizes, over a scalar gamma, the product of (1-eps*gamma)^-1
with the inner H2-type cost under the constraint ||U||_inf <= min(gamma,
alpha); the inner problem is an SDP-constrained least-squares solved by the
ADMM cone engine, the outer problem a golden-section search (the outer
objective is quasi-convex in gamma).
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, Dict, Optional, Tuple

import numpy as np
import scipy.sparse as sp
from scipy.linalg import cho_factor, cho_solve

from .cones import ConeBlock, ConeProblem, SolverOptions, solve
from .hinf import (HinfBlockLayout, certified_bound_from_q, hinf_constraint_rows,
                   hinf_norm_sdp, _triplets_to_csc)
from .cones import smat
from .lti import ControllerSS, DimensionError, FirTm, fir_convolve


@dataclass(frozen=True)
class ResponseQuad:
    """Closed-loop maps (v, w) -> (y, u): y = Y v + W w, u = U v + Z w."""

    Y: FirTm
    U: FirTm
    W: FirTm
    Z: FirTm

    def __post_init__(self):
        p, m = self.Y.p, self.Z.p
        if self.Y.m != p or self.U.coeffs.shape[1:] != (m, p) \
                or self.W.coeffs.shape[1:] != (p, m) or self.Z.m != m:
            raise DimensionError("response quad block dimensions inconsistent")

    @property
    def p(self) -> int:
        return self.Y.p

    @property
    def m(self) -> int:
        return self.Z.m

    def h2_cost(self) -> float:
        """Unweighted LQG cost sqrt(sum of squared block H2 norms)."""
        return float(np.sqrt(sum(np.sum(B.coeffs ** 2)
                                 for B in (self.Y, self.U, self.W, self.Z))))

    def residual(self, G_hat: FirTm) -> float:
        """Max coefficientwise violation of the achievability identities."""
        I_p, I_m = FirTm.identity(self.p), FirTm.identity(self.m)
        rs = [
            self.Y - fir_convolve(G_hat, self.U) - I_p,   # left identity, y-row
            self.W - fir_convolve(G_hat, self.Z),         # left identity, u-row
            self.W - fir_convolve(self.Y, G_hat),         # right identity, y-col
            self.Z - fir_convolve(self.U, G_hat) - I_m,   # right identity, u-col
        ]
        return max(float(np.max(np.abs(r.coeffs))) for r in rs)


def responses_from_u(G_hat: FirTm, U: FirTm) -> ResponseQuad:
    """Closed-loop quad generated by the free parameter U on the model G_hat.

    Exact FIR convolutions; the identities hold coefficientwise by
    construction, and Y_0 = I, Z_0 = I since G_hat is strictly proper.
    """
    if not np.all(G_hat.coeffs[0] == 0.0):
        raise ValueError("plant model must be strictly proper")
    if (U.p, U.m) != (G_hat.m, G_hat.p):
        raise DimensionError(
            f"U must be {G_hat.m}x{G_hat.p}, got {U.p}x{U.m}")
    GU = fir_convolve(G_hat, U)
    Y = FirTm.identity(G_hat.p) + GU
    W = fir_convolve(Y, G_hat)
    Z = FirTm.identity(G_hat.m) + fir_convolve(U, G_hat)
    return ResponseQuad(Y=Y, U=U, W=W, Z=Z)


def h_factor(eps: float, alpha: float, g_hat_hinf: float) -> float:
    """Cost-inflation factor eps*g*(2 + a*g) + eps^2*(2 + a*g)^2, g = ||G_hat||inf."""
    if min(eps, alpha, g_hat_hinf) < 0:
        raise ValueError("h_factor arguments must be nonnegative")
    t = 2.0 + alpha * g_hat_hinf
    return eps * g_hat_hinf * t + eps ** 2 * t ** 2


def default_alpha(eps: float) -> float:
    """Robust-stability default when nothing about the optimal loop is known."""
    return 0.999 / eps


def oracle_alpha(eps: float, u_star_hinf: float) -> float:
    """Lower admissible endpoint sqrt(2)||U*||/(1 - eps||U*||), h-minimizing.

    Clamped into (0, 1/eps) when eps||U*|| makes the endpoint leave the
    admissible range.
    """
    eta = eps * u_star_hinf
    if eta >= 1.0:
        return default_alpha(eps)
    return min(np.sqrt(2.0) * u_star_hinf / (1.0 - eta), default_alpha(eps))


@dataclass(frozen=True)
class SynthesisConfig:
    """Uncertainty radius, stability cap alpha, FIR horizon and tolerances."""

    eps: float
    alpha: float
    L_u: int
    gamma_tol: Optional[float] = None
    solver: SolverOptions = field(default_factory=SolverOptions)

    def __post_init__(self):
        if self.eps <= 0:
            raise ValueError("eps must be positive")
        if not (0 < self.alpha < 1.0 / self.eps):
            raise ValueError(
                f"alpha must lie in (0, 1/eps); got alpha={self.alpha}, "
                f"1/eps={1.0 / self.eps}")
        if self.L_u < 1:
            raise ValueError("L_u must be >= 1")

    @staticmethod
    def default_horizon(G_hat: FirTm) -> int:
        return max(4 * G_hat.L, 32)


@dataclass(frozen=True)
class SynthesisResult:
    gamma_star: float
    responses: ResponseQuad
    certified_bound: float
    h_value: float
    phi_star: float
    diagnostics: dict

    @property
    def U(self) -> FirTm:
        return self.responses.U

    def to_json(self) -> str:
        import json
        return json.dumps({
            "gamma_star": self.gamma_star,
            "certified_bound": self.certified_bound,
            "h_value": self.h_value,
            "phi_star": self.phi_star,
            "U_coeffs": self.responses.U.coeffs.tolist(),
            "diagnostics": {k: v for k, v in self.diagnostics.items()
                            if isinstance(v, (int, float, str, bool))},
        })


# ---------------------------------------------------------------------------
# Inner problem


class _InnerModel:
    """Quadratic model of the inner objective plus the H-inf constraint data.

    The decision vector is vec of U's coefficients (delay-major, row-major
    inside each block); the quadratic form is built by basis probing through
    the exact convolution maps, so it agrees with responses_from_u by
    construction.
    """

    def __init__(self, G_hat: FirTm, cfg: SynthesisConfig):
        self.G_hat = G_hat
        self.cfg = cfg
        p, m, L_u = G_hat.p, G_hat.m, cfg.L_u
        self.p, self.m, self.L_u = p, m, L_u
        self.n_u = L_u * m * p
        self.h = h_factor(cfg.eps, cfg.alpha, hinf_norm_sdp(G_hat))

        L_Y = G_hat.L + L_u - 1
        L_W = L_Y + G_hat.L - 1
        L_Z = L_u + G_hat.L - 1
        MY = np.zeros((L_Y * p * p, self.n_u))
        MW = np.zeros((L_W * p * m, self.n_u))
        MZ = np.zeros((L_Z * m * m, self.n_u))
        for t in range(self.n_u):
            e = np.zeros((L_u, m, p))
            k, rest = divmod(t, m * p)
            a, b = divmod(rest, p)
            e[k, a, b] = 1.0
            E = FirTm(e)
            GU = fir_convolve(G_hat, E)
            MY[:, t] = GU.truncate(L_Y).coeffs.ravel()
            MW[:, t] = fir_convolve(GU, G_hat).truncate(L_W).coeffs.ravel()
            MZ[:, t] = fir_convolve(E, G_hat).truncate(L_Z).coeffs.ravel()
        y0 = FirTm.identity(p).truncate(L_Y).coeffs.ravel()
        w0 = G_hat.truncate(L_W).coeffs.ravel()
        z0 = FirTm.identity(m).truncate(L_Z).coeffs.ravel()

        oneh = 1.0 + self.h
        H = oneh * MY.T @ MY + MW.T @ MW + np.eye(self.n_u) + MZ.T @ MZ
        g = oneh * MY.T @ y0 + MW.T @ w0 + MZ.T @ z0
        self.P_u = 2.0 * H
        self.q_u = 2.0 * g
        self._chol = cho_factor(H)
        self.layout = HinfBlockLayout(L=L_u, r=m, c=p, q_offset=self.n_u)
        self.u_cols = np.arange(self.n_u).reshape(L_u, m, p)
        # fast path: the bound-free minimizer and its certified norm
        self.u_unconstrained = -cho_solve(self._chol, g)
        self.unconstrained_norm = hinf_norm_sdp(self.fir_from_vec(
            self.u_unconstrained))
        self._warm: Dict[float, tuple] = {}

    def fir_from_vec(self, u: np.ndarray) -> FirTm:
        return FirTm(u.reshape(self.L_u, self.m, self.p))

    def phi_of(self, U: FirTm) -> float:
        quad = responses_from_u(self.G_hat, U)
        return float(np.sqrt(
            (1.0 + self.h) * np.sum(quad.Y.coeffs ** 2)
            + np.sum(quad.W.coeffs ** 2) + np.sum(quad.U.coeffs ** 2)
            + np.sum(quad.Z.coeffs ** 2)))

    def cone_problem(self, bound: float) -> ConeProblem:
        lay = self.layout
        n_vars = self.n_u + lay.n_q_vars
        eq_t, eq_b, psd_t, psd_b = hinf_constraint_rows(
            lay, u_cols=self.u_cols, bound=bound)
        n_eq = eq_b.size
        trip = eq_t + [(n_eq + r, c, v) for r, c, v in psd_t]
        A = _triplets_to_csc(trip, (n_eq + psd_b.size, n_vars))
        b = np.concatenate([eq_b, psd_b])
        P = sp.lil_matrix((n_vars, n_vars))
        P[:self.n_u, :self.n_u] = self.P_u
        q = np.zeros(n_vars)
        q[:self.n_u] = self.q_u
        return ConeProblem(P=P.tocsc(), q=q, A=A, b=b,
                           cones=(ConeBlock("zero", n_eq),
                                  ConeBlock("psd", lay.side)))


def inner_solve(G_hat: FirTm, cfg: SynthesisConfig, gamma: float,
                model: Optional[_InnerModel] = None
                ) -> Tuple[FirTm, float, dict]:
    """Partial minimization at fixed gamma: returns (U, phi(gamma), info).

    phi is the square root of the optimal inflated H2-squared objective.
    Solver max_iters propagates as a warning flag in info, with the best
    iterate still returned.
    """
    model = model or _InnerModel(G_hat, cfg)
    bound = min(gamma, cfg.alpha)
    if bound < 0:
        raise ValueError("gamma must be nonnegative")
    info: dict = {"bound": bound, "fast_path": False, "iterations": 0,
                  "status": "optimal"}
    if model.unconstrained_norm <= bound:
        U = model.fir_from_vec(model.u_unconstrained)
        info["fast_path"] = True
        return U, model.phi_of(U), info
    if bound == 0.0:
        U = FirTm.zero(model.m, model.p, model.L_u)
        return U, model.phi_of(U), info

    prob = model.cone_problem(bound)
    opts = cfg.solver
    if model._warm:
        key = min(model._warm, key=lambda g: abs(g - bound))
        x0, s0, y0 = model._warm[key]
        opts = replace(opts, x0=x0, s0=s0, y0=y0)
    sol = solve(prob, opts)
    info["iterations"] = sol.iterations
    info["status"] = sol.status
    model._warm[bound] = (sol.x, sol.s, sol.y)
    u = sol.x[:model.n_u]
    U = model.fir_from_vec(u)
    # rescale into certified feasibility if solver residue pushed past the
    # bound; the certificate is itself an upper bound on ||U||_inf, so the
    # rescaled parameter is rigorously inside
    Q = smat(sol.x[model.n_u:], model.layout.nb)
    cert = certified_bound_from_q(U, Q, bound)
    if cert > bound:
        U = U * ((bound - 1e-9) / cert)
        info["rescaled_from"] = cert
    return U, model.phi_of(U), info


def golden_section_minimize(fn: Callable[[float], float], lo: float, hi: float,
                            tol: float, max_iters: int = 200
                            ) -> Tuple[float, float]:
    """Golden-section minimizer for unimodal fn on [lo, hi]; ties go left."""
    invphi = (np.sqrt(5.0) - 1.0) / 2.0
    a, b = lo, hi
    x1 = b - invphi * (b - a)
    x2 = a + invphi * (b - a)
    f1, f2 = fn(x1), fn(x2)
    best_x, best_f = (x1, f1) if f1 <= f2 else (x2, f2)
    for endpoint in (a, b):
        fe = fn(endpoint)
        if fe < best_f:
            best_x, best_f = endpoint, fe
    it = 0
    while b - a > tol and it < max_iters:
        if f1 <= f2:
            b, x2, f2 = x2, x1, f1
            x1 = b - invphi * (b - a)
            f1 = fn(x1)
        else:
            a, x1, f1 = x1, x2, f2
            x2 = a + invphi * (b - a)
            f2 = fn(x2)
        for x, f in ((x1, f1), (x2, f2)):
            if f < best_f or (f == best_f and x < best_x):
                best_x, best_f = x, f
        it += 1
    return best_x, best_f


def golden_section(G_hat: FirTm, cfg: SynthesisConfig) -> SynthesisResult:
    """Outer search over gamma of phi(gamma) / (1 - eps*gamma).

    gamma runs over [0, min(alpha, (1 - 1e-6)/eps)]: beyond alpha the inner
    feasible set stops growing while the outer factor keeps increasing, so
    no minimizer lives there.  Probes are memoized on min(gamma, alpha).
    """
    model = _InnerModel(G_hat, cfg)
    eps = cfg.eps
    hi = min(cfg.alpha, (1.0 - 1e-6) / eps)
    tol = cfg.gamma_tol if cfg.gamma_tol is not None else 1e-3 * hi
    cache: Dict[float, Tuple[FirTm, float]] = {}
    n_probes = [0]

    def phi(gamma: float) -> Tuple[FirTm, float]:
        key = min(gamma, cfg.alpha)
        if key not in cache:
            U, val, info = inner_solve(G_hat, cfg, gamma, model=model)
            if info["status"] == "max_iters":
                import warnings
                warnings.warn(
                    f"inner solve at gamma={gamma:.4g} hit max_iters "
                    f"(residuals still {info['status']})", stacklevel=2)
            cache[key] = (U, val)
            n_probes[0] += 1
        return cache[key]

    def psi(gamma: float) -> float:
        return phi(gamma)[1] / (1.0 - eps * gamma)

    gamma_star, psi_star = golden_section_minimize(psi, 0.0, hi, tol)
    U_star, phi_star = phi(gamma_star)
    quad = responses_from_u(G_hat, U_star)
    return SynthesisResult(
        gamma_star=float(gamma_star),
        responses=quad,
        certified_bound=float(psi_star),
        h_value=model.h,
        phi_star=float(phi_star),
        diagnostics={
            "probes": n_probes[0], "L_u": cfg.L_u, "eps": eps,
            "alpha": cfg.alpha, "gamma_upper": hi, "gamma_tol": tol,
            "g_hat_hinf": hinf_norm_sdp(G_hat),
            "unconstrained_norm": model.unconstrained_norm,
        })


# ---------------------------------------------------------------------------
# Controller realization


@dataclass(frozen=True)
class FirFeedbackController:
    """Executable realization of K = U Y^-1 as the loop u = U (y - G_hat u).

    Well-posed because G_hat is strictly proper: u_t depends on y_0..y_t and
    u_0..u_{t-1} only.  to_statespace() yields the equivalent shift-register
    realization (controllable canonical form for both FIR blocks).
    """

    U: FirTm
    G_hat: FirTm

    def __post_init__(self):
        if np.any(self.G_hat.coeffs[0] != 0.0):
            raise ValueError("ill-posed feedthrough: model block G_0 must be 0")
        if (self.U.p, self.U.m) != (self.G_hat.m, self.G_hat.p):
            raise DimensionError("controller/model dimensions inconsistent")

    @property
    def m(self) -> int:
        return self.U.p

    @property
    def p(self) -> int:
        return self.U.m

    def to_statespace(self) -> ControllerSS:
        U, G = self.U, self.G_hat
        m, p = self.m, self.p
        ns = (U.L - 1) * p   # buffer of s = y - G u
        ng = (G.L - 1) * m   # buffer of past u
        n = ns + ng
        if n == 0:
            return ControllerSS(np.zeros((1, 1)), np.zeros((1, p)),
                                np.zeros((m, 1)), U.coeffs[0])
        # row maps from the state to s_t and u_t
        s_row = np.zeros((p, n))
        for j in range(1, G.L):
            s_row[:, ns + (j - 1) * m: ns + j * m] = -G.coeffs[j]
        u_row = np.zeros((m, n))
        for k in range(1, U.L):
            u_row[:, (k - 1) * p: k * p] = U.coeffs[k]
        u_row += U.coeffs[0] @ s_row
        D_k = U.coeffs[0]  # u_t = u_row @ xi + U_0 y_t
        C_k = u_row

        A_k = np.zeros((n, n))
        B_k = np.zeros((n, p))
        if ns:
            A_k[0:p, :] = s_row
            B_k[0:p, :] = np.eye(p)
            if U.L > 2:
                A_k[p:ns, 0:ns - p] = np.eye(ns - p)
        if ng:
            A_k[ns:ns + m, :] = u_row
            B_k[ns:ns + m, :] = D_k
            if G.L > 2:
                A_k[ns + m:, ns:n - m] = np.eye(ng - m)
        return ControllerSS(A_k, B_k, C_k, D_k)


def realize_controller(U: FirTm, G_hat: FirTm) -> FirFeedbackController:
    """Wrap the synthesis output into an executable feedback controller."""
    return FirFeedbackController(U=U, G_hat=G_hat)
