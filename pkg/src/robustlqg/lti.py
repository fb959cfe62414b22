"""State-space / FIR transfer-matrix algebra, simulation, and norms.

Everything downstream (identification, synthesis, evaluation) consumes the
types and operations in this module.  All types are immutable value objects;
all operations are pure functions, safe to call from concurrent workers.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np


class DimensionError(ValueError):
    """Matrix/signal dimensions are inconsistent."""


class DivergenceError(RuntimeError):
    """Simulated state exceeded the overflow guard (closed loop unstable)."""


class StabilityError(ValueError):
    """An operation required a Schur-stable matrix (spectral radius < 1)."""


_OVERFLOW_GUARD = 1e12


def _as_matrix(M, name: str) -> np.ndarray:
    M = np.atleast_2d(np.asarray(M, dtype=float))
    if M.ndim != 2:
        raise DimensionError(f"{name} must be a matrix, got ndim={M.ndim}")
    if not np.all(np.isfinite(M)):
        raise ValueError(f"{name} contains non-finite entries")
    return M


def _freeze(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class StateSpace:
    """Strictly proper discrete-time LTI plant x+ = A x + B u, y = C x."""

    A: np.ndarray
    B: np.ndarray
    C: np.ndarray

    def __post_init__(self):
        A = _as_matrix(self.A, "A")
        B = _as_matrix(self.B, "B")
        C = _as_matrix(self.C, "C")
        if A.shape[0] != A.shape[1]:
            raise DimensionError(f"A must be square, got {A.shape}")
        if B.shape[0] != A.shape[0]:
            raise DimensionError(f"B rows {B.shape[0]} != state dim {A.shape[0]}")
        if C.shape[1] != A.shape[0]:
            raise DimensionError(f"C cols {C.shape[1]} != state dim {A.shape[0]}")
        object.__setattr__(self, "A", _freeze(A))
        object.__setattr__(self, "B", _freeze(B))
        object.__setattr__(self, "C", _freeze(C))

    @property
    def n(self) -> int:
        return self.A.shape[0]

    @property
    def m(self) -> int:
        return self.B.shape[1]

    @property
    def p(self) -> int:
        return self.C.shape[0]

    def check_stable(self) -> "StateSpace":
        rho = spectral_radius(self.A)
        if rho >= 1.0:
            raise StabilityError(f"spectral radius {rho:.6g} >= 1")
        return self

    def to_json(self) -> str:
        return json.dumps(
            {"A": self.A.tolist(), "B": self.B.tolist(), "C": self.C.tolist()}
        )

    @staticmethod
    def from_json(s: str) -> "StateSpace":
        d = json.loads(s)
        return StateSpace(np.array(d["A"]), np.array(d["B"]), np.array(d["C"]))


@dataclass(frozen=True)
class ControllerSS:
    """Dynamic output-feedback controller xi+ = A_k xi + B_k y, u = C_k xi + D_k y."""

    A_k: np.ndarray
    B_k: np.ndarray
    C_k: np.ndarray
    D_k: np.ndarray

    def __post_init__(self):
        A = _as_matrix(self.A_k, "A_k")
        B = _as_matrix(self.B_k, "B_k")
        C = _as_matrix(self.C_k, "C_k")
        D = _as_matrix(self.D_k, "D_k")
        if A.shape[0] != A.shape[1]:
            raise DimensionError("A_k must be square")
        if B.shape[0] != A.shape[0] or C.shape[1] != A.shape[0]:
            raise DimensionError("controller state dimensions inconsistent")
        if D.shape != (C.shape[0], B.shape[1]):
            raise DimensionError("D_k shape inconsistent with B_k/C_k")
        for name, M in (("A_k", A), ("B_k", B), ("C_k", C), ("D_k", D)):
            object.__setattr__(self, name, _freeze(M))

    @property
    def q(self) -> int:
        return self.A_k.shape[0]

    @staticmethod
    def zero(m: int, p: int) -> "ControllerSS":
        """The K = 0 controller (one dummy state, all-zero maps)."""
        return ControllerSS(
            np.zeros((1, 1)), np.zeros((1, p)), np.zeros((m, 1)), np.zeros((m, p))
        )


@dataclass(frozen=True)
class FirTm:
    """Finite-impulse-response transfer matrix sum_k coeffs[k] z^-k.

    coeffs has shape (L, p, m); the ordering is delay-major.  The
    strictly_proper flag asserts coeffs[0] == 0 exactly.
    """

    coeffs: np.ndarray
    strictly_proper: bool = False

    def __post_init__(self):
        c = np.asarray(self.coeffs, dtype=float)
        if c.ndim == 1:
            c = c.reshape(-1, 1, 1)
        if c.ndim != 3:
            raise DimensionError(f"coeffs must be (L, p, m), got shape {c.shape}")
        if c.shape[0] < 1:
            raise DimensionError("horizon L must be >= 1")
        if not np.all(np.isfinite(c)):
            raise ValueError("coefficients contain non-finite entries")
        if self.strictly_proper and np.any(c[0] != 0.0):
            raise ValueError("strictly_proper set but leading coefficient nonzero")
        object.__setattr__(self, "coeffs", _freeze(c))

    @property
    def L(self) -> int:
        return self.coeffs.shape[0]

    @property
    def p(self) -> int:
        return self.coeffs.shape[1]

    @property
    def m(self) -> int:
        return self.coeffs.shape[2]

    @staticmethod
    def identity(p: int) -> "FirTm":
        return FirTm(np.eye(p)[None, :, :])

    @staticmethod
    def zero(p: int, m: int, L: int = 1) -> "FirTm":
        return FirTm(np.zeros((L, p, m)), strictly_proper=True)

    @staticmethod
    def from_blocks(blocks: Sequence[np.ndarray], strictly_proper: bool = False) -> "FirTm":
        return FirTm(np.stack([np.atleast_2d(np.asarray(b, float)) for b in blocks]),
                     strictly_proper=strictly_proper)

    def block(self, k: int) -> np.ndarray:
        return self.coeffs[k]

    def truncate(self, L: int) -> "FirTm":
        """Keep the first L coefficients (zero-pad when L exceeds the horizon)."""
        if L <= self.L:
            c = self.coeffs[:L]
        else:
            c = np.concatenate(
                [self.coeffs, np.zeros((L - self.L, self.p, self.m))], axis=0
            )
        return FirTm(c, strictly_proper=self.strictly_proper)

    def __add__(self, other: "FirTm") -> "FirTm":
        if (self.p, self.m) != (other.p, other.m):
            raise DimensionError("FIR addition shape mismatch")
        L = max(self.L, other.L)
        c = np.zeros((L, self.p, self.m))
        c[: self.L] += self.coeffs
        c[: other.L] += other.coeffs
        return FirTm(c)

    def __sub__(self, other: "FirTm") -> "FirTm":
        return self + (other * -1.0)

    def __mul__(self, scalar: float) -> "FirTm":
        return FirTm(self.coeffs * float(scalar),
                     strictly_proper=self.strictly_proper)

    __rmul__ = __mul__

    def to_json(self) -> str:
        return json.dumps(
            {"coeffs": self.coeffs.tolist(), "strictly_proper": self.strictly_proper}
        )

    @staticmethod
    def from_json(s: str) -> "FirTm":
        d = json.loads(s)
        return FirTm(np.array(d["coeffs"]), strictly_proper=d["strictly_proper"])


@dataclass(frozen=True)
class LqgWeights:
    """Quadratic output/input weights and the three noise scales.

    Defaults Q = I, R = I, sigma_w = sigma_v = 1 follow the standard
    normalization; sigma_u is the identification excitation scale.
    """

    Q: Optional[np.ndarray] = None
    R: Optional[np.ndarray] = None
    sigma_w: float = 1.0
    sigma_v: float = 1.0
    sigma_u: float = 1.0

    def __post_init__(self):
        for name in ("sigma_w", "sigma_v", "sigma_u"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")
        for name, lower in (("Q", 0.0), ("R", 1e-14)):
            M = getattr(self, name)
            if M is None:
                continue
            M = _as_matrix(M, name)
            if not np.allclose(M, M.T, atol=1e-10):
                raise ValueError(f"{name} must be symmetric")
            if np.min(np.linalg.eigvalsh(M)) < (lower if lower else -1e-12):
                raise ValueError(f"{name} violates its definiteness requirement")
            object.__setattr__(self, name, _freeze(0.5 * (M + M.T)))

    def q_matrix(self, p: int) -> np.ndarray:
        return np.eye(p) if self.Q is None else self.Q

    def r_matrix(self, m: int) -> np.ndarray:
        return np.eye(m) if self.R is None else self.R

    def q_sqrt(self, p: int) -> np.ndarray:
        return _psd_sqrt(self.q_matrix(p))

    def r_sqrt(self, m: int) -> np.ndarray:
        return _psd_sqrt(self.r_matrix(m))


def _psd_sqrt(M: np.ndarray) -> np.ndarray:
    w, V = np.linalg.eigh(M)
    return (V * np.sqrt(np.clip(w, 0.0, None))) @ V.T


@dataclass(frozen=True)
class Trajectory:
    """Recorded input-output run, with the hidden states and noises kept for replay."""

    u: np.ndarray
    y: np.ndarray
    x: Optional[np.ndarray] = None
    w: Optional[np.ndarray] = None
    v: Optional[np.ndarray] = None
    seed: int = 0

    def __post_init__(self):
        u = np.asarray(self.u, float)
        y = np.asarray(self.y, float)
        if u.ndim != 2 or y.ndim != 2 or u.shape[0] != y.shape[0]:
            raise DimensionError("u and y must be (horizon, dim) with equal horizon")
        object.__setattr__(self, "u", _freeze(u))
        object.__setattr__(self, "y", _freeze(y))
        for name in ("x", "w", "v"):
            a = getattr(self, name)
            if a is not None:
                a = np.asarray(a, float)
                if a.shape[0] != u.shape[0]:
                    raise DimensionError(f"{name} horizon mismatch")
                object.__setattr__(self, name, _freeze(a))

    @property
    def horizon(self) -> int:
        return self.u.shape[0]

    def to_csv(self) -> str:
        m, p = self.u.shape[1], self.y.shape[1]
        header = "t," + ",".join(f"u_{i}" for i in range(m)) \
            + "," + ",".join(f"y_{i}" for i in range(p))
        lines = [header]
        for t in range(self.horizon):
            vals = [str(t)] + [repr(z) for z in self.u[t]] + [repr(z) for z in self.y[t]]
            lines.append(",".join(vals))
        return "\n".join(lines) + "\n"

    @staticmethod
    def from_csv(text: str) -> "Trajectory":
        lines = [ln for ln in text.strip().splitlines() if ln]
        cols = lines[0].split(",")
        m = sum(c.startswith("u_") for c in cols)
        p = sum(c.startswith("y_") for c in cols)
        data = np.array([[float(z) for z in ln.split(",")] for ln in lines[1:]])
        return Trajectory(u=data[:, 1:1 + m], y=data[:, 1 + m:1 + m + p])


# ---------------------------------------------------------------------------
# FIR / state-space operations


def markov_parameters(ss: StateSpace, L: int) -> FirTm:
    """First L impulse-response coefficients [0, CB, CAB, ..., CA^{L-2}B]."""
    if L < 1:
        raise ValueError("L must be >= 1")
    coeffs = np.zeros((L, ss.p, ss.m))
    Ak_B = ss.B
    for k in range(1, L):
        coeffs[k] = ss.C @ Ak_B
        Ak_B = ss.A @ Ak_B
    return FirTm(coeffs, strictly_proper=True)


def fir_convolve(F: FirTm, G: FirTm, truncate: Optional[int] = None) -> FirTm:
    """FIR product: H_k = sum_{i+j=k} F_i G_j, horizon L_F + L_G - 1.

    truncate caps the output horizon (used by Neumann-series constructions).
    """
    if F.m != G.p:
        raise DimensionError(f"inner dimensions mismatch: {F.m} vs {G.p}")
    L_out = F.L + G.L - 1
    if truncate is not None:
        L_out = min(L_out, truncate)
    # (L_F, p, r) x (L_G, r, m) -> full convolution along the delay axis
    H = np.zeros((L_out, F.p, G.m))
    for i in range(min(F.L, L_out)):
        jmax = min(G.L, L_out - i)
        H[i:i + jmax] += np.einsum("pr,jrm->jpm", F.coeffs[i], G.coeffs[:jmax])
    sp = F.strictly_proper or G.strictly_proper
    return FirTm(H, strictly_proper=sp)


def h2_norm(G: FirTm, left: Optional[np.ndarray] = None,
            right: Optional[np.ndarray] = None) -> float:
    """H2 norm sqrt(sum_k ||G_k||_F^2) (Parseval).

    left/right pre/post multiply every coefficient before summing; pass the
    weight square roots (Q^{1/2}, R^{1/2}) and sigma scalings this way.
    """
    c = G.coeffs
    if left is not None:
        c = np.einsum("ap,kpm->kam", np.atleast_2d(left), c)
    if right is not None:
        c = np.einsum("kpm,mb->kpb", c, np.atleast_2d(right))
    return float(np.sqrt(np.sum(c * c)))


def freq_response(G: FirTm, omegas: np.ndarray) -> np.ndarray:
    """Frequency response G(e^{j w}) = sum_k G_k e^{-j w k}, shape (n_w, p, m)."""
    omegas = np.asarray(omegas, dtype=float)
    phases = np.exp(-1j * np.outer(omegas, np.arange(G.L)))
    return np.einsum("wk,kpm->wpm", phases, G.coeffs.astype(complex))


def hinf_norm_grid(G: FirTm, n_grid: Optional[int] = None) -> float:
    """Max largest singular value over a uniform frequency grid.

    A lower bound on the true H-inf norm; the SDP version certifies it from
    above.  Default grid max(1024, 16 L).
    """
    if n_grid is None:
        n_grid = max(1024, 16 * G.L)
    if n_grid < 2 * G.L:
        raise ValueError(f"n_grid={n_grid} < 2L={2 * G.L} undersamples the response")
    omegas = np.linspace(0.0, 2.0 * np.pi, n_grid, endpoint=False)
    resp = freq_response(G, omegas)
    return float(np.max(np.linalg.svd(resp, compute_uv=False)))


def spectral_radius(A: np.ndarray) -> float:
    """Maximum eigenvalue modulus (general eigensolve, handles complex pairs)."""
    A = _as_matrix(A, "A")
    if A.shape[0] != A.shape[1]:
        raise DimensionError("spectral_radius needs a square matrix")
    return float(np.max(np.abs(np.linalg.eigvals(A))))


def phi_margin(A: np.ndarray, tau_max: Optional[int] = None) -> float:
    """Lower estimate of Phi(A) = sup_tau ||A^tau|| / rho(A)^tau.

    Maximizes over tau = 0..tau_max; default tau_max = 10 n / (1 - rho)
    capped at 1e5.  Exact Phi requires an unbounded sup, so this is
    documented as a lower estimate.  rho(A) = 0 returns 1.
    """
    A = _as_matrix(A, "A")
    rho = spectral_radius(A)
    if rho >= 1.0:
        raise StabilityError("phi_margin requires spectral radius < 1")
    if rho == 0.0:
        return 1.0
    n = A.shape[0]
    if tau_max is None:
        tau_max = min(int(np.ceil(10.0 * n / (1.0 - rho))), 100_000)
    # iterate M_tau = A^tau / rho^tau to avoid underflow of both factors
    M = np.eye(n)
    best = 1.0
    A_over_rho = A / rho
    for _ in range(tau_max):
        M = A_over_rho @ M
        best = max(best, float(np.linalg.norm(M, 2)))
    return best


def fir_truncation_horizon(ss: StateSpace, rel_tol: float = 1e-8,
                           cap: int = 100_000) -> int:
    """Horizon L such that the geometric tail bound falls below rel_tol.

    The tail of the impulse response beyond L is bounded by
    Phi ||C|| ||B|| rho^L / (1 - rho); L is the smallest integer with
    rho^L <= rel_tol, so the tail is <= rel_tol times the total geometric
    mass Phi ||C|| ||B|| / (1 - rho).
    """
    rho = spectral_radius(ss.A)
    if rho >= 1.0:
        raise StabilityError("tail horizon requires a stable plant")
    if rho == 0.0:
        return ss.n + 1
    L = int(np.ceil(np.log(rel_tol) / np.log(rho)))
    return max(ss.n + 1, min(L, cap))


def fir_to_statespace(G: FirTm) -> StateSpace:
    """Shift-register realization of a strictly proper FIR (nilpotent A)."""
    if not np.all(G.coeffs[0] == 0.0):
        raise ValueError("fir_to_statespace requires a strictly proper FIR")
    L, p, m = G.L, G.p, G.m
    nbuf = max(L - 1, 1)
    n = nbuf * m
    A = np.zeros((n, n))
    if nbuf > 1:
        A[m:, :-m] = np.eye((nbuf - 1) * m)
    B = np.zeros((n, m))
    B[:m, :] = np.eye(m)
    C = np.zeros((p, n))
    for k in range(1, L):
        C[:, (k - 1) * m: k * m] = G.coeffs[k]
    return StateSpace(A, B, C)


# ---------------------------------------------------------------------------
# Simulation


def _controller_matrices(controller) -> ControllerSS:
    if controller is None:
        raise ValueError("no controller")
    if isinstance(controller, ControllerSS):
        return controller
    if hasattr(controller, "to_statespace"):
        return controller.to_statespace()
    raise TypeError(f"unsupported controller type {type(controller)!r}")


def replay(ss: StateSpace, w: np.ndarray, v: np.ndarray,
           controller=None, seed: int = 0) -> Trajectory:
    """Exact recursion of the plant/controller loop under given noise records.

    x+ = A x + B u, y = C x + v, u = pi(y_0..y_t) + w with pi = 0 in open
    loop.  x_0 = 0.  Raises DivergenceError past the 1e12 state guard.
    """
    w = np.atleast_2d(np.asarray(w, float))
    v = np.atleast_2d(np.asarray(v, float))
    horizon = w.shape[0]
    if v.shape[0] != horizon:
        raise DimensionError("w and v horizons differ")
    if w.shape[1] != ss.m or v.shape[1] != ss.p:
        raise DimensionError("noise dimensions do not match the plant")
    ctrl = _controller_matrices(controller) if controller is not None else None

    x = np.zeros(ss.n)
    xi = np.zeros(ctrl.q) if ctrl is not None else None
    us = np.zeros((horizon, ss.m))
    ys = np.zeros((horizon, ss.p))
    xs = np.zeros((horizon, ss.n))
    for t in range(horizon):
        xs[t] = x
        y = ss.C @ x + v[t]
        if ctrl is not None:
            pi = ctrl.C_k @ xi + ctrl.D_k @ y
            xi = ctrl.A_k @ xi + ctrl.B_k @ y
        else:
            pi = np.zeros(ss.m)
        u = pi + w[t]
        x = ss.A @ x + ss.B @ u
        if np.linalg.norm(x) > _OVERFLOW_GUARD:
            raise DivergenceError(f"state norm exceeded {_OVERFLOW_GUARD:g} at t={t}")
        us[t], ys[t] = u, y
    return Trajectory(u=us, y=ys, x=xs, w=w, v=v, seed=seed)


def simulate(ss: StateSpace, horizon: int, weights: Optional[LqgWeights] = None,
             controller=None, seed: int = 0) -> Trajectory:
    """Simulate the loop for `horizon` steps with i.i.d. Gaussian noises.

    Noise scales come from weights (sigma_w on the input, sigma_v on the
    output); the generator is seeded, never global.
    """
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    weights = weights or LqgWeights()
    rng = np.random.default_rng(seed)
    w = weights.sigma_w * rng.standard_normal((horizon, ss.m))
    v = weights.sigma_v * rng.standard_normal((horizon, ss.p))
    return replay(ss, w, v, controller=controller, seed=seed)
