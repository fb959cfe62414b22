"""First-order (ADMM) solver for convex QPs over products of cones.

Problem form:  minimize 1/2 x'Px + q'x  subject to  Ax + s = b,  s in K,
with K an ordered product of zero, nonnegative, second-order and PSD cones.
Symmetric matrix blocks travel in scaled vectorization (off-diagonals x
sqrt(2)) so Euclidean projections are exact.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import lru_cache
from typing import List, Optional, Sequence, Tuple

import numpy as np
import scipy.linalg
import scipy.sparse as sp
from scipy.sparse.linalg import splu

_SQRT2 = np.sqrt(2.0)


class SolverError(RuntimeError):
    """Numerical failure inside the cone solver (diagnostics attached)."""

    def __init__(self, message: str, diagnostics: Optional[dict] = None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


# ---------------------------------------------------------------------------
# Symmetric vectorization


def svec_dim(side: int) -> int:
    return side * (side + 1) // 2


@lru_cache(maxsize=None)
def svec_indices(side: int) -> Tuple[np.ndarray, np.ndarray]:
    """Upper-triangle (row, col) pairs in column-major order."""
    rows, cols = [], []
    for j in range(side):
        for i in range(j + 1):
            rows.append(i)
            cols.append(j)
    r, c = np.array(rows), np.array(cols)
    r.setflags(write=False)
    c.setflags(write=False)
    return r, c


@lru_cache(maxsize=None)
def _svec_scale(side: int) -> np.ndarray:
    r, c = svec_indices(side)
    s = np.where(r == c, 1.0, _SQRT2)
    s.setflags(write=False)
    return s


def svec(M: np.ndarray) -> np.ndarray:
    side = M.shape[0]
    r, c = svec_indices(side)
    return M[r, c] * _svec_scale(side)


def smat(v: np.ndarray, side: int) -> np.ndarray:
    r, c = svec_indices(side)
    M = np.zeros((side, side))
    vals = np.asarray(v, float) / _svec_scale(side)
    M[r, c] = vals
    M[c, r] = vals
    return M


# ---------------------------------------------------------------------------
# Cones and projections


def _project_psd_fast(S: np.ndarray) -> np.ndarray:
    # assumes S symmetric; hot path of the ADMM projection step
    w, V = scipy.linalg.eigh(S, check_finite=False)
    if w[0] >= 0.0:
        return S
    pos = w > 0.0
    if not np.any(pos):
        return np.zeros_like(S)
    Vp = V[:, pos] * w[pos]
    return Vp @ V[:, pos].T


def project_psd(M: np.ndarray) -> np.ndarray:
    """Nearest PSD matrix in Frobenius norm (eigenvalue clamp)."""
    M = np.asarray(M, float)
    asym = np.max(np.abs(M - M.T)) if M.size else 0.0
    if asym > 1e-6:
        raise ValueError(f"matrix is not symmetric (max asymmetry {asym:.3g})")
    return _project_psd_fast(0.5 * (M + M.T))


def project_soc(v: np.ndarray) -> np.ndarray:
    """Projection onto the second-order cone {(t, u): ||u|| <= t}."""
    v = np.asarray(v, float)
    if v.size == 0:
        return v.copy()
    t, u = v[0], v[1:]
    nu = float(np.linalg.norm(u))
    if nu <= t:
        return v.copy()
    if nu <= -t:
        return np.zeros_like(v)
    w = np.empty_like(v)
    coef = 0.5 * (t + nu)
    w[0] = coef
    w[1:] = coef * (u / nu) if nu > 0 else 0.0
    return w


@dataclass(frozen=True)
class ConeBlock:
    """One factor of the cone product; for 'psd', size is the matrix side."""

    kind: str
    size: int

    def __post_init__(self):
        if self.kind not in ("zero", "nonneg", "soc", "psd"):
            raise ValueError(f"unknown cone kind {self.kind!r}")
        if self.size < 1:
            raise ValueError("cone size must be positive")

    @property
    def rows(self) -> int:
        return svec_dim(self.size) if self.kind == "psd" else self.size

    def project(self, v: np.ndarray) -> np.ndarray:
        if self.kind == "zero":
            return np.zeros_like(v)
        if self.kind == "nonneg":
            return np.clip(v, 0.0, None)
        if self.kind == "soc":
            return project_soc(v)
        return svec(_project_psd_fast(smat(v, self.size)))

    def distance(self, v: np.ndarray) -> float:
        return float(np.linalg.norm(v - self.project(v)))


# ---------------------------------------------------------------------------
# Problem / solution containers


def _to_csc(M, shape=None) -> sp.csc_matrix:
    if sp.issparse(M):
        return M.tocsc()
    M = np.atleast_2d(np.asarray(M, float))
    if shape is not None and M.shape != shape:
        raise ValueError(f"expected shape {shape}, got {M.shape}")
    return sp.csc_matrix(M)


@dataclass(frozen=True)
class ConeProblem:
    """Quadratic objective with affine-plus-cone constraints."""

    P: sp.csc_matrix
    q: np.ndarray
    A: sp.csc_matrix
    b: np.ndarray
    cones: Tuple[ConeBlock, ...]

    def __post_init__(self):
        q = np.asarray(self.q, float).ravel()
        n = q.size
        P = _to_csc(self.P)
        if P.shape != (n, n):
            raise ValueError(f"P shape {P.shape} inconsistent with q ({n})")
        sym_err = abs(P - P.T).max() if P.nnz else 0.0
        if sym_err > 1e-10 * max(1.0, abs(P).max()):
            raise ValueError(f"P is not symmetric (max asymmetry {sym_err:.3g})")
        if n <= 400:
            wmin = float(np.linalg.eigvalsh(P.toarray()).min()) if P.nnz else 0.0
            if wmin < -1e-10 * max(1.0, abs(P).max()):
                raise ValueError(f"P is not PSD (min eigenvalue {wmin:.3g})")
        A = _to_csc(self.A)
        b = np.asarray(self.b, float).ravel()
        cones = tuple(self.cones)
        m_rows = sum(c.rows for c in cones)
        if A.shape != (m_rows, n):
            raise ValueError(
                f"A shape {A.shape} inconsistent with cones ({m_rows}) / q ({n})")
        if b.size != m_rows:
            raise ValueError("b length inconsistent with cone rows")
        object.__setattr__(self, "P", P)
        object.__setattr__(self, "q", q)
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "b", b)
        object.__setattr__(self, "cones", cones)

    @property
    def n(self) -> int:
        return self.q.size

    @property
    def m_rows(self) -> int:
        return self.b.size

    def cone_slices(self) -> List[Tuple[ConeBlock, slice]]:
        out, at = [], 0
        for c in self.cones:
            out.append((c, slice(at, at + c.rows)))
            at += c.rows
        return out

    def dump_json(self) -> str:
        return json.dumps({
            "P": self.P.toarray().tolist(),
            "q": self.q.tolist(),
            "A": self.A.toarray().tolist(),
            "b": self.b.tolist(),
            "cones": [[c.kind, c.size] for c in self.cones],
        })

    @staticmethod
    def load_json(s: str) -> "ConeProblem":
        d = json.loads(s)
        return ConeProblem(
            P=np.array(d["P"]), q=np.array(d["q"]), A=np.array(d["A"]),
            b=np.array(d["b"]),
            cones=tuple(ConeBlock(k, n) for k, n in d["cones"]))


@dataclass(frozen=True)
class Residuals:
    primal: float
    dual: float
    gap: float

    def max(self) -> float:
        return max(self.primal, self.dual, self.gap)


@dataclass(frozen=True)
class ConeSolution:
    x: np.ndarray
    s: np.ndarray
    y: np.ndarray
    status: str
    residuals: Residuals
    iterations: int
    objective: float


@dataclass(frozen=True)
class SolverOptions:
    tol_primal: float = 1e-6
    tol_dual: float = 1e-6
    tol_gap: float = 1e-6
    max_iters: int = 50_000
    rho: float = 1.0
    sigma: float = 1e-6
    over_relax: float = 1.6
    adapt_interval: int = 25
    rho_min: float = 1e-4
    rho_max: float = 1e4
    check_interval: int = 10
    x0: Optional[np.ndarray] = None
    s0: Optional[np.ndarray] = None
    y0: Optional[np.ndarray] = None


def _project_blocks(prob: ConeProblem, v: np.ndarray) -> np.ndarray:
    out = np.empty_like(v)
    for cone, sl in prob.cone_slices():
        out[sl] = cone.project(v[sl])
    return out


def _factor_kkt(prob: ConeProblem, sigma: float, rho: float):
    n, m = prob.n, prob.m_rows
    if m == 0:
        K = (prob.P + sigma * sp.eye(n, format="csc")).tocsc()
        return splu(K)
    K = sp.bmat(
        [[prob.P + sigma * sp.eye(n), -prob.A.T],
         [-prob.A, -sp.eye(m) / rho]], format="csc")
    return splu(K)


def solve(prob: ConeProblem, opts: Optional[SolverOptions] = None) -> ConeSolution:
    """ADMM iteration with cached KKT factorization and blockwise projections.

    Deterministic given inputs.  Returns status 'optimal' when the scaled
    primal/dual/gap residuals all fall below the configured tolerances,
    'max_iters' otherwise ('infeasible_suspect' on diverging duals).
    """
    opts = opts or SolverOptions()
    n, m = prob.n, prob.m_rows
    P, q, A, b = prob.P, prob.q, prob.A, prob.b
    AT = A.T.tocsc()

    x = np.zeros(n) if opts.x0 is None else np.asarray(opts.x0, float).copy()
    s = np.zeros(m) if opts.s0 is None else np.asarray(opts.s0, float).copy()
    # internal dual sign convention: reported y = -y_int, KKT: Px + q = A' y_int
    y_int = np.zeros(m) if opts.y0 is None else -np.asarray(opts.y0, float)
    rho = opts.rho
    lu = _factor_kkt(prob, opts.sigma, rho)
    alpha = opts.over_relax

    def residuals(xv, sv, yv) -> Residuals:
        Ax = A @ xv if m else np.zeros(0)
        Px = P @ xv
        Aty = AT @ yv if m else np.zeros(n)
        rp = float(np.max(np.abs(Ax + sv - b))) if m else 0.0
        rp /= max(1.0, _inf(Ax), _inf(sv), _inf(b))
        rd = float(np.max(np.abs(Px + q - Aty)))
        rd /= max(1.0, _inf(Px), _inf(q), _inf(Aty))
        obj = 0.5 * float(xv @ Px) + float(q @ xv)
        gap = abs(float(xv @ Px) + float(q @ xv) - float(b @ yv))
        gap /= max(1.0, abs(obj))
        return Residuals(rp, rd, gap)

    status = "max_iters"
    it = 0
    res = residuals(x, s, y_int)
    for it in range(1, opts.max_iters + 1):
        if m:
            rhs = np.concatenate([opts.sigma * x - q, -(b - s + y_int / rho)])
            sol = lu.solve(rhs)
            x_new = sol[:n]
            nu = sol[n:]
            s_tilde = s + (nu - y_int) / rho
            s_r = alpha * s_tilde + (1.0 - alpha) * s
            v = s_r + y_int / rho
            s = _project_blocks(prob, v)
            y_int = y_int + rho * (s_r - s)
            x = x_new
        else:
            x = lu.solve(opts.sigma * x - q)

        if not np.all(np.isfinite(x)) or (m and not np.all(np.isfinite(y_int))):
            raise SolverError("NaN/Inf in ADMM iterates",
                              {"iteration": it, "rho": rho})

        if it % opts.check_interval == 0 or it == opts.max_iters:
            res = residuals(x, s, y_int)
            if (res.primal <= opts.tol_primal and res.dual <= opts.tol_dual
                    and res.gap <= opts.tol_gap):
                status = "optimal"
                break

        if m and opts.adapt_interval and it % opts.adapt_interval == 0:
            res = residuals(x, s, y_int)
            new_rho = rho
            if res.primal > 10.0 * res.dual:
                new_rho = min(rho * 2.0, opts.rho_max)
            elif res.dual > 10.0 * res.primal:
                new_rho = max(rho / 2.0, opts.rho_min)
            if new_rho != rho:
                rho = new_rho
                lu = _factor_kkt(prob, opts.sigma, rho)

    if status == "max_iters" and m and _inf(y_int) > 1e8 and res.primal > 1e-3:
        status = "infeasible_suspect"

    obj = 0.5 * float(x @ (P @ x)) + float(q @ x)
    return ConeSolution(x=x, s=s, y=-y_int, status=status, residuals=res,
                        iterations=it, objective=obj)


def _inf(v: np.ndarray) -> float:
    return float(np.max(np.abs(v))) if v.size else 0.0
