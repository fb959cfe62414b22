"""Certified H-infinity norm of FIR transfer matrices via a trace-band SDP.

The feasibility characterization: ||sum_k U_k z^-k||_inf <= gamma iff there
is a PSD Q with [[Q, Ustack], [Ustack', gamma I]] >= 0 and the block trace
bands of Q summing to gamma I on the main band and 0 elsewhere.  The norm is
computed in a single cone solve minimizing gamma, then repaired into a
rigorous upper bound (band repair + lambda_min inflation), so the returned
value always dominates the true norm and hence every grid evaluation.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np
import scipy.sparse as sp

from .cones import (ConeBlock, ConeProblem, ConeSolution, SolverError,
                    SolverOptions, smat, solve, svec_dim)
from .lti import FirTm

_SQRT2 = np.sqrt(2.0)


def _svec_idx(i: int, j: int) -> int:
    # column-major upper triangle; requires i <= j
    return j * (j + 1) // 2 + i


@dataclass(frozen=True)
class HinfBlockLayout:
    """Index bookkeeping for one H-inf constraint block inside a cone problem."""

    L: int
    r: int
    c: int
    q_offset: int

    @property
    def nb(self) -> int:
        return self.L * self.r

    @property
    def side(self) -> int:
        return self.nb + self.c

    @property
    def n_q_vars(self) -> int:
        return svec_dim(self.nb)

    @property
    def n_eq_rows(self) -> int:
        r = self.r
        return r * (r + 1) // 2 + (self.L - 1) * r * r

    @property
    def n_psd_rows(self) -> int:
        return svec_dim(self.side)


def hinf_constraint_rows(
    layout: HinfBlockLayout,
    u_cols: Optional[np.ndarray] = None,
    u_vals: Optional[np.ndarray] = None,
    gamma_col: Optional[int] = None,
    bound: Optional[float] = None,
) -> Tuple[list, np.ndarray, list, np.ndarray]:
    """Triplets and right-hand sides for the trace-band/PSD constraint pair.

    The FIR coefficients enter either as problem variables (u_cols: (L, r, c)
    array of global column indices) or as data (u_vals); the bound enters
    either as a variable (gamma_col) or as a constant.  Returns
    (eq_triplets, eq_b, psd_triplets, psd_b) with triplets as (row, col, val)
    and rows numbered locally from 0.
    """
    if (u_cols is None) == (u_vals is None):
        raise ValueError("exactly one of u_cols/u_vals expected")
    if (gamma_col is None) == (bound is None):
        raise ValueError("exactly one of gamma_col/bound expected")
    L, r, c, qoff = layout.L, layout.r, layout.c, layout.q_offset
    nb = layout.nb

    eq_trip: list = []
    eq_b = np.zeros(layout.n_eq_rows)
    row = 0
    for k in range(L):
        pairs = ([(a, b) for b in range(r) for a in range(b + 1)] if k == 0
                 else [(a, b) for a in range(r) for b in range(r)])
        for a, b in pairs:
            for j in range(L - k):
                ri = (j + k) * r + a
                cj = j * r + b
                lo, hi = min(ri, cj), max(ri, cj)
                coef = 1.0 if lo == hi else 1.0 / _SQRT2
                eq_trip.append((row, qoff + _svec_idx(lo, hi), coef))
            if k == 0 and a == b:
                if gamma_col is not None:
                    eq_trip.append((row, gamma_col, -1.0))
                else:
                    eq_b[row] = bound
            row += 1

    psd_trip: list = []
    psd_b = np.zeros(layout.n_psd_rows)
    side = layout.side
    for j in range(side):
        for i in range(j + 1):
            prow = _svec_idx(i, j)
            if j < nb:
                # Q region: svec(M) entry equals the matching svec(Q) variable
                psd_trip.append((prow, qoff + _svec_idx(i, j), -1.0))
            elif i < nb:
                col = j - nb
                k, a = divmod(i, r)
                if u_cols is not None:
                    psd_trip.append((prow, int(u_cols[k, a, col]), -_SQRT2))
                else:
                    psd_b[prow] = _SQRT2 * float(u_vals[k, a, col])
            else:
                if i == j:
                    if gamma_col is not None:
                        psd_trip.append((prow, gamma_col, -1.0))
                    else:
                        psd_b[prow] = bound
                # off-diagonal corner entries are zero
    return eq_trip, eq_b, psd_trip, psd_b


def _triplets_to_csc(trip: list, shape: Tuple[int, int]) -> sp.csc_matrix:
    if not trip:
        return sp.csc_matrix(shape)
    rows, cols, vals = zip(*trip)
    return sp.csc_matrix((vals, (rows, cols)), shape=shape)


def certified_bound_from_q(G: FirTm, Q: np.ndarray, gamma: float) -> float:
    """Repair (Q, gamma) into a rigorous upper bound on ||G||_inf.

    Spreads band-sum residuals evenly over each band, then inflates gamma by
    L x max(0, -lambda_min) of the repaired block, which restores exact
    feasibility of the characterization.
    """
    L, r, c = G.L, G.p, G.m
    nb = L * r
    Q = 0.5 * (Q + Q.T)
    Qr = Q.copy()
    for k in range(L):
        S = np.zeros((r, r))
        for j in range(L - k):
            S += Q[(j + k) * r:(j + k + 1) * r, j * r:(j + 1) * r]
        target = gamma * np.eye(r) if k == 0 else np.zeros((r, r))
        err = (S - target) / (L - k)
        for j in range(L - k):
            Qr[(j + k) * r:(j + k + 1) * r, j * r:(j + 1) * r] -= err
            if k > 0:
                Qr[j * r:(j + 1) * r, (j + k) * r:(j + k + 1) * r] -= err.T
    Qr = 0.5 * (Qr + Qr.T)
    stack = G.coeffs.reshape(nb, c)
    M = np.block([[Qr, stack], [stack.T, gamma * np.eye(c)]])
    lam = float(np.linalg.eigvalsh(M)[0])
    return max(0.0, gamma + L * max(0.0, -lam))


def hinf_norm_sdp(G: FirTm, tol: float = 1e-6,
                  opts: Optional[SolverOptions] = None) -> float:
    """Certified H-inf norm of an FIR: smallest feasible gamma, to tolerance.

    Always an upper bound on the true norm (hence on any grid evaluation).
    Raises SolverError with residual diagnostics on nonconvergence.
    """
    val, _ = hinf_norm_sdp_info(G, tol=tol, opts=opts)
    return val


def hinf_norm_sdp_info(G: FirTm, tol: float = 1e-6,
                       opts: Optional[SolverOptions] = None
                       ) -> Tuple[float, Optional[ConeSolution]]:
    if not np.any(G.coeffs):
        return 0.0, None
    layout = HinfBlockLayout(L=G.L, r=G.p, c=G.m, q_offset=0)
    n_vars = layout.n_q_vars + 1
    gamma_col = layout.n_q_vars
    eq_t, eq_b, psd_t, psd_b = hinf_constraint_rows(
        layout, u_vals=G.coeffs, gamma_col=gamma_col)
    n_eq = eq_b.size
    trip = eq_t + [(n_eq + rr, cc, vv) for rr, cc, vv in psd_t]
    A = _triplets_to_csc(trip, (n_eq + psd_b.size, n_vars))
    b = np.concatenate([eq_b, psd_b])
    q = np.zeros(n_vars)
    q[gamma_col] = 1.0
    prob = ConeProblem(P=sp.csc_matrix((n_vars, n_vars)), q=q, A=A, b=b,
                       cones=(ConeBlock("zero", n_eq),
                              ConeBlock("psd", layout.side)))
    if opts is None:
        opts = SolverOptions(tol_primal=tol, tol_dual=tol, tol_gap=tol)
    sol = solve(prob, opts)
    if sol.status not in ("optimal", "max_iters"):
        raise SolverError(
            f"H-inf SDP failed with status {sol.status}",
            {"residuals": sol.residuals, "iterations": sol.iterations})
    if sol.status == "max_iters" and sol.residuals.max() > 1e-3:
        raise SolverError(
            "H-inf SDP did not converge",
            {"residuals": sol.residuals, "iterations": sol.iterations})
    Q = smat(sol.x[:layout.n_q_vars], layout.nb)
    gamma = float(sol.x[gamma_col])
    return certified_bound_from_q(G, Q, gamma), sol
