"""Newton-Raphson and fast-decoupled AC power flow.

Unknown ordering everywhere in this module: angles at PV buses, angles at PQ
buses, magnitudes at PQ buses (each block bus-index ascending). Residuals use
the same ordering: dP at PV, dP at PQ, dQ at PQ.
"""
from __future__ import annotations

import weakref
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from .case_io import NetworkModel, assemble_ybus

PIVOT_TOL = 1e-12
DEFAULT_TOL = 1e-5
NR_MAX_ITER = 30
FDPF_MAX_ITER = 100


class PowerFlowError(RuntimeError):
    pass


class SingularJacobian(PowerFlowError):
    pass


class SingularDecoupledMatrix(PowerFlowError):
    pass


class NotConverged(PowerFlowError):
    def __init__(self, solution: "PFSolution"):
        super().__init__(
            f"power flow did not converge after {solution.iterations} iterations "
            f"(residual {solution.residual_norm:.3e})"
        )
        self.solution = solution


class NotConvergedInput(PowerFlowError):
    pass


@dataclass(frozen=True)
class PFProblem:
    """Injections and setpoints for one power-flow solve.

    ``p_injection`` is ordered (PV..., PQ...), ``q_injection`` over PQ buses and
    ``v_setpoint`` over (PV..., slack), matching ``network.gen_bus``.
    """

    network: NetworkModel
    p_injection: np.ndarray
    q_injection: np.ndarray
    v_setpoint: np.ndarray
    theta_ref: float = 0.0

    def __post_init__(self):
        net = self.network
        if len(self.p_injection) != len(net.pv) + len(net.pq):
            raise ValueError("p_injection must cover PV and PQ buses")
        if len(self.q_injection) != len(net.pq):
            raise ValueError("q_injection must cover PQ buses")
        if len(self.v_setpoint) != len(net.gen_bus):
            raise ValueError("v_setpoint must cover PV buses and the slack bus")

    def flat_start(self) -> tuple[np.ndarray, np.ndarray]:
        net = self.network
        v = np.ones(net.n_bus)
        v[net.gen_bus] = self.v_setpoint
        theta = np.full(net.n_bus, float(self.theta_ref))
        return v, theta

    def pin(self, v: np.ndarray, theta: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Copy of (v, theta) with setpoint entries forced to the problem values."""
        v = np.array(v, dtype=float)
        theta = np.array(theta, dtype=float)
        v[self.network.gen_bus] = self.v_setpoint
        theta[self.network.slack] = self.theta_ref
        return v, theta


@dataclass(frozen=True)
class PFSolution:
    v: np.ndarray
    theta: np.ndarray
    iterations: int
    residual_norm: float
    converged: bool
    factorizations: int = 0


@dataclass(frozen=True)
class PFJacobian:
    matrix: sp.csc_matrix
    ordering: tuple = ("theta_pv", "theta_pq", "v_pq")


def power_injections(net: NetworkModel, v, theta) -> np.ndarray:
    """Complex injections S_i = V_i conj(sum_j Y_ij V_j)."""
    vc = v * np.exp(1j * theta)
    return vc * np.conj(net.ybus @ vc)


class _Pattern:
    """Sparsity of Ybus (diagonal always present) and Jacobian scatter maps."""

    def __init__(self, net: NetworkModel):
        n = net.n_bus
        struct = sp.csr_matrix(net.ybus + sp.identity(n, format="csr") * 1.0)
        struct.sum_duplicates()
        struct.sort_indices()
        coo = struct.tocoo()
        self.rows, self.cols = coo.row, coo.col
        self.indices, self.indptr = struct.indices, struct.indptr
        self.y = np.asarray(net.ybus[self.rows, self.cols]).ravel()
        self.diag = self.rows == self.cols
        self.n = n

        pos_p = np.full(n, -1)
        pos_p[net.pvpq] = np.arange(len(net.pvpq))
        pos_q = np.full(n, -1)
        pos_q[net.pq] = len(net.pvpq) + np.arange(len(net.pq))
        blocks = []  # (entry index, row, col) for dP/dth, dP/dv, dQ/dth, dQ/dv
        for prow, pcol in ((pos_p, pos_p), (pos_p, pos_q), (pos_q, pos_p), (pos_q, pos_q)):
            k = np.flatnonzero((prow[self.rows] >= 0) & (pcol[self.cols] >= 0))
            blocks.append((k, prow[self.rows[k]], pcol[self.cols[k]]))
        self.blocks = [b[0] for b in blocks]
        dim = len(net.pvpq) + len(net.pq)
        rows = np.concatenate([b[1] for b in blocks])
        cols = np.concatenate([b[2] for b in blocks])
        tag = sp.csc_matrix((np.arange(1, len(rows) + 1, dtype=float), (rows, cols)), shape=(dim, dim))
        self.j_perm = tag.data.astype(int) - 1
        self.j_indices, self.j_indptr, self.j_dim = tag.indices, tag.indptr, dim

    def matrix(self, vals) -> sp.csr_matrix:
        return sp.csr_matrix((vals, self.indices, self.indptr), shape=(self.n, self.n))


_PATTERNS: "weakref.WeakKeyDictionary[NetworkModel, _Pattern]" = weakref.WeakKeyDictionary()


def _pattern(net: NetworkModel) -> _Pattern:
    pat = _PATTERNS.get(net)
    if pat is None:
        pat = _PATTERNS[net] = _Pattern(net)
    return pat


def _derivative_values(net: NetworkModel, v, theta):
    pat = _pattern(net)
    vc = v * np.exp(1j * theta)
    ibus = net.ybus @ vc
    r, c = pat.rows, pat.cols
    cross = vc[r] * np.conj(pat.y * vc[c])
    ds_dth = -1j * cross
    ds_dv = cross / v[c]
    d = pat.diag
    ds_dth[d] += 1j * vc[r[d]] * np.conj(ibus[r[d]])
    ds_dv[d] += np.conj(ibus[r[d]]) * vc[r[d]] / v[r[d]]
    return vc * np.conj(ibus), ds_dth, ds_dv


def injection_derivatives(net: NetworkModel, v, theta):
    """Return (S, dS/dtheta, dS/dv) with the derivatives as complex sparse N x N matrices."""
    s, ds_dth, ds_dv = _derivative_values(net, v, theta)
    pat = _pattern(net)
    return s, pat.matrix(ds_dth), pat.matrix(ds_dv)


def residuals(problem: PFProblem, v, theta) -> np.ndarray:
    net = problem.network
    s = power_injections(net, v, theta)
    dp = problem.p_injection - s.real[net.pvpq]
    dq = problem.q_injection - s.imag[net.pq]
    return np.concatenate([dp, dq])


def _pattern_values(pat: _Pattern, a) -> np.ndarray:
    """Entries of ``a`` on the Ybus pattern, in pattern order."""
    if sp.issparse(a):
        if a.nnz == len(pat.rows) and np.array_equal(a.indices, pat.indices):
            return a.data
        a = a.toarray()
    a = np.asarray(a)
    return a if a.ndim == 1 else a[pat.rows, pat.cols]


def _jacobian_from(net: NetworkModel, ds_dth, ds_dv) -> sp.csc_matrix:
    pat = _pattern(net)
    k11, k12, k21, k22 = pat.blocks
    th = _pattern_values(pat, ds_dth)
    dv = _pattern_values(pat, ds_dv)
    data = -np.concatenate([th[k11].real, dv[k12].real, th[k21].imag, dv[k22].imag])
    return sp.csc_matrix((data[pat.j_perm], pat.j_indices, pat.j_indptr), shape=(pat.j_dim, pat.j_dim))


def jacobian(problem: PFProblem, v, theta) -> PFJacobian:
    """Analytic d(residuals)/d(unknowns)."""
    _, ds_dth, ds_dv = injection_derivatives(problem.network, v, theta)
    return PFJacobian(_jacobian_from(problem.network, ds_dth, ds_dv))


def _factor(matrix: sp.spmatrix, err):
    try:
        lu = splu(sp.csc_matrix(matrix))
    except RuntimeError as exc:
        raise err(str(exc)) from exc
    if matrix.shape[0] and np.min(np.abs(lu.U.diagonal())) < PIVOT_TOL:
        raise err(f"pivot below {PIVOT_TOL}")
    return lu


def _split_unknowns(net: NetworkModel, v, theta, dx):
    npvpq = len(net.pv) + len(net.pq)
    theta[net.pvpq] += dx[:npvpq]
    v[net.pq] += dx[npvpq:]


def solve_nr(problem: PFProblem, start=None, tol: float = DEFAULT_TOL,
             max_iter: int = NR_MAX_ITER) -> PFSolution:
    """Full Newton-Raphson with a sparse LU solve each iteration.

    Returns a solution with ``converged=False`` (best state seen) when the
    iteration limit is hit or the iterate blows up.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    net = problem.network
    v, theta = problem.pin(*start) if start is not None else problem.flat_start()
    best = None
    factorizations = 0
    for it in range(max_iter + 1):
        f = residuals(problem, v, theta)
        norm = float(np.linalg.norm(f))
        if not np.isfinite(norm):
            break
        if best is None or norm < best[0]:
            best = (norm, v.copy(), theta.copy(), it)
        if norm < tol:
            return PFSolution(v, theta, it, norm, True, factorizations)
        if it == max_iter:
            break
        _, ds_dth, ds_dv = _derivative_values(net, v, theta)
        lu = _factor(_jacobian_from(net, ds_dth, ds_dv), SingularJacobian)
        factorizations += 1
        _split_unknowns(net, v, theta, lu.solve(-f))
    if best is None:
        return PFSolution(v, theta, max_iter, float("inf"), False, factorizations)
    norm, bv, bt, it = best
    return PFSolution(bv, bt, max_iter, norm, False, factorizations)


class FDPFFactors:
    """Factored B' (XB scheme) and B'' for one network. Built once, then reused."""

    builds = 0

    def __init__(self, net: NetworkModel):
        n = net.n_bus
        zeros = np.zeros(net.n_branch)
        ones = np.ones(net.n_branch)
        # B': reactances only, no charging, taps, shifts or shunts
        yb_p, _, _ = assemble_ybus(n, net.f_bus, net.t_bus, 1.0 / (1j * net.x), zeros, ones, zeros, np.zeros(n))
        # B'': full susceptance without phase shifters
        yb_pp, _, _ = assemble_ybus(n, net.f_bus, net.t_bus, net.series_y, net.charging_b, net.tap, zeros,
                                    net.gs + 1j * net.bs)
        pvpq, pq = net.pvpq, net.pq
        self.b_p = sp.csc_matrix(-yb_p.imag[pvpq][:, pvpq])
        self.b_pp = sp.csc_matrix(-yb_pp.imag[pq][:, pq])
        self.lu_p = _factor(self.b_p, SingularDecoupledMatrix)
        self.lu_pp = _factor(self.b_pp, SingularDecoupledMatrix) if len(pq) else None
        type(self).builds += 1


_FDPF_CACHE: "weakref.WeakKeyDictionary[NetworkModel, FDPFFactors]" = weakref.WeakKeyDictionary()


def fdpf_factors(net: NetworkModel) -> tuple[FDPFFactors, bool]:
    """Cached factors for ``net``; second item tells whether they were built now."""
    fac = _FDPF_CACHE.get(net)
    if fac is not None:
        return fac, False
    fac = FDPFFactors(net)
    _FDPF_CACHE[net] = fac
    return fac, True


def solve_fdpf(problem: PFProblem, start=None, tol: float = DEFAULT_TOL,
               max_iter: int = FDPF_MAX_ITER) -> PFSolution:
    """Fast decoupled power flow, XB variant, with constant cached factors."""
    if tol <= 0:
        raise ValueError("tol must be positive")
    net = problem.network
    fac, built = fdpf_factors(net)
    v, theta = problem.pin(*start) if start is not None else problem.flat_start()
    pvpq, pq = net.pvpq, net.pq
    npvpq = len(pvpq)

    def mismatch():
        s = power_injections(net, v, theta)
        return np.concatenate([problem.p_injection - s.real[pvpq], problem.q_injection - s.imag[pq]])

    f = mismatch()
    norm = float(np.linalg.norm(f))
    best = (norm, v.copy(), theta.copy())
    nfac = 2 if built else 0
    if norm < tol:
        return PFSolution(v, theta, 0, norm, True, nfac)
    for it in range(1, max_iter + 1):
        theta[pvpq] += fac.lu_p.solve(f[:npvpq] / v[pvpq])
        f = mismatch()
        norm = float(np.linalg.norm(f))
        if not np.isfinite(norm):
            break
        if norm < tol:
            return PFSolution(v, theta, it, norm, True, nfac)
        if fac.lu_pp is not None:
            v[pq] += fac.lu_pp.solve(f[npvpq:] / v[pq])
            f = mismatch()
            norm = float(np.linalg.norm(f))
            if not np.isfinite(norm):
                break
        if norm < best[0]:
            best = (norm, v.copy(), theta.copy())
        if norm < tol:
            return PFSolution(v, theta, it, norm, True, nfac)
    return PFSolution(best[1], best[2], max_iter, best[0], False, nfac)


def solve(problem: PFProblem, solver: str = "nr", start=None, tol: float = DEFAULT_TOL,
          max_iter: int | None = None) -> PFSolution:
    if solver == "nr":
        return solve_nr(problem, start, tol, max_iter or NR_MAX_ITER)
    if solver == "fdpf":
        return solve_fdpf(problem, start, tol, max_iter or FDPF_MAX_ITER)
    raise ValueError(f"unknown solver {solver!r}")


def _dense(a):
    return a.toarray() if sp.issparse(a) else np.asarray(a)


def setpoint_derivatives(net: NetworkModel, ds_dth, ds_dv) -> np.ndarray:
    """d(residuals)/d(controls) with controls (P at PV, V at PV, V at slack, theta_ref)."""
    pvpq, pq, slack = net.pvpq, net.pq, net.slack
    npv, npvpq = len(net.pv), len(pvpq)
    out = np.zeros((npvpq + len(pq), 2 * npv + 2))
    out[np.arange(npv), np.arange(npv)] = 1.0
    cols_v = _dense(ds_dv)[:, net.gen_bus]
    out[:npvpq, npv:2 * npv + 1] = -cols_v[pvpq].real
    out[npvpq:, npv:2 * npv + 1] = -cols_v[pq].imag
    col_t = _dense(ds_dth)[:, slack]
    out[:npvpq, -1] = -col_t[pvpq].real
    out[npvpq:, -1] = -col_t[pq].imag
    return out


def sensitivity(problem: PFProblem, solution: PFSolution, derivs=None) -> np.ndarray:
    """d(unknowns)/d(controls) at a converged solution by the implicit function theorem.

    Columns follow :func:`setpoint_derivatives`: P injections at PV buses,
    V setpoints at PV buses, V at the slack bus, theta_ref. ``derivs`` may carry
    precomputed (S, dS/dtheta, dS/dv) at the solution.
    """
    if not solution.converged:
        raise NotConvergedInput("sensitivity needs a converged power-flow solution")
    net = problem.network
    if derivs is None:
        _, ds_dth, ds_dv = injection_derivatives(net, solution.v, solution.theta)
    else:
        _, ds_dth, ds_dv = derivs[:3]
    lu = _factor(_jacobian_from(net, ds_dth, ds_dv), SingularJacobian)
    return -lu.solve(setpoint_derivatives(net, ds_dth, ds_dv))
