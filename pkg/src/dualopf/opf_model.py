"""Variable split, recovery of dependent variables, objective and inequality vector.

Layouts (per-unit throughout):

* ``x``  = [Pd (all buses); Qd (all buses)]
* ``y``  = [Pg at PV buses; V at PV buses; V_ref; theta_ref]
* ``z1`` = [theta at PV; theta at PQ; V at PQ]   (power-flow unknown order)
* ``z2`` = [Pg_ref; Qg_ref; Qg at PV buses; |S_from|^2 per branch]
* ``h``  = [S^2 - Smax^2 (M); V - Vmax (N); Vmin - V (N);
            Pg - Pgmax; Pgmin - Pg; Qg - Qgmax; Qgmin - Qg]
  where each generator sub-block lists the PV units then the reference unit.

``h`` is affine in (y, z1, z2), so its Jacobians are constant and stored on
the layout.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .case_io import NetworkModel
from .powerflow import (
    NotConverged,
    PFProblem,
    PFSolution,
    injection_derivatives,
    power_injections,
    solve,
)

SENTINEL = -1e6


def apply_box(beta, lo, hi):
    """Map beta in [0, 1] onto [lo, hi]; beta=1 gives lo, beta=0 gives hi."""
    return beta * lo + (1.0 - beta) * hi


def violation_nu(h):
    return np.maximum(h, 0.0)


class SplitLayout:
    """Dimensions, boxes and index maps of the variable split for one network."""

    def __init__(self, net: NetworkModel):
        self.net = net
        n, m, ng = net.n_bus, net.n_branch, net.n_gen
        nd = len(net.pq)
        self.dim_x = 2 * n
        self.dim_y = 2 * ng + 2
        self.dim_z1 = 2 * nd + ng
        self.dim_z2 = ng + m + 2
        self.dim_h = m + 2 * n + 4 * (ng + 1)

        self.y_lo = np.concatenate([net.pg_min[:-1], net.v_min[net.pv], [net.v_min[net.slack], 0.0]])
        self.y_hi = np.concatenate([net.pg_max[:-1], net.v_max[net.pv], [net.v_max[net.slack], 0.0]])

        ids = net.bus_ids
        self.x_slots = [("Pd", int(b)) for b in ids] + [("Qd", int(b)) for b in ids]
        self.y_slots = ([("Pg", int(ids[b])) for b in net.pv] + [("V", int(ids[b])) for b in net.pv]
                        + [("V", int(ids[net.slack])), ("theta", int(ids[net.slack]))])
        self.z1_slots = ([("theta", int(ids[b])) for b in net.pv] + [("theta", int(ids[b])) for b in net.pq]
                         + [("V", int(ids[b])) for b in net.pq])
        gen_ids = [int(ids[b]) for b in net.gen_bus]
        self.z2_slots = ([("Pg", gen_ids[-1]), ("Qg", gen_ids[-1])] + [("Qg", g) for g in gen_ids[:-1]]
                         + [("S2", k) for k in range(m)])
        self.h_slots = ([("S2max", k) for k in range(m)] + [("Vmax", int(b)) for b in ids]
                        + [("Vmin", int(b)) for b in ids] + [("Pgmax", g) for g in gen_ids]
                        + [("Pgmin", g) for g in gen_ids] + [("Qgmax", g) for g in gen_ids]
                        + [("Qgmin", g) for g in gen_ids])

        g1 = ng + 1
        off_v = m
        off_g = m + 2 * n
        self.blocks = {
            "S2": np.arange(0, m),
            "V": np.arange(off_v, off_v + 2 * n),
            "Pg": np.arange(off_g, off_g + 2 * g1),
            "Qg": np.arange(off_g + 2 * g1, off_g + 4 * g1),
        }
        self.sentinel = np.zeros(self.dim_h, dtype=bool)
        self.sentinel[:m] = ~net.constrained
        self._build_affine_h()

    def _build_affine_h(self):
        net = self.net
        n, m, ng = net.n_bus, net.n_branch, net.n_gen
        g1 = ng + 1
        nh = self.dim_h
        hy = np.zeros((nh, self.dim_y))
        hz1 = np.zeros((nh, self.dim_z1))
        hz2 = np.zeros((nh, self.dim_z2))
        h0 = np.zeros(nh)

        con = net.constrained
        rows = np.arange(m)
        hz2[rows[con], ng + 2 + rows[con]] = 1.0
        h0[:m] = np.where(con, -net.s_max ** 2, SENTINEL)

        # which vector holds V of each bus
        v_y = {b: ng + k for k, b in enumerate(net.pv)}
        v_y[net.slack] = 2 * ng
        v_z1 = {b: len(net.pv) + len(net.pq) + k for k, b in enumerate(net.pq)}
        for sign, off, lim in ((1.0, m, -net.v_max), (-1.0, m + n, net.v_min)):
            for b in range(n):
                r = off + b
                if b in v_y:
                    hy[r, v_y[b]] = sign
                else:
                    hz1[r, v_z1[b]] = sign
                h0[r] = lim[b]

        off = m + 2 * n
        # Pg: PV units from y, reference unit from z2[0]
        for sign, base, lim in ((1.0, off, -net.pg_max), (-1.0, off + g1, net.pg_min)):
            for k in range(ng):
                hy[base + k, k] = sign
            hz2[base + ng, 0] = sign
            h0[base:base + g1] = lim
        # Qg: PV units from z2[2:], reference unit from z2[1]
        for sign, base, lim in ((1.0, off + 2 * g1, -net.qg_max), (-1.0, off + 3 * g1, net.qg_min)):
            for k in range(ng):
                hz2[base + k, 2 + k] = sign
            hz2[base + ng, 1] = sign
            h0[base:base + g1] = lim
        self.h_y, self.h_z1, self.h_z2, self.h0 = hy, hz1, hz2, h0

    @cached_property
    def yf_dense(self):
        return self.net.yf.toarray()

    def split_y(self, y):
        ng = self.net.n_gen
        return y[:ng], y[ng:2 * ng + 1], y[-1]

    def full_state(self, y, z1):
        """Voltage magnitudes and angles of all buses from (y, z1)."""
        net = self.net
        npv, npq = len(net.pv), len(net.pq)
        v = np.empty(net.n_bus)
        theta = np.empty(net.n_bus)
        _, vg, th_ref = self.split_y(y)
        v[net.gen_bus] = vg
        v[net.pq] = z1[npv + npq:]
        theta[net.slack] = th_ref
        theta[net.pv] = z1[:npv]
        theta[net.pq] = z1[npv:npv + npq]
        return v, theta

    def z1_from_state(self, v, theta):
        net = self.net
        return np.concatenate([theta[net.pv], theta[net.pq], v[net.pq]])

    def y_from_state(self, pg, v, theta):
        net = self.net
        return np.concatenate([pg, v[net.pv], [v[net.slack], theta[net.slack]]])


@dataclass
class DecisionPoint:
    x: np.ndarray
    y: np.ndarray
    z1: np.ndarray
    z2: np.ndarray


def pf_problem(layout: SplitLayout, x, y) -> PFProblem:
    net = layout.net
    n = net.n_bus
    pd, qd = x[:n], x[n:]
    pg, vg, th_ref = layout.split_y(y)
    p_inj = np.concatenate([pg - pd[net.pv], -pd[net.pq]])
    return PFProblem(net, p_inj, -qd[net.pq], np.asarray(vg, dtype=float), float(th_ref))


def recover_z1(layout: SplitLayout, x, y, solver: str = "nr", start=None, tol: float = 1e-5,
               max_iter: int | None = None) -> tuple[np.ndarray, PFSolution]:
    """Solve the power flow fixed by (x, y) and return z1 with the raw solution.

    Raises NotConverged when the solver gives up.
    """
    problem = pf_problem(layout, x, y)
    sol = solve(problem, solver, start=start, tol=tol, max_iter=max_iter)
    if not sol.converged:
        raise NotConverged(sol)
    return layout.z1_from_state(sol.v, sol.theta), sol


def branch_flows_from(layout: SplitLayout, v, theta) -> np.ndarray:
    """Complex from-side branch flows S_f = V_f conj(Yf V) using branch primitives."""
    net = layout.net
    vc = v * np.exp(1j * theta)
    return vc[net.f_bus] * np.conj(net.yf @ vc)


def compute_z2(layout: SplitLayout, x, v, theta) -> np.ndarray:
    net = layout.net
    n = net.n_bus
    pd, qd = x[:n], x[n:]
    s = power_injections(net, v, theta)
    sf = branch_flows_from(layout, v, theta)
    sl = net.slack
    return np.concatenate([
        [s.real[sl] + pd[sl], s.imag[sl] + qd[sl]],
        s.imag[net.pv] + qd[net.pv],
        sf.real ** 2 + sf.imag ** 2,
    ])


def state_derivatives(layout: SplitLayout, v, theta):
    """Dense derivatives of bus injections and |S_f|^2 w.r.t. all angles and magnitudes.

    Returns (s, ds_dth, ds_dv, dsf2_dth, dsf2_dv); the first three complex.
    """
    net = layout.net
    s, ds_dth, ds_dv = injection_derivatives(net, v, theta)
    ds_dth, ds_dv = ds_dth.toarray(), ds_dv.toarray()
    vc = v * np.exp(1j * theta)
    yf = layout.yf_dense
    i_f = yf @ vc
    vf = vc[net.f_bus]
    sf = vf * np.conj(i_f)
    m = net.n_branch
    dvf_dth = np.zeros((m, net.n_bus), dtype=complex)
    dvf_dv = np.zeros((m, net.n_bus), dtype=complex)
    dvf_dth[np.arange(m), net.f_bus] = 1j * vf
    dvf_dv[np.arange(m), net.f_bus] = vf / v[net.f_bus]
    dsf_dth = np.conj(i_f)[:, None] * dvf_dth + vf[:, None] * np.conj(yf * (1j * vc)[None, :])
    dsf_dv = np.conj(i_f)[:, None] * dvf_dv + vf[:, None] * np.conj(yf * (vc / v)[None, :])
    dsf2_dth = 2.0 * (sf.real[:, None] * dsf_dth.real + sf.imag[:, None] * dsf_dth.imag)
    dsf2_dv = 2.0 * (sf.real[:, None] * dsf_dv.real + sf.imag[:, None] * dsf_dv.imag)
    return s, ds_dth, ds_dv, dsf2_dth, dsf2_dv


def z2_derivatives(layout: SplitLayout, v, theta, derivs=None):
    """Partial Jacobians (dz2/dz1, dz2/dy) holding the other block fixed."""
    net = layout.net
    _, ds_dth, ds_dv, dsf2_dth, dsf2_dv = derivs if derivs is not None else state_derivatives(layout, v, theta)
    sl = net.slack
    dz2_dth = np.vstack([ds_dth[[sl]].real, ds_dth[[sl]].imag, ds_dth[net.pv].imag, dsf2_dth])
    dz2_dv = np.vstack([ds_dv[[sl]].real, ds_dv[[sl]].imag, ds_dv[net.pv].imag, dsf2_dv])
    dz2_dz1 = np.hstack([dz2_dth[:, net.pv], dz2_dth[:, net.pq], dz2_dv[:, net.pq]])
    dz2_dy = np.hstack([np.zeros((layout.dim_z2, net.n_gen)), dz2_dv[:, net.gen_bus], dz2_dth[:, [sl]]])
    return dz2_dz1, dz2_dy


def generator_outputs(layout: SplitLayout, y, z2):
    """Pg and Qg of every unit, PV units first then the reference unit."""
    ng = layout.net.n_gen
    pg = np.concatenate([y[:ng], z2[:1]])
    qg = np.concatenate([z2[2:2 + ng], z2[1:2]])
    return pg, qg


def objective(layout: SplitLayout, y, z2) -> float:
    """Total generation cost in the case's native units (coefficients act on MW)."""
    pg, _ = generator_outputs(layout, y, z2)
    p = pg * layout.net.base_mva
    c = layout.net.cost_coeffs
    return float(np.sum(c[:, 0] * p * p + c[:, 1] * p + c[:, 2]))


def objective_gradient(layout: SplitLayout, y, z2):
    """(d cost/dy, d cost/dz2) with Pg in per unit."""
    net = layout.net
    pg, _ = generator_outputs(layout, y, z2)
    base = net.base_mva
    c = net.cost_coeffs
    dpg = (2.0 * c[:, 0] * pg * base + c[:, 1]) * base
    gy = np.zeros(layout.dim_y)
    gy[:net.n_gen] = dpg[:-1]
    gz2 = np.zeros(layout.dim_z2)
    gz2[0] = dpg[-1]
    return gy, gz2


def inequality_h(layout: SplitLayout, y, z1, z2) -> np.ndarray:
    net = layout.net
    m, n = net.n_branch, net.n_bus
    v, _ = layout.full_state(y, z1)
    pg, qg = generator_outputs(layout, y, z2)
    s2 = z2[net.n_gen + 2:]
    branch = np.where(net.constrained, s2 - net.s_max ** 2, SENTINEL)
    return np.concatenate([
        branch,
        v - net.v_max,
        net.v_min - v,
        pg - net.pg_max,
        net.pg_min - pg,
        qg - net.qg_max,
        net.qg_min - qg,
    ])


def reconstructed_loads(layout: SplitLayout, y, z2, v, theta) -> np.ndarray:
    """Loads implied at every bus by the generator outputs and the voltage state."""
    net = layout.net
    s = power_injections(net, v, theta)
    pg, qg = generator_outputs(layout, y, z2)
    pg_bus = np.zeros(net.n_bus)
    qg_bus = np.zeros(net.n_bus)
    pg_bus[net.gen_bus] = pg
    qg_bus[net.gen_bus] = qg
    return np.concatenate([pg_bus - s.real, qg_bus - s.imag])


def load_bus_part(layout: SplitLayout, xfull) -> np.ndarray:
    """Restrict an all-bus [P; Q] vector to the load (PQ) buses."""
    n = layout.net.n_bus
    pq = layout.net.pq
    return np.concatenate([xfull[:n][pq], xfull[n:][pq]])


def evaluate_point(layout: SplitLayout, x, y, solver: str = "nr", start=None, tol: float = 1e-5):
    """Recover z1, z2 for (x, y); returns (DecisionPoint, PFSolution)."""
    z1, sol = recover_z1(layout, x, y, solver, start=start, tol=tol)
    z2 = compute_z2(layout, x, sol.v, sol.theta)
    return DecisionPoint(x, y, z1, z2), sol


class NGTLayout:
    """Output head of the all-bus voltage predictor (V and theta of every bus)."""

    def __init__(self, split: SplitLayout, angle_band: float = 0.5):
        net = split.net
        self.split = split
        self.net = net
        n = net.n_bus
        th_lo = np.full(n, -angle_band)
        th_hi = np.full(n, angle_band)
        th_lo[net.slack] = th_hi[net.slack] = 0.0
        self.dim_x = 2 * n
        self.dim_y = 2 * n
        self.y_lo = np.concatenate([net.v_min, th_lo])
        self.y_hi = np.concatenate([net.v_max, th_hi])

    def reconstruct(self, x, out, derivs=None):
        """Split quantities and load estimate from predicted (V, theta).

        Returns (y, z1, z2, xhat_d) with xhat_d over PQ buses.
        """
        net = self.net
        n = net.n_bus
        v, theta = out[:n], out[n:]
        s = derivs[0] if derivs is not None else power_injections(net, v, theta)
        pd, qd = x[:n], x[n:]
        pg = s.real[net.pv] + pd[net.pv]
        y = self.split.y_from_state(pg, v, theta)
        z1 = self.split.z1_from_state(v, theta)
        z2 = compute_z2(self.split, x, v, theta)
        xhat_d = np.concatenate([-s.real[net.pq], -s.imag[net.pq]])
        return y, z1, z2, xhat_d
