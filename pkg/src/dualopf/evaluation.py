"""Test-split metrics: cost, grouped violations, feasibility rate, load mismatch, timing."""
from __future__ import annotations

import csv
import io
import json
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .case_io import NetworkModel
from .neural import Checkpoint, forward
from .opf_model import (
    NGTLayout,
    SplitLayout,
    compute_z2,
    evaluate_point,
    generator_outputs,
    inequality_h,
    load_bus_part,
    objective,
    pf_problem,
    reconstructed_loads,
    violation_nu,
)
from .powerflow import PowerFlowError, solve

SCHEMA_VERSION = 1
FEAS_TOL = 1e-6
BLOCKS = ("Pg", "Qg", "V", "S2")


class ZeroLoadNorm(ValueError):
    pass


class LayoutMismatch(ValueError):
    pass


def feasibility_rate(h_batch, tol: float = FEAS_TOL, sentinel=None) -> float:
    """Percentage of real (non-sentinel) constraint entries with h <= tol, pooled over samples."""
    h = np.atleast_2d(np.asarray(h_batch, dtype=float))
    if sentinel is not None:
        h = h[:, ~np.asarray(sentinel)]
    if h.size == 0:
        return 100.0
    return 100.0 * np.count_nonzero(h <= tol) / h.size


def grouped_violations(nu_batch, layout: SplitLayout) -> dict:
    """Mean and max of the violation vector per block over all samples."""
    nu = np.atleast_2d(np.asarray(nu_batch, dtype=float))
    out = {}
    for name in BLOCKS:
        idx = layout.blocks[name]
        idx = idx[~layout.sentinel[idx]]
        b = nu[:, idx]
        out[name] = {"mean": float(b.mean()) if b.size else 0.0, "max": float(b.max()) if b.size else 0.0}
    return out


def load_mismatch(x_d, xhat_d) -> float:
    x_d = np.asarray(x_d, dtype=float)
    norm = np.linalg.norm(x_d)
    if norm == 0:
        raise ZeroLoadNorm("load vector has zero norm")
    return 100.0 * float(np.linalg.norm(x_d - np.asarray(xhat_d)) / norm)


def nominal_averages(network: NetworkModel, pg=None, vg=None, solver: str = "nr") -> dict:
    """Per-unit block averages at nominal load for a reference dispatch.

    Defaults to the dispatch stored in the case file (Pg and Vg of each unit).
    """
    layout = SplitLayout(network)
    pg = network.pg0[:-1] if pg is None else pg
    vg = network.vg0 if vg is None else vg
    y = np.concatenate([pg, vg, [0.0]])
    point, sol = evaluate_point(layout, network.nominal_load, y, solver)
    pg_all, qg_all = generator_outputs(layout, point.y, point.z2)
    s2 = point.z2[network.n_gen + 2:][network.constrained]
    return {
        "Pg": float(np.mean(pg_all)),
        "Qg": float(np.mean(qg_all)),
        "V": float(np.mean(sol.v)),
        "S2": float(np.mean(s2)) if s2.size else 0.0,
    }


@dataclass
class MetricsReport:
    n_samples: int
    pf_failures: int
    cost_mean: float
    cost_scaled_mean: float
    nu_mean: float
    nu_max: float
    groups: dict
    feasibility_rate: float
    load_mismatch_pct: float
    load_mismatch_sq: float  # mean squared p.u. norm, the quantity the NGT loss penalizes
    timing: dict
    metadata: dict = field(default_factory=dict)
    samples: dict | None = None

    def metrics_dict(self) -> dict:
        """Deterministic part of the report (everything except timing and raw samples)."""
        return {
            "n_samples": self.n_samples,
            "pf_failures": self.pf_failures,
            "cost_mean": self.cost_mean,
            "cost_scaled_mean": self.cost_scaled_mean,
            "nu_mean": self.nu_mean,
            "nu_max": self.nu_max,
            "groups": self.groups,
            "feasibility_rate": self.feasibility_rate,
            "load_mismatch_pct": self.load_mismatch_pct,
        }

    def to_json(self) -> dict:
        d = asdict(self)
        d["schema_version"] = SCHEMA_VERSION
        return d

    @classmethod
    def from_json(cls, d: dict) -> "MetricsReport":
        d = dict(d)
        d.pop("schema_version", None)
        return cls(**d)


def _check_layout(ck: Checkpoint, layout: SplitLayout):
    dim_x, _, dim_y = ck.params.shape
    want_y = 2 * layout.net.n_bus if ck.kind == "ngt" else layout.dim_y
    if dim_x != layout.dim_x or dim_y != want_y:
        raise LayoutMismatch(f"checkpoint dims (x={dim_x}, y={dim_y}) do not match network "
                             f"(x={layout.dim_x}, y={want_y})")


def evaluate_model(ck: Checkpoint, layout: SplitLayout, x_batch, solver: str = "nr", config=None,
                   keep_samples: bool = True) -> MetricsReport:
    """Flat-start inference over ``x_batch`` and metric assembly."""
    _check_layout(ck, layout)
    cfg = config.__dict__ if config is not None and hasattr(config, "__dict__") else (config or ck.config or {})
    cost_scale = cfg.get("cost_scale", 1e-4)
    pf_tol = cfg.get("pf_tol", 1e-5)
    feas_tol = cfg.get("feas_tol", FEAS_TOL)
    net = layout.net
    x_batch = np.atleast_2d(x_batch)

    if ck.kind == "ngt":
        head = NGTLayout(layout, cfg.get("ngt_angle_band", 0.5))
    else:
        head = layout
    t0 = time.perf_counter()
    trace = forward(ck.params, ck.scaler(x_batch), head.y_lo, head.y_hi)
    t_forward = time.perf_counter() - t0

    ys, z1s, z2s, hs, costs, mism, mism_sq = [], [], [], [], [], [], []
    t_pf = t_z2 = 0.0
    failures = 0
    for x, out in zip(x_batch, trace.y):
        if ck.kind == "ngt":
            t1 = time.perf_counter()
            y, z1, z2, xhat_d = head.reconstruct(x, out)
            t_z2 += time.perf_counter() - t1
        else:
            y = out
            t1 = time.perf_counter()
            try:
                sol = solve(pf_problem(layout, x, y), solver, tol=pf_tol)
            except PowerFlowError:
                sol = None
            t_pf += time.perf_counter() - t1
            if sol is None or not sol.converged:
                failures += 1
                continue
            t1 = time.perf_counter()
            z1 = layout.z1_from_state(sol.v, sol.theta)
            z2 = compute_z2(layout, x, sol.v, sol.theta)
            t_z2 += time.perf_counter() - t1
            xhat_d = load_bus_part(layout, reconstructed_loads(layout, y, z2, sol.v, sol.theta))
        h = inequality_h(layout, y, z1, z2)
        ys.append(y)
        z1s.append(z1)
        z2s.append(z2)
        hs.append(h)
        costs.append(objective(layout, y, z2))
        x_d = load_bus_part(layout, x)
        mism.append(load_mismatch(x_d, xhat_d))
        mism_sq.append(float(np.sum((x_d - xhat_d) ** 2)))

    n_ok = len(hs)
    h_arr = np.array(hs).reshape(n_ok, layout.dim_h)
    nu_real = violation_nu(h_arr[:, ~layout.sentinel])
    count = len(x_batch)
    report = MetricsReport(
        n_samples=count,
        pf_failures=failures,
        cost_mean=float(np.mean(costs)) if costs else float("nan"),
        cost_scaled_mean=float(cost_scale * np.mean(costs)) if costs else float("nan"),
        nu_mean=float(nu_real.mean()) if nu_real.size else 0.0,
        nu_max=float(nu_real.max()) if nu_real.size else 0.0,
        groups=grouped_violations(violation_nu(h_arr), layout),
        feasibility_rate=feasibility_rate(h_arr, feas_tol, layout.sentinel),
        load_mismatch_pct=float(np.mean(mism)) if mism else float("nan"),
        load_mismatch_sq=float(np.mean(mism_sq)) if mism_sq else float("nan"),
        timing={
            "per_sample": {"forward_s": t_forward / count, "pf_s": t_pf / count, "z2_s": t_z2 / count,
                           "total_s": (t_forward + t_pf + t_z2) / count},
            "test_set": {"forward_s": t_forward, "pf_s": t_pf, "z2_s": t_z2, "total_s": t_forward + t_pf + t_z2},
        },
        metadata={
            "case_checksum": net.checksum,
            "checkpoint_checksum": ck.case_checksum,
            "kind": ck.kind,
            "solver": solver if ck.kind != "ngt" else None,
            "seed": ck.seed,
            "config": dict(cfg),
            "feasibility_tol": feas_tol,
            "cost_units": "raw case units (polynomial coefficients applied to MW); "
                          f"cost_scaled_mean = cost_mean * {cost_scale}",
        },
    )
    if keep_samples:
        report.samples = {"x": x_batch.tolist(), "y": [a.tolist() for a in ys], "z1": [a.tolist() for a in z1s],
                          "z2": [a.tolist() for a in z2s], "h": h_arr.tolist()}
    return report


def evaluate(checkpoint: Checkpoint, network: NetworkModel, dataset, solver: str = "nr",
             split: str = "test", keep_samples: bool = True) -> MetricsReport:
    layout = SplitLayout(network)
    idx = getattr(dataset, split)
    return evaluate_model(checkpoint, layout, dataset.x[idx], solver, None, keep_samples)


def method_label(report: dict) -> str:
    meta = report.get("metadata", {})
    cfg = meta.get("config", {})
    loss = cfg.get("loss", meta.get("kind", "?"))
    if loss == "dual":
        return f"{(meta.get('solver') or 'nr').upper()}-Dual"
    if loss == "dc3":
        return f"DC3 (lambda={cfg.get('lam')})"
    if loss == "ngt":
        return f"NGT (eta={cfg.get('eta')}, tau={cfg.get('tau')})"
    return str(loss)


REPORT_COLUMNS = ("method", "cost", "nu_mean_1e-6", "nu_max_1e-4", "feasibility_pct", "load_mismatch_pct",
                  "time_test_set_s", "time_per_sample_s", "case_checksum")


def merge_reports(reports: list[dict]) -> str:
    """Comparison table (CSV text) with one row per evaluation report."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(REPORT_COLUMNS)
    for r in reports:
        w.writerow([
            method_label(r),
            r["cost_mean"],
            r["nu_mean"] * 1e6,
            r["nu_max"] * 1e4,
            r["feasibility_rate"],
            r["load_mismatch_pct"],
            r["timing"]["test_set"]["total_s"],
            r["timing"]["per_sample"]["total_s"],
            r["metadata"].get("case_checksum", ""),
        ])
    return buf.getvalue()


def report_csv(report: dict) -> str:
    """Flatten one report, including per-block violations, into CSV rows."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("metric", "value"))
    for k, v in report.items():
        if isinstance(v, (int, float)):
            w.writerow((k, v))
    for name, g in report.get("groups", {}).items():
        w.writerow((f"nu_mean_{name}", g["mean"]))
        w.writerow((f"nu_max_{name}", g["max"]))
    return buf.getvalue()


def load_report(path) -> dict:
    with open(path) as fh:
        return json.load(fh)
