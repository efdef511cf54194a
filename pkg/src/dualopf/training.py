"""Augmented-Lagrangian training loop, dual updates, datasets and baseline losses."""
from __future__ import annotations

import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .case_io import NetworkModel
from .neural import (
    AdamState,
    Checkpoint,
    MLPParams,
    Scaler,
    Sensitivities,
    adam_step,
    backward,
    chain_total_gradient,
    forward,
    init_params,
)
from .opf_model import (
    NGTLayout,
    SplitLayout,
    compute_z2,
    inequality_h,
    load_bus_part,
    objective,
    objective_gradient,
    recover_z1,
    state_derivatives,
    violation_nu,
    z2_derivatives,
    pf_problem,
)
from .powerflow import PowerFlowError, sensitivity

log = logging.getLogger(__name__)

LOSSES = ("dual", "dc3", "ngt")
AGGREGATES = ("mean", "max")


class TrainingError(RuntimeError):
    pass


class TooManyPFFailures(TrainingError):
    pass


class NonFiniteLoss(TrainingError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 1000
    batch_size: int = 32
    dual_period: int = 10
    alpha: float = 2.0
    loss: str = "dual"
    solver: str = "nr"
    lr: float = 3e-3
    seed: int = 0
    hidden: int | None = None  # None: 50 up to 30 buses, else 100
    lam: float = 1.0  # dc3 weight
    eta: float = 10.0  # ngt weights
    tau: float = 0.5
    ngt_angle_band: float = 0.5
    cost_scale: float = 1e-4  # training-only scaling of the raw cost
    pf_tol: float = 1e-5
    max_fail_fraction: float = 0.01
    feas_tol: float = 1e-6
    threads: int = 1
    dual_aggregate: str = "max"  # how an epoch of h rows is reduced before the dual step

    def validate(self) -> "TrainConfig":
        if self.epochs < 1 or self.batch_size < 1 or self.dual_period < 1:
            raise ValueError("epochs, batch_size and dual_period must be >= 1")
        if self.alpha <= 0:
            raise ValueError("alpha must be positive")
        if self.loss not in LOSSES:
            raise ValueError(f"loss must be one of {LOSSES}")
        if self.dual_aggregate not in AGGREGATES:
            raise ValueError(f"dual_aggregate must be one of {AGGREGATES}")
        if self.solver not in ("nr", "fdpf"):
            raise ValueError("solver must be nr or fdpf")
        if self.lam < 0 or self.eta < 0 or not 0 <= self.tau <= 1:
            raise ValueError("need lam >= 0, eta >= 0, 0 <= tau <= 1")
        return self

    def hidden_for(self, net: NetworkModel) -> int:
        if self.hidden is not None:
            return self.hidden
        return 50 if net.n_bus <= 30 else 100


# ---------------------------------------------------------------- data

@dataclass
class Dataset:
    x: np.ndarray  # (count, 2N) per unit
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray
    seed: int = 0
    case_checksum: str = ""


def split_counts(count: int, ratio=(10, 1, 1)) -> tuple[int, int, int]:
    """Largest-remainder apportionment of ``count`` over ``ratio`` (ties go to the earlier part)."""
    total = sum(ratio)
    quotas = [count * r / total for r in ratio]
    parts = [int(np.floor(q)) for q in quotas]
    left = count - sum(parts)
    order = sorted(range(len(ratio)), key=lambda i: (-(quotas[i] - parts[i]), i))
    for i in order[:left]:
        parts[i] += 1
    return tuple(parts)


def sample_dataset(network: NetworkModel, count: int, seed: int) -> Dataset:
    """Loads drawn uniformly within +-10% of nominal, split 10:1:1."""
    if count < 1:
        raise ValueError("count must be >= 1")
    rng = np.random.default_rng(seed)
    nominal = network.nominal_load
    lo = np.minimum(0.9 * nominal, 1.1 * nominal)
    hi = np.maximum(0.9 * nominal, 1.1 * nominal)
    x = lo + (hi - lo) * rng.random((count, len(nominal)))
    perm = rng.permutation(count)
    n_train, n_val, _ = split_counts(count)
    return Dataset(
        x=x,
        train=np.sort(perm[:n_train]),
        val=np.sort(perm[n_train:n_train + n_val]),
        test=np.sort(perm[n_train + n_val:]),
        seed=seed,
        case_checksum=network.checksum,
    )


# ---------------------------------------------------------------- losses

@dataclass
class LossBreakdown:
    total: float
    cost: float
    penalty: float
    mismatch: float = 0.0
    dl_dh: np.ndarray | None = field(default=None, repr=False)


@dataclass
class MultiplierVector:
    mu: np.ndarray
    alpha: float
    update_period: int

    @classmethod
    def zeros(cls, layout: SplitLayout, alpha: float, period: int):
        return cls(np.zeros(layout.dim_h), alpha, period)

    def due(self, epoch: int) -> bool:
        return epoch % self.update_period == 0

    def update(self, h_aggregate, sentinel=None) -> None:
        self.mu = dual_update(self.mu, h_aggregate, self.alpha)
        if sentinel is not None:
            self.mu[sentinel] = 0.0


def augmented_loss(f: float, h, mu, alpha: float) -> LossBreakdown:
    """f + (1/2 alpha) sum(relu(mu + alpha h)^2 - mu^2)."""
    act = np.maximum(mu + alpha * h, 0.0)
    penalty = float(np.sum(act * act - mu * mu)) / (2.0 * alpha)
    return LossBreakdown(f + penalty, f, penalty, dl_dh=act)


def aggregate_h(h_rows, how: str = "mean"):
    """Reduce per-sample h rows of one epoch to the vector used by the dual step."""
    h_rows = np.atleast_2d(h_rows)
    if how == "mean":
        return h_rows.mean(axis=0)
    if how == "max":
        return h_rows.max(axis=0)
    raise ValueError(f"unknown aggregate {how!r}")


def dual_update(mu, h_aggregate, alpha: float):
    return np.maximum(mu + alpha * h_aggregate, 0.0)


def dc3_loss(f: float, nu, lam: float) -> LossBreakdown:
    penalty = lam * float(nu @ nu)
    return LossBreakdown(f + penalty, f, penalty, dl_dh=2.0 * lam * nu)


def ngt_loss(f: float, nu, x_d, xhat_d, eta: float, tau: float) -> LossBreakdown:
    penalty = eta * (1.0 - tau) * float(nu @ nu)
    diff = x_d - xhat_d
    mismatch = eta * tau * float(diff @ diff)
    return LossBreakdown(f + penalty + mismatch, f, penalty, mismatch, dl_dh=2.0 * eta * (1.0 - tau) * nu)


# ---------------------------------------------------------------- per-sample pipelines

@dataclass
class SampleOutcome:
    ok: bool
    loss: LossBreakdown | None = None
    h: np.ndarray | None = None
    cost_raw: float = 0.0
    dl_dy: np.ndarray | None = None
    dl_dz1: np.ndarray | None = None
    dl_dz2: np.ndarray | None = None
    dz1_dy: np.ndarray | None = None
    dz2_dy: np.ndarray | None = None
    dl_dout: np.ndarray | None = None
    state: tuple | None = None


def split_sample(layout: SplitLayout, x, y, config: TrainConfig, mu=None, start=None) -> SampleOutcome:
    """Recovery, loss and the pieces of dL/dy for one sample of the dual or DC3 loss."""
    try:
        z1, sol = recover_z1(layout, x, y, config.solver, start=start, tol=config.pf_tol)
    except PowerFlowError:
        return SampleOutcome(False)
    derivs = state_derivatives(layout, sol.v, sol.theta)
    z2 = compute_z2(layout, x, sol.v, sol.theta)
    h = inequality_h(layout, y, z1, z2)
    cost_raw = objective(layout, y, z2)
    f = config.cost_scale * cost_raw
    if config.loss == "dual":
        loss = augmented_loss(f, h, mu, config.alpha)
    else:
        loss = dc3_loss(f, violation_nu(h), config.lam)
    gy, gz2 = objective_gradient(layout, y, z2)
    w = loss.dl_dh
    try:
        dz1_dy = sensitivity(pf_problem(layout, x, y), sol, derivs)
    except PowerFlowError:
        return SampleOutcome(False)
    dz2_dz1, dz2_dy = z2_derivatives(layout, sol.v, sol.theta, derivs)
    return SampleOutcome(
        True, loss, h, cost_raw,
        dl_dy=config.cost_scale * gy + layout.h_y.T @ w,
        dl_dz1=layout.h_z1.T @ w,
        dl_dz2=config.cost_scale * gz2 + layout.h_z2.T @ w,
        dz1_dy=dz1_dy,
        dz2_dy=dz2_dy + dz2_dz1 @ dz1_dy,
        state=(sol.v, sol.theta),
    )


def ngt_sample(ngt: NGTLayout, x, out, config: TrainConfig) -> SampleOutcome:
    """Loss and dL/d(V, theta) for the all-bus voltage predictor; no power-flow solve."""
    split = ngt.split
    net = ngt.net
    n = net.n_bus
    v, theta = out[:n], out[n:]
    derivs = state_derivatives(split, v, theta)
    y, z1, z2, xhat_d = ngt.reconstruct(x, out, derivs)
    h = inequality_h(split, y, z1, z2)
    nu = violation_nu(h)
    cost_raw = objective(split, y, z2)
    f = config.cost_scale * cost_raw
    x_d = load_bus_part(split, x)
    loss = ngt_loss(f, nu, x_d, xhat_d, config.eta, config.tau)

    gy, gz2 = objective_gradient(split, y, z2)
    w = loss.dl_dh
    dl_dy = config.cost_scale * gy + split.h_y.T @ w
    dl_dz1 = split.h_z1.T @ w
    dl_dz2 = config.cost_scale * gz2 + split.h_z2.T @ w
    dl_dxhat = -2.0 * config.eta * config.tau * (x_d - xhat_d)
    ng, npv, npq = net.n_gen, len(net.pv), len(net.pq)

    g_p = np.zeros(n)
    g_q = np.zeros(n)
    g_p[net.pv] += dl_dy[:ng]
    g_p[net.slack] += dl_dz2[0]
    g_q[net.slack] += dl_dz2[1]
    g_q[net.pv] += dl_dz2[2:2 + ng]
    g_p[net.pq] -= dl_dxhat[:npq]
    g_q[net.pq] -= dl_dxhat[npq:]
    g_s2 = dl_dz2[ng + 2:]

    _, ds_dth, ds_dv, dsf2_dth, dsf2_dv = derivs
    g_th = ds_dth.real.T @ g_p + ds_dth.imag.T @ g_q + dsf2_dth.T @ g_s2
    g_v = ds_dv.real.T @ g_p + ds_dv.imag.T @ g_q + dsf2_dv.T @ g_s2
    g_v[net.pv] += dl_dy[ng:2 * ng]
    g_v[net.slack] += dl_dy[2 * ng]
    g_th[net.slack] += dl_dy[-1]
    g_th[net.pv] += dl_dz1[:npv]
    g_th[net.pq] += dl_dz1[npv:npv + npq]
    g_v[net.pq] += dl_dz1[npv + npq:]
    return SampleOutcome(True, loss, h, cost_raw, dl_dout=np.concatenate([g_v, g_th]))


# ---------------------------------------------------------------- training loop

@dataclass
class TrainResult:
    checkpoint: Checkpoint
    log: list
    mu: np.ndarray | None
    final_report: dict


def _nu_stats(h_rows: np.ndarray, layout: SplitLayout) -> dict:
    real = ~layout.sentinel
    nu = violation_nu(h_rows[:, real])
    stats = {"nu_mean": float(nu.mean()) if nu.size else 0.0, "nu_max": float(nu.max()) if nu.size else 0.0}
    blocks = {}
    for name, idx in layout.blocks.items():
        idx = idx[real[idx]]
        b = violation_nu(h_rows[:, idx])
        blocks[name] = {"mean": float(b.mean()) if b.size else 0.0, "max": float(b.max()) if b.size else 0.0}
    stats["blocks"] = blocks
    return stats


def _map(fn, items, threads: int):
    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            return list(pool.map(fn, items))
    return [fn(i) for i in items]


def train(config: TrainConfig, network: NetworkModel, dataset: Dataset, log_path=None,
          progress=None) -> TrainResult:
    """Epoch loop over shuffled minibatches with a multiplier step every ``dual_period`` epochs."""
    from .evaluation import evaluate_model  # local: evaluation imports training types

    config.validate()
    layout = SplitLayout(network)
    ngt = NGTLayout(layout, config.ngt_angle_band) if config.loss == "ngt" else None
    head = ngt if ngt is not None else layout
    lo, hi = head.y_lo, head.y_hi

    rng = np.random.default_rng(config.seed)
    params = init_params(layout.dim_x, config.hidden_for(network), head.dim_y, rng)
    shuffle_rng = np.random.default_rng([config.seed, 1])
    adam = AdamState.create(params, lr=config.lr)
    scaler = Scaler.fit(dataset.x[dataset.train])
    mult = MultiplierVector.zeros(layout, config.alpha, config.dual_period) if config.loss == "dual" else None
    kind = "ngt" if ngt is not None else "split"
    warm: dict[int, tuple] = {}

    train_idx = np.asarray(dataset.train)
    n_train = len(train_idx)
    history = []
    best = None
    log_file = open(log_path, "w") if log_path else None
    cfg_dict = asdict(config)
    try:
        for epoch in range(1, config.epochs + 1):
            t0 = time.perf_counter()
            order = shuffle_rng.permutation(train_idx)
            h_rows, totals, costs, pens, mism, costs_raw = [], [], [], [], [], []
            failures = 0
            for start in range(0, n_train, config.batch_size):
                batch = order[start:start + config.batch_size]
                xb = dataset.x[batch]
                trace = forward(params, scaler(xb), lo, hi)
                mu = mult.mu if mult is not None else None

                if ngt is not None:
                    outs = _map(lambda k: ngt_sample(ngt, xb[k], trace.y[k], config), range(len(batch)),
                                config.threads)
                else:
                    def one(k):
                        idx = int(batch[k])
                        return split_sample(layout, xb[k], trace.y[k], config, mu, warm.get(idx))
                    outs = _map(one, range(len(batch)), config.threads)

                ok = np.array([o.ok for o in outs])
                failures += int((~ok).sum())
                if not ok.any():
                    continue
                n_ok = int(ok.sum())
                for k, o in enumerate(outs):
                    if not o.ok:
                        continue
                    if not np.isfinite(o.loss.total):
                        raise NonFiniteLoss(f"epoch {epoch}: non-finite loss")
                    if o.state is not None:
                        warm[int(batch[k])] = o.state
                    h_rows.append(o.h)
                    totals.append(o.loss.total)
                    costs.append(o.loss.cost)
                    pens.append(o.loss.penalty)
                    mism.append(o.loss.mismatch)
                    costs_raw.append(o.cost_raw)

                if ngt is not None:
                    g = np.zeros_like(trace.y)
                    for k, o in enumerate(outs):
                        if o.ok:
                            g[k] = o.dl_dout
                    grads = backward(trace, g / n_ok)
                else:
                    dim_y, dz1, dz2 = layout.dim_y, layout.dim_z1, layout.dim_z2
                    b = len(batch)
                    dl_dy = np.zeros((b, dim_y))
                    dl_dz1 = np.zeros((b, dz1))
                    dl_dz2 = np.zeros((b, dz2))
                    s1 = np.zeros((b, dz1, dim_y))
                    s2 = np.zeros((b, dz2, dim_y))
                    for k, o in enumerate(outs):
                        if o.ok:
                            dl_dy[k], dl_dz1[k], dl_dz2[k] = o.dl_dy, o.dl_dz1, o.dl_dz2
                            s1[k], s2[k] = o.dz1_dy, o.dz2_dy
                    grads = chain_total_gradient(trace, dl_dy / n_ok, dl_dz1 / n_ok, dl_dz2 / n_ok,
                                                 Sensitivities(s1, s2))
                params, adam = adam_step(params, grads, adam)

            if failures > config.max_fail_fraction * n_train:
                raise TooManyPFFailures(f"epoch {epoch}: {failures} of {n_train} power-flow solves failed")
            if not h_rows:
                raise TooManyPFFailures(f"epoch {epoch}: no successful samples")

            h_arr = np.array(h_rows)
            rec = {
                "epoch": epoch,
                "loss": float(np.mean(totals)),
                "cost": float(np.mean(costs)),
                "cost_raw": float(np.mean(costs_raw)),
                "penalty": float(np.mean(pens)),
                "mismatch": float(np.mean(mism)),
                "pf_failures": failures,
                **_nu_stats(h_arr, layout),
            }
            if mult is not None and mult.due(epoch):
                mult.update(aggregate_h(h_arr, config.dual_aggregate), layout.sentinel)
            rec["mu_norm"] = float(np.linalg.norm(mult.mu)) if mult is not None else 0.0

            if epoch % config.dual_period == 0 or epoch == config.epochs:
                ck = Checkpoint(params.copy(), scaler, kind, config.seed, network.checksum, cfg_dict)
                val = evaluate_model(ck, layout, dataset.x[dataset.val], config.solver, config, keep_samples=False)
                feas = max(val.feasibility_rate, 1e-9)
                score = val.cost_scaled_mean * 100.0 / feas
                if ngt is not None:
                    # otherwise selection rewards models that shrink the reconstructed loads
                    score += config.eta * config.tau * val.load_mismatch_sq
                rec["val"] = {"feasibility_rate": val.feasibility_rate, "cost_scaled": val.cost_scaled_mean,
                              "nu_mean": val.nu_mean, "score": score}
                if best is None or score < best[0]:
                    best = (score, epoch, ck)
            rec["seconds"] = time.perf_counter() - t0
            history.append(rec)
            if log_file:
                log_file.write(json.dumps(rec) + "\n")
                log_file.flush()
            if progress:
                progress(rec)
            log.info("epoch %d loss %.6g nu_mean %.3g fails %d", epoch, rec["loss"], rec["nu_mean"], failures)

        _, best_epoch, ck = best
        ck.extra = {"selected_epoch": best_epoch, "mu": mult.mu.tolist() if mult is not None else None}
        final = evaluate_model(ck, layout, dataset.x[dataset.test], config.solver, config, keep_samples=False)
        final_rec = {"final_test": final.metrics_dict(), "selected_epoch": best_epoch}
        if log_file:
            log_file.write(json.dumps(final_rec) + "\n")
        history.append(final_rec)
    finally:
        if log_file:
            log_file.close()
    return TrainResult(ck, history, mult.mu.copy() if mult is not None else None, final.metrics_dict())


def save_dataset(dataset: Dataset, network: NetworkModel, out_dir) -> None:
    """CSV (Pd then Qd columns, bus order) plus a JSON sidecar with the split."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ids = network.bus_ids
    header = ",".join([f"Pd_{b}" for b in ids] + [f"Qd_{b}" for b in ids])
    lines = [header] + [",".join(repr(float(v)) for v in row) for row in dataset.x]
    (out / "dataset.csv").write_text("\n".join(lines) + "\n")
    meta = {
        "seed": dataset.seed,
        "case_checksum": dataset.case_checksum,
        "count": int(len(dataset.x)),
        "train": dataset.train.tolist(),
        "val": dataset.val.tolist(),
        "test": dataset.test.tolist(),
    }
    (out / "dataset.json").write_text(json.dumps(meta, indent=1))


def load_dataset(out_dir) -> Dataset:
    out = Path(out_dir)
    x = np.loadtxt(out / "dataset.csv", delimiter=",", skiprows=1, ndmin=2)
    meta = json.loads((out / "dataset.json").read_text())
    return Dataset(x, np.array(meta["train"], dtype=int), np.array(meta["val"], dtype=int),
                   np.array(meta["test"], dtype=int), meta["seed"], meta["case_checksum"])
