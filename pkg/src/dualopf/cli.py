"""Command-line entry point: gen-data, pf, train, eval, report.

Every stdout payload is one JSON document; diagnostics and errors go to stderr.
Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from .case_io import CaseError, load_case
from .evaluation import LayoutMismatch, evaluate, load_report, merge_reports
from .neural import Checkpoint
from .opf_model import SplitLayout, pf_problem
from .powerflow import DEFAULT_TOL, FDPF_MAX_ITER, NR_MAX_ITER, PowerFlowError, solve
from .training import AGGREGATES, TrainConfig, TrainingError, load_dataset, sample_dataset, save_dataset, train

log = logging.getLogger("dualopf")


class UsageError(Exception):
    def __init__(self, kind: str, message: str, usage: str = ""):
        super().__init__(message)
        self.kind = kind
        self.usage = usage


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        kind = "UnknownSubcommand" if "invalid choice" in message and self.prog.split()[-1] == "dualopf" \
            else "BadFlag"
        raise UsageError(kind, message, self.format_usage().strip())


def _threads_default() -> int:
    try:
        return len(os.sched_getaffinity(0))
    except AttributeError:  # pragma: no cover - non-linux
        return os.cpu_count() or 1


def build_parser() -> _Parser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="JSON object or key=value file; explicit flags override it")
    common.add_argument("--threads", type=int, help="worker pool size (default: available CPUs)")

    p = _Parser(prog="dualopf", description="AC-OPF learning with a power-flow-recovered variable split")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    g = sub.add_parser("gen-data", parents=[common], help="sample load scenarios and write CSV + JSON sidecar")
    g.add_argument("--case")
    g.add_argument("--samples", type=int)
    g.add_argument("--seed", type=int)
    g.add_argument("--out", help="output directory")

    f = sub.add_parser("pf", parents=[common], help="solve one power flow at the case dispatch")
    f.add_argument("--case")
    f.add_argument("--solver", choices=("nr", "fdpf"))
    f.add_argument("--tol", type=float)
    f.add_argument("--max-iter", type=int)
    f.add_argument("--load-scale", type=float, help="multiply all loads by this factor")
    f.add_argument("--out", help="optional directory for the solution and resolved config")

    t = sub.add_parser("train", parents=[common], help="train a model and write a checkpoint")
    t.add_argument("--case")
    t.add_argument("--loss", choices=("dual", "dc3", "ngt"))
    t.add_argument("--solver", choices=("nr", "fdpf"))
    t.add_argument("--epochs", type=int)
    t.add_argument("--batch", type=int)
    t.add_argument("--alpha", type=float)
    t.add_argument("--dual-period", type=int)
    t.add_argument("--dual-aggregate", choices=AGGREGATES, help="reduce epoch h rows by mean or max")
    t.add_argument("--lambda", dest="lam", type=float)
    t.add_argument("--eta", type=float)
    t.add_argument("--tau", type=float)
    t.add_argument("--lr", type=float)
    t.add_argument("--hidden", type=int)
    t.add_argument("--cost-scale", type=float)
    t.add_argument("--samples", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--data", help="dataset directory from gen-data (overrides --samples)")
    t.add_argument("--out", help="checkpoint path (JSON)")
    t.add_argument("--log", help="per-epoch JSONL log path")

    e = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint on a dataset split")
    e.add_argument("--checkpoint")
    e.add_argument("--case")
    e.add_argument("--solver", choices=("nr", "fdpf"))
    e.add_argument("--data")
    e.add_argument("--samples", type=int)
    e.add_argument("--seed", type=int)
    e.add_argument("--split", choices=("train", "val", "test"))
    e.add_argument("--out", help="report JSON path")
    e.add_argument("--csv", help="flat metrics CSV path")

    r = sub.add_parser("report", parents=[common], help="merge eval reports into one comparison CSV")
    r.add_argument("reports", nargs="*")
    r.add_argument("--out", help="CSV path")
    return p


DEFAULTS = {
    "gen-data": {"case": None, "samples": 5000, "seed": 0, "out": None},
    "pf": {"case": None, "solver": "nr", "tol": DEFAULT_TOL, "max_iter": None, "load_scale": 1.0, "out": None},
    "train": {"case": None, "loss": "dual", "solver": "nr", "epochs": 1000, "batch": 32, "alpha": 2.0,
              "dual_period": 10, "dual_aggregate": TrainConfig.dual_aggregate, "lam": 1.0, "eta": 10.0, "tau": 0.5, "lr": TrainConfig.lr, "hidden": None,
              "cost_scale": TrainConfig.cost_scale, "samples": 5000, "seed": 0, "data": None,
              "out": "checkpoint.json", "log": None},
    "eval": {"checkpoint": None, "case": None, "solver": None, "data": None, "samples": None, "seed": None,
             "split": "test", "out": None, "csv": None},
    "report": {"reports": [], "out": None},
}
REQUIRED = {"gen-data": ("case", "out"), "pf": ("case",), "train": ("case",), "eval": ("checkpoint",)}


def read_config_file(path) -> dict:
    """JSON object, or ``key = value`` lines (``#`` comments) with JSON-ish scalar values."""
    text = Path(path).read_text()
    try:
        data = json.loads(text)
        if not isinstance(data, dict):
            raise UsageError("BadFlag", f"config file {path} must hold a JSON object")
        return data
    except json.JSONDecodeError:
        pass
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError("BadFlag", f"{path}:{n}: expected key=value")
        k, v = (s.strip() for s in line.split("=", 1))
        try:
            out[k] = json.loads(v)
        except json.JSONDecodeError:
            out[k] = v
    return out


def resolve(argv) -> dict:
    """Parse argv, layer defaults < config file < explicit flags, check required keys."""
    parser = build_parser()
    ns = parser.parse_args(argv)
    if ns.command is None:
        raise UsageError("BadFlag", "a subcommand is required", parser.format_usage().strip())
    flags = {k: v for k, v in vars(ns).items() if v is not None and k not in ("command", "config")}
    if ns.command == "report" and not ns.reports:
        flags.pop("reports", None)
    cfg = dict(DEFAULTS[ns.command])
    cfg["threads"] = _threads_default()
    if ns.config:
        try:
            file_cfg = read_config_file(ns.config)
        except OSError as exc:
            raise UsageError("BadFlag", f"cannot read config file: {exc}") from exc
        file_cfg = {k.replace("-", "_"): v for k, v in file_cfg.items()}
        file_cfg.pop("command", None)
        unknown = set(file_cfg) - set(cfg)
        if unknown:
            raise UsageError("BadFlag", f"unknown config keys: {sorted(unknown)}")
        cfg.update(file_cfg)
    cfg.update(flags)
    missing = [k for k in REQUIRED.get(ns.command, ()) if cfg.get(k) in (None, "")]
    if missing:
        sub = parser._subparsers._group_actions[0].choices[ns.command]
        raise UsageError("BadFlag", "missing required flag(s): " + ", ".join("--" + m.replace("_", "-")
                                                                             for m in missing),
                         sub.format_usage().strip())
    if ns.command == "report" and not cfg["reports"]:
        raise UsageError("BadFlag", "report needs at least one eval JSON")
    if cfg["threads"] < 1:
        raise UsageError("BadFlag", "--threads must be >= 1")
    cfg["command"] = ns.command
    return cfg


def _echo_config(cfg: dict, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(cfg, indent=1, sort_keys=True) + "\n")
    log.info("resolved config written to %s", path)


def _emit(payload) -> None:
    sys.stdout.write(json.dumps(payload) + "\n")


def cmd_gen_data(cfg):
    out = Path(cfg["out"])
    _echo_config(cfg, out / "config.json")
    net = load_case(cfg["case"])
    ds = sample_dataset(net, cfg["samples"], cfg["seed"])
    save_dataset(ds, net, out)
    _emit({"out": str(out), "count": len(ds.x), "train": len(ds.train), "val": len(ds.val), "test": len(ds.test),
           "seed": ds.seed, "case_checksum": net.checksum})


def cmd_pf(cfg):
    if cfg["out"]:
        _echo_config(cfg, Path(cfg["out"]) / "config.json")
    net = load_case(cfg["case"])
    # case dispatch: Pg and voltage setpoints of each unit, reference angle 0
    y = np.concatenate([net.pg0[:-1], net.vg0, [0.0]])
    problem = pf_problem(SplitLayout(net), cfg["load_scale"] * net.nominal_load, y)
    max_iter = cfg["max_iter"] or (NR_MAX_ITER if cfg["solver"] == "nr" else FDPF_MAX_ITER)
    sol = solve(problem, cfg["solver"], tol=cfg["tol"], max_iter=max_iter)
    payload = {
        "solver": cfg["solver"],
        "converged": bool(sol.converged),
        "iterations": int(sol.iterations),
        "residual_norm": float(sol.residual_norm),
        "buses": [{"id": int(b), "V": float(v), "theta": float(t)} for b, v, t in zip(net.bus_ids, sol.v, sol.theta)],
    }
    if cfg["out"]:
        (Path(cfg["out"]) / "solution.json").write_text(json.dumps(payload, indent=1))
    if not sol.converged:
        raise PowerFlowError(f"{cfg['solver']} did not converge in {sol.iterations} iterations "
                             f"(residual {sol.residual_norm:.3g})")
    _emit(payload)


def _train_config(cfg) -> TrainConfig:
    names = {f.name for f in fields(TrainConfig)}
    mapped = {"batch_size": cfg["batch"]}
    mapped.update({k: cfg[k] for k in ("epochs", "dual_period", "dual_aggregate", "alpha", "loss", "solver", "lr", "seed", "hidden",
                                       "lam", "eta", "tau", "cost_scale", "threads")})
    return TrainConfig(**{k: v for k, v in mapped.items() if k in names})


def cmd_train(cfg):
    out = Path(cfg["out"])
    _echo_config(cfg, out.with_name(out.stem + ".config.json"))
    tc = _train_config(cfg)
    try:
        tc.validate()
    except ValueError as exc:
        raise UsageError("BadFlag", str(exc)) from exc
    net = load_case(cfg["case"])
    ds = load_dataset(cfg["data"]) if cfg["data"] else sample_dataset(net, cfg["samples"], cfg["seed"])
    if ds.case_checksum and ds.case_checksum != net.checksum:
        raise LayoutMismatch("dataset was generated from a different case file")
    result = train(tc, net, ds, log_path=cfg["log"])
    ck = result.checkpoint
    ck.extra["run"] = {k: cfg[k] for k in ("case", "samples", "seed", "data")}
    ck.save(out)
    _emit({"checkpoint": str(out), "selected_epoch": ck.extra["selected_epoch"], "final_test": result.final_report})


def cmd_eval(cfg):
    ck = Checkpoint.load(cfg["checkpoint"])
    run = ck.extra.get("run", {})
    for key in ("case", "samples", "seed", "data"):
        if cfg.get(key) is None:
            cfg[key] = run.get(key)
    if cfg["solver"] is None:
        cfg["solver"] = ck.config.get("solver", "nr")
    if cfg["case"] is None:
        raise UsageError("BadFlag", "missing required flag(s): --case (not recorded in checkpoint)")
    if cfg["out"]:
        out = Path(cfg["out"])
        _echo_config(cfg, out.with_name(out.stem + ".config.json"))
    net = load_case(cfg["case"])
    if ck.case_checksum != net.checksum:
        raise LayoutMismatch("checkpoint was trained on a different case file")
    if cfg["data"]:
        ds = load_dataset(cfg["data"])
    else:
        ds = sample_dataset(net, cfg["samples"] or 5000, cfg["seed"] if cfg["seed"] is not None else ck.seed)
    report = evaluate(ck, net, ds, cfg["solver"], cfg["split"], keep_samples=bool(cfg["out"]))
    doc = report.to_json()
    doc["metadata"]["run"] = {k: cfg[k] for k in ("case", "samples", "seed", "data", "split")}
    if cfg["out"]:
        Path(cfg["out"]).write_text(json.dumps(doc))
    if cfg["csv"]:
        from .evaluation import report_csv
        Path(cfg["csv"]).write_text(report_csv(doc))
    doc.pop("samples", None)
    _emit(doc)


def cmd_report(cfg):
    reports = [load_report(p) for p in cfg["reports"]]
    text = merge_reports(reports)
    if cfg["out"]:
        Path(cfg["out"]).parent.mkdir(parents=True, exist_ok=True)
        Path(cfg["out"]).write_text(text)
        _emit({"out": cfg["out"], "rows": len(reports)})
    else:
        _emit({"csv": text, "rows": len(reports)})


COMMANDS = {"gen-data": cmd_gen_data, "pf": cmd_pf, "train": cmd_train, "eval": cmd_eval, "report": cmd_report}

RUNTIME_ERRORS = (CaseError, PowerFlowError, TrainingError, LayoutMismatch, OSError, ValueError, KeyError)


def _fail(kind: str, message: str, code: int, usage: str = "") -> int:
    err = {"error": kind, "message": message, "exit_code": code}
    if usage:
        err["usage"] = usage
    sys.stderr.write(json.dumps(err) + "\n")
    return code


def main(argv=None) -> int:
    level = os.environ.get("ACOPF_LOG", "error").upper()
    logging.basicConfig(level=getattr(logging, level, logging.ERROR), stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve(sys.argv[1:] if argv is None else list(argv))
        COMMANDS[cfg["command"]](cfg)
    except UsageError as exc:
        return _fail(exc.kind, str(exc), 2, exc.usage)
    except RUNTIME_ERRORS as exc:
        return _fail(type(exc).__name__, str(exc), 1)
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
