"""Named training runs shared by the experiment scripts and the acceptance suite.

Results are cached on disk keyed by the run description and a hash of the package
sources, so an unchanged run is not retrained.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

from .case_io import load_case
from .training import TrainConfig, sample_dataset, train


@dataclass(frozen=True)
class RunSpec:
    name: str
    case: str = "case30"
    samples: int = 500
    data_seed: int = 0
    config: TrainConfig = field(default_factory=TrainConfig)


DESK = RunSpec("desk-dual", config=TrainConfig(epochs=200, seed=0))
FULL = RunSpec("full-dual", samples=5000, config=TrainConfig(epochs=1000, seed=0))


def variant(base: RunSpec, name: str, **overrides) -> RunSpec:
    return replace(base, name=name, config=replace(base.config, **overrides))


def desk_suite() -> list[RunSpec]:
    runs = [DESK]
    runs += [variant(DESK, f"desk-dc3-{lam:g}", loss="dc3", lam=lam) for lam in (1.0, 5.0, 20.0)]
    runs.append(variant(DESK, "desk-ngt", loss="ngt", eta=10.0, tau=0.5))
    return runs


def full_suite() -> list[RunSpec]:
    return [FULL, variant(FULL, "full-dc3-1", loss="dc3", lam=1.0)]


TRAINING_SOURCES = ("case_io", "powerflow", "opf_model", "neural", "training", "evaluation")


def source_hash() -> str:
    """Hash of the modules that determine a training result (the CLI is not among them)."""
    h = hashlib.sha256()
    for p in (Path(__file__).parent / f"{m}.py" for m in TRAINING_SOURCES):
        h.update(p.name.encode())
        h.update(p.read_bytes())
    return h.hexdigest()[:16]


def run_key(spec: RunSpec) -> str:
    desc = json.dumps({"spec": {**asdict(spec), "config": asdict(spec.config)}, "src": source_hash()},
                      sort_keys=True)
    return hashlib.sha256(desc.encode()).hexdigest()[:16]


def run(spec: RunSpec, cache_dir=None) -> dict:
    """Train ``spec`` (or load a cached result) and return its log and final test metrics."""
    path = None
    if cache_dir is not None:
        path = Path(cache_dir) / f"{spec.name}-{run_key(spec)}.json"
        if path.exists():
            return json.loads(path.read_text())
    net = load_case(spec.case)
    ds = sample_dataset(net, spec.samples, spec.data_seed)
    res = train(spec.config, net, ds)
    out = {
        "name": spec.name,
        "config": asdict(spec.config),
        "epochs": [r for r in res.log if "epoch" in r],
        "selected_epoch": res.checkpoint.extra["selected_epoch"],
        "final_test": res.final_report,
        "checkpoint": res.checkpoint.to_json(),
    }
    if path is not None:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(out))
    return out
