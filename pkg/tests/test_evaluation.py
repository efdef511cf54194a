import csv
import io
import json
from types import SimpleNamespace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dualopf.evaluation import (
    LayoutMismatch,
    MetricsReport,
    ZeroLoadNorm,
    evaluate,
    feasibility_rate,
    grouped_violations,
    load_mismatch,
    load_report,
    merge_reports,
    nominal_averages,
    report_csv,
)
from dualopf.opf_model import SplitLayout, objective, violation_nu
from dualopf.training import TrainConfig, sample_dataset, train

from conftest import three_bus, two_bus


def test_feasibility_examples():
    assert feasibility_rate(np.array([[-1.0, -1.0, 0.1]])) == pytest.approx(200 / 3)
    assert feasibility_rate(-np.ones((4, 5))) == 100.0
    assert feasibility_rate(np.array([[5e-7, 2e-6]])) == 50.0


def test_feasibility_skips_sentinels():
    h = np.array([[-1e6, 0.5, -0.1]])
    assert feasibility_rate(h, sentinel=np.array([True, False, False])) == 50.0


@settings(max_examples=50)
@given(st.lists(st.floats(-1, 1), min_size=1, max_size=30), st.integers(1, 4))
def test_feasibility_in_range(vals, reps):
    r = feasibility_rate(np.tile(vals, (reps, 1)))
    assert 0.0 <= r <= 100.0
    assert r == pytest.approx(100.0 * sum(v <= 1e-6 for v in vals) / len(vals))


FAKE = SimpleNamespace(blocks={"Pg": np.array([0]), "Qg": np.array([1]), "V": np.array([2, 3]),
                               "S2": np.array([4])}, sentinel=np.zeros(5, bool))


def test_grouped_examples():
    g = grouped_violations(np.zeros((3, 5)), FAKE)
    assert all(v == {"mean": 0.0, "max": 0.0} for v in g.values())
    g = grouped_violations(np.array([[0, 0, 0, 2e-6, 0]]), FAKE)
    assert g["V"]["mean"] == pytest.approx(1e-6) and g["V"]["max"] == 2e-6


def test_load_mismatch_examples():
    assert load_mismatch([1.0, 2.0], [1.0, 2.0]) == 0.0
    assert load_mismatch([1.0, 0.0], [1.1, 0.0]) == pytest.approx(10.0)
    with pytest.raises(ZeroLoadNorm):
        load_mismatch([0.0, 0.0], [0.1, 0.0])


def test_nominal_pg_matches_reference_tables(case30, case118):
    # mean Pg is total load plus losses over the unit count, so it barely depends on the dispatch;
    # the table gives two decimals and the loss share moves the last one
    assert nominal_averages(case30)["Pg"] == pytest.approx(0.32, abs=0.015)
    assert nominal_averages(case118)["Pg"] == pytest.approx(0.80, abs=0.015)


def test_nominal_flat_network():
    avg = nominal_averages(two_bus(pd=0.0))
    assert avg["V"] == 1.0
    assert avg["Pg"] == pytest.approx(0.0, abs=1e-12)


# ----------------------------------------------------------- trained model

@pytest.fixture(scope="module")
def trained():
    net = three_bus(rate23=30)
    ds = sample_dataset(net, 60, 1)
    res = train(TrainConfig(epochs=10, seed=1, hidden=8, dual_period=5), net, ds)
    return net, ds, res


def test_evaluate_reproduces_training_final(trained):
    net, ds, res = trained
    rep = evaluate(res.checkpoint, net, ds)
    got, want = rep.metrics_dict(), res.final_report
    for k in ("cost_mean", "nu_mean", "nu_max", "feasibility_rate", "load_mismatch_pct"):
        assert got[k] == pytest.approx(want[k], rel=1e-9, abs=1e-12)
    assert got["n_samples"] == len(ds.test)


def test_report_round_trip(trained, tmp_path):
    net, ds, res = trained
    rep = evaluate(res.checkpoint, net, ds)
    path = tmp_path / "r.json"
    path.write_text(json.dumps(rep.to_json()))
    doc = load_report(path)
    back = MetricsReport.from_json(doc)
    L = SplitLayout(net)
    h = np.array(back.samples["h"])
    assert feasibility_rate(h, sentinel=L.sentinel) == back.feasibility_rate
    costs = [objective(L, np.array(y), np.array(z2)) for y, z2 in zip(back.samples["y"], back.samples["z2"])]
    assert abs(np.mean(costs) - back.cost_mean) <= 1e-12 * back.cost_mean
    assert np.max(violation_nu(h[:, ~L.sentinel])) == pytest.approx(back.nu_max)
    for g in back.groups.values():
        assert g["max"] >= g["mean"] >= 0
    assert 0 <= back.feasibility_rate <= 100
    assert doc["schema_version"] == 1
    assert set(doc["timing"]) == {"per_sample", "test_set"}


def test_recovered_loads_match_inputs(trained):
    net, ds, res = trained
    rep = evaluate(res.checkpoint, net, ds, solver="fdpf", keep_samples=False)
    assert rep.load_mismatch_pct < 1e-3
    assert rep.groups["Pg"]["mean"] >= 0


def test_layout_mismatch(trained, case30):
    _, _, res = trained
    with pytest.raises(LayoutMismatch):
        evaluate(res.checkpoint, case30, sample_dataset(case30, 12, 0))


def test_merge_reports_csv(trained):
    net, ds, res = trained
    rep = evaluate(res.checkpoint, net, ds, keep_samples=False).to_json()
    dc3 = json.loads(json.dumps(rep))
    dc3["metadata"]["config"]["loss"] = "dc3"
    dc3["metadata"]["config"]["lam"] = 5.0
    rows = list(csv.reader(io.StringIO(merge_reports([rep, dc3]))))
    assert rows[0][0] == "method" and len(rows) == 3
    assert rows[1][0] == "NR-Dual" and rows[2][0] == "DC3 (lambda=5.0)"
    assert float(rows[1][1]) == rep["cost_mean"]
    flat = dict(list(csv.reader(io.StringIO(report_csv(rep))))[1:])
    assert float(flat["feasibility_rate"]) == rep["feasibility_rate"]
    assert "nu_max_S2" in flat
