"""Full-scale IEEE-30 runs (5000 samples, 1000 epochs): dual method and DC3 with lambda=1.

Takes hours on one core.  Results are cached, so an interrupted run can be restarted.

    python scripts/full_reproduction.py --cache results/full
"""
import argparse
import json

from dualopf.experiments import full_suite, run


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--cache", default="results/full")
    args = ap.parse_args()
    out = {}
    for spec in full_suite():
        res = run(spec, args.cache)
        out[spec.name] = res["final_test"]
        print(json.dumps({"name": spec.name, **res["final_test"]}), flush=True)
    dual, dc3 = out["full-dual"], out["full-dc3-1"]
    gap = abs(dual["cost_mean"] - dc3["cost_mean"]) / dc3["cost_mean"] * 100
    print(json.dumps({"cost_gap_pct": gap, "dual_feasibility": dual["feasibility_rate"],
                      "dual_group_means": {k: v["mean"] for k, v in dual["groups"].items()}}))


if __name__ == "__main__":
    main()
