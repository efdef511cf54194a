"""Desk-scale IEEE-30 runs: dual method, DC3 lambda sweep and NGT.

    python scripts/desk_experiments.py --cache results/desk

Prints one summary line per run and a comparison CSV at the end.
"""
import argparse
import json
import time

from dualopf.experiments import desk_suite, run


def summarize(res):
    ep = res["epochs"]
    ft = res["final_test"]
    return {
        "name": res["name"],
        "nu_first": ep[0]["nu_mean"],
        "nu_last": ep[-1]["nu_mean"],
        "selected_epoch": res["selected_epoch"],
        "test_feasibility": ft["feasibility_rate"],
        "test_cost": ft["cost_mean"],
        "test_nu_mean": ft["nu_mean"],
        "test_pg_nu_max": ft["groups"]["Pg"]["max"],
        "test_mismatch_pct": ft["load_mismatch_pct"],
    }


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--cache", default="results/desk")
    ap.add_argument("--only", nargs="*", help="run names to include")
    args = ap.parse_args()
    rows = []
    for spec in desk_suite():
        if args.only and spec.name not in args.only:
            continue
        t0 = time.perf_counter()
        row = summarize(run(spec, args.cache))
        row["seconds"] = round(time.perf_counter() - t0, 1)
        print(json.dumps(row), flush=True)
        rows.append(row)
    keys = list(rows[0])
    print(",".join(keys))
    for r in rows:
        print(",".join(str(r[k]) for k in keys))


if __name__ == "__main__":
    main()
