#!/usr/bin/env python3
"""Drive every training run the acceptance suite consumes.

Completed runs are detected by their config hash and skipped, so this
script is safe to re-run after an interruption.  Budget on one CPU core
is roughly ten hours; the approximation runs stop early once the target
MAE is reached.
"""

import json
import os
import sys
import time

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

from lstmpool import experiments as E  # noqa: E402

RUNS = os.path.join(os.path.dirname(__file__), "..", "runs")
DATA_ROOT = os.environ.get("LSTMPOOL_DATA_ROOT", "/root/data/cifar-synth")


def approx_runs():
    for target in ("max", "avg"):
        for length in (4, 9, 16):
            cfg = E.approx_study_config(target, length)
            out = os.path.join(RUNS, f"approx_{target}_L{length}")
            yield out, lambda cfg=cfg, out=out: E.run_approx(cfg, out)


def classify_runs():
    variants = [
        ("max", "per_layer"),
        ("avg", "per_layer"),
        ("lstm", "per_layer"),
        ("lstm", "global_shared"),
    ]
    for kind, sharing in variants:
        for seed in (1, 2, 3):
            cfg = E.classify_study_config(kind, sharing, seed, DATA_ROOT)
            tag = kind if kind != "lstm" else f"lstm_{sharing}"
            out = os.path.join(RUNS, f"classify_{tag}_s{seed}")
            yield out, lambda cfg=cfg, out=out: E.run_classify(cfg, out)


def analyses():
    ckpt = os.path.join(RUNS, "classify_max_s1", "checkpoint.bin")
    out = os.path.join(RUNS, "analyze_locations")
    if not (os.path.exists(os.path.join(out, "summary.json"))):
        yield out, lambda: E.analyze_locations(
            ckpt, {"root": DATA_ROOT}, out, n_patches=5000, seed=0)
    unit = os.path.join(RUNS, "approx_avg_L9", "unit_params.json")
    out2 = os.path.join(RUNS, "analyze_response")
    if not os.path.exists(os.path.join(out2, "summary.json")):
        def _resp():
            with open(unit) as fh:
                params = json.load(fh)
            return E.analyze_response(
                {"params": params, "length": 9, "psi": "relu"}, out2, seed=0)
        yield out2, _resp


def main():
    os.makedirs(RUNS, exist_ok=True)
    jobs = list(approx_runs()) + list(classify_runs())
    for out, job in jobs:
        t0 = time.time()
        print(f"=== {os.path.basename(out)} ===", flush=True)
        try:
            summary = job()
        except Exception as exc:  # noqa: BLE001 - keep the queue moving
            print(f"!!! {os.path.basename(out)} failed: {exc}", flush=True)
            continue
        keys = {k: summary.get(k) for k in
                ("final_mae", "test_error_pct", "median", "max", "correlation")
                if k in summary}
        print(f"--- done in {time.time() - t0:.0f}s: {keys}", flush=True)
    for out, job in analyses():
        print(f"=== {os.path.basename(out)} ===", flush=True)
        try:
            job()
        except Exception as exc:  # noqa: BLE001
            print(f"!!! analysis failed: {exc}", flush=True)
    print("ALL DONE", flush=True)


if __name__ == "__main__":
    main()
