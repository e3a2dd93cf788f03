#!/usr/bin/env python3
"""Run the desk-scale end-to-end benchmark and print the ordering summary.

Trains the region-level ("loc") and image-level ("mil") models on the
synthetic benchmark across several seeds, evaluates each with fusion on
and off, and reports whether the expected qualitative orderings hold:
loc beats mil, and fusion helps both.
"""

import argparse
import sys
import time

from proxydet import benchmark


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--seeds", default="0,1,2,3,4", help="comma-separated seeds")
    parser.add_argument("--n-train", type=int, default=500)
    parser.add_argument("--n-eval", type=int, default=200)
    parser.add_argument("--max-steps", type=int, default=2000)
    args = parser.parse_args(argv)

    cfg = benchmark.BenchmarkConfig(
        seeds=tuple(int(s) for s in args.seeds.split(",")),
        n_train=args.n_train,
        n_eval=args.n_eval,
        max_steps=args.max_steps,
    )
    start = time.time()
    outcomes = benchmark.run_benchmark(cfg)
    elapsed = time.time() - start

    print(f"{'seed':>4}  {'mode':<4}  {'mAP (fusion)':>12}  {'mAP (no fusion)':>15}")
    for o in outcomes:
        print(f"{o.seed:>4}  {o.mode:<4}  {o.map_wbf:>12.4f}  {o.map_no_wbf:>15.4f}")

    summary = benchmark.summarize_orderings(outcomes)
    print()
    print(f"loc > mil (with fusion): {summary.loc_beats_mil}/{summary.n_seeds} seeds")
    for mode, wins in sorted(summary.wbf_helps.items()):
        print(f"fusion helps {mode}: {wins}/{summary.n_seeds} seeds")
    print(f"total time: {elapsed:.1f}s ({elapsed / len(outcomes):.1f}s per run)")

    ok = (
        summary.loc_beats_mil >= 4
        and all(wins >= 4 for wins in summary.wbf_helps.values())
    )
    print("orderings hold" if ok else "orderings VIOLATED")
    return 0 if ok else 1


if __name__ == "__main__":
    sys.exit(main())
