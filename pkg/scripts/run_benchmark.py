"""Run the bundled scene suite and print the PSNR table.

    python3 scripts/run_benchmark.py --variants isotropic lambertian --photons 1e6 --out bench.jsonl
"""
import argparse
import json
import time

from nlosfact.eval import METHOD_LABELS, SCENE_NAMES, BenchmarkConfig, bundled_suite, format_table, run_benchmark


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--scenes", nargs="+", default=list(SCENE_NAMES), choices=SCENE_NAMES)
    ap.add_argument("--n", type=int, nargs="+", default=[16])
    ap.add_argument("--variants", nargs="+", default=["isotropic"], choices=("isotropic", "lambertian"))
    ap.add_argument("--methods", nargs="+", default=list(METHOD_LABELS), choices=METHOD_LABELS)
    ap.add_argument("--photons", type=float, default=None, help="Poisson noise level; omit for noiseless")
    ap.add_argument("--workers", type=int, default=1)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", help="optional JSON-lines report")
    args = ap.parse_args()

    cases = bundled_suite(args.n, args.variants, args.scenes)
    t0 = time.perf_counter()
    reports = run_benchmark(cases, args.methods, BenchmarkConfig(args.photons, workers=args.workers), args.seed)
    print(format_table(reports))
    print(f"\n{time.perf_counter() - t0:.0f} s")
    if args.out:
        with open(args.out, "w") as fh:
            for r in reports:
                for rec in r.records():
                    fh.write(json.dumps(rec) + "\n")


if __name__ == "__main__":
    main()
