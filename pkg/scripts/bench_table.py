"""Params, MFLOPs and batch-1 latency for each variant in fp32 and emulated fp16.

    python3 scripts/bench_table.py --size 320 --iters 20
"""

import argparse
import csv
import sys

from threadpoolctl import threadpool_limits

from scanet.bench import FLOP_CONVENTION, benchmark
from scanet.blocks import param_count
from scanet.model import build_model, config_for


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--variants", nargs="+", default=["lite", "base"])
    ap.add_argument("--size", type=int, default=320)
    ap.add_argument("--iters", type=int, default=20)
    ap.add_argument("--warmup", type=int, default=3)
    ap.add_argument("--csv", help="also write rows to this file")
    args = ap.parse_args()

    rows = []
    with threadpool_limits(limits=1):
        for variant in args.variants:
            cfg = config_for(variant, args.size)
            params = build_model(cfg, seed=0)
            for precision in ("fp32", "fp16"):
                rep = benchmark(cfg, params, precision, args.iters, args.warmup)
                rows.append(
                    {
                        "variant": variant,
                        "precision": precision,
                        "params": param_count(params),
                        "mflops": round(rep.flops / 1e6, 3),
                        "mean_ms": round(rep.mean_ms, 2),
                        "p95_ms": round(rep.p95_ms, 2),
                        "fps": round(rep.throughput, 2),
                    }
                )
                print(rep.summary(), file=sys.stderr)

    w = csv.DictWriter(sys.stdout, fieldnames=list(rows[0]))
    w.writeheader()
    w.writerows(rows)
    if args.csv:
        with open(args.csv, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(rows[0]))
            w.writeheader()
            w.writerows(rows)
    print(f"# {FLOP_CONVENTION}; input {args.size}x{args.size}, batch 1, one thread", file=sys.stderr)


if __name__ == "__main__":
    main()
