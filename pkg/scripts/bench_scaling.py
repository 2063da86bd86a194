"""Fit MAC-vs-token-count exponents for each attention mechanism and write a CSV.

    python scripts/bench_scaling.py --out scaling.csv --instrumented
"""
import argparse
import csv

from scalable_vit.cost import MECHANISMS, scaling_probe


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--sizes", type=int, nargs="+", default=[196, 784, 3136, 12544])
    ap.add_argument("--channels", type=int, default=64)
    ap.add_argument("--instrumented", action="store_true",
                    help="count MACs by running the forward pass instead of the closed forms")
    ap.add_argument("--out", default="scaling.csv")
    args = ap.parse_args()

    with open(args.out, "w", newline="") as f:
        out = csv.writer(f)
        out.writerow(["mechanism", "N", "macs", "exponent"])
        for mech in MECHANISMS:
            p = scaling_probe(mech, c=args.channels, sizes=tuple(args.sizes), instrumented=args.instrumented)
            for n, macs in zip(p.sizes, p.macs):
                out.writerow([mech, n, macs, f"{p.fitted_exponent:.4f}"])
            print(f"{mech:18s} exponent {p.fitted_exponent:.4f}")
    print(f"wrote {args.out}")


if __name__ == "__main__":
    main()
