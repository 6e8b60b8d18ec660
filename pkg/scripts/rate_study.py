"""Fit error against total degree for tanh, |x| and ReLU, plus the polynomial baseline."""

import argparse
import sys
from pathlib import Path

from nora.fit import polynomial_fit, rate_study

STUDIES = [
    ("tanh", (-2.0, 2.0), list(range(2, 11))),
    ("abs", (-1.0, 1.0), [2, 4, 6, 8, 10, 12]),
    ("relu", (-1.0, 1.0), [2, 4, 6, 8, 10, 12]),
]


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default="runs/rates")
    args = ap.parse_args(argv)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for target, interval, degrees in STUDIES:
        st = rate_study(target, interval, degrees)
        (out / f"{target}.csv").write_text(st.to_csv())
        print(f"{target} on {interval}: {st.regime} slope {st.slope:.3f}, R2 {st.r2:.4f}")
        for r in st.rows:
            print(f"  N={r['N']:>2} (m={r['m']}, n={r['n']})  sup {r['sup_error']:.3e}")
    lines = ["degree,polynomial_sup,rational_sup"]
    relu = {r["N"]: r["sup_error"] for r in rate_study("relu", (-1.0, 1.0), [2, 4, 6, 8, 10]).rows}
    for N in (2, 4, 6, 8, 10):
        poly = polynomial_fit("relu", (-1.0, 1.0), N).sup_error
        lines.append(f"{N},{poly:.17g},{relu[N]:.17g}")
        print(f"relu N={N}: polynomial {poly:.3e}  rational {relu[N]:.3e}")
    (out / "relu_polynomial_vs_rational.csv").write_text("\n".join(lines) + "\n")
    return 0


if __name__ == "__main__":
    sys.exit(main())
