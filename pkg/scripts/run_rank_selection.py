"""Measure how often the spectral rank selectors recover the true ranks."""

import argparse
import time

from voltensor import study


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--seeds", type=int, default=50, help="number of seeds")
    parser.add_argument("--p", type=int, default=50, help="number of assets")
    parser.add_argument("--days", type=int, default=100, help="days per seed")
    parser.add_argument("--m", type=int, default=2000, help="intraday samples")
    parser.add_argument("--r-max", type=int, default=5,
                        help="largest candidate rank")
    args = parser.parse_args()

    t0 = time.time()
    res = study.run_rank_study(
        range(args.seeds), p=args.p, D=args.days, m=args.m, r_max=args.r_max
    )
    print(f"{res['n_seeds']} seeds in {time.time() - t0:.0f}s")
    print(f"gap selector   (3, 1) rate: {res['gap_rate']:.2f}")
    print(f"ratio selector (3, 1) rate: {res['ratio_rate']:.2f}")
    misses = [
        (i, row) for i, row in enumerate(res["picks"])
        if row["gap"] != (3, 1) or row["ratio"] != (3, 1)
    ]
    for i, row in misses:
        print(f"  seed {i}: gap={row['gap']} ratio={row['ratio']}")


if __name__ == "__main__":
    main()
