"""PSNR and ATE as a function of the number of poses per view.

    python3 scripts/sweep_p.py --out runs --p 1 2 3 5 7
"""
from pathlib import Path

from _common import config, dataset, parser, row, write_summary
from evdeblur.experiment import run_experiment, summary_line


def main():
    ap = parser(__doc__.splitlines()[0])
    ap.add_argument("--p", nargs="+", type=int, default=[1, 2, 3, 5, 7])
    args = ap.parse_args()
    ds = dataset(args)
    rows = []
    for p in args.p:
        rep = run_experiment(ds, config(args, p=p), Path(args.out) / f"full_p{p}", args.threads,
                             reuse=not args.fresh)
        print(summary_line(f"p={p}", rep), flush=True)
        rows.append(row(p, rep))
    write_summary(args, "sweep_p", rows)


if __name__ == "__main__":
    main()
