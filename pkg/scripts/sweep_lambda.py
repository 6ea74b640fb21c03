"""PSNR and ATE as a function of the event-loss weight at p = 5.

    python3 scripts/sweep_lambda.py --out runs --lam 0 0.001 0.005 0.02 0.1
"""
from pathlib import Path

from _common import config, dataset, parser, row, write_summary
from evdeblur.experiment import run_experiment, summary_line


def main():
    ap = parser(__doc__.splitlines()[0])
    ap.add_argument("--lam", nargs="+", type=float, default=[0.0, 0.001, 0.005, 0.02, 0.1])
    args = ap.parse_args()
    ds = dataset(args)
    rows = []
    for lam in args.lam:
        rep = run_experiment(ds, config(args, lam=lam), Path(args.out) / f"full_lam{lam:g}", args.threads,
                             reuse=not args.fresh)
        print(summary_line(f"lambda={lam:g}", rep), flush=True)
        rows.append(row(lam, rep))
    write_summary(args, "sweep_lambda", rows)


if __name__ == "__main__":
    main()
