"""Compare pose models on the desk dataset: free poses with and without the event loss,
and the linear and cubic trajectory baselines.

    python3 scripts/run_ablation.py --out runs
"""
from pathlib import Path

from _common import config, dataset, parser, row, write_summary
from evdeblur.experiment import run_experiment, summary_line


def main():
    ap = parser(__doc__.splitlines()[0])
    ap.add_argument("--modes", nargs="+", default=["full", "noe", "linear", "cubic"])
    args = ap.parse_args()
    ds = dataset(args)
    rows = []
    for mode in args.modes:
        rep = run_experiment(ds, config(args, mode=mode), Path(args.out) / f"{mode}_p5", args.threads,
                             reuse=not args.fresh)
        print(summary_line(mode, rep), flush=True)
        rows.append(row(mode, rep))
    write_summary(args, "ablation", rows)


if __name__ == "__main__":
    main()
