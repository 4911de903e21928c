"""Half-folding episodes under the FIXED, MPC_OL, MPC_CS and MPC_ORACLE strategies."""

from _common import parser, report

from clothtrack.experiments import fold_rows


def main():
    p = parser(__doc__, "fold_strategies.csv")
    p.set_defaults(seeds=list(range(10)))
    args = p.parse_args()
    rows = fold_rows(args.seeds, image_size=args.image_size)
    for r in rows:
        print(f"episode {r['episode']} {r['strategy']:>10}: final MSE {r['final_mse']:.3e} m^2")
    report(args.out, rows)


if __name__ == "__main__":
    main()
