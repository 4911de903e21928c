"""ITERATIVE (horizon 1) against ROLLOUT refinement: accuracy and wall time."""

from _common import parser, report

from clothtrack.experiments import SuiteConfig, make_suite, mode_rows


def main():
    p = parser(__doc__, "iterative_vs_rollout.csv")
    p.add_argument("--horizon", type=int, default=1)
    args = p.parse_args()
    rows = []
    for scene in make_suite(SuiteConfig(seeds=tuple(args.seeds), image_size=args.image_size)):
        for row in mode_rows(scene, horizon=args.horizon):
            print(f"scene {row['scene_seed']} {row['mode']:>9}: {row['mte_mm']:.3f} mm in {row['wall_seconds']:.1f} s")
            rows.append(row)
    report(args.out, rows)


if __name__ == "__main__":
    main()
