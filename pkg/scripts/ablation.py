"""Ablation grid (prior only, no prior, no regularisers, no residual field, 1 to 4 views)."""

from _common import parser, report

from clothtrack.experiments import ABLATION_CELLS, SuiteConfig, ablation_rows, make_suite


def main():
    p = parser(__doc__, "ablation.csv")
    p.add_argument("--cells", nargs="+", default=list(ABLATION_CELLS), choices=ABLATION_CELLS)
    args = p.parse_args()
    rows = []
    for scene in make_suite(SuiteConfig(seeds=tuple(args.seeds), image_size=args.image_size)):
        for row in ablation_rows(scene, scene.gt_cloud, cells=args.cells):
            print(f"scene {row['scene_seed']} {row['cell']:>12}: {row['mte_mm']:.3f} mm")
            rows.append(row)
    report(args.out, rows)


if __name__ == "__main__":
    main()
