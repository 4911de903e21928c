"""Tracking from augmented initial meshes, with and without refining the initial state."""

from _common import parser, report

from clothtrack.experiments import AUGMENTATIONS, SuiteConfig, make_suite, robustness_rows


def main():
    p = parser(__doc__, "init_robustness.csv")
    args = p.parse_args()
    rows = []
    for scene in make_suite(SuiteConfig(seeds=tuple(args.seeds), image_size=args.image_size)):
        for refine_initial in (False, True):
            for row in robustness_rows(scene, (None,) + AUGMENTATIONS, refine_initial=refine_initial):
                print(f"scene {row['scene_seed']} {row['augmentation']:>7} refine_initial={refine_initial}: "
                      f"{row['mte_mm']:.3f} mm")
                rows.append(row)
    report(args.out, rows)


if __name__ == "__main__":
    main()
