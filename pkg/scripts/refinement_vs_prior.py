"""ROLLOUT refinement against the unrefined perturbed-simulator prior on 8x8 towels."""

from _common import parser, report

from clothtrack.experiments import SuiteConfig, make_suite, refinement_rows


def main():
    p = parser(__doc__, "refinement_vs_prior.csv")
    p.set_defaults(seeds=[0, 1, 2, 3, 4], image_size=128)
    args = p.parse_args()
    rows = refinement_rows(make_suite(SuiteConfig(seeds=tuple(args.seeds), image_size=args.image_size)))
    for r in rows:
        print(f"scene {r['scene_seed']}: prior {r['prior_mte_mm']:.3f} mm -> refined {r['refined_mte_mm']:.3f} mm")
    report(args.out, rows)


if __name__ == "__main__":
    main()
