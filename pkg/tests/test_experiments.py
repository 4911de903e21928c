import numpy as np
import pytest

from clothtrack.experiments import (ABLATION_CELLS, SuiteConfig, ablation_rows, default_update_config, make_suite,
                                    mode_rows, robustness_rows, run_cell, sequence_mte)

FAST = default_update_config(epochs=2)


def test_suite_is_seeded():
    a = make_suite(SuiteConfig(seeds=(4,), image_size=16, n_steps=2, n_views=1))
    b = make_suite(SuiteConfig(seeds=(4,), image_size=16, n_steps=2, n_views=1))
    assert np.array_equal(a[0].observations, b[0].observations)


def test_sequence_mte_skips_initial_frame(small_scene):
    s = small_scene
    meshes = [s.ground_truth[0].with_state(s.ground_truth[0].vertices + 1.0)] + list(s.ground_truth[1:])
    assert sequence_mte(meshes, s) == 0.0


def test_unknown_cell_rejected(small_scene):
    with pytest.raises(ValueError):
        run_cell(small_scene, "no_everything", small_scene.gt_cloud)


def test_ablation_rows_cover_requested_cells(small_scene):
    rows = ablation_rows(small_scene, small_scene.gt_cloud, config=FAST, cells=("only_gnn", "views_1"))
    assert [r["cell"] for r in rows] == ["only_gnn", "views_1"]
    assert all(np.isfinite(r["mte_mm"]) for r in rows)
    assert set(ABLATION_CELLS) >= {r["cell"] for r in rows}


def test_mode_rows(small_scene):
    rows = mode_rows(small_scene, FAST)
    assert [r["mode"] for r in rows] == ["ROLLOUT", "ITERATIVE"]


def test_robustness_rows_label_unaugmented(small_scene):
    rows = robustness_rows(small_scene, (None, "TRANS"), config=FAST)
    assert [r["augmentation"] for r in rows] == ["NONE", "TRANS"]
