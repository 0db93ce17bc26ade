import numpy as np
import pytest

from wmhseg.morphology import connected_components, dilate
from wmhseg.phantom import (
    PhantomConfig,
    PlacementError,
    generate_case,
    generate_dataset,
    load_dataset,
    save_dataset,
)

CFG = PhantomConfig()


class TestGenerateCase:
    def test_same_seed_bit_identical(self):
        a = generate_case(CFG, seed=11)
        b = generate_case(CFG, seed=11)
        assert np.array_equal(a.t1.data, b.t1.data)
        assert np.array_equal(a.flair.data, b.flair.data)
        assert np.array_equal(a.wm_truth.data, b.wm_truth.data)
        assert np.array_equal(a.wmh_truth.data, b.wmh_truth.data)

    def test_lesions_inside_white_matter(self):
        for seed in (0, 1, 2, 3, 4):
            c = generate_case(CFG, seed=seed)
            assert not np.any(c.wmh_truth.data & ~c.wm_truth.data)

    def test_lesion_count_in_configured_range(self):
        lo, hi = CFG.lesion_count_range
        for seed in range(8):
            c = generate_case(CFG, seed=seed)
            n = connected_components(c.wmh_truth, 26).count
            assert lo <= n <= hi

    def test_grids_and_spacing_shared(self):
        c = generate_case(CFG, seed=5)
        assert c.t1.dims == c.flair.dims == c.wm_truth.dims == c.wmh_truth.dims
        assert c.t1.spacing == c.flair.spacing == (1.0, 1.0, 3.0)

    def test_intensity_ordering(self):
        # FLAIR: lesions brighter than plain white matter; T1: darker
        for seed in (6, 7, 8):
            c = generate_case(CFG, seed=seed)
            les = c.wmh_truth.data > 0
            wm_only = (c.wm_truth.data > 0) & ~les
            assert c.flair.data[les].mean() > c.flair.data[wm_only].mean()
            assert c.t1.data[les].mean() < c.t1.data[wm_only].mean()

    def test_confounder_outside_white_matter_with_clearance(self):
        for seed in (9, 10):
            c = generate_case(CFG, seed=seed)
            assert c.confounder.voxel_count() > 0
            keepout = dilate(c.wm_truth, CFG.wm_clearance_voxels, 6)
            assert not np.any(c.confounder.data & keepout.data)

    def test_confounder_is_flair_bright(self):
        c = generate_case(CFG, seed=12)
        conf = c.confounder.data > 0
        wm_only = (c.wm_truth.data > 0) & (c.wmh_truth.data == 0)
        assert c.flair.data[conf].mean() > c.flair.data[wm_only].mean()

    def test_no_noise_exact_levels(self):
        cfg = PhantomConfig(noise_std=0.0)
        c = generate_case(cfg, seed=13)
        les = c.wmh_truth.data > 0
        assert np.all(c.flair.data[les] == cfg.flair_lesion)
        assert np.all(c.t1.data[les] == cfg.t1_lesion)

    def test_infeasible_placement_raises(self):
        cfg = PhantomConfig(
            lesion_count_range=(30, 30),
            lesion_radius_range=(6.0, 6.0),
            max_placement_tries=5,
        )
        with pytest.raises(PlacementError):
            generate_case(cfg, seed=14)

    def test_invalid_config_rejected(self):
        with pytest.raises(ValueError):
            PhantomConfig(noise_std=-1.0)
        with pytest.raises(ValueError):
            PhantomConfig(lesion_radius_range=(3.0, 2.0))


class TestGenerateDataset:
    def test_deterministic_given_seed(self):
        a = generate_dataset(CFG, 4, seed=21)
        b = generate_dataset(CFG, 4, seed=21)
        for ca, cb in zip(a, b):
            assert np.array_equal(ca.t1.data, cb.t1.data)

    def test_cases_distinct(self):
        cases = generate_dataset(CFG, 6, seed=22)
        placements = {cases[i].wmh_truth.data.tobytes() for i in range(6)}
        assert len(placements) == 6

    def test_zero_cases(self):
        assert generate_dataset(CFG, 0, seed=23) == []

    def test_case_ids_stable(self):
        cases = generate_dataset(CFG, 3, seed=24)
        assert [c.case_id for c in cases] == ["case_000", "case_001", "case_002"]


class TestDatasetIO:
    def test_save_load_round_trip(self, tmp_path):
        cases = generate_dataset(CFG, 2, seed=31)
        save_dataset(cases, CFG, tmp_path / "d")
        loaded, cfg = load_dataset(tmp_path / "d")
        assert cfg == CFG
        assert [c.case_id for c in loaded] == [c.case_id for c in cases]
        # volumes went through float32 NIfTI: compare at float32 resolution
        for a, b in zip(cases, loaded):
            assert np.allclose(a.t1.data, b.t1.data, atol=1e-6)
            assert np.array_equal(a.wmh_truth.data, b.wmh_truth.data)
            assert np.array_equal(a.confounder.data, b.confounder.data)

    def test_directory_content_deterministic(self, tmp_path):
        for name in ("a", "b"):
            save_dataset(generate_dataset(CFG, 2, seed=32), CFG, tmp_path / name)
        files_a = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
        files_b = sorted(p.relative_to(tmp_path / "b") for p in (tmp_path / "b").rglob("*") if p.is_file())
        assert files_a == files_b
        for rel in files_a:
            assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()
