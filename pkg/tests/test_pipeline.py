import numpy as np
import pytest

from wmhseg.architectures import Network, build_resunet, build_trimmed_unet
from wmhseg.checkpoint import save_checkpoint
from wmhseg.phantom import PhantomConfig, generate_case
from wmhseg.pipeline import (
    CaseInput,
    PipelineConfig,
    PipelineError,
    run_pipeline,
    segment_white_matter,
    segment_wmh,
    stack_case_channels,
    wm_training_cases,
    wmh_training_cases,
)
from wmhseg.training import predict_probabilities
from wmhseg.volume_io import BinaryMask3D, Volume3D


@pytest.fixture(scope="module")
def phantom_case():
    return generate_case(PhantomConfig(), seed=77)


@pytest.fixture(scope="module")
def untrained_models():
    wm = Network(build_trimmed_unet(base_width=2, depth=3), seed=1)
    wmh = Network(build_resunet(base_width=2, depth=4), seed=2)
    return wm, wmh


def case_input(c) -> CaseInput:
    return CaseInput(t1=c.t1, flair=c.flair, case_id=c.case_id)


class TestCaseInput:
    def test_grid_mismatch_rejected(self):
        t1 = Volume3D(data=np.zeros((4, 4, 2)), spacing=(1, 1, 1))
        flair = Volume3D(data=np.zeros((4, 4, 3)), spacing=(1, 1, 1))
        with pytest.raises(ValueError):
            CaseInput(t1=t1, flair=flair)

    def test_spacing_mismatch_rejected(self):
        t1 = Volume3D(data=np.zeros((4, 4, 2)), spacing=(1, 1, 1))
        flair = Volume3D(data=np.zeros((4, 4, 2)), spacing=(1, 1, 2))
        with pytest.raises(ValueError):
            CaseInput(t1=t1, flair=flair)


class TestPipelineConfig:
    def test_threshold_bounds(self):
        with pytest.raises(ValueError):
            PipelineConfig(threshold=0.0)
        with pytest.raises(ValueError):
            PipelineConfig(threshold=1.0)

    def test_defaults(self):
        cfg = PipelineConfig()
        assert cfg.threshold == 0.5
        assert cfg.dilation_radius == 2
        assert cfg.confine is True


class TestSegmentWhiteMatter:
    def test_wrong_channel_model_rejected(self, phantom_case, untrained_models):
        _, wmh = untrained_models
        with pytest.raises(PipelineError):
            segment_white_matter(phantom_case.t1, wmh)

    def test_single_component_after_refinement(self, phantom_case, untrained_models):
        wm_model, _ = untrained_models
        from wmhseg.morphology import connected_components

        mask = segment_white_matter(phantom_case.t1, wm_model)
        assert connected_components(mask, 6).count == 1

    def test_refined_superset_of_largest_component(self, phantom_case, untrained_models):
        wm_model, _ = untrained_models
        from wmhseg.morphology import largest_component

        cfg = PipelineConfig()
        probs = predict_probabilities(wm_model, phantom_case.t1.data[None])
        raw = BinaryMask3D(
            data=(probs >= cfg.threshold).astype(np.uint8),
            spacing=phantom_case.t1.spacing,
        )
        pre = largest_component(raw, cfg.component_connectivity)
        refined = segment_white_matter(phantom_case.t1, wm_model, cfg)
        assert np.all(refined.data >= pre.data)

    def test_empty_prediction_raises(self, phantom_case):
        # force an empty thresholded mask with an extreme threshold on an
        # untrained net biased toward 0.5 outputs
        net = Network(build_trimmed_unet(base_width=2, depth=3), seed=3)
        cfg = PipelineConfig(threshold=0.999999)
        with pytest.raises(PipelineError, match="empty"):
            segment_white_matter(phantom_case.t1, net, cfg)


class TestSegmentWmh:
    def test_confinement_removes_outside_voxels(self, phantom_case, untrained_models):
        _, wmh_model = untrained_models
        wm_mask = phantom_case.wm_truth
        ci = case_input(phantom_case)
        on = segment_wmh(ci, wm_mask, wmh_model, PipelineConfig(confine=True))
        assert not np.any(on.data & ~wm_mask.data)

    def test_confinement_identity(self, phantom_case, untrained_models):
        # confined == unconfined AND wm_mask, exactly
        _, wmh_model = untrained_models
        wm_mask = phantom_case.wm_truth
        ci = case_input(phantom_case)
        off = segment_wmh(ci, wm_mask, wmh_model, PipelineConfig(confine=False))
        on = segment_wmh(ci, wm_mask, wmh_model, PipelineConfig(confine=True))
        assert np.array_equal(on.data, off.data & wm_mask.data)

    def test_threshold_monotone(self, phantom_case, untrained_models):
        _, wmh_model = untrained_models
        ci = case_input(phantom_case)
        wm_mask = phantom_case.wm_truth
        low = segment_wmh(ci, wm_mask, wmh_model, PipelineConfig(threshold=0.3, confine=False))
        high = segment_wmh(ci, wm_mask, wmh_model, PipelineConfig(threshold=0.7, confine=False))
        assert np.all(high.data <= low.data)

    def test_empty_wm_mask_rejected(self, phantom_case, untrained_models):
        _, wmh_model = untrained_models
        empty = BinaryMask3D(
            data=np.zeros(phantom_case.t1.dims, np.uint8),
            spacing=phantom_case.t1.spacing,
        )
        with pytest.raises(PipelineError):
            segment_wmh(case_input(phantom_case), empty, wmh_model)

    def test_channel_order_t1_then_flair(self, phantom_case):
        stacked = stack_case_channels(case_input(phantom_case), phantom_case.wm_truth)
        assert stacked.shape[0] == 2
        from wmhseg.training import normalize_to_mask

        t1n = normalize_to_mask(phantom_case.t1, phantom_case.wm_truth)
        assert np.array_equal(stacked[0], t1n.data)


class TestRunPipeline:
    def test_volume_report_spacing_product(self, phantom_case, untrained_models):
        wm_model, wmh_model = untrained_models
        cfg = PipelineConfig()
        wmh_mask, wm_mask, report = run_pipeline(
            case_input(phantom_case), cfg, wm_model, wmh_model
        )
        sx, sy, sz = phantom_case.t1.spacing
        assert report.wmh_volume_mm3 == report.wmh_voxels * sx * sy * sz
        assert report.wm_volume_mm3 == report.wm_voxels * sx * sy * sz
        assert report.config["threshold"] == 0.5

    def test_deterministic(self, phantom_case, untrained_models):
        wm_model, wmh_model = untrained_models
        cfg = PipelineConfig()
        a = run_pipeline(case_input(phantom_case), cfg, wm_model, wmh_model)
        b = run_pipeline(case_input(phantom_case), cfg, wm_model, wmh_model)
        assert np.array_equal(a[0].data, b[0].data)
        assert np.array_equal(a[1].data, b[1].data)

    def test_loads_models_from_checkpoints(self, tmp_path, phantom_case, untrained_models):
        wm_model, wmh_model = untrained_models
        save_checkpoint(tmp_path / "wm.ckpt", wm_model)
        save_checkpoint(tmp_path / "wmh.ckpt", wmh_model)
        cfg = PipelineConfig(
            wm_checkpoint=str(tmp_path / "wm.ckpt"),
            wmh_checkpoint=str(tmp_path / "wmh.ckpt"),
        )
        direct = run_pipeline(case_input(phantom_case), cfg, wm_model, wmh_model)
        loaded = run_pipeline(case_input(phantom_case), cfg)
        assert np.array_equal(direct[0].data, loaded[0].data)

    def test_missing_checkpoints_rejected(self, phantom_case):
        with pytest.raises(PipelineError):
            run_pipeline(case_input(phantom_case), PipelineConfig())

    def test_order_invariance_across_cases(self, untrained_models):
        wm_model, wmh_model = untrained_models
        cfg = PipelineConfig()
        cases = [generate_case(PhantomConfig(), seed=s) for s in (101, 102)]
        forward = [
            run_pipeline(case_input(c), cfg, wm_model, wmh_model)[0].data
            for c in cases
        ]
        backward = [
            run_pipeline(case_input(c), cfg, wm_model, wmh_model)[0].data
            for c in reversed(cases)
        ]
        assert np.array_equal(forward[0], backward[1])
        assert np.array_equal(forward[1], backward[0])


class TestTrainingCaseAssembly:
    def test_wm_cases_shapes(self, phantom_case):
        tcs = wm_training_cases([phantom_case])
        assert tcs[0].images.shape == (1, *phantom_case.t1.dims)
        assert np.array_equal(tcs[0].labels, phantom_case.wm_truth.data)

    def test_wmh_cases_normalized_channels(self, phantom_case):
        tcs = wmh_training_cases([phantom_case], [phantom_case.wm_truth])
        assert tcs[0].images.shape == (2, *phantom_case.t1.dims)
        assert tcs[0].images.min() >= 0.0
        assert tcs[0].images.max() <= 1.0

    def test_mask_count_mismatch_rejected(self, phantom_case):
        with pytest.raises(ValueError):
            wmh_training_cases([phantom_case], [])
