"""Two-stage inference: white matter segmentation with morphological
refinement on T1, then lesion segmentation on mask-normalized (T1, FLAIR)
pairs confined to the refined white matter mask.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .architectures import Network
from .checkpoint import load_checkpoint
from .morphology import dilate, largest_component
from .training import TrainingCase, normalize_to_mask, predict_probabilities
from .volume_io import BinaryMask3D, Volume3D


class PipelineError(RuntimeError):
    pass


@dataclass
class CaseInput:
    """Co-registered T1 and FLAIR volumes, optional ground truth."""

    t1: Volume3D
    flair: Volume3D
    wmh_truth: BinaryMask3D | None = None
    case_id: str = "case"

    def __post_init__(self) -> None:
        if self.t1.data.shape != self.flair.data.shape:
            raise ValueError(
                f"t1/flair grid mismatch: {self.t1.data.shape} vs {self.flair.data.shape}"
            )
        if self.t1.spacing != self.flair.spacing:
            raise ValueError(
                f"t1/flair spacing mismatch: {self.t1.spacing} vs {self.flair.spacing}"
            )


@dataclass
class PipelineConfig:
    wm_checkpoint: str | None = None
    wmh_checkpoint: str | None = None
    threshold: float = 0.5
    dilation_radius: int = 2
    dilation_connectivity: int = 6
    component_connectivity: int = 6
    confine: bool = True

    def __post_init__(self) -> None:
        if not 0.0 < self.threshold < 1.0:
            raise ValueError(f"threshold must be in (0, 1), got {self.threshold}")
        if self.dilation_radius < 0:
            raise ValueError("dilation radius must be >= 0")

    def to_dict(self) -> dict:
        return {
            "wm_checkpoint": self.wm_checkpoint,
            "wmh_checkpoint": self.wmh_checkpoint,
            "threshold": self.threshold,
            "dilation_radius": self.dilation_radius,
            "dilation_connectivity": self.dilation_connectivity,
            "component_connectivity": self.component_connectivity,
            "confine": self.confine,
        }


@dataclass
class CaseReport:
    case_id: str
    wmh_voxels: int
    wmh_volume_mm3: float
    wm_voxels: int
    wm_volume_mm3: float
    config: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "case_id": self.case_id,
            "wmh_voxels": self.wmh_voxels,
            "wmh_volume_mm3": self.wmh_volume_mm3,
            "wm_voxels": self.wm_voxels,
            "wm_volume_mm3": self.wm_volume_mm3,
            "config": self.config,
        }


def segment_white_matter(
    t1: Volume3D, wm_model: Network, cfg: PipelineConfig | None = None
) -> BinaryMask3D:
    """Per-slice forward pass on T1, threshold, keep the largest connected
    component, then dilate for full coverage."""
    cfg = cfg or PipelineConfig()
    if wm_model.spec.in_channels != 1:
        raise PipelineError(
            f"white matter model expects 1 input channel, has {wm_model.spec.in_channels}"
        )
    probs = predict_probabilities(wm_model, t1.data[None])
    raw = BinaryMask3D(
        data=(probs >= cfg.threshold).astype(np.uint8), spacing=t1.spacing
    )
    if raw.voxel_count() == 0:
        raise PipelineError("white matter prediction is empty; model unusable")
    refined = largest_component(raw, cfg.component_connectivity)
    return dilate(refined, cfg.dilation_radius, cfg.dilation_connectivity)


def stack_case_channels(
    case: CaseInput, wm_mask: BinaryMask3D
) -> np.ndarray:
    """Mask-normalize T1 and FLAIR and stack as the 2-channel network
    input, channel order (t1, flair)."""
    t1n = normalize_to_mask(case.t1, wm_mask)
    flairn = normalize_to_mask(case.flair, wm_mask)
    return np.stack([t1n.data, flairn.data])


def segment_wmh(
    case: CaseInput,
    wm_mask: BinaryMask3D,
    wmh_model: Network,
    cfg: PipelineConfig | None = None,
) -> BinaryMask3D:
    """Lesion segmentation on normalized 2-channel slices; predictions
    outside the white matter mask are zeroed when confinement is on."""
    cfg = cfg or PipelineConfig()
    if wmh_model.spec.in_channels != 2:
        raise PipelineError(
            f"lesion model expects 2 input channels, has {wmh_model.spec.in_channels}"
        )
    if wm_mask.voxel_count() == 0:
        raise PipelineError("white matter mask is empty")
    channels = stack_case_channels(case, wm_mask)
    probs = predict_probabilities(wmh_model, channels)
    pred = (probs >= cfg.threshold).astype(np.uint8)
    if cfg.confine:
        pred &= wm_mask.data
    return BinaryMask3D(data=pred, spacing=case.t1.spacing)


def run_pipeline(
    case: CaseInput,
    cfg: PipelineConfig,
    wm_model: Network | None = None,
    wmh_model: Network | None = None,
) -> tuple[BinaryMask3D, BinaryMask3D, CaseReport]:
    """Both stages end to end; returns (wmh mask, wm mask, report)."""
    if wm_model is None:
        if not cfg.wm_checkpoint:
            raise PipelineError("no white matter checkpoint configured")
        wm_model = load_checkpoint(cfg.wm_checkpoint)
    if wmh_model is None:
        if not cfg.wmh_checkpoint:
            raise PipelineError("no lesion checkpoint configured")
        wmh_model = load_checkpoint(cfg.wmh_checkpoint)
    wm_mask = segment_white_matter(case.t1, wm_model, cfg)
    wmh_mask = segment_wmh(case, wm_mask, wmh_model, cfg)
    vox = case.t1.voxel_volume_mm3()
    report = CaseReport(
        case_id=case.case_id,
        wmh_voxels=wmh_mask.voxel_count(),
        wmh_volume_mm3=wmh_mask.voxel_count() * vox,
        wm_voxels=wm_mask.voxel_count(),
        wm_volume_mm3=wm_mask.voxel_count() * vox,
        config=cfg.to_dict(),
    )
    return wmh_mask, wm_mask, report


# ---------------------------------------------------------------------------
# Training-data assembly for the two stages


def wm_training_cases(phantom_cases) -> list[TrainingCase]:
    """Stage-1 training data: raw T1 in, white matter truth out."""
    return [
        TrainingCase(
            case_id=c.case_id,
            images=c.t1.data[None],
            labels=c.wm_truth.data,
            spacing=c.t1.spacing,
        )
        for c in phantom_cases
    ]


def wmh_training_cases(
    phantom_cases, wm_masks: list[BinaryMask3D]
) -> list[TrainingCase]:
    """Stage-2 training data: mask-normalized (T1, FLAIR) in, lesion truth
    out. `wm_masks` are the per-case normalization windows (stage-1
    predictions in the paper's protocol; ground truth for isolation runs)."""
    if len(wm_masks) != len(phantom_cases):
        raise ValueError("one white matter mask per case required")
    out = []
    for c, m in zip(phantom_cases, wm_masks):
        case_input = CaseInput(t1=c.t1, flair=c.flair, case_id=c.case_id)
        out.append(
            TrainingCase(
                case_id=c.case_id,
                images=stack_case_channels(case_input, m),
                labels=c.wmh_truth.data,
                spacing=c.t1.spacing,
            )
        )
    return out
