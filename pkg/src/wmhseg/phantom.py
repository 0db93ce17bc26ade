"""Synthetic co-registered T1/FLAIR phantom with white-matter and lesion
ground truth, so training, inference and every metric run at desk scale.

Geometry: a brain ellipsoid holding a tall inner white-matter ellipsoid
(near-cylindrical in z so that small dilations of the mask stay cheap),
spherical lesions fully inside the white matter, and one or more
FLAIR-bright confounder spheres outside it. Confounders use the same
T1/FLAIR intensities as true lesions, so intensity alone cannot reject
them; only white-matter confinement can.

Intensity model (documented constants, not taken from any dataset):
lesions are darker than white matter on T1 and brighter on FLAIR; the
intensity-ordering invariants hold per case for noise_std <= 0.1.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np

from .volume_io import BinaryMask3D, Volume3D, read_nifti, read_nifti_mask, write_nifti
from .morphology import _neighbor_offsets, _shifted, dilate


@dataclass(frozen=True)
class PhantomConfig:
    dims: tuple[int, int, int] = (64, 64, 8)
    spacing: tuple[float, float, float] = (1.0, 1.0, 3.0)
    lesion_count_range: tuple[int, int] = (2, 5)
    lesion_radius_range: tuple[float, float] = (2.0, 3.5)
    confounder_count: int = 1
    confounder_radius: float = 2.5
    # fractions of the volume half-extent
    brain_semiaxes: tuple[float, float, float] = (0.86, 0.86, 2.6)
    wm_semiaxes: tuple[float, float, float] = (0.54, 0.54, 1.8)
    t1_background: float = 0.05
    t1_brain: float = 0.30
    t1_wm: float = 0.70
    t1_lesion: float = 0.40
    flair_background: float = 0.05
    flair_brain: float = 0.30
    flair_wm: float = 0.50
    flair_lesion: float = 0.85
    noise_std: float = 0.02
    wm_clearance_voxels: int = 3  # min gap between confounder and white matter
    max_placement_tries: int = 200
    seed: int = 0

    def __post_init__(self) -> None:
        if self.noise_std < 0:
            raise ValueError("noise std must be >= 0")
        lo, hi = self.lesion_radius_range
        if lo <= 0 or hi < lo:
            raise ValueError(f"bad lesion radius range {self.lesion_radius_range}")
        if self.lesion_count_range[0] < 0 or (
            self.lesion_count_range[1] < self.lesion_count_range[0]
        ):
            raise ValueError(f"bad lesion count range {self.lesion_count_range}")

    def to_dict(self) -> dict:
        return asdict(self)

    @staticmethod
    def from_dict(d: dict) -> "PhantomConfig":
        d = dict(d)
        for key in (
            "dims",
            "spacing",
            "lesion_count_range",
            "lesion_radius_range",
            "brain_semiaxes",
            "wm_semiaxes",
        ):
            if key in d:
                d[key] = tuple(d[key])
        return PhantomConfig(**d)


@dataclass
class PhantomCase:
    case_id: str
    t1: Volume3D
    flair: Volume3D
    wm_truth: BinaryMask3D
    wmh_truth: BinaryMask3D
    seed: int
    confounder: BinaryMask3D | None = None


class PlacementError(RuntimeError):
    """Lesion or confounder placement failed after bounded retries."""


def _ellipsoid(dims, center, semiaxes) -> np.ndarray:
    grids = np.meshgrid(*(np.arange(n, dtype=np.float64) for n in dims), indexing="ij")
    acc = np.zeros(dims, dtype=np.float64)
    for g, c, a in zip(grids, center, semiaxes):
        acc += ((g - c) / a) ** 2
    return acc <= 1.0


def _sphere(dims, center, radius) -> np.ndarray:
    return _ellipsoid(dims, center, (radius, radius, radius))


def _dilate_bool(arr: np.ndarray, connectivity: int = 26) -> np.ndarray:
    out = arr.copy()
    for dx, dy, dz in _neighbor_offsets(connectivity):
        out |= _shifted(arr, dx, dy, dz)
    return out


def _place_spheres(
    rng: np.random.Generator,
    count: int,
    radius_range: tuple[float, float],
    allowed: np.ndarray,
    dims: tuple[int, int, int],
    max_tries: int,
) -> np.ndarray:
    """Place spheres fully inside `allowed`, pairwise non-adjacent under
    26-connectivity so each sphere stays its own component."""
    placed = np.zeros(dims, dtype=bool)
    blocked = np.zeros(dims, dtype=bool)
    candidates = np.argwhere(allowed)
    if candidates.size == 0 and count > 0:
        raise PlacementError("no candidate centers for sphere placement")
    for _ in range(count):
        for _attempt in range(max_tries):
            center = candidates[int(rng.integers(len(candidates)))]
            radius = float(rng.uniform(*radius_range))
            sphere = _sphere(dims, center.astype(np.float64), radius)
            if not (sphere & ~allowed).any() and not (sphere & blocked).any():
                placed |= sphere
                blocked |= _dilate_bool(sphere)
                break
        else:
            raise PlacementError(f"could not place sphere after {max_tries} tries")
    return placed


def generate_case(cfg: PhantomConfig, seed: int, case_id: str | None = None) -> PhantomCase:
    """One deterministic (T1, FLAIR, WM truth, WMH truth) quadruple."""
    rng = np.random.default_rng(seed)
    dims = cfg.dims
    center = tuple((n - 1) / 2.0 for n in dims)
    half = tuple(n / 2.0 for n in dims)

    brain = _ellipsoid(dims, center, tuple(h * s for h, s in zip(half, cfg.brain_semiaxes)))
    wm = _ellipsoid(dims, center, tuple(h * s for h, s in zip(half, cfg.wm_semiaxes)))
    wm &= brain

    n_lesions = int(rng.integers(cfg.lesion_count_range[0], cfg.lesion_count_range[1] + 1))
    wmh = _place_spheres(
        rng, n_lesions, cfg.lesion_radius_range, wm, dims, cfg.max_placement_tries
    )

    # confounders live in the brain but clear of the (dilated) white matter,
    # so confinement - and only confinement - can remove them
    wm_mask = BinaryMask3D(data=wm.astype(np.uint8), spacing=cfg.spacing)
    keepout = dilate(wm_mask, cfg.wm_clearance_voxels, 6).data.astype(bool)
    conf_zone = brain & ~keepout
    conf = _place_spheres(
        rng,
        cfg.confounder_count,
        (cfg.confounder_radius, cfg.confounder_radius),
        conf_zone,
        dims,
        cfg.max_placement_tries,
    )

    t1 = np.full(dims, cfg.t1_background)
    t1[brain] = cfg.t1_brain
    t1[wm] = cfg.t1_wm
    t1[wmh] = cfg.t1_lesion
    t1[conf] = cfg.t1_lesion

    flair = np.full(dims, cfg.flair_background)
    flair[brain] = cfg.flair_brain
    flair[wm] = cfg.flair_wm
    flair[wmh] = cfg.flair_lesion
    flair[conf] = cfg.flair_lesion

    if cfg.noise_std > 0:
        t1 = t1 + rng.normal(0.0, cfg.noise_std, size=dims)
        flair = flair + rng.normal(0.0, cfg.noise_std, size=dims)

    return PhantomCase(
        case_id=case_id if case_id is not None else f"case_{seed:08d}",
        t1=Volume3D(data=t1, spacing=cfg.spacing),
        flair=Volume3D(data=flair, spacing=cfg.spacing),
        wm_truth=BinaryMask3D(data=wm.astype(np.uint8), spacing=cfg.spacing),
        wmh_truth=BinaryMask3D(data=wmh.astype(np.uint8), spacing=cfg.spacing),
        seed=seed,
        confounder=BinaryMask3D(data=conf.astype(np.uint8), spacing=cfg.spacing),
    )


def generate_dataset(cfg: PhantomConfig, n_cases: int, seed: int) -> list[PhantomCase]:
    """n independent cases from a seeded stream; deterministic."""
    children = np.random.SeedSequence(seed).spawn(n_cases)
    return [
        generate_case(cfg, int(c.generate_state(1)[0]), case_id=f"case_{i:03d}")
        for i, c in enumerate(children)
    ]


# ---------------------------------------------------------------------------
# On-disk layout: one directory per case with NIfTI quadruples + manifest


def save_dataset(cases: list[PhantomCase], cfg: PhantomConfig, out_dir: str | Path) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = {
        "config": cfg.to_dict(),
        "cases": [{"case_id": c.case_id, "seed": c.seed} for c in cases],
    }
    for case in cases:
        d = out / case.case_id
        d.mkdir(exist_ok=True)
        write_nifti(case.t1, d / "t1.nii", "float32")
        write_nifti(case.flair, d / "flair.nii", "float32")
        write_nifti(case.wm_truth, d / "wm.nii")
        write_nifti(case.wmh_truth, d / "wmh.nii")
        if case.confounder is not None:
            write_nifti(case.confounder, d / "confounder.nii")
    (out / "manifest.json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n"
    )


def load_dataset(data_dir: str | Path) -> tuple[list[PhantomCase], PhantomConfig]:
    root = Path(data_dir)
    manifest = json.loads((root / "manifest.json").read_text())
    cfg = PhantomConfig.from_dict(manifest["config"])
    cases = []
    for entry in manifest["cases"]:
        d = root / entry["case_id"]
        conf_path = d / "confounder.nii"
        cases.append(
            PhantomCase(
                case_id=entry["case_id"],
                t1=read_nifti(d / "t1.nii"),
                flair=read_nifti(d / "flair.nii"),
                wm_truth=read_nifti_mask(d / "wm.nii"),
                wmh_truth=read_nifti_mask(d / "wmh.nii"),
                seed=entry["seed"],
                confounder=read_nifti_mask(conf_path) if conf_path.exists() else None,
            )
        )
    return cases, cfg
