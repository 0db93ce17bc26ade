"""The five challenge evaluation metrics and the rank-aggregation scheme.

Voxel-overlap metrics (Dice, AVD%) work on voxel counts; the modified
Hausdorff distance (H95) works on border-voxel centers in mm; the lesion
metrics (recall, F-1) work on connected components, where a component
counts as detected when it shares at least one voxel with the other mask.

Empty-mask conventions: both-empty Dice is 1.0; H95 is undefined unless
both masks are nonempty; AVD% is undefined for an empty ground truth.
Undefined values surface as None and are excluded from team averages,
with the exclusion count reported.

The 95th percentile is nearest-rank: the element at 1-based position
ceil(0.95 * n) of the ascending sorted distances, computed with integer
arithmetic (ceil(19n/20)) to avoid float rounding at exact multiples.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .morphology import border_voxels, connected_components
from .volume_io import BinaryMask3D

HIGHER_BETTER = ("dice", "recall", "f1")
LOWER_BETTER = ("h95", "avd_percent")
METRIC_ORDER = ("dice", "h95", "avd_percent", "recall", "f1")

CASE_CSV_COLUMNS = (
    "case_id",
    "dice",
    "h95_mm",
    "avd_percent",
    "lesion_recall",
    "lesion_f1",
    "h95_defined",
    "avd_defined",
)
TEAM_CSV_COLUMNS = ("team", "dice", "h95", "avd_percent", "recall", "f1")
RANK_CSV_COLUMNS = (
    "team",
    "dice_rank",
    "h95_rank",
    "avd_rank",
    "recall_rank",
    "f1_rank",
    "overall_rank",
)


@dataclass
class CaseMetrics:
    """Per-case record of the five metrics; None marks undefined."""

    dice: float
    h95_mm: float | None
    avd_percent: float | None
    lesion_recall: float
    lesion_f1: float


@dataclass
class TeamSummary:
    """Per-team metric averages over a shared case set."""

    team: str
    dice: float
    h95: float
    avd_percent: float
    recall: float
    f1: float
    h95_undefined_count: int = 0
    avd_undefined_count: int = 0


@dataclass
class RankTable:
    teams: list[str]
    ranks: dict[str, list[float]]  # metric name -> per-team rank in [0, 1]
    overall: list[float] = field(default_factory=list)

    def rank_of(self, team: str, metric: str) -> float:
        return self.ranks[metric][self.teams.index(team)]

    def overall_of(self, team: str) -> float:
        return self.overall[self.teams.index(team)]


def _check_grids(pred: BinaryMask3D, gt: BinaryMask3D) -> None:
    if pred.data.shape != gt.data.shape:
        raise ValueError(f"grid mismatch: {pred.data.shape} vs {gt.data.shape}")
    if pred.spacing != gt.spacing:
        raise ValueError(f"spacing mismatch: {pred.spacing} vs {gt.spacing}")


def dice(pred: BinaryMask3D, gt: BinaryMask3D) -> float:
    """2|P n G| / (|P| + |G|); 1.0 when both masks are empty."""
    _check_grids(pred, gt)
    p = int(np.count_nonzero(pred.data))
    g = int(np.count_nonzero(gt.data))
    if p + g == 0:
        return 1.0
    inter = int(np.count_nonzero(pred.data & gt.data))
    return 2.0 * inter / (p + g)


def _nearest_rank_95(sorted_distances: np.ndarray) -> float:
    n = sorted_distances.size
    idx = (19 * n + 19) // 20 - 1  # ceil(0.95 n) in exact integer arithmetic
    return float(sorted_distances[idx])


def h95(
    pred: BinaryMask3D,
    gt: BinaryMask3D,
    spacing: tuple[float, float, float] | None = None,
) -> float:
    """Modified Hausdorff distance in mm: max over both directions of the
    95th-percentile nearest distance between border-voxel centers."""
    _check_grids(pred, gt)
    if pred.voxel_count() == 0 or gt.voxel_count() == 0:
        raise ValueError("h95 undefined for an empty mask")
    sp = np.asarray(spacing if spacing is not None else pred.spacing, dtype=np.float64)
    a = border_voxels(pred).astype(np.float64) * sp
    b = border_voxels(gt).astype(np.float64) * sp
    d_ab = np.sort(cKDTree(b).query(a)[0])
    d_ba = np.sort(cKDTree(a).query(b)[0])
    return max(_nearest_rank_95(d_ab), _nearest_rank_95(d_ba))


def avd_percent(pred: BinaryMask3D, gt: BinaryMask3D) -> float:
    """100 * | |P| - |G| | / |G| in voxel counts (spacing cancels)."""
    _check_grids(pred, gt)
    g = int(np.count_nonzero(gt.data))
    if g == 0:
        raise ValueError("avd undefined for empty ground truth")
    p = int(np.count_nonzero(pred.data))
    return 100.0 * abs(p - g) / g


def lesion_recall(pred: BinaryMask3D, gt: BinaryMask3D, connectivity: int = 26) -> float:
    """Fraction of ground-truth components touched by the prediction.

    Empty ground truth counts as fully recalled (1.0).
    """
    _check_grids(pred, gt)
    lab = connected_components(gt, connectivity)
    if lab.count == 0:
        return 1.0
    hit = np.unique(lab.labels[pred.data > 0])
    hit = hit[hit > 0]
    return hit.size / lab.count


def lesion_f1(pred: BinaryMask3D, gt: BinaryMask3D, connectivity: int = 26) -> float:
    """Component-level F-1: precision over predicted components, recall
    over ground-truth components, 0 when precision + recall is 0.

    An empty prediction has precision 1.0 against an empty ground truth
    (nothing predicted, nothing to find) and 0.0 otherwise.
    """
    _check_grids(pred, gt)
    pred_lab = connected_components(pred, connectivity)
    if pred_lab.count == 0:
        precision = 1.0 if int(np.count_nonzero(gt.data)) == 0 else 0.0
    else:
        hit = np.unique(pred_lab.labels[gt.data > 0])
        hit = hit[hit > 0]
        precision = hit.size / pred_lab.count
    recall = lesion_recall(pred, gt, connectivity)
    if precision + recall == 0.0:
        return 0.0
    return 2.0 * precision * recall / (precision + recall)


def evaluate_case(
    pred: BinaryMask3D,
    gt: BinaryMask3D,
    spacing: tuple[float, float, float] | None = None,
    connectivity: int = 26,
) -> CaseMetrics:
    """Bundle the five metrics, propagating undefined flags as None."""
    _check_grids(pred, gt)
    d = dice(pred, gt)
    try:
        h = h95(pred, gt, spacing)
    except ValueError:
        h = None
    try:
        a = avd_percent(pred, gt)
    except ValueError:
        a = None
    r = lesion_recall(pred, gt, connectivity)
    f1 = lesion_f1(pred, gt, connectivity)
    return CaseMetrics(dice=d, h95_mm=h, avd_percent=a, lesion_recall=r, lesion_f1=f1)


def summarize_cases(team: str, cases: list[CaseMetrics]) -> TeamSummary:
    """Average per-case metrics; undefined cases are excluded from the
    affected metric's average and counted."""
    if not cases:
        raise ValueError("no cases to summarize")
    h95_vals = [c.h95_mm for c in cases if c.h95_mm is not None]
    avd_vals = [c.avd_percent for c in cases if c.avd_percent is not None]
    return TeamSummary(
        team=team,
        dice=float(np.mean([c.dice for c in cases])),
        h95=float(np.mean(h95_vals)) if h95_vals else float("nan"),
        avd_percent=float(np.mean(avd_vals)) if avd_vals else float("nan"),
        recall=float(np.mean([c.lesion_recall for c in cases])),
        f1=float(np.mean([c.lesion_f1 for c in cases])),
        h95_undefined_count=len(cases) - len(h95_vals),
        avd_undefined_count=len(cases) - len(avd_vals),
    )


def rank_teams(summaries: list[TeamSummary]) -> RankTable:
    """Min-max rank per metric in [0, 1], 0 best; overall is the mean of
    the five. A degenerate metric range ranks every team 0 on it."""
    if len(summaries) < 2:
        raise ValueError("ranking needs at least 2 teams")
    teams = [s.team for s in summaries]
    values = {
        "dice": [s.dice for s in summaries],
        "h95": [s.h95 for s in summaries],
        "avd_percent": [s.avd_percent for s in summaries],
        "recall": [s.recall for s in summaries],
        "f1": [s.f1 for s in summaries],
    }
    ranks: dict[str, list[float]] = {}
    for metric in METRIC_ORDER:
        vals = values[metric]
        lo, hi = min(vals), max(vals)
        if hi == lo:
            ranks[metric] = [0.0] * len(vals)
        elif metric in LOWER_BETTER:
            ranks[metric] = [(v - lo) / (hi - lo) for v in vals]
        else:
            ranks[metric] = [1.0 - (v - lo) / (hi - lo) for v in vals]
    overall = [
        float(np.mean([ranks[m][i] for m in METRIC_ORDER])) for i in range(len(teams))
    ]
    return RankTable(teams=teams, ranks=ranks, overall=overall)


# ---------------------------------------------------------------------------
# CSV / JSON interchange


def write_case_csv(path: str | Path, rows: list[tuple[str, CaseMetrics]]) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(CASE_CSV_COLUMNS)
        for case_id, m in rows:
            w.writerow(
                [
                    case_id,
                    repr(m.dice),
                    "" if m.h95_mm is None else repr(m.h95_mm),
                    "" if m.avd_percent is None else repr(m.avd_percent),
                    repr(m.lesion_recall),
                    repr(m.lesion_f1),
                    0 if m.h95_mm is None else 1,
                    0 if m.avd_percent is None else 1,
                ]
            )


def read_team_summaries(path: str | Path) -> list[TeamSummary]:
    """Read a team-summary CSV (columns: team, dice, h95, avd_percent,
    recall, f1)."""
    out: list[TeamSummary] = []
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        missing = set(TEAM_CSV_COLUMNS) - set(reader.fieldnames or ())
        if missing:
            raise ValueError(f"team CSV missing columns: {sorted(missing)}")
        for row in reader:
            out.append(
                TeamSummary(
                    team=row["team"],
                    dice=float(row["dice"]),
                    h95=float(row["h95"]),
                    avd_percent=float(row["avd_percent"]),
                    recall=float(row["recall"]),
                    f1=float(row["f1"]),
                )
            )
    return out


def write_rank_csv(path: str | Path, table: RankTable) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(RANK_CSV_COLUMNS)
        for i, team in enumerate(table.teams):
            w.writerow(
                [team]
                + [repr(table.ranks[m][i]) for m in METRIC_ORDER]
                + [repr(table.overall[i])]
            )


def rank_table_to_dict(table: RankTable) -> dict:
    return {
        "teams": table.teams,
        "ranks": {m: table.ranks[m] for m in METRIC_ORDER},
        "overall": table.overall,
    }


def write_rank_json(path: str | Path, table: RankTable) -> None:
    Path(path).write_text(json.dumps(rank_table_to_dict(table), indent=2, sort_keys=True))
