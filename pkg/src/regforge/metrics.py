"""Evaluation metrics on hard masks and landmark sets, plus table aggregation."""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy.spatial.distance import cdist

from .imgcore import Mask2D

STAGES = ("input", "affine", "composite")
METRIC_COLUMNS = ("dice", "hausdorff_mm", "urethra_dev_mm", "landmark_err_mm")


@dataclass(frozen=True, eq=False)
class LandmarkSet:
    points: np.ndarray

    def __post_init__(self):
        p = np.array(self.points, dtype=float, copy=True).reshape(-1, 2)
        if len(p) < 1:
            raise ValueError("a landmark set needs at least one point")
        if not np.all(np.isfinite(p)):
            raise ValueError("landmark coordinates must be finite")
        p.setflags(write=False)
        object.__setattr__(self, "points", p)

    def __len__(self):
        return len(self.points)


@dataclass
class MetricsRow:
    case_id: str
    stage: str
    dice: float | None
    hausdorff_mm: float | None
    urethra_dev_mm: float | None = None
    landmark_err_mm: float | None = None


def _check_same_grid(a: Mask2D, b: Mask2D) -> None:
    if a.grid != b.grid:
        raise ValueError("masks are on different grids")


def dice_coefficient(a: Mask2D, b: Mask2D) -> float:
    _check_same_grid(a, b)
    na, nb = a.data.sum(), b.data.sum()
    if na + nb == 0:
        raise ValueError("Dice is undefined for two empty masks")
    return float(2.0 * np.sum(a.data * b.data) / (na + nb))


def boundary_pixels(m: Mask2D) -> np.ndarray:
    """Inner 4-connected boundary as ``(N, 2)`` mm coordinates of pixel centres."""
    d = m.data > 0.5
    p = np.pad(d, 1, constant_values=False)
    interior = p[:-2, 1:-1] & p[2:, 1:-1] & p[1:-1, :-2] & p[1:-1, 2:]
    jj, ii = np.nonzero(d & ~interior)
    return m.grid.to_mm(np.stack([ii, jj], axis=1))


def hausdorff_distance(a: Mask2D, b: Mask2D) -> float:
    _check_same_grid(a, b)
    if not a.data.any() or not b.data.any():
        raise ValueError("Hausdorff distance needs two nonempty masks")
    pa, pb = boundary_pixels(a), boundary_pixels(b)
    d = cdist(pa, pb)
    return float(max(d.min(axis=1).max(), d.min(axis=0).max()))


def mean_landmark_error(p_fixed: LandmarkSet, p_moving: LandmarkSet, t=None) -> float:
    """Mean of ``||p'_i - t(p_i)||`` (``t=None`` is the identity)."""
    pf = p_fixed.points if isinstance(p_fixed, LandmarkSet) else LandmarkSet(p_fixed).points
    pm = p_moving.points if isinstance(p_moving, LandmarkSet) else LandmarkSet(p_moving).points
    if len(pf) != len(pm):
        raise ValueError(f"landmark count mismatch: {len(pf)} fixed vs {len(pm)} moving")
    q = pf if t is None else t.apply(pf)
    return float(np.mean(np.linalg.norm(pm - q, axis=1)))


def urethra_deviation(u_fixed, u_moving, t=None) -> float:
    if u_fixed is None or u_moving is None:
        raise ValueError("urethra deviation needs both urethra centres")
    return mean_landmark_error(LandmarkSet([u_fixed]), LandmarkSet([u_moving]), t)


# ---------------------------------------------------------------------------
# aggregation

def fmt_cell(mean: float, std: float) -> str:
    return f"{mean:.2f} (± {std:.2f})"


def aggregate_table(rows: list[MetricsRow], group_by=("stage",)) -> dict:
    """Mean and population std per group and metric, with Table-1-style cells."""
    groups: dict[str, list[MetricsRow]] = {}
    for r in rows:
        key = "/".join(str(getattr(r, g)) for g in group_by)
        groups.setdefault(key, []).append(r)
    table = {}
    for key, rs in groups.items():
        entry = {"n": len(rs)}
        for col in METRIC_COLUMNS:
            vals = np.array([getattr(r, col) for r in rs if getattr(r, col) is not None], dtype=float)
            if len(vals) == 0:
                continue
            m, s = float(vals.mean()), float(vals.std(ddof=0))
            entry[col] = {"mean": m, "std": s, "cell": fmt_cell(m, s)}
        table[key] = entry
    return table


def render_table(table: dict) -> str:
    header = ["group", "Dice", "Hausdorff", "Urethra", "Landmark"]
    lines = [" | ".join(header)]
    for key, entry in table.items():
        cells = [entry.get(c, {}).get("cell", "-") for c in METRIC_COLUMNS]
        lines.append(" | ".join([key, *cells]))
    return "\n".join(lines)


def write_metrics_csv(rows: list[MetricsRow], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["case_id", "stage", *METRIC_COLUMNS])
        for r in rows:
            w.writerow([r.case_id, r.stage] + ["" if getattr(r, c) is None else repr(float(getattr(r, c)))
                                               for c in METRIC_COLUMNS])


def read_metrics_csv(path) -> list[MetricsRow]:
    rows = []
    with open(path, newline="") as fh:
        for rec in csv.DictReader(fh):
            vals = {c: (float(rec[c]) if rec[c] != "" else None) for c in METRIC_COLUMNS}
            rows.append(MetricsRow(rec["case_id"], rec["stage"], **vals))
    return rows


def write_summary_json(rows: list[MetricsRow], path) -> dict:
    table = aggregate_table(rows)
    Path(path).write_text(json.dumps({"table": table, "rows": [asdict(r) for r in rows]}, indent=1) + "\n")
    return table
