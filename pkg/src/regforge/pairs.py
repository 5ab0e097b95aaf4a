"""The ``PairSample`` training/evaluation unit and its on-disk case-directory layout.

Case directory::

    fixed.png/.json  moving.png/.json  fixed_mask.png  moving_mask.png
    landmarks.json   cancer_label.png  (optional)
"""
from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .imgcore import Grid, Image2D, Mask2D, load_image, load_mask, resample, save_image, save_mask


@dataclass(frozen=True, eq=False)
class PairSample:
    i_f: Image2D
    i_m: Image2D
    s_f: Mask2D | None = None
    s_m: Mask2D | None = None
    landmarks_f: np.ndarray | None = None
    landmarks_m: np.ndarray | None = None
    urethra_f: tuple[float, float] | None = None
    urethra_m: tuple[float, float] | None = None
    cancer_label_m: Mask2D | None = None
    case_id: str = ""

    def __post_init__(self):
        if self.s_f is not None:
            self.s_f.check_companion(self.i_f)
        if self.s_m is not None:
            self.s_m.check_companion(self.i_m)
        if (self.landmarks_f is None) != (self.landmarks_m is None):
            raise ValueError("landmarks must be given for both images or neither")
        if self.landmarks_f is not None:
            lf = np.asarray(self.landmarks_f, dtype=float).reshape(-1, 2)
            lm = np.asarray(self.landmarks_m, dtype=float).reshape(-1, 2)
            if len(lf) != len(lm):
                raise ValueError("fixed and moving landmark lists differ in length")
            object.__setattr__(self, "landmarks_f", lf)
            object.__setattr__(self, "landmarks_m", lm)

    @property
    def has_masks(self) -> bool:
        return self.s_f is not None and self.s_m is not None

    def at_resolution(self, grid_f: Grid, grid_m: Grid | None = None) -> "PairSample":
        """Resample rasters (bilinear images, nearest masks) onto working grids; points are unchanged."""
        grid_m = grid_m or grid_f
        same_f = self.i_f.grid == grid_f
        same_m = self.i_m.grid == grid_m
        return replace(
            self,
            i_f=self.i_f if same_f else resample(self.i_f, grid_f),
            i_m=self.i_m if same_m else resample(self.i_m, grid_m),
            s_f=None if self.s_f is None else (self.s_f if same_f else resample(self.s_f, grid_f)),
            s_m=None if self.s_m is None else (self.s_m if same_m else resample(self.s_m, grid_m)),
            cancer_label_m=None if self.cancer_label_m is None else (
                self.cancer_label_m if same_m else resample(self.cancer_label_m, grid_m)),
        )


def save_case(sample: PairSample, case_dir) -> list[Path]:
    d = Path(case_dir)
    d.mkdir(parents=True, exist_ok=True)
    save_image(sample.i_f, d / "fixed.png")
    save_image(sample.i_m, d / "moving.png")
    written = [d / "fixed.png", d / "fixed.json", d / "moving.png", d / "moving.json"]
    if sample.s_f is not None:
        save_mask(sample.s_f, d / "fixed_mask.png")
        written.append(d / "fixed_mask.png")
    if sample.s_m is not None:
        save_mask(sample.s_m, d / "moving_mask.png")
        written.append(d / "moving_mask.png")
    if sample.cancer_label_m is not None:
        save_mask(sample.cancer_label_m, d / "cancer_label.png")
        written.append(d / "cancer_label.png")
    lm = {}
    if sample.landmarks_f is not None:
        lm["fixed"] = sample.landmarks_f.tolist()
        lm["moving"] = sample.landmarks_m.tolist()
    if sample.urethra_f is not None:
        lm["urethra_fixed"] = [float(v) for v in sample.urethra_f]
    if sample.urethra_m is not None:
        lm["urethra_moving"] = [float(v) for v in sample.urethra_m]
    if lm:
        (d / "landmarks.json").write_text(json.dumps(lm, indent=1) + "\n")
        written.append(d / "landmarks.json")
    return written


def load_case(case_dir, masks: bool = True, normalize: bool = True) -> PairSample:
    """Read a case directory. With ``masks=False`` no mask file is opened."""
    d = Path(case_dir)
    for name in ("fixed.png", "moving.png"):
        if not (d / name).exists():
            raise FileNotFoundError(f"case {d.name}: missing {name}")
    i_f = load_image(d / "fixed.png", normalize=normalize)
    i_m = load_image(d / "moving.png", normalize=normalize)
    s_f = s_m = cancer = None
    if masks:
        if (d / "fixed_mask.png").exists():
            s_f = load_mask(d / "fixed_mask.png", i_f.grid)
        if (d / "moving_mask.png").exists():
            s_m = load_mask(d / "moving_mask.png", i_m.grid)
    if (d / "cancer_label.png").exists():
        cancer = load_mask(d / "cancer_label.png", i_m.grid)
    lf = lm = uf = um = None
    if (d / "landmarks.json").exists():
        rec = json.loads((d / "landmarks.json").read_text())
        if "fixed" in rec:
            lf, lm = np.asarray(rec["fixed"], dtype=float), np.asarray(rec["moving"], dtype=float)
        uf = tuple(rec["urethra_fixed"]) if "urethra_fixed" in rec else None
        um = tuple(rec["urethra_moving"]) if "urethra_moving" in rec else None
    return PairSample(i_f, i_m, s_f, s_m, lf, lm, uf, um, cancer, case_id=d.name)


def list_cases(dataset_dir) -> list[Path]:
    d = Path(dataset_dir)
    manifest = d / "manifest.json"
    if manifest.exists():
        cases = json.loads(manifest.read_text())["cases"]
        return [d / c["case_id"] for c in cases]
    return sorted(p for p in d.iterdir() if p.is_dir() and (p / "fixed.png").exists())


def load_dataset(dataset_dir, masks: bool = True) -> list[PairSample]:
    out = []
    for c in list_cases(dataset_dir):
        try:
            out.append(load_case(c, masks=masks))
        except (OSError, ValueError, KeyError) as exc:
            raise ValueError(f"malformed case {c.name}: {exc}") from exc
    return out
