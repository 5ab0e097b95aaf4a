"""Physical-coordinate rasters, bilinear/nearest sampling, warping and preprocessing.

Coordinates are in millimetres. Pixel ``(i, j)`` (column ``i``, row ``j``) sits at
``origin + spacing * (i, j)``; ``data[j, i]`` holds its value.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

logger = logging.getLogger(__name__)

# fractional indices closer than this to an integer are snapped onto the node
SNAP_TOL = 1e-9


@dataclass(frozen=True)
class Grid:
    width: int
    height: int
    spacing: float
    origin: tuple[float, float] = (0.0, 0.0)

    def __post_init__(self):
        if self.width < 2 or self.height < 2:
            raise ValueError(f"grid must be at least 2x2, got {self.width}x{self.height}")
        if not self.spacing > 0:
            raise ValueError(f"spacing must be positive, got {self.spacing}")
        object.__setattr__(self, "origin", (float(self.origin[0]), float(self.origin[1])))
        object.__setattr__(self, "spacing", float(self.spacing))

    @classmethod
    def centered(cls, size_mm: float, spacing: float, center=(0.0, 0.0)) -> "Grid":
        """Square grid of ``round(size_mm / spacing)`` pixels whose field of view is centred on ``center``."""
        n = int(round(size_mm / spacing))
        half = (n - 1) * spacing / 2.0
        return cls(n, n, spacing, (center[0] - half, center[1] - half))

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height, self.width)

    @property
    def extent_mm(self) -> tuple[float, float]:
        return (self.width * self.spacing, self.height * self.spacing)

    @property
    def center(self) -> tuple[float, float]:
        return (
            self.origin[0] + (self.width - 1) * self.spacing / 2.0,
            self.origin[1] + (self.height - 1) * self.spacing / 2.0,
        )

    @property
    def bounds(self) -> tuple[float, float, float, float]:
        """Field-of-view rectangle ``(xmin, ymin, xmax, ymax)`` covering full pixel footprints."""
        h = self.spacing / 2.0
        return (
            self.origin[0] - h,
            self.origin[1] - h,
            self.origin[0] + (self.width - 1) * self.spacing + h,
            self.origin[1] + (self.height - 1) * self.spacing + h,
        )

    def points(self) -> np.ndarray:
        """Pixel-centre coordinates as an ``(H*W, 2)`` array in row-major order."""
        xs = self.origin[0] + self.spacing * np.arange(self.width)
        ys = self.origin[1] + self.spacing * np.arange(self.height)
        gx, gy = np.meshgrid(xs, ys)
        return np.stack([gx.ravel(), gy.ravel()], axis=1)

    def to_mm(self, ij) -> np.ndarray:
        ij = np.asarray(ij, dtype=float)
        return np.asarray(self.origin) + self.spacing * ij

    def to_index(self, p) -> np.ndarray:
        p = np.asarray(p, dtype=float)
        return (p - np.asarray(self.origin)) / self.spacing

    def to_dict(self) -> dict:
        return {"width": self.width, "height": self.height, "spacing": self.spacing,
                "origin": list(self.origin)}

    @classmethod
    def from_dict(cls, d: dict) -> "Grid":
        return cls(int(d["width"]), int(d["height"]), float(d["spacing"]), tuple(d["origin"]))


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=float, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Image2D:
    """Scalar raster with intensities in ``[0, 1]``."""

    grid: Grid
    data: np.ndarray

    def __post_init__(self):
        data = _frozen(self.data)
        if data.shape != self.grid.shape:
            raise ValueError(f"data shape {data.shape} does not match grid {self.grid.shape}")
        if not np.all(np.isfinite(data)):
            raise ValueError("image contains non-finite values")
        if data.min() < 0.0 or data.max() > 1.0:
            raise ValueError("image intensities must lie in [0, 1]")
        object.__setattr__(self, "data", data)

    @property
    def width(self) -> int:
        return self.grid.width

    @property
    def height(self) -> int:
        return self.grid.height

    @property
    def spacing(self) -> float:
        return self.grid.spacing

    @property
    def origin(self) -> tuple[float, float]:
        return self.grid.origin


@dataclass(frozen=True, eq=False)
class Mask2D:
    """Binary raster (values exactly 0 or 1) stored as float for arithmetic convenience."""

    grid: Grid
    data: np.ndarray

    def __post_init__(self):
        data = _frozen(self.data)
        if data.shape != self.grid.shape:
            raise ValueError(f"data shape {data.shape} does not match grid {self.grid.shape}")
        if not np.all((data == 0.0) | (data == 1.0)):
            raise ValueError("mask values must be exactly 0 or 1")
        object.__setattr__(self, "data", data)

    @property
    def count(self) -> int:
        return int(self.data.sum())

    def check_companion(self, img: Image2D) -> None:
        if self.grid != img.grid:
            raise ValueError("mask grid differs from its companion image grid")


# ---------------------------------------------------------------------------
# sampling

def _fractional_index(grid: Grid, points: np.ndarray):
    f = (np.asarray(points, dtype=float) - np.asarray(grid.origin)) / grid.spacing
    r = np.round(f)
    return np.where(np.abs(f - r) < SNAP_TOL, r, f)


def bilinear_sample(data: np.ndarray, grid: Grid, points: np.ndarray, with_grad: bool = False):
    """Bilinear interpolation of ``data`` at ``points`` (``(N, 2)`` mm).

    Points outside the hull of pixel centres sample 0. With ``with_grad`` the
    spatial gradient (per mm) is returned too; at a node the average of the two
    adjacent one-sided slopes is used.
    """
    f = _fractional_index(grid, points)
    fx, fy = f[:, 0], f[:, 1]
    W, H = grid.width, grid.height
    inside = (fx >= 0) & (fx <= W - 1) & (fy >= 0) & (fy <= H - 1)
    fxc = np.clip(fx, 0, W - 1)
    fyc = np.clip(fy, 0, H - 1)
    i0 = np.minimum(np.floor(fxc).astype(int), W - 2)
    j0 = np.minimum(np.floor(fyc).astype(int), H - 2)
    tx = fxc - i0
    ty = fyc - j0
    v00 = data[j0, i0]
    v10 = data[j0, i0 + 1]
    v01 = data[j0 + 1, i0]
    v11 = data[j0 + 1, i0 + 1]
    val = (1 - tx) * (1 - ty) * v00 + tx * (1 - ty) * v10 + (1 - tx) * ty * v01 + tx * ty * v11
    val = np.where(inside, val, 0.0)
    if not with_grad:
        return val

    gx = (1 - ty) * (v10 - v00) + ty * (v11 - v01)
    gy = (1 - tx) * (v01 - v00) + tx * (v11 - v10)

    # nodes: average the left/right (up/down) cell slopes where both exist
    node_x = (tx == 0) & (i0 > 0)
    if np.any(node_x):
        k = np.nonzero(node_x)[0]
        a, b, ty_k = i0[k], j0[k], ty[k]
        left = (1 - ty_k) * (data[b, a] - data[b, a - 1]) + ty_k * (data[b + 1, a] - data[b + 1, a - 1])
        gx[k] = 0.5 * (gx[k] + left)
    node_xr = (tx == 1) & (i0 + 1 < W - 1)
    if np.any(node_xr):
        k = np.nonzero(node_xr)[0]
        a, b, ty_k = i0[k] + 1, j0[k], ty[k]
        right = (1 - ty_k) * (data[b, a + 1] - data[b, a]) + ty_k * (data[b + 1, a + 1] - data[b + 1, a])
        gx[k] = 0.5 * (gx[k] + right)
    node_y = (ty == 0) & (j0 > 0)
    if np.any(node_y):
        k = np.nonzero(node_y)[0]
        a, b, tx_k = i0[k], j0[k], tx[k]
        up = (1 - tx_k) * (data[b, a] - data[b - 1, a]) + tx_k * (data[b, a + 1] - data[b - 1, a + 1])
        gy[k] = 0.5 * (gy[k] + up)
    node_yr = (ty == 1) & (j0 + 1 < H - 1)
    if np.any(node_yr):
        k = np.nonzero(node_yr)[0]
        a, b, tx_k = i0[k], j0[k] + 1, tx[k]
        down = (1 - tx_k) * (data[b + 1, a] - data[b, a]) + tx_k * (data[b + 1, a + 1] - data[b, a + 1])
        gy[k] = 0.5 * (gy[k] + down)

    grad = np.stack([gx, gy], axis=1) / grid.spacing
    grad[~inside] = 0.0
    return val, grad


def nearest_sample(data: np.ndarray, grid: Grid, points: np.ndarray) -> np.ndarray:
    f = _fractional_index(grid, points)
    i = np.floor(f[:, 0] + 0.5).astype(int)
    j = np.floor(f[:, 1] + 0.5).astype(int)
    inside = (i >= 0) & (i < grid.width) & (j >= 0) & (j < grid.height)
    out = np.zeros(len(f))
    out[inside] = data[j[inside], i[inside]]
    return out


def sample_bilinear(img: Image2D | Mask2D, p) -> float:
    """Bilinear value of ``img`` at a single physical point (0 outside the pixel-centre hull)."""
    return float(bilinear_sample(img.data, img.grid, np.asarray(p, dtype=float).reshape(1, 2))[0])


def warp(img: Image2D | Mask2D, t, out_grid: Grid | None = None, mode: str = "bilinear",
         binary: bool | None = None):
    """Pull-back warp: output pixel ``x`` takes ``img`` sampled at ``t(x)``.

    ``t`` is any object with ``apply(points)`` (or ``None`` for identity).
    A :class:`Mask2D` requires ``mode='nearest'`` unless ``binary=False``, in
    which case a soft (fractional) array is returned instead of a Mask2D.
    """
    out_grid = out_grid or img.grid
    is_mask = isinstance(img, Mask2D)
    if binary is None:
        binary = is_mask
    if mode not in ("bilinear", "nearest"):
        raise ValueError(f"unknown interpolation mode {mode!r}")
    if is_mask and binary and mode != "nearest":
        raise ValueError("bilinear warping of a mask cannot give a binary result; use mode='nearest'")

    if t is None:
        q = out_grid.points()
    elif hasattr(t, "apply_grid"):
        q = t.apply_grid(out_grid)
    else:
        q = t.apply(out_grid.points())
    if mode == "bilinear":
        vals = bilinear_sample(img.data, img.grid, q)
    else:
        vals = nearest_sample(img.data, img.grid, q)
    vals = vals.reshape(out_grid.shape)
    if is_mask:
        return Mask2D(out_grid, vals) if binary else vals
    return Image2D(out_grid, np.clip(vals, 0.0, 1.0))


def resample(img: Image2D | Mask2D, out_grid: Grid):
    """Identity warp onto another grid (bilinear for images, nearest for masks)."""
    return warp(img, None, out_grid, mode="nearest" if isinstance(img, Mask2D) else "bilinear")


# ---------------------------------------------------------------------------
# preprocessing

def _with_data(img, grid: Grid, data: np.ndarray):
    return type(img)(grid, data)


def crop_center(img: Image2D | Mask2D, size_mm: float):
    if not size_mm > 0:
        raise ValueError("crop size must be positive")
    g = img.grid
    w = int(round(size_mm / g.spacing))
    h = w
    if w > g.width or h > g.height:
        raise ValueError(
            f"image field of view {g.extent_mm} mm is smaller than the {size_mm} mm crop window")
    i0 = (g.width - w) // 2
    j0 = (g.height - h) // 2
    out = Grid(w, h, g.spacing, (g.origin[0] + i0 * g.spacing, g.origin[1] + j0 * g.spacing))
    return _with_data(img, out, img.data[j0:j0 + h, i0:i0 + w])


def pad_to(img: Image2D | Mask2D, size_mm: float, fill: float = 0.0):
    g = img.grid
    w = int(round(size_mm / g.spacing))
    h = w
    if w < g.width or h < g.height:
        raise ValueError(f"cannot pad a {g.extent_mm} mm image down to {size_mm} mm")
    i0 = (w - g.width) // 2
    j0 = (h - g.height) // 2
    data = np.full((h, w), float(fill))
    data[j0:j0 + g.height, i0:i0 + g.width] = img.data
    out = Grid(w, h, g.spacing, (g.origin[0] - i0 * g.spacing, g.origin[1] - j0 * g.spacing))
    return _with_data(img, out, data)


def fit_window(img: Image2D | Mask2D, size_mm: float, fill: float = 0.0):
    """Crop or pad (centred) so the field of view is ``size_mm`` square."""
    g = img.grid
    w = int(round(size_mm / g.spacing))
    if g.width >= w and g.height >= w:
        return crop_center(img, size_mm)
    if g.width <= w and g.height <= w:
        return pad_to(img, size_mm, fill)
    # one axis too large, one too small
    big = max(g.width, g.height) * g.spacing
    return crop_center(pad_to(img, big, fill), size_mm)


def recenter(img: Image2D | Mask2D, center=(0.0, 0.0)):
    """Shift the origin so the grid centre lands on ``center``; data untouched."""
    g = img.grid
    cx, cy = g.center
    out = Grid(g.width, g.height, g.spacing,
               (g.origin[0] + center[0] - cx, g.origin[1] + center[1] - cy))
    return _with_data(img, out, img.data)


# ---------------------------------------------------------------------------
# intensity standardization

DECILES = np.linspace(0.0, 100.0, 11)


@dataclass(frozen=True, eq=False)
class HistogramStandard:
    decile_landmarks: np.ndarray

    def __post_init__(self):
        lm = _frozen(self.decile_landmarks)
        if lm.shape != (11,):
            raise ValueError("a histogram standard needs exactly 11 decile landmarks")
        if np.any(np.diff(lm) < 0):
            raise ValueError("histogram standard landmarks must be nondecreasing")
        if lm[0] < 0 or lm[-1] > 1:
            raise ValueError("histogram standard landmarks must lie in [0, 1]")
        object.__setattr__(self, "decile_landmarks", lm)

    @classmethod
    def from_image(cls, img: Image2D) -> "HistogramStandard":
        return cls(decile_landmarks(img))

    @classmethod
    def load(cls, path) -> "HistogramStandard":
        d = json.loads(Path(path).read_text())
        if isinstance(d, dict):
            d = d["decile_landmarks"]
        return cls(np.asarray(d, dtype=float))


def decile_landmarks(img: Image2D) -> np.ndarray:
    return np.percentile(img.data, DECILES)


def standardize_intensity(img: Image2D, std: HistogramStandard) -> Image2D:
    """Piecewise-linear map taking the image's deciles onto ``std``'s landmarks."""
    if not isinstance(std, HistogramStandard):
        std = HistogramStandard(np.asarray(std, dtype=float))
    src = decile_landmarks(img)
    if src[-1] == src[0]:
        return img
    # collapse tied source landmarks so the interpolation abscissae increase strictly
    keep = np.concatenate([np.diff(src) > 0, [True]])
    xp, fp = src[keep], std.decile_landmarks[keep]
    if xp[0] > src[0]:
        xp = np.concatenate([[src[0]], xp])
        fp = np.concatenate([[std.decile_landmarks[0]], fp])
    out = np.interp(img.data, xp, fp)
    return Image2D(img.grid, np.clip(out, 0.0, 1.0))


# ---------------------------------------------------------------------------
# file I/O: PNG + JSON sidecar

def _sidecar(path: Path) -> Path:
    return path.with_suffix(".json")


def save_image(img: Image2D, path, bits: int = 16) -> None:
    path = Path(path)
    if bits == 16:
        arr = np.round(img.data * 65535.0).astype(np.uint16)
        Image.fromarray(arr).save(path)
    elif bits == 8:
        Image.fromarray(np.round(img.data * 255.0).astype(np.uint8)).save(path)
    else:
        raise ValueError("bits must be 8 or 16")
    _sidecar(path).write_text(json.dumps(
        {"spacing_mm": img.spacing, "origin_mm": list(img.origin)}, indent=1) + "\n")


def _read_grid(png: Path, shape) -> Grid:
    meta = json.loads(_sidecar(png).read_text())
    return Grid(shape[1], shape[0], float(meta["spacing_mm"]), tuple(meta["origin_mm"]))


def load_image(path, normalize: bool = True) -> Image2D:
    """Read a grayscale PNG plus sidecar; intensities are min-max normalised by default."""
    path = Path(path)
    with Image.open(path) as im:
        raw = np.asarray(im)
    if raw.ndim != 2:
        raise ValueError(f"{path}: expected a single-channel grayscale PNG")
    full = 65535.0 if raw.dtype == np.uint16 or raw.max() > 255 else 255.0
    data = raw.astype(float) / full
    if normalize:
        lo, hi = data.min(), data.max()
        if hi > lo:
            data = (data - lo) / (hi - lo)
    return Image2D(_read_grid(path, data.shape), np.clip(data, 0.0, 1.0))


def save_mask(mask: Mask2D, path, write_sidecar: bool = False) -> None:
    path = Path(path)
    Image.fromarray((mask.data * 255).astype(np.uint8)).save(path)
    if write_sidecar:
        _sidecar(path).write_text(json.dumps(
            {"spacing_mm": mask.grid.spacing, "origin_mm": list(mask.grid.origin)}, indent=1) + "\n")


def load_mask(path, grid: Grid | None = None) -> Mask2D:
    """Read a {0,255} PNG mask; the grid comes from ``grid`` or from the mask's own sidecar."""
    path = Path(path)
    with Image.open(path) as im:
        raw = np.asarray(im)
    if raw.ndim != 2:
        raise ValueError(f"{path}: expected a single-channel mask PNG")
    if grid is None:
        grid = _read_grid(path, raw.shape)
    return Mask2D(grid, (raw > 127).astype(float))
