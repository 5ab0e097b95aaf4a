"""Affine, thin-plate-spline and composite transforms in millimetre coordinates.

Every transform maps fixed-image points to moving-image points (pull-back).
Parameters are offsets from the identity scaled by ``alpha`` so that
``theta = 0`` is exactly the identity.

Besides ``apply`` each transform provides ``vjp(points, g)``: given per-point
gradients ``g = dL/dphi(x)`` it returns ``dL/dtheta``. Losses use this to
chain image gradients back onto the parameters.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .imgcore import Grid

ALPHA = 0.001
TPS_SHAPE = (4, 4)
TPS_MARGIN = 0.1


def _vec(theta, n: int) -> np.ndarray:
    theta = np.array(theta, dtype=float, copy=True).ravel()
    if theta.shape != (n,):
        raise ValueError(f"expected {n} parameters, got {theta.size}")
    theta.setflags(write=False)
    return theta


class AffineTransform:
    """``phi(p) = [[1+a*t1, a*t2], [a*t4, 1+a*t5]] p + a*(t3, t6)``."""

    kind = "affine"
    n_params = 6

    def __init__(self, theta=None, alpha: float = ALPHA):
        if not alpha > 0:
            raise ValueError("alpha must be positive")
        self.theta = _vec(np.zeros(6) if theta is None else theta, 6)
        self.alpha = float(alpha)
        t, a = self.theta, self.alpha
        self.matrix = np.array([[1.0 + a * t[0], a * t[1]], [a * t[3], 1.0 + a * t[4]]])
        self.translation = np.array([a * t[2], a * t[5]])

    @classmethod
    def identity(cls, alpha: float = ALPHA) -> "AffineTransform":
        return cls(np.zeros(6), alpha)

    @classmethod
    def from_matrix(cls, matrix, translation, alpha: float = ALPHA) -> "AffineTransform":
        m = np.asarray(matrix, dtype=float)
        t = np.asarray(translation, dtype=float)
        theta = np.array([m[0, 0] - 1.0, m[0, 1], t[0], m[1, 0], m[1, 1] - 1.0, t[1]]) / alpha
        return cls(theta, alpha)

    @property
    def det(self) -> float:
        return float(np.linalg.det(self.matrix))

    def check_orientation(self) -> "AffineTransform":
        if not self.det > 0:
            raise ValueError(f"affine transform is folded (det = {self.det:.4g}); refusing to warp")
        return self

    def apply(self, points) -> np.ndarray:
        p = np.asarray(points, dtype=float)
        m, t = self.matrix, self.translation
        x, y = p[..., 0], p[..., 1]
        # written out so theta = 0 returns the input bit-exact
        return np.stack([m[0, 0] * x + m[0, 1] * y + t[0], m[1, 0] * x + m[1, 1] * y + t[1]], axis=-1)

    def vjp(self, points, g) -> np.ndarray:
        p = np.asarray(points, dtype=float)
        g = np.asarray(g, dtype=float)
        gx, gy = g[:, 0], g[:, 1]
        x, y = p[:, 0], p[:, 1]
        a = self.alpha
        return a * np.array([gx @ x, gx @ y, gx.sum(), gy @ x, gy @ y, gy.sum()])

    def spatial_jacobian(self, points) -> np.ndarray:
        n = len(np.asarray(points))
        return np.broadcast_to(self.matrix, (n, 2, 2)).copy()

    def inverse(self) -> "AffineTransform":
        minv = np.linalg.inv(self.matrix)
        return AffineTransform.from_matrix(minv, -minv @ self.translation, self.alpha)

    def to_dict(self) -> dict:
        return {"type": "affine", "alpha": self.alpha, "theta": [float(v) for v in self.theta]}

    def __repr__(self):
        return f"AffineTransform(alpha={self.alpha}, theta={np.array2string(self.theta, precision=4)})"


# ---------------------------------------------------------------------------
# thin-plate spline

def control_grid(grid: Grid, shape=TPS_SHAPE, margin: float = TPS_MARGIN) -> np.ndarray:
    """``shape`` control points spanning the grid's field of view widened by ``margin`` per side."""
    xmin, ymin, xmax, ymax = grid.bounds
    dx, dy = (xmax - xmin) * margin, (ymax - ymin) * margin
    xs = np.linspace(xmin - dx, xmax + dx, shape[1])
    ys = np.linspace(ymin - dy, ymax + dy, shape[0])
    gx, gy = np.meshgrid(xs, ys)
    return np.stack([gx.ravel(), gy.ravel()], axis=1)


def _kernel(r2: np.ndarray) -> np.ndarray:
    # U(r) = r^2 log r^2, U(0) = 0
    out = np.zeros_like(r2)
    nz = r2 > 0
    out[nz] = r2[nz] * np.log(r2[nz])
    return out


_SOLVER_CACHE: dict[bytes, np.ndarray] = {}
_BASIS_CACHE: dict[tuple, tuple[np.ndarray, np.ndarray]] = {}


def tps_solver(ctrl: np.ndarray) -> np.ndarray:
    """Rows of the inverse TPS system that map control displacements to spline coefficients.

    Returns a ``(n+3, n)`` matrix ``S``; coefficients ``[w; a] = S @ v``.
    """
    key = ctrl.tobytes()
    S = _SOLVER_CACHE.get(key)
    if S is None:
        n = len(ctrl)
        d2 = ((ctrl[:, None, :] - ctrl[None, :, :]) ** 2).sum(-1)
        if np.any(d2[~np.eye(n, dtype=bool)] == 0):
            raise ValueError("TPS control points must be pairwise distinct")
        L = np.zeros((n + 3, n + 3))
        L[:n, :n] = _kernel(d2)
        L[:n, n] = 1.0
        L[:n, n + 1:] = ctrl
        L[n, :n] = 1.0
        L[n + 1:, :n] = ctrl.T
        try:
            Linv = np.linalg.inv(L)
        except np.linalg.LinAlgError as exc:
            raise ValueError("singular TPS system (degenerate control grid)") from exc
        if not np.all(np.isfinite(Linv)) or np.linalg.cond(L) > 1e14:
            raise ValueError("singular TPS system (degenerate control grid)")
        S = Linv[:, :n].copy()
        S.setflags(write=False)
        _SOLVER_CACHE[key] = S
    return S


def tps_basis(ctrl: np.ndarray, points: np.ndarray) -> np.ndarray:
    """``(N, n)`` matrix ``B`` with ``u(p) = B @ v`` for control displacements ``v``."""
    p = np.asarray(points, dtype=float)
    d2 = ((p[:, None, :] - ctrl[None, :, :]) ** 2).sum(-1)
    rows = np.concatenate([_kernel(d2), np.ones((len(p), 1)), p], axis=1)
    return rows @ tps_solver(ctrl)


def tps_basis_grad(ctrl: np.ndarray, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Spatial derivatives ``(dB/dx, dB/dy)`` of :func:`tps_basis`."""
    p = np.asarray(points, dtype=float)
    diff = p[:, None, :] - ctrl[None, :, :]
    d2 = (diff ** 2).sum(-1)
    fac = np.zeros_like(d2)
    nz = d2 > 0
    fac[nz] = 2.0 * (np.log(d2[nz]) + 1.0)
    S = tps_solver(ctrl)
    n = len(p)
    rx = np.concatenate([fac * diff[..., 0], np.zeros((n, 1)), np.ones((n, 1)), np.zeros((n, 1))], axis=1)
    ry = np.concatenate([fac * diff[..., 1], np.zeros((n, 1)), np.zeros((n, 1)), np.ones((n, 1))], axis=1)
    return rx @ S, ry @ S


def grid_basis(ctrl: np.ndarray, grid: Grid) -> np.ndarray:
    key = (ctrl.tobytes(), grid)
    hit = _BASIS_CACHE.get(key)
    if hit is None:
        pts = grid.points()
        B = tps_basis(ctrl, pts)
        B.setflags(write=False)
        hit = (pts, B)
        if len(_BASIS_CACHE) > 64:
            _BASIS_CACHE.clear()
        _BASIS_CACHE[key] = hit
    return hit[1]


class TpsTransform:
    """Thin-plate spline ``phi(p) = p + u(p)``; ``u`` interpolates ``alpha*theta`` at the control points.

    ``theta[:n]`` are x-displacements and ``theta[n:]`` y-displacements of the
    control points in row-major order.
    """

    kind = "tps"

    def __init__(self, theta, ctrl, alpha: float = ALPHA):
        if not alpha > 0:
            raise ValueError("alpha must be positive")
        ctrl = np.array(ctrl, dtype=float, copy=True).reshape(-1, 2)
        ctrl.setflags(write=False)
        self.ctrl = ctrl
        self.n_params = 2 * len(ctrl)
        self.theta = _vec(np.zeros(self.n_params) if theta is None else theta, self.n_params)
        self.alpha = float(alpha)
        self._solver = tps_solver(ctrl)  # eager: validates the grid and caches the factorisation

    @classmethod
    def identity(cls, grid: Grid, alpha: float = ALPHA) -> "TpsTransform":
        ctrl = control_grid(grid)
        return cls(np.zeros(2 * len(ctrl)), ctrl, alpha)

    @classmethod
    def for_grid(cls, theta, grid: Grid, alpha: float = ALPHA) -> "TpsTransform":
        return cls(theta, control_grid(grid), alpha)

    @property
    def displacements(self) -> np.ndarray:
        """Control-point displacements in mm, shape ``(n, 2)``."""
        n = len(self.ctrl)
        return self.alpha * np.stack([self.theta[:n], self.theta[n:]], axis=1)

    def _basis(self, points) -> np.ndarray:
        return tps_basis(self.ctrl, points)

    def displacement(self, points, basis=None) -> np.ndarray:
        B = self._basis(points) if basis is None else basis
        return B @ self.displacements

    def apply(self, points, basis=None) -> np.ndarray:
        p = np.asarray(points, dtype=float)
        return p + self.displacement(p, basis)

    def apply_grid(self, grid: Grid) -> np.ndarray:
        return self.apply(grid.points(), grid_basis(self.ctrl, grid))

    def vjp(self, points, g, basis=None) -> np.ndarray:
        B = self._basis(points) if basis is None else basis
        g = np.asarray(g, dtype=float)
        return self.alpha * np.concatenate([B.T @ g[:, 0], B.T @ g[:, 1]])

    def spatial_jacobian(self, points) -> np.ndarray:
        bx, by = tps_basis_grad(self.ctrl, points)
        d = self.displacements
        J = np.empty((len(bx), 2, 2))
        J[:, 0, 0] = 1.0 + bx @ d[:, 0]
        J[:, 0, 1] = by @ d[:, 0]
        J[:, 1, 0] = bx @ d[:, 1]
        J[:, 1, 1] = 1.0 + by @ d[:, 1]
        return J

    def to_dict(self) -> dict:
        return {"type": "tps", "alpha": self.alpha, "theta": [float(v) for v in self.theta],
                "control_grid": {"shape": list(TPS_SHAPE) if len(self.ctrl) == 16 else [len(self.ctrl), 1],
                                 "points": self.ctrl.tolist()}}

    def __repr__(self):
        return f"TpsTransform(alpha={self.alpha}, n_ctrl={len(self.ctrl)})"


class CompositeTransform:
    """``phi(p) = affine(tps(p))``: the spline refines in fixed space, the affine carries into moving space."""

    kind = "composite"

    def __init__(self, affine: AffineTransform, tps: TpsTransform):
        self.affine = affine
        self.tps = tps
        self.n_params = affine.n_params + tps.n_params

    @property
    def theta(self) -> np.ndarray:
        return np.concatenate([self.affine.theta, self.tps.theta])

    def apply(self, points) -> np.ndarray:
        return self.affine.apply(self.tps.apply(points))

    def apply_grid(self, grid: Grid) -> np.ndarray:
        return self.affine.apply(self.tps.apply_grid(grid))

    def vjp(self, points, g, wrt: str = "tps", basis=None) -> np.ndarray:
        """Gradient with respect to the ``'tps'`` or ``'affine'`` parameters (or ``'both'``)."""
        g = np.asarray(g, dtype=float)
        if wrt == "affine":
            return self.affine.vjp(self.tps.apply(points, basis), g)
        g_tps = self.tps.vjp(points, g @ self.affine.matrix, basis)
        if wrt == "tps":
            return g_tps
        if wrt == "both":
            return np.concatenate([self.affine.vjp(self.tps.apply(points, basis), g), g_tps])
        raise ValueError(f"unknown parameter block {wrt!r}")

    def spatial_jacobian(self, points) -> np.ndarray:
        return self.affine.matrix[None] @ self.tps.spatial_jacobian(points)

    def to_dict(self) -> dict:
        if self.affine.alpha != self.tps.alpha:
            raise ValueError("composite serialisation needs a shared alpha")
        d = self.tps.to_dict()
        d.update(type="composite", theta=[float(v) for v in self.theta])
        return d

    def __repr__(self):
        return f"CompositeTransform({self.affine!r}, {self.tps!r})"


Transform2D = AffineTransform | TpsTransform | CompositeTransform


def affine_apply(a: AffineTransform, p) -> np.ndarray:
    return a.apply(np.asarray(p, dtype=float))


def tps_apply(t: TpsTransform, p) -> np.ndarray:
    p = np.asarray(p, dtype=float)
    return t.apply(p.reshape(-1, 2)).reshape(p.shape)


def transform_apply(t, p) -> np.ndarray:
    p = np.asarray(p, dtype=float)
    return t.apply(p.reshape(-1, 2)).reshape(p.shape)


def transform_from_dict(d: dict):
    kind = d["type"]
    alpha = float(d["alpha"])
    theta = np.asarray(d["theta"], dtype=float)
    if kind == "affine":
        return AffineTransform(theta, alpha)
    ctrl = np.asarray(d["control_grid"]["points"], dtype=float)
    if kind == "tps":
        return TpsTransform(theta, ctrl, alpha)
    if kind == "composite":
        return CompositeTransform(AffineTransform(theta[:6], alpha), TpsTransform(theta[6:], ctrl, alpha))
    raise ValueError(f"unknown transform type {kind!r}")


def invert_points(t, y, x0=None, tol: float = 1e-11, max_iter: int = 50) -> np.ndarray:
    """Solve ``t(x) = y`` for each row of ``y`` by Newton iteration."""
    y = np.asarray(y, dtype=float).reshape(-1, 2)
    if x0 is None:
        aff = t.affine if isinstance(t, CompositeTransform) else t if isinstance(t, AffineTransform) else None
        x = aff.inverse().apply(y) if aff is not None else y.copy()
    else:
        x = np.array(x0, dtype=float).reshape(-1, 2)
    for _ in range(max_iter):
        r = t.apply(x) - y
        if np.max(np.abs(r)) < tol:
            return x
        J = t.spatial_jacobian(x)
        x = x - np.linalg.solve(J, r[..., None])[..., 0]
    r = t.apply(x) - y
    if np.max(np.abs(r)) > 1e3 * tol:
        raise ValueError(f"transform inversion did not converge (residual {np.max(np.abs(r)):.3g} mm)")
    return x


# ---------------------------------------------------------------------------
# displacement fields

@dataclass(frozen=True, eq=False)
class DisplacementField:
    grid: Grid
    u: np.ndarray  # (H, W, 2) in mm

    def __post_init__(self):
        u = np.array(self.u, dtype=float, copy=True)
        if u.shape != self.grid.shape + (2,):
            raise ValueError(f"displacement array shape {u.shape} does not match grid {self.grid.shape}")
        if not np.all(np.isfinite(u)):
            raise ValueError("displacement field contains non-finite values")
        u.setflags(write=False)
        object.__setattr__(self, "u", u)


def displacement_field(t, grid: Grid) -> DisplacementField:
    pts = grid.points()
    q = t.apply_grid(grid) if hasattr(t, "apply_grid") else t.apply(pts)
    return DisplacementField(grid, (q - pts).reshape(grid.shape + (2,)))


def negative_jacobian_fraction(t, grid: Grid) -> float:
    """Share of grid samples where the transform folds (det J <= 0). Reported, never enforced."""
    J = t.spatial_jacobian(grid.points())
    return float(np.mean(np.linalg.det(J) <= 0))


# ---------------------------------------------------------------------------
# random transforms for synthetic pairs

@dataclass(frozen=True)
class RandomTransformSpec:
    rotation_max: float = 10.0  # degrees
    scale_range: tuple[float, float] = (0.9, 1.1)
    translation_max: float = 5.0  # mm
    shear_max: float = 0.05
    tps_jitter_max: float = 3.0  # mm
    seed: int = 0

    def __post_init__(self):
        lo, hi = self.scale_range
        if not lo <= 1.0 <= hi:
            raise ValueError("scale_range must bracket 1")
        for name in ("rotation_max", "translation_max", "shear_max", "tps_jitter_max"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")
        object.__setattr__(self, "scale_range", (float(lo), float(hi)))

    @classmethod
    def zero(cls, seed: int = 0) -> "RandomTransformSpec":
        return cls(0.0, (1.0, 1.0), 0.0, 0.0, 0.0, seed)

    def to_dict(self) -> dict:
        return {"rotation_max": self.rotation_max, "scale_range": list(self.scale_range),
                "translation_max": self.translation_max, "shear_max": self.shear_max,
                "tps_jitter_max": self.tps_jitter_max, "seed": self.seed}

    @classmethod
    def from_dict(cls, d: dict) -> "RandomTransformSpec":
        d = dict(d)
        d["scale_range"] = tuple(d.get("scale_range", (0.9, 1.1)))
        return cls(**d)


@dataclass(frozen=True)
class RandomDraw:
    """The raw magnitudes behind one sampled transform."""

    rotation_deg: float
    scale: tuple[float, float]
    shear: float
    translation: tuple[float, float]
    jitter: np.ndarray = field(repr=False)


def draw_random(spec: RandomTransformSpec, rng: np.random.Generator, n_ctrl: int = 16) -> RandomDraw:
    lo, hi = spec.scale_range
    rot = rng.uniform(-spec.rotation_max, spec.rotation_max)
    sx, sy = rng.uniform(lo, hi, size=2)
    sh = rng.uniform(-spec.shear_max, spec.shear_max)
    tx, ty = rng.uniform(-spec.translation_max, spec.translation_max, size=2)
    jit = rng.uniform(-spec.tps_jitter_max, spec.tps_jitter_max, size=2 * n_ctrl)
    return RandomDraw(float(rot), (float(sx), float(sy)), float(sh), (float(tx), float(ty)), jit)


def transform_from_draw(d: RandomDraw, grid: Grid, alpha: float = ALPHA) -> CompositeTransform:
    c, s = math.cos(math.radians(d.rotation_deg)), math.sin(math.radians(d.rotation_deg))
    rot = np.array([[c, -s], [s, c]])
    m = rot @ np.diag(d.scale) @ np.array([[1.0, d.shear], [0.0, 1.0]])
    aff = AffineTransform.from_matrix(m, d.translation, alpha)
    tps = TpsTransform(d.jitter / alpha, control_grid(grid), alpha)
    return CompositeTransform(aff, tps)


def sample_random_transform(spec: RandomTransformSpec, rng: np.random.Generator, grid: Grid,
                            alpha: float = ALPHA) -> CompositeTransform:
    """Random affine (rotation, scale, shear, translation about the mm origin) plus TPS jitter."""
    return transform_from_draw(draw_random(spec, rng), grid, alpha)
