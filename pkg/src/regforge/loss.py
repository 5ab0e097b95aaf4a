"""Training losses: mono-modal intensity MSE, soft-Dice segmentation loss, and the
elastic-operator smoothness penalty, with their combinations and exact gradients.

Gradient helpers return ``(value, dL/dtheta)`` for the parameter block of the
transform passed in; the chain is loss -> warped samples -> bilinear spatial
derivative -> ``transform.vjp``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .imgcore import Grid, Image2D, Mask2D, bilinear_sample
from .transform import CompositeTransform, DisplacementField, TpsTransform, grid_basis

DICE_EPS = 1e-6


@dataclass(frozen=True)
class LossWeights:
    w_int: float = 0.05
    w_reg: float = 0.05

    def __post_init__(self):
        if self.w_int < 0 or self.w_reg < 0:
            raise ValueError("loss weights must be nonnegative")


@dataclass(frozen=True)
class RegularizerSpec:
    """Coefficients of ``L = -c_lap * laplacian - c_graddiv * grad(div) + c_id * I``."""

    c_lap: float = 0.75
    c_graddiv: float = 0.25
    c_id: float = 0.01
    grid: Grid | None = None

    def __post_init__(self):
        if min(self.c_lap, self.c_graddiv, self.c_id) < 0:
            raise ValueError("regularizer coefficients must be nonnegative")
        if not self.c_id > 0:
            raise ValueError("c_id must be positive so the operator is injective")


@dataclass(frozen=True)
class LossBreakdown:
    total: float
    seg: float
    intensity: float
    reg: float = 0.0

    def to_dict(self) -> dict:
        return {"total": self.total, "seg": self.seg, "int": self.intensity, "reg": self.reg}

    def __add__(self, other: "LossBreakdown") -> "LossBreakdown":
        return LossBreakdown(self.total + other.total, self.seg + other.seg,
                             self.intensity + other.intensity, self.reg + other.reg)


def affine_loss(seg: float, intensity: float, weights: LossWeights = LossWeights()) -> LossBreakdown:
    return LossBreakdown(seg + weights.w_int * intensity, seg, intensity, 0.0)


def deformable_loss(seg: float, intensity: float, reg: float,
                    weights: LossWeights = LossWeights()) -> LossBreakdown:
    return LossBreakdown(seg + weights.w_int * intensity + weights.w_reg * reg, seg, intensity, reg)


# ---------------------------------------------------------------------------
# intensity term

def _same_grid(*imgs) -> None:
    g = imgs[0].grid
    for im in imgs[1:]:
        if im.grid != g:
            raise ValueError("images are not on the same grid")


def mse(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.mean((np.asarray(a) - np.asarray(b)) ** 2))


def intensity_loss(i_f: Image2D, i_f_warped_back: Image2D, i_m: Image2D, i_m_warped_back: Image2D) -> float:
    """Sum of the two mono-modal mean squared errors."""
    _same_grid(i_f, i_f_warped_back)
    _same_grid(i_m, i_m_warped_back)
    return mse(i_f.data, i_f_warped_back.data) + mse(i_m.data, i_m_warped_back.data)


def _sample_points(t, grid: Grid):
    pts = grid.points()
    if isinstance(t, (TpsTransform, CompositeTransform)):
        tps = t if isinstance(t, TpsTransform) else t.tps
        basis = grid_basis(tps.ctrl, grid)
        q = tps.apply(pts, basis)
        if isinstance(t, CompositeTransform):
            q = t.affine.apply(q)
        return pts, q, basis
    return pts, t.apply(pts), None


def _vjp(t, pts, g, basis, wrt):
    if isinstance(t, CompositeTransform):
        return t.vjp(pts, g, wrt=wrt, basis=basis)
    if isinstance(t, TpsTransform):
        return t.vjp(pts, g, basis)
    return t.vjp(pts, g)


def mse_grad(ref: np.ndarray, ref_grid: Grid, moving: np.ndarray, moving_grid: Grid, t, wrt: str = "tps"):
    """``MSE(ref, moving o t)`` and its gradient with respect to ``t``'s parameters."""
    pts, q, basis = _sample_points(t, ref_grid)
    val, g_sp = bilinear_sample(moving, moving_grid, q, with_grad=True)
    r = val - ref.ravel()
    loss = float(np.mean(r * r))
    dv = (2.0 / r.size) * r
    return loss, _vjp(t, pts, dv[:, None] * g_sp, basis, wrt)


# ---------------------------------------------------------------------------
# segmentation term

def soft_dice(s_f: np.ndarray, s_w: np.ndarray, eps: float = DICE_EPS) -> float:
    inter = float(np.sum(s_f * s_w))
    return (2.0 * inter + eps) / (float(np.sum(s_f)) + float(np.sum(s_w)) + eps)


def seg_loss_grad(s_f: np.ndarray, f_grid: Grid, s_m: np.ndarray, m_grid: Grid, t, wrt: str = "tps",
                  eps: float = DICE_EPS):
    """``1 - softDice(S_f, S_m o t)`` with bilinear mask warping, and its parameter gradient."""
    pts, q, basis = _sample_points(t, f_grid)
    if not s_f.any() or not s_m.any():
        loss = 0.0 if (not s_f.any() and not s_m.any()) else 1.0
        return loss, np.zeros(_n_params(t, wrt))
    s_w, g_sp = bilinear_sample(s_m, m_grid, q, with_grad=True)
    sf = s_f.ravel()
    inter = float(sf @ s_w)
    denom = float(sf.sum()) + float(s_w.sum()) + eps
    num = 2.0 * inter + eps
    loss = 1.0 - num / denom
    d_sw = -(2.0 * sf * denom - num) / (denom * denom)
    return loss, _vjp(t, pts, d_sw[:, None] * g_sp, basis, wrt)


def _n_params(t, wrt: str) -> int:
    if isinstance(t, CompositeTransform):
        return {"tps": t.tps.n_params, "affine": 6, "both": t.n_params}[wrt]
    return t.n_params


def segmentation_loss(s_f: Mask2D, s_m: Mask2D, t) -> float:
    loss, _ = seg_loss_grad(s_f.data, s_f.grid, s_m.data, s_m.grid, t)
    return loss


# ---------------------------------------------------------------------------
# smoothness term

def _d1(n: int, h: float) -> sp.csr_matrix:
    """First derivative: central inside, one-sided at both ends (same stencil as ``np.gradient``)."""
    rows, cols, vals = [0, 0], [0, 1], [-1.0 / h, 1.0 / h]
    for i in range(1, n - 1):
        rows += [i, i]
        cols += [i - 1, i + 1]
        vals += [-0.5 / h, 0.5 / h]
    rows += [n - 1, n - 1]
    cols += [n - 2, n - 1]
    vals += [-1.0 / h, 1.0 / h]
    return sp.csr_matrix((vals, (rows, cols)), shape=(n, n))


_OPERATOR_CACHE: dict = {}


def elastic_operator(grid: Grid, spec: RegularizerSpec) -> sp.csr_matrix:
    """Sparse ``2N x 2N`` matrix of the operator acting on ``[u_x; u_y]`` (row-major samples)."""
    key = (grid, spec.c_lap, spec.c_graddiv, spec.c_id)
    op = _OPERATOR_CACHE.get(key)
    if op is None:
        h = grid.spacing
        dx = sp.kron(sp.identity(grid.height), _d1(grid.width, h), format="csr")
        dy = sp.kron(_d1(grid.height, h), sp.identity(grid.width), format="csr")
        lap = dx @ dx + dy @ dy
        eye = sp.identity(grid.width * grid.height, format="csr")
        a, b, c = spec.c_lap, spec.c_graddiv, spec.c_id
        op = sp.bmat([[-a * lap - b * (dx @ dx) + c * eye, -b * (dx @ dy)],
                      [-b * (dy @ dx), -a * lap - b * (dy @ dy) + c * eye]], format="csr")
        _OPERATOR_CACHE[key] = op
    return op


def regularization_loss(u: DisplacementField, spec: RegularizerSpec = RegularizerSpec()) -> float:
    """Discrete ``||L u||^2`` over the grid, each sample weighted by the pixel area."""
    if spec.grid is not None and spec.grid != u.grid:
        raise ValueError("displacement field is not on the regularizer grid")
    if not np.all(np.isfinite(u.u)):
        raise ValueError("displacement field contains non-finite values")
    vec = np.concatenate([u.u[..., 0].ravel(), u.u[..., 1].ravel()])
    lu = elastic_operator(u.grid, spec) @ vec
    return float(lu @ lu) * u.grid.spacing ** 2


def regularization_loss_interior(u: DisplacementField, spec: RegularizerSpec = RegularizerSpec()) -> float:
    """Same sum restricted to samples at least two pixels from the border."""
    vec = np.concatenate([u.u[..., 0].ravel(), u.u[..., 1].ravel()])
    lu = (elastic_operator(u.grid, spec) @ vec).reshape(2, *u.grid.shape)
    inner = lu[:, 2:-2, 2:-2]
    return float(np.sum(inner * inner)) * u.grid.spacing ** 2


_QUAD_CACHE: dict = {}


def tps_regularizer_matrix(tps: TpsTransform, grid: Grid, spec: RegularizerSpec = RegularizerSpec()) -> np.ndarray:
    """``Q`` with ``L_reg(theta) = theta^T Q theta`` for a TPS on ``grid``."""
    key = (tps.ctrl.tobytes(), tps.alpha, grid, spec.c_lap, spec.c_graddiv, spec.c_id)
    Q = _QUAD_CACHE.get(key)
    if Q is None:
        B = grid_basis(tps.ctrl, grid)
        n = B.shape[1]
        G = np.zeros((2 * B.shape[0], 2 * n))
        G[:B.shape[0], :n] = B
        G[B.shape[0]:, n:] = B
        LG = elastic_operator(grid, spec) @ (tps.alpha * G)
        Q = (LG.T @ LG) * grid.spacing ** 2
        Q.setflags(write=False)
        if len(_QUAD_CACHE) > 16:
            _QUAD_CACHE.clear()
        _QUAD_CACHE[key] = Q
    return Q


def reg_loss_grad(tps: TpsTransform, grid: Grid, spec: RegularizerSpec = RegularizerSpec()):
    Q = tps_regularizer_matrix(tps, grid, spec)
    q = Q @ tps.theta
    return float(tps.theta @ q), 2.0 * q


# ---------------------------------------------------------------------------
# loss-level gradient entry point

@dataclass
class PairContext:
    """Arrays a loss gradient needs: fixed/moving masks and up to two mono-modal pairs.

    ``mono`` holds ``(reference, ref_grid, warped_copy, copy_grid, transform)``
    tuples; the transform in each tuple is the one being differentiated.
    """

    s_f: np.ndarray | None = None
    f_grid: Grid | None = None
    s_m: np.ndarray | None = None
    m_grid: Grid | None = None
    mono: tuple = ()


def loss_gradient(kind: str, t, ctx: PairContext, weights: LossWeights = LossWeights(),
                  reg_spec: RegularizerSpec = RegularizerSpec(), wrt: str = "tps"):
    """Value and gradient of one loss with respect to ``t``'s parameters.

    ``kind`` is one of ``'int'``, ``'seg'``, ``'reg'``, ``'affine'``, ``'deformable'``.
    For ``'int'`` the mono transforms in ``ctx.mono`` are used and the gradient is
    returned per mono pair, concatenated.
    """
    if kind == "seg":
        return seg_loss_grad(ctx.s_f, ctx.f_grid, ctx.s_m, ctx.m_grid, t, wrt)
    if kind == "reg":
        tps = t if isinstance(t, TpsTransform) else t.tps
        return reg_loss_grad(tps, ctx.f_grid, reg_spec)
    if kind == "int":
        total, grads = 0.0, []
        for ref, rg, mov, mg, tm in ctx.mono:
            v, g = mse_grad(ref, rg, mov, mg, tm, wrt)
            total += v
            grads.append(g)
        return total, np.concatenate(grads) if grads else np.zeros(0)
    if kind in ("affine", "deformable"):
        seg, g_seg = seg_loss_grad(ctx.s_f, ctx.f_grid, ctx.s_m, ctx.m_grid, t, wrt)
        ints, g_int = loss_gradient("int", t, ctx, weights, reg_spec, wrt)
        g = [g_seg, weights.w_int * g_int]
        if kind == "affine":
            return affine_loss(seg, ints, weights).total, np.concatenate(g)
        reg, g_reg = loss_gradient("reg", t, ctx, weights, reg_spec, wrt)
        return deformable_loss(seg, ints, reg, weights).total, np.concatenate(
            [g_seg + weights.w_reg * g_reg, weights.w_int * g_int])
    raise ValueError(f"unknown loss {kind!r}")
