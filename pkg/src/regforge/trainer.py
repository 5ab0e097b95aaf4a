"""Weakly supervised training of the affine and deformable networks, plus a
network-free per-pair optimiser of the same objectives.

One training step (batch size 1) runs the affine network on the multimodal
pair and on two mono-modal synthetic pairs, updates it with the affine
objective, then runs the deformable network on the affine-warped inputs
(affine output detached) and updates it with the deformable objective.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .imgcore import Grid, Image2D, resample, warp
from .loss import (LossBreakdown, LossWeights, RegularizerSpec, affine_loss, deformable_loss, mse_grad,
                   reg_loss_grad, seg_loss_grad)
from .net import NetConfig, RegNetModel, calibrate_feature_norm, init_model, model_from_tensors, read_rgfn, write_rgfn
from .pairs import PairSample
from .transform import (ALPHA, AffineTransform, CompositeTransform, RandomTransformSpec, TpsTransform,
                        control_grid, sample_random_transform)

logger = logging.getLogger(__name__)

WINDOW_MM = 100.0


class TrainingError(RuntimeError):
    def __init__(self, msg: str, record: dict | None = None):
        super().__init__(msg)
        self.record = record or {}


@dataclass(frozen=True)
class TrainConfig:
    lr0: float = 0.001
    lr_decay: float = 0.9
    batch_size: int = 1
    epochs: int = 50
    weights: LossWeights = LossWeights()
    random_spec: RandomTransformSpec = RandomTransformSpec()
    seed: int = 0
    working_resolution: float = 1.5625
    reg: RegularizerSpec = RegularizerSpec()
    affine_net: NetConfig = NetConfig(theta_dim=6, seed=1)
    deform_net: NetConfig = NetConfig(theta_dim=32, seed=2)
    min_calibration_pairs: int = 16

    def __post_init__(self):
        if not self.lr0 > 0:
            raise ValueError("lr0 must be positive")
        if not 0 < self.lr_decay <= 1:
            raise ValueError("lr_decay must lie in (0, 1]")
        if self.epochs < 1:
            raise ValueError("epochs must be at least 1")
        if self.batch_size != 1:
            raise ValueError("only batch_size=1 is supported")
        if self.min_calibration_pairs < 1:
            raise ValueError("min_calibration_pairs must be at least 1")

    def lr(self, epoch: int) -> float:
        return self.lr0 * self.lr_decay ** epoch

    def to_dict(self) -> dict:
        return {
            "lr0": self.lr0, "lr_decay": self.lr_decay, "batch_size": self.batch_size, "epochs": self.epochs,
            "weights": asdict(self.weights), "random_spec": self.random_spec.to_dict(), "seed": self.seed,
            "working_resolution": self.working_resolution,
            "reg": {"c_lap": self.reg.c_lap, "c_graddiv": self.reg.c_graddiv, "c_id": self.reg.c_id},
            "affine_net": self.affine_net.to_dict(), "deform_net": self.deform_net.to_dict(),
            "min_calibration_pairs": self.min_calibration_pairs,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "weights" in d:
            d["weights"] = LossWeights(**d["weights"])
        if "random_spec" in d:
            d["random_spec"] = RandomTransformSpec.from_dict(d["random_spec"])
        if "reg" in d:
            d["reg"] = RegularizerSpec(**d["reg"])
        for k in ("affine_net", "deform_net"):
            if k in d:
                d[k] = NetConfig.from_dict(d[k])
        return cls(**d)


# ---------------------------------------------------------------------------
# Adam

@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: dict[str, np.ndarray], frozen=()) -> "AdamState":
        keys = [k for k in params if k not in frozen]
        return cls({k: np.zeros_like(params[k]) for k in keys}, {k: np.zeros_like(params[k]) for k in keys})


def adam_update(state: AdamState, params: dict[str, np.ndarray], grads: dict[str, np.ndarray], lr: float,
                frozen=()):
    """Bias-corrected Adam step applied in place; frozen tensors are skipped."""
    for k in state.m:
        if grads[k].shape != params[k].shape or state.m[k].shape != params[k].shape:
            raise ValueError(f"shape mismatch for {k}: param {params[k].shape}, grad {grads[k].shape}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for k in state.m:
        if k in frozen:
            continue
        g = grads[k]
        state.m[k] = b1 * state.m[k] + (1.0 - b1) * g
        state.v[k] = b2 * state.v[k] + (1.0 - b2) * g * g
        params[k] -= lr * (state.m[k] / c1) / (np.sqrt(state.v[k] / c2) + state.eps)
    return params, state


def _add_grads(acc: dict | None, g: dict) -> dict:
    if acc is None:
        return {k: v.copy() for k, v in g.items()}
    for k, v in g.items():
        acc[k] += v
    return acc


# ---------------------------------------------------------------------------
# synthetic mono-modal pairs

@dataclass(frozen=True, eq=False)
class MonoPair:
    reference: Image2D
    warped: Image2D
    gt: CompositeTransform


def make_synthetic_pair(s: PairSample, spec: RandomTransformSpec, rng: np.random.Generator):
    """Randomly warped copies of both images: ``(mono_f, mono_m)``."""
    out = []
    for img in (s.i_f, s.i_m):
        t = sample_random_transform(spec, rng, img.grid)
        out.append(MonoPair(img, warp(img, t, img.grid, mode="bilinear"), t))
    return out[0], out[1]


# ---------------------------------------------------------------------------
# pipeline

@dataclass
class TrainedPipeline:
    affine_net: RegNetModel
    deform_net: RegNetModel
    working_resolution: float = 1.5625
    train_log: list[dict] = field(default_factory=list)

    def working_grid(self, img: Image2D) -> Grid:
        return Grid.centered(WINDOW_MM, self.working_resolution, img.grid.center)

    def predict(self, i_f: Image2D, i_m: Image2D):
        """Affine and composite transforms for a pair; uses images only.

        Inputs are resampled onto the working grids first; the transforms are
        in mm and apply to any grid.
        """
        gf, gm = self.working_grid(i_f), self.working_grid(i_m)
        i_f = i_f if i_f.grid == gf else resample(i_f, gf)
        i_m = i_m if i_m.grid == gm else resample(i_m, gm)
        th_a, _ = self.affine_net.forward(i_f, i_m)
        aff = AffineTransform(th_a).check_orientation()
        i_m_a = warp(i_m, aff, i_f.grid)
        th_d, _ = self.deform_net.forward(i_f, i_m_a)
        tps = TpsTransform(th_d, control_grid(i_f.grid))
        return aff, CompositeTransform(aff, tps)

    def save(self, path, extra: dict | None = None) -> None:
        meta = {"kind": "pipeline", "affine": self.affine_net.config.to_dict(),
                "deform": self.deform_net.config.to_dict(), "working_resolution": self.working_resolution}
        meta.update(extra or {})
        write_rgfn(path, meta, self.affine_net.tensors("affine/") + self.deform_net.tensors("deform/"))

    @classmethod
    def load(cls, path) -> "TrainedPipeline":
        meta, tensors = read_rgfn(path)
        if meta.get("kind") != "pipeline":
            raise ValueError(f"{path} is not a pipeline checkpoint")
        a = model_from_tensors(NetConfig.from_dict(meta["affine"]), tensors, "affine/")
        d = model_from_tensors(NetConfig.from_dict(meta["deform"]), tensors, "deform/")
        return cls(a, d, float(meta["working_resolution"]))


def new_pipeline(cfg: TrainConfig) -> TrainedPipeline:
    return TrainedPipeline(init_model(cfg.affine_net), init_model(cfg.deform_net), cfg.working_resolution)


def calibrate_pipeline(pipe: TrainedPipeline, data: list[PairSample], cfg: TrainConfig) -> TrainedPipeline:
    """Feature standardisation of both networks from the multimodal training pairs.

    Mono-modal pairs pull the statistics away from the inference distribution,
    so they are only added (cycled draws) when the cohort is smaller than
    ``cfg.min_calibration_pairs`` and a few pairs cannot cover what training feeds the nets.
    """
    pairs = [(s.i_f, s.i_m) for s in data]
    k = 0
    while len(pairs) < cfg.min_calibration_pairs:
        s = data[k % len(data)]
        mono_f, mono_m = make_synthetic_pair(s, cfg.random_spec, np.random.default_rng([cfg.seed, 2, k]))
        pairs += [(mono_f.reference, mono_f.warped), (mono_m.reference, mono_m.warped)]
        k += 1
    calibrate_feature_norm(pipe.affine_net, pairs)
    calibrate_feature_norm(pipe.deform_net, pairs)
    return pipe


def _finite(bd: LossBreakdown) -> bool:
    return all(math.isfinite(v) for v in (bd.total, bd.seg, bd.intensity, bd.reg))


def train_step(pipe: TrainedPipeline, s: PairSample, cfg: TrainConfig, rng: np.random.Generator,
               states: tuple[AdamState, AdamState], lr: float, record: dict | None = None) -> LossBreakdown:
    """One combined affine + deformable update. Returns the summed breakdown."""
    if not s.has_masks:
        raise ValueError(f"case {s.case_id}: training needs both prostate masks")
    record = {} if record is None else record
    w = cfg.weights
    mono_f, mono_m = make_synthetic_pair(s, cfg.random_spec, rng)
    gf, gm = s.i_f.grid, s.i_m.grid
    monos = ((mono_f, gf), (mono_m, gm))

    # (a) affine network
    a = pipe.affine_net
    th, cache = a.forward(s.i_f, s.i_m)
    if not np.all(np.isfinite(th)):
        raise TrainingError("affine network produced non-finite parameters", record)
    aff = AffineTransform(th)
    seg, d_seg = seg_loss_grad(s.s_f.data, gf, s.s_m.data, gm, aff)
    grads = a.backward(cache, d_seg)
    ints, mono_affs = 0.0, []
    for mp, g in monos:
        th_k, c_k = a.forward(mp.reference, mp.warped)
        aff_k = AffineTransform(th_k)
        v, d_k = mse_grad(mp.reference.data, g, mp.warped.data, g, aff_k)
        ints += v
        grads = _add_grads(grads, a.backward(c_k, w.w_int * d_k))
        mono_affs.append(aff_k)
    bd_a = affine_loss(seg, ints, w)
    record["affine"] = bd_a.to_dict()
    if not _finite(bd_a):
        raise TrainingError("non-finite affine loss", record)
    adam_update(states[0], a.params, grads, lr, a.frozen)
    a.bump()

    # (b) deformable network on affine-warped inputs; the affine outputs above are constants here
    d = pipe.deform_net
    for t_ in (aff, *mono_affs):
        if not t_.det > 0:
            raise TrainingError(f"affine network produced a folded transform (det = {t_.det:.4g})", record)
    th_d, cache_d = d.forward(s.i_f, warp(s.i_m, aff, gf))
    comp = CompositeTransform(aff, TpsTransform(th_d, control_grid(gf)))
    seg_d, d_seg_d = seg_loss_grad(s.s_f.data, gf, s.s_m.data, gm, comp, wrt="tps")
    reg, d_reg = reg_loss_grad(comp.tps, gf, cfg.reg)
    grads_d = d.backward(cache_d, d_seg_d + w.w_reg * d_reg)
    ints_d = 0.0
    for (mp, g), aff_k in zip(monos, mono_affs):
        th_k, c_k = d.forward(mp.reference, warp(mp.warped, aff_k, g))
        comp_k = CompositeTransform(aff_k, TpsTransform(th_k, control_grid(g)))
        v, d_k = mse_grad(mp.reference.data, g, mp.warped.data, g, comp_k, wrt="tps")
        ints_d += v
        grads_d = _add_grads(grads_d, d.backward(c_k, w.w_int * d_k))
    bd_d = deformable_loss(seg_d, ints_d, reg, w)
    record["deformable"] = bd_d.to_dict()
    if not _finite(bd_d):
        raise TrainingError("non-finite deformable loss", record)
    adam_update(states[1], d.params, grads_d, lr, d.frozen)
    d.bump()
    return bd_a + bd_d


def prepare(s: PairSample, resolution: float) -> PairSample:
    gf = Grid.centered(WINDOW_MM, resolution, s.i_f.grid.center)
    gm = Grid.centered(WINDOW_MM, resolution, s.i_m.grid.center)
    return s.at_resolution(gf, gm)


def train(dataset: list[PairSample], cfg: TrainConfig = TrainConfig(), run_dir=None,
          progress=None) -> TrainedPipeline:
    """Epoch loop with ``lr(e) = lr0 * decay**e`` and a seeded per-epoch shuffle.

    With ``run_dir`` a checkpoint is written after every epoch, plus
    ``train_log.jsonl`` and ``config.json``.
    """
    if not dataset:
        raise ValueError("training needs a nonempty dataset")
    data = [prepare(s, cfg.working_resolution) for s in dataset]
    pipe = calibrate_pipeline(new_pipeline(cfg), data, cfg)
    states = (AdamState.for_params(pipe.affine_net.params, pipe.affine_net.frozen),
              AdamState.for_params(pipe.deform_net.params, pipe.deform_net.frozen))
    run = Path(run_dir) if run_dir is not None else None
    log_fh = None
    if run is not None:
        (run / "checkpoints").mkdir(parents=True, exist_ok=True)
        (run / "config.json").write_text(json.dumps(cfg.to_dict(), indent=1, sort_keys=True) + "\n")
        log_fh = open(run / "train_log.jsonl", "w")
    try:
        step = 0
        for epoch in range(cfg.epochs):
            lr = cfg.lr(epoch)
            order = np.random.default_rng([cfg.seed, epoch]).permutation(len(data))
            for k in order:
                s = data[int(k)]
                rng = np.random.default_rng([cfg.seed, 1, epoch, int(k)])
                rec = {"epoch": epoch, "step": step, "case_id": s.case_id, "lr": lr}
                bd = train_step(pipe, s, cfg, rng, states, lr, rec)
                rec.update(bd.to_dict())
                pipe.train_log.append(rec)
                if log_fh is not None:
                    log_fh.write(json.dumps(rec) + "\n")
                step += 1
            if run is not None:
                pipe.save(run / "checkpoints" / f"epoch_{epoch + 1:03d}.rgfn", {"epoch": epoch + 1})
            if progress is not None:
                progress(epoch, pipe)
            else:
                ep = [r["total"] for r in pipe.train_log if r["epoch"] == epoch]
                logger.info("epoch %d lr %.6g mean total %.5f", epoch, lr, float(np.mean(ep)))
    finally:
        if log_fh is not None:
            log_fh.close()
    return pipe


# ---------------------------------------------------------------------------
# direct per-pair optimisation

@dataclass(frozen=True)
class DirectConfig:
    weights: LossWeights = LossWeights()
    reg: RegularizerSpec = RegularizerSpec()
    affine_iters: int = 300
    tps_iters: int = 150
    # step sizes in theta units: alpha * lr is 0.5% for linear terms and 0.25 mm for
    # translations and control-point displacements
    affine_lr_linear: float = 5.0
    affine_lr_translation: float = 250.0
    tps_lr: float = 250.0
    moment_init: bool = True
    max_halvings: int = 20


def _mask_moments(m):
    w = m.data.astype(float).ravel()
    if w.sum() == 0:
        raise ValueError("moment initialisation needs nonempty masks")
    p = m.grid.points()
    c = (w[:, None] * p).sum(0) / w.sum()
    return c, w.sum() * m.grid.spacing ** 2


def moment_init(s_f, s_m, alpha: float = ALPHA) -> np.ndarray:
    """Affine theta aligning mask centroids and areas (isotropic scale, no rotation)."""
    c_f, a_f = _mask_moments(s_f)
    c_m, a_m = _mask_moments(s_m)
    k = np.sqrt(a_m / a_f)
    t = c_m - k * c_f
    return np.array([k - 1.0, 0.0, t[0], 0.0, k - 1.0, t[1]]) / alpha


def _adam_descent(f, x0: np.ndarray, lr: float, iters: int, max_halvings: int):
    """Adam on a flat vector with backtracking: a step is accepted only if ``f`` does not increase."""
    x = x0.copy()
    fx, g = f(x)
    if not math.isfinite(fx):
        raise TrainingError("direct optimisation: non-finite objective at the start")
    st = AdamState({"x": np.zeros_like(x)}, {"x": np.zeros_like(x)})
    trace = [fx]
    for _ in range(iters):
        p = {"x": x.copy()}
        adam_update(st, p, {"x": g}, lr)
        step = p["x"] - x
        accepted = False
        for _h in range(max_halvings + 1):
            cand = x + step
            fc, gc = f(cand)
            if not math.isfinite(fc):
                raise TrainingError("direct optimisation diverged (non-finite objective)")
            if fc <= fx:
                x, fx, g = cand, fc, gc
                accepted = True
                break
            step = step / 2.0
        trace.append(fx)
        if not accepted:
            break
    return x, fx, trace


def optimize_pair_direct(s: PairSample, cfg: DirectConfig = DirectConfig(), return_trace: bool = False):
    """Fit affine then TPS parameters to one pair by gradient descent on the training objectives."""
    if not s.has_masks:
        raise ValueError("direct optimisation needs both prostate masks (weak supervision); "
                         "use a trained model for mask-free registration")
    gf, gm = s.i_f.grid, s.i_m.grid
    sf, sm = s.s_f.data, s.s_m.data
    w = cfg.weights

    def f_aff(th):
        seg, g = seg_loss_grad(sf, gf, sm, gm, AffineTransform(th))
        return affine_loss(seg, 0.0, w).total, g

    lr_a = np.array([cfg.affine_lr_linear, cfg.affine_lr_linear, cfg.affine_lr_translation] * 2)
    th0 = moment_init(s.s_f, s.s_m) if cfg.moment_init else np.zeros(6)
    th_a, _, tr_a = _adam_descent(f_aff, th0, lr_a, cfg.affine_iters, cfg.max_halvings)
    aff = AffineTransform(th_a).check_orientation()
    ctrl = control_grid(gf)

    def f_tps(th):
        comp = CompositeTransform(aff, TpsTransform(th, ctrl))
        seg, g = seg_loss_grad(sf, gf, sm, gm, comp, wrt="tps")
        reg, g_reg = reg_loss_grad(comp.tps, gf, cfg.reg)
        return deformable_loss(seg, 0.0, reg, w).total, g + w.w_reg * g_reg

    th_t, _, tr_t = _adam_descent(f_tps, np.zeros(2 * len(ctrl)), cfg.tps_lr, cfg.tps_iters, cfg.max_halvings)
    comp = CompositeTransform(aff, TpsTransform(th_t, ctrl))
    if return_trace:
        return comp, (tr_a, tr_t)
    return comp
