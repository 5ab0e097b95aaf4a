"""Command line: ``regforge {gen-phantoms,train,register,evaluate}``.

Exit codes: 0 success, 1 runtime failure, 2 usage error. Every command
writes ``run_manifest.json`` into its output directory.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .imgcore import (Grid, HistogramStandard, Image2D, Mask2D, fit_window, load_image, load_mask, recenter,
                      save_image, save_mask, standardize_intensity, warp)
from .loss import LossWeights
from .metrics import (LandmarkSet, MetricsRow, aggregate_table, dice_coefficient, hausdorff_distance,
                      mean_landmark_error, render_table, urethra_deviation, write_metrics_csv, write_summary_json)
from .pairs import PairSample, list_cases, load_case, load_dataset
from .synthdata import PhantomSpec, generate_cohort
from .trainer import DirectConfig, TrainConfig, TrainedPipeline, optimize_pair_direct, prepare, train
from .transform import transform_from_dict

log = logging.getLogger("regforge")

WINDOW_MM = 100.0
MANIFEST_NAME = "run_manifest.json"


class UsageError(Exception):
    pass


@dataclass
class RunManifest:
    command: str
    config_hash: str
    seed: int | None
    inputs: list[str] = field(default_factory=list)
    outputs: list[str] = field(default_factory=list)
    tool_version: str = __version__
    wall_time_s: float = 0.0
    config: dict = field(default_factory=dict)

    def write(self, out_dir) -> Path:
        p = Path(out_dir) / MANIFEST_NAME
        p.write_text(json.dumps(asdict(self), indent=1, sort_keys=True) + "\n")
        return p


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()


def _default_seed() -> int:
    v = os.environ.get("REGFORGE_SEED")
    if v is None:
        return 0
    try:
        return int(v)
    except ValueError:
        raise UsageError(f"REGFORGE_SEED must be an integer, got {v!r}")


def _merged(args, keys: dict) -> dict:
    """Flag values over ``--config`` JSON values over defaults. ``keys`` maps name -> default."""
    cfg = dict(keys)
    if getattr(args, "config", None):
        try:
            extra = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read --config {args.config}: {exc}")
        unknown = set(extra) - set(keys)
        if unknown:
            raise UsageError(f"unknown config keys: {sorted(unknown)}")
        cfg.update(extra)
    for k in keys:
        v = getattr(args, k, None)
        if v is not None:
            cfg[k] = v
    if cfg.get("seed") is None and "seed" in keys:
        cfg["seed"] = _default_seed()
    return cfg


# ---------------------------------------------------------------------------
# gen-phantoms

def cmd_gen_phantoms(args) -> int:
    cfg = _merged(args, {"n": None, "seed": None, "out": None, "resolution_mm": 1.5625})
    if cfg["n"] is None or int(cfg["n"]) < 1:
        raise UsageError("--n must be a positive integer")
    if not cfg["out"]:
        raise UsageError("--out is required")
    t0 = time.time()
    spec = PhantomSpec(resolution_mm=float(cfg["resolution_mm"]))
    out = Path(cfg["out"])
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise RuntimeError(f"cannot create output directory {out}: {exc}")
    generate_cohort(int(cfg["n"]), spec, int(cfg["seed"]), out)
    man = RunManifest("gen-phantoms", config_hash(cfg), int(cfg["seed"]), [],
                      sorted(str(p.relative_to(out)) for p in out.rglob("*") if p.is_file()), config=cfg)
    man.wall_time_s = time.time() - t0
    man.write(out)
    print(f"wrote {cfg['n']} phantoms to {out}")
    return 0


# ---------------------------------------------------------------------------
# train

TRAIN_KEYS = {"data": None, "out": None, "epochs": 50, "lr": 0.001, "lr_decay": 0.9, "batch_size": 1,
              "seed": None, "resolution_mm": 1.5625, "w_int": 0.05, "w_reg": 0.05}


def cmd_train(args) -> int:
    cfg = _merged(args, TRAIN_KEYS)
    if not cfg["data"] or not cfg["out"]:
        raise UsageError("--data and --out are required")
    if int(cfg["epochs"]) < 1:
        raise UsageError("--epochs must be at least 1")
    if int(cfg["batch_size"]) != 1:
        raise UsageError("only --batch-size 1 is supported")
    t0 = time.time()
    data_dir, out = Path(cfg["data"]), Path(cfg["out"])
    if not data_dir.is_dir():
        raise RuntimeError(f"dataset directory {data_dir} does not exist")
    dataset = load_dataset(data_dir)
    if not dataset:
        raise RuntimeError(f"no cases found in {data_dir}")
    for s in dataset:
        if not s.has_masks:
            raise RuntimeError(f"malformed case {s.case_id}: training needs fixed_mask.png and moving_mask.png")
    tc = TrainConfig(lr0=float(cfg["lr"]), lr_decay=float(cfg["lr_decay"]), batch_size=1,
                     epochs=int(cfg["epochs"]), weights=LossWeights(float(cfg["w_int"]), float(cfg["w_reg"])),
                     seed=int(cfg["seed"]), working_resolution=float(cfg["resolution_mm"]))
    out.mkdir(parents=True, exist_ok=True)
    pipe = train(dataset, tc, run_dir=out)
    pipe.save(out / "model.rgfn", {"epoch": tc.epochs})
    outputs = ["config.json", "train_log.jsonl", "model.rgfn"] + sorted(
        f"checkpoints/{p.name}" for p in (out / "checkpoints").glob("*.rgfn"))
    full = dict(cfg)
    full["train_config"] = tc.to_dict()
    man = RunManifest("train", config_hash(full), tc.seed, [str(data_dir)], outputs, config=full)
    man.wall_time_s = time.time() - t0
    man.write(out)
    print(f"trained {tc.epochs} epochs on {len(dataset)} cases; model at {out / 'model.rgfn'}")
    return 0


# ---------------------------------------------------------------------------
# shared registration helpers

def _border_fill(img: Image2D) -> float:
    d = img.data
    edge = np.concatenate([d[0], d[-1], d[:, 0], d[:, -1]])
    return float(np.median(edge))


def preprocess(img, fill: float | None = None):
    """Centred 100 mm window, grid centre moved to (0, 0). Returns ``(image, shift_mm)``."""
    if fill is None:
        fill = _border_fill(img) if isinstance(img, Image2D) else 0.0
    win = fit_window(img, WINDOW_MM, fill)
    out = recenter(win)
    shift = np.subtract(out.grid.origin, win.grid.origin)
    return out, shift


def _same_window(m, shift):
    """Apply the companion image's window and shift to a mask."""
    win = fit_window(m, WINDOW_MM, 0.0)
    return type(m)(Grid(win.grid.width, win.grid.height, win.grid.spacing,
                        tuple(np.add(win.grid.origin, shift))), win.data)


def _companion_mask(path, img: Image2D) -> Mask2D:
    """A mask on its own sidecar grid if it has one, else on its image's grid."""
    if Path(path).with_suffix(".json").exists():
        return load_mask(path)
    return load_mask(path, img.grid)


def _to_grid(m: Mask2D, grid: Grid) -> Mask2D:
    return m if m.grid == grid else warp(m, None, grid, mode="nearest")


def stage_metrics(case_id: str, stage: str, s: PairSample, t, warn=None) -> MetricsRow:
    """Metrics of one stage; ``t=None`` is the unregistered input."""
    dice = hd = ure = lme = None
    if s.has_masks:
        wm = warp(s.s_m, t, s.s_f.grid, mode="nearest")
        dice = dice_coefficient(s.s_f, wm)
        hd = hausdorff_distance(s.s_f, wm) if wm.data.any() else float("inf")
    if s.landmarks_f is not None and len(s.landmarks_f):
        lme = mean_landmark_error(LandmarkSet(s.landmarks_f), LandmarkSet(s.landmarks_m), t)
    elif warn:
        warn(f"{case_id}: no landmarks; landmark error omitted")
    if s.urethra_f is not None and s.urethra_m is not None:
        ure = urethra_deviation(s.urethra_f, s.urethra_m, t)
    return MetricsRow(case_id, stage, dice, hd, ure, lme)


def _read_landmarks(path, shift_f, shift_m):
    rec = json.loads(Path(path).read_text())
    lf = lm = uf = um = None
    if "fixed" in rec:
        lf = np.asarray(rec["fixed"], float).reshape(-1, 2) + shift_f
        lm = np.asarray(rec["moving"], float).reshape(-1, 2) + shift_m
    if "urethra_fixed" in rec and "urethra_moving" in rec:
        uf = tuple(np.add(rec["urethra_fixed"], shift_f))
        um = tuple(np.add(rec["urethra_moving"], shift_m))
    return lf, lm, uf, um


# ---------------------------------------------------------------------------
# register

def cmd_register(args) -> int:
    if not args.fixed or not args.moving or not args.out:
        raise UsageError("--fixed, --moving and --out are required")
    if bool(args.model) == bool(args.direct):
        raise UsageError("give exactly one of --model CHECKPOINT or --direct")
    if args.direct and not (args.fixed_mask and args.moving_mask):
        raise UsageError("--direct optimises the segmentation objective and needs --fixed-mask and "
                         "--moving-mask (weak supervision); use --model for mask-free registration")
    t0 = time.time()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    raw_f, raw_m = load_image(args.fixed), load_image(args.moving)
    i_f, shift_f = preprocess(raw_f)
    i_m, shift_m = preprocess(raw_m)
    if args.histogram_standard:
        i_f = standardize_intensity(i_f, HistogramStandard.load(args.histogram_standard))
    inputs = [args.fixed, args.moving]

    def masks():
        s_f = _same_window(_companion_mask(args.fixed_mask, raw_f), shift_f)
        s_m = _same_window(_companion_mask(args.moving_mask, raw_m), shift_m)
        inputs.extend([args.fixed_mask, args.moving_mask])
        return _to_grid(s_f, i_f.grid), _to_grid(s_m, i_m.grid)

    if args.model:
        pipe = TrainedPipeline.load(args.model)
        inputs.append(args.model)
        aff, comp = pipe.predict(i_f, i_m)
    else:
        s_f, s_m = masks()
        res = float(args.resolution_mm) if args.resolution_mm else i_f.spacing
        ps = prepare(PairSample(i_f, i_m, s_f, s_m), res)
        comp = optimize_pair_direct(ps, DirectConfig())
        aff = comp.affine

    outputs = ["warped_moving.png", "warped_moving.json", "transforms.json"]
    save_image(warp(i_m, comp, i_f.grid), out / "warped_moving.png")
    if args.cancer_label:
        lab = _same_window(_companion_mask(args.cancer_label, raw_m), shift_m)
        save_mask(warp(lab, comp, i_f.grid, mode="nearest"), out / "warped_cancer_label.png", write_sidecar=True)
        inputs.append(args.cancer_label)
        outputs.append("warped_cancer_label.png")
    rec = {"affine": aff.to_dict(), "composite": comp.to_dict(),
           "frame": {"fixed_shift_mm": list(map(float, shift_f)), "moving_shift_mm": list(map(float, shift_m)),
                     "fixed_grid": i_f.grid.to_dict()}}
    (out / "transforms.json").write_text(json.dumps(rec, indent=1) + "\n")

    # metrics only when masks or landmarks were supplied; read after the transform is fixed
    s_f = s_m = None
    if args.fixed_mask and args.moving_mask:
        s_f, s_m = masks()
    lf = lm = uf = um = None
    if args.landmarks:
        lf, lm, uf, um = _read_landmarks(args.landmarks, shift_f, shift_m)
        inputs.append(args.landmarks)
    if s_f is not None or lf is not None:
        s = PairSample(i_f, i_m, s_f, s_m, lf, lm, uf, um, case_id=Path(args.fixed).stem)
        rows = [stage_metrics(s.case_id, st, s, t) for st, t in (("input", None), ("affine", aff),
                                                                   ("composite", comp))]
        write_metrics_csv(rows, out / "metrics.csv")
        outputs.append("metrics.csv")
    cfg = {k: v for k, v in vars(args).items() if k != "func"}
    man = RunManifest("register", config_hash(cfg), None, [str(p) for p in inputs], outputs, config=cfg)
    man.wall_time_s = time.time() - t0
    man.write(out)
    print(f"registered {args.moving} to {args.fixed}; outputs in {out}")
    return 0


# ---------------------------------------------------------------------------
# evaluate

def evaluate_cases(cases: list[PairSample], predict, warn=None) -> list[MetricsRow]:
    """``predict(sample) -> (affine, composite)``; three stage rows per case."""
    rows = []
    for s in cases:
        aff, comp = predict(s)
        for stage, t in (("input", None), ("affine", aff), ("composite", comp)):
            rows.append(stage_metrics(s.case_id, stage, s, t, warn if stage == "input" else None))
    return rows


def cmd_evaluate(args) -> int:
    if not args.data or not args.out:
        raise UsageError("--data and --out are required")
    modes = [bool(args.model), bool(args.direct), bool(args.transforms)]
    if sum(modes) != 1:
        raise UsageError("give exactly one of --model, --direct or --transforms")
    t0 = time.time()
    data, out = Path(args.data), Path(args.out)
    if not data.is_dir():
        raise RuntimeError(f"cohort directory {data} does not exist")
    out.mkdir(parents=True, exist_ok=True)
    cases = []
    for c in list_cases(data):
        try:
            cases.append(load_case(c))
        except (OSError, ValueError, KeyError) as exc:
            raise RuntimeError(f"malformed case {c.name}: {exc}") from exc
    inputs = [str(data)]
    if args.model:
        pipe = TrainedPipeline.load(args.model)
        inputs.append(args.model)

        def predict(s):
            return pipe.predict(s.i_f, s.i_m)
    elif args.direct:
        def predict(s):
            comp = optimize_pair_direct(s)
            return comp.affine, comp
    else:
        tdir = Path(args.transforms)
        inputs.append(str(tdir))

        def predict(s):
            p = tdir / s.case_id / "transforms.json"
            if not p.exists():
                raise RuntimeError(f"no transforms for case {s.case_id} ({p})")
            rec = json.loads(p.read_text())
            return transform_from_dict(rec["affine"]), transform_from_dict(rec["composite"])

    def warn(msg):
        log.warning(msg)
        print(f"warning: {msg}", file=sys.stderr)

    rows = evaluate_cases(cases, predict, warn)
    write_metrics_csv(rows, out / "metrics.csv")
    table = write_summary_json(rows, out / "summary.json")
    print(render_table(table))
    cfg = {k: v for k, v in vars(args).items() if k != "func"}
    man = RunManifest("evaluate", config_hash(cfg), None, inputs, ["metrics.csv", "summary.json"], config=cfg)
    man.wall_time_s = time.time() - t0
    man.write(out)
    return 0


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="regforge", description="Weakly supervised MRI-histology registration")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-phantoms", help="generate a synthetic phantom cohort")
    g.add_argument("--n", type=int)
    g.add_argument("--seed", type=int, help="default: $REGFORGE_SEED or 0")
    g.add_argument("--out")
    g.add_argument("--resolution-mm", dest="resolution_mm", type=float)
    g.add_argument("--config", help="JSON file with any of the flags above")
    g.set_defaults(func=cmd_gen_phantoms)

    t = sub.add_parser("train", help="train the affine and deformable networks")
    t.add_argument("--data")
    t.add_argument("--out")
    t.add_argument("--epochs", type=int, help="default 50")
    t.add_argument("--lr", type=float, help="initial learning rate, default 0.001")
    t.add_argument("--lr-decay", dest="lr_decay", type=float, help="per-epoch decay, default 0.9")
    t.add_argument("--batch-size", dest="batch_size", type=int, help="default 1")
    t.add_argument("--seed", type=int)
    t.add_argument("--resolution-mm", dest="resolution_mm", type=float, help="working resolution, default 1.5625")
    t.add_argument("--w-int", dest="w_int", type=float, help="default 0.05")
    t.add_argument("--w-reg", dest="w_reg", type=float, help="default 0.05")
    t.add_argument("--config")
    t.set_defaults(func=cmd_train)

    r = sub.add_parser("register", help="register one moving image to a fixed image")
    r.add_argument("--fixed")
    r.add_argument("--moving")
    r.add_argument("--out")
    r.add_argument("--model", help="pipeline checkpoint from `train`")
    r.add_argument("--direct", action="store_true", help="optimise the pair directly (needs masks)")
    r.add_argument("--fixed-mask", dest="fixed_mask")
    r.add_argument("--moving-mask", dest="moving_mask")
    r.add_argument("--cancer-label", dest="cancer_label")
    r.add_argument("--landmarks", help="JSON with fixed/moving point lists in mm")
    r.add_argument("--histogram-standard", dest="histogram_standard",
                   help="JSON with 11 decile landmarks for the fixed image")
    r.add_argument("--resolution-mm", dest="resolution_mm", type=float)
    r.set_defaults(func=cmd_register)

    e = sub.add_parser("evaluate", help="Table-1 style metrics over a cohort")
    e.add_argument("--data")
    e.add_argument("--out")
    e.add_argument("--model")
    e.add_argument("--direct", action="store_true")
    e.add_argument("--transforms", help="directory of <case_id>/transforms.json")
    e.set_defaults(func=cmd_evaluate)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else 0
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"regforge {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - reported as a runtime failure
        print(f"regforge {args.command}: {exc}", file=sys.stderr)
        if args.verbose:
            raise
        return 1


if __name__ == "__main__":
    sys.exit(main())
