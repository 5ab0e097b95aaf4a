"""Regression network: shared conv extractor -> global average pooling -> 3 dense layers -> theta.

Pure numpy with hand-written reverse mode. Tensors are channels-last
``(H, W, C)``; conv weights are ``(C_out, C_in, 3, 3)`` and dense weights
``(out, in)``.
"""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .imgcore import Image2D

MAGIC = b"RGFN"
FORMAT_VERSION = 1
MIN_SIZE = 8


@dataclass(frozen=True)
class NetConfig:
    conv_channels: tuple[int, ...] = (16, 32)
    frozen_prefix: int = 1
    dense_widths: tuple[int, int] = (128, 64)
    theta_dim: int = 6
    seed: int = 0
    # input channels [u, u*x/s, u*y/s] with u = |I - median(I)| (polarity invariant), s = coord_scale_mm;
    # off: the raw intensity only
    coord_channels: bool = True
    coord_scale_mm: float = 25.0
    # fixed output gain: theta = gain * (last dense layer). Translations and TPS displacements
    # use theta_scale; affine linear terms use theta_scale / linear_radius_mm, so a unit raw
    # output moves a point at that radius as far as a unit translation does.
    theta_scale: float = 10000.0
    linear_radius_mm: float = 25.0
    # theta = (head(f, m) - head(m, f)) / 2: identical inputs give exactly theta = 0
    antisymmetric: bool = True
    # each image's pooled vector divided by its mean, removing global contrast scale
    image_norm: bool = True
    # theta = gain * tanh(raw): linear terms stay within +-gain*alpha, so an affine cannot fold
    bounded: bool = True

    def __post_init__(self):
        object.__setattr__(self, "conv_channels", tuple(int(c) for c in self.conv_channels))
        object.__setattr__(self, "dense_widths", tuple(int(c) for c in self.dense_widths))
        if self.theta_dim not in (6, 32):
            raise ValueError("theta_dim must be 6 (affine) or 32 (4x4 TPS)")
        if len(self.dense_widths) != 2:
            raise ValueError("the dense head has exactly three layers (two hidden widths)")
        if not 0 <= self.frozen_prefix < len(self.conv_channels):
            raise ValueError("frozen_prefix must leave at least one trainable conv layer")

    @property
    def output_gain(self) -> np.ndarray:
        g = np.full(self.theta_dim, float(self.theta_scale))
        if self.theta_dim == 6:
            g[[0, 1, 3, 4]] /= self.linear_radius_mm
        return g

    @property
    def in_channels(self) -> int:
        return 3 if self.coord_channels else 1

    def to_dict(self) -> dict:
        d = asdict(self)
        d["conv_channels"] = list(self.conv_channels)
        d["dense_widths"] = list(self.dense_widths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetConfig":
        return cls(**d)


# ---------------------------------------------------------------------------
# layer primitives

def conv3x3(x: np.ndarray, w: np.ndarray, b: np.ndarray):
    """Zero-padded 3x3 convolution (cross-correlation). Returns output and im2col matrix."""
    H, W, C = x.shape
    xp = np.pad(x, ((1, 1), (1, 1), (0, 0)))
    cols = sliding_window_view(xp, (3, 3), axis=(0, 1)).reshape(H * W, C * 9)
    out = cols @ w.reshape(w.shape[0], -1).T + b
    return out.reshape(H, W, -1), cols


def conv3x3_backward(dout: np.ndarray, cols: np.ndarray, w: np.ndarray, in_shape, need_dx: bool):
    H, W, C = in_shape
    d2 = dout.reshape(H * W, -1)
    dw = (d2.T @ cols).reshape(w.shape)
    db = d2.sum(axis=0)
    if not need_dx:
        return None, dw, db
    dcols = (d2 @ w.reshape(w.shape[0], -1)).reshape(H, W, C, 3, 3)
    dxp = np.zeros((H + 2, W + 2, C))
    for di in range(3):
        for dj in range(3):
            dxp[di:di + H, dj:dj + W] += dcols[..., di, dj]
    return dxp[1:-1, 1:-1], dw, db


def maxpool2(x: np.ndarray):
    H, W, C = x.shape
    h, w = H // 2, W // 2
    blocks = x[:2 * h, :2 * w].reshape(h, 2, w, 2, C).transpose(0, 2, 4, 1, 3).reshape(h, w, C, 4)
    idx = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]
    return out, idx


def maxpool2_backward(dout: np.ndarray, idx: np.ndarray, in_shape) -> np.ndarray:
    H, W, C = in_shape
    h, w = H // 2, W // 2
    blocks = np.zeros((h, w, C, 4))
    np.put_along_axis(blocks, idx[..., None], dout[..., None], axis=-1)
    dx = np.zeros(in_shape)
    dx[:2 * h, :2 * w] = blocks.reshape(h, w, C, 2, 2).transpose(0, 3, 1, 4, 2).reshape(2 * h, 2 * w, C)
    return dx


def global_average_pool(features: np.ndarray) -> np.ndarray:
    """Channelwise mean of an ``(N, N, C)`` map -> ``(C,)``."""
    f = np.asarray(features, dtype=float)
    if f.ndim == 2:
        f = f[..., None]
    return f.mean(axis=(0, 1))


def relu(x):
    return np.maximum(x, 0.0)


# ---------------------------------------------------------------------------
# model

class StaleCacheError(RuntimeError):
    pass


@dataclass
class ForwardCache:
    model_id: int
    version: int
    branches: list
    heads: list  # (sign, swapped, feat, z1, h1, z2, h2) per head pass
    out: np.ndarray  # theta / gain


@dataclass
class RegNetModel:
    config: NetConfig
    params: dict[str, np.ndarray]
    frozen: frozenset = field(default_factory=frozenset)
    version: int = 0

    @property
    def trainable(self) -> list[str]:
        return [k for k in self.params if k not in self.frozen]

    def bump(self) -> None:
        self.version += 1

    def copy(self) -> "RegNetModel":
        return RegNetModel(self.config, {k: v.copy() for k, v in self.params.items()}, self.frozen, self.version)

    # -- forward / backward ------------------------------------------------

    def _input(self, img: Image2D) -> np.ndarray:
        if img.width < MIN_SIZE or img.height < MIN_SIZE:
            raise ValueError(f"input image {img.width}x{img.height} is below the {MIN_SIZE}x{MIN_SIZE} minimum")
        if not self.config.coord_channels:
            return img.data[..., None]
        u = np.abs(img.data - np.median(img.data))[..., None]
        pts = img.grid.points().reshape(img.height, img.width, 2) / self.config.coord_scale_mm
        return np.concatenate([u, u * pts], axis=-1)

    def _extract(self, x: np.ndarray):
        layers = []
        for k in range(len(self.config.conv_channels)):
            w, b = self.params[f"conv{k}.w"], self.params[f"conv{k}.b"]
            z, cols = conv3x3(x, w, b)
            a = relu(z)
            if a.shape[0] < 2 or a.shape[1] < 2:
                raise ValueError("input too small for the extractor's pooling depth")
            p, idx = maxpool2(a)
            layers.append((x.shape, cols, z, idx))
            x = p
        return x, layers

    def forward(self, fixed: Image2D, moving: Image2D):
        branches, pooled = [], []
        for img in (fixed, moving):
            fmap, layers = self._extract(self._input(img))
            g = global_average_pool(fmap)
            mean = float(np.mean(g)) + 1e-12 if self.config.image_norm else 1.0
            branches.append((fmap.shape, layers, g, mean))
            pooled.append(g / mean)
        p = self.params
        passes = [(0.5, False), (-0.5, True)] if self.config.antisymmetric else [(1.0, False)]
        out, heads = 0.0, []
        for sign, swapped in passes:
            pool = pooled[::-1] if swapped else pooled
            feat = (np.concatenate(pool) - p["norm.shift"]) * p["norm.scale"]
            z1 = p["dense0.w"] @ feat + p["dense0.b"]
            h1 = relu(z1)
            z2 = p["dense1.w"] @ h1 + p["dense1.b"]
            h2 = relu(z2)
            out = out + sign * (p["dense2.w"] @ h2 + p["dense2.b"])
            heads.append((sign, swapped, feat, z1, h1, z2, h2))
        if self.config.bounded:
            out = np.tanh(out)
        theta = self.config.output_gain * out
        return theta, ForwardCache(id(self), self.version, branches, heads, out)

    def backward(self, cache: ForwardCache | None, dtheta) -> dict[str, np.ndarray]:
        """Parameter gradients given ``dL/dtheta``; frozen tensors get exact zeros."""
        if cache is None:
            raise StaleCacheError("backward needs the cache from a forward pass")
        if cache.model_id != id(self) or cache.version != self.version:
            raise StaleCacheError("forward cache is stale: the model changed since it was produced")
        p = self.params
        grads = {k: np.zeros_like(v) for k, v in p.items()}
        c_last = self.config.conv_channels[-1]
        dfeat = 0.0
        dout = self.config.output_gain * np.asarray(dtheta, dtype=float)
        if self.config.bounded:
            dout = dout * (1.0 - cache.out ** 2)
        for sign, swapped, feat, z1, h1, z2, h2 in cache.heads:
            d3 = sign * dout
            grads["dense2.w"] += np.outer(d3, h2)
            grads["dense2.b"] += d3
            dz2 = (p["dense2.w"].T @ d3) * (z2 > 0)
            grads["dense1.w"] += np.outer(dz2, h1)
            grads["dense1.b"] += dz2
            dz1 = (p["dense1.w"].T @ dz2) * (z1 > 0)
            grads["dense0.w"] += np.outer(dz1, feat)
            grads["dense0.b"] += dz1
            df = (p["dense0.w"].T @ dz1) * p["norm.scale"]
            dfeat = dfeat + (np.concatenate([df[c_last:], df[:c_last]]) if swapped else df)

        nconv = len(self.config.conv_channels)
        first_trainable = self.config.frozen_prefix
        for bi, (fshape, layers, g, mean) in enumerate(cache.branches):
            dn = dfeat[bi * c_last:(bi + 1) * c_last]
            dpool = dn / mean
            if self.config.image_norm:
                dpool = dpool - float(dn @ g) / (len(g) * mean * mean)
            d = np.broadcast_to(dpool / (fshape[0] * fshape[1]), fshape)
            for k in range(nconv - 1, first_trainable - 1, -1):
                in_shape, cols, z, idx = layers[k]
                da = maxpool2_backward(d, idx, z.shape)
                dz = da * (z > 0)
                dx, dw, db = conv3x3_backward(dz, cols, p[f"conv{k}.w"], in_shape, need_dx=k > first_trainable)
                grads[f"conv{k}.w"] += dw
                grads[f"conv{k}.b"] += db
                d = dx
        for k in self.frozen:
            grads[k] = np.zeros_like(p[k])
        return grads

    # -- persistence ---------------------------------------------------------

    def tensors(self, prefix: str = ""):
        return [(prefix + k, v, k in self.frozen) for k, v in self.params.items()]

    def save(self, path) -> None:
        write_rgfn(path, {"kind": "model", "config": self.config.to_dict()}, self.tensors())

    @classmethod
    def load(cls, path) -> "RegNetModel":
        meta, tensors = read_rgfn(path)
        return model_from_tensors(NetConfig.from_dict(meta["config"]), tensors)


def model_from_tensors(cfg: NetConfig, tensors: list, prefix: str = "") -> RegNetModel:
    params, frozen = {}, set()
    for name, arr, fz in tensors:
        if not name.startswith(prefix):
            continue
        key = name[len(prefix):]
        params[key] = arr
        if fz:
            frozen.add(key)
    ref = init_model(cfg)
    if set(params) != set(ref.params):
        raise ValueError("checkpoint tensors do not match the network configuration")
    for k, v in params.items():
        if v.shape != ref.params[k].shape:
            raise ValueError(f"tensor {k} has shape {v.shape}, expected {ref.params[k].shape}")
    return RegNetModel(cfg, params, frozenset(frozen))


def init_model(cfg: NetConfig) -> RegNetModel:
    """He-normal weights, zero biases, zero output layer (initial theta = 0)."""
    rng = np.random.default_rng(cfg.seed)
    params: dict[str, np.ndarray] = {}
    frozen = set()
    cin = cfg.in_channels
    for k, cout in enumerate(cfg.conv_channels):
        fan_in = cin * 9
        params[f"conv{k}.w"] = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(cout, cin, 3, 3))
        params[f"conv{k}.b"] = np.zeros(cout)
        if k < cfg.frozen_prefix:
            frozen.update({f"conv{k}.w", f"conv{k}.b"})
        cin = cout
    # frozen standardisation of the pooled features; identity until calibrated
    params["norm.shift"] = np.zeros(2 * cin)
    params["norm.scale"] = np.ones(2 * cin)
    frozen.update({"norm.shift", "norm.scale"})
    widths = [2 * cin, *cfg.dense_widths, cfg.theta_dim]
    for k in range(3):
        n_in, n_out = widths[k], widths[k + 1]
        if k < 2:
            params[f"dense{k}.w"] = rng.normal(0.0, np.sqrt(2.0 / n_in), size=(n_out, n_in))
        else:
            params[f"dense{k}.w"] = np.zeros((n_out, n_in))
        params[f"dense{k}.b"] = np.zeros(n_out)
    return RegNetModel(cfg, params, frozenset(frozen))


def pooled_features(m: RegNetModel, fixed: Image2D, moving: Image2D) -> np.ndarray:
    """Concatenated (image-normalised) GAP vectors before standardisation."""
    out = []
    for img in (fixed, moving):
        g = global_average_pool(m._extract(m._input(img))[0])
        out.append(g / (float(np.mean(g)) + 1e-12) if m.config.image_norm else g)
    return np.concatenate(out)


def calibrate_feature_norm(m: RegNetModel, pairs, rel_floor: float = 0.01, eps: float = 1e-12) -> RegNetModel:
    """Set the frozen feature standardisation from ``(fixed, moving)`` image pairs.

    Pooled features of different inputs differ by a few percent of their
    magnitude; without this the dense head mostly sees a constant vector.
    Each std is floored at ``rel_floor`` times the mean absolute feature so a
    handful of calibration pairs cannot produce huge scales. An antisymmetric
    network shares one standardisation between the fixed and moving slots,
    so swapping the inputs swaps the standardised features exactly.
    """
    pairs = list(pairs)
    if not pairs:
        raise ValueError("feature calibration needs at least one pair")
    f = np.array([pooled_features(m, a, b) for a, b in pairs])
    if m.config.antisymmetric:
        c = f.shape[1] // 2
        f = np.concatenate([f[:, :c], f[:, c:]])
    floor = rel_floor * float(np.mean(np.abs(f))) + eps
    shift, scale = f.mean(axis=0), 1.0 / np.maximum(f.std(axis=0), floor)
    if m.config.antisymmetric:
        shift, scale = np.tile(shift, 2), np.tile(scale, 2)
    m.params["norm.shift"] = shift
    m.params["norm.scale"] = scale
    m.bump()
    return m


def forward(m: RegNetModel, fixed: Image2D, moving: Image2D):
    return m.forward(fixed, moving)


def backward(m: RegNetModel, cache: ForwardCache, dtheta) -> dict[str, np.ndarray]:
    return m.backward(cache, dtheta)


# ---------------------------------------------------------------------------
# binary checkpoint format
#
#   b"RGFN" | u32 version | u32 len + config JSON (utf-8) | u32 n_tensors
#   per tensor: u16 len + name | u8 frozen | u8 ndim | u32 dims...
#   then every tensor's data in table order as little-endian float64

def write_rgfn(path, meta: dict, tensors) -> None:
    blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    head = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(blob)), blob, struct.pack("<I", len(tensors))]
    body = []
    for name, arr, fz in tensors:
        nb = name.encode("utf-8")
        arr = np.asarray(arr, dtype=float)
        head.append(struct.pack("<H", len(nb)) + nb + struct.pack("<BB", int(bool(fz)), arr.ndim))
        head.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        body.append(arr.astype("<f8").tobytes(order="C"))
    Path(path).write_bytes(b"".join(head + body))


def read_rgfn(path):
    buf = Path(path).read_bytes()
    if buf[:4] != MAGIC:
        raise ValueError(f"{path}: not an RGFN checkpoint")
    version, n = struct.unpack_from("<II", buf, 4)
    if version != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    off = 12
    meta = json.loads(buf[off:off + n].decode("utf-8"))
    off += n
    (count,) = struct.unpack_from("<I", buf, off)
    off += 4
    table = []
    for _ in range(count):
        (ln,) = struct.unpack_from("<H", buf, off)
        off += 2
        name = buf[off:off + ln].decode("utf-8")
        off += ln
        fz, ndim = struct.unpack_from("<BB", buf, off)
        off += 2
        shape = struct.unpack_from(f"<{ndim}I", buf, off)
        off += 4 * ndim
        table.append((name, bool(fz), shape))
    tensors = []
    for name, fz, shape in table:
        size = int(np.prod(shape)) * 8
        arr = np.frombuffer(buf, dtype="<f8", count=size // 8, offset=off).reshape(shape).astype(float)
        off += size
        tensors.append((name, arr, fz))
    return meta, tensors
