import numpy as np
import pytest

from regforge.imgcore import Grid, Image2D
from regforge.loss import PairContext, loss_gradient
from regforge.net import (NetConfig, StaleCacheError, calibrate_feature_norm, conv3x3, global_average_pool, init_model,
                          maxpool2, pooled_features, read_rgfn)
from regforge.transform import AffineTransform, CompositeTransform, TpsTransform

G16 = Grid.centered(100, 6.25)
FD_STEP = 1e-5
REL_FLOOR = 1e-6


def rel_err(a, b):
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), REL_FLOOR)


def smooth(grid, seed):
    rng = np.random.default_rng(seed)
    p = grid.points()
    v = sum(np.exp(-np.sum((p - c) ** 2, axis=1) / 300.0) for c in rng.uniform(-25, 25, (3, 2)))
    return Image2D(grid, (v / v.max()).reshape(grid.shape))


def disk(grid, centre, r):
    return (np.linalg.norm(grid.points() - centre, axis=1) <= r).reshape(grid.shape).astype(float)


# the default head (antisymmetric, image-normalised, bounded) and the plain one
VARIANTS = {"default": {}, "plain": dict(antisymmetric=False, image_norm=False, bounded=False)}
# per-variant seeds whose warped samples sit clear of bilinear cell edges (see kink_clearance)
FD_SEEDS = {"default": 13, "plain": 1}


def small_model(theta_dim=6, frozen_prefix=0, seed=0, **kw):
    cfg = NetConfig(conv_channels=(4, 6), frozen_prefix=frozen_prefix, dense_widths=(8, 8),
                    theta_dim=theta_dim, seed=seed, **kw)
    m = init_model(cfg)
    rng = np.random.default_rng(seed + 100)
    m.params["dense2.w"] = rng.normal(0, 0.02, m.params["dense2.w"].shape)
    m.params["dense0.b"] = rng.normal(0, 0.1, m.params["dense0.b"].shape)
    m.params["dense1.b"] = rng.normal(0, 0.1, m.params["dense1.b"].shape)
    return m


FIXED, MOVING = smooth(G16, 1), smooth(G16, 2)
CTX = PairContext(disk(G16, (2, -1), 27), G16, disk(G16, (-3, 2), 24), G16,
                  ((FIXED.data, G16, MOVING.data, G16, None),))


def pipeline_loss(m, kind):
    theta, cache = m.forward(FIXED, MOVING)
    if m.config.theta_dim == 6:
        t = AffineTransform(theta)
        ctx = PairContext(CTX.s_f, G16, CTX.s_m, G16, ((FIXED.data, G16, MOVING.data, G16, t),))
        val, g = loss_gradient(kind, t, ctx)
        if kind == "affine":
            g = g[:6] + g[6:]
    else:
        t = CompositeTransform(AffineTransform.identity(), TpsTransform.for_grid(theta, G16))
        ctx = PairContext(CTX.s_f, G16, CTX.s_m, G16, ((FIXED.data, G16, MOVING.data, G16, t),))
        val, g = loss_gradient(kind, t, ctx, wrt="tps")
        if kind == "deformable":
            g = g[:32] + g[32:]
    return val, g, cache


def kink_clearance(m):
    """Distance (mm) from the warped sample points to the nearest bilinear cell edge."""
    theta, _ = m.forward(FIXED, MOVING)
    t = AffineTransform(theta) if len(theta) == 6 else TpsTransform.for_grid(theta, G16)
    f = (t.apply(G16.points()) - np.array(G16.origin)) / G16.spacing
    return float(np.min(np.abs(f - np.round(f)))) * G16.spacing


@pytest.mark.parametrize("variant", sorted(VARIANTS))
@pytest.mark.parametrize("theta_dim,kind", [(6, "seg"), (6, "int"), (6, "affine"), (32, "reg"), (32, "deformable")])
def test_parameter_gradients_match_fd(theta_dim, kind, variant):
    m = small_model(theta_dim, seed=FD_SEEDS[variant], **VARIANTS[variant])
    calibrate_feature_norm(m, [(FIXED, MOVING), (MOVING, FIXED), (FIXED, FIXED)])
    # bilinear sampling is not differentiable on cell edges; keep every sample well
    # clear of them relative to what one FD step moves it (~1e-4 mm)
    assert kink_clearance(m) > 2e-3
    _, g_theta, cache = pipeline_loss(m, kind)
    grads = m.backward(cache, g_theta)
    worst = 0.0
    for name in m.trainable:
        p = m.params[name]
        fd = np.zeros_like(p)
        for idx in np.ndindex(p.shape):
            orig = p[idx]
            p[idx] = orig + FD_STEP
            m.bump()
            hi = pipeline_loss(m, kind)[0]
            p[idx] = orig - FD_STEP
            m.bump()
            lo = pipeline_loss(m, kind)[0]
            p[idx] = orig
            m.bump()
            fd[idx] = (hi - lo) / (2 * FD_STEP)
        worst = max(worst, float(np.max(rel_err(grads[name], fd))))
    assert worst < 1e-4


def test_frozen_tensors_get_zero_gradient():
    m = small_model(frozen_prefix=1)
    assert {"conv0.w", "conv0.b", "norm.shift", "norm.scale"} <= m.frozen
    theta, cache = m.forward(FIXED, MOVING)
    grads = m.backward(cache, np.ones(6))
    for k in m.frozen:
        assert not grads[k].any()
    assert grads["conv1.w"].any()


def test_initial_theta_is_zero():
    m = init_model(NetConfig())
    theta, _ = m.forward(FIXED, MOVING)
    assert np.array_equal(theta, np.zeros(6))


def test_he_initialisation_variance():
    m = init_model(NetConfig(conv_channels=(64, 64), seed=3))
    w = m.params["conv1.w"]
    assert np.var(w) == pytest.approx(2.0 / (64 * 9), rel=0.05)
    assert not m.params["conv1.b"].any()


def test_input_size_invariance():
    m = small_model()
    for spacing in (6.25, 3.125, 1.5625):
        g = Grid.centered(100, spacing)
        theta, _ = m.forward(smooth(g, 1), smooth(g, 2))
        assert theta.shape == (6,) and np.all(np.isfinite(theta))
    with pytest.raises(ValueError):
        m.forward(smooth(Grid(4, 4, 1.0), 1), smooth(Grid(4, 4, 1.0), 2))


def test_stale_cache_rejected():
    m = small_model()
    _, cache = m.forward(FIXED, MOVING)
    m.bump()
    with pytest.raises(StaleCacheError):
        m.backward(cache, np.ones(6))
    with pytest.raises(StaleCacheError):
        m.backward(None, np.ones(6))


def test_feature_calibration_standardises():
    pairs = [(smooth(G16, k), smooth(G16, k + 50)) for k in range(6)]
    # plain head: each slot standardised on its own
    m = small_model(antisymmetric=False)
    calibrate_feature_norm(m, pairs)
    f = np.array([(pooled_features(m, a, b) - m.params["norm.shift"]) * m.params["norm.scale"] for a, b in pairs])
    assert np.allclose(f.mean(axis=0), 0, atol=1e-9)
    assert np.all(f.std(axis=0) < 1.0 + 1e-9)
    # antisymmetric head: one standardisation shared by both slots, over all images
    m = small_model()
    calibrate_feature_norm(m, pairs)
    c = len(m.params["norm.shift"]) // 2
    assert np.array_equal(m.params["norm.shift"][:c], m.params["norm.shift"][c:])
    assert np.array_equal(m.params["norm.scale"][:c], m.params["norm.scale"][c:])
    f = np.array([(pooled_features(m, a, b) - m.params["norm.shift"]) * m.params["norm.scale"] for a, b in pairs])
    stacked = np.concatenate([f[:, :c], f[:, c:]])
    assert np.allclose(stacked.mean(axis=0), 0, atol=1e-9)
    assert np.all(stacked.std(axis=0) < 1.0 + 1e-9)
    with pytest.raises(ValueError):
        calibrate_feature_norm(m, [])


def test_antisymmetric_head():
    m = small_model(theta_dim=32, seed=5)
    calibrate_feature_norm(m, [(FIXED, MOVING), (MOVING, FIXED)])
    a, _ = m.forward(FIXED, MOVING)
    b, _ = m.forward(MOVING, FIXED)
    assert np.abs(a).max() > 0
    assert np.array_equal(a, -b)
    same, _ = m.forward(FIXED, FIXED)
    assert np.array_equal(same, np.zeros(32))
    plain = small_model(theta_dim=32, seed=5, antisymmetric=False)
    assert np.abs(plain.forward(FIXED, FIXED)[0]).max() > 0


def test_image_normalised_pooling():
    m = small_model()
    f = pooled_features(m, FIXED, MOVING)
    c = len(f) // 2
    assert np.mean(f[:c]) == pytest.approx(1.0) and np.mean(f[c:]) == pytest.approx(1.0)
    # at initialisation (zero conv biases) the extractor is positively homogeneous,
    # so a global contrast change leaves the normalised features unchanged
    m0 = init_model(m.config)
    scaled = Image2D(G16, 0.3 * FIXED.data)
    assert np.allclose(pooled_features(m0, scaled, MOVING), pooled_features(m0, FIXED, MOVING), atol=1e-12)


def test_bounded_output():
    m = small_model(seed=2)
    m.params["dense2.w"] *= 1e4
    m.bump()
    theta, _ = m.forward(FIXED, Image2D(G16, np.roll(MOVING.data, 3, axis=1)))
    gain = m.config.output_gain
    assert np.all(np.abs(theta) <= gain) and np.abs(theta / gain).max() > 0.99
    assert AffineTransform(theta).det > 0


def test_polarity_invariance_of_inputs():
    m = small_model()
    inv = Image2D(G16, 1.0 - FIXED.data)
    a, _ = m.forward(FIXED, MOVING)
    b, _ = m.forward(inv, MOVING)
    # |I - median| is unchanged by I -> 1 - I
    assert np.allclose(a, b, atol=1e-9)


def test_layer_primitives():
    x = np.arange(16, dtype=float).reshape(4, 4, 1)
    w = np.zeros((1, 1, 3, 3))
    w[0, 0, 1, 1] = 1.0
    z, _ = conv3x3(x, w, np.zeros(1))
    assert np.array_equal(z[..., 0], x[..., 0])  # centre tap is the identity
    p, _ = maxpool2(x)
    assert np.array_equal(p[..., 0], [[5, 7], [13, 15]])
    assert np.allclose(global_average_pool(x), [7.5])


def test_rgfn_roundtrip(tmp_path):
    m = small_model(theta_dim=32, frozen_prefix=1, seed=4)
    m.save(tmp_path / "m.rgfn")
    back = type(m).load(tmp_path / "m.rgfn")
    assert back.config == m.config and back.frozen == m.frozen
    for k in m.params:
        assert np.array_equal(back.params[k], m.params[k])
    meta, tensors = read_rgfn(tmp_path / "m.rgfn")
    assert meta["kind"] == "model"
    assert [t[0] for t in tensors] == list(m.params)
    m.save(tmp_path / "m2.rgfn")
    assert (tmp_path / "m.rgfn").read_bytes() == (tmp_path / "m2.rgfn").read_bytes()


def test_rgfn_rejects_garbage(tmp_path):
    (tmp_path / "x.rgfn").write_bytes(b"NOPE" + bytes(20))
    with pytest.raises(ValueError):
        read_rgfn(tmp_path / "x.rgfn")


def test_config_validation():
    with pytest.raises(ValueError):
        NetConfig(theta_dim=7)
    with pytest.raises(ValueError):
        NetConfig(frozen_prefix=2)
    assert NetConfig.from_dict(NetConfig().to_dict()) == NetConfig()
