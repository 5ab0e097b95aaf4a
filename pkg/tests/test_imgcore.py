import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from regforge.imgcore import (Grid, HistogramStandard, Image2D, Mask2D, bilinear_sample, crop_center, decile_landmarks,
                              fit_window, load_image, load_mask, pad_to, recenter, sample_bilinear, save_image,
                              save_mask, standardize_intensity, warp)
from regforge.transform import AffineTransform


def bilinear_oracle(data, grid, p):
    """Per-point bilinear interpolation written from the textbook formula."""
    fx = (p[0] - grid.origin[0]) / grid.spacing
    fy = (p[1] - grid.origin[1]) / grid.spacing
    if fx < 0 or fy < 0 or fx > grid.width - 1 or fy > grid.height - 1:
        return 0.0
    i0, j0 = min(int(np.floor(fx)), grid.width - 2), min(int(np.floor(fy)), grid.height - 2)
    a, b = fx - i0, fy - j0
    return ((1 - a) * (1 - b) * data[j0, i0] + a * (1 - b) * data[j0, i0 + 1]
            + (1 - a) * b * data[j0 + 1, i0] + a * b * data[j0 + 1, i0 + 1])


def test_grid_pixel_mm_roundtrip():
    g = Grid(7, 5, 0.5, (-1.0, 2.0))
    ij = np.array([[3, 4], [0, 0], [6, 1]])
    assert np.allclose(g.to_mm(ij), [[0.5, 4.0], [-1.0, 2.0], [2.0, 2.5]])
    assert np.allclose(g.to_index(g.to_mm(ij)), ij)
    assert g.shape == (5, 7)


def test_grid_centered_window():
    g = Grid.centered(100, 1.5625)
    assert g.shape == (64, 64)
    assert np.allclose(g.center, (0, 0))
    assert np.allclose(g.bounds, (-50, -50, 50, 50))


@pytest.mark.parametrize("w,h,s", [(1, 4, 1.0), (4, 4, 0.0), (4, 4, -1.0)])
def test_grid_rejects_bad_shapes(w, h, s):
    with pytest.raises(ValueError):
        Grid(w, h, s)


def test_image_validation_and_readonly():
    g = Grid(3, 3, 1.0)
    with pytest.raises(ValueError):
        Image2D(g, np.full((3, 3), 1.5))
    with pytest.raises(ValueError):
        Image2D(g, np.full((3, 3), np.nan))
    with pytest.raises(ValueError):
        Image2D(g, np.zeros((2, 3)))
    img = Image2D(g, np.zeros((3, 3)))
    with pytest.raises(ValueError):
        img.data[0, 0] = 1.0
    with pytest.raises(ValueError):
        Mask2D(g, np.full((3, 3), 0.5))


def test_sample_constant_image():
    g = Grid(5, 4, 2.0, (1.0, -3.0))
    img = Image2D(g, np.full(g.shape, 0.37))
    for p in [(1.0, -3.0), (4.3, 0.1), (9.0, 3.0)]:
        assert sample_bilinear(img, p) == pytest.approx(0.37, abs=1e-15)


def test_sample_exact_at_node():
    rng = np.random.default_rng(0)
    g = Grid(8, 8, 1.5, (-4.0, 2.0))
    img = Image2D(g, rng.random(g.shape))
    assert sample_bilinear(img, g.to_mm([3, 5])) == img.data[5, 3]


def test_sample_cell_midpoint():
    g = Grid(2, 2, 1.0)
    img = Image2D(g, np.array([[0.0, 1.0], [0.0, 1.0]]))
    assert sample_bilinear(img, (0.5, 0.5)) == pytest.approx(0.5)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000), st.floats(-3, 12), st.floats(-3, 12))
def test_bilinear_matches_oracle(seed, x, y):
    rng = np.random.default_rng(seed)
    g = Grid(6, 5, 1.7, (-1.0, 0.5))
    data = rng.random(g.shape)
    got = bilinear_sample(data, g, np.array([[x, y]]))[0]
    assert got == pytest.approx(bilinear_oracle(data, g, (x, y)), abs=1e-12)


def test_bilinear_spatial_gradient_matches_fd():
    rng = np.random.default_rng(1)
    g = Grid(9, 9, 1.3, (-5.0, -5.0))
    data = rng.random(g.shape)
    p = rng.uniform(-4, 4, size=(20, 2))
    _, grad = bilinear_sample(data, g, p, with_grad=True)
    h = 1e-6
    for k in range(2):
        e = np.zeros(2)
        e[k] = h
        fd = (bilinear_sample(data, g, p + e) - bilinear_sample(data, g, p - e)) / (2 * h)
        assert np.allclose(grad[:, k], fd, atol=1e-6)


def test_warp_identity_bit_exact():
    rng = np.random.default_rng(2)
    g = Grid(16, 12, 0.8, (3.0, -2.0))
    img = Image2D(g, rng.random(g.shape))
    assert np.array_equal(warp(img, AffineTransform.identity()).data, img.data)
    assert np.array_equal(warp(img, None).data, img.data)


def test_warp_grid_aligned_shift():
    rng = np.random.default_rng(3)
    g = Grid(10, 10, 2.0)
    img = Image2D(g, rng.random(g.shape))
    t = AffineTransform([0, 0, 2000.0, 0, 0, 0])  # +2 mm = one pixel in x
    out = warp(img, t).data
    assert np.allclose(out[:, :-1], img.data[:, 1:], atol=1e-12)


def test_warp_matches_per_pixel_oracle():
    rng = np.random.default_rng(4)
    g = Grid(8, 8, 1.0, (-3.5, -3.5))
    img = Image2D(g, rng.random(g.shape))
    t = AffineTransform(rng.normal(0, 80, 6))
    out = warp(img, t).data
    for j in range(8):
        for i in range(8):
            q = t.apply(g.to_mm([[i, j]]))[0]
            assert out[j, i] == pytest.approx(min(1.0, max(0.0, bilinear_oracle(img.data, g, q))), abs=1e-12)


def test_mask_warp_modes():
    g = Grid(6, 6, 1.0)
    m = Mask2D(g, np.eye(6))
    assert isinstance(warp(m, None, mode="nearest"), Mask2D)
    with pytest.raises(ValueError):
        warp(m, None, mode="bilinear")
    soft = warp(m, AffineTransform([0, 0, 500.0, 0, 0, 0]), mode="bilinear", binary=False)
    assert isinstance(soft, np.ndarray) and soft.max() <= 1.0


def test_crop_center_sizes():
    g = Grid(400, 400, 0.5)
    assert crop_center(Image2D(g, np.zeros(g.shape)), 100).grid.shape == (200, 200)
    img = Image2D(g, np.zeros(g.shape))
    assert crop_center(img, 200).data.shape == img.data.shape


def test_crop_center_index_arithmetic():
    rng = np.random.default_rng(5)
    g = Grid(64, 64, 2.0)
    img = Image2D(g, rng.random(g.shape))
    c = crop_center(img, 64)
    assert c.grid.shape == (32, 32)
    assert np.array_equal(c.data, img.data[16:48, 16:48])
    assert c.grid.origin == (32.0, 32.0)


def test_pad_and_roundtrip():
    rng = np.random.default_rng(6)
    g = Grid(50, 50, 1.0)
    img = Image2D(g, rng.random(g.shape))
    assert np.array_equal(pad_to(img, 50).data, img.data)
    p = pad_to(img, 100)
    assert p.grid.shape == (100, 100)
    assert np.array_equal(p.data[25:75, 25:75], img.data)
    border = p.data.copy()
    border[25:75, 25:75] = 0
    assert not border.any()
    back = crop_center(p, 50)
    assert np.array_equal(back.data, img.data)
    assert back.grid == img.grid


def test_fit_window_and_recenter():
    g = Grid(80, 40, 2.0, (10.0, 10.0))
    img = Image2D(g, np.full(g.shape, 0.3))
    w = fit_window(img, 100, fill=0.3)
    assert w.grid.shape == (50, 50)
    r = recenter(w)
    assert np.allclose(r.grid.center, (0, 0))
    assert np.array_equal(r.data, w.data)


def test_standardize_fixed_point():
    rng = np.random.default_rng(7)
    img = Image2D(Grid(32, 32, 1.0), rng.random((32, 32)) ** 2)
    out = standardize_intensity(img, HistogramStandard.from_image(img))
    assert np.allclose(out.data, img.data, atol=1e-12)


def test_standardize_uniform_identity_ramp():
    data = (np.arange(1024).reshape(32, 32) / 1023.0)
    img = Image2D(Grid(32, 32, 1.0), data)
    out = standardize_intensity(img, HistogramStandard(np.linspace(0, 1, 11)))
    assert np.max(np.abs(out.data - data)) <= 1.0 / 1023 + 1e-12


def test_standardize_reduces_gamma_difference():
    from regforge.synthdata import PhantomSpec, generate_phantom
    s, _ = generate_phantom(PhantomSpec(), 3)
    a = Image2D(s.i_f.grid, s.i_f.data ** 0.6)
    b = Image2D(s.i_f.grid, s.i_f.data ** 1.8)
    std = HistogramStandard(decile_landmarks(s.i_f))
    before = np.mean(np.abs(a.data - b.data))
    after = np.mean(np.abs(standardize_intensity(a, std).data - standardize_intensity(b, std).data))
    assert after < before


def test_histogram_standard_validation():
    with pytest.raises(ValueError):
        HistogramStandard(np.linspace(0, 1, 10))
    with pytest.raises(ValueError):
        HistogramStandard(np.linspace(1, 0, 11))


def test_png_roundtrip(tmp_path):
    rng = np.random.default_rng(8)
    g = Grid(12, 9, 0.7, (-3.0, 4.0))
    img = Image2D(g, rng.random(g.shape))
    save_image(img, tmp_path / "a.png")
    back = load_image(tmp_path / "a.png", normalize=False)
    assert back.grid == g
    assert np.max(np.abs(back.data - img.data)) <= 0.5 / 65535 + 1e-12
    m = Mask2D(g, rng.random(g.shape) > 0.5)
    save_mask(m, tmp_path / "m.png")
    assert np.array_equal(load_mask(tmp_path / "m.png", g).data, m.data)
