import io
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from ctzip import metrics
from ctzip.errors import FormatError, ShapeError
from ctzip.imaging import FloatImage, GrayImage
from ctzip.synthdata import flip_interior_pixels, gen_shifted_square


def loop_mse(a, b):
    h, w = a.shape
    s = 0.0
    for i in range(h):
        for j in range(w):
            s += (float(a[i, j]) - float(b[i, j])) ** 2
    return s / (h * w)


def loop_laplacian(a):
    """Stencil applied pixel by pixel with clamped neighbour indices."""
    h, w = a.shape
    out = np.zeros((h, w))
    for i in range(h):
        for j in range(w):
            up, dn = a[max(i - 1, 0), j], a[min(i + 1, h - 1), j]
            lf, rt = a[i, max(j - 1, 0)], a[i, min(j + 1, w - 1)]
            out[i, j] = up + dn + lf + rt - 4.0 * a[i, j]
    return out


small_float = arrays(np.float64, st.tuples(st.integers(3, 10), st.integers(3, 10)),
                     elements=st.floats(-2, 2, allow_nan=False))


def test_mse_basic():
    assert metrics.mse(np.zeros((2, 2)), np.zeros((2, 2))) == 0.0
    assert metrics.mse(np.array([[0.0, 0.0]]), np.array([[1.0, 0.0]])) == 0.5
    with pytest.raises(ShapeError):
        metrics.mse(np.zeros((2, 2)), np.zeros((2, 3)))


@pytest.mark.parametrize("seed", range(3))
def test_mse_against_loop(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.random((17, 23)), rng.random((17, 23))
    assert abs(metrics.mse(FloatImage(a), FloatImage(b)) - loop_mse(a, b)) < 1e-12


def test_psnr_values():
    assert metrics.psnr(0.01, 1) == pytest.approx(20.0)
    assert metrics.psnr(0.03, 255) == pytest.approx(63.3590, abs=1e-3)
    assert metrics.psnr(255.0 ** 2, 255) == pytest.approx(0.0, abs=1e-12)
    assert metrics.psnr(0.0, 1) == metrics.INF_PSNR
    with pytest.raises(ValueError):
        metrics.psnr(-1.0)
    with pytest.raises(ValueError):
        metrics.psnr(1.0, 0)


@given(st.floats(1e-9, 1e6), st.floats(1e-3, 1e3))
def test_psnr_closed_form(m, mx):
    expected = 10 * math.log10(mx * mx / m)
    assert metrics.psnr(m, mx) == pytest.approx(expected, rel=1e-9, abs=1e-9)


def test_laplacian_stencil_cases():
    assert np.all(metrics.laplacian(np.full((5, 6), 3.7)).data == 0)
    ramp = np.tile(np.arange(7.0)[:, None], (1, 5))
    assert np.all(metrics.laplacian(ramp).data[1:-1, :] == 0)
    imp = np.zeros((5, 5))
    imp[2, 2] = 1
    lap = metrics.laplacian(imp).data
    assert lap[2, 2] == -4
    assert lap[1, 2] == lap[3, 2] == lap[2, 1] == lap[2, 3] == 1
    assert np.count_nonzero(lap) == 5
    with pytest.raises(ShapeError):
        metrics.laplacian(np.zeros((2, 5)))


@settings(max_examples=50, deadline=None)
@given(small_float)
def test_laplacian_matches_loop_oracle(a):
    assert np.allclose(metrics.laplacian(a).data, loop_laplacian(a), atol=1e-12, rtol=0)


@given(small_float)
def test_laplacian_sums_to_zero(a):
    # replicate padding makes every boundary flux cancel
    assert abs(metrics.laplacian(a).data.sum()) < 1e-9


def test_msle_cases():
    rng = np.random.default_rng(0)
    a = rng.random((8, 8))
    assert metrics.msle(a, a) == 0.0
    assert metrics.msle(a, a + 0.3) == pytest.approx(0.0, abs=1e-24)
    with pytest.raises(ShapeError):
        metrics.msle(a, a[:, :7])


def test_shifted_square_oracle():
    a, b = gen_shifted_square(32, 8, 1)
    # shifting right by one flips one column on each side of the square
    assert metrics.mse(a, b) == 16 / 1024
    expected = float(np.mean(loop_laplacian(a.data - b.data) ** 2))
    assert metrics.msle(a, b) == pytest.approx(expected, rel=1e-12)
    assert metrics.msle(a, b) * 1024 == pytest.approx(120.0)


def test_shift_is_penalized_more_by_msle_than_mse():
    a, b = gen_shifted_square(32, 8, 1)
    assert metrics.msle(a, b) > metrics.mse(a, b)


def test_flip_interior_reaches_target():
    a, b = gen_shifted_square(32, 8, 1)
    target = metrics.mse(a, b)
    n = flip_interior_pixels(a, target, np.random.default_rng(0))
    assert abs(metrics.mse(a, n) - target) <= 0.05 * target


@pytest.mark.parametrize("seed", range(5))
def test_laplacian_diff_map_linearity(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.random((20, 20)), rng.random((20, 20))
    d = metrics.laplacian_diff_map(a, b).data
    assert np.max(np.abs(d - metrics.laplacian(a - b).data)) <= 1e-12
    assert np.all(metrics.laplacian_diff_map(a, a).data == 0)


def test_evaluate_pair():
    a = np.eye(6)
    r = metrics.evaluate_pair(a, a)
    assert r.mse == 0 and r.msle == 0 and r.psnr_db == metrics.INF_PSNR
    b = a.copy()
    b[0, 1] = 1
    r = metrics.evaluate_pair(a, b, 1.0, ("x", "y"))
    assert r.mse == 1 / 36
    assert r.psnr_db == pytest.approx(10 * math.log10(36))
    assert r.image_ids == ("x", "y")


def test_paper_style_psnr_cell():
    assert metrics.psnr(0.034, 1) == pytest.approx(14.685, abs=1e-3)


def test_gray_pair_scales():
    rng = np.random.default_rng(5)
    a = GrayImage(rng.integers(0, 256, (8, 8), dtype=np.uint8))
    b = GrayImage(rng.integers(0, 256, (8, 8), dtype=np.uint8))
    r255 = metrics.evaluate_gray_pair(a, b, 255)
    r1 = metrics.evaluate_gray_pair(a, b, 1)
    assert r255.mse == pytest.approx(255 ** 2 * r1.mse, rel=1e-12)
    # PSNR does not depend on the scale convention
    assert r255.psnr_db == pytest.approx(r1.psnr_db, rel=1e-12)
    with pytest.raises(ValueError):
        metrics.evaluate_gray_pair(a, b, 100)


def test_reports_csv_round_trip(tmp_path):
    reps = [metrics.evaluate_pair(np.zeros((4, 4)), np.zeros((4, 4)), 1, ("a0", "b0")),
            metrics.evaluate_pair(np.zeros((4, 4)), np.eye(4), 255, ("a1", "b1"))]
    buf = io.StringIO()
    metrics.write_reports_csv(reps, buf)
    text = buf.getvalue()
    assert text.splitlines()[0] == ",".join(metrics.CSV_HEADER)
    assert text.splitlines()[1].split(",")[4] == "inf"
    p = tmp_path / "m.csv"
    p.write_text(text)
    back = metrics.read_reports_csv(p)
    assert back == reps
    p.write_text("nope\n")
    with pytest.raises(FormatError):
        metrics.read_reports_csv(p)


def test_rescale_to_gray():
    lap = metrics.laplacian(np.pad(np.ones((1, 1)), 2))
    g, lo, hi = metrics.rescale_to_gray(lap)
    assert (lo, hi) == (-4.0, 1.0)
    assert g.data.min() == 0 and g.data.max() == 255
    assert g.data[2, 2] == 0 and g.data[1, 2] == 255
    g, lo, hi = metrics.rescale_to_gray(FloatImage(np.full((3, 3), 2.0)))
    assert lo == hi == 2.0 and not g.data.any()
