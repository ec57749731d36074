import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ptwin import metrics
from ptwin.errors import ShapeError

finite = st.floats(-1e3, 1e3, allow_nan=False, allow_infinity=False)


def brute_iou(a, b):
    cells_a = {(i, j) for i in range(a.shape[0]) for j in range(a.shape[1]) if a[i, j]}
    cells_b = {(i, j) for i in range(b.shape[0]) for j in range(b.shape[1]) if b[i, j]}
    union = cells_a | cells_b
    if not union:
        return 1.0
    return len(cells_a & cells_b) / len(union)


def test_rmse_examples():
    assert metrics.rmse([1.0, 2.0], [1.0, 2.0]) == 0.0
    assert metrics.rmse([0, 0], [3, 4]) == pytest.approx(math.sqrt(12.5), abs=1e-12)
    assert metrics.rmse([0, 0], [3, 4]) == pytest.approx(3.5355, abs=1e-4)


def test_rmse_rejects_bad_input():
    with pytest.raises(ValueError):
        metrics.rmse([], [])
    with pytest.raises(ShapeError):
        metrics.rmse([1, 2], [1, 2, 3])


@given(st.lists(st.tuples(finite, finite), min_size=1, max_size=30), st.randoms())
def test_rmse_permutation_and_symmetry(pairs, rnd):
    p = [a for a, _ in pairs]
    t = [b for _, b in pairs]
    base = metrics.rmse(p, t)
    order = list(range(len(pairs)))
    rnd.shuffle(order)
    assert metrics.rmse([p[i] for i in order], [t[i] for i in order]) == pytest.approx(base)
    assert metrics.rmse(t, p) == pytest.approx(base)


@given(st.lists(st.tuples(finite, finite), min_size=1, max_size=30),
       st.floats(0.01, 100.0))
def test_rmse_scales_linearly(pairs, k):
    p = np.array([a for a, _ in pairs])
    t = np.array([b for _, b in pairs])
    assert metrics.rmse(k * p, k * t) == pytest.approx(k * metrics.rmse(p, t), rel=1e-9, abs=1e-9)


def test_r2_examples():
    t = np.array([1.0, 2.0, 4.0, 7.0])
    assert metrics.r2(t, t) == 1.0
    assert metrics.r2(np.full(4, t.mean()), t) == pytest.approx(0.0, abs=1e-15)
    # reversed ordering: residuals [6, 2, -2, -6], SS_res 80, SS_tot 21
    assert metrics.r2(t[::-1], t) == pytest.approx(1 - 80 / 21)
    assert metrics.r2(t[::-1], t) < 0
    assert metrics.r2([1, 2], [3, 3]) is None


@given(st.lists(st.floats(-50, 50), min_size=3, max_size=40), st.floats(-3, 3))
@settings(max_examples=100)
def test_r2_closed_form_for_shrunk_predictions(values, a):
    t = np.array(values)
    if t.std() < 1e-3:
        return
    p = a * t + (1 - a) * t.mean()
    assert metrics.r2(p, t) == pytest.approx(1 - (1 - a) ** 2, abs=1e-9)


def test_r2_never_exceeds_one():
    rng = np.random.default_rng(0)
    for _ in range(50):
        t = rng.normal(size=12)
        assert metrics.r2(rng.normal(size=12), t) <= 1.0


def test_iou_examples():
    empty = np.zeros((16, 16), np.uint8)
    assert metrics.iou(empty, empty) == 1.0
    a = empty.copy()
    a[2, 3] = a[5, 5] = 1
    assert metrics.iou(a, a) == 1.0
    b = empty.copy()
    b[9, 9] = 1
    assert metrics.iou(a, b) == 0.0
    assert metrics.iou(a, empty) == 0.0
    c = empty.copy()
    c[0, 0] = c[0, 1] = 1
    d = empty.copy()
    d[0, 1] = d[0, 2] = 1
    assert metrics.iou(c, d) == pytest.approx(1 / 3)


def test_iou_shape_mismatch():
    with pytest.raises(ShapeError):
        metrics.iou(np.zeros((16, 16)), np.zeros((8, 8)))


def test_iou_matches_set_oracle():
    rng = np.random.default_rng(1234)
    for _ in range(1000):
        pa, pb = rng.uniform(0, 0.5, size=2)
        a = (rng.random((16, 16)) < pa).astype(np.uint8)
        b = (rng.random((16, 16)) < pb).astype(np.uint8)
        assert metrics.iou(a, b) == brute_iou(a, b)


grids = st.lists(st.booleans(), min_size=64, max_size=64).map(
    lambda v: np.array(v, dtype=np.uint8).reshape(8, 8))


@given(grids, grids)
def test_iou_symmetric_and_bounded(a, b):
    s = metrics.iou(a, b)
    assert 0.0 <= s <= 1.0
    assert s == metrics.iou(b, a)


@given(grids, grids, st.integers(0, 63))
def test_iou_monotone_when_adding_hits(a, b, cell):
    i, j = divmod(cell, 8)
    a2, b2 = a.copy(), b.copy()
    a2[i, j] = b2[i, j] = 1
    if a[i, j] and b[i, j]:
        return
    assert metrics.iou(a2, b2) >= metrics.iou(a, b)


def test_binarize_threshold():
    out = metrics.binarize(np.array([0.0, 0.4999, 0.5, 0.9]))
    assert out.tolist() == [0, 0, 1, 1]


def test_reports():
    rep = metrics.count_report([3, 4, 5], [1, 2, 3], [1, 2, 5])
    assert rep.rmse == pytest.approx(math.sqrt(4 / 3))
    assert rep.per_layer[2] == (5, 3.0, 5.0, None)
    empty = np.zeros((16, 16), np.uint8)
    full = np.ones((16, 16), np.uint8)
    rep = metrics.locate_report([0, 1], [empty, full], [empty, empty])
    assert rep.iou_mean == 0.5 and rep.iou_max == 1.0
    assert [r[3] for r in rep.per_layer] == [1.0, 0.0]


def test_table_round_trip(tmp_path):
    rep = metrics.MetricReport(rmse=10.14, r2=None)
    path = tmp_path / "t.csv"
    metrics.write_table(path, metrics.COUNT_COLUMNS, [metrics.count_row("spacing", "none", 1, rep)])
    assert path.read_text() == "dataset,augmentation,depth_or_mode,rmse,r2\nspacing,none,1,10.140000,\n"
    rows = metrics.read_table(path)
    assert rows[0]["rmse"] == "10.140000" and rows[0]["r2"] == ""


def test_rasters():
    img = metrics.scatter_raster([0, 5, 10], [0, 5, 10], size=32)
    assert img.shape == (32, 32) and img.dtype == np.uint8
    assert img[31, 0] == 255 and img[0, 31] == 255
    g = metrics.grid_raster([np.zeros((16, 16)), np.ones((16, 16))], cell=2, gap=1)
    assert g.shape == (32, 65)
    assert g[:, :32].max() == 0 and g[:, 33:].min() == 255
