import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ptwin import pyrometry as P
from ptwin.errors import CalibrationDomainError, RegionError


def gaussian_spot(shape=(40, 40), centre=(20.0, 18.0), width=5.0, peak=1000.0):
    yy, xx = np.mgrid[:shape[0], :shape[1]]
    return peak * np.exp(-((yy - centre[0]) ** 2 + (xx - centre[1]) ** 2) / (2 * width ** 2))


def closed_loops(lines):
    return [ln for ln in lines if len(ln) > 2 and np.allclose(ln[0], ln[-1])]


def test_contour_level():
    img = np.zeros((5, 5))
    img[1, 1] = 1000.0
    assert P.contour_level(img, 0.7) == pytest.approx(700.0)
    with pytest.raises(ValueError):
        P.contour_level(np.zeros((0, 3)))


def test_beta_one_keeps_only_maxima():
    img = gaussian_spot()
    img[3, 3] = img.max()
    region = P.contour_region(img, 1.0)
    assert set(zip(*np.nonzero(region.mask))) == set(zip(*np.nonzero(img == img.max())))


def test_two_blobs_give_two_loops():
    img = gaussian_spot(centre=(12, 12), width=2.5) + gaussian_spot(centre=(28, 28), width=2.5)
    region = P.contour_region(img, 0.3)
    loops = closed_loops(region.boundary)
    assert len(loops) == 2
    assert len(region.boundary) == 2


def test_uniform_image():
    region = P.contour_region(np.full((6, 7), 3.0))
    assert region.mask.all()
    assert region.segments == [] and region.boundary == []


def test_single_hot_pixel_diamond():
    img = np.zeros((5, 5))
    img[2, 2] = 10.0
    region = P.contour_region(img, 0.7)
    assert region.mask.sum() == 1 and region.mask[2, 2]
    assert len(region.segments) == 4
    (loop,) = region.boundary
    assert len(loop) == 5 and np.allclose(loop[0], loop[-1])
    t = 1 - 0.7
    expected = {(2 - t, 2.0), (2 + t, 2.0), (2.0, 2 - t), (2.0, 2 + t)}
    got = {(round(float(a), 9), round(float(b), 9)) for a, b in loop[:-1]}
    assert got == {(round(a, 9), round(b, 9)) for a, b in expected}


def test_mask_area_shrinks_with_beta():
    img = gaussian_spot()
    areas = [P.contour_region(img, b).mask.sum() for b in np.linspace(0.05, 1.0, 20)]
    assert all(a >= b for a, b in zip(areas, areas[1:]))
    assert areas[0] > areas[-1]


@given(st.integers(0, 10_000), st.floats(0.1, 0.95))
@settings(max_examples=40, deadline=None)
def test_contour_segments_only_cross_straddling_edges(seed, beta):
    img = np.random.default_rng(seed).random((9, 11))
    region = P.contour_region(img, beta)
    assert np.array_equal(region.mask, img >= region.level)
    above = img >= region.level
    for _, keys in region.segments:
        for kind, i, j in keys:
            other = (i, j + 1) if kind == "h" else (i + 1, j)
            assert above[i, j] != above[other]


def test_temperature_ratio_examples():
    cal = P.PyroCalibration(c1=0.0, c2=5e-4)
    for r in (0.2, 1.0, 7.0):
        assert P.temperature_ratio(r, cal) == pytest.approx(2000.0)
    cal = P.PyroCalibration(c1=-0.3, c2=4e-4)
    assert P.temperature_ratio(1.0, cal) == pytest.approx(1 / 4e-4)


@given(st.floats(800, 5000))
def test_temperature_ratio_round_trip(t):
    cal = P.PyroCalibration()
    r = P.ratio_for_temperature(t, cal)
    assert P.temperature_ratio(r, cal) == pytest.approx(t, rel=1e-9)


def test_temperature_ratio_domain():
    cal = P.PyroCalibration(c1=0.0, c2=-1e-3)
    with pytest.raises(CalibrationDomainError):
        P.temperature_ratio(2.0, cal)
    with pytest.raises(CalibrationDomainError):
        P.temperature_ratio(0.0, P.PyroCalibration())
    with pytest.raises(CalibrationDomainError):
        P.ratio_for_temperature(2000.0, P.PyroCalibration(c1=0.0, c2=5e-4))


def test_a_lambda():
    cal = P.PyroCalibration()
    assert P.a_lambda(1.0, 1e15, cal) == pytest.approx(1.0, rel=1e-9)
    t_unit = cal.p2 / cal.lambda1
    assert P.a_lambda(2.0, t_unit, cal) == pytest.approx(2 * math.e)
    assert P.a_lambda(2.0, t_unit, cal) == pytest.approx(5.4366, abs=1e-4)
    assert P.a_lambda(6.0, 2000.0, cal) == pytest.approx(2 * P.a_lambda(3.0, 2000.0, cal))
    with pytest.raises(CalibrationDomainError):
        P.a_lambda(1.0, 0.0, cal)


def test_hybrid_pixel_formula():
    cal = P.PyroCalibration()
    t, valid = P.hybrid_pixel_temperature(math.e, np.array([1.0, math.e, 2 * math.e]), cal)
    assert t[0] == pytest.approx(14388.0 / 900.0)
    assert t[0] == pytest.approx(15.987, abs=1e-3)
    assert valid.tolist() == [True, False, False]
    assert np.isnan(t[1]) and np.isnan(t[2])


@pytest.mark.parametrize("temp", [1400.0, 1800.0, 2400.0])
def test_round_trip_uniform(temp):
    pair = P.synth_radiance(np.full((12, 12), temp))
    res = P.hybrid_temperature(pair)
    assert res.valid[res.region.mask].all()
    err = np.abs(res.temperature[res.region.mask] - temp) / temp
    assert err.max() < 0.01


@given(st.floats(1200, 3500), st.floats(0.05, 1.0))
@settings(max_examples=50)
def test_round_trip_property(temp, eps):
    res = P.hybrid_temperature(P.synth_radiance(np.full((4, 5), temp), emissivity=eps))
    assert np.nanmax(np.abs(res.temperature - temp)) / temp < 0.01
    assert res.t_ratio == pytest.approx(temp, rel=1e-9)


def test_round_trip_on_spot_keeps_region():
    temp = 300.0 + gaussian_spot(peak=2200.0)
    res = P.hybrid_temperature(P.synth_radiance(temp))
    assert res.region.mask.sum() > 1
    assert np.isnan(res.temperature[~res.region.mask]).all()


def test_emissivity_cancels_and_ratio_grows_with_t():
    t = np.array([1500.0, 2000.0, 2500.0])
    a = P.synth_radiance(t, emissivity=0.2)
    b = P.synth_radiance(t, emissivity=0.9)
    assert np.allclose(a.i1 / a.i2, b.i1 / b.i2, rtol=1e-12)
    ratio = a.i1 / a.i2
    assert np.all(np.diff(ratio) > 0)


def test_synth_radiance_rejects_bad_input():
    with pytest.raises(ValueError):
        P.synth_radiance(np.array([0.0, 1000.0]))
    with pytest.raises(ValueError):
        P.synth_radiance(np.array([1000.0]), emissivity=0.0)


def test_hybrid_without_signal():
    with pytest.raises(RegionError):
        P.hybrid_temperature(P.RadiancePair(np.zeros((3, 3)), np.zeros((3, 3))))


def test_calibration_fit_recovers_slope():
    cal = P.fit_calibration()
    assert cal.c1 == pytest.approx(P.ratio_slope(), rel=1e-9)
    assert abs(cal.c2) < 1e-12
    assert P.ratio_slope() == pytest.approx(-0.3127606, rel=1e-6)


def test_calibration_validation():
    with pytest.raises(ValueError):
        P.PyroCalibration(beta=0.0)
    with pytest.raises(ValueError):
        P.RadiancePair(np.ones(3), np.ones(4))
    with pytest.raises(ValueError):
        P.RadiancePair(-np.ones(3), np.ones(3))


def test_physical_constant_isolates_the_melt_pool():
    frame = 303.0 + gaussian_spot(shape=(80, 65), centre=(40.0, 30.0), width=3.0, peak=2797.0)
    cal = P.physical_calibration()
    res = P.hybrid_temperature(P.synth_radiance(frame, cal=cal), cal)
    mask = res.region.mask
    assert 1 < mask.sum() < 100
    assert frame[mask].min() > 2000.0
    err = np.abs(res.temperature[mask] - frame[mask]) / frame[mask]
    assert err.max() < 0.01
    # with the default constant the same frame has almost no radiance contrast
    flat = P.synth_radiance(frame)
    assert flat.i1.min() / flat.i1.max() > 0.9
