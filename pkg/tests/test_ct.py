import itertools
import math
from collections import deque

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ptwin import ct
from ptwin.errors import RegionError


def flood_fill_labels(binary, connectivity):
    """Scan in C order; each unvisited void voxel seeds a breadth-first fill."""
    if connectivity == 6:
        steps = [(1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1)]
    else:
        steps = [d for d in itertools.product((-1, 0, 1), repeat=3) if d != (0, 0, 0)]
    Z, Y, X = binary.shape
    out = np.zeros(binary.shape, dtype=np.int64)
    occupied = binary.tolist()
    next_id = 0
    for z, y, x in zip(*np.nonzero(binary)):
        z, y, x = int(z), int(y), int(x)
        if out[z, y, x]:
            continue
        next_id += 1
        out[z, y, x] = next_id
        queue = deque([(z, y, x)])
        while queue:
            cz, cy, cx = queue.popleft()
            for dz, dy, dx in steps:
                nz, ny, nx = cz + dz, cy + dy, cx + dx
                if 0 <= nz < Z and 0 <= ny < Y and 0 <= nx < X and occupied[nz][ny][nx] \
                        and not out[nz, ny, nx]:
                    out[nz, ny, nx] = next_id
                    queue.append((nz, ny, nx))
    return out, next_id


def test_single_voxel():
    v = np.zeros((4, 4, 4), bool)
    v[1, 2, 3] = True
    ids, n = ct.label_components(v)
    assert n == 1 and ids[1, 2, 3] == 1
    _, table = ct.segment(v)
    assert table.records[0].voxel_count == 1


def test_diagonal_pair_connectivity():
    v = np.zeros((3, 3, 3), bool)
    v[0, 0, 0] = v[1, 1, 1] = True
    assert ct.label_components(v, 26)[1] == 1
    assert ct.label_components(v, 6)[1] == 2


def test_bad_connectivity():
    with pytest.raises(ValueError):
        ct.label_components(np.zeros((2, 2, 2), bool), 18)


def test_matches_flood_fill_oracle():
    rng = np.random.default_rng(2024)
    for trial in range(100):
        density = rng.uniform(0.02, 0.3)
        v = rng.random((32, 32, 32)) < density
        for conn in (6, 26):
            ids, n = ct.label_components(v, conn)
            ref, n_ref = flood_fill_labels(v, conn)
            assert n == n_ref, (trial, conn)
            assert np.array_equal(ids, ref), (trial, conn)


def test_esd_examples():
    assert ct.esd(1) == pytest.approx(4.504, abs=1e-3)
    assert ct.esd(1) == pytest.approx((6 * 3.63 ** 3 / math.pi) ** (1 / 3), rel=1e-12)
    assert ct.esd(57, pitch_um=7.26) == pytest.approx(2 * ct.esd(57), rel=1e-12)
    with pytest.raises(ValueError):
        ct.esd(0)


@pytest.mark.parametrize("d_vox", [8, 14, 20])
def test_esd_of_voxelised_sphere(d_vox):
    r = d_vox / 2
    g = np.arange(d_vox + 2) - (d_vox + 1) / 2
    zz, yy, xx = np.meshgrid(g, g, g, indexing="ij")
    n = int(np.count_nonzero(zz ** 2 + yy ** 2 + xx ** 2 <= r * r))
    assert ct.esd(n, 1.0) == pytest.approx(d_vox, rel=0.05)


def test_threshold_arithmetic():
    assert ct.threshold_value(32.59, 20.60) == pytest.approx(53.19, abs=0.01)
    assert ct.threshold_value(30.78, 16.01) == pytest.approx(46.79, abs=0.01)


def make_table(counts):
    return ct.PoreTable([ct.PoreRecord(i + 1, (0.0, 0.0, 0.0), c, ct.esd(c))
                         for i, c in enumerate(counts)])


def test_threshold_pores_filters_then_cuts():
    table = make_table([5, 50, 120, 300, 900, 2500, 8000])
    out = ct.threshold_pores(table)
    survivors = np.array([ct.esd(c) for c in (120, 300, 900, 2500, 8000)])
    assert out.mu == pytest.approx(survivors.mean())
    assert out.sigma == pytest.approx(survivors.std())
    assert out.threshold_um == pytest.approx(survivors.mean() + survivors.std())
    assert out.ids.tolist() == [i + 1 for i, c in enumerate([5, 50, 120, 300, 900, 2500, 8000])
                                if c >= 100 and ct.esd(c) >= out.threshold_um]
    plain = ct.threshold_pores(table, sigma_mult=0)
    assert plain.ids.tolist() == [3, 4, 5, 6, 7]


def test_threshold_pores_empty():
    out = ct.threshold_pores(make_table([3, 40]))
    assert len(out) == 0 and out.mu is None and out.sigma is None


@given(st.lists(st.integers(1, 5000), min_size=1, max_size=40))
@settings(max_examples=60)
def test_threshold_subset_and_idempotent_identity(counts):
    table = make_table(counts)
    cut = ct.threshold_pores(table)
    assert set(cut.ids) <= set(table.ids)
    again = ct.threshold_pores(cut)
    assert set(again.ids) <= set(cut.ids)
    base = ct.threshold_pores(table, sigma_mult=0)
    assert ct.threshold_pores(base, sigma_mult=0).ids.tolist() == base.ids.tolist()


def test_pore_table_totals_and_centroids():
    rng = np.random.default_rng(5)
    v = rng.random((40, 20, 20)) < 0.1
    ids, table = ct.segment(v)
    assert table.voxel_counts.sum() == np.count_nonzero(v)
    chunked = ct.pore_table(ids, chunk=7)
    assert [r.voxel_count for r in chunked] == [r.voxel_count for r in table]
    for rec in table.records[:20]:
        zz, yy, xx = np.nonzero(ids == rec.id)
        assert rec.centroid == pytest.approx((zz.mean(), yy.mean(), xx.mean()))
        assert rec.esd_um == pytest.approx(ct.esd(len(zz)))


def test_keep_ids():
    ids = np.array([[[0, 1, 2], [3, 2, 1]]], dtype=np.uint16)
    out = ct.keep_ids(ids, [2])
    assert out.tolist() == [[[0, 0, 2], [0, 2, 0]]]
    assert out.dtype == np.uint16


def test_count_pores_examples():
    ids = np.zeros((27, 10, 10), np.uint16)
    assert ct.count_pores(ids, 0) == 0
    ids[7:12, 3, 3] = 4  # spans layers 0 and 1
    ids[2, 5, 5] = 9
    assert ct.count_pores(ids, 0, 1) == 2
    assert ct.count_pores(ids, 9, 1) == 1
    assert ct.count_pores(ids, 0, 2) == 2
    assert ct.count_pores(ids, 0, 1, window=(4, 10, 4, 10)) == 1
    with pytest.raises(RegionError):
        ct.count_pores(ids, 18, 2)
    with pytest.raises(RegionError):
        ct.count_pores(ids, 0, 1, window=(0, 11, 0, 5))


def test_count_pores_random_oracle_and_depth_monotone():
    rng = np.random.default_rng(11)
    for _ in range(20):
        ids = rng.integers(0, 30, size=(36, 6, 6)) * (rng.random((36, 6, 6)) < 0.05)
        for z in (0, 5, 9):
            prev = -1
            for depth in (1, 2, 3):
                expect = len({int(v) for v in ids[z:z + 9 * depth].ravel() if v})
                got = ct.count_pores(ids, z, depth)
                assert got == expect
                assert got >= prev
                prev = got


def test_layer_slice():
    ids = np.zeros((1410, 2, 2), np.uint8)
    slab, partial = ct.layer_slice(ids, 0)
    assert slab.shape[0] == 9 and not partial
    assert ct.layer_count(1410) == 157
    slab, partial = ct.layer_slice(ids, 155)
    assert slab.shape[0] == 9 and not partial
    slab, partial = ct.layer_slice(ids, 156)
    assert slab.shape[0] == 6 and partial
    with pytest.raises(RegionError):
        ct.layer_slice(ids, 157)
    with pytest.raises(RegionError):
        ct.layer_slice(ids, -1)


def test_layers_tile_volume():
    ids = np.arange(50)[:, None, None] * np.ones((1, 2, 2), int)
    pieces = [ct.layer_slice(ids, i)[0] for i in range(ct.layer_count(50))]
    assert np.array_equal(np.concatenate(pieces), ids)
