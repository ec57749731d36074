import filecmp

import numpy as np
import pytest

from ptwin import ct, fileio, registration, synth
from ptwin.synth import ProcessParams, SynthConfig

CFG = SynthConfig()


def test_rosenthal_far_field_and_symmetry():
    p = ProcessParams()
    assert synth.rosenthal_temperature(1.0, 0.0, 0.0, p) == pytest.approx(p.preheat_K, abs=1e-6)
    assert synth.rosenthal_temperature(-10.0, 0.0, 0.0, p) == pytest.approx(p.preheat_K, rel=1e-3)
    for r in (30e-6, 80e-6, 200e-6):
        behind = synth.rosenthal_temperature(-r, 0.0, 0.0, p)
        ahead = synth.rosenthal_temperature(r, 0.0, 0.0, p)
        assert behind > ahead


def test_rosenthal_linear_in_power_and_capped():
    p = ProcessParams()
    p2 = ProcessParams(power_W=2 * p.power_W)
    pt = (-200e-6, 40e-6, 0.0)
    rise = synth.rosenthal_temperature(*pt, p) - p.preheat_K
    assert synth.rosenthal_temperature(*pt, p2) - p.preheat_K == pytest.approx(2 * rise, rel=1e-12)
    assert synth.rosenthal_temperature(0.0, 0.0, 0.0, p) == p.cap_K


def test_rosenthal_floor_radius():
    p = ProcessParams(cap_K=1e9)
    at_origin = synth.rosenthal_temperature(0.0, 0.0, 0.0, p, floor_m=10.5e-6)
    at_floor = synth.rosenthal_temperature(0.0, 10.5e-6, 0.0, p, floor_m=10.5e-6)
    assert np.isfinite(at_origin)
    assert at_origin == pytest.approx(at_floor)


def test_process_params_validation():
    with pytest.raises(ValueError):
        ProcessParams(power_W=0)
    with pytest.raises(ValueError):
        ProcessParams(absorptivity=1.5)


def test_step_tables():
    spacing = synth.step_params("spacing")
    velocity = synth.step_params("velocity")
    assert [p.hatch_um for p in spacing] == list(synth.SPACING_HATCH_UM)
    assert all(p.velocity_m_s == 1.4 for p in spacing)
    assert [p.velocity_m_s for p in velocity] == list(synth.VELOCITY_M_S)
    assert all(p.hatch_um == 50.0 for p in velocity)
    with pytest.raises(ValueError):
        synth.step_params("power")


def test_porosity_rate_shape():
    nominal = synth.porosity_rate(ProcessParams(), CFG)
    assert nominal <= 0.5
    rates = [synth.porosity_rate(ProcessParams(hatch_um=h), CFG) for h in (50, 55, 60, 65, 70, 75)]
    assert all(a < b for a, b in zip(rates, rates[1:]))
    below = [synth.porosity_rate(ProcessParams(hatch_um=h), CFG) for h in (50, 45, 40, 35)]
    assert all(a < b for a, b in zip(below, below[1:]))
    vel = [synth.porosity_rate(ProcessParams(velocity_m_s=v), CFG) for v in (1.4, 1.54, 1.75)]
    assert all(a < b for a, b in zip(vel, vel[1:]))
    slow = [synth.porosity_rate(ProcessParams(velocity_m_s=v), CFG) for v in (1.4, 1.26, 1.05)]
    assert all(a < b for a, b in zip(slow, slow[1:]))
    # the high-energy side stays sparse
    assert synth.porosity_rate(ProcessParams(hatch_um=45.0), CFG) < \
        synth.porosity_rate(ProcessParams(hatch_um=55.0), CFG)


def test_hatch_50_gives_20_tracks():
    path = synth.raster_path(ProcessParams(hatch_um=50.0), 0, 2000.0, CFG)
    assert len(path.starts) == 20
    img = synth.path_projection(path, CFG)
    assert synth.count_tracks(img[40]) == 20


def test_wider_hatch_fewer_tracks():
    wide = synth.raster_path(ProcessParams(hatch_um=75.0), 0, 2000.0, CFG)
    narrow = synth.raster_path(ProcessParams(hatch_um=25.0), 0, 2000.0, CFG)
    assert len(wide.starts) == 13 and len(narrow.starts) == 40
    assert synth.count_tracks(synth.path_projection(wide, CFG)[40]) == 13
    wide_gap = np.diff(wide.starts[:, 1]).min()
    narrow_gap = np.diff(np.sort(narrow.starts[:, 1])).min()
    assert wide_gap == pytest.approx(75.0) and narrow_gap == pytest.approx(25.0)


def test_odd_layers_rotate_and_serpentine():
    p = ProcessParams()
    even = synth.raster_path(p, 0, 2000.0, CFG)
    odd = synth.raster_path(p, 1, 2000.0, CFG)
    assert np.allclose(even.starts[:, 1], even.ends[:, 1])
    assert np.allclose(odd.starts[:, 0], odd.ends[:, 0])
    assert np.allclose(even.starts[1], [CFG.footprint_row0_um + 2000.0, even.starts[1, 1]])
    assert np.allclose(even.ends[0], even.starts[0] + [2000.0, 0.0])


def test_faster_scan_moves_further_per_frame():
    dt = CFG.frame_dt_s
    steps = []
    for v in (1.05, 1.4, 1.75):
        path = synth.raster_path(ProcessParams(velocity_m_s=v), 0, 2000.0, CFG)
        (a, b), _ = path.position(np.array([1e-4, 1e-4 + dt]))
        steps.append(np.linalg.norm(b - a))
        assert steps[-1] == pytest.approx(v * dt * 1e6)
    assert steps[0] < steps[1] < steps[2]


def test_frame_selection():
    cfg = SynthConfig(frames=50)
    path = synth.raster_path(ProcessParams(), 0, 2800.0, cfg)
    times, kept = synth.select_frames(path, cfg)
    assert len(times) == 50
    assert np.all(np.diff(times) >= 0)
    assert kept <= cfg.max_raw_frames
    pos, _ = path.position(times)
    assert np.all(pos[:, 0] < cfg.frame_shape[0] * cfg.pixel_pitch_um)


def test_render_bounds():
    cfg = SynthConfig(frames=12)
    p = ProcessParams(hatch_um=70.0)
    path = synth.raster_path(p, 0, 2600.0, cfg)
    pores = synth.inject_pores(p, 0, path, cfg, np.random.default_rng(0), [])
    seq = synth.render_sequence(path, p, cfg, pores)
    assert seq.shape == (12, 80, 65) and seq.dtype == np.float32
    assert np.isfinite(seq).all()
    assert seq.min() >= p.preheat_K and seq.max() <= p.cap_K


def test_esd_distribution_mean():
    d = synth.sample_esd(np.random.default_rng(42), 2000, CFG)
    assert abs(d.mean() - 32.59) / 32.59 < 0.10


def test_sphere_offsets_and_first_voxel():
    off = synth.sphere_offsets(3.0)
    assert len(off) == np.count_nonzero(
        (np.arange(-3, 4)[:, None, None] ** 2 + np.arange(-3, 4)[None, :, None] ** 2
         + np.arange(-3, 4)[None, None, :] ** 2) <= 9)
    assert synth.first_voxel((10, 10, 10), off) == (7, 10, 10)


def test_porosity_monotone_over_seeds():
    means = {}
    for h in (50.0, 75.0):
        p = ProcessParams(hatch_um=h)
        path = synth.raster_path(p, 0, 2000.0, CFG)
        counts = [len(synth.inject_pores(p, 40, path, CFG, np.random.default_rng(s), []))
                  for s in range(20)]
        means[h] = np.mean(counts)
    assert means[75.0] > means[50.0]


def test_pores_respect_size_and_gap(small_sample):
    pores = small_sample.pores
    assert all(q.voxel_count >= CFG.min_voxels for q in pores)
    for i, a in enumerate(pores):
        for b in pores[i + 1:]:
            d = np.linalg.norm(np.subtract(a.center, b.center))
            assert d >= a.radius_vox + b.radius_vox + CFG.gap_voxels - 1e-9


def test_self_consistency(small_sample):
    out = small_sample.out_dir
    cfg = small_sample.cfg
    ids, pitch = fileio.read_volume(out / "volume.ctvx")
    assert ids.shape == cfg.volume_shape() and pitch == pytest.approx(cfg.voxel_pitch_um)
    assert int(ids.max()) == len(small_sample.pores)
    off = cfg.offsets()
    _, oy, ox = off.offset_voxels
    window = (52 + oy, 468 + oy, 7 + ox, 423 + ox)
    labels = {rec[0]: rec[3] for rec in fileio.read_labels(out / "labels.ptlb")}
    for layer in range(cfg.n_layers):
        for depth in (1, 2, 3):
            z = off.layer_z0(layer) - (depth - 1) * off.layer_voxels
            counted = ct.count_pores(ids, z, depth, window=window)
            assert counted == small_sample.truth_counts[(layer, depth)]
            assert labels[layer][depth - 1] == counted


def test_segmentation_recovers_injected_pores(small_sample):
    ids, _ = fileio.read_volume(small_sample.out_dir / "volume.ctvx")
    relabelled, n = ct.label_components(np.asarray(ids) > 0)
    assert n == len(small_sample.pores)
    assert np.array_equal(relabelled, ids)
    rows = fileio.read_pore_rows(small_sample.out_dir / "pores.csv")
    assert [r[2] for r in rows] == [q.voxel_count for q in small_sample.pores]


def test_sample_files(small_sample):
    out = small_sample.out_dir
    cfg = small_sample.cfg
    for layer in range(cfg.n_layers):
        seq, pitch, dt = fileio.read_sequence(out / synth.sequence_name(layer))
        assert seq.shape == (200, 80, 65)
        assert seq.min() >= 303.0
    meta = fileio.read_kv(out / "sample.cfg")
    assert synth.synth_config_from_dict(meta) == cfg


def test_regeneration_is_byte_identical(tmp_path):
    cfg = SynthConfig(layers_per_step=1, steps=3, frames=20)
    a = synth.generate_sample("velocity", 5, tmp_path / "a", cfg)
    synth.generate_sample("velocity", 5, tmp_path / "b", cfg)
    names = sorted(p.name for p in (tmp_path / "a").iterdir())
    assert names == sorted(p.name for p in (tmp_path / "b").iterdir())
    assert len([n for n in names if n.endswith(".ptsq")]) == 3
    match, mismatch, errors = filecmp.cmpfiles(tmp_path / "a", tmp_path / "b", names,
                                               shallow=False)
    assert mismatch == [] and errors == []
    assert a.cfg.kind == "velocity"


def test_full_config_layout():
    assert CFG.n_layers == 160
    assert CFG.volume_shape() == (1500, 524, 500)
    assert synth.STEP_LENGTHS_MM[0] == 2.8 and synth.STEP_LENGTHS_MM[-1] == 1.0
    plan = synth.generate_sample("spacing", 1, None, SynthConfig(layers_per_step=1))
    assert plan.out_dir is None and len(plan.truth_counts) == 30
    assert registration.VOXELS_PER_PX == pytest.approx(6.5)
