"""Phantom generation: geometry, artifacts, scans, and datasets."""

import json

import numpy as np
import pytest
from scipy.ndimage import label

from octafreq.exceptions import ConfigError, DomainError, ShapeError, VolumeIOError
from octafreq.metrics import snr_vascular
from octafreq.phantom import (
    PhantomConfig,
    build_dataset,
    generate_truth_volume,
    load_dataset,
    materialize_truth,
    merge_repeats,
    simulate_scan,
    verify_manifest,
)
from octafreq.vessels import binarize, quantify_volume


def small_cfg(**kw):
    base = dict(dims=(16, 48, 48), n_trees=2, faz_radius=5.0, seed=0)
    base.update(kw)
    return PhantomConfig(**base)


def straight_tube(cfg, depth=8, y=10, x0=6, x1=42, radius=1.5, intensity=150.0):
    path = [(depth, y, x) for x in range(x0, x1)]
    return materialize_truth(cfg, [([path], radius, intensity)])


def quiet_cfg(**kw):
    kw.setdefault("tail_gain", 0.0)
    kw.setdefault("noise_sigma", 0.0)
    kw.setdefault("decorrelation_dropout", 0.0)
    return small_cfg(**kw)


def cluster_count(points, shape):
    m = np.zeros(shape, bool)
    for p in points:
        m[tuple(p)] = True
    return label(m, structure=np.ones((3, 3, 3), bool))[1]


class TestConfig:
    def test_defaults_are_valid(self):
        cfg = PhantomConfig()
        assert cfg.dims == (32, 64, 64)
        assert cfg.n_repeats == 8

    @pytest.mark.parametrize("kw", [
        {"dims": (8, 48, 48)},
        {"dims": (16, 48)},
        {"dims": (16, 50, 48)},
        {"n_trees": -1},
        {"radius_range": (2.0, 1.0)},
        {"radius_range": (0.2, 1.0)},
        {"radius_range": (1.0, 6.0)},
        {"n_repeats": 0},
        {"decorrelation_dropout": 1.0},
        {"decorrelation_dropout": -0.1},
        {"noise_sigma": -1.0},
        {"tail_gain": 1.0},
        {"tail_decay": 0.0},
        {"faz_radius": -2.0},
        {"voxel_size_mm": (0.012, -0.012, 0.012)},
    ])
    def test_rejects_bad_values(self, kw):
        with pytest.raises(ConfigError):
            small_cfg(**kw)

    def test_dict_round_trip(self):
        cfg = small_cfg(noise_sigma=7.5, n_repeats=4)
        again = PhantomConfig.from_dict(cfg.as_dict())
        assert again == cfg

    def test_from_dict_rejects_unknown_keys(self):
        with pytest.raises(ConfigError):
            PhantomConfig.from_dict({"sigma": 3.0})


class TestMaterialize:
    def test_straight_tube_truth(self):
        truth = straight_tube(quiet_cfg())
        segs = truth.segments
        assert segs.count == 1
        assert segs.segments[0].length == 36
        assert segs.segments[0].flow_index == pytest.approx(150.0)
        assert len(segs.end_points) == 2
        assert len(segs.bifurcation_points) == 0

    def test_clean_values_are_intensity_or_zero(self):
        truth = straight_tube(quiet_cfg(), intensity=200.0)
        vals = np.unique(truth.clean_volume.data)
        assert set(vals.tolist()) == {0.0, 200.0}
        assert truth.clean_volume.data[truth.vessel_mask].min() >= 80.0

    def test_vessel_mask_is_threshold_oracle(self):
        truth = straight_tube(small_cfg())
        assert np.array_equal(binarize(truth.clean_volume, 50.0),
                              truth.vessel_mask)

    def test_y_split_truth(self):
        stem = [(8, 24, x) for x in range(6, 20)]
        up = [stem[-1], (8, 25, 20)] + [(8, 25 + k, 20 + k) for k in range(1, 10)]
        down = [stem[-1], (8, 23, 20)] + [(8, 23 - k, 20 + k) for k in range(1, 10)]
        truth = materialize_truth(small_cfg(), [([stem, up, down], 1.2, 120.0)])
        assert truth.segments.count == 3
        assert len(truth.segments.bifurcation_points) == 1

    def test_tail_formula_below_vessel(self):
        cfg = quiet_cfg(tail_gain=0.4, tail_decay=0.3)
        truth = straight_tube(cfg, depth=5, radius=1.0, intensity=200.0)
        col = truth.tail_field[:, 10, 20]
        assert truth.vessel_mask[4:7, 10, 20].all()     # tube spans depth 4..6
        assert not truth.vessel_mask[7, 10, 20]
        # amplitude at offset k below the lowest vessel voxel
        for k in range(16 - 7):
            expected = 0.4 * 200.0 * np.exp(-0.3 * k)
            if expected >= 1.0:
                assert col[7 + k] == pytest.approx(expected, rel=1e-6)
            else:
                assert col[7 + k] == 0.0
        assert (truth.tail_field[:4, 10, 20] == 0.0).all()   # nothing above

    def test_artifact_mask_matches_tail_support(self):
        truth = straight_tube(small_cfg(tail_gain=0.4))
        assert np.array_equal(truth.artifact_mask,
                              (truth.tail_field >= 1.0) & ~truth.vessel_mask)
        assert truth.artifact_mask.any()
        assert not (truth.artifact_mask & truth.vessel_mask).any()

    def test_zero_gain_means_no_artifacts(self):
        truth = straight_tube(quiet_cfg())
        assert not truth.artifact_mask.any()
        assert not truth.tail_field.any()


class TestGenerate:
    def test_deterministic(self):
        cfg = small_cfg(seed=3)
        a = generate_truth_volume(cfg, 1)
        b = generate_truth_volume(cfg, 1)
        assert np.array_equal(a.clean_volume.data, b.clean_volume.data)
        assert np.array_equal(a.centerline, b.centerline)

    def test_volumes_differ_by_index(self):
        cfg = small_cfg(seed=3)
        a = generate_truth_volume(cfg, 0)
        b = generate_truth_volume(cfg, 1)
        assert not np.array_equal(a.clean_volume.data, b.clean_volume.data)

    def test_negative_index_rejected(self):
        with pytest.raises(ConfigError):
            generate_truth_volume(small_cfg(), -1)

    def test_vessels_avoid_faz_cylinder(self):
        truth = generate_truth_volume(small_cfg(seed=2), 0)
        assert truth.vessel_mask.any()
        assert not (truth.vessel_mask & truth.faz_mask).any()

    def test_no_trees_means_empty(self):
        truth = generate_truth_volume(small_cfg(n_trees=0), 0)
        assert not truth.vessel_mask.any()
        assert truth.segments.count == 0

    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_measured_counts_match_construction(self, seed):
        cfg = small_cfg(seed=seed, n_trees=3)
        truth = generate_truth_volume(cfg, 0)
        rep = quantify_volume(truth.clean_volume, threshold=50.0)
        assert rep.segment_count == truth.segments.count
        assert (cluster_count(rep.segments.bifurcation_points, cfg.dims)
                == cluster_count(truth.segments.bifurcation_points, cfg.dims))
        t_lens = sorted(s.length for s in truth.segments.segments)
        q_lens = sorted(s.length for s in rep.segments.segments)
        assert all(abs(a - b) <= 5 for a, b in zip(t_lens, q_lens))

    def test_flow_indices_equal_tree_intensities(self):
        truth = generate_truth_volume(small_cfg(seed=2), 0)
        intensities = set(np.unique(truth.clean_volume.data).tolist()) - {0.0}
        for seg in truth.segments.segments:
            assert any(abs(seg.flow_index - v) < 1.0 for v in intensities)


class TestScan:
    def test_deterministic_per_repeat(self):
        cfg = small_cfg(seed=5)
        truth = generate_truth_volume(cfg, 0)
        a = simulate_scan(truth, cfg, 2)
        b = simulate_scan(truth, cfg, 2)
        assert np.array_equal(a.data, b.data)

    def test_repeats_differ(self):
        cfg = small_cfg(seed=5)
        truth = generate_truth_volume(cfg, 0)
        a = simulate_scan(truth, cfg, 0)
        b = simulate_scan(truth, cfg, 1)
        assert not np.array_equal(a.data, b.data)

    def test_repeat_index_range(self):
        cfg = small_cfg(n_repeats=2)
        truth = generate_truth_volume(cfg, 0)
        with pytest.raises(ConfigError):
            simulate_scan(truth, cfg, 2)
        with pytest.raises(ConfigError):
            simulate_scan(truth, cfg, -1)

    def test_quiet_scan_equals_clean(self):
        cfg = quiet_cfg(seed=2)
        truth = generate_truth_volume(cfg, 0)
        scan = simulate_scan(truth, cfg, 0)
        assert np.array_equal(scan.data, truth.clean_volume.data)

    def test_values_clipped(self):
        cfg = small_cfg(noise_sigma=80.0)
        truth = generate_truth_volume(cfg, 0)
        scan = simulate_scan(truth, cfg, 0)
        assert scan.data.min() >= 0.0
        assert scan.data.max() <= 255.0

    def test_background_noise_is_rectified_normal(self):
        # X ~ N(0, s); max(X, 0) has mean s/sqrt(2*pi), var s^2*(1/2 - 1/(2*pi))
        sigma = 12.0
        cfg = quiet_cfg(noise_sigma=sigma, n_repeats=16)
        truth = straight_tube(cfg)
        samples = np.stack([simulate_scan(truth, cfg, r).data[truth.faz_mask]
                            for r in range(cfg.n_repeats)])
        assert samples.mean() == pytest.approx(sigma / np.sqrt(2 * np.pi), rel=0.04)
        assert samples.var() == pytest.approx(
            sigma * sigma * (0.5 - 1.0 / (2 * np.pi)), rel=0.06)

    def test_vessel_noise_variance_without_dropout(self):
        sigma = 12.0
        cfg = quiet_cfg(noise_sigma=sigma, n_repeats=32)
        truth = straight_tube(cfg)   # 150 +/- 5 sigma stays inside [0, 255]
        stack = np.stack([simulate_scan(truth, cfg, r).data[truth.vessel_mask]
                          for r in range(cfg.n_repeats)])
        per_voxel_var = stack.var(axis=0, ddof=1)
        assert per_voxel_var.mean() == pytest.approx(sigma * sigma, rel=0.08)
        assert stack.mean() == pytest.approx(150.0, rel=0.01)

    def test_dropout_fraction(self):
        cfg = quiet_cfg(decorrelation_dropout=0.3, n_repeats=8)
        truth = straight_tube(cfg)
        zeros = total = 0
        for r in range(cfg.n_repeats):
            v = simulate_scan(truth, cfg, r).data[truth.vessel_mask]
            zeros += (v == 0.0).sum()
            total += v.size
        assert zeros / total == pytest.approx(0.3, abs=0.04)

    def test_tails_not_modulated_by_dropout(self):
        cfg = quiet_cfg(decorrelation_dropout=0.9, tail_gain=0.4)
        truth = straight_tube(cfg)
        scan = simulate_scan(truth, cfg, 0)
        mask = truth.artifact_mask
        assert mask.any()
        assert np.array_equal(scan.data[mask], truth.tail_field[mask])


class TestMerge:
    def test_two_scan_average_is_exact(self):
        cfg = small_cfg(seed=7, n_repeats=2)
        truth = generate_truth_volume(cfg, 0)
        a = simulate_scan(truth, cfg, 0)
        b = simulate_scan(truth, cfg, 1)
        merged = merge_repeats([a, b])
        expected = ((a.data.astype(np.float64) + b.data) / 2.0).astype(np.float32)
        assert np.array_equal(merged.data, expected)

    def test_needs_two(self):
        cfg = small_cfg(n_repeats=2)
        truth = generate_truth_volume(cfg, 0)
        with pytest.raises(DomainError):
            merge_repeats([simulate_scan(truth, cfg, 0)])

    def test_shape_mismatch(self):
        cfg_a = quiet_cfg(n_repeats=2)
        cfg_b = quiet_cfg(dims=(16, 56, 48), n_repeats=2)
        sa = simulate_scan(generate_truth_volume(cfg_a, 0), cfg_a, 0)
        sb = simulate_scan(generate_truth_volume(cfg_b, 0), cfg_b, 0)
        with pytest.raises(ShapeError):
            merge_repeats([sa, sb])

    def test_merging_doubles_vascular_snr(self):
        cfg = small_cfg(seed=2, n_repeats=8)
        truth = generate_truth_volume(cfg, 0)
        scans = [simulate_scan(truth, cfg, r) for r in range(8)]
        merged = merge_repeats(scans)
        noise_region = truth.faz_mask & ~truth.artifact_mask
        snr_single = snr_vascular(scans[0].data, truth.vessel_mask, noise_region)
        snr_merged = snr_vascular(merged.data, truth.vessel_mask, noise_region)
        assert snr_merged >= 2.0 * snr_single


@pytest.fixture(scope="module")
def built(tmp_path_factory):
    out = tmp_path_factory.mktemp("phantom_ds")
    cfg = small_cfg(seed=1, n_repeats=3, n_trees=2)
    manifest = build_dataset(cfg, 3, out)
    return cfg, out, manifest


class TestDataset:
    def test_manifest_shape(self, built):
        cfg, out, manifest = built
        assert manifest["n_volumes"] == 3
        assert [v["split"] for v in manifest["volumes"]] == \
            ["train", "train", "val"]
        assert len(manifest["pairs"]) == 3 * 16
        assert manifest["config"]["seed"] == 1
        on_disk = json.loads((out / "manifest.json").read_text())
        assert on_disk == manifest

    def test_files_written(self, built):
        _, out, manifest = built
        vol0 = manifest["volumes"][0]["files"]
        assert len(vol0["singles"]) == 3
        for rel in vol0["singles"] + [vol0["merged"], vol0["clean"],
                                      vol0["vessel_mask"], vol0["artifact_mask"]]:
            assert (out / rel).exists()
            assert (out / (rel + ".json")).exists()
        truth = json.loads((out / vol0["truth"]).read_text())
        assert truth["segment_count"] == len(truth["segment_lengths"])

    def test_checksums_verify(self, built):
        _, out, _ = built
        verify_manifest(out)

    def test_load_dataset_splits_and_planes(self, built):
        _, out, _ = built
        ds = load_dataset(out)
        assert len(ds.train) == 2 * 16
        assert len(ds.val) == 16
        single, merged = ds.train[0]
        assert single.shape == (48, 48)
        assert single.dtype == np.float32
        assert 0.0 <= single.min() and single.max() <= 255.0
        assert not np.array_equal(single, merged)

    def test_corruption_detected(self, built, tmp_path):
        cfg = small_cfg(seed=9, n_repeats=2, n_trees=1)
        build_dataset(cfg, 1, tmp_path)
        target = tmp_path / "vol000" / "merged.f32"
        raw = bytearray(target.read_bytes())
        raw[0] ^= 0xFF
        target.write_bytes(bytes(raw))
        with pytest.raises(VolumeIOError):
            verify_manifest(tmp_path)
        with pytest.raises(VolumeIOError):
            load_dataset(tmp_path)

    def test_build_is_deterministic(self, built, tmp_path):
        cfg, out, _ = built
        again = tmp_path / "again"
        build_dataset(cfg, 3, again)
        assert (again / "manifest.json").read_bytes() == \
            (out / "manifest.json").read_bytes()

    def test_single_volume_has_no_val(self, tmp_path):
        cfg = small_cfg(seed=4, n_repeats=2, n_trees=1)
        manifest = build_dataset(cfg, 1, tmp_path)
        assert [v["split"] for v in manifest["volumes"]] == ["train"]
        ds = load_dataset(tmp_path)
        assert ds.val == []

    def test_single_repeat_config_rejected(self, tmp_path):
        with pytest.raises(ConfigError):
            build_dataset(small_cfg(n_repeats=1), 2, tmp_path)

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(VolumeIOError):
            load_dataset(tmp_path / "nowhere")
