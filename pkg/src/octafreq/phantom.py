"""Synthetic OCTA volumes with exact ground truth.

A phantom is built in three layers:

* **truth** — branching vessel trees grown as random walks on the voxel
  grid, dilated to tubes of per-tree radius and intensity.  The walk
  enforces curvature and separation limits so the dilated tubes never
  fuse and the centerline stays a digitally clean curve; ground-truth
  segment statistics are read off the centerline with the same
  classification/extraction machinery used for measurements.
* **tails** — deterministic projection artifacts: every vessel voxel
  casts an exponentially decaying copy of its value down the depth
  axis, combined by maximum and truncated below amplitude 1.
* **scans** — per-repeat speckle: vessel voxels are dropped out with a
  per-voxel Bernoulli draw, Gaussian noise is added everywhere, and the
  result is clipped to [0, 255].  Tails are not modulated by dropout.

Random state derives from ``(seed, volume_index, stream)`` where stream 0
is the geometry and stream ``1 + r`` is repeat ``r``, so any volume or
repeat can be regenerated in isolation.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import distance_transform_edt

from .exceptions import ConfigError, DomainError, ShapeError, VolumeIOError
from .training import PairDataset
from .vessels import SegmentSet, classify_skeleton_voxels, extract_segments
from .volume import Volume, read_volume, sha256_of, write_volume

__all__ = [
    "PhantomConfig", "PhantomTruth",
    "generate_truth_volume", "materialize_truth",
    "simulate_scan", "merge_repeats",
    "build_dataset", "load_dataset", "verify_manifest",
]

_MIN_BRANCH_VOXELS = 14        # shorter branch attempts are discarded
_MAX_BRANCHES_PER_TREE = 5
_MAX_TURN = 0.10               # heading jitter scale per step
_DEPTH_DAMP = 0.25             # depth drift damping (trees run laterally)
_PLACEMENT_TRIES = 80
_REDIRECT_TRIES = 10
_INTENSITY_RANGE = (80.0, 255.0)


@dataclass
class PhantomConfig:
    dims: tuple = (32, 64, 64)                       # (D, H, W)
    voxel_size_mm: tuple = (0.012, 0.012, 0.012)
    n_trees: int = 4
    radius_range: tuple = (1.0, 2.0)
    n_repeats: int = 8
    decorrelation_dropout: float = 0.2
    noise_sigma: float = 12.0
    tail_gain: float = 0.35
    tail_decay: float = 0.15
    faz_radius: float = 7.0
    seed: int = 0

    def __post_init__(self):
        self.dims = tuple(int(v) for v in self.dims)
        self.voxel_size_mm = tuple(float(v) for v in self.voxel_size_mm)
        self.radius_range = tuple(float(v) for v in self.radius_range)
        if len(self.dims) != 3 or any(v < 16 for v in self.dims):
            raise ConfigError(f"dims must be 3 values of at least 16, got {self.dims}")
        if self.dims[1] % 8 or self.dims[2] % 8:
            raise ConfigError(f"lateral dims must be multiples of 8, got {self.dims}")
        if len(self.voxel_size_mm) != 3 or any(v <= 0 for v in self.voxel_size_mm):
            raise ConfigError(f"voxel_size_mm must be 3 positive values, "
                              f"got {self.voxel_size_mm}")
        if self.n_trees < 0:
            raise ConfigError(f"n_trees must be non-negative, got {self.n_trees}")
        lo, hi = self.radius_range
        if not 0.5 <= lo <= hi <= 4.0:
            raise ConfigError(f"radius_range must satisfy 0.5 <= lo <= hi <= 4, "
                              f"got {self.radius_range}")
        if self.n_repeats < 1:
            raise ConfigError(f"n_repeats must be positive, got {self.n_repeats}")
        if not 0.0 <= self.decorrelation_dropout < 1.0:
            raise ConfigError(f"decorrelation_dropout must be in [0, 1), "
                              f"got {self.decorrelation_dropout}")
        if self.noise_sigma < 0.0:
            raise ConfigError(f"noise_sigma must be non-negative, got {self.noise_sigma}")
        if not 0.0 <= self.tail_gain < 1.0:
            raise ConfigError(f"tail_gain must be in [0, 1), got {self.tail_gain}")
        if self.tail_decay <= 0.0:
            raise ConfigError(f"tail_decay must be positive, got {self.tail_decay}")
        if self.faz_radius < 0.0:
            raise ConfigError(f"faz_radius must be non-negative, got {self.faz_radius}")

    def as_dict(self) -> dict:
        return {
            "dims": list(self.dims),
            "voxel_size_mm": list(self.voxel_size_mm),
            "n_trees": self.n_trees,
            "radius_range": list(self.radius_range),
            "n_repeats": self.n_repeats,
            "decorrelation_dropout": self.decorrelation_dropout,
            "noise_sigma": self.noise_sigma,
            "tail_gain": self.tail_gain,
            "tail_decay": self.tail_decay,
            "faz_radius": self.faz_radius,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PhantomConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown phantom config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class PhantomTruth:
    clean_volume: Volume
    centerline: np.ndarray = field(repr=False)
    vessel_mask: np.ndarray = field(repr=False)
    artifact_mask: np.ndarray = field(repr=False)
    faz_mask: np.ndarray = field(repr=False)
    tail_field: np.ndarray = field(repr=False)
    segments: SegmentSet = field(repr=False)
    volume_index: int = 0


# ---------------------------------------------------------------------------
# tree growth


class _Occupancy:
    """Grown centerline voxels of every finished branch, as flat arrays."""

    def __init__(self):
        self.xyz = np.empty((0, 3), np.float64)
        self.tree = np.empty((0,), np.int64)

    def add(self, points, tree_id):
        pts = np.asarray(points, np.float64).reshape(-1, 3)
        self.xyz = np.concatenate([self.xyz, pts])
        self.tree = np.concatenate([
            self.tree, np.full(len(pts), tree_id, np.int64)])

    def rows_near(self, point, dist):
        if not len(self.xyz):
            return np.empty((0,), np.int64)
        d2 = ((self.xyz - np.asarray(point, np.float64)) ** 2).sum(1)
        return np.flatnonzero(d2 <= dist * dist)

    def exempt_mask(self, joint, dist, tree_id):
        """Same-tree voxels near a joint, excused from the separation rule."""
        mask = np.zeros(len(self.xyz), bool)
        rows = self.rows_near(joint, dist)
        mask[rows[self.tree[rows] == tree_id]] = True
        return mask


def _unit(v):
    n = np.linalg.norm(v)
    return v / n if n > 0 else np.array([0.0, 0.0, 1.0])


_COS_MAX_TURN = math.cos(math.radians(25.0))


def _clamped_turn(d, trial):
    """``trial`` normalised, but never more than 25 degrees away from ``d``."""
    t = _unit(trial)
    c = float(t @ d)
    if c >= _COS_MAX_TURN:
        return t
    w = t - c * d
    norm = np.linalg.norm(w)
    if norm < 1e-12:
        return d
    sin_max = math.sqrt(1.0 - _COS_MAX_TURN ** 2)
    return _unit(_COS_MAX_TURN * d + sin_max * (w / norm))


def _inside(v, dims, margin, faz_keepout):
    d, h, w = dims
    if not (margin <= v[0] < d - margin and margin <= v[1] < h - margin
            and margin <= v[2] < w - margin):
        return False
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    return (v[1] - cy) ** 2 + (v[2] - cx) ** 2 >= faz_keepout ** 2


def _clear_of(v, points, min_chebyshev=2):
    pts = np.asarray(points, np.float64).reshape(-1, 3)
    if not len(pts):
        return True
    return np.abs(pts - np.asarray(v, np.float64)).max(1).min() >= min_chebyshev


_NEIGHBOR_OFFSETS = np.array([(dz, dy, dx)
                              for dz in (-1, 0, 1) for dy in (-1, 0, 1)
                              for dx in (-1, 0, 1) if (dz, dy, dx) != (0, 0, 0)],
                             np.int64)
_NEIGHBOR_UNITS = _NEIGHBOR_OFFSETS / np.linalg.norm(
    _NEIGHBOR_OFFSETS, axis=1, keepdims=True)


def _step_valid(v, path, occ, sep, grid, exempt, reserved):
    """Whether ``v`` may become the next voxel of ``path``.

    It must stay inside bounds and outside the avascular cylinder; touch
    no occupied or reserved voxel and no own voxel other than the
    immediate predecessor (Chebyshev >= 2), which keeps every grown curve
    free of the staircase corners that would read as spurious junctions;
    keep Euclidean ``sep`` from all grown voxels except the exempt
    corridor around the branch's joint; and stay at least
    ``min(sep, 0.55 * age)`` from its own older voxels, which permits any
    gentle curve but rejects hairpins before the tube can fold onto
    itself.
    """
    dims, margin, faz_keepout = grid
    if not _inside(v, dims, margin, faz_keepout):
        return False
    own = np.asarray(path[:-1], np.float64).reshape(-1, 3)
    if len(own):
        delta = np.abs(own - v)
        if (delta.max(1) <= 1).any():
            return False
        age = len(path) - np.arange(len(own))
        d2 = (delta ** 2).sum(1)
        required = np.minimum(sep, 0.55 * age)
        if (d2 < required * required).any():
            return False
    if len(occ.xyz):
        delta = np.abs(occ.xyz - v)
        if (delta.max(1) <= 1).any():
            return False
        d2 = (delta ** 2).sum(1)
        if (~exempt & (d2 < sep * sep)).any():
            return False
    return _clear_of(v, reserved)


def _walk(rng, occ, path, direction, target, sep, grid, exempt, reserved):
    """Extend ``path`` up to ``target`` voxels; returns (path, end_direction).

    Each step takes the valid 26-neighbor best aligned with the heading
    (at most 60 degrees off), while the heading itself drifts by a small
    clamped jitter.  On rejection the heading is re-jittered with growing
    strength plus a pull toward the volume center, so branches bend away
    from walls instead of dying there.
    """
    dims = grid[0]
    d = _unit(np.asarray(direction, np.float64))
    center = np.array([dims[0] / 2.0, dims[1] / 2.0, dims[2] / 2.0])

    while len(path) < target:
        placed = False
        for attempt in range(_REDIRECT_TRIES):
            jitter = rng.normal(0.0, _MAX_TURN * (1.0 + 0.4 * attempt), 3)
            jitter[0] *= _DEPTH_DAMP
            trial = d + jitter
            if attempt >= 4:
                pull = _unit(center - np.asarray(path[-1], np.float64))
                pull[0] *= _DEPTH_DAMP
                trial = trial + 0.25 * (attempt - 3) * pull
            d_try = _clamped_turn(d, trial)
            scores = _NEIGHBOR_UNITS @ d_try
            for oi in np.argsort(-scores):
                if scores[oi] < 0.5:
                    break
                v = (path[-1][0] + int(_NEIGHBOR_OFFSETS[oi][0]),
                     path[-1][1] + int(_NEIGHBOR_OFFSETS[oi][1]),
                     path[-1][2] + int(_NEIGHBOR_OFFSETS[oi][2]))
                if _step_valid(v, path, occ, sep, grid, exempt, reserved):
                    path.append(v)
                    d = d_try
                    placed = True
                    break
            if placed:
                break
        if not placed:
            break
    return path, d


def _split_placement(occ, path, d, sep, grid, exempt, reserved):
    """Voxels and axes for a clean Y-split at the end of ``path``.

    Both children step one voxel along the dominant end direction and
    diverge one voxel to either side, so each is adjacent to the joint
    only and the two are Chebyshev 2 apart.  Returns ``(va, vb, u, e)``
    or None when no orientation validates.
    """
    dims, margin, faz_keepout = grid
    joint = np.asarray(path[-1], np.float64)
    own = path[:-1]

    def valid(v):
        if not _inside(v, dims, margin, faz_keepout):
            return False
        if not _clear_of(v, own) or not _clear_of(v, reserved):
            return False
        if len(occ.xyz):
            delta = np.abs(occ.xyz - np.asarray(v, np.float64))
            adjacent = delta.max(1) <= 1
            is_joint = np.abs(occ.xyz - joint).max(1) == 0
            if (adjacent & ~is_joint).any():
                return False
            d2 = (delta ** 2).sum(1)
            if (~exempt & (d2 < sep * sep)).any():
                return False
        return True

    axes = sorted(range(3), key=lambda ax: -abs(d[ax]))
    for ax in axes:
        if abs(d[ax]) < 0.2:
            continue
        u = np.zeros(3)
        u[ax] = np.sign(d[ax])
        for e_ax in sorted(set(range(3)) - {ax}, key=lambda a: -abs(d[a])):
            e = np.zeros(3)
            e[e_ax] = 1.0
            va = tuple(int(c) for c in joint + u + e)
            vb = tuple(int(c) for c in joint + u - e)
            if valid(va) and valid(vb):
                return va, vb, u, e
    return None


def _grow_trees(cfg: PhantomConfig, rng) -> list:
    """Returns [(branches, radius, intensity), ...]; branches are voxel paths."""
    dims = cfg.dims
    r_hi = cfg.radius_range[1]
    sep = 2.0 * r_hi + 2.5
    margin = int(math.ceil(r_hi)) + 2
    grid = (dims, margin, cfg.faz_radius + r_hi + 1.0)
    lateral = min(dims[1], dims[2])
    occ = _Occupancy()
    trees = []

    for tree_id in range(cfg.n_trees):
        radius = float(rng.uniform(*cfg.radius_range))
        intensity = float(rng.uniform(*_INTENSITY_RANGE))
        branches = []
        reserved = []

        def grow(path_init, direction, target, depth):
            if len(branches) >= _MAX_BRANCHES_PER_TREE:
                return
            joint = path_init[0]
            exempt = occ.exempt_mask(joint, sep + 3.0, tree_id)
            path, d_end = _walk(rng, occ, list(path_init), direction,
                                target, sep, grid, exempt, reserved)
            if len(path) < _MIN_BRANCH_VOXELS:
                return
            occ.add(path if len(branches) == 0 else path[1:], tree_id)
            branches.append(path)
            if depth >= 2 or len(branches) + 2 > _MAX_BRANCHES_PER_TREE:
                return
            if rng.random() >= 0.85:
                return
            exempt = occ.exempt_mask(path[-1], sep + 3.0, tree_id)
            spots = _split_placement(occ, path, d_end, sep, grid,
                                     exempt, reserved)
            if spots is None:
                return
            va, vb, u, e = spots
            phi = rng.uniform(0.45, 0.85)
            da = _unit(np.cos(phi) * u + np.sin(phi) * e)
            db = _unit(np.cos(phi) * u - np.sin(phi) * e)
            child_target = max(_MIN_BRANCH_VOXELS + 2,
                               int(target * rng.uniform(0.55, 0.8)))
            reserved.append(vb)
            grow([path[-1], va], da, child_target, depth + 1)
            reserved.remove(vb)
            grow([path[-1], vb], db, child_target, depth + 1)

        for _ in range(4):                        # root attempts
            root = None
            for _ in range(_PLACEMENT_TRIES):
                cand = (int(rng.integers(margin, dims[0] - margin)),
                        int(rng.integers(margin, dims[1] - margin)),
                        int(rng.integers(margin, dims[2] - margin)))
                if not _inside(cand, dims, margin, grid[2]):
                    continue
                rows = occ.rows_near(cand, sep)
                if len(rows) == 0:
                    root = cand
                    break
            if root is None:
                continue
            theta = rng.uniform(0.0, 2.0 * np.pi)
            d0 = _unit(np.array([rng.uniform(-0.2, 0.2),
                                 np.sin(theta), np.cos(theta)]))
            target0 = int(rng.uniform(0.35, 0.6) * lateral)
            grow([root], d0, target0, 0)
            if branches:
                break
        if branches:
            trees.append((branches, radius, intensity))
    return trees


# ---------------------------------------------------------------------------
# materialization


def _tail_field(clean: np.ndarray, vessel: np.ndarray,
                cfg: PhantomConfig) -> np.ndarray:
    """Max-combined decaying projections below each vessel voxel, truncated
    where the amplitude drops under 1, and zero inside vessels."""
    field = np.zeros_like(clean, np.float32)
    if cfg.tail_gain <= 0.0 or not vessel.any():
        return field
    depth = clean.shape[0]
    for s in range(depth - 1):
        src = np.where(vessel[s], clean[s], 0.0) * cfg.tail_gain
        if not src.any():
            continue
        for k in range(depth - 1 - s):
            amp = src * np.exp(-cfg.tail_decay * k)
            if amp.max() < 1.0:
                break
            plane = np.where(amp >= 1.0, amp, 0.0)
            np.maximum(field[s + 1 + k], plane, out=field[s + 1 + k])
    field[vessel] = 0.0
    return field


def materialize_truth(cfg: PhantomConfig, trees,
                      volume_index: int = 0) -> PhantomTruth:
    """Build a :class:`PhantomTruth` from explicit centerline geometry.

    ``trees`` is a list of ``(branches, radius, intensity)`` where each
    branch is a sequence of voxel ``(z, y, x)`` tuples.  Ground-truth
    segment statistics are extracted from the voxelized centerline itself.
    """
    dims = cfg.dims
    centerline = np.zeros(dims, bool)
    clean = np.zeros(dims, np.float32)
    for branches, radius, intensity in trees:
        tree_cl = np.zeros(dims, bool)
        for path in branches:
            for v in path:
                tree_cl[v] = True
        dist = distance_transform_edt(~tree_cl)
        clean = np.maximum(clean, np.where(dist <= radius,
                                           np.float32(intensity), 0.0))
        centerline |= tree_cl

    vessel = clean > 0.0
    tails = _tail_field(clean, vessel, cfg)
    artifact = tails >= 1.0

    yy, xx = np.ogrid[:dims[1], :dims[2]]
    cy, cx = (dims[1] - 1) / 2.0, (dims[2] - 1) / 2.0
    disk = (yy - cy) ** 2 + (xx - cx) ** 2 <= cfg.faz_radius ** 2
    faz = np.broadcast_to(disk, dims).copy()

    clean_vol = Volume(clean, cfg.voxel_size_mm)
    labels = classify_skeleton_voxels(centerline)
    segments = extract_segments(centerline, labels, clean_vol)
    return PhantomTruth(
        clean_volume=clean_vol,
        centerline=centerline,
        vessel_mask=vessel,
        artifact_mask=artifact,
        faz_mask=faz,
        tail_field=tails,
        segments=segments,
        volume_index=int(volume_index),
    )


def generate_truth_volume(cfg: PhantomConfig,
                          volume_index: int = 0) -> PhantomTruth:
    """Grow the vessel trees for one volume and materialize its truth."""
    if volume_index < 0:
        raise ConfigError(f"volume_index must be non-negative, got {volume_index}")
    rng = np.random.default_rng([cfg.seed, volume_index, 0])
    trees = _grow_trees(cfg, rng)
    return materialize_truth(cfg, trees, volume_index)


# ---------------------------------------------------------------------------
# scans


def simulate_scan(truth: PhantomTruth, cfg: PhantomConfig,
                  repeat_index: int) -> Volume:
    """One speckled repeat: Bernoulli dropout on vessel voxels, tails added
    on the background, Gaussian noise everywhere, clipped to [0, 255]."""
    if not 0 <= repeat_index < cfg.n_repeats:
        raise ConfigError(f"repeat_index must be in [0, {cfg.n_repeats}), "
                          f"got {repeat_index}")
    dims = truth.clean_volume.dims
    rng = np.random.default_rng([cfg.seed, truth.volume_index, 1 + repeat_index])
    keep = rng.random(dims) >= cfg.decorrelation_dropout
    signal = np.where(truth.vessel_mask & keep, truth.clean_volume.data, 0.0)
    noisy = signal + truth.tail_field + rng.normal(0.0, cfg.noise_sigma, dims)
    data = np.clip(noisy, 0.0, 255.0).astype(np.float32)
    return Volume(data, cfg.voxel_size_mm)


def merge_repeats(scans) -> Volume:
    """Voxelwise mean of two or more registered repeats."""
    scans = list(scans)
    if len(scans) < 2:
        raise DomainError(f"merging needs at least 2 repeats, got {len(scans)}")
    dims = scans[0].dims
    voxel = scans[0].voxel_size_mm
    for s in scans[1:]:
        if s.dims != dims:
            raise ShapeError(f"repeat dims differ: {s.dims} vs {dims}")
        if s.voxel_size_mm != voxel:
            raise ShapeError(f"repeat voxel sizes differ: "
                             f"{s.voxel_size_mm} vs {voxel}")
    stack = np.stack([s.data for s in scans])
    return Volume(stack.mean(axis=0, dtype=np.float64).astype(np.float32), voxel)


# ---------------------------------------------------------------------------
# datasets


def _truth_summary(truth: PhantomTruth) -> dict:
    segs = truth.segments
    return {
        "segment_count": segs.count,
        "bifurcation_count": len(segs.bifurcation_points),
        "end_point_count": len(segs.end_points),
        "removed_count": len(segs.removed),
        "segment_lengths": sorted(s.length for s in segs.segments),
        "segment_flow_indices": sorted(round(s.flow_index, 6)
                                       for s in segs.segments),
    }


def build_dataset(cfg: PhantomConfig, n_volumes: int, out_dir) -> dict:
    """Generate volumes, write them under ``out_dir``, return the manifest.

    Layout: ``volNNN/single_RR.f32`` per repeat, plus ``merged.f32``,
    ``clean.f32``, ``vessel_mask.f32``, ``artifact_mask.f32`` (masks stored
    as 0/255) and ``truth.json``.  The manifest carries the config, the
    train/val split (the last ``ceil(n/10)`` volumes are validation when
    there are at least two), the training pairs (repeat 0 plane, merged
    plane) and a sha256 checksum of every file written.
    """
    if n_volumes < 1:
        raise ConfigError(f"n_volumes must be positive, got {n_volumes}")
    if cfg.n_repeats < 2:
        raise ConfigError("datasets need n_repeats >= 2 to build merged targets")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    val_count = math.ceil(n_volumes / 10) if n_volumes >= 2 else 0

    volumes_meta, pairs, checksums = [], [], {}

    def record(rel: str, write):
        write(out / rel)
        checksums[rel] = sha256_of(out / rel)
        sidecar = rel + ".json"
        if (out / sidecar).exists():
            checksums[sidecar] = sha256_of(out / sidecar)

    for v in range(n_volumes):
        truth = generate_truth_volume(cfg, volume_index=v)
        scans = [simulate_scan(truth, cfg, r) for r in range(cfg.n_repeats)]
        merged = merge_repeats(scans)
        name = f"vol{v:03d}"
        (out / name).mkdir(exist_ok=True)

        singles = []
        for r, scan in enumerate(scans):
            rel = f"{name}/single_{r:02d}.f32"
            record(rel, lambda p, s=scan: write_volume(p, s))
            singles.append(rel)
        named = {
            "merged": (f"{name}/merged.f32", merged),
            "clean": (f"{name}/clean.f32", truth.clean_volume),
            "vessel_mask": (f"{name}/vessel_mask.f32",
                            Volume(truth.vessel_mask * np.float32(255.0),
                                   cfg.voxel_size_mm)),
            "artifact_mask": (f"{name}/artifact_mask.f32",
                              Volume(truth.artifact_mask * np.float32(255.0),
                                     cfg.voxel_size_mm)),
        }
        for key, (rel, vol) in named.items():
            record(rel, lambda p, vv=vol: write_volume(p, vv))
        rel = f"{name}/truth.json"
        record(rel, lambda p: p.write_text(
            json.dumps(_truth_summary(truth), sort_keys=True, indent=2) + "\n"))

        split = "val" if v >= n_volumes - val_count else "train"
        volumes_meta.append({
            "name": name,
            "split": split,
            "files": {"singles": singles,
                      **{k: rel for k, (rel, _) in named.items()},
                      "truth": f"{name}/truth.json"},
        })
        for depth in range(cfg.dims[0]):
            pairs.append({"volume": v, "depth": depth,
                          "single": singles[0],
                          "merged": named["merged"][0]})

    manifest = {
        "config": cfg.as_dict(),
        "n_volumes": n_volumes,
        "volumes": volumes_meta,
        "pairs": pairs,
        "checksums": checksums,
    }
    (out / "manifest.json").write_text(
        json.dumps(manifest, sort_keys=True, indent=2) + "\n")
    return manifest


def _manifest_path(path) -> Path:
    path = Path(path)
    return path / "manifest.json" if path.is_dir() else path


def verify_manifest(path) -> dict:
    """Recompute every checksum in the manifest; raise on any mismatch."""
    mpath = _manifest_path(path)
    if not mpath.exists():
        raise VolumeIOError(f"no manifest at {mpath}")
    manifest = json.loads(mpath.read_text())
    root = mpath.parent
    for rel, digest in manifest["checksums"].items():
        f = root / rel
        if not f.exists():
            raise VolumeIOError(f"dataset file missing: {f}")
        actual = sha256_of(f)
        if actual != digest:
            raise VolumeIOError(f"checksum mismatch for {rel}: "
                                f"manifest {digest[:12]}…, file {actual[:12]}…")
    return manifest


def load_dataset(path, verify: bool = True) -> PairDataset:
    """Read a built dataset back as (single plane, merged plane) pairs,
    split according to the manifest."""
    mpath = _manifest_path(path)
    if verify:
        manifest = verify_manifest(mpath)
    else:
        if not mpath.exists():
            raise VolumeIOError(f"no manifest at {mpath}")
        manifest = json.loads(mpath.read_text())
    root = mpath.parent
    split_of = {i: vol["split"] for i, vol in enumerate(manifest["volumes"])}

    cache: dict = {}

    def planes(rel: str) -> np.ndarray:
        if rel not in cache:
            cache[rel] = read_volume(root / rel).data
        return cache[rel]

    train, val = [], []
    for pair in manifest["pairs"]:
        s = planes(pair["single"])[pair["depth"]]
        m = planes(pair["merged"])[pair["depth"]]
        bucket = train if split_of[pair["volume"]] == "train" else val
        bucket.append((s, m))
    return PairDataset(train=train, val=val)
