"""3-D vascular quantification: threshold, thin, classify, measure.

The thinning pass deletes a border voxel only when the deletion provably
keeps local topology: the object voxels in its 26-neighborhood must form
exactly one 26-connected component, and the background voxels in its
18-neighborhood must form exactly one 6-connected component that touches
the center through a face.  Voxels with at most one neighbor are kept, so
curve endpoints survive.  Deletions are applied immediately (each check
sees the current volume) in a fixed directional sweep, which makes the
output deterministic and the component structure of the input provably
unchanged.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import convolve, label

from .exceptions import DomainError, ShapeError
from .volume import Volume

__all__ = [
    "END", "BODY", "BIFURCATION",
    "Segment", "SegmentSet", "QuantReport",
    "binarize", "skeletonize3d", "classify_skeleton_voxels",
    "extract_segments", "quantify_volume",
]

END, BODY, BIFURCATION = 1, 2, 3

_MAX_SHORT_SEGMENT = 6          # paths this long or shorter are noise

_STRUCT26 = np.ones((3, 3, 3), bool)
_STRUCT6 = np.zeros((3, 3, 3), bool)
_STRUCT6[1, 1, 1] = True
for _f in ((0, 1, 1), (2, 1, 1), (1, 0, 1), (1, 2, 1), (1, 1, 0), (1, 1, 2)):
    _STRUCT6[_f] = True

# 18-neighborhood: offsets with at most two non-zero coordinates
_N18 = np.zeros((3, 3, 3), bool)
for _z in range(3):
    for _y in range(3):
        for _x in range(3):
            if 0 < abs(_z - 1) + abs(_y - 1) + abs(_x - 1) <= 2:
                _N18[_z, _y, _x] = True

_FACES = ((0, 1, 1), (2, 1, 1), (1, 0, 1), (1, 2, 1), (1, 1, 0), (1, 1, 2))

_OFFSETS26 = [(dz, dy, dx)
              for dz in (-1, 0, 1) for dy in (-1, 0, 1) for dx in (-1, 0, 1)
              if (dz, dy, dx) != (0, 0, 0)]

_simple_cache: dict = {}


def binarize(vol, threshold: float = 50.0) -> np.ndarray:
    """Boolean mask of voxels with value >= threshold (inclusive)."""
    data = vol.data if isinstance(vol, Volume) else np.asarray(vol)
    if not 0.0 < threshold < 255.0:
        raise DomainError(f"threshold must lie in (0, 255), got {threshold}")
    return data >= threshold


def _is_simple(nb: np.ndarray) -> bool:
    """Whether deleting the center of this 3x3x3 occupancy patch keeps the
    (26-object, 6-background) topology."""
    key = nb.tobytes()
    cached = _simple_cache.get(key)
    if cached is not None:
        return cached
    obj = nb.copy()
    obj[1, 1, 1] = False
    _, n_obj = label(obj, structure=_STRUCT26)
    ok = n_obj == 1
    if ok:
        bg = ~nb & _N18
        lab, _ = label(bg, structure=_STRUCT6)
        touching = {lab[f] for f in _FACES if lab[f]}
        ok = len(touching) == 1
    _simple_cache[key] = ok
    return ok


def skeletonize3d(mask: np.ndarray) -> np.ndarray:
    """Thin a binary volume to a unit-wide skeleton.

    Output is a subset of the input with the same number of 26-connected
    components and no deletable (simple, non-endpoint) voxels left.
    """
    mask = np.asarray(mask)
    if mask.ndim != 3:
        raise ShapeError(f"mask must be 3-D, got shape {mask.shape}")
    mask = mask.astype(bool, copy=False)
    if not mask.any():
        return mask.copy()

    pad = np.pad(mask, 1, constant_values=False)
    dirs = ((-1, 0, 0), (1, 0, 0), (0, -1, 0), (0, 1, 0), (0, 0, -1), (0, 0, 1))
    changed = True
    while changed:
        changed = False
        for dz, dy, dx in dirs:
            core = pad[1:-1, 1:-1, 1:-1]
            s = pad.shape
            free = ~pad[1 + dz:s[0] - 1 + dz,
                        1 + dy:s[1] - 1 + dy,
                        1 + dx:s[2] - 1 + dx]
            for z, y, x in np.argwhere(core & free) + 1:
                if not pad[z, y, x]:
                    continue
                nb = pad[z - 1:z + 2, y - 1:y + 2, x - 1:x + 2]
                if nb.sum() - 1 <= 1:       # endpoint or isolated: preserve
                    continue
                if _is_simple(nb):
                    pad[z, y, x] = False
                    changed = True
    return pad[1:-1, 1:-1, 1:-1].copy()


def classify_skeleton_voxels(skel: np.ndarray) -> np.ndarray:
    """Label skeleton voxels by 26-neighbor count: 1 -> END, 2 -> BODY,
    >2 -> BIFURCATION.  Isolated voxels (0 neighbors) stay unlabeled."""
    skel = np.asarray(skel)
    if skel.ndim != 3:
        raise ShapeError(f"skeleton must be 3-D, got shape {skel.shape}")
    skel = skel.astype(bool, copy=False)
    kernel = np.ones((3, 3, 3), np.uint8)
    kernel[1, 1, 1] = 0
    counts = convolve(skel.astype(np.uint8), kernel, mode="constant")
    labels = np.zeros(skel.shape, np.uint8)
    labels[skel & (counts == 1)] = END
    labels[skel & (counts == 2)] = BODY
    labels[skel & (counts > 2)] = BIFURCATION
    return labels


@dataclass
class Segment:
    path: list                  # voxel (z, y, x) tuples, delimiters included
    flow_index: float
    cyclic: bool = False

    @property
    def length(self) -> int:
        return len(self.path)


@dataclass
class SegmentSet:
    segments: list              # kept: length > _MAX_SHORT_SEGMENT
    removed: list               # short fragments, kept for audits
    bifurcation_points: list
    end_points: list
    analyzed_volume_mm3: float = 0.0

    @property
    def count(self) -> int:
        return len(self.segments)


def extract_segments(skel: np.ndarray, labels: np.ndarray,
                     original: Volume) -> SegmentSet:
    """Split the skeleton into maximal paths between end/bifurcation voxels.

    Delimiting voxels belong to every path they border, so they are shared;
    length is the path's voxel count.  Paths of six voxels or fewer are
    moved to ``removed``.  Pure body cycles (closed loops that never meet a
    delimiter) come out as one cyclic segment each.
    """
    skel = np.asarray(skel).astype(bool, copy=False)
    data = np.asarray(original.data if isinstance(original, Volume) else original,
                      dtype=np.float64)
    if skel.shape != data.shape:
        raise ShapeError(f"skeleton shape {skel.shape} does not match "
                         f"volume shape {data.shape}")
    shape = skel.shape

    def neighbors(v):
        z, y, x = v
        for dz, dy, dx in _OFFSETS26:
            w = (z + dz, y + dy, x + dx)
            if (0 <= w[0] < shape[0] and 0 <= w[1] < shape[1]
                    and 0 <= w[2] < shape[2] and skel[w]):
                yield w

    delims = [tuple(v) for v in np.argwhere((labels == END) |
                                            (labels == BIFURCATION))]
    paths = []
    visited_body = set()
    seen_links = set()

    for d in delims:                       # argwhere order: lexicographic
        for nb in sorted(neighbors(d)):
            lab = labels[nb]
            if lab in (END, BIFURCATION):
                link = (min(d, nb), max(d, nb))
                if link not in seen_links:
                    seen_links.add(link)
                    paths.append([d, nb])
            elif lab == BODY and nb not in visited_body:
                path = [d, nb]
                visited_body.add(nb)
                prev, cur = d, nb
                while labels[cur] == BODY:
                    nxt = [w for w in neighbors(cur) if w != prev]
                    cur, prev = nxt[0], cur
                    path.append(cur)
                    if labels[cur] == BODY:
                        visited_body.add(cur)
                paths.append(path)

    # anything left with body labels is a closed loop of plain body voxels
    for c in map(tuple, np.argwhere(labels == BODY)):
        if c in visited_body:
            continue
        path = [c]
        visited_body.add(c)
        prev, cur = c, sorted(neighbors(c))[0]
        while cur != c:
            path.append(cur)
            visited_body.add(cur)
            nxt = [w for w in neighbors(cur) if w != prev]
            cur, prev = nxt[0], cur
        paths.append(path)

    kept, removed = [], []
    for path in paths:
        seg = Segment(path=path,
                      flow_index=float(np.mean([data[v] for v in path])),
                      cyclic=labels[path[0]] == BODY)
        (kept if len(path) > _MAX_SHORT_SEGMENT else removed).append(seg)

    if isinstance(original, Volume):
        analyzed = original.data.size * original.voxel_volume_mm3
    else:
        analyzed = 0.0
    return SegmentSet(
        segments=kept,
        removed=removed,
        bifurcation_points=[tuple(v) for v in np.argwhere(labels == BIFURCATION)],
        end_points=[tuple(v) for v in np.argwhere(labels == END)],
        analyzed_volume_mm3=float(analyzed),
    )


@dataclass
class QuantReport:
    segment_count: int
    segment_density_per_mm3: float
    length_histogram: list                  # [[length, count], ...] ascending
    mean_flow_index_skeleton: float
    mean_flow_index_mask: float
    segments: SegmentSet = field(repr=False, default=None)

    def as_dict(self) -> dict:
        return {
            "segment_count": self.segment_count,
            "segment_density_per_mm3": self.segment_density_per_mm3,
            "length_histogram": self.length_histogram,
            "mean_flow_index_skeleton": self.mean_flow_index_skeleton,
            "mean_flow_index_mask": self.mean_flow_index_mask,
        }


def quantify_volume(vol: Volume, threshold: float = 50.0,
                    region_mask: np.ndarray | None = None) -> QuantReport:
    """binarize -> thin -> classify -> extract, with density normalised by
    the analyzed extent (the full volume, or the optional region mask)."""
    binary = binarize(vol, threshold)
    if region_mask is not None:
        region_mask = np.asarray(region_mask).astype(bool, copy=False)
        if region_mask.shape != binary.shape:
            raise ShapeError(f"region mask shape {region_mask.shape} does not "
                             f"match volume shape {binary.shape}")
        binary = binary & region_mask
        analyzed_voxels = int(region_mask.sum())
    else:
        analyzed_voxels = vol.data.size

    skel = skeletonize3d(binary)
    labels = classify_skeleton_voxels(skel)
    segset = extract_segments(skel, labels, vol)
    segset.analyzed_volume_mm3 = analyzed_voxels * vol.voxel_volume_mm3

    n = segset.count
    density = n / segset.analyzed_volume_mm3 if analyzed_voxels else 0.0
    hist = sorted(Counter(seg.length for seg in segset.segments).items())
    flow_skel = (float(np.mean([s.flow_index for s in segset.segments]))
                 if segset.segments else 0.0)
    flow_mask = float(vol.data[binary].mean()) if binary.any() else 0.0
    return QuantReport(
        segment_count=n,
        segment_density_per_mm3=float(density),
        length_histogram=[[int(l), int(c)] for l, c in hist],
        mean_flow_index_skeleton=flow_skel,
        mean_flow_index_mask=flow_mask,
        segments=segset,
    )
