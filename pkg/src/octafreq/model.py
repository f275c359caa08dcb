"""Four-level encoder-decoder assembly and slice-wise volume enhancement.

The network is a residual enhancer on single depth planes: a 3x3 stem lifts
the plane to ``base_channels`` features, three encoder levels halve the
resolution while doubling channels (1x1 conv to C/2, then pixel-unshuffle),
a bottleneck stage sits at 1/8 resolution, three decoder levels mirror the
encoders with pixel-shuffle upsampling and skip concatenation, a refinement
stage runs at full resolution, and a zero-initialised 3x3 head produces a
residual that is added back onto the input.  Because the head starts at
zero, a freshly built model is the identity map.
"""

from __future__ import annotations

import json
import math
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, fields as dataclass_fields
from pathlib import Path

import numpy as np

from . import tensor as T
from .blocks import BlockConfig, BlockParams, apply_block, make_block_params, trunc_normal
from .exceptions import ConfigError, ShapeError, VolumeIOError
from .tensor import Parameter, Tensor, iter_named_parameters, no_grad
from .volume import Volume

__all__ = [
    "ModelConfig",
    "Model",
    "Checkpoint",
    "PRESETS",
    "build_model",
    "total_blocks",
    "forward",
    "enhance_plane",
    "enhance_volume",
    "capture_block_spectra",
    "named_parameters",
    "count_parameters",
    "save_checkpoint",
    "load_checkpoint",
    "build_from_checkpoint",
    "load_model",
]


@dataclass
class ModelConfig:
    """Architecture hyperparameters.

    ``stage_blocks``/``stage_heads`` list the seven stages in forward order:
    three encoder levels, the bottleneck, then three decoder levels.  Stage
    widths are ``base_channels * 2**level``.
    """

    base_channels: int = 48
    stage_blocks: tuple[int, ...] = (2, 4, 4, 6, 4, 4, 2)
    stage_heads: tuple[int, ...] = (1, 2, 4, 8, 4, 2, 1)
    refinement_blocks: int = 4
    refinement_heads: int = 1
    alpha: float = 0.5
    expansion: float = 2.66
    drop_path: float = 0.1
    variant: str = "dual_branch_a"

    def __post_init__(self):
        self.stage_blocks = tuple(int(n) for n in self.stage_blocks)
        self.stage_heads = tuple(int(n) for n in self.stage_heads)
        if self.base_channels < 1:
            raise ConfigError(f"base_channels must be >= 1, got {self.base_channels}")
        if len(self.stage_blocks) != 7:
            raise ConfigError(f"stage_blocks needs 7 entries, got {len(self.stage_blocks)}")
        if len(self.stage_heads) != 7:
            raise ConfigError(f"stage_heads needs 7 entries, got {len(self.stage_heads)}")
        if any(n < 1 for n in self.stage_blocks):
            raise ConfigError(f"every stage needs >= 1 block, got {self.stage_blocks}")
        if self.refinement_blocks < 0:
            raise ConfigError("refinement_blocks must be >= 0, "
                              f"got {self.refinement_blocks}")
        # width/head compatibility per stage is BlockConfig's contract
        for c, h in zip(self.stage_channels(), self.stage_heads):
            self.block_config(c, h)
        if self.refinement_blocks:
            self.block_config(self.base_channels, self.refinement_heads)

    def stage_channels(self) -> tuple[int, ...]:
        c0 = self.base_channels
        return (c0, 2 * c0, 4 * c0, 8 * c0, 4 * c0, 2 * c0, c0)

    def block_config(self, channels: int, heads: int) -> BlockConfig:
        return BlockConfig(channels=channels, heads=heads, variant=self.variant,
                           split=self.alpha, expansion=self.expansion,
                           drop_path=self.drop_path)

    def to_dict(self) -> dict:
        return {
            "base_channels": self.base_channels,
            "stage_blocks": list(self.stage_blocks),
            "stage_heads": list(self.stage_heads),
            "refinement_blocks": self.refinement_blocks,
            "refinement_heads": self.refinement_heads,
            "alpha": self.alpha,
            "expansion": self.expansion,
            "drop_path": self.drop_path,
            "variant": self.variant,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in dataclass_fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {unknown}")
        return cls(**d)

    @classmethod
    def preset(cls, name: str, **overrides) -> "ModelConfig":
        if name not in PRESETS:
            raise ConfigError(f"unknown preset {name!r}; one of {sorted(PRESETS)}")
        base = dict(PRESETS[name])
        base.update(overrides)
        return cls(**base)


PRESETS = {
    "paper": {},
    "tiny": {
        "base_channels": 8,
        "stage_blocks": (1, 1, 1, 2, 1, 1, 1),
        "stage_heads": (1, 1, 2, 2, 2, 1, 1),
        "refinement_blocks": 1,
        "refinement_heads": 1,
    },
}


@dataclass
class Stage:
    config: BlockConfig
    blocks: list


@dataclass
class Model:
    config: ModelConfig
    seed: int
    conv_in: Parameter
    bias_in: Parameter
    stages: list          # [enc0, enc1, enc2, bottleneck, dec2, dec1, dec0]
    downs: list           # encoder-level 1x1 convs, shallow to deep
    ups: list             # decoder-level 1x1 convs, deep to shallow
    skip_fuse: list       # post-concat 1x1 convs, deep to shallow
    refine: Stage | None
    conv_out: Parameter
    bias_out: Parameter


def total_blocks(cfg: ModelConfig) -> int:
    return sum(cfg.stage_blocks) + cfg.refinement_blocks


def build_model(cfg: ModelConfig, seed: int = 0) -> Model:
    """Instantiate every parameter.

    All weights come from one generator seeded with ``seed`` in fixed
    construction order, so equal (config, seed) pairs build bit-identical
    models.  The output head starts at zero, making the fresh model an
    identity map.
    """
    rng = np.random.default_rng(seed)
    c0 = cfg.base_channels
    widths = cfg.stage_channels()

    def make_stage(channels: int, heads: int, count: int) -> Stage:
        bc = cfg.block_config(channels, heads)
        return Stage(bc, [make_block_params(bc, rng) for _ in range(count)])

    conv_in = Parameter(trunc_normal(rng, (3, 3, 1, c0)))
    bias_in = Parameter(np.zeros(c0, np.float32))

    stages, downs, ups, skip_fuse = [], [], [], []
    for lvl in range(3):
        stages.append(make_stage(widths[lvl], cfg.stage_heads[lvl],
                                 cfg.stage_blocks[lvl]))
        c = widths[lvl]
        downs.append(Parameter(trunc_normal(rng, (1, 1, c, c // 2))))
    stages.append(make_stage(widths[3], cfg.stage_heads[3], cfg.stage_blocks[3]))
    for j, lvl in enumerate((2, 1, 0)):
        c_deep = widths[3] // (2 ** j)
        ups.append(Parameter(trunc_normal(rng, (1, 1, c_deep, 2 * c_deep))))
        c = widths[4 + j]
        skip_fuse.append(Parameter(trunc_normal(rng, (1, 1, 2 * c, c))))
        stages.append(make_stage(c, cfg.stage_heads[4 + j], cfg.stage_blocks[4 + j]))

    refine = (make_stage(c0, cfg.refinement_heads, cfg.refinement_blocks)
              if cfg.refinement_blocks else None)
    conv_out = Parameter(np.zeros((3, 3, c0, 1), np.float32))
    bias_out = Parameter(np.zeros(1, np.float32))
    return Model(cfg, seed, conv_in, bias_in, stages, downs, ups, skip_fuse,
                 refine, conv_out, bias_out)


def forward(model: Model, x: Tensor, *, training: bool = False,
            rng: np.random.Generator | None = None,
            capture_block: int | None = None,
            capture: dict | None = None) -> Tensor:
    """Run one (H, W, 1) plane with values scaled to [0, 1].

    ``capture_block``/``capture``: store the frequency path's input and
    output feature maps of the block with that global index (stages in
    forward order, then refinement) under keys "before"/"after".
    """
    if len(x.shape) != 3 or x.shape[-1] != 1:
        raise ShapeError(f"expected an (H, W, 1) plane, got {x.shape}")
    H, W, _ = x.shape
    if H % 8 or W % 8:
        raise ShapeError(f"plane {H}x{W} not divisible by 8 "
                         "(three 2x downsamples)")
    if model.config.variant != "resblock" and (W // 8) % 2:
        raise ShapeError(
            f"width {W} leaves an odd {W // 8}-wide bottleneck; frequency "
            "filtering needs even widths at every level (use a multiple of 16)")
    if capture_block is not None:
        if model.config.variant == "resblock":
            raise ConfigError("the resblock variant has no frequency path to capture")
        n = total_blocks(model.config)
        if not 0 <= capture_block < n:
            raise ConfigError(f"block index {capture_block} out of range "
                              f"[0, {n})")
        if capture is None:
            raise ConfigError("capture_block requires a capture dict")

    counter = 0

    def run(t: Tensor, stage: Stage) -> Tensor:
        nonlocal counter
        for bp in stage.blocks:
            cap = capture if counter == capture_block else None
            t = apply_block(t, stage.config, bp, training=training, rng=rng,
                            capture=cap)
            counter += 1
        return t

    t = T.conv2d(x, model.conv_in, model.bias_in)
    skips = []
    for lvl in range(3):
        t = run(t, model.stages[lvl])
        skips.append(t)
        t = T.pixel_unshuffle(T.conv2d(t, model.downs[lvl]), 2)
    t = run(t, model.stages[3])
    for j, lvl in enumerate((2, 1, 0)):
        t = T.pixel_shuffle(T.conv2d(t, model.ups[j]), 2)
        t = T.conv2d(T.concat([t, skips[lvl]], axis=-1), model.skip_fuse[j])
        t = run(t, model.stages[4 + j])
    if model.refine is not None:
        t = run(t, model.refine)
    residual = T.conv2d(t, model.conv_out, model.bias_out)
    return T.add(x, residual)


def enhance_plane(model: Model, plane: np.ndarray) -> np.ndarray:
    """Enhance one plane with values in [0, 1]; output clamped to [0, 1].

    Accepts (H, W) or (H, W, 1) and returns the same shape in float32.
    Inference mode: no graph, no drop path.
    """
    arr = np.asarray(plane, dtype=np.float32)
    squeeze = arr.ndim == 2
    if squeeze:
        arr = arr[..., None]
    with no_grad():
        out = forward(model, Tensor(arr))
    res = np.clip(out.data, 0.0, 1.0).astype(np.float32)
    return res[..., 0] if squeeze else res


def enhance_volume(model: Model, vol: Volume, workers: int = 1) -> Volume:
    """Enhance a [0, 255] volume plane by plane along the depth axis.

    Planes are independent, so the result is bitwise identical for any
    worker count.
    """
    if workers < 1:
        raise ConfigError(f"workers must be >= 1, got {workers}")
    planes = vol.data

    def one(d: int) -> np.ndarray:
        return enhance_plane(model, planes[d] / np.float32(255.0)) * np.float32(255.0)

    if workers == 1:
        out = [one(d) for d in range(planes.shape[0])]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            out = list(pool.map(one, range(planes.shape[0])))
    return Volume(np.stack(out).astype(np.float32), vol.voxel_size_mm)


def capture_block_spectra(model: Model, plane: np.ndarray,
                          block_index: int) -> tuple[np.ndarray, np.ndarray]:
    """Return the feature maps entering and leaving the frequency path of
    the block with the given global index, for a [0, 1] input plane."""
    arr = np.asarray(plane, dtype=np.float32)
    if arr.ndim == 2:
        arr = arr[..., None]
    cap: dict = {}
    with no_grad():
        forward(model, Tensor(arr), capture_block=block_index, capture=cap)
    return cap["before"], cap["after"]


def named_parameters(model: Model) -> list[tuple[str, Parameter]]:
    return list(iter_named_parameters(model))


def count_parameters(model: Model) -> int:
    return sum(p.data.size for _, p in named_parameters(model))


# ---------------------------------------------------------------------------
# checkpoint file format
#
# magic "FQVW" | version u32 | header-length u32 | canonical-JSON header
# | param count u32 | entries.  Each entry: name-length u32, UTF-8 name,
# ndims u32, dims u32..., raw little-endian float32 payload.  If the header
# says the optimizer state is present: step u64, entry count u32, then the
# first/second-moment buffers in the same entry format under "<name>.m" /
# "<name>.v".
# ---------------------------------------------------------------------------

_MAGIC = b"FQVW"
_VERSION = 1


@dataclass
class Checkpoint:
    version: int
    config: ModelConfig
    seed: int
    params: dict
    optimizer: dict | None = None


def _pack_entry(buf: bytearray, name: str, arr: np.ndarray) -> None:
    raw = name.encode("utf-8")
    buf += struct.pack("<I", len(raw))
    buf += raw
    buf += struct.pack("<I", arr.ndim)
    for d in arr.shape:
        buf += struct.pack("<I", d)
    buf += np.ascontiguousarray(arr, dtype="<f4").tobytes()


class _Reader:
    def __init__(self, data: bytes, path):
        self.data = data
        self.off = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.off + n > len(self.data):
            raise VolumeIOError(f"{self.path}: truncated checkpoint")
        chunk = self.data[self.off:self.off + n]
        self.off += n
        return chunk

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def u64(self) -> int:
        return struct.unpack("<Q", self.take(8))[0]

    def entry(self) -> tuple[str, np.ndarray]:
        name = self.take(self.u32()).decode("utf-8")
        dims = tuple(self.u32() for _ in range(self.u32()))
        payload = self.take(4 * math.prod(dims))
        return name, np.frombuffer(payload, dtype="<f4").reshape(dims).copy()


def save_checkpoint(path, model: Model, optimizer: dict | None = None) -> None:
    """Write the model (and optionally AdamW moment buffers) to ``path``."""
    header = json.dumps(
        {"config": model.config.to_dict(), "seed": model.seed,
         "optimizer": optimizer is not None},
        sort_keys=True, separators=(",", ":")).encode("utf-8")
    pairs = named_parameters(model)
    buf = bytearray()
    buf += _MAGIC
    buf += struct.pack("<I", _VERSION)
    buf += struct.pack("<I", len(header))
    buf += header
    buf += struct.pack("<I", len(pairs))
    for name, p in pairs:
        _pack_entry(buf, name, p.data)
    if optimizer is not None:
        buf += struct.pack("<Q", int(optimizer["step"]))
        buf += struct.pack("<I", 2 * len(pairs))
        for name, _ in pairs:
            _pack_entry(buf, name + ".m", optimizer["m"][name])
            _pack_entry(buf, name + ".v", optimizer["v"][name])
    Path(path).write_bytes(bytes(buf))


def load_checkpoint(path) -> Checkpoint:
    r = _Reader(Path(path).read_bytes(), path)
    if r.take(4) != _MAGIC:
        raise VolumeIOError(f"{path}: not a checkpoint file (bad magic)")
    version = r.u32()
    if version != _VERSION:
        raise VolumeIOError(f"{path}: unsupported checkpoint version {version}")
    try:
        header = json.loads(r.take(r.u32()).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise VolumeIOError(f"{path}: malformed checkpoint header: {exc}") from exc
    config = ModelConfig.from_dict(header["config"])
    params = dict(r.entry() for _ in range(r.u32()))
    optimizer = None
    if header.get("optimizer"):
        step = r.u64()
        moments = dict(r.entry() for _ in range(r.u32()))
        optimizer = {
            "step": step,
            "m": {k[:-2]: a for k, a in moments.items() if k.endswith(".m")},
            "v": {k[:-2]: a for k, a in moments.items() if k.endswith(".v")},
        }
    if r.off != len(r.data):
        raise VolumeIOError(f"{path}: {len(r.data) - r.off} trailing bytes")
    return Checkpoint(version, config, header["seed"], params, optimizer)


def build_from_checkpoint(ck: Checkpoint) -> Model:
    """Rebuild the model and overwrite every parameter with the stored
    bytes (bit-exact)."""
    model = build_model(ck.config, ck.seed)
    expected = dict(named_parameters(model))
    if set(expected) != set(ck.params):
        missing = sorted(set(expected) - set(ck.params))[:3]
        extra = sorted(set(ck.params) - set(expected))[:3]
        raise VolumeIOError(f"checkpoint/config parameter mismatch "
                            f"(missing {missing}, unexpected {extra})")
    for name, arr in ck.params.items():
        p = expected[name]
        if p.data.shape != arr.shape:
            raise VolumeIOError(f"checkpoint entry {name}: shape {arr.shape} "
                                f"does not match model shape {p.data.shape}")
        p.data = arr
    return model


def load_model(path) -> Model:
    return build_from_checkpoint(load_checkpoint(path))
