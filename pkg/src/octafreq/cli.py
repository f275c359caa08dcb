"""Command-line surface for the octafreq pipeline.

Eight subcommands cover the workflow end to end: ``phantom`` writes a
synthetic dataset, ``masf`` runs the depth-wise tail filter, ``train`` fits
the enhancement network, ``enhance`` applies a checkpoint to a volume,
``metrics`` and ``quantify`` emit JSON reports, and ``gradcheck``/
``spectrum`` are verification and inspection diagnostics.

Machine output (volumes, checkpoints, reports) goes only to the paths named
on the command line; human-readable progress goes to stderr.  Exit codes:
0 success, 1 validation or usage error, 2 I/O error.  Every command is
reproducible from its inputs, flags, and ``--seed``.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from . import tensor as T
from .blocks import BlockConfig, channel_attention, conv_ffn, make_block_params, spectral_filter
from .exceptions import ConfigError, ShapeError, ValidationError
from .gradcheck import grad_check_ladder
from .masf import MasfConfig, masf_volume
from .metrics import gmsd, psnr, ssim
from .model import (
    PRESETS,
    ModelConfig,
    build_model,
    capture_block_spectra,
    count_parameters,
    enhance_volume,
    forward,
    load_model,
    named_parameters,
    save_checkpoint,
)
from .phantom import PhantomConfig, build_dataset, load_dataset
from .spectral import ComplexTensor, complex_conv2d, crelu, irfft2, rfft2, spectrum_diff_map
from .tensor import Tensor, iter_named_parameters
from .training import TrainConfig, train, write_curve
from .vessels import quantify_volume
from .volume import Volume, read_volume, write_volume

__all__ = ["main", "build_parser", "gradcheck_suite"]


# ---------------------------------------------------------------------------
# shared plumbing
# ---------------------------------------------------------------------------

def _load_json(path) -> dict:
    with open(path, "r", encoding="utf-8") as fh:
        text = fh.read()
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not valid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: top level must be a JSON object")
    return doc


def _json_safe(value):
    """JSON reports stay strict JSON: non-finite floats become strings."""
    if isinstance(value, dict):
        return {k: _json_safe(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_json_safe(v) for v in value]
    if isinstance(value, float) and not np.isfinite(value):
        return str(value)
    return value


def _write_report(path, payload: dict) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(_json_safe(payload), sort_keys=True, indent=2) + "\n")


def _say(msg: str) -> None:
    print(msg, file=sys.stderr)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def _cmd_phantom(args) -> int:
    spec = _load_json(args.config)
    unknown = sorted(set(spec) - {"phantom", "n_volumes"})
    if unknown:
        raise ConfigError(f"{args.config}: unknown top-level keys {unknown} "
                          "(expected 'phantom' and 'n_volumes')")
    if "n_volumes" not in spec:
        raise ConfigError(f"{args.config}: missing 'n_volumes'")
    section = dict(spec.get("phantom", {}))
    section.setdefault("seed", args.seed)
    cfg = PhantomConfig.from_dict(section)
    manifest = build_dataset(cfg, spec["n_volumes"], args.out)
    n_val = sum(1 for v in manifest["volumes"] if v["split"] == "val")
    _say(f"phantom: wrote {manifest['n_volumes']} volumes "
         f"({len(manifest['pairs'])} plane pairs, {n_val} validation volumes) "
         f"to {args.out}")
    return 0


def _cmd_masf(args) -> int:
    cfg = MasfConfig(gamma=args.gamma, window=args.window,
                     flip_depth=args.flip_depth)
    _say(f"masf: gamma={cfg.gamma} window={cfg.window}"
         + (" flip-depth" if cfg.flip_depth else ""))
    vol = read_volume(args.infile)
    out = masf_volume(vol.data, cfg)
    write_volume(args.out, Volume(out, vol.voxel_size_mm))
    _say(f"masf: {args.infile} -> {args.out}")
    return 0


def _cmd_train(args) -> int:
    spec = _load_json(args.config)
    unknown = sorted(set(spec) - {"model", "train"})
    if unknown:
        raise ConfigError(f"{args.config}: unknown top-level keys {unknown} "
                          "(expected 'model' and 'train')")
    model_dict = {**PRESETS[args.preset], **spec.get("model", {})}
    model_cfg = ModelConfig.from_dict(model_dict)
    train_dict = dict(spec.get("train", {}))
    train_dict.setdefault("seed", args.seed)
    train_cfg = TrainConfig.from_dict(train_dict)

    dataset = load_dataset(args.data)
    model = build_model(model_cfg, seed=args.seed)
    _say(f"train: {args.preset} preset, {count_parameters(model):,} parameters, "
         f"{len(dataset.train)} train / {len(dataset.val)} val pairs, "
         f"{train_cfg.total_iters} iterations")
    result = train(model, dataset, train_cfg)
    save_checkpoint(args.out, result.model, result.optimizer.as_dict())
    curve_path = str(args.out) + ".curve.csv"
    write_curve(curve_path, result.curve)
    _say(f"train: checkpoint -> {args.out}, curve -> {curve_path}")
    return 0


def _cmd_enhance(args) -> int:
    model = load_model(args.ckpt)
    vol = read_volume(args.infile)
    out = enhance_volume(model, vol, workers=args.workers)
    write_volume(args.out, out)
    _say(f"enhance: {args.infile} -> {args.out} "
         f"({vol.dims[0]} planes, workers={args.workers})")
    return 0


def _cmd_metrics(args) -> int:
    a = read_volume(args.a)
    b = read_volume(args.b)
    if a.dims != b.dims:
        raise ShapeError(f"volume dims differ: {a.dims} vs {b.dims}")
    if args.d3:
        report = {"psnr": psnr(a.data, b.data),
                  "ssim3d": ssim(a.data, b.data),
                  "gmsd3d": gmsd(a.data, b.data)}
    else:
        depth = a.dims[0]
        report = {
            "psnr": float(np.mean([psnr(a.data[d], b.data[d]) for d in range(depth)])),
            "ssim": float(np.mean([ssim(a.data[d], b.data[d]) for d in range(depth)])),
            "gmsd": float(np.mean([gmsd(a.data[d], b.data[d]) for d in range(depth)])),
        }
    _write_report(args.report, report)
    _say("metrics: " + "  ".join(f"{k}={v:.4f}" if isinstance(v, float) else f"{k}={v}"
                                 for k, v in sorted(report.items())))
    return 0


def _cmd_quantify(args) -> int:
    vol = read_volume(args.infile)
    mask = None
    if args.mask is not None:
        mask_vol = read_volume(args.mask)
        # masks are stored 0/255 in the shared volume format
        mask = mask_vol.data >= 128.0
    report = quantify_volume(vol, threshold=args.threshold, region_mask=mask)
    _write_report(args.report, report.as_dict())
    _say(f"quantify: {report.segment_count} segments, "
         f"density {report.segment_density_per_mm3:.1f}/mm^3, "
         f"mean flow index {report.mean_flow_index_skeleton:.2f}")
    return 0


def _cmd_gradcheck(args) -> int:
    started = time.time()
    failures = 0
    for name, run in gradcheck_suite(tolerance=args.tolerance, seed=args.seed):
        rep = run()
        worst = max(rep.max_rel_err.values()) if rep.max_rel_err else 0.0
        _say(f"{'ok' if rep.ok else 'FAIL':4s} {name:42s} max rel err {worst:.2e}")
        if not rep.ok:
            failures += 1
            for line in rep.summary().splitlines():
                _say("     " + line)
    _say(f"gradcheck: {'all checks passed' if not failures else f'{failures} checks FAILED'} "
         f"in {time.time() - started:.1f}s (tolerance {args.tolerance:g})")
    return 0 if failures == 0 else 1


def _cmd_spectrum(args) -> int:
    model = load_model(args.ckpt)
    vol = read_volume(args.infile)
    plane = vol.data[vol.dims[0] // 2] / np.float32(255.0)
    before, after = capture_block_spectra(model, plane, args.block)
    if not 0 <= args.channel < before.shape[-1]:
        raise ConfigError(f"channel {args.channel} out of range "
                          f"(block {args.block} carries {before.shape[-1]} channels)")
    diff = spectrum_diff_map(before, after, args.channel)
    with open(args.out, "wb") as fh:
        np.save(fh, diff)
    _say(f"spectrum: block {args.block} channel {args.channel} of the middle "
         f"depth plane -> {args.out} (npy {diff.shape[0]}x{diff.shape[1]})")
    return 0


# ---------------------------------------------------------------------------
# gradient verification suite
# ---------------------------------------------------------------------------

def _f64(params):
    for _, p in iter_named_parameters(params):
        p.data = p.data.astype(np.float64)
    return params


def _away_from_kinks(x: np.ndarray, margin: float = 0.05) -> np.ndarray:
    return np.where(np.abs(x) < margin, margin * 2, x)


def gradcheck_suite(tolerance: float = 1e-4, seed: int = 42):
    """Named finite-difference checks over every differentiable operation,
    the block sub-paths, and the full tiny model.

    Returns ``(label, thunk)`` pairs; each thunk runs one check and returns
    its :class:`~octafreq.gradcheck.CheckReport`.  All math is float64; a
    zero-initialised model would stop gradients at the zero output head, so
    every model/block case redraws its parameters at a small magnitude first.
    """
    checks: list[tuple] = []
    rng = np.random.default_rng(seed)

    def case(label, build):
        # bind the case's own generator now so the list order, not the
        # execution order, determines each case's data
        r = np.random.default_rng(rng.integers(2 ** 62))
        checks.append((label, lambda: build(r)))

    def check(fn, wrt, **kw):
        kw.setdefault("tol", tolerance)
        return grad_check_ladder(fn, wrt, **kw)

    def leaf(r, *shape):
        t = Tensor(_away_from_kinks(r.standard_normal(shape)))
        t.requires_grad = True
        return t

    # --- elementwise and reductions ---------------------------------------
    for op in (T.relu, T.gelu, T.abs_, T.neg, T.reciprocal):
        for shape in ((7,), (3, 4), (2, 3, 5)):
            def build(r, op=op, shape=shape):
                x = leaf(r, *shape)
                return check(lambda: T.mean_(op(x)), [("x", x)])
            case(f"{op.__name__} {shape}", build)

    for shape in ((7,), (3, 4), (2, 3, 5)):
        def build(r, shape=shape):
            a, b = leaf(r, *shape), leaf(r, *shape)
            return check(lambda: T.l1_loss(a, b), [("a", a), ("b", b)])
        case(f"l1_loss {shape}", build)

        def build(r, shape=shape):
            a, b = leaf(r, *shape), leaf(r, 1, *shape[1:]) if len(shape) > 1 else leaf(r, 1)
            return check(lambda: T.mean_(T.mul(T.add(a, b), b)), [("a", a), ("b", b)])
        case(f"add/mul broadcast {shape}", build)

    # --- shape plumbing ----------------------------------------------------
    for shape in ((2, 3, 4), (4, 2, 3), (3, 4, 2)):
        def build(r, shape=shape):
            x = leaf(r, *shape)
            w = Tensor(r.standard_normal((shape[1], shape[2], shape[0])))

            def fn():
                y = T.transpose(x, (1, 2, 0))
                return T.mean_(T.mul(T.reshape(y, y.data.shape), w))
            return check(fn, [("x", x)])
        case(f"reshape/transpose {shape}", build)

    for (m, k, n) in ((2, 3, 4), (3, 5, 2), (4, 2, 3)):
        def build(r, m=m, k=k, n=n):
            a, b = leaf(r, m, k), leaf(r, k, n)
            return check(lambda: T.mean_(T.matmul(a, b)), [("a", a), ("b", b)])
        case(f"matmul ({m}x{k})@({k}x{n})", build)

    for shape in ((4, 4, 2), (6, 4, 3), (4, 6, 1)):
        def build(r, shape=shape):
            a, b = leaf(r, *shape), leaf(r, *shape)

            def fn():
                cat = T.concat([a, b], axis=-1)
                return T.mean_(T.slice_axis(cat, 1, shape[-1] + 1))
            return check(fn, [("a", a), ("b", b)])
        case(f"concat/slice {shape}", build)

    for shape in ((4, 4, 2), (6, 4, 1), (4, 6, 3)):
        def build(r, shape=shape):
            x = leaf(r, *shape)
            w = Tensor(r.standard_normal((shape[0] // 2, shape[1] // 2, 4 * shape[2])))
            return check(lambda: T.mean_(T.mul(T.pixel_unshuffle(x, 2), w)), [("x", x)])
        case(f"pixel_unshuffle {shape}", build)

        def build(r, shape=shape):
            x = leaf(r, shape[0], shape[1], 4 * shape[2])
            w = Tensor(r.standard_normal((2 * shape[0], 2 * shape[1], shape[2])))
            return check(lambda: T.mean_(T.mul(T.pixel_shuffle(x, 2), w)), [("x", x)])
        case(f"pixel_shuffle {shape}", build)

    # --- normalisation and attention weights ------------------------------
    for shape in ((4, 4, 3), (2, 5, 4), (6, 3, 2)):
        def build(r, shape=shape):
            x = leaf(r, *shape)
            g = Tensor(np.ascontiguousarray(1.0 + 0.1 * r.standard_normal(shape[-1])))
            s = Tensor(np.ascontiguousarray(0.1 * r.standard_normal(shape[-1])))
            g.requires_grad = s.requires_grad = True
            w = Tensor(r.standard_normal(shape))
            return check(lambda: T.mean_(T.mul(T.layer_norm(x, g, s), w)),
                         [("x", x), ("gain", g), ("shift", s)])
        case(f"layer_norm {shape}", build)

        def build(r, shape=shape):
            x = leaf(r, *shape)
            w = Tensor(r.standard_normal(shape))
            return check(lambda: T.mean_(T.mul(T.softmax_lastdim(x), w)), [("x", x)])
        case(f"softmax {shape}", build)

    # --- convolutions -------------------------------------------------------
    conv_cases = [("3x3 dense", (5, 6, 2), (3, 3, 2, 3), 1),
                  ("3x3 dense", (4, 4, 1), (3, 3, 1, 2), 1),
                  ("3x3 dense", (6, 5, 3), (3, 3, 3, 2), 1),
                  ("depthwise", (5, 5, 3), (3, 3, 1, 3), 3),
                  ("depthwise", (4, 6, 2), (3, 3, 1, 2), 2),
                  ("depthwise", (6, 4, 4), (3, 3, 1, 4), 4),
                  ("1x1", (5, 5, 2), (1, 1, 2, 4), 1),
                  ("1x1", (4, 4, 3), (1, 1, 3, 1), 1),
                  ("1x1", (3, 6, 4), (1, 1, 4, 2), 1)]
    for kind, xshape, kshape, groups in conv_cases:
        def build(r, xshape=xshape, kshape=kshape, groups=groups):
            x = leaf(r, *xshape)
            k = leaf(r, *kshape)
            bias = leaf(r, kshape[-1])
            return check(lambda: T.mean_(T.conv2d(x, k, bias, groups=groups)),
                         [("x", x), ("kernel", k), ("bias", bias)])
        case(f"conv2d {kind} {xshape}", build)

    # --- spectral ops --------------------------------------------------------
    for shape in ((4, 4, 2), (6, 4, 1), (4, 8, 3)):
        def build(r, shape=shape):
            x = leaf(r, *shape)
            wr = Tensor(r.standard_normal((shape[0], shape[1] // 2 + 1, shape[2])))
            wi = Tensor(r.standard_normal((shape[0], shape[1] // 2 + 1, shape[2])))

            def fn():
                F = rfft2(x)
                return T.add(T.mean_(T.mul(F.re, wr)), T.mean_(T.mul(F.im, wi)))
            return check(fn, [("x", x)])
        case(f"rfft2 {shape}", build)

        def build(r, shape=shape):
            re = leaf(r, shape[0], shape[1] // 2 + 1, shape[2])
            im = leaf(r, shape[0], shape[1] // 2 + 1, shape[2])
            w = Tensor(r.standard_normal(shape))

            def fn():
                return T.mean_(T.mul(irfft2(ComplexTensor(re, im), shape[1]), w))
            return check(fn, [("re", re), ("im", im)])
        case(f"irfft2 {shape}", build)

        def build(r, shape=shape):
            x = leaf(r, *shape)
            c = shape[2]
            ku, kv = leaf(r, 3, 3, c, c), leaf(r, 3, 3, c, c)
            w = Tensor(r.standard_normal(shape))

            def fn():
                Y = complex_conv2d(rfft2(x), ku, kv)
                return T.mean_(T.mul(irfft2(Y, shape[1]), w))
            return check(fn, [("x", x), ("ku", ku), ("kv", kv)])
        case(f"complex_conv2d {shape}", build)

        def build(r, shape=shape):
            x = leaf(r, *shape)
            w = Tensor(r.standard_normal(shape))

            def fn():
                Y = crelu(rfft2(x))
                return T.mean_(T.mul(irfft2(Y, shape[1]), w))
            return check(fn, [("x", x)])
        case(f"crelu {shape}", build)

    # --- block sub-paths and block composites --------------------------------
    def block_setup(r, channels, heads):
        cfg = BlockConfig(channels=channels, heads=heads)
        p = _f64(make_block_params(cfg, r))
        for name, prm in iter_named_parameters(p):
            if name.rsplit(".", 1)[-1] not in ("ln_gain", "ln_shift", "tau", "beta"):
                prm.data = r.standard_normal(prm.data.shape) * 0.4
        return cfg, p

    for channels, heads, hw in ((4, 1, 4), (8, 2, 4), (8, 4, 6)):
        def build(r, channels=channels, heads=heads, hw=hw):
            cfg, p = block_setup(r, channels, heads)
            x = leaf(r, hw, hw, cfg.attn_channels)
            w = Tensor(r.standard_normal(x.data.shape))
            return check(lambda: T.mean_(T.mul(channel_attention(x, p.attn, heads), w)),
                         [("x", x)] + list(iter_named_parameters(p.attn)))
        case(f"channel_attention c={channels} h={heads}", build)

        def build(r, channels=channels, heads=heads, hw=hw):
            cfg, p = block_setup(r, channels, heads)
            x = leaf(r, hw, hw, cfg.attn_channels)
            w = Tensor(r.standard_normal(x.data.shape))
            return check(lambda: T.mean_(T.mul(conv_ffn(x, p.ffn), w)),
                         [("x", x)] + list(iter_named_parameters(p.ffn)))
        case(f"conv_ffn c={channels} {hw}x{hw}", build)

        def build(r, channels=channels, heads=heads, hw=hw):
            cfg, p = block_setup(r, channels, heads)
            c_spec = channels - cfg.attn_channels
            x = leaf(r, hw, hw, c_spec)
            w = Tensor(r.standard_normal(x.data.shape))
            return check(lambda: T.mean_(T.mul(spectral_filter(x, p.spec), w)),
                         [("x", x)] + list(iter_named_parameters(p.spec)))
        case(f"spectral_filter c={channels} {hw}x{hw}", build)

    # --- full model -----------------------------------------------------------
    for hw in ((16, 16), (32, 16), (16, 32)):
        def build(r, hw=hw):
            model = build_model(ModelConfig.preset("tiny"))
            for _, p in named_parameters(model):
                p.data = np.asarray(r.standard_normal(p.data.shape) * 0.05,
                                    np.float64)
            x = Tensor(r.random(hw + (1,)))
            x.requires_grad = True
            w = Tensor(r.standard_normal(hw + (1,)))
            return check(lambda: T.mean_(T.mul(forward(model, x), w)),
                         list(named_parameters(model)) + [("x", x)],
                         max_coords=2)
        case(f"tiny model {hw[0]}x{hw[1]}", build)

    return checks


# ---------------------------------------------------------------------------
# parser and entry point
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=42,
                        help="seed for every random draw (default 42)")

    parser = argparse.ArgumentParser(
        prog="octafreq",
        description="Enhance, filter, simulate, and quantify OCTA volumes.")
    parser.add_argument("--version", action="version",
                        version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")

    p = sub.add_parser("phantom", parents=[common],
                       help="generate a synthetic vascular dataset")
    p.add_argument("--config", required=True,
                   help='JSON file {"phantom": {...}, "n_volumes": N}')
    p.add_argument("--out", required=True, help="output dataset directory")
    p.set_defaults(func=_cmd_phantom)

    p = sub.add_parser("masf", parents=[common],
                       help="suppress axial tail artifacts")
    p.add_argument("--in", dest="infile", required=True, help="input volume")
    p.add_argument("--out", required=True, help="output volume")
    p.add_argument("--gamma", type=float, default=0.8,
                   help="subtraction strength in (0, 1] (default 0.8)")
    p.add_argument("--window", type=int, default=11,
                   help="moving-average window in samples (default 11)")
    p.add_argument("--flip-depth", action="store_true",
                   help="process deepest-first for inverted axial storage")
    p.set_defaults(func=_cmd_masf)

    p = sub.add_parser("train", parents=[common],
                       help="train the enhancement network")
    p.add_argument("--config", required=True,
                   help='JSON file {"model": {...}, "train": {...}}')
    p.add_argument("--data", required=True, help="dataset directory (manifest.json)")
    p.add_argument("--out", required=True, help="output checkpoint path")
    p.add_argument("--preset", choices=sorted(PRESETS), default="paper",
                   help="architecture preset the model section overrides")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("enhance", parents=[common],
                       help="apply a trained checkpoint to a volume")
    p.add_argument("--ckpt", required=True, help="checkpoint file")
    p.add_argument("--in", dest="infile", required=True, help="input volume")
    p.add_argument("--out", required=True, help="output volume")
    p.add_argument("--workers", type=int, default=1,
                   help="plane-parallel worker threads (output is identical "
                        "for any count)")
    p.set_defaults(func=_cmd_enhance)

    p = sub.add_parser("metrics", parents=[common],
                       help="image-quality report between two volumes")
    p.add_argument("--a", required=True, help="volume under evaluation")
    p.add_argument("--b", required=True, help="reference volume")
    p.add_argument("--d3", action="store_true",
                   help="volume-level 3-D metrics instead of per-plane means")
    p.add_argument("--report", required=True, help="output JSON report")
    p.set_defaults(func=_cmd_metrics)

    p = sub.add_parser("quantify", parents=[common],
                       help="vessel segmentation / skeleton quantification report")
    p.add_argument("--in", dest="infile", required=True, help="input volume")
    p.add_argument("--threshold", type=float, default=50.0,
                   help="binarisation threshold on (0, 255) (default 50)")
    p.add_argument("--mask", help="optional region mask volume (0/255)")
    p.add_argument("--report", required=True, help="output JSON report")
    p.set_defaults(func=_cmd_quantify)

    p = sub.add_parser("gradcheck", parents=[common],
                       help="finite-difference verification of every gradient")
    p.add_argument("--tolerance", type=float, default=1e-4,
                   help="maximum relative error per coordinate (default 1e-4)")
    p.set_defaults(func=_cmd_gradcheck)

    p = sub.add_parser("spectrum", parents=[common],
                       help="frequency-response map of one block (middle plane)")
    p.add_argument("--ckpt", required=True, help="checkpoint file")
    p.add_argument("--in", dest="infile", required=True, help="input volume")
    p.add_argument("--block", type=int, required=True, help="global block index")
    p.add_argument("--channel", type=int, required=True, help="feature channel")
    p.add_argument("--out", required=True, help="output .npy difference map")
    p.set_defaults(func=_cmd_spectrum)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits 0 for --help/--version and 2 for usage errors;
        # exit code 2 is reserved for I/O failures here
        return 0 if not exc.code else 1
    try:
        return args.func(args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:  # includes VolumeIOError
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
