"""Command-line driver.

Every training-side command works in a run directory with a fixed layout::

    run/manifest.txt   run/config.txt   run/models/   run/shards/
    run/predictions/   run/metrics/

Exit codes: 0 success, 1 validation error, 2 I/O error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

from .config import ConfigError, RunConfig, load_config
from .features import learn_extractor, load_dictionary, save_dictionary
from .features.dictionary import DictionaryFormatError
from .features.extractor import FeatureExtractor
from .features.normalizer import NormalizerFormatError
from .mlp import ModelFormatError
from .pipeline import (BundleFormatError, ShardFormatError, field_of_view, infer_model,
                       load_model, precompute_features, region_for, save_model, stage_seed,
                       strict_field_of_view, train_recursive)
from .pipeline.iteration import DICTIONARY, SUBSAMPLE
from .segmentation import evaluate
from .volume import (CatalogEntry, SegmentationVolume, Volume, VolumeFormatError,
                     augment_eightfold, generate_synthetic, read_volume, subsample_locations,
                     write_volume)

log = logging.getLogger("dawmr")

IO_ERRORS = (OSError, VolumeFormatError, DictionaryFormatError, BundleFormatError,
             ShardFormatError, ModelFormatError, NormalizerFormatError)
RUN_DIRS = ("models", "shards", "predictions", "metrics")


class UsageError(ValueError):
    pass


# ---------------------------------------------------------------------------
# helpers


def _read(path, kind):
    vol = read_volume(path)
    if not isinstance(vol, kind):
        raise UsageError(f"{path}: expected a {'segmentation' if kind is SegmentationVolume else 'float'} volume")
    return vol


def _config(args) -> RunConfig:
    return load_config(args.config) if args.config else RunConfig().validate()


def _catalog(images, segs, augment: bool) -> list[CatalogEntry]:
    if len(images) != len(segs):
        raise UsageError(f"{len(images)} images but {len(segs)} segmentations")
    out = []
    for ip, sp in zip(images, segs):
        img = _read(ip, Volume)
        seg = _read(sp, SegmentationVolume)
        if img.channels != 1:
            raise UsageError(f"{ip}: image must have one channel")
        if img.dims != seg.dims:
            raise UsageError(f"{ip} dims {img.dims} != {sp} dims {seg.dims}")
        pairs = augment_eightfold(seg, img) if augment else [(img.data[..., 0], seg.ids)]
        for j, (image, ids) in enumerate(pairs):
            out.append(CatalogEntry.from_segmentation(image, ids, name=f"{Path(ip).stem}#{j}"))
    return out


def _run_dir(path, cfg: RunConfig, command: str) -> Path:
    run = Path(path)
    for d in RUN_DIRS:
        (run / d).mkdir(parents=True, exist_ok=True)
    (run / "config.txt").write_text(cfg.to_text())
    manifest = run / "manifest.txt"
    lines = manifest.read_text().splitlines() if manifest.exists() else ["run = dawmr"]
    lines.append(f"command = {command}")
    manifest.write_text("\n".join(lines) + "\n")
    return run


def _dict_name(s, g) -> str:
    return f"dict_s{s}_{g}.dwdc"


# ---------------------------------------------------------------------------
# commands


def cmd_gen(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    dims = [int(v) for v in args.dims.split(",")]
    dims = dims * 3 if len(dims) == 1 else dims
    if len(dims) != 3:
        raise UsageError("--dims takes one or three integers")
    syn = generate_synthetic(tuple(dims), args.seeds, args.boundary_width, args.noise, args.blur,
                             args.seed)
    write_volume(Volume(syn.image), out / "image.dwmr")
    write_volume(SegmentationVolume(syn.seg), out / "seg.dwmr")
    print(f"wrote {out / 'image.dwmr'} and {out / 'seg.dwmr'}")
    return 0


def cmd_learn_dict(args) -> int:
    cfg = _config(args)
    pipe = cfg.pipeline()
    run = _run_dir(args.run, cfg, "learn-dict")
    catalog = _catalog(args.image, args.seg, cfg.augment)
    spec = replace(pipe.spec, groups=("image",))
    ext = learn_extractor(spec, [{"image": e.image} for e in catalog], pipe.learning,
                          seed=stage_seed(pipe.seed, 1, DICTIONARY))
    target = run / "models" / "dictionaries"
    target.mkdir(exist_ok=True)
    for (s, g), d in sorted(ext.dictionaries.items()):
        save_dictionary(d, target / _dict_name(s, g))
    print(f"wrote {len(ext.dictionaries)} dictionaries to {target}")
    return 0


def cmd_extract(args) -> int:
    cfg = _config(args)
    pipe = cfg.pipeline()
    run = _run_dir(args.run, cfg, "extract")
    spec = replace(pipe.spec, groups=("image",))
    src = run / "models" / "dictionaries"
    dicts = {(s, "image"): load_dictionary(src / _dict_name(s, "image")) for s in spec.scales}
    ext = FeatureExtractor(spec, dicts)
    catalog = _catalog(args.image, args.seg, cfg.augment)
    restricted = [e.restrict(region_for(spec, tuple((0, n) for n in e.image.shape)))
                  for e in catalog]
    locs = subsample_locations(restricted, pipe.subsample_fraction,
                               stage_seed(pipe.seed, 1, SUBSAMPLE))
    locs = [(i, xyz) for i, xyz in locs if len(xyz)]
    if not locs:
        raise UsageError("no labelled voxel has full image support")
    store = precompute_features(ext, restricted, locs, pipe.shard_count, pipe.workers,
                                run / "shards" / "iter1", pipe.tile)
    print(f"wrote {len(store)} records (d={store.d}) in {pipe.shard_count} shards")
    return 0


def _train(args, cfg: RunConfig, command: str) -> int:
    run = _run_dir(args.run, cfg, command)
    catalog = _catalog(args.image, args.seg, cfg.augment)
    model = train_recursive(catalog, cfg.pipeline(), cfg.iterations, cfg.led, run / "shards")
    save_model(model, run / "models")
    fov = field_of_view(model)
    print(f"trained {model.k} iteration(s); fov {fov} (strict {strict_field_of_view(model)})")
    return 0


def cmd_train(args) -> int:
    cfg = replace(_config(args), iterations=1).validate()
    return _train(args, cfg, "train")


def cmd_recurse(args) -> int:
    cfg = _config(args)
    if args.iterations is not None:
        cfg = replace(cfg, iterations=args.iterations)
    if args.led is not None:
        cfg = replace(cfg, led=args.led == "on")
    return _train(args, cfg.validate(), "recurse")


def cmd_predict(args) -> int:
    model_dir = Path(args.model) if args.model else Path(args.run) / "models"
    model = load_model(model_dir)
    cfg = _config(args)
    img = _read(args.image, Volume)
    if img.channels != 1:
        raise UsageError(f"{args.image}: image must have one channel")
    outs = infer_model(model, img.data[..., 0], cfg.tile, cfg.workers)
    out = Path(args.out) if args.out else Path(args.run) / "predictions" / "affinity.dwmr"
    out.parent.mkdir(parents=True, exist_ok=True)
    write_volume(Volume(outs[-1][0]), out)
    if args.all_iterations:
        for i, (aff, _) in enumerate(outs, 1):
            write_volume(Volume(aff), out.with_name(f"{out.stem}_iter{i}{out.suffix}"))
    (z0, z1), (y0, y1), (x0, x1) = outs[-1][1]
    print(f"wrote {out}; valid x[{x0},{x1}) y[{y0},{y1}) z[{z0},{z1})")
    return 0


def cmd_evaluate(args) -> int:
    pred = _read(args.pred, Volume)
    truth = _read(args.seg, SegmentationVolume)
    if pred.channels != 3:
        raise UsageError(f"{args.pred}: expected a 3-channel affinity graph")
    if pred.dims != truth.dims:
        raise UsageError(f"{args.pred} dims {pred.dims} != {args.seg} dims {truth.dims}")
    report = evaluate(pred.data, truth.ids, sweep_size=args.sweep, mode=args.mode,
                      workers=args.workers, with_rand=not args.no_rand)
    if args.out:
        out = Path(args.out)
    elif args.run:
        out = Path(args.run) / "metrics" / "metrics.txt"
    else:
        out = None
    if out is not None:
        out.parent.mkdir(parents=True, exist_ok=True)
        report.write(out, out.with_name(out.stem + "_curve.tsv"))
    sys.stdout.write(report.to_text())
    return 0


# ---------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dawmr", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a synthetic image/segmentation pair")
    g.add_argument("--dims", default="32", help="N or X,Y,Z")
    g.add_argument("--seeds", type=int, default=6, help="number of objects")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--noise", type=float, default=20.0)
    g.add_argument("--blur", type=float, default=1.0)
    g.add_argument("--boundary-width", type=float, default=2.0)
    g.add_argument("--out", default=".")
    g.set_defaults(func=cmd_gen)

    def data_args(sp, labels=True):
        sp.add_argument("--config")
        sp.add_argument("--run", required=True, help="run directory")
        sp.add_argument("--image", action="append", required=True)
        sp.add_argument("--seg", action="append", required=labels, default=[])

    sp = sub.add_parser("learn-dict", help="learn first-iteration dictionaries")
    data_args(sp)
    sp.set_defaults(func=cmd_learn_dict)
    sp = sub.add_parser("extract", help="precompute feature shards with learned dictionaries")
    data_args(sp)
    sp.set_defaults(func=cmd_extract)
    sp = sub.add_parser("train", help="train a single-iteration network")
    data_args(sp)
    sp.set_defaults(func=cmd_train)
    sp = sub.add_parser("recurse", help="train stacked iterations")
    data_args(sp)
    sp.add_argument("--iterations", type=int)
    sp.add_argument("--led", choices=("on", "off"))
    sp.set_defaults(func=cmd_recurse)

    sp = sub.add_parser("predict", help="predict an affinity graph")
    sp.add_argument("--config")
    sp.add_argument("--run")
    sp.add_argument("--model", help="model bundle directory (default RUN/models)")
    sp.add_argument("--image", required=True)
    sp.add_argument("--out")
    sp.add_argument("--all-iterations", action="store_true")
    sp.set_defaults(func=cmd_predict)

    sp = sub.add_parser("evaluate", help="score an affinity graph against ground truth")
    sp.add_argument("--pred", required=True)
    sp.add_argument("--seg", required=True)
    sp.add_argument("--run")
    sp.add_argument("--out")
    sp.add_argument("--sweep", type=int, default=1000)
    sp.add_argument("--mode", choices=("foreground_restricted", "all_pairs"),
                    default="foreground_restricted")
    sp.add_argument("--workers", type=int, default=1)
    sp.add_argument("--no-rand", action="store_true")
    sp.set_defaults(func=cmd_evaluate)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "predict" and not (args.run or args.model):
        print("error: predict needs --run or --model", file=sys.stderr)
        return 1
    try:
        return args.func(args)
    except IO_ERRORS as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (ConfigError, UsageError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
