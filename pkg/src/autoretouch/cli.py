"""Command-line surface: dataset synthesis, training, evaluation, retouching.

All randomness flows from explicit --seed flags, so every command produces
byte-identical outputs when re-run with the same inputs and seed.
"""

from __future__ import annotations

import argparse
import dataclasses
import sys
import typing
from pathlib import Path

from . import adjuster, dataforge, pipeline, trainer, verifier
from .imaging import (
    composite,
    load_foreground,
    load_image,
    load_parsing,
    prepare_encoder_input,
    save_image,
)

__all__ = ["ConfigFileError", "main", "parse_config_file"]


class ConfigFileError(ValueError):
    """Malformed or unknown key in a flat key=value config document."""


def _coerce(raw: str, annot):
    origin = typing.get_origin(annot)
    if annot is bool:
        low = raw.lower()
        if low in ("true", "1", "yes", "on"):
            return True
        if low in ("false", "0", "no", "off"):
            return False
        raise ConfigFileError(f"expected a boolean, got {raw!r}")
    if annot is int:
        return int(raw)
    if annot is float:
        return float(raw)
    if annot is str:
        return raw
    if origin is tuple:
        inner = typing.get_args(annot)[0]
        return tuple(_coerce(part.strip(), inner) for part in raw.split(",") if part.strip())
    raise ConfigFileError(f"unsupported config field type {annot!r}")


def parse_config_file(path, cls):
    """Build a dataclass from ``key = value`` lines; unknown keys are errors."""
    fields = {f.name: f.type for f in dataclasses.fields(cls)}
    hints = typing.get_type_hints(cls)
    values = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigFileError(f"{path}:{lineno}: expected 'key = value', got {stripped!r}")
        key, _, raw = stripped.partition("=")
        key = key.strip()
        if key not in fields:
            raise ConfigFileError(f"{path}:{lineno}: unknown key {key!r}")
        values[key] = _coerce(raw.strip(), hints[key])
    return cls(**values)


def _cmd_dataset_synth(args) -> int:
    params = dataforge.SynthParams(canvas=args.canvas)
    triples = dataforge.synth_corpus(args.triples, params, seed=args.seed)
    out = Path(args.out)
    for t in triples:
        dataforge.save_triple(t, out)
    print(f"wrote {len(triples)} triples under {out}")
    return 0


def _cmd_dataset_build(args) -> int:
    triples = dataforge.load_triples(args.root)
    manifest = dataforge.build_dataset(
        list(triples.values()),
        test_fraction=args.test_frac,
        seed=args.seed,
        images_root=str(args.root),
    )
    manifest.write(args.out)
    counts = manifest.counts()
    print(
        f"wrote {args.out}: "
        + " / ".join(f"{counts[k]} {k}" for k in sorted(counts))
        + f", {len(manifest.split_samples('test'))} test samples"
    )
    return 0


def _cmd_train(args) -> int:
    cfg = (
        parse_config_file(args.config, trainer.TrainConfig)
        if args.config
        else trainer.TrainConfig()
    )
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    manifest = dataforge.Manifest.read(args.manifest)
    model, report = trainer.train(manifest, cfg)
    verifier.save_checkpoint(model, args.out, seed=cfg.seed)
    metrics_path = args.metrics or (str(args.out) + ".metrics.csv")
    report.to_csv(metrics_path)
    print(
        f"trained {len(report.rows)} epochs: accuracy {report.accuracy:.4f}, "
        f"rmse {report.rmse:.4f}; checkpoint -> {args.out}, metrics -> {metrics_path}"
    )
    return 0


def _cmd_eval(args) -> int:
    model, _ = verifier.load_checkpoint(args.ckpt)
    manifest = dataforge.Manifest.read(args.manifest)
    result = trainer.evaluate(model, manifest, split=args.split)
    with open(args.out, "w") as fh:
        fh.write("split,count,accuracy,rmse,loss\n")
        fh.write(
            f"{args.split},{result.count},{result.accuracy:.8f},"
            f"{result.rmse:.8f},{result.loss:.8f}\n"
        )
    print(
        f"{args.split}: {result.count} samples, accuracy {result.accuracy:.4f}, "
        f"rmse {result.rmse:.4f} -> {args.out}"
    )
    return 0


def _cmd_adjust(args) -> int:
    model, _ = verifier.load_checkpoint(args.ckpt)
    fg = load_foreground(args.fg)
    bg = load_image(args.bg)
    parsing = load_parsing(args.parsing)
    size = model.cfg.image_size
    cfg = dataclasses.replace(pipeline.MODEL_SURFACE_ASCENT, restarts=args.restarts)

    scorer = adjuster.make_model_scorer(model, fg, prepare_encoder_input(bg, size), parsing)
    p_enc, score, trajectories = adjuster.adjust_multistart(scorer, size, size, cfg, args.seed)
    p_nat = pipeline.placement_to_native(p_enc, size, bg.width, bg.height)
    save_image(composite(bg, fg, p_nat), args.out)
    if args.traj:
        adjuster.dump_trajectories(trajectories, args.traj)
    if args.frames:
        frames_dir = Path(args.frames)
        frames_dir.mkdir(parents=True, exist_ok=True)
        best = max(trajectories, key=lambda t: t.best_score)
        for i, (p, _) in enumerate(best.points):
            frame = composite(
                bg, fg, pipeline.placement_to_native(p, size, bg.width, bg.height)
            )
            save_image(frame, frames_dir / f"frame_{i:04d}.png")
    print(
        f"best pose cx={p_nat.cx:.1f} cy={p_nat.cy:.1f} scale={p_nat.scale:.3f} "
        f"(score {score:.4f}) -> {args.out}"
    )
    return 0


def _cmd_retouch(args) -> int:
    model, _ = verifier.load_checkpoint(args.ckpt)
    fg = load_foreground(args.fg)
    gallery = pipeline.load_gallery(args.gallery)
    cfg = pipeline.RetouchConfig(k=args.k, sample_n=args.sample_n, seed=args.seed)
    final, report = pipeline.retouch(fg, gallery, model, cfg)
    save_image(final, args.out)
    report.composite_path = str(args.out)
    if args.report:
        Path(args.report).write_text(report.to_json())
    print(
        f"chose background {report.chosen_id} "
        f"(spatial score {report.spatial_score:.4f}) -> {args.out}"
    )
    return 0


def _cmd_gallery_build(args) -> int:
    gallery, rejections = pipeline.gallery_build(args.root)
    pipeline.save_gallery_index(gallery, args.out)
    for message in rejections:
        print(f"rejected {message}", file=sys.stderr)
    print(f"indexed {len(gallery)} backgrounds -> {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="art", description="Background replacement and foreground placement."
    )
    sub = parser.add_subparsers(dest="command", required=True)

    dataset = sub.add_parser("dataset", help="corpus synthesis and manifest building")
    dsub = dataset.add_subparsers(dest="dataset_command", required=True)

    synth = dsub.add_parser("synth", help="generate a synthetic scene corpus")
    synth.add_argument("--out", required=True)
    synth.add_argument("--triples", type=int, required=True)
    synth.add_argument("--seed", type=int, required=True)
    synth.add_argument("--canvas", type=int, default=64)
    synth.set_defaults(func=_cmd_dataset_synth)

    build = dsub.add_parser("build", help="build a training manifest from a corpus")
    build.add_argument("--root", required=True)
    build.add_argument("--out", required=True)
    build.add_argument("--test-frac", type=float, default=0.2)
    build.add_argument("--seed", type=int, required=True)
    build.set_defaults(func=_cmd_dataset_build)

    tr = sub.add_parser("train", help="train the verifier on a manifest")
    tr.add_argument("--manifest", required=True)
    tr.add_argument("--config", default=None)
    tr.add_argument("--out", required=True)
    tr.add_argument("--seed", type=int, default=None)
    tr.add_argument("--metrics", default=None)
    tr.set_defaults(func=_cmd_train)

    ev = sub.add_parser("eval", help="evaluate a checkpoint on a manifest split")
    ev.add_argument("--ckpt", required=True)
    ev.add_argument("--manifest", required=True)
    ev.add_argument("--split", default="test", choices=("train", "test"))
    ev.add_argument("--out", required=True)
    ev.set_defaults(func=_cmd_eval)

    adj = sub.add_parser("adjust", help="place a foreground on one background")
    adj.add_argument("--ckpt", required=True)
    adj.add_argument("--fg", required=True)
    adj.add_argument("--bg", required=True)
    adj.add_argument("--parsing", required=True)
    adj.add_argument("--restarts", type=int, default=8)
    adj.add_argument("--seed", type=int, required=True)
    adj.add_argument("--traj", default=None)
    adj.add_argument("--frames", default=None)
    adj.add_argument("--out", required=True)
    adj.set_defaults(func=_cmd_adjust)

    rt = sub.add_parser("retouch", help="full pipeline against a gallery")
    rt.add_argument("--ckpt", required=True)
    rt.add_argument("--fg", required=True)
    rt.add_argument("--gallery", required=True)
    rt.add_argument("--k", type=int, default=3)
    rt.add_argument("--sample-n", type=int, default=None, dest="sample_n")
    rt.add_argument("--seed", type=int, required=True)
    rt.add_argument("--out", required=True)
    rt.add_argument("--report", default=None)
    rt.set_defaults(func=_cmd_retouch)

    gal = sub.add_parser("gallery", help="gallery index maintenance")
    gsub = gal.add_subparsers(dest="gallery_command", required=True)
    gbuild = gsub.add_parser("build", help="index bg/parsing pairs under a root")
    gbuild.add_argument("--root", required=True)
    gbuild.add_argument("--out", required=True)
    gbuild.set_defaults(func=_cmd_gallery_build)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    raise SystemExit(main())
