"""Command-line entry point: ``peergan <subcommand>``."""

from __future__ import annotations

import argparse
import logging
import os
import shutil
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .adversary import DirectionLossConfig
from .config import (
    SCHEMA,
    SCHEMA_BY_NAME,
    ConfigError,
    RunConfig,
    check_key,
    merge,
    normalize_key,
    parse_value,
    read_config_file,
)
from .dataset import DatasetError, image_grid, load_dataset, load_image_dir, save_png, write_image_dir
from .embedding import (
    EmbeddingCacheError,
    cache_embeddings,
    compute_class_embeddings,
    load_cached_embeddings,
    load_direction_encoders,
    load_encoder,
    stack_embeddings,
)
from .generator import KeyScheduleError
from .metrics import MetricReport, corpus_stats, frechet_distance, intra_lpips_details, load_perceptual_distance, lpips_emd
from .synthetic import make_synthetic_corpus
from .trainer import Trainer, append_loss_rows, load_checkpoint, read_loss_rows

log = logging.getLogger("peergan")

CONFIG_ERRORS = (ConfigError, DatasetError, KeyScheduleError, EmbeddingCacheError)

# schema entries each subcommand accepts as flags (train takes all of them)
DATA_FLAGS = ("data", "resolution", "peer_size", "encoder", "seed")


def runs_root() -> Path:
    return Path(os.environ.get("PIP_RUNS_DIR", "runs"))


def prepare_run_dir(path: Path, overwrite: bool) -> Path:
    """Run directories are append-only: refuse a non-empty one unless ``overwrite``."""
    if path.exists() and any(path.iterdir()):
        if not overwrite:
            raise ConfigError(f"run directory {path} is not empty; choose a new one or pass --overwrite")
        shutil.rmtree(path)
    path.mkdir(parents=True, exist_ok=True)
    return path


def add_schema_flags(parser: argparse.ArgumentParser, names=None) -> None:
    group = parser.add_argument_group("configuration (also settable as key = value in --config)")
    for entry in SCHEMA:
        if names is not None and entry.name not in names:
            continue
        default = "none" if entry.default is None else entry.default
        kwargs = {"nargs": "?", "const": "true"} if entry.type is bool else {"metavar": entry.name.upper()}
        group.add_argument(entry.flag, dest=entry.name, default=argparse.SUPPRESS,
                           help=f"{entry.help} (default: {default})", **kwargs)


def schema_values(args: argparse.Namespace) -> dict[str, object]:
    return {name: parse_value(SCHEMA_BY_NAME[name], str(value))
            for name, value in vars(args).items() if name in SCHEMA_BY_NAME}


def resolve_config(args: argparse.Namespace) -> RunConfig:
    file_values = read_config_file(args.config) if getattr(args, "config", None) else None
    return merge(file_values, schema_values(args))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="peergan", description=__doc__)
    parser.add_argument("--version", action="version", version=f"peergan {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a procedurally drawn peer/target corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--n-peer", type=int, default=500)
    p.add_argument("--n-target", type=int, default=10)
    p.add_argument("--resolution", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("embed", help="compute and cache per-class mean embeddings")
    add_schema_flags(p, DATA_FLAGS)
    p.add_argument("--out", required=True, help="cache file to write")
    p.add_argument("--overwrite", action="store_true")

    p = sub.add_parser("train", help="train the conditional generator")
    p.add_argument("--config", help="key = value configuration file")
    add_schema_flags(p)
    p.add_argument("--out", help="run directory (default: $PIP_RUNS_DIR/train-<seed>)")
    p.add_argument("--overwrite", action="store_true")
    p.add_argument("--embeddings", help="embedding cache from `embed`")
    p.add_argument("--resume", help="checkpoint to continue from")

    p = sub.add_parser("generate", help="sample images of one class from a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--class", dest="class_name", default="target")
    p.add_argument("--count", type=int, default=16)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--no-ema", action="store_true", help="use live instead of EMA weights")
    p.add_argument("--out", help="output directory (default: $PIP_RUNS_DIR/generate-<seed>)")
    p.add_argument("--overwrite", action="store_true")

    p = sub.add_parser("interpolate", help="render a path in class space or latent space")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--mode", choices=("class", "latent"), default="class")
    p.add_argument("--steps", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--class", dest="class_name", default="target", help="class held fixed in latent mode")
    p.add_argument("--out", help="output directory (default: $PIP_RUNS_DIR/interpolate-<seed>)")
    p.add_argument("--overwrite", action="store_true")

    p = sub.add_parser("eval", help="FID, intra-LPIPS or LPIPS-EMD")
    p.add_argument("metric", choices=("fid", "intra-lpips", "emd"))
    p.add_argument("--resolution", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--encoder", default="stub", help="FID feature encoder: stub | weights:<path>")
    p.add_argument("--lpips", default="stub", help="perceptual distance: stub | weights:<path>")
    p.add_argument("--checkpoint", help="generate images from this checkpoint")
    p.add_argument("--class", dest="class_name", default="target")
    p.add_argument("--count", type=int, default=1000, help="images to generate from --checkpoint")
    p.add_argument("--generated", help="directory of generated images")
    p.add_argument("--reference", help="[fid] directory of reference images")
    p.add_argument("--training", help="[intra-lpips] directory of the k training images")
    p.add_argument("--mode", choices=("pairwise", "to_training"), default="pairwise")
    p.add_argument("--source", help="[emd] source image directory")
    p.add_argument("--target", help="[emd] target image directory")
    p.add_argument("--directional", action="store_true", help="[emd] source-to-target term only")
    p.add_argument("--dump-matrix", help="write the distance matrix (.npy) and a heatmap next to it")
    p.add_argument("--out", help="directory whose metrics.csv gets one appended row")

    p = sub.add_parser("report", help="render figures for a training run directory")
    p.add_argument("--run", required=True)

    p = sub.add_parser("info", help="show defaults, or a checkpoint manifest")
    p.add_argument("--checkpoint")
    return parser


# ---------------------------------------------------------------------------
# Subcommands


def _load_data(cfg: RunConfig):
    if not cfg.run.data:
        raise ConfigError("missing required key 'data' (--data)")
    return load_dataset(cfg.run.data, cfg.train.resolution, cfg.train.peer_size, seed=cfg.train.seed)


def _embeddings(cfg: RunConfig, dataset, cache: str | None) -> torch.Tensor:
    if cache:
        return stack_embeddings(load_cached_embeddings(cache, dataset.fingerprint()))
    return stack_embeddings(compute_class_embeddings(load_encoder(cfg.run.encoder, resolution=cfg.train.resolution), dataset))


def cmd_synth(args) -> int:
    root = make_synthetic_corpus(args.out, args.n_peer, args.n_target, args.resolution, args.seed)
    print(f"wrote {args.n_peer} peer and {args.n_target} target images to {root}")
    return 0


def cmd_embed(args) -> int:
    cfg = merge(None, schema_values(args))
    dataset = _load_data(cfg)
    out = Path(args.out)
    if out.exists() and not args.overwrite:
        raise ConfigError(f"{out} exists; pass --overwrite to replace it")
    embeddings = compute_class_embeddings(load_encoder(cfg.run.encoder, resolution=cfg.train.resolution), dataset)
    cache_embeddings(out, embeddings, dataset.fingerprint())
    for e in embeddings:
        print(f"class {e.class_id}: {e.num_images_averaged} images, |c_m| = {e.vector.norm():.4f}")
    print(f"encoder {embeddings[0].source_encoder}; cache {out}")
    return 0


def cmd_train(args) -> int:
    ckpt = load_checkpoint(args.resume) if args.resume else None
    file_values = read_config_file(args.config) if args.config else {}
    if ckpt is not None and "data" not in vars(args) and "data" not in file_values and "data" in ckpt.metadata:
        args.data = ckpt.metadata["data"]
    cfg = resolve_config(args)
    if ckpt is not None:
        # the checkpoint's config governs a resumed run; only the step budget may change
        steps_given = "steps" in vars(args) or "steps" in file_values
        cfg = RunConfig(cfg.run, replace(ckpt.config, steps=cfg.train.steps if steps_given else ckpt.config.steps))
    dataset = _load_data(cfg)
    if ckpt is not None and ckpt.metadata.get("dataset_fingerprint") != dataset.fingerprint():
        raise ConfigError(f"dataset under 'data' ({cfg.run.data}) differs from the one {args.resume} was trained on")
    t_peer = cfg.run.t_peer or dataset.text_labels[0]
    t_target = cfg.run.t_target or dataset.text_labels[1]
    encoders = load_direction_encoders(cfg.run.direction_encoder, resolution=cfg.train.resolution)
    direction = DirectionLossConfig(encoders, t_peer, t_target)
    if ckpt is not None:
        trainer = Trainer(cfg.train, dataset, ckpt.embeddings, direction)
        ckpt.restore(trainer)
    else:
        trainer = Trainer(cfg.train, dataset, _embeddings(cfg, dataset, args.embeddings), direction)
    out = prepare_run_dir(Path(args.out) if args.out else runs_root() / f"train-{cfg.train.seed}", args.overwrite)
    (out / "config.echo").write_text(cfg.echo())
    for sub in ("snapshots", "checkpoints", "figures"):
        (out / sub).mkdir()
    tc = trainer.config
    ckpt_meta = {"data": str(Path(cfg.run.data).resolve())}
    snap_gen = torch.Generator().manual_seed(tc.seed)
    snap_z = torch.randn(8, tc.latent_dim, generator=snap_gen, dtype=trainer.dtype)
    pending: list[dict] = []

    def flush():
        append_loss_rows(out / "losses.csv", pending)
        pending.clear()

    def snapshot(step: int):
        g = trainer.state.generator_ema
        with torch.no_grad():
            rows = [g(snap_z, trainer.embeddings[c.class_id], noise_seed=tc.seed) for c in dataset.classes]
        save_png(image_grid(torch.cat(rows), ncols=len(snap_z)), out / "snapshots" / f"step_{step:06d}.png")

    while trainer.state.step < tc.steps:
        pending.append(trainer.train_step())
        done = trainer.state.step
        if done % tc.snapshot_interval == 0:
            flush()
            snapshot(done)
        if done % tc.checkpoint_interval == 0:
            flush()
            trainer.save_checkpoint(out / "checkpoints" / f"step_{done:06d}.ckpt", ckpt_meta)
    flush()
    final = out / "checkpoints" / f"step_{trainer.state.step:06d}.ckpt"
    if not final.exists():
        trainer.save_checkpoint(final, ckpt_meta)
    snapshot(trainer.state.step)
    if (out / "losses.csv").exists():
        from .plotting import plot_loss_curves

        plot_loss_curves(read_loss_rows(out / "losses.csv"), out / "figures" / "losses.png")
    warnings = dict(trainer.state.warnings)
    print(f"trained to step {trainer.state.step}; final checkpoint {final}"
          + (f"; warnings {warnings}" if warnings else ""))
    return 0


def _resolve_class(ckpt, name: str) -> int:
    names = ckpt.class_names
    if name in names:
        return names.index(name)
    if name.isdigit() and int(name) < len(names):
        return int(name)
    raise ConfigError(f"unknown class {name!r}; checkpoint has {names}")


def generate_from_checkpoint(path: str, class_name: str, count: int, seed: int, ema: bool = True) -> torch.Tensor:
    """Images the `generate` subcommand writes: z from ``seed``, noise seeded by ``seed``."""
    ckpt = load_checkpoint(path)
    g = ckpt.build_generator(ema)
    class_id = _resolve_class(ckpt, class_name)
    z = torch.randn(count, ckpt.config.latent_dim, generator=torch.Generator().manual_seed(seed),
                    dtype=ckpt.config.torch_dtype)
    with torch.no_grad():
        return g.generate(z, ckpt.embeddings[class_id].to(z.dtype), noise_seed=seed)


def cmd_generate(args) -> int:
    if args.count < 1:
        raise ConfigError("count must be >= 1")
    images = generate_from_checkpoint(args.checkpoint, args.class_name, args.count, args.seed, not args.no_ema)
    out = prepare_run_dir(Path(args.out) if args.out else runs_root() / f"generate-{args.seed}", args.overwrite)
    write_image_dir(images, out)
    print(f"wrote {len(images)} images to {out}")
    return 0


def cmd_interpolate(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    g = ckpt.build_generator()
    dtype = ckpt.config.torch_dtype
    gen = torch.Generator().manual_seed(args.seed)
    z1, z2 = torch.randn(2, ckpt.config.latent_dim, generator=gen, dtype=dtype)
    emb = ckpt.embeddings.to(dtype)
    if args.mode == "class":
        peer, target = 0, ckpt.target_class
        a, b = (z1, emb[peer]), (z1, emb[target])
        title = f"class path: {ckpt.class_names[peer]} -> {ckpt.class_names[target]}"
    else:
        c = _resolve_class(ckpt, args.class_name)
        a, b = (z1, emb[c]), (z2, emb[c])
        title = f"latent path within {ckpt.class_names[c]}"
    with torch.no_grad():
        frames = g.interpolate(a, b, args.steps, noise_seed=args.seed)
    out = prepare_run_dir(Path(args.out) if args.out else runs_root() / f"interpolate-{args.seed}", args.overwrite)
    write_image_dir(frames, out / "frames")
    from .plotting import plot_image_strip

    labels = [f"t={t:.2f}" for t in np.linspace(0, 1, args.steps)]
    plot_image_strip(frames, out / "interpolation.png", title=title, labels=labels)
    print(f"wrote {len(frames)} frames to {out}")
    return 0


def _images_for_eval(args) -> tuple[torch.Tensor, str]:
    if args.checkpoint:
        return generate_from_checkpoint(args.checkpoint, args.class_name, args.count, args.seed), args.checkpoint
    if args.generated:
        return load_image_dir(args.generated, args.resolution), args.generated
    raise ConfigError("give --generated DIR or --checkpoint CKPT")


def _dump(matrix: np.ndarray, path: str, title: str, xlabel: str, ylabel: str) -> None:
    from .plotting import plot_distance_matrix

    Path(path).parent.mkdir(parents=True, exist_ok=True)
    np.save(path, matrix)
    plot_distance_matrix(matrix, Path(path).with_suffix(".png"), title, xlabel, ylabel)


def cmd_eval(args) -> int:
    config = {"resolution": args.resolution}
    if args.metric == "fid":
        if not args.reference:
            raise ConfigError("fid needs --reference DIR")
        generated, source = _images_for_eval(args)
        reference = load_image_dir(args.reference, args.resolution)
        encoder = load_encoder(args.encoder, resolution=args.resolution)
        value = frechet_distance(corpus_stats(generated, encoder), corpus_stats(reference, encoder))
        config.update(generated=source, reference=args.reference)
        report = MetricReport("fid", value, len(generated), len(reference), encoder.name, args.seed, config)
    elif args.metric == "intra-lpips":
        if not args.training:
            raise ConfigError("intra-lpips needs --training DIR")
        generated, source = _images_for_eval(args)
        training = load_image_dir(args.training, args.resolution)
        dist = load_perceptual_distance(args.lpips)
        result = intra_lpips_details(generated, training, dist, args.mode)
        config.update(generated=source, training=args.training, mode=args.mode,
                      singleton_clusters=len(result.singleton_clusters))
        report = MetricReport("intra-lpips", result.value, len(generated), len(training), dist.name, args.seed, config)
    else:
        if not (args.source and args.target):
            raise ConfigError("emd needs --source DIR and --target DIR")
        source = load_image_dir(args.source, args.resolution)
        target = load_image_dir(args.target, args.resolution)
        dist = load_perceptual_distance(args.lpips)
        value, matrix = lpips_emd(source, target, dist, directional=args.directional, return_matrix=True)
        config.update(source=args.source, target=args.target, directional=args.directional)
        report = MetricReport("lpips-emd", value, len(source), len(target), dist.name, None, config)
        if args.dump_matrix:
            _dump(matrix, args.dump_matrix, "LPIPS cost matrix", "target image", "source image")
    print(report.text())
    print(report.to_csv(), end="")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        report.append_csv(out / "metrics.csv")
    return 0


def cmd_report(args) -> int:
    from .plotting import plot_loss_curves

    run = Path(args.run)
    if not (run / "losses.csv").is_file():
        raise ConfigError(f"no losses.csv in run directory {run}")
    figures = run / "figures"
    figures.mkdir(exist_ok=True)
    path = plot_loss_curves(read_loss_rows(run / "losses.csv"), figures / "losses.png")
    print(f"wrote {path}")
    return 0


def cmd_info(args) -> int:
    print(f"peergan {__version__}  torch {torch.__version__}")
    if args.checkpoint:
        ckpt = load_checkpoint(args.checkpoint)
        for key in ("version", "step", "p", "dataset_fingerprint", "class_names", "target_class", "text_labels"):
            print(f"{key}: {ckpt.metadata.get(key)}")
        cfg = ckpt.config
        print(f"key: {cfg.key_schedule}  resolution: {cfg.resolution}  embeddings: {tuple(ckpt.embeddings.shape)}")
        return 0
    print("configuration defaults:")
    print(RunConfig().echo(), end="")
    return 0


COMMANDS = {
    "synth": cmd_synth, "embed": cmd_embed, "train": cmd_train, "generate": cmd_generate,
    "interpolate": cmd_interpolate, "eval": cmd_eval, "report": cmd_report, "info": cmd_info,
}


def run_subcommand(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args, unknown = parser.parse_known_args(argv)
    try:
        # name removed options explicitly instead of argparse's generic complaint
        for token in unknown:
            if token.startswith("--"):
                check_key(normalize_key(token.split("=", 1)[0]))
    except ConfigError as exc:
        print(f"peergan: config error: {exc}", file=sys.stderr)
        return 2
    if unknown:
        parser.error(f"unrecognized arguments: {' '.join(unknown)}")
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except CONFIG_ERRORS as exc:
        print(f"peergan: config error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # runtime failure: report and exit 1
        log.debug("failure", exc_info=True)
        print(f"peergan: error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run_subcommand())
