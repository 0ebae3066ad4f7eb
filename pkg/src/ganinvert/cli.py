"""Command-line entry point: ``ganinvert <command> [--config PATH] [--out DIR] [--seed N]``.

Commands read and write artifacts under ``--out`` using fixed file names, so
a pipeline is ``train-gan`` -> ``build-dataset`` -> ``train-encoder`` ->
``invert`` / ``evaluate`` / ``compare``. Checkpoint paths set in the config
take precedence over the files in ``--out``.

Exit status: 0 on success, 2 on configuration errors, 1 on other failures.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
import time
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np
import torch

from . import benchmark as bench
from .config import RunConfig, load_config
from .encoder import (Encoder, PairedDataset, build_generated_dataset, encode, load_encoder, reconstruct,
                      save_encoder, train_alternating, train_on_generated)
from .errors import ConfigurationError, GanInvertError
from .generator import generate, load_weights, save_weights, train_desk_gan
from .imageio import emit_image_grid, ingest_image_dir
from .inversion import InversionResult, invert_batch, write_results
from .latent import load_latents, sample_prior, save_latents
from .losses import ConvFeatureExtractor, LossWeights, load_extractor, save_extractor, z_loss
from .metrics import embedding_distance, psnr
from .toy import blob_faces

logger = logging.getLogger("ganinvert")

GENERATOR_FILE = "generator.gckpt"
DISCRIMINATOR_FILE = "discriminator.gckpt"
EXTRACTOR_FILE = "extractor.fckpt"
LATENTS_FILE = "dataset_latents.zvec"
IMAGES_FILE = "dataset_images.npy"
ENCODER_FILES = {"encoder": "encoder.eckpt", "encoder-pixel": "encoder-pixel.eckpt",
                 "encoder-perceptual": "encoder-perceptual.eckpt"}

# seed offsets keep the generated training set, benchmark targets and held-out data disjoint
TARGET_SEED_OFFSET = 1
HOLDOUT_SEED_OFFSET = 2
REAL_SEED_OFFSET = 3


def _atomic_write_text(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)
    os.replace(tmp, path)


def _atomic_save_npy(path: Path, arr: np.ndarray) -> None:
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        np.save(fh, arr)
    os.replace(tmp, path)


class Workspace:
    """Resolves and caches the artifacts a command needs."""

    def __init__(self, cfg: RunConfig):
        self.cfg = cfg
        self.out = Path(cfg.out)
        self.out.mkdir(parents=True, exist_ok=True)

    def path(self, name: str) -> Path:
        return self.out / name

    def _existing(self, configured: Optional[str], default: str) -> Optional[Path]:
        if configured:
            return Path(configured)
        p = self.path(default)
        return p if p.exists() else None

    def generator(self):
        p = self._existing(self.cfg.checkpoints.generator, GENERATOR_FILE)
        if p is None:
            raise ConfigurationError(f"no generator checkpoint: set checkpoints.generator or run train-gan with --out {self.out}")
        return load_weights(p, latent_dim=self.cfg.prior.dim, image_shape=self.cfg.image_shape)

    def extractor(self) -> ConvFeatureExtractor:
        p = self._existing(self.cfg.checkpoints.extractor, EXTRACTOR_FILE)
        if p is not None:
            return load_extractor(p)
        e = self.cfg.extractor
        extractor = ConvFeatureExtractor(self.cfg.image_shape, e.widths, e.embedding_dim, seed=e.seed)
        save_extractor(extractor, self.path(EXTRACTOR_FILE))
        return extractor

    def toy_images(self) -> torch.Tensor:
        d = self.cfg.data
        return blob_faces(d.toy_count, d.image_size, d.channels, seed=self.cfg.seed)

    def real_images(self) -> torch.Tensor:
        d = self.cfg.data
        if d.real_dir:
            return ingest_image_dir(d.real_dir, self.cfg.image_shape).images
        return blob_faces(d.real_count, d.image_size, d.channels, seed=self.cfg.seed + REAL_SEED_OFFSET)

    def dataset(self, gen) -> PairedDataset:
        lat, img = self.path(LATENTS_FILE), self.path(IMAGES_FILE)
        if lat.exists() and img.exists():
            return PairedDataset(torch.from_numpy(np.load(img)), load_latents(lat))
        return build_generated_dataset(gen, self.cfg.latent_prior(), self.cfg.dataset.n, seed=self.cfg.seed)

    def encoder(self, name: str, gen=None, extractor=None, train_missing: bool = False) -> Encoder:
        configured = {"encoder": self.cfg.checkpoints.encoder, "encoder-pixel": self.cfg.checkpoints.encoder_pixel,
                      "encoder-perceptual": self.cfg.checkpoints.encoder_perceptual}[name]
        p = self._existing(configured, ENCODER_FILES[name])
        if p is not None:
            return load_encoder(p, latent_dim=self.cfg.prior.dim)
        if not train_missing:
            raise ConfigurationError(f"no {name} checkpoint: set checkpoints or run train-encoder with --out {self.out}")
        logger.info("no %s checkpoint found; training one", name)
        weights = self.cfg.loss_weights()
        if name == "encoder-pixel":
            weights = dataclasses.replace(weights, perceptual=0.0)
        return self.train_encoder(name, gen, extractor, weights, regime="generated_only")

    def new_encoder(self) -> Encoder:
        e = self.cfg.encoder
        return Encoder(self.cfg.prior.dim, self.cfg.image_shape, e.widths, e.blocks, e.head_widths,
                       e.output_activation, seed=self.cfg.seed)

    def train_encoder(self, name, gen, extractor, weights: LossWeights, regime: str) -> Encoder:
        config = self.cfg.encoder_config(loss_weights=weights, regime=regime)
        data = self.dataset(gen)
        enc = self.new_encoder()
        log_path = self.path(f"{name}_log.jsonl")
        if regime == "alternating":
            train_alternating(enc, gen, extractor, data, PairedDataset(self.real_images()), config, log_path)
        else:
            train_on_generated(enc, gen, extractor, data, config, log_path)
        save_encoder(enc, self.path(ENCODER_FILES[name]))
        return enc

    def targets(self, gen, n: int):
        z = sample_prior(self.cfg.latent_prior(), n, seed=self.cfg.seed + TARGET_SEED_OFFSET)
        return generate(gen, z), z


def cmd_train_gan(ws: Workspace, args) -> None:
    cfg = ws.cfg
    images = ingest_image_dir(cfg.data.real_dir, cfg.image_shape).images if cfg.data.real_dir else ws.toy_images()
    gen, disc, log = train_desk_gan(images, cfg.gan_config(), seed=cfg.seed)
    save_weights(gen, ws.path(GENERATOR_FILE))
    save_weights(disc, ws.path(DISCRIMINATOR_FILE))
    _atomic_write_text(ws.path("gan_log.jsonl"), "".join(json.dumps(e) + "\n" for e in log))
    ws.extractor()
    samples = generate(gen, sample_prior(cfg.latent_prior(), 8, seed=cfg.seed + TARGET_SEED_OFFSET))
    emit_image_grid({"samples": list(samples)}, ws.path("gan_samples.png"))
    print(f"generator written to {ws.path(GENERATOR_FILE)}")


def cmd_build_dataset(ws: Workspace, args) -> None:
    gen = ws.generator()
    data = build_generated_dataset(gen, ws.cfg.latent_prior(), ws.cfg.dataset.n, seed=ws.cfg.seed)
    _atomic_save_npy(ws.path(IMAGES_FILE), data.images.numpy())
    save_latents(ws.path(LATENTS_FILE), data.latents)
    print(f"{len(data)} pairs written to {ws.out}")


def cmd_train_encoder(ws: Workspace, args) -> None:
    gen = ws.generator()
    extractor = ws.extractor()
    weights = ws.cfg.loss_weights()
    if args.variant == "encoder-pixel":
        weights = dataclasses.replace(weights, perceptual=0.0)
    regime = args.regime or ws.cfg.encoder.regime
    ws.train_encoder(args.variant, gen, extractor, weights, regime)
    print(f"encoder written to {ws.path(ENCODER_FILES[args.variant])}")


def _load_targets(ws: Workspace, gen, args):
    if args.targets:
        ingested = ingest_image_dir(args.targets, ws.cfg.image_shape)
        return ingested.images, ingested.filenames
    n = args.n_targets or ws.cfg.benchmark.n_targets
    images, _ = ws.targets(gen, n)
    return images, [str(i) for i in range(n)]


def cmd_invert(ws: Workspace, args) -> None:
    cfg = ws.cfg
    gen = ws.generator()
    prior = cfg.latent_prior()
    images, ids = _load_targets(ws, gen, args)
    if args.method == "encoder":
        enc = ws.encoder("encoder")
        results = []
        for image, tid in zip(images, ids):
            start = time.perf_counter()
            z = encode(enc, image)
            results.append(InversionResult(z, [], time.perf_counter() - start, 0, "max_iters", target_id=tid))
    else:
        clip = args.clip or ("stochastic" if args.method == "descent-clip" else cfg.inversion.clip_mode)
        overrides = {"clip_mode": clip}
        if args.iterations is not None:
            overrides["iterations"] = args.iterations
        if args.lr is not None:
            overrides["learning_rate"] = args.lr
        config = cfg.inversion_config(**overrides)
        results = invert_batch(gen, list(images), prior, config, target_ids=ids)
    write_results(ws.path("inversions.jsonl"), results)
    ok = [i for i, r in enumerate(results) if r.z_final is not None]
    if ok:
        recon = generate(gen, torch.stack([results[i].z_final for i in ok]))
        rows = ok[: cfg.benchmark.grid_rows]
        emit_image_grid({"target": [images[i] for i in rows], args.method: list(recon[: len(rows)])},
                        ws.path("invert_grid.png"))
    print(f"{len(ok)}/{len(results)} targets inverted; records in {ws.path('inversions.jsonl')}")


def cmd_evaluate(ws: Workspace, args) -> None:
    """Held-out z-loss / PSNR / embedding distance of an encoder against an untrained baseline."""
    cfg = ws.cfg
    gen = ws.generator()
    extractor = ws.extractor()
    enc = ws.encoder(args.variant)
    n = args.n_targets or cfg.benchmark.n_targets
    z_true = sample_prior(cfg.latent_prior(), n, seed=cfg.seed + HOLDOUT_SEED_OFFSET)
    images = generate(gen, z_true)
    summary = {"encoder": args.variant, "n_targets": n}
    for label, model in (("trained", enc), ("untrained", ws.new_encoder())):
        z_hat = encode(model, images)
        recon = generate(gen, z_hat)
        summary[label] = {
            "z_loss": float(z_loss(z_hat, z_true)),
            "psnr_db": sum(psnr(recon[i], images[i]) for i in range(n)) / n,
            "embed_dist": sum(embedding_distance(extractor, recon[i], images[i]) for i in range(n)) / n,
        }
    real = ws.real_images()
    for label, model in (("trained_real", enc), ("untrained_real", ws.new_encoder())):
        recon = reconstruct(model, gen, real)
        summary[label] = {"psnr_db": sum(psnr(recon[i], real[i]) for i in range(len(real))) / len(real)}
    _atomic_write_text(ws.path("evaluation.json"), json.dumps(summary, indent=2, sort_keys=True) + "\n")
    print(json.dumps(summary, indent=2, sort_keys=True))


def cmd_compare(ws: Workspace, args) -> None:
    cfg = ws.cfg
    gen = ws.generator()
    extractor = ws.extractor()
    prior = cfg.latent_prior()
    methods = {}
    for name in cfg.benchmark.methods:
        if name == "descent":
            methods[name] = bench.descent_method(gen, prior, cfg.inversion_config())
        elif name == "descent-clip":
            methods[name] = bench.descent_method(gen, prior, cfg.inversion_config(clip_mode="stochastic"))
        else:
            methods[name] = bench.encoder_method(ws.encoder(name, gen, extractor, train_missing=True))
    n = args.n_targets or cfg.benchmark.n_targets
    targets, _ = ws.targets(gen, n)
    meta = {"generator": str(ws._existing(cfg.checkpoints.generator, GENERATOR_FILE)), "config_hash": cfg.config_hash()}
    report = bench.benchmark(methods, targets, extractor, gen, seed=cfg.seed, metadata=meta, warmup=cfg.benchmark.warmup)
    for fmt, name in (("csv", "report.csv"), ("json", "report.json"), ("markdown", "report.md")):
        _atomic_write_text(ws.path(name), bench.render_report(report, fmt))

    rows = min(cfg.benchmark.grid_rows, n)
    columns = {"target": list(targets[:rows])}
    for name, method in methods.items():
        if report.row(name).failed:
            continue
        z = torch.stack([torch.as_tensor(method(targets[i], i)).reshape(-1) for i in range(rows)])
        columns[name] = list(generate(gen, z))
    emit_image_grid(columns, ws.path("grid.png"))
    ordering = sorted((r for r in report.rows if not r.failed), key=lambda r: -r.psnr_db)
    print(bench.render_report(report, "markdown"), end="")
    print("PSNR ordering: " + " > ".join(r.method for r in ordering))


COMMANDS = {
    "train-gan": cmd_train_gan,
    "build-dataset": cmd_build_dataset,
    "train-encoder": cmd_train_encoder,
    "invert": cmd_invert,
    "evaluate": cmd_evaluate,
    "compare": cmd_compare,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML run configuration")
    common.add_argument("--out", help="output directory (overrides config 'out')")
    common.add_argument("--seed", type=int, help="overrides config seed and GANINVERT_SEED")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="ganinvert", description="Latent-vector recovery for desk-scale GANs.")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("train-gan", parents=[common], help="train the desk generator")
    sub.add_parser("build-dataset", parents=[common], help="sample (image, z) training pairs")

    p = sub.add_parser("train-encoder", parents=[common], help="train an encoder inverse map")
    p.add_argument("--variant", choices=sorted(ENCODER_FILES), default="encoder",
                   help="checkpoint name; encoder-pixel forces the perceptual weight to zero")
    p.add_argument("--regime", choices=("generated_only", "alternating"))

    p = sub.add_parser("invert", parents=[common], help="recover latents for a set of targets")
    p.add_argument("--method", choices=("descent", "descent-clip", "encoder"), default="descent")
    p.add_argument("--iterations", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--clip", choices=("none", "hard", "stochastic"))
    p.add_argument("--targets", help="directory of target images (default: generated targets)")
    p.add_argument("--n-targets", type=int)

    p = sub.add_parser("evaluate", parents=[common], help="held-out metrics for a trained encoder")
    p.add_argument("--variant", choices=sorted(ENCODER_FILES), default="encoder")
    p.add_argument("--n-targets", type=int)

    p = sub.add_parser("compare", parents=[common], help="benchmark all configured methods")
    p.add_argument("--n-targets", type=int)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, out=args.out, seed=args.seed)
        if getattr(args, "n_targets", None) is not None and args.n_targets < 1:
            raise ConfigurationError("--n-targets must be >= 1")
        if getattr(args, "iterations", None) is not None and args.iterations < 0:
            raise ConfigurationError("--iterations must be >= 0")
        torch.manual_seed(cfg.seed)
        COMMANDS[args.command](Workspace(cfg), args)
    except ConfigurationError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    except (GanInvertError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
