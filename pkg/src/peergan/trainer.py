"""Alternating D/G optimisation with lazy R1 and direction losses, adaptive augmentation and EMA."""

from __future__ import annotations

import copy
import csv
import json
import logging
import math
import os
import zlib
from collections import Counter
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np
import torch
from safetensors import SafetensorError, safe_open
from safetensors.torch import load_file, save_file

from .adversary import (
    Discriminator,
    DiscriminatorConfig,
    DirectionLossConfig,
    adversarial_losses,
    direction_loss,
    r1_penalty,
    should_apply_direction,
)
from .dataset import AUGMENT_OPS, AugmentationState, SamplingPolicy, UnbalancedDataset, augment, sample_batch
from .generator import DEFAULT_CHANNELS, Generator, GeneratorConfig, KeySchedule

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "peergan-checkpoint"
CHECKPOINT_VERSION = "1"
LOSS_COLUMNS = ("step", "loss_D", "loss_G", "r1", "L_direction", "p")

# options of the unconditional baseline that this model deliberately lacks
REMOVED_OPTIONS = ("pl_weight", "pl_decay", "pl_batch_shrink", "path_length", "path_length_weight",
                   "style_mixing", "style_mixing_prob", "mixing_prob")


class ConfigError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


class TrainingDiverged(FloatingPointError):
    pass


def format_channels(channels: dict[int, int]) -> str:
    return ",".join(f"{r}:{c}" for r, c in sorted(channels.items()))


def parse_channels(text: str) -> dict[int, int]:
    try:
        pairs = [item.split(":") for item in text.split(",") if item.strip()]
        return {int(r): int(c) for r, c in pairs}
    except ValueError as exc:
        raise ConfigError(f"bad channel plan {text!r} (expected '4:128,8:128,...')") from exc


@dataclass
class TrainConfig:
    steps: int = field(default=1000, metadata={"help": "number of optimisation steps"})
    batch_size: int = field(default=8, metadata={"help": "images per minibatch"})
    resolution: int = field(default=32, metadata={"help": "image resolution (power of two)"})
    key: str = field(default="4", metadata={"help": "class-modulation key, e.g. 4, 4+16, 4+8+16+64, none"})
    lr_g: float = field(default=2.5e-3, metadata={"help": "generator Adam learning rate"})
    lr_d: float = field(default=2.5e-3, metadata={"help": "discriminator Adam learning rate"})
    beta1: float = field(default=0.0, metadata={"help": "Adam beta1"})
    beta2: float = field(default=0.99, metadata={"help": "Adam beta2"})
    r1_gamma: float = field(default=1.0, metadata={"help": "R1 penalty weight"})
    r1_interval: int = field(default=16, metadata={"help": "apply R1 every this many D steps"})
    dir_weight: float = field(default=1.0, metadata={"help": "direction loss weight"})
    dir_interval: int = field(default=16, metadata={"help": "apply the direction loss every this many steps"})
    ada_target: float = field(default=0.6, metadata={"help": "target sign statistic of D(real)"})
    ada_step: float = field(default=0.01, metadata={"help": "augmentation probability change per adjustment"})
    ada_interval: int = field(default=4, metadata={"help": "steps between augmentation probability adjustments"})
    ada_ops: str = field(default="+".join(AUGMENT_OPS), metadata={"help": "'+'-joined augmentation ops"})
    ema_beta: float = field(default=0.999, metadata={"help": "generator EMA decay"})
    peer_size: int | None = field(default=None, metadata={"help": "cap on the number of peer images"})
    target_oversample: float | None = field(
        default=None, metadata={"help": "fixed target share per batch (default: uniform over images)"})
    seed: int = field(default=0, metadata={"help": "master seed"})
    snapshot_interval: int = field(default=100, metadata={"help": "steps between snapshot grids"})
    checkpoint_interval: int = field(default=500, metadata={"help": "steps between checkpoints"})
    latent_dim: int = field(default=64, metadata={"help": "latent code size"})
    w_dim: int = field(default=64, metadata={"help": "W space size"})
    c_dim: int = field(default=64, metadata={"help": "C (class) space size"})
    mapping_layers: int = field(default=4, metadata={"help": "layers of the latent mapping network"})
    class_mapping_layers: int = field(default=2, metadata={"help": "layers of the class mapping network"})
    channels: str = field(default=format_channels(DEFAULT_CHANNELS), metadata={"help": "channel plan res:ch,..."})
    class_mod_torgb: bool = field(default=False, metadata={"help": "also class-modulate toRGB layers"})
    d_conditioning: str = field(default="embedding", metadata={"help": "discriminator condition: embedding|onehot"})
    dtype: str = field(default="float32", metadata={"help": "float32 or float64"})

    def __post_init__(self) -> None:
        for name in ("steps", "batch_size", "r1_interval", "dir_interval", "ada_interval",
                     "snapshot_interval", "checkpoint_interval"):
            value, least = getattr(self, name), 0 if name == "steps" else 1
            if value < least:
                raise ConfigError(f"{name} must be >= {least}, got {value}")
        if not 0.0 <= self.ema_beta < 1.0:
            raise ConfigError(f"ema_beta must lie in [0, 1), got {self.ema_beta}")
        if not 0.0 < self.ada_target < 1.0:
            raise ConfigError(f"ada_target must lie in (0, 1), got {self.ada_target}")
        if self.target_oversample is not None and not 0.0 < self.target_oversample < 1.0:
            raise ConfigError("target_oversample must lie in (0, 1)")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype}")
        try:
            self.key_schedule
        except ValueError as exc:
            raise ConfigError(f"bad value for 'key': {exc}") from exc
        try:
            self.generator_config(512)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def from_dict(cls, values: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        for name in values:
            if name in REMOVED_OPTIONS or "path_length" in name or "mixing" in name:
                raise ConfigError(f"option {name!r} is not supported: path-length regularization and "
                                  f"style mixing are removed from this model")
            if name not in known:
                raise ConfigError(f"unknown config key {name!r}")
        return cls(**values)

    @property
    def torch_dtype(self) -> torch.dtype:
        return getattr(torch, self.dtype)

    @property
    def key_schedule(self) -> KeySchedule:
        available = [2 ** i for i in range(2, int(math.log2(self.resolution)) + 1)]
        return KeySchedule.parse(self.key, set(available))

    def generator_config(self, feature_dim: int) -> GeneratorConfig:
        return GeneratorConfig(
            resolution=self.resolution, latent_dim=self.latent_dim, w_dim=self.w_dim, c_dim=self.c_dim,
            feature_dim=feature_dim, mapping_layers=self.mapping_layers,
            class_mapping_layers=self.class_mapping_layers, channels=parse_channels(self.channels),
            key=self.key_schedule, class_mod_torgb=self.class_mod_torgb)

    def discriminator_config(self, feature_dim: int, num_classes: int) -> DiscriminatorConfig:
        return DiscriminatorConfig(resolution=self.resolution, feature_dim=feature_dim,
                                   channels=parse_channels(self.channels), conditioning=self.d_conditioning,
                                   num_classes=num_classes)

    def sampling_policy(self) -> SamplingPolicy:
        seed = stream_seed(self.seed, "data")
        if self.target_oversample is None:
            return SamplingPolicy("uniform", seed=seed)
        return SamplingPolicy("target-oversample", self.target_oversample, seed)


def stream_seed(seed: int, stream: str, step: int = 0) -> int:
    """Independent 63-bit seed for a named stochastic stream at a given step."""
    state = np.random.SeedSequence([seed, zlib.crc32(stream.encode()), step]).generate_state(2, np.uint32)
    return int((int(state[0]) << 31) ^ int(state[1])) & (2 ** 63 - 1)


def update_ema(ema: torch.nn.Module, live: torch.nn.Module, beta: float) -> torch.nn.Module:
    """``ema <- beta * ema + (1 - beta) * live`` for every parameter and buffer."""
    ema_tensors = list(ema.parameters()) + list(ema.buffers())
    live_tensors = list(live.parameters()) + list(live.buffers())
    if len(ema_tensors) != len(live_tensors):
        raise ValueError("EMA and live modules have different structure")
    with torch.no_grad():
        for e, p in zip(ema_tensors, live_tensors):
            if e.shape != p.shape:
                raise ValueError(f"EMA shape {tuple(e.shape)} != live shape {tuple(p.shape)}")
            if e.dtype.is_floating_point:
                e.copy_(p.lerp(e, beta))
            else:
                e.copy_(p)
    return ema


def update_ada_p(p: float, r_t: float, target: float, adjust_step: float) -> float:
    """Sign controller: raise p when D is overconfident on reals, lower it otherwise."""
    return float(min(max(p + adjust_step * float(np.sign(r_t - target)), 0.0), 1.0))


@dataclass
class TrainState:
    step: int
    generator: Generator
    generator_ema: Generator
    discriminator: Discriminator
    opt_g: torch.optim.Optimizer
    opt_d: torch.optim.Optimizer
    p: float = 0.0
    ada_sum: float = 0.0
    ada_count: int = 0
    history: list[dict] = field(default_factory=list)
    warnings: Counter = field(default_factory=Counter)


class Trainer:
    """Owns models, optimisers and the step loop.

    Every random draw comes from :func:`stream_seed` streams keyed by
    (seed, stream name, step), so a resumed run reproduces an uninterrupted one.
    """

    def __init__(self, config: TrainConfig, dataset: UnbalancedDataset, class_embeddings: torch.Tensor,
                 direction: DirectionLossConfig | None = None):
        self.config = config
        self.dataset = dataset
        if dataset.resolution != config.resolution:
            raise ConfigError(f"dataset resolution {dataset.resolution} != config resolution {config.resolution}")
        dtype = config.torch_dtype
        self.dtype = dtype
        self.embeddings = class_embeddings.to(dtype)
        self.images = dataset.images.to(dtype)
        direction = direction or DirectionLossConfig(t_peer=dataset.text_labels[0], t_target=dataset.text_labels[1])
        self.direction = replace(direction, weight=config.dir_weight, lazy_interval=config.dir_interval)
        self.policy = config.sampling_policy()
        self.ops = tuple(op for op in config.ada_ops.split("+") if op)
        AugmentationState(0.0, self.ops)  # rejects unknown op names

        feature_dim = self.embeddings.shape[1]
        with torch.random.fork_rng():
            torch.manual_seed(stream_seed(config.seed, "init"))
            generator = Generator(config.generator_config(feature_dim)).to(dtype)
            discriminator = Discriminator(config.discriminator_config(feature_dim, dataset.num_classes)).to(dtype)
        generator_ema = copy.deepcopy(generator).eval().requires_grad_(False)
        betas = (config.beta1, config.beta2)
        self.state = TrainState(
            step=0, generator=generator, generator_ema=generator_ema, discriminator=discriminator,
            opt_g=torch.optim.Adam(generator.parameters(), lr=config.lr_g, betas=betas, eps=1e-8),
            opt_d=torch.optim.Adam(discriminator.parameters(), lr=config.lr_d, betas=betas, eps=1e-8))

    # -- batches and conditioning ------------------------------------------

    def next_batch(self, step: int | None = None) -> tuple[torch.Tensor, torch.Tensor]:
        step = self.state.step if step is None else step
        images, labels = sample_batch(self.dataset, self.policy, self.config.batch_size, step)
        return images.to(self.dtype), labels

    def d_condition(self, labels: torch.Tensor) -> torch.Tensor:
        if self.config.d_conditioning == "onehot":
            return labels
        return self.embeddings[labels]

    def _latents(self, name: str, step: int, n: int) -> torch.Tensor:
        g = torch.Generator().manual_seed(stream_seed(self.config.seed, name, step))
        return torch.randn(n, self.config.latent_dim, generator=g, dtype=self.dtype)

    def _seed(self, name: str, step: int) -> int:
        return stream_seed(self.config.seed, name, step)

    def _augment(self, images: torch.Tensor, name: str, step: int) -> torch.Tensor:
        return augment(images, AugmentationState(self.state.p, self.ops), self._seed(name, step))

    # -- losses ------------------------------------------------------------

    def generator_loss(self, batch, step: int | None = None, stats: dict | None = None):
        """G objective at ``step`` for ``batch``: ``(total, loss_G, L_direction or None)``."""
        s = self.state
        step = s.step if step is None else step
        _, labels = batch
        z = self._latents("z_g", step, len(labels))
        fake = s.generator(z, self.embeddings[labels], self._seed("noise_g", step))
        logits = s.discriminator(self._augment(fake, "aug_g", step), self.d_condition(labels))
        _, loss_g = adversarial_losses(logits.detach(), logits)
        total = loss_g
        l_dir = None
        if self.direction.weight > 0 and should_apply_direction(step, self.direction):
            z_dir = self._latents("z_dir", step, len(labels))
            peer = self.embeddings[self.dataset.peer.class_id]
            target = self.embeddings[self.dataset.target_class_id]
            l_dir = direction_loss(s.generator, z_dir, peer, target, self.direction,
                                   self._seed("noise_dir", step), stats)
            total = total + self.direction.weight * l_dir
        return total, loss_g, l_dir

    def generator_gradients(self, batch, step: int | None = None) -> dict[str, torch.Tensor]:
        """Gradients of the G objective without updating anything."""
        g = self.state.generator
        d = self.state.discriminator
        d.requires_grad_(False)
        try:
            total, _, _ = self.generator_loss(batch, step)
            grads = torch.autograd.grad(total, [p for p in g.parameters()], allow_unused=True)
        finally:
            d.requires_grad_(True)
        return {name: (torch.zeros_like(p) if gr is None else gr)
                for (name, p), gr in zip(g.named_parameters(), grads)}

    # -- the step ------------------------------------------------------------

    def train_step(self, batch=None) -> dict:
        s = self.state
        step = s.step
        cfg = self.config
        batch = self.next_batch(step) if batch is None else batch
        reals, labels = batch
        reals = reals.to(self.dtype)
        cond = self.d_condition(labels)

        # discriminator
        z = self._latents("z_d", step, len(labels))
        with torch.no_grad():
            fake = s.generator(z, self.embeddings[labels], self._seed("noise_d", step))
        real_aug = self._augment(reals, "aug_real", step)
        logits_real = s.discriminator(real_aug, cond)
        logits_fake = s.discriminator(self._augment(fake, "aug_fake", step), cond)
        loss_d, _ = adversarial_losses(logits_real, logits_fake)
        total_d = loss_d
        r1 = None
        if cfg.r1_gamma > 0 and step % cfg.r1_interval == 0:
            x = real_aug.detach().requires_grad_(True)
            r1 = r1_penalty(s.discriminator, x, cond, cfg.r1_gamma)
            total_d = total_d + r1 * cfg.r1_interval
        s.opt_d.zero_grad(set_to_none=True)
        total_d.backward()
        s.opt_d.step()

        # adaptive augmentation
        s.ada_sum += float(torch.sign(logits_real.detach()).mean())
        s.ada_count += 1
        if s.ada_count >= cfg.ada_interval:
            s.p = update_ada_p(s.p, s.ada_sum / s.ada_count, cfg.ada_target, cfg.ada_step)
            s.ada_sum, s.ada_count = 0.0, 0

        # generator
        stats: dict = {}
        s.discriminator.requires_grad_(False)
        try:
            total_g, loss_g, l_dir = self.generator_loss(batch, step, stats)
            s.opt_g.zero_grad(set_to_none=True)
            total_g.backward()
            s.opt_g.step()
        finally:
            s.discriminator.requires_grad_(True)
        s.warnings.update(stats)
        update_ema(s.generator_ema, s.generator, cfg.ema_beta)

        record = {
            "step": step,
            "loss_D": loss_d.item(),
            "loss_G": loss_g.item(),
            "r1": None if r1 is None else r1.item(),
            "L_direction": None if l_dir is None else l_dir.item(),
            "p": s.p,
        }
        s.history.append(record)
        bad = [k for k, v in record.items() if isinstance(v, float) and not math.isfinite(v)]
        if bad:
            recent = "\n".join(str(r) for r in s.history[-5:])
            raise TrainingDiverged(f"non-finite {bad} at step {step}; last losses:\n{recent}")
        s.step += 1
        return record

    def run(self, steps: int, callback=None) -> list[dict]:
        records = []
        for _ in range(steps):
            record = self.train_step()
            records.append(record)
            if callback is not None:
                callback(self, record)
        return records

    # -- checkpoints -----------------------------------------------------------

    def save_checkpoint(self, path: str | Path, extra_metadata: dict | None = None) -> None:
        save_checkpoint(self, path, extra_metadata)

    @classmethod
    def from_checkpoint(cls, path: str | Path, dataset: UnbalancedDataset,
                        direction: DirectionLossConfig | None = None) -> "Trainer":
        ckpt = load_checkpoint(path)
        trainer = cls(ckpt.config, dataset, ckpt.embeddings, direction)
        ckpt.restore(trainer)
        return trainer


# ---------------------------------------------------------------------------
# Checkpoint container: safetensors arrays + string manifest


def _optimizer_tensors(prefix: str, opt: torch.optim.Optimizer) -> dict[str, torch.Tensor]:
    out = {}
    for idx, state in opt.state_dict()["state"].items():
        for name, value in state.items():
            out[f"{prefix}/{idx}/{name}"] = torch.as_tensor(value).clone().contiguous()
    return out


def _restore_optimizer(prefix: str, opt: torch.optim.Optimizer, tensors: dict[str, torch.Tensor]) -> None:
    sd = opt.state_dict()
    state: dict[int, dict] = {}
    for key, value in tensors.items():
        if key.startswith(prefix + "/"):
            _, idx, name = key.split("/")
            state.setdefault(int(idx), {})[name] = value
    sd["state"] = state
    opt.load_state_dict(sd)


def save_checkpoint(trainer: Trainer, path: str | Path, extra_metadata: dict | None = None) -> None:
    """Write models, optimiser moments and controller state atomically."""
    s = trainer.state
    tensors = {}
    for prefix, module in (("G", s.generator), ("G_ema", s.generator_ema), ("D", s.discriminator)):
        for name, value in module.state_dict().items():
            tensors[f"{prefix}/{name}"] = value.detach().clone().contiguous()
    tensors.update(_optimizer_tensors("opt_G", s.opt_g))
    tensors.update(_optimizer_tensors("opt_D", s.opt_d))
    tensors["embeddings"] = trainer.embeddings.detach().clone().contiguous()
    ds = trainer.dataset
    metadata = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "step": str(s.step),
        "p": repr(s.p),
        "ada_sum": repr(s.ada_sum),
        "ada_count": str(s.ada_count),
        "warnings": json.dumps(dict(s.warnings)),
        "config": json.dumps(asdict(trainer.config), sort_keys=True),
        "dataset_fingerprint": ds.fingerprint(),
        "class_names": json.dumps([c.name for c in ds.classes]),
        "target_class": str(ds.target_class_id),
        "text_labels": json.dumps([trainer.direction.t_peer, trainer.direction.t_target]),
    }
    metadata.update({k: str(v) for k, v in (extra_metadata or {}).items()})
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    save_file(tensors, str(tmp), metadata=metadata)
    os.replace(tmp, path)


@dataclass
class Checkpoint:
    config: TrainConfig
    metadata: dict[str, str]
    tensors: dict[str, torch.Tensor]

    @property
    def step(self) -> int:
        return int(self.metadata["step"])

    @property
    def embeddings(self) -> torch.Tensor:
        return self.tensors["embeddings"]

    @property
    def class_names(self) -> list[str]:
        return json.loads(self.metadata["class_names"])

    @property
    def target_class(self) -> int:
        return int(self.metadata["target_class"])

    def module_state(self, prefix: str) -> dict[str, torch.Tensor]:
        n = len(prefix) + 1
        return {k[n:]: v for k, v in self.tensors.items() if k.startswith(prefix + "/")}

    def build_generator(self, ema: bool = True) -> Generator:
        g = Generator(self.config.generator_config(self.embeddings.shape[1])).to(self.config.torch_dtype)
        g.load_state_dict(self.module_state("G_ema" if ema else "G"))
        return g.eval().requires_grad_(False)

    def restore(self, trainer: Trainer) -> None:
        s = trainer.state
        s.generator.load_state_dict(self.module_state("G"))
        s.generator_ema.load_state_dict(self.module_state("G_ema"))
        s.discriminator.load_state_dict(self.module_state("D"))
        _restore_optimizer("opt_G", s.opt_g, self.tensors)
        _restore_optimizer("opt_D", s.opt_d, self.tensors)
        s.step = self.step
        s.p = float(self.metadata["p"])
        s.ada_sum = float(self.metadata["ada_sum"])
        s.ada_count = int(self.metadata["ada_count"])
        s.warnings = Counter(json.loads(self.metadata["warnings"]))


def load_checkpoint(path: str | Path) -> Checkpoint:
    path = Path(path)
    try:
        with safe_open(str(path), framework="pt") as f:
            metadata = dict(f.metadata() or {})
        tensors = load_file(str(path))
    except (SafetensorError, OSError, ValueError, RuntimeError) as exc:
        raise CheckpointError(f"corrupt or unreadable checkpoint {path}: {exc}") from exc
    if metadata.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path} is not a checkpoint of this package")
    if metadata.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"checkpoint version {metadata.get('version')} != supported {CHECKPOINT_VERSION}")
    config = TrainConfig.from_dict(json.loads(metadata["config"]))
    return Checkpoint(config, metadata, tensors)


# ---------------------------------------------------------------------------
# Loss trace CSV


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def append_loss_rows(path: str | Path, records: list[dict]) -> None:
    path = Path(path)
    new = not path.exists() or path.stat().st_size == 0
    with path.open("a", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        if new:
            writer.writerow(LOSS_COLUMNS)
        for r in records:
            writer.writerow([_fmt(r[c]) for c in LOSS_COLUMNS])


def read_loss_rows(path: str | Path) -> list[dict]:
    with Path(path).open(newline="") as f:
        return [{k: (float(v) if v != "" else None) if k != "step" else int(v) for k, v in row.items()}
                for row in csv.DictReader(f)]
