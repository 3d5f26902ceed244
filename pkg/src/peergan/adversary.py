"""Projection discriminator and loss terms (logistic adversarial loss, R1, direction loss)."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

from .embedding import DirectionEncoderPair, stub_direction_encoders
from .generator import DEFAULT_CHANNELS, EqualLinear, normalize_2nd_moment


class EqualConv2d(nn.Module):
    def __init__(self, in_channels: int, out_channels: int, kernel_size: int, bias: bool = True,
                 activation: bool = False):
        super().__init__()
        self.weight = nn.Parameter(torch.randn(out_channels, in_channels, kernel_size, kernel_size))
        self.bias = nn.Parameter(torch.zeros(out_channels)) if bias else None
        self.weight_gain = 1.0 / math.sqrt(in_channels * kernel_size * kernel_size)
        self.padding = kernel_size // 2
        self.activation = activation

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = F.conv2d(x, self.weight * self.weight_gain, self.bias, padding=self.padding)
        return F.leaky_relu(x, 0.2) * math.sqrt(2) if self.activation else x


class DiscriminatorBlock(nn.Module):
    """Residual block: two 3x3 convs, then 2x average-pool downsampling."""

    def __init__(self, in_channels: int, out_channels: int):
        super().__init__()
        self.conv0 = EqualConv2d(in_channels, in_channels, 3, activation=True)
        self.conv1 = EqualConv2d(in_channels, out_channels, 3, activation=True)
        self.skip = EqualConv2d(in_channels, out_channels, 1, bias=False)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        y = self.skip(F.avg_pool2d(x, 2))
        x = F.avg_pool2d(self.conv1(self.conv0(x)), 2)
        return (x + y) * math.sqrt(0.5)


def minibatch_stddev(x: torch.Tensor, group_size: int = 4) -> torch.Tensor:
    b, c, h, w = x.shape
    g = math.gcd(b, group_size)
    y = x.reshape(g, -1, c, h, w)
    y = (y - y.mean(dim=0)).square().mean(dim=0).add(1e-8).sqrt()
    y = y.mean(dim=(1, 2, 3)).reshape(-1, 1, 1, 1).repeat(g, 1, h, w)
    return torch.cat([x, y], dim=1)


@dataclass
class DiscriminatorConfig:
    resolution: int = 32
    feature_dim: int = 512
    channels: dict[int, int] = field(default_factory=lambda: dict(DEFAULT_CHANNELS))
    # "embedding": condition on pretrained class embeddings; "onehot": on class ids
    conditioning: str = "embedding"
    num_classes: int = 2
    mbstd_group: int = 4
    normalize_class_input: bool = True

    def __post_init__(self) -> None:
        if self.conditioning not in ("embedding", "onehot"):
            raise ValueError(f"unknown conditioning {self.conditioning!r}")


class Discriminator(nn.Module):
    """``D(x, c) = d(x) + <phi(x), e(c)> / sqrt(dim)`` on a residual conv trunk."""

    def __init__(self, cfg: DiscriminatorConfig):
        super().__init__()
        self.cfg = cfg
        res = cfg.resolution
        self.from_rgb = EqualConv2d(3, cfg.channels[res], 1, activation=True)
        blocks = []
        while res > 4:
            blocks.append(DiscriminatorBlock(cfg.channels[res], cfg.channels[res // 2]))
            res //= 2
        self.blocks = nn.ModuleList(blocks)
        ch = cfg.channels[4]
        self.epilogue_conv = EqualConv2d(ch + 1, ch, 3, activation=True)
        self.epilogue_fc = EqualLinear(ch * 16, ch, activation=True)
        self.out = EqualLinear(ch, 1)
        cond_in = cfg.feature_dim if cfg.conditioning == "embedding" else cfg.num_classes
        self.embed = EqualLinear(cond_in, ch)
        self.trunk_dim = ch

    def features(self, x: torch.Tensor) -> torch.Tensor:
        x = self.from_rgb(x)
        for block in self.blocks:
            x = block(x)
        x = self.epilogue_conv(minibatch_stddev(x, self.cfg.mbstd_group))
        return self.epilogue_fc(x.flatten(1))

    def forward(self, x: torch.Tensor, cond: torch.Tensor) -> torch.Tensor:
        phi = self.features(x)
        if self.cfg.conditioning == "onehot":
            if cond.dtype == torch.long:
                cond = F.one_hot(cond, self.cfg.num_classes).to(phi.dtype)
        elif self.cfg.normalize_class_input:
            cond = normalize_2nd_moment(cond)
        projection = (phi * self.embed(cond)).sum(dim=1) / math.sqrt(self.trunk_dim)
        return self.out(phi).squeeze(1) + projection


# ---------------------------------------------------------------------------
# Losses


def adversarial_losses(logits_real: torch.Tensor, logits_fake: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Non-saturating logistic losses ``(loss_D, loss_G)``, mean-reduced."""
    loss_d = F.softplus(logits_fake).mean() + F.softplus(-logits_real).mean()
    loss_g = F.softplus(-logits_fake).mean()
    return loss_d, loss_g


def r1_penalty(discriminator, real_images: torch.Tensor, cond: torch.Tensor, gamma: float) -> torch.Tensor:
    """``gamma/2 * mean_b ||grad_x D(x_b, c_b)||^2``; keeps the graph for backprop."""
    if not real_images.requires_grad:
        raise ValueError("real_images must require grad")
    logits = discriminator(real_images, cond)
    (grad,) = torch.autograd.grad(logits.sum(), real_images, create_graph=True)
    if not torch.isfinite(grad).all():
        raise FloatingPointError("non-finite gradient in R1 penalty")
    return 0.5 * gamma * grad.square().flatten(1).sum(dim=1).mean()


@dataclass
class DirectionLossConfig:
    encoder_pair: DirectionEncoderPair = field(default_factory=stub_direction_encoders)
    t_peer: str = "peer"
    t_target: str = "target"
    weight: float = 1.0
    lazy_interval: int = 16

    def __post_init__(self) -> None:
        if self.lazy_interval < 1:
            raise ValueError("lazy_interval must be >= 1")
        if not math.isfinite(self.weight) or self.weight < 0:
            raise ValueError("direction weight must be finite and >= 0")


def should_apply_direction(iteration: int, cfg: DirectionLossConfig) -> bool:
    if iteration < 0:
        raise ValueError("iteration must be >= 0")
    return iteration % cfg.lazy_interval == 0


def direction_cosine_loss(sample_shift: torch.Tensor, domain_shift: torch.Tensor,
                          stats: dict | None = None) -> torch.Tensor:
    """Mean of ``1 - cos(sample_shift_b, domain_shift)`` over the batch.

    A zero-length direction has no defined cosine; it counts as cosine 0 and
    increments ``stats["degenerate_directions"]``.
    """
    if sample_shift.dim() == 1:
        sample_shift = sample_shift.unsqueeze(0)
    domain_shift = domain_shift.to(sample_shift.dtype).expand_as(sample_shift)
    tiny = torch.finfo(sample_shift.dtype).tiny
    norms = sample_shift.norm(dim=1) * domain_shift.norm(dim=1)
    degenerate = norms <= tiny
    dots = (sample_shift * domain_shift).sum(dim=1)
    cos = torch.where(degenerate, torch.zeros_like(dots), dots / torch.where(degenerate, torch.ones_like(norms), norms))
    if stats is not None and bool(degenerate.any()):
        stats["degenerate_directions"] = stats.get("degenerate_directions", 0) + int(degenerate.sum())
    return (1.0 - cos.clamp(-1.0, 1.0)).mean()


def domain_direction(cfg: DirectionLossConfig) -> torch.Tensor:
    encode = cfg.encoder_pair.text_encode
    return encode(cfg.t_peer) - encode(cfg.t_target)


def direction_loss(generator, z_batch: torch.Tensor, peer_embedding: torch.Tensor, target_embedding: torch.Tensor,
                   cfg: DirectionLossConfig, noise_seed: int | None = None, stats: dict | None = None) -> torch.Tensor:
    """Align the peer-minus-target image shift at shared ``z`` with the prompt shift.

    ``generator`` needs a ``generate(z, c_m, noise_seed)`` method. Both
    classes are rendered from the same latent codes and noise.
    """
    peer_images = generator.generate(z_batch, peer_embedding, noise_seed)
    target_images = generator.generate(z_batch, target_embedding, noise_seed)
    encode = cfg.encoder_pair.image_encode
    sample_shift = encode(peer_images) - encode(target_images)
    return direction_cosine_loss(sample_shift, domain_direction(cfg), stats)
