"""Style-based generator with a separate class mapping network and key-gated class modulation.

The latent code goes through ``f_w`` to W, the class embedding through a
shallower ``f_c`` to C. Every synthesis convolution modulates its weights
by a style scale from W and, at key resolutions only, a class scale from C;
demodulation normalizes the jointly modulated weights. There is no style
mixing and no path-length regularization: synthesis consumes exactly one
``w`` per sample.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

DEFAULT_CHANNELS = {4: 128, 8: 128, 16: 64, 32: 64, 64: 32, 128: 32, 256: 16}


class KeyScheduleError(ValueError):
    pass


@dataclass(frozen=True)
class KeySchedule:
    """Resolutions at which class modulation is applied. Empty means never."""

    active_resolutions: frozenset[int] = frozenset()

    @classmethod
    def parse(cls, text: str, available: set[int] | None = None) -> "KeySchedule":
        """Parse ``"4+8+16"`` style strings; ``"none"`` gives the empty schedule."""
        text = text.strip()
        if not text:
            raise KeyScheduleError("empty key string")
        if text.lower() == "none":
            return cls(frozenset())
        values = []
        for part in text.split("+"):
            part = part.strip()
            if not part.isdigit():
                raise KeyScheduleError(f"key entry {part!r} is not an integer")
            value = int(part)
            if value < 4 or value & (value - 1):
                raise KeyScheduleError(f"key entry {value} is not a power of two >= 4")
            if value in values:
                raise KeyScheduleError(f"key entry {value} is duplicated")
            values.append(value)
        if available is not None:
            missing = sorted(set(values) - set(available))
            if missing:
                raise KeyScheduleError(f"key entries {missing} are not synthesis resolutions {sorted(available)}")
        return cls(frozenset(values))

    def __contains__(self, resolution: int) -> bool:
        return resolution in self.active_resolutions

    def __str__(self) -> str:
        return "+".join(str(r) for r in sorted(self.active_resolutions)) or "none"


@dataclass
class GeneratorConfig:
    resolution: int = 32
    latent_dim: int = 64
    w_dim: int = 64
    c_dim: int = 64
    feature_dim: int = 512
    mapping_layers: int = 4
    class_mapping_layers: int = 2
    mapping_lr_mul: float = 0.01
    channels: dict[int, int] = field(default_factory=lambda: dict(DEFAULT_CHANNELS))
    key: KeySchedule = field(default_factory=lambda: KeySchedule(frozenset({4})))
    # toRGB layers are style-modulated only unless this is set
    class_mod_torgb: bool = False
    normalize_class_input: bool = True
    eps: float = 1e-8

    def __post_init__(self) -> None:
        if self.resolution < 4 or self.resolution & (self.resolution - 1):
            raise ValueError(f"resolution must be a power of two >= 4, got {self.resolution}")
        if not self.class_mapping_layers < self.mapping_layers:
            raise ValueError(
                f"class mapping network must have fewer layers than the latent mapping network "
                f"({self.class_mapping_layers} >= {self.mapping_layers})")
        if self.class_mapping_layers < 1:
            raise ValueError("class mapping network needs at least one layer")
        missing = [r for r in self.resolutions if r not in self.channels]
        if missing:
            raise ValueError(f"channel plan lacks resolutions {missing}")
        if not self.key.active_resolutions <= set(self.resolutions):
            raise ValueError(f"key {self.key} is not a subset of resolutions {self.resolutions}")
        if self.eps <= 0:
            raise ValueError("eps must be positive")

    @property
    def resolutions(self) -> list[int]:
        return [2 ** i for i in range(2, int(math.log2(self.resolution)) + 1)]


# ---------------------------------------------------------------------------
# Pure functions


def normalize_2nd_moment(x: torch.Tensor, eps: float = 1e-8) -> torch.Tensor:
    return x * (x.square().mean(dim=1, keepdim=True) + eps).rsqrt()


def apply_key(key: KeySchedule, resolution: int, class_scale: torch.Tensor) -> torch.Tensor:
    """Pass the class scale at key resolutions, otherwise the neutral all-ones scale."""
    if resolution in key:
        return class_scale
    return torch.ones_like(class_scale)


def modulate_demodulate(weight: torch.Tensor, style: torch.Tensor, class_scale: torch.Tensor,
                        eps: float = 1e-8, demodulate: bool = True) -> torch.Tensor:
    """Per-sample effective conv weights.

    ``weight`` is ``[O, I, k, k]``; ``style`` and ``class_scale`` are ``[B, I]``
    (or ``[I]``). Returns ``[B, O, I, k, k]`` with
    ``w'[o,i] = s_i * c_i * w[o,i]`` and, when demodulating,
    ``w''[o] = w'[o] / sqrt(sum_{i,k} w'[o]^2 + eps)``.
    """
    scale = (style * class_scale).reshape(-1, 1, weight.shape[1], 1, 1)
    w = weight.unsqueeze(0) * scale
    if demodulate:
        w = w / (w.square().sum(dim=(2, 3, 4), keepdim=True) + eps).sqrt()
    return w


def modulated_conv2d(x: torch.Tensor, weights: torch.Tensor, padding: int) -> torch.Tensor:
    """Grouped convolution of ``x [B, I, H, W]`` with per-sample ``weights [B, O, I, k, k]``."""
    b, i, h, w = x.shape
    _, o, _, kh, kw = weights.shape
    out = F.conv2d(x.reshape(1, b * i, h, w), weights.reshape(b * o, i, kh, kw), padding=padding, groups=b)
    return out.reshape(b, o, out.shape[-2], out.shape[-1])


# ---------------------------------------------------------------------------
# Layers


class EqualLinear(nn.Module):
    """Linear layer with runtime weight scaling (equalized learning rate)."""

    def __init__(self, in_features: int, out_features: int, bias_init: float = 0.0,
                 lr_mul: float = 1.0, activation: bool = False):
        super().__init__()
        self.weight = nn.Parameter(torch.randn(out_features, in_features) / lr_mul)
        self.bias = nn.Parameter(torch.full([out_features], float(bias_init) / lr_mul))
        self.weight_gain = lr_mul / math.sqrt(in_features)
        self.lr_mul = lr_mul
        self.activation = activation

    def effective_weight(self) -> torch.Tensor:
        return self.weight * self.weight_gain

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = F.linear(x, self.effective_weight(), self.bias * self.lr_mul)
        return F.leaky_relu(x, 0.2) if self.activation else x


class MappingNetwork(nn.Module):
    """MLP with leaky-ReLU between layers; the output layer is linear."""

    def __init__(self, in_dim: int, out_dim: int, num_layers: int, lr_mul: float = 1.0,
                 normalize_input: bool = True):
        super().__init__()
        self.normalize_input = normalize_input
        dims = [in_dim] + [out_dim] * num_layers
        self.layers = nn.ModuleList(
            EqualLinear(dims[i], dims[i + 1], lr_mul=lr_mul, activation=i < num_layers - 1)
            for i in range(num_layers))

    @property
    def num_layers(self) -> int:
        return len(self.layers)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if self.normalize_input:
            x = normalize_2nd_moment(x)
        for layer in self.layers:
            x = layer(x)
        return x


class ModulatedConv(nn.Module):
    def __init__(self, in_channels: int, out_channels: int, kernel_size: int, w_dim: int, c_dim: int,
                 resolution: int, demodulate: bool = True, use_class: bool = True, eps: float = 1e-8):
        super().__init__()
        self.weight = nn.Parameter(torch.randn(out_channels, in_channels, kernel_size, kernel_size))
        self.weight_gain = 1.0 / math.sqrt(in_channels * kernel_size * kernel_size)
        self.style_affine = EqualLinear(w_dim, in_channels, bias_init=1.0)
        self.class_affine = EqualLinear(c_dim, in_channels, bias_init=1.0) if use_class else None
        self.resolution = resolution
        self.demodulate = demodulate
        self.padding = kernel_size // 2
        self.eps = eps

    def scales(self, w: torch.Tensor, c_hat: torch.Tensor, key: KeySchedule) -> tuple[torch.Tensor, torch.Tensor]:
        style = self.style_affine(w)
        if self.class_affine is None:
            return style, torch.ones_like(style)
        return style, apply_key(key, self.resolution, self.class_affine(c_hat))

    def effective_weights(self, w: torch.Tensor, c_hat: torch.Tensor, key: KeySchedule) -> torch.Tensor:
        style, class_scale = self.scales(w, c_hat, key)
        return modulate_demodulate(self.weight * self.weight_gain, style, class_scale, self.eps, self.demodulate)

    def forward(self, x: torch.Tensor, w: torch.Tensor, c_hat: torch.Tensor, key: KeySchedule) -> torch.Tensor:
        return modulated_conv2d(x, self.effective_weights(w, c_hat, key), self.padding)


class SynthesisLayer(nn.Module):
    def __init__(self, in_channels: int, out_channels: int, w_dim: int, c_dim: int, resolution: int,
                 eps: float = 1e-8):
        super().__init__()
        self.conv = ModulatedConv(in_channels, out_channels, 3, w_dim, c_dim, resolution, eps=eps)
        self.noise_strength = nn.Parameter(torch.zeros([]))
        self.bias = nn.Parameter(torch.zeros(out_channels))
        self.resolution = resolution

    def forward(self, x: torch.Tensor, w: torch.Tensor, c_hat: torch.Tensor, key: KeySchedule,
                noise: torch.Tensor | None = None) -> torch.Tensor:
        x = self.conv(x, w, c_hat, key)
        if noise is not None:
            x = x + noise * self.noise_strength
        return F.leaky_relu(x + self.bias.view(1, -1, 1, 1), 0.2) * math.sqrt(2)


class ToRGB(nn.Module):
    def __init__(self, in_channels: int, w_dim: int, c_dim: int, resolution: int, use_class: bool):
        super().__init__()
        self.conv = ModulatedConv(in_channels, 3, 1, w_dim, c_dim, resolution, demodulate=False,
                                  use_class=use_class)
        self.bias = nn.Parameter(torch.zeros(3))

    def forward(self, x, w, c_hat, key):
        return self.conv(x, w, c_hat, key) + self.bias.view(1, -1, 1, 1)


class SynthesisBlock(nn.Module):
    """Two modulated 3x3 convs at one resolution plus a toRGB skip output."""

    def __init__(self, in_channels: int, out_channels: int, resolution: int, cfg: GeneratorConfig):
        super().__init__()
        self.resolution = resolution
        if resolution == 4:
            self.const = nn.Parameter(torch.randn(out_channels, 4, 4))
            in_channels = out_channels
        self.conv0 = SynthesisLayer(in_channels, out_channels, cfg.w_dim, cfg.c_dim, resolution, cfg.eps)
        self.conv1 = SynthesisLayer(out_channels, out_channels, cfg.w_dim, cfg.c_dim, resolution, cfg.eps)
        self.torgb = ToRGB(out_channels, cfg.w_dim, cfg.c_dim, resolution, cfg.class_mod_torgb)

    def forward(self, x, img, w, c_hat, key, noise_gen: torch.Generator | None):
        if self.resolution == 4:
            x = self.const.unsqueeze(0).expand(w.shape[0], -1, -1, -1)
        else:
            x = F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)
        for layer in (self.conv0, self.conv1):
            noise = None
            if noise_gen is not None:
                r = self.resolution
                noise = torch.randn(1, 1, r, r, generator=noise_gen, dtype=w.dtype)
            x = layer(x, w, c_hat, key, noise)
        y = self.torgb(x, w, c_hat, key)
        if img is not None:
            y = y + F.interpolate(img, scale_factor=2, mode="bilinear", align_corners=False)
        return x, y


class Generator(nn.Module):
    def __init__(self, cfg: GeneratorConfig):
        super().__init__()
        self.cfg = cfg
        self.mapping = MappingNetwork(cfg.latent_dim, cfg.w_dim, cfg.mapping_layers, cfg.mapping_lr_mul)
        self.class_mapping = MappingNetwork(cfg.feature_dim, cfg.c_dim, cfg.class_mapping_layers,
                                            cfg.mapping_lr_mul, normalize_input=cfg.normalize_class_input)
        blocks = []
        in_ch = 0
        for res in cfg.resolutions:
            blocks.append(SynthesisBlock(in_ch, cfg.channels[res], res, cfg))
            in_ch = cfg.channels[res]
        self.blocks = nn.ModuleList(blocks)
        if not self.class_mapping.num_layers < self.mapping.num_layers:
            raise ValueError("class mapping network must be shallower than the latent mapping network")

    @property
    def key(self) -> KeySchedule:
        return self.cfg.key

    def map_latent(self, z: torch.Tensor) -> torch.Tensor:
        return self.mapping(z)

    def map_class(self, c_m: torch.Tensor) -> torch.Tensor:
        if c_m.shape[-1] != self.cfg.feature_dim:
            raise ValueError(f"class embedding has {c_m.shape[-1]} entries, expected {self.cfg.feature_dim}")
        return self.class_mapping(c_m)

    def synthesize(self, w: torch.Tensor, c_hat: torch.Tensor, noise_seed: int | None = None) -> torch.Tensor:
        """Render ``[B, 3, R, R]`` from one ``w [B, w_dim]`` and ``c_hat [B, c_dim]`` per sample.

        Noise maps are drawn from ``noise_seed`` and shared across the batch;
        ``None`` disables noise.
        """
        if w.dim() != 2:
            raise ValueError("synthesis takes exactly one w per sample, shape [B, w_dim]")
        noise_gen = torch.Generator().manual_seed(int(noise_seed)) if noise_seed is not None else None
        x = img = None
        for block in self.blocks:
            x, img = block(x, img, w, c_hat, self.key, noise_gen)
        return img

    def generate(self, z: torch.Tensor, c_m: torch.Tensor, noise_seed: int | None = None) -> torch.Tensor:
        if c_m.dim() == 1:
            c_m = c_m.expand(z.shape[0], -1)
        return self.synthesize(self.map_latent(z), self.map_class(c_m), noise_seed)

    forward = generate

    def interpolate(self, endpoint_a: tuple[torch.Tensor, torch.Tensor],
                    endpoint_b: tuple[torch.Tensor, torch.Tensor], steps: int,
                    noise_seed: int | None = None) -> torch.Tensor:
        """Frames along a straight line in W (latent) and in C (class, after ``f_c``).

        Endpoints are ``(z [latent_dim], c_m [feature_dim])`` pairs. Each frame
        is rendered on its own so the end frames equal :meth:`generate` exactly.
        """
        if steps < 2:
            raise ValueError("interpolation needs at least 2 steps")
        (za, ca), (zb, cb) = endpoint_a, endpoint_b
        wa, wb = self.map_latent(za.reshape(1, -1)), self.map_latent(zb.reshape(1, -1))
        ha, hb = self.map_class(ca.reshape(1, -1)), self.map_class(cb.reshape(1, -1))
        frames = []
        for t in torch.linspace(0.0, 1.0, steps).tolist():
            frames.append(self.synthesize(torch.lerp(wa, wb, t), torch.lerp(ha, hb, t), noise_seed))
        return torch.cat(frames)

    def synthesis_layers(self) -> list[SynthesisLayer]:
        return [layer for block in self.blocks for layer in (block.conv0, block.conv1)]


def map_latent(generator: Generator, z: torch.Tensor) -> torch.Tensor:
    return generator.map_latent(z)


def map_class(generator: Generator, c_m: torch.Tensor) -> torch.Tensor:
    return generator.map_class(c_m)


def synthesize(generator: Generator, w: torch.Tensor, c_hat: torch.Tensor, noise_seed: int | None = None):
    return generator.synthesize(w, c_hat, noise_seed)


def generate(generator: Generator, z: torch.Tensor, c_m: torch.Tensor, noise_seed: int | None = None):
    return generator.generate(z, c_m, noise_seed)
