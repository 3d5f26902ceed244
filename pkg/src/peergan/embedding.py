"""Pretrained-encoder interfaces and per-class mean embeddings.

Real VGG/CLIP weights plug in through :class:`WeightsEncoder`; the
deterministic stubs here keep every pipeline stage runnable offline.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Protocol

import torch
import torch.nn.functional as F
from safetensors import SafetensorError
from safetensors.torch import load_file, save_file

CACHE_FORMAT = "peergan-embeddings"


class EmbeddingCacheError(ValueError):
    pass


class ImageFeatureEncoder(Protocol):
    name: str
    feature_dim: int

    def __call__(self, images: torch.Tensor) -> torch.Tensor: ...


class StubFeatureEncoder:
    """Fixed random linear encoder: 8x8 average pooling then a seeded projection.

    Linear and bias-free, so the encoder of a mean image is the mean of the
    encodings. Computes in the dtype of its input.
    """

    def __init__(self, seed: int = 0, feature_dim: int = 512, grid: int = 8):
        self.seed = seed
        self.feature_dim = feature_dim
        self.grid = grid
        self.name = f"stub:{seed}:{feature_dim}"
        fan_in = 3 * grid * grid
        g = torch.Generator().manual_seed(seed)
        self.projection = torch.randn(feature_dim, fan_in, generator=g, dtype=torch.float64) / fan_in ** 0.5

    def __call__(self, images: torch.Tensor) -> torch.Tensor:
        pooled = F.adaptive_avg_pool2d(images, self.grid).flatten(1)
        return pooled @ self.projection.to(images.dtype).T


def stub_feature_encoder(seed: int = 0, feature_dim: int = 512) -> StubFeatureEncoder:
    return StubFeatureEncoder(seed, feature_dim)


def load_weights_module(path: str | Path):
    """Load a serialized network: ``.pt2`` via ``torch.export``, anything else as TorchScript."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"weights file {path} not found")
    if path.suffix == ".pt2":
        return torch.export.load(str(path)).module()
    return torch.jit.load(str(path), map_location="cpu").eval()


class WeightsEncoder:
    """Image encoder loaded from disk, mapping ``[B,3,R,R]`` in [-1,1] to ``[B,D]``.

    This is the extension point for real pretrained networks (e.g. a VGG-19
    trunk saved with ``torch.export`` as ``.pt2`` or as TorchScript). The
    module may define a string attribute ``layer`` naming the tapped layer; it
    is recorded in cache metadata.
    """

    def __init__(self, path: str | Path, probe_resolution: int = 32):
        self.path = Path(path)
        self.module = load_weights_module(self.path)
        self.layer = str(getattr(self.module, "layer", "unspecified"))
        self.name = f"weights:{self.path.name}:{self.layer}"
        with torch.no_grad():
            probe = self.module(torch.zeros(1, 3, probe_resolution, probe_resolution))
        self.feature_dim = int(probe.reshape(1, -1).shape[1])

    def __call__(self, images: torch.Tensor) -> torch.Tensor:
        return self.module(images).reshape(images.shape[0], -1)


def load_encoder(spec: str, feature_dim: int = 512, resolution: int = 32) -> ImageFeatureEncoder:
    """Parse ``stub``, ``stub:<seed>`` or ``weights:<path>`` (probed at ``resolution``)."""
    kind, _, arg = spec.partition(":")
    if kind == "stub":
        return StubFeatureEncoder(int(arg) if arg else 0, feature_dim)
    if kind == "weights" and arg:
        return WeightsEncoder(arg, resolution)
    raise ValueError(f"unknown encoder spec {spec!r} (expected stub, stub:<seed> or weights:<path>)")


# ---------------------------------------------------------------------------
# Direction encoders (image/text pair for the direction loss)


class HashedTextEncoder:
    """Deterministic text embedding from signed hashed character trigrams."""

    def __init__(self, dim: int = 64, salt: str = ""):
        self.dim = dim
        self.salt = salt

    def __call__(self, text: str) -> torch.Tensor:
        padded = f"  {text.lower().strip()}  "
        vec = torch.zeros(self.dim, dtype=torch.float64)
        for i in range(len(padded) - 2):
            digest = hashlib.sha256((self.salt + padded[i:i + 3]).encode()).digest()
            bucket = int.from_bytes(digest[:4], "little") % self.dim
            vec[bucket] += 1.0 if digest[4] & 1 else -1.0
        return vec.float()


@dataclass
class DirectionEncoderPair:
    image_encode: Callable[[torch.Tensor], torch.Tensor]
    text_encode: Callable[[str], torch.Tensor]
    dim: int
    name: str = "custom"

    def __post_init__(self) -> None:
        if self.dim < 1:
            raise ValueError("embedding dim must be positive")


def stub_direction_encoders(seed: int = 1, dim: int = 64) -> DirectionEncoderPair:
    image = StubFeatureEncoder(seed, dim)
    return DirectionEncoderPair(image, HashedTextEncoder(dim, salt=str(seed)), dim, name=f"stub:{seed}:{dim}")


def load_direction_encoders(spec: str, dim: int = 64, resolution: int = 32) -> DirectionEncoderPair:
    """``stub``/``stub:<seed>`` or ``weights:<image.pt>,<prompts.json>``.

    The JSON file maps prompt text to a precomputed text embedding (for CLIP,
    the text tower output); the weights file (.pt2 or TorchScript) encodes images.
    """
    kind, _, arg = spec.partition(":")
    if kind == "stub":
        return stub_direction_encoders(int(arg) if arg else 1, dim)
    if kind == "weights" and "," in arg:
        image_path, table_path = arg.split(",", 1)
        image = WeightsEncoder(image_path, resolution)
        table = {k: torch.tensor(v, dtype=torch.float32) for k, v in json.loads(Path(table_path).read_text()).items()}

        def text_encode(text: str) -> torch.Tensor:
            if text not in table:
                raise KeyError(f"prompt {text!r} missing from {table_path}")
            return table[text]

        return DirectionEncoderPair(image, text_encode, image.feature_dim, name=f"weights:{Path(image_path).name}")
    raise ValueError(f"unknown direction encoder spec {spec!r}")


# ---------------------------------------------------------------------------
# Class embeddings


@dataclass
class ClassEmbedding:
    class_id: int
    vector: torch.Tensor
    source_encoder: str
    num_images_averaged: int


def compute_class_embedding(encoder: ImageFeatureEncoder, dataset, class_id: int,
                            batch_size: int = 64) -> ClassEmbedding:
    """Mean encoder feature over every image of ``class_id``.

    Features are accumulated in float64 so the batch split cannot move the
    mean by more than float32 rounding.
    """
    images = dataset.class_images(class_id)
    if len(images) == 0:
        raise ValueError(f"class {class_id} has no images")
    total = None
    with torch.no_grad():
        for start in range(0, len(images), batch_size):
            feats = encoder(images[start:start + batch_size]).double().sum(0)
            total = feats if total is None else total + feats
    mean = (total / len(images)).float()
    if not torch.isfinite(mean).all():
        raise ValueError(f"non-finite embedding for class {class_id}")
    return ClassEmbedding(class_id, mean, encoder.name, len(images))


def compute_class_embeddings(encoder: ImageFeatureEncoder, dataset, batch_size: int = 64) -> list[ClassEmbedding]:
    return [compute_class_embedding(encoder, dataset, c.class_id, batch_size) for c in dataset.classes]


def stack_embeddings(embeddings: list[ClassEmbedding]) -> torch.Tensor:
    return torch.stack([e.vector for e in sorted(embeddings, key=lambda e: e.class_id)])


def cache_embeddings(path: str | Path, embeddings: list[ClassEmbedding], dataset_fingerprint: str) -> None:
    """Write embeddings to a safetensors file, atomically."""
    embeddings = sorted(embeddings, key=lambda e: e.class_id)
    encoders = {e.source_encoder for e in embeddings}
    if len(encoders) != 1:
        raise ValueError(f"embeddings come from several encoders: {sorted(encoders)}")
    tensors = {f"class_{e.class_id:03d}": e.vector.detach().float().contiguous() for e in embeddings}
    metadata = {
        "format": CACHE_FORMAT,
        "encoder": encoders.pop(),
        "feature_dim": str(embeddings[0].vector.numel()),
        "dataset_fingerprint": dataset_fingerprint,
        "class_ids": ",".join(str(e.class_id) for e in embeddings),
        "num_images": ",".join(str(e.num_images_averaged) for e in embeddings),
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    save_file(tensors, str(tmp), metadata=metadata)
    os.replace(tmp, path)


def read_cache_metadata(path: str | Path) -> dict[str, str]:
    from safetensors import safe_open

    try:
        with safe_open(str(path), framework="pt") as f:
            return dict(f.metadata() or {})
    except (SafetensorError, OSError, ValueError) as exc:
        raise EmbeddingCacheError(f"corrupt embedding cache {path}: {exc}") from exc


def load_cached_embeddings(path: str | Path, dataset_fingerprint: str | None = None) -> list[ClassEmbedding]:
    """Read a cache; refuse it when ``dataset_fingerprint`` is given and differs."""
    meta = read_cache_metadata(path)
    if meta.get("format") != CACHE_FORMAT:
        raise EmbeddingCacheError(f"{path} is not an embedding cache")
    if dataset_fingerprint is not None and meta["dataset_fingerprint"] != dataset_fingerprint:
        raise EmbeddingCacheError(
            f"embedding cache {path} was built for dataset {meta['dataset_fingerprint'][:12]}..., "
            f"current dataset is {dataset_fingerprint[:12]}...")
    try:
        tensors = load_file(str(path))
    except (SafetensorError, OSError, ValueError) as exc:
        raise EmbeddingCacheError(f"corrupt embedding cache {path}: {exc}") from exc
    ids = [int(i) for i in meta["class_ids"].split(",")]
    counts = [int(n) for n in meta["num_images"].split(",")]
    return [ClassEmbedding(i, tensors[f"class_{i:03d}"], meta["encoder"], n) for i, n in zip(ids, counts)]
