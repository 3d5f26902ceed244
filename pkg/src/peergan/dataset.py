"""Unbalanced peer/target image corpus, minibatch sampling and augmentation."""

from __future__ import annotations

import hashlib
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image, UnidentifiedImageError

log = logging.getLogger(__name__)

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg")
AUGMENT_OPS = ("hflip", "translate", "color", "cutout")


class DatasetError(ValueError):
    """Raised for malformed corpus directories or undecodable images."""


@dataclass
class ClassInfo:
    class_id: int
    name: str
    image_paths: list[str]
    is_target: bool = False

    @property
    def count(self) -> int:
        return len(self.image_paths)


@dataclass
class UnbalancedDataset:
    """Two-class corpus: one large peer class (id 0) and one few-shot target class.

    ``images`` holds every decoded image as float32 in [-1, 1], shape
    ``[N, 3, R, R]``; ``labels`` holds the class id of each row.
    """

    classes: list[ClassInfo]
    images: torch.Tensor
    labels: torch.Tensor
    resolution: int
    text_labels: tuple[str, str] = ("peer", "target")
    channel_count: int = 3

    def __post_init__(self) -> None:
        if len(self.classes) < 2:
            raise DatasetError("dataset needs at least 2 classes")
        if [c.class_id for c in self.classes] != list(range(len(self.classes))):
            raise DatasetError("class ids must be dense integers starting at 0")
        if sum(c.is_target for c in self.classes) != 1:
            raise DatasetError("exactly one class must be marked as target")
        _check_resolution(self.resolution)
        if self.images.shape[1:] != (3, self.resolution, self.resolution):
            raise DatasetError(f"images have shape {tuple(self.images.shape)}, expected [N, 3, {self.resolution}, {self.resolution}]")
        counts = torch.bincount(self.labels, minlength=len(self.classes)).tolist()
        if counts != [c.count for c in self.classes]:
            raise DatasetError(f"label counts {counts} disagree with class lists")
        if self.target.count > self.peer.count:
            log.warning("target class (%d images) is larger than peer class (%d images)", self.target.count, self.peer.count)

    @property
    def peer(self) -> ClassInfo:
        return self.classes[0]

    @property
    def target(self) -> ClassInfo:
        return next(c for c in self.classes if c.is_target)

    @property
    def target_class_id(self) -> int:
        return self.target.class_id

    @property
    def counts(self) -> tuple[int, ...]:
        return tuple(c.count for c in self.classes)

    @property
    def num_classes(self) -> int:
        return len(self.classes)

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    def class_indices(self, class_id: int) -> torch.Tensor:
        return torch.nonzero(self.labels == class_id).flatten()

    def class_images(self, class_id: int) -> torch.Tensor:
        return self.images[self.class_indices(class_id)]

    def fingerprint(self) -> str:
        """Content hash of the sorted (class, file) list."""
        entries = sorted(f"{c.class_id}:{p}" for c in self.classes for p in c.image_paths)
        return hashlib.sha256("\n".join(entries).encode()).hexdigest()

    @classmethod
    def from_arrays(cls, peer: torch.Tensor, target: torch.Tensor,
                    text_labels: tuple[str, str] = ("peer", "target")) -> "UnbalancedDataset":
        """Build a dataset from in-memory image tensors (already in [-1, 1])."""
        peer_paths = [f"<memory>/peer/{i:06d}" for i in range(len(peer))]
        target_paths = [f"<memory>/target/{i:06d}" for i in range(len(target))]
        classes = [ClassInfo(0, "peer", peer_paths), ClassInfo(1, "target", target_paths, is_target=True)]
        images = torch.cat([peer, target]).float().contiguous()
        labels = torch.cat([torch.zeros(len(peer), dtype=torch.long), torch.ones(len(target), dtype=torch.long)])
        return cls(classes, images, labels, int(peer.shape[-1]), text_labels)


def _check_resolution(resolution: int) -> None:
    if resolution < 8 or resolution & (resolution - 1):
        raise DatasetError(f"resolution must be a power of two >= 8, got {resolution}")


def center_crop_resize(pixels: np.ndarray, resolution: int) -> torch.Tensor:
    """Center-crop an HxWx3 uint8 array to a square and bilinearly resize it.

    Returns float32 ``[3, R, R]`` mapped to [-1, 1]. Half-pixel centers;
    downsampling uses an antialiased (triangle) filter.
    """
    h, w = pixels.shape[:2]
    side = min(h, w)
    top, left = (h - side) // 2, (w - side) // 2
    square = pixels[top:top + side, left:left + side]
    x = torch.from_numpy(np.array(square, copy=True)).permute(2, 0, 1).float()[None]
    if side != resolution:
        x = F.interpolate(x, size=(resolution, resolution), mode="bilinear", align_corners=False, antialias=True)
    return (x[0] / 127.5 - 1.0).clamp(-1.0, 1.0)


def decode_image(path: Path, resolution: int) -> torch.Tensor:
    try:
        with Image.open(path) as img:
            pixels = np.asarray(img.convert("RGB"), dtype=np.uint8)
    except (UnidentifiedImageError, OSError) as exc:
        raise DatasetError(f"cannot decode image {path}: {exc}") from exc
    return center_crop_resize(pixels, resolution)


def list_images(directory: Path) -> list[Path]:
    return sorted(p for p in directory.iterdir() if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES)


def load_image_dir(directory: str | Path, resolution: int) -> torch.Tensor:
    """Decode every image of a flat directory into ``[N, 3, R, R]``."""
    directory = Path(directory)
    if not directory.is_dir():
        raise DatasetError(f"not a directory: {directory}")
    paths = list_images(directory)
    if not paths:
        raise DatasetError(f"no images in {directory}")
    return torch.stack([decode_image(p, resolution) for p in paths])


def load_dataset(root: str | Path, resolution: int, peer_size: int | None = None,
                 seed: int = 0) -> UnbalancedDataset:
    """Load ``root/peer`` and ``root/target`` into an :class:`UnbalancedDataset`.

    ``peer_size`` caps the peer class to a seeded random subset of that many
    images. ``root/labels.txt`` (optional) gives the peer prompt on line 1 and
    the target prompt on line 2.
    """
    root = Path(root)
    _check_resolution(resolution)
    class_paths = []
    for name in ("peer", "target"):
        sub = root / name
        if not sub.is_dir():
            raise DatasetError(f"missing subdirectory {sub}")
        paths = list_images(sub)
        if not paths:
            raise DatasetError(f"{name} class has no images")
        class_paths.append(paths)

    if peer_size is not None:
        if peer_size < 1:
            raise DatasetError(f"peer_size must be >= 1, got {peer_size}")
        if peer_size < len(class_paths[0]):
            keep = np.sort(np.random.default_rng(seed).choice(len(class_paths[0]), peer_size, replace=False))
            class_paths[0] = [class_paths[0][i] for i in keep]

    text_labels = ("peer", "target")
    labels_file = root / "labels.txt"
    if labels_file.is_file():
        lines = [ln.strip() for ln in labels_file.read_text().splitlines() if ln.strip()]
        if len(lines) < 2:
            raise DatasetError(f"{labels_file} needs one prompt per class (2 lines)")
        text_labels = (lines[0], lines[1])

    images, labels, classes = [], [], []
    for class_id, (name, paths) in enumerate(zip(("peer", "target"), class_paths)):
        images.extend(decode_image(p, resolution) for p in paths)
        labels.extend([class_id] * len(paths))
        rel = [p.relative_to(root).as_posix() for p in paths]
        classes.append(ClassInfo(class_id, name, rel, is_target=(name == "target")))

    return UnbalancedDataset(classes, torch.stack(images), torch.tensor(labels, dtype=torch.long),
                             resolution, text_labels)


# ---------------------------------------------------------------------------
# Sampling


@dataclass(frozen=True)
class SamplingPolicy:
    mode: str = "uniform"
    target_fraction: float = 0.5
    seed: int = 0

    def __post_init__(self) -> None:
        if self.mode not in ("uniform", "target-oversample"):
            raise ValueError(f"unknown sampling mode {self.mode!r}")
        if self.mode == "target-oversample" and not 0.0 < self.target_fraction < 1.0:
            raise ValueError("target_fraction must lie in (0, 1)")


def sample_indices(dataset: UnbalancedDataset, policy: SamplingPolicy, batch_size: int,
                   step: int = 0) -> np.ndarray:
    """Draw ``batch_size`` row indices; the draw depends only on (policy.seed, step)."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    rng = np.random.default_rng([policy.seed, step])
    if policy.mode == "uniform":
        return rng.integers(0, len(dataset), size=batch_size)
    n_target = int(round(policy.target_fraction * batch_size))
    target_rows = dataset.class_indices(dataset.target_class_id).numpy()
    peer_rows = torch.nonzero(dataset.labels != dataset.target_class_id).flatten().numpy()
    picks = np.concatenate([
        target_rows[rng.integers(0, len(target_rows), size=n_target)],
        peer_rows[rng.integers(0, len(peer_rows), size=batch_size - n_target)],
    ])
    return picks[rng.permutation(batch_size)]


def sample_batch(dataset: UnbalancedDataset, policy: SamplingPolicy, batch_size: int,
                 step: int = 0) -> tuple[torch.Tensor, torch.Tensor]:
    idx = torch.from_numpy(sample_indices(dataset, policy, batch_size, step))
    return dataset.images[idx], dataset.labels[idx]


# ---------------------------------------------------------------------------
# Augmentation


@dataclass
class AugmentationState:
    p: float = 0.0
    enabled_ops: tuple[str, ...] = AUGMENT_OPS
    max_translate: float = 0.125
    cutout_size: float = 0.5

    def __post_init__(self) -> None:
        unknown = set(self.enabled_ops) - set(AUGMENT_OPS)
        if unknown:
            raise ValueError(f"unknown augmentation ops: {sorted(unknown)}")


def translate(images: torch.Tensor, dx: torch.Tensor, dy: torch.Tensor) -> torch.Tensor:
    """Shift each image by integer (dx, dy) pixels, replicating edge pixels.

    Positive ``dx`` moves content right, positive ``dy`` moves it down.
    """
    b, c, h, w = images.shape
    cols = (torch.arange(w)[None, :] - dx.long()[:, None]).clamp(0, w - 1)
    rows = (torch.arange(h)[None, :] - dy.long()[:, None]).clamp(0, h - 1)
    out = images.gather(3, cols[:, None, None, :].expand(b, c, h, w))
    return out.gather(2, rows[:, None, :, None].expand(b, c, h, w))


def augment(images: torch.Tensor, state: AugmentationState, rng_seed: int) -> torch.Tensor:
    """Apply each enabled op to each image independently with probability ``state.p``.

    Random draws are taken for every image and op regardless of ``p`` so the
    decision stream depends only on ``rng_seed``.
    """
    if state.p <= 0:
        return images
    b, _, h, w = images.shape
    g = torch.Generator().manual_seed(int(rng_seed))
    x = images

    def decide() -> torch.Tensor:
        return (torch.rand(b, generator=g) < state.p)[:, None, None, None]

    for op in AUGMENT_OPS:
        if op not in state.enabled_ops:
            continue
        mask = decide()
        if op == "hflip":
            x = torch.where(mask, x.flip(3), x)
        elif op == "translate":
            limit = max(1, int(round(state.max_translate * w)))
            shifts = torch.randint(-limit, limit + 1, (2, b), generator=g) * mask.view(1, b)
            x = translate(x, shifts[0], shifts[1])
        elif op == "color":
            brightness = (torch.rand(b, generator=g) - 0.5) * 0.4
            contrast = torch.exp2(torch.randn(b, generator=g) * 0.5)
            bright = brightness.to(x.dtype)[:, None, None, None]
            cont = contrast.to(x.dtype)[:, None, None, None]
            mean = x.mean(dim=(1, 2, 3), keepdim=True)
            x = torch.where(mask, (x - mean) * cont + mean + bright, x)
        elif op == "cutout":
            size = max(1, int(round(state.cutout_size * h)))
            cy = torch.randint(0, h, (b,), generator=g)
            cx = torch.randint(0, w, (b,), generator=g)
            ys = torch.arange(h)[None, :]
            xs = torch.arange(w)[None, :]
            inside_y = (ys - cy[:, None]).abs() < (size + 1) // 2
            inside_x = (xs - cx[:, None]).abs() < (size + 1) // 2
            hole = (inside_y[:, :, None] & inside_x[:, None, :])[:, None]
            x = torch.where(mask & hole, torch.zeros((), dtype=x.dtype), x)
    return x


def to_uint8(images: torch.Tensor) -> np.ndarray:
    """Map [-1, 1] images ``[B, 3, R, R]`` to uint8 HWC arrays (round half to even)."""
    x = (images.detach().double().clamp(-1, 1) + 1.0) * 127.5
    return torch.round(x).to(torch.uint8).permute(0, 2, 3, 1).numpy()


def save_png(image: torch.Tensor, path: str | Path) -> None:
    Image.fromarray(to_uint8(image[None])[0]).save(path)


def image_grid(images: torch.Tensor, ncols: int) -> torch.Tensor:
    """Tile ``[B, 3, R, R]`` into one ``[3, rows*R, ncols*R]`` image (pad with -1)."""
    b, c, h, w = images.shape
    rows = math.ceil(b / ncols)
    pad = rows * ncols - b
    if pad:
        images = torch.cat([images, images.new_full((pad, c, h, w), -1.0)])
    return images.view(rows, ncols, c, h, w).permute(2, 0, 3, 1, 4).reshape(c, rows * h, ncols * w)


def write_image_dir(images: torch.Tensor, directory: str | Path, start: int = 0) -> list[Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, img in enumerate(images):
        path = directory / f"{start + i:06d}.png"
        save_png(img, path)
        paths.append(path)
    return paths

