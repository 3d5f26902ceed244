"""FID, intra-cluster LPIPS diversity, and LPIPS-based EMD domain gap."""

from __future__ import annotations

import csv
import io
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .embedding import load_weights_module

PSD_TOLERANCE = 1e-6


class MetricError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Frechet distance


@dataclass
class GaussianStats:
    mean: np.ndarray
    cov: np.ndarray
    sample_count: int

    def __post_init__(self) -> None:
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.cov = np.atleast_2d(np.asarray(self.cov, dtype=np.float64))
        if self.cov.shape != (self.mean.size, self.mean.size):
            raise MetricError(f"covariance shape {self.cov.shape} does not match mean size {self.mean.size}")


def _psd_eigh(matrix: np.ndarray, what: str) -> tuple[np.ndarray, np.ndarray]:
    vals, vecs = np.linalg.eigh(0.5 * (matrix + matrix.T))
    if vals.size and vals.min() < -PSD_TOLERANCE:
        raise MetricError(f"{what} is not positive semidefinite: most negative eigenvalue {vals.min():.6g}")
    return np.clip(vals, 0.0, None), vecs


def frechet_distance(a: GaussianStats, b: GaussianStats) -> float:
    """``||mu_a - mu_b||^2 + Tr(S_a + S_b - 2 (S_a S_b)^{1/2})``.

    The trace of the product's square root is taken from the symmetric form
    ``S_a^{1/2} S_b S_a^{1/2}``, which has the same eigenvalues.
    """
    if a.mean.shape != b.mean.shape:
        raise MetricError(f"dimension mismatch: {a.mean.size} vs {b.mean.size}")
    vals_a, vecs_a = _psd_eigh(a.cov, "first covariance")
    _psd_eigh(b.cov, "second covariance")
    sqrt_a = (vecs_a * np.sqrt(vals_a)) @ vecs_a.T
    inner, _ = _psd_eigh(sqrt_a @ b.cov @ sqrt_a, "covariance product")
    diff = a.mean - b.mean
    value = diff @ diff + np.trace(a.cov) + np.trace(b.cov) - 2.0 * np.sqrt(inner).sum()
    return float(max(value, 0.0))


class RunningStats:
    """Streaming mean/covariance (pairwise merge of per-batch moments)."""

    def __init__(self) -> None:
        self.n = 0
        self.mean: np.ndarray | None = None
        self.m2: np.ndarray | None = None

    def update(self, features: np.ndarray) -> None:
        x = np.asarray(features, dtype=np.float64)
        if x.ndim != 2 or len(x) == 0:
            return
        n_b = len(x)
        mean_b = x.mean(axis=0)
        centered = x - mean_b
        m2_b = centered.T @ centered
        if self.n == 0:
            self.n, self.mean, self.m2 = n_b, mean_b, m2_b
            return
        n = self.n + n_b
        delta = mean_b - self.mean
        self.mean = self.mean + delta * (n_b / n)
        self.m2 = self.m2 + m2_b + np.outer(delta, delta) * (self.n * n_b / n)
        self.n = n

    def finalize(self) -> GaussianStats:
        if self.n < 2:
            raise MetricError(f"need at least 2 images for feature statistics, got {self.n}")
        return GaussianStats(self.mean.copy(), self.m2 / (self.n - 1), self.n)


def corpus_stats(images: torch.Tensor | Iterable[torch.Tensor], encoder: Callable[[torch.Tensor], torch.Tensor],
                 batch_size: int = 64) -> GaussianStats:
    """Mean and unbiased covariance of encoder features over an image set.

    ``images`` is a ``[N, 3, R, R]`` tensor or an iterable of such batches.
    """
    if isinstance(images, torch.Tensor):
        images = [images[i:i + batch_size] for i in range(0, len(images), batch_size)]
    stats = RunningStats()
    with torch.no_grad():
        for batch in images:
            stats.update(encoder(batch).double().numpy())
    return stats.finalize()


def fid(generated: torch.Tensor, reference: torch.Tensor, encoder, batch_size: int = 64) -> float:
    return frechet_distance(corpus_stats(generated, encoder, batch_size), corpus_stats(reference, encoder, batch_size))


# ---------------------------------------------------------------------------
# Perceptual distance


class StubFeatureStack:
    """Fixed random conv stack with three feature levels (full, 1/2, 1/4 resolution)."""

    def __init__(self, seed: int = 0, widths: Sequence[int] = (16, 32, 64)):
        g = torch.Generator().manual_seed(seed)
        self.name = f"stub-lpips:{seed}"
        self.weights = []
        in_ch = 3
        for width in widths:
            fan_in = in_ch * 9
            self.weights.append(torch.randn(width, in_ch, 3, 3, generator=g) * (2.0 / fan_in) ** 0.5)
            in_ch = width

    def __call__(self, images: torch.Tensor) -> list[torch.Tensor]:
        feats = []
        x = images
        for level, weight in enumerate(self.weights):
            if level:
                x = F.avg_pool2d(x, 2)
            x = F.relu(F.conv2d(x, weight.to(x.dtype), padding=1))
            feats.append(x)
        return feats


class WeightsFeatureStack:
    """Multi-level feature extractor loaded from disk (returns a list of maps)."""

    def __init__(self, path: str | Path):
        self.module = load_weights_module(path)
        self.name = f"weights:{Path(path).name}"

    def __call__(self, images: torch.Tensor) -> list[torch.Tensor]:
        return list(self.module(images))


def _unit_normalize(f: torch.Tensor, eps: float = 1e-10) -> torch.Tensor:
    return f / (f.square().sum(dim=1, keepdim=True).sqrt() + eps)


class PerceptualDistance:
    """LPIPS-style distance over a feature stack.

    Per level: channel-unit-normalize, squared difference weighted per channel
    (uniform unless ``channel_weights`` is given), averaged over space; levels
    are summed.
    """

    def __init__(self, feature_stack: Callable[[torch.Tensor], list[torch.Tensor]] | None = None,
                 channel_weights: Sequence[torch.Tensor] | None = None, batch_size: int = 64):
        self.feature_stack = feature_stack or StubFeatureStack()
        self.channel_weights = channel_weights
        self.batch_size = batch_size
        self.name = getattr(self.feature_stack, "name", type(self.feature_stack).__name__)

    def features(self, images: torch.Tensor) -> list[torch.Tensor]:
        out = None
        with torch.no_grad():
            for start in range(0, len(images), self.batch_size):
                feats = [_unit_normalize(f) for f in self.feature_stack(images[start:start + self.batch_size])]
                out = [[f] for f in feats] if out is None else [o + [f] for o, f in zip(out, feats)]
        return [torch.cat(level) for level in out]

    def _distance(self, fa: list[torch.Tensor], fb: list[torch.Tensor]) -> torch.Tensor:
        """Distances between broadcast-compatible feature batches."""
        total = None
        for level, (a, b) in enumerate(zip(fa, fb)):
            diff = (a - b).square()
            if self.channel_weights is not None:
                diff = diff * self.channel_weights[level].to(diff.dtype).view(1, -1, 1, 1)
            term = diff.sum(dim=1).mean(dim=(1, 2)).double()
            total = term if total is None else total + term
        return total

    def matrix_from_features(self, fa: list[torch.Tensor], fb: list[torch.Tensor]) -> np.ndarray:
        rows = [self._distance([f[i:i + 1] for f in fa], fb) for i in range(len(fa[0]))]
        return torch.stack(rows).numpy()

    def matrix(self, a: torch.Tensor, b: torch.Tensor) -> np.ndarray:
        """Distance matrix ``[len(a), len(b)]`` (float64)."""
        return self.matrix_from_features(self.features(a), self.features(b))

    def __call__(self, a: torch.Tensor, b: torch.Tensor) -> np.ndarray:
        """Distances of aligned pairs ``a[i], b[i]``."""
        return self._distance(self.features(a), self.features(b)).numpy()


def load_perceptual_distance(spec: str) -> PerceptualDistance:
    kind, _, arg = spec.partition(":")
    if kind == "stub":
        return PerceptualDistance(StubFeatureStack(int(arg) if arg else 0))
    if kind == "weights" and arg:
        return PerceptualDistance(WeightsFeatureStack(arg))
    raise ValueError(f"unknown perceptual distance spec {spec!r}")


# ---------------------------------------------------------------------------
# Intra-cluster LPIPS


@dataclass
class IntraLPIPSResult:
    value: float
    assignments: np.ndarray
    cluster_scores: dict[int, float]
    # clusters with a single member: scored 0, no pairwise distance exists
    singleton_clusters: list[int] = field(default_factory=list)


def assign_clusters(to_training: np.ndarray) -> np.ndarray:
    """Nearest training image per generated image; ties go to the lowest index."""
    return np.argmin(np.asarray(to_training), axis=1)


def intra_lpips_from_distances(to_training: np.ndarray, pairwise: np.ndarray | Callable[[np.ndarray], np.ndarray],
                               mode: str = "pairwise") -> IntraLPIPSResult:
    """Cluster-mean diversity from precomputed distances.

    ``to_training`` is ``[G, k]``; ``pairwise`` is the ``[G, G]`` generated
    distance matrix, or a callable returning the sub-matrix for an index array.
    ``mode="to_training"`` scores clusters by member-to-center distance instead.
    """
    to_training = np.asarray(to_training, dtype=np.float64)
    if to_training.shape[0] == 0:
        raise MetricError("no generated images")
    assignments = assign_clusters(to_training)
    scores: dict[int, float] = {}
    singletons = []
    for cluster in np.unique(assignments):
        members = np.flatnonzero(assignments == cluster)
        if mode == "to_training":
            scores[int(cluster)] = float(to_training[members, cluster].mean())
            continue
        if len(members) < 2:
            scores[int(cluster)] = 0.0
            singletons.append(int(cluster))
            continue
        sub = pairwise(members) if callable(pairwise) else np.asarray(pairwise)[np.ix_(members, members)]
        iu = np.triu_indices(len(members), k=1)
        scores[int(cluster)] = float(sub[iu].mean())
    value = float(np.mean(list(scores.values())))
    return IntraLPIPSResult(value, assignments, scores, singletons)


def intra_lpips_details(generated: torch.Tensor, training: torch.Tensor, dist: PerceptualDistance,
                        mode: str = "pairwise") -> IntraLPIPSResult:
    if len(generated) == 0:
        raise MetricError("no generated images")
    if len(training) == 0:
        raise MetricError("no training images")
    fg, ft = dist.features(generated), dist.features(training)
    to_training = dist.matrix_from_features(fg, ft)

    def pairwise(idx: np.ndarray) -> np.ndarray:
        sub = [f[torch.from_numpy(idx)] for f in fg]
        return dist.matrix_from_features(sub, sub)

    return intra_lpips_from_distances(to_training, pairwise, mode)


def intra_lpips(generated: torch.Tensor, training: torch.Tensor, dist: PerceptualDistance,
                mode: str = "pairwise") -> float:
    return intra_lpips_details(generated, training, dist, mode).value


# ---------------------------------------------------------------------------
# LPIPS-EMD


def emd_from_matrix(cost: np.ndarray, directional: bool = False) -> float:
    """``max(mean_i min_j C_ij, mean_j min_i C_ij)``; source-side term only if directional."""
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2 or 0 in cost.shape:
        raise MetricError(f"cost matrix must be non-empty 2-D, got shape {cost.shape}")
    source_term = float(cost.min(axis=1).mean())
    if directional:
        return source_term
    return max(source_term, float(cost.min(axis=0).mean()))


def lpips_emd(source: torch.Tensor, target: torch.Tensor, dist: PerceptualDistance,
              directional: bool = False, return_matrix: bool = False):
    cost = dist.matrix(source, target)
    value = emd_from_matrix(cost, directional)
    return (value, cost) if return_matrix else value


# ---------------------------------------------------------------------------
# Reports


@dataclass
class MetricReport:
    metric: str
    value: float
    n_generated: int
    n_reference: int
    encoder: str
    seed: int | None = None
    config: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        if not np.isfinite(self.value) or self.value < 0:
            raise MetricError(f"{self.metric} value {self.value} is not a finite non-negative number")

    FIELDS = ("metric", "value", "n_generated", "n_reference", "encoder", "seed", "config")

    def csv_row(self) -> dict:
        row = asdict(self)
        row["value"] = repr(float(self.value))
        row["config"] = ";".join(f"{k}={v}" for k, v in sorted(self.config.items()))
        row["seed"] = "" if self.seed is None else self.seed
        return row

    def to_csv(self, header: bool = True) -> str:
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=self.FIELDS, lineterminator="\n")
        if header:
            writer.writeheader()
        writer.writerow(self.csv_row())
        return buf.getvalue()

    def append_csv(self, path: str | Path) -> None:
        path = Path(path)
        new = not path.exists() or path.stat().st_size == 0
        with path.open("a", newline="") as f:
            f.write(self.to_csv(header=new))

    def text(self) -> str:
        lines = [f"{self.metric}: {self.value:.6f}",
                 f"  generated/source images: {self.n_generated}",
                 f"  reference/target images: {self.n_reference}",
                 f"  encoder: {self.encoder}"]
        if self.seed is not None:
            lines.append(f"  seed: {self.seed}")
        lines.extend(f"  {k}: {v}" for k, v in sorted(self.config.items()))
        return "\n".join(lines)
