"""Acceptance suite: one group of checks per criterion, each at its stated tolerance.

Run with ``pytest tests/test_acceptance.py``; the terminal summary prints one
PASS/FAIL line per criterion.
"""

import itertools
import math
import time

import numpy as np
import pytest
import torch
from conftest import tiny_config, tiny_embeddings

from peergan.adversary import DirectionLossConfig, direction_cosine_loss, direction_loss
from peergan.config import merge, parse_key_string, read_config_file
from peergan.dataset import SamplingPolicy, UnbalancedDataset, load_dataset, sample_indices
from peergan.embedding import (
    DirectionEncoderPair,
    StubFeatureEncoder,
    cache_embeddings,
    compute_class_embedding,
    compute_class_embeddings,
    load_cached_embeddings,
    stub_direction_encoders,
)
from peergan.generator import Generator, GeneratorConfig, KeySchedule, ModulatedConv, modulate_demodulate
from peergan.metrics import GaussianStats, emd_from_matrix, frechet_distance, intra_lpips_from_distances
from peergan.synthetic import make_synthetic_corpus
from peergan.trainer import ConfigError, TrainConfig, Trainer

# ---------------------------------------------------------------------------
# 1. weight modulation / demodulation oracle


def naive_modulate_demodulate(weight, style, class_scale, eps):
    """Scalar loops: w'[o,i,k] = s_i c_i w[o,i,k]; w''[o] = w'[o] / sqrt(sum_{i,k} w'^2 + eps)."""
    out_ch, in_ch, kh, kw = weight.shape
    result = np.zeros((out_ch, in_ch, kh, kw))
    for o in range(out_ch):
        modulated = {}
        total = 0.0
        for i in range(in_ch):
            for y in range(kh):
                for x in range(kw):
                    v = float(style[i]) * float(class_scale[i]) * float(weight[o, i, y, x])
                    modulated[i, y, x] = v
                    total += v * v
        norm = math.sqrt(total + eps)
        for (i, y, x), v in modulated.items():
            result[o, i, y, x] = v / norm
    return result


@pytest.mark.criterion(1, "modulated-conv oracle suite")
def test_criterion_1_modulation_oracle():
    start = time.perf_counter()
    rng = np.random.default_rng(1)
    worst, worst_norm = 0.0, 0.0
    for _ in range(100):
        out_ch, in_ch, k = int(rng.integers(1, 6)), int(rng.integers(1, 6)), int(rng.choice([1, 3]))
        weight = torch.from_numpy(rng.standard_normal((out_ch, in_ch, k, k))).float()
        style = torch.from_numpy(rng.uniform(0.2, 2.0, (1, in_ch)) * rng.choice([-1, 1], (1, in_ch))).float()
        cls = torch.from_numpy(rng.uniform(0.2, 2.0, (1, in_ch))).float()
        got = modulate_demodulate(weight, style, cls, eps=1e-8)[0].double().numpy()
        ref = naive_modulate_demodulate(weight.numpy(), style[0].numpy(), cls[0].numpy(), 1e-8)
        worst = max(worst, float(np.abs(got - ref).max()))
        unit = modulate_demodulate(weight, style, cls, eps=0.0)[0]
        worst_norm = max(worst_norm, float((unit.square().sum(dim=(1, 2, 3)) - 1).abs().max()))
    elapsed = time.perf_counter() - start
    assert worst <= 1e-6, f"max |w'' - oracle| = {worst:.3g}"
    assert worst_norm <= 1e-5, f"max |sum w''^2 - 1| = {worst_norm:.3g}"
    assert elapsed < 5.0, f"took {elapsed:.2f}s"


@pytest.mark.criterion(1, "modulated-conv oracle suite")
def test_criterion_1_layer_uses_joint_demodulation():
    torch.manual_seed(0)
    conv = ModulatedConv(4, 3, 3, w_dim=5, c_dim=6, resolution=4)
    w, c = torch.randn(1, 5), torch.randn(1, 6)
    key = KeySchedule.parse("4")
    style, cls = conv.scales(w, c, key)
    ref = naive_modulate_demodulate((conv.weight * conv.weight_gain).detach().numpy(), style[0].detach().numpy(),
                                    cls[0].detach().numpy(), conv.eps)
    got = conv.effective_weights(w, c, key)[0].detach().double().numpy()
    assert np.abs(got - ref).max() <= 1e-6


# ---------------------------------------------------------------------------
# 2. gradient checks


def rel_error(analytic: torch.Tensor, numeric: torch.Tensor) -> float:
    return float((analytic - numeric).norm() / max(float(numeric.norm()), 1e-30))


def central_difference(fn, x: torch.Tensor, h: float = 1e-5) -> torch.Tensor:
    grad = torch.zeros_like(x)
    flat = x.view(-1)
    for i in range(flat.numel()):
        orig = flat[i].item()
        flat[i] = orig + h
        plus = fn(x).item()
        flat[i] = orig - h
        minus = fn(x).item()
        flat[i] = orig
        grad.view(-1)[i] = (plus - minus) / (2 * h)
    return grad


@pytest.mark.criterion(2, "gradient checks against central differences")
def test_criterion_2_demodulated_conv_gradients():
    start = time.perf_counter()
    g = torch.Generator().manual_seed(0)
    weight = torch.randn(4, 3, 3, 3, generator=g, dtype=torch.float64)
    x = torch.randn(2, 3, 5, 5, generator=g, dtype=torch.float64)
    probe = torch.randn(2, 4, 5, 5, generator=g, dtype=torch.float64)
    style = torch.rand(2, 3, generator=g, dtype=torch.float64) + 0.5
    cls = torch.rand(2, 3, generator=g, dtype=torch.float64) + 0.5

    def objective(s, c):
        w = modulate_demodulate(weight, s, c, eps=1e-8)
        out = torch.nn.functional.conv2d(x.reshape(1, 6, 5, 5), w.reshape(8, 3, 3, 3), padding=1, groups=2)
        return (out.reshape(2, 4, 5, 5) * probe).sum()

    s_var, c_var = style.clone().requires_grad_(True), cls.clone().requires_grad_(True)
    gs, gc = torch.autograd.grad(objective(s_var, c_var), [s_var, c_var])
    with torch.no_grad():
        ns = central_difference(lambda s: objective(s, cls), style.clone())
        nc = central_difference(lambda c: objective(style, c), cls.clone())
    assert rel_error(gs, ns) < 1e-4, rel_error(gs, ns)
    assert rel_error(gc, nc) < 1e-4, rel_error(gc, nc)
    assert time.perf_counter() - start < 30.0


class ToyGenerator(torch.nn.Module):
    """Two parameters (a, b): image = tanh(a * pattern(z) + b * pattern(c_m))."""

    def __init__(self, a: float, b: float):
        super().__init__()
        self.theta = torch.nn.Parameter(torch.tensor([a, b], dtype=torch.float64))
        g = torch.Generator().manual_seed(3)
        self.z_map = torch.randn(4, 3 * 8 * 8, generator=g, dtype=torch.float64)
        self.c_map = torch.randn(6, 3 * 8 * 8, generator=g, dtype=torch.float64)

    def generate(self, z, c_m, noise_seed=None):
        if c_m.dim() == 1:
            c_m = c_m.expand(z.shape[0], -1)
        a, b = self.theta
        return torch.tanh(a * (z @ self.z_map) + b * (c_m @ self.c_map)).view(-1, 3, 8, 8)


@pytest.mark.criterion(2, "gradient checks against central differences")
def test_criterion_2_direction_loss_gradient():
    start = time.perf_counter()
    gen = ToyGenerator(0.7, -0.4)
    g = torch.Generator().manual_seed(5)
    z = torch.randn(3, 4, generator=g, dtype=torch.float64)
    peer = torch.randn(6, generator=g, dtype=torch.float64)
    target = torch.randn(6, generator=g, dtype=torch.float64)
    image_enc = StubFeatureEncoder(2, 16)
    text_dir = torch.randn(16, generator=g, dtype=torch.float64)
    pair = DirectionEncoderPair(image_enc, {"p": text_dir, "t": torch.zeros(16, dtype=torch.float64)}.__getitem__, 16)
    cfg = DirectionLossConfig(pair, "p", "t")

    loss = direction_loss(gen, z, peer, target, cfg)
    (analytic,) = torch.autograd.grad(loss, gen.theta)

    def at(theta):
        with torch.no_grad():
            gen.theta.copy_(theta)
            return direction_loss(gen, z, peer, target, cfg)

    base = gen.theta.detach().clone()
    numeric = central_difference(at, base.clone())
    at(base)
    assert rel_error(analytic, numeric) < 1e-3, rel_error(analytic, numeric)
    assert time.perf_counter() - start < 30.0


# ---------------------------------------------------------------------------
# 3. Key gating


def res64_generator(key: str) -> Generator:
    torch.manual_seed(0)
    cfg = GeneratorConfig(resolution=64, latent_dim=8, w_dim=8, c_dim=8, feature_dim=12,
                          channels={4: 8, 8: 8, 16: 8, 32: 4, 64: 4}, key=KeySchedule.parse(key))
    return Generator(cfg)


@pytest.mark.criterion(3, "Key gating invariance")
@pytest.mark.parametrize("key", ["none", "4", "4+16", "4+8+16+64"])
def test_criterion_3_layers_outside_key_ignore_class(key):
    start = time.perf_counter()
    g = res64_generator(key)
    active = KeySchedule.parse(key).active_resolutions
    w = g.map_latent(torch.randn(2, 8))
    c1, c2 = g.map_class(torch.randn(2, 12)), g.map_class(torch.randn(2, 12))
    checked = 0
    with torch.no_grad():
        for block in g.blocks:
            for layer in (block.conv0, block.conv1, block.torgb):
                conv = layer.conv
                x = torch.randn(2, conv.weight.shape[1], block.resolution, block.resolution)
                out1, out2 = conv(x, w, c1, g.key), conv(x, w, c2, g.key)
                if block.resolution in active and conv.class_affine is not None:
                    assert not torch.equal(out1, out2)
                else:
                    assert torch.equal(out1, out2), f"class leaks into layer at {block.resolution}"
                    checked += 1
    assert checked >= 5
    assert time.perf_counter() - start < 10.0


@pytest.mark.criterion(3, "Key gating invariance")
def test_criterion_3_closed_gate_full_generator():
    g = res64_generator("none")
    for layer in g.synthesis_layers():
        layer.noise_strength.data.fill_(0.3)
    z = torch.randn(3, 8)
    with torch.no_grad():
        a = g.generate(z, torch.randn(12), noise_seed=11)
        b = g.generate(z, torch.randn(12), noise_seed=11)
    assert torch.equal(a, b)


# ---------------------------------------------------------------------------
# 4. direction loss contract


@pytest.mark.criterion(4, "direction-loss contract")
def test_criterion_4_reference_directions():
    d = torch.tensor([0.3, -1.2, 2.0, 0.5])
    orth = torch.tensor([1.2, 0.3, 0.0, 0.0])
    assert abs(direction_cosine_loss(2.5 * d, d).item() - 0.0) <= 1e-6
    assert abs(direction_cosine_loss(-0.7 * d, d).item() - 2.0) <= 1e-6
    assert abs(direction_cosine_loss(orth, d).item() - 1.0) <= 1e-6


@pytest.mark.criterion(4, "direction-loss contract")
def test_criterion_4_positive_rescaling_invariance():
    g = torch.Generator().manual_seed(0)
    shifts = torch.randn(1000, 32, generator=g, dtype=torch.float64)
    domains = torch.randn(1000, 32, generator=g, dtype=torch.float64)
    alpha = torch.exp(torch.randn(1000, 1, generator=g, dtype=torch.float64) * 3)
    beta = torch.exp(torch.randn(1000, 1, generator=g, dtype=torch.float64) * 3)
    for i in range(1000):
        base = direction_cosine_loss(shifts[i], domains[i])
        scaled = direction_cosine_loss(alpha[i] * shifts[i], beta[i] * domains[i])
        assert abs(base.item() - scaled.item()) <= 1e-12


@pytest.mark.criterion(4, "direction-loss contract")
def test_criterion_4_lazy_schedule_over_64_steps(dataset):
    calls = []

    class Counting:
        def __init__(self, pair):
            self.pair = pair

        def image_encode(self, x):
            calls.append(trainer.state.step)
            return self.pair.image_encode(x)

    base = stub_direction_encoders()
    counting = Counting(base)
    pair = DirectionEncoderPair(counting.image_encode, base.text_encode, base.dim)
    config = tiny_config(steps=64, batch_size=2, dir_interval=16, r1_interval=1000,
                         channels="4:4,8:4,16:4", resolution=16)
    trainer = Trainer(config, dataset, tiny_embeddings(dataset), DirectionLossConfig(pair, "peer", "target"))
    records = trainer.run(64)
    fired = [r["step"] for r in records if r["L_direction"] is not None]
    assert fired == [0, 16, 32, 48]
    # each firing encodes the peer and the target renderings once
    assert sorted(set(calls)) == [0, 16, 32, 48] and len(calls) == 8


# ---------------------------------------------------------------------------
# 5. metric oracles


def brute_force_intra(to_training: np.ndarray, pairwise: np.ndarray) -> float:
    g, k = to_training.shape
    clusters: dict[int, list[int]] = {}
    for i in range(g):
        best = 0
        for j in range(1, k):
            if to_training[i, j] < to_training[i, best]:
                best = j
        clusters.setdefault(best, []).append(i)
    scores = []
    for members in clusters.values():
        pairs = list(itertools.combinations(members, 2))
        scores.append(sum(pairwise[a, b] for a, b in pairs) / len(pairs) if pairs else 0.0)
    return sum(scores) / len(scores)


@pytest.mark.criterion(5, "metric oracles")
def test_criterion_5_frechet_cases():
    start = time.perf_counter()
    a = GaussianStats(np.zeros(2), np.eye(2), 10)
    assert abs(frechet_distance(a, a)) <= 1e-8
    b = GaussianStats(np.array([3.0, 4.0]), np.eye(2), 10)
    assert abs(frechet_distance(a, b) - 25.0) <= 1e-8
    rng = np.random.default_rng(0)
    m = rng.standard_normal((6, 6))
    s = GaussianStats(rng.standard_normal(6), m @ m.T, 10)
    assert abs(frechet_distance(s, s)) <= 1e-8
    assert time.perf_counter() - start < 10.0


@pytest.mark.criterion(5, "metric oracles")
def test_criterion_5_intra_lpips():
    start = time.perf_counter()
    to_training = np.array([[0.1, 0.9], [0.2, 0.8], [0.9, 0.1], [0.7, 0.3]])
    pairwise = np.array([[0.0, 0.5, 1.0, 1.0], [0.5, 0.0, 1.0, 1.0],
                         [1.0, 1.0, 0.0, 0.4], [1.0, 1.0, 0.4, 0.0]])
    assert intra_lpips_from_distances(to_training, pairwise).value == 0.45
    rng = np.random.default_rng(0)
    for _ in range(50):
        to_training = rng.random((20, 5)).round(2)
        half = rng.random((20, 20))
        pairwise = np.triu(half, 1) + np.triu(half, 1).T
        result = intra_lpips_from_distances(to_training, pairwise)
        assert result.value == pytest.approx(brute_force_intra(to_training, pairwise), abs=1e-12)
    assert time.perf_counter() - start < 10.0


@pytest.mark.criterion(5, "metric oracles")
def test_criterion_5_lpips_emd():
    start = time.perf_counter()
    assert emd_from_matrix(np.array([[0.1, 0.2], [0.3, 0.4]])) == pytest.approx(0.2, abs=1e-15)
    rng = np.random.default_rng(1)
    for _ in range(100):
        cost = rng.random(tuple(rng.integers(1, 9, 2)))
        assert emd_from_matrix(cost) == emd_from_matrix(cost.T)
    assert time.perf_counter() - start < 10.0


# ---------------------------------------------------------------------------
# 6. end-to-end smoke run


@pytest.mark.slow
@pytest.mark.criterion(6, "end-to-end smoke run with bitwise resume")
def test_criterion_6_end_to_end(tmp_path):
    start = time.perf_counter()
    make_synthetic_corpus(tmp_path / "data", n_peer=500, n_target=10, resolution=32, seed=0)
    dataset = load_dataset(tmp_path / "data", 32)
    assert dataset.counts == (500, 10)
    embeddings = torch.stack([e.vector for e in compute_class_embeddings(StubFeatureEncoder(0, 512), dataset)])
    config = TrainConfig(steps=500, batch_size=8, resolution=32, key="4", seed=0)
    direction = DirectionLossConfig(stub_direction_encoders(), *dataset.text_labels)
    trainer = Trainer(config, dataset, embeddings, direction)

    records = trainer.run(480)
    trainer.save_checkpoint(tmp_path / "step_000480.ckpt")
    records += trainer.run(20)
    elapsed = time.perf_counter() - start

    resumed = Trainer.from_checkpoint(tmp_path / "step_000480.ckpt", dataset, direction)
    replay = resumed.run(20)

    assert len(records) == 500
    for r in records:
        for key in ("loss_D", "loss_G", "r1", "L_direction"):
            assert r[key] is None or math.isfinite(r[key]), r
        assert 0.0 <= r["p"] <= 1.0
    assert sum(r["r1"] is not None for r in records) == 32
    assert sum(r["L_direction"] is not None for r in records) == 32
    assert replay == records[480:]
    for name in ("generator", "generator_ema", "discriminator"):
        live = getattr(trainer.state, name).state_dict()
        again = getattr(resumed.state, name).state_dict()
        assert all(torch.equal(live[k], again[k]) for k in live), name
    assert elapsed < 15 * 60, f"500 steps took {elapsed:.0f}s"


# ---------------------------------------------------------------------------
# 7. configuration fidelity


@pytest.mark.criterion(7, "configuration fidelity")
def test_criterion_7_peer_size_cap(tmp_path):
    make_synthetic_corpus(tmp_path, n_peer=1100, n_target=10, resolution=8, seed=0)
    cfg = merge(None, {"data": str(tmp_path), "peer_size": 1000, "resolution": 8})
    dataset = load_dataset(cfg.run.data, cfg.train.resolution, cfg.train.peer_size, seed=cfg.train.seed)
    assert dataset.counts == (1000, 10)
    kept = set(dataset.peer.image_paths)
    assert len(kept) == 1000
    drawn = np.concatenate([sample_indices(dataset, cfg.train.sampling_policy(), 64, s) for s in range(200)])
    peer_rows = drawn[dataset.labels[drawn].numpy() == 0]
    assert peer_rows.max() < 1000 and len(np.unique(peer_rows)) > 900


@pytest.mark.criterion(7, "configuration fidelity")
@pytest.mark.parametrize("text, expected", [
    ("4", {4}), ("8", {8}), ("4+8", {4, 8}), ("4+16", {4, 16}), ("4+8+16", {4, 8, 16}),
    ("4+8+16+64+128+256", {4, 8, 16, 64, 128, 256}),
])
def test_criterion_7_table_key_strings(text, expected):
    assert parse_key_string(text, resolution=256).active_resolutions == frozenset(expected)
    assert merge(None, {"key": text, "resolution": 256}).key_schedule.active_resolutions == frozenset(expected)


@pytest.mark.criterion(7, "configuration fidelity")
@pytest.mark.parametrize("name", ["pl_weight", "pl_decay", "path_length_weight", "path-length-reg",
                                  "style_mixing", "style-mixing-prob", "mixing_prob"])
def test_criterion_7_removed_options_rejected(name, tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text(f"{name} = 1\n")
    with pytest.raises(ConfigError, match="not supported"):
        read_config_file(path)
    with pytest.raises(ConfigError):
        merge(None, {name.replace("-", "_"): 1})
    with pytest.raises(ConfigError):
        TrainConfig.from_dict({name.replace("-", "_"): 1})


# ---------------------------------------------------------------------------
# 8. class-embedding pipeline


@pytest.mark.criterion(8, "class-embedding pipeline")
def test_criterion_8_permutation_invariance():
    g = torch.Generator().manual_seed(0)
    peer = torch.rand(40, 3, 16, 16, generator=g) * 2 - 1
    target = torch.rand(7, 3, 16, 16, generator=g) * 2 - 1
    enc = StubFeatureEncoder(0, 512)
    base = UnbalancedDataset.from_arrays(peer, target)
    for seed in range(5):
        perm = torch.randperm(40, generator=torch.Generator().manual_seed(seed))
        shuffled = UnbalancedDataset.from_arrays(peer[perm], target.flip(0))
        for cid in (0, 1):
            a = compute_class_embedding(enc, base, cid, batch_size=8).vector
            b = compute_class_embedding(enc, shuffled, cid, batch_size=8).vector
            assert (a - b).abs().max().item() <= 1e-6


@pytest.mark.criterion(8, "class-embedding pipeline")
def test_criterion_8_cache_round_trip(tmp_path):
    dataset = UnbalancedDataset.from_arrays(torch.rand(9, 3, 16, 16) * 2 - 1, torch.rand(2, 3, 16, 16) * 2 - 1)
    embeddings = compute_class_embeddings(StubFeatureEncoder(0, 512), dataset)
    cache_embeddings(tmp_path / "c.safetensors", embeddings, dataset.fingerprint())
    back = load_cached_embeddings(tmp_path / "c.safetensors", dataset.fingerprint())
    for a, b in zip(embeddings, back):
        assert a.vector.dtype == b.vector.dtype and torch.equal(a.vector, b.vector)


@pytest.mark.criterion(8, "class-embedding pipeline")
def test_criterion_8_class_mapping_shallower():
    g = Generator(GeneratorConfig(resolution=8, channels={4: 4, 8: 4}))
    assert g.class_mapping.num_layers < g.mapping.num_layers
    for f_w, f_c in [(4, 4), (3, 5), (2, 2)]:
        with pytest.raises(ValueError, match="fewer layers"):
            GeneratorConfig(mapping_layers=f_w, class_mapping_layers=f_c)
    with pytest.raises(ConfigError):
        TrainConfig(mapping_layers=2, class_mapping_layers=2)
