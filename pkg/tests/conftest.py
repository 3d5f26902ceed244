from __future__ import annotations

from collections import defaultdict

import pytest
import torch

from peergan.dataset import UnbalancedDataset
from peergan.embedding import compute_class_embeddings, stack_embeddings, stub_feature_encoder
from peergan.trainer import TrainConfig

TINY_CHANNELS = "4:16,8:16,16:8,32:8,64:8"


def tiny_config(**overrides) -> TrainConfig:
    values = dict(steps=8, batch_size=4, resolution=16, latent_dim=16, w_dim=16, c_dim=16,
                  channels=TINY_CHANNELS, ema_beta=0.9, snapshot_interval=4, checkpoint_interval=4)
    values.update(overrides)
    return TrainConfig(**values)


def tiny_dataset(n_peer: int = 12, n_target: int = 3, resolution: int = 16, seed: int = 0) -> UnbalancedDataset:
    g = torch.Generator().manual_seed(seed)
    peer = torch.rand(n_peer, 3, resolution, resolution, generator=g) * 2 - 1
    # target images are brighter so the two classes differ in mean feature
    target = (torch.rand(n_target, 3, resolution, resolution, generator=g) * 0.8 + 0.2)
    return UnbalancedDataset.from_arrays(peer, target)


def tiny_embeddings(dataset: UnbalancedDataset, feature_dim: int = 32) -> torch.Tensor:
    return stack_embeddings(compute_class_embeddings(stub_feature_encoder(0, feature_dim), dataset))


@pytest.fixture
def dataset() -> UnbalancedDataset:
    return tiny_dataset()


@pytest.fixture
def embeddings(dataset) -> torch.Tensor:
    return tiny_embeddings(dataset)


# ---------------------------------------------------------------------------
# one PASS/FAIL line per acceptance criterion

_CRITERIA: dict[int, dict] = defaultdict(lambda: {"title": "", "outcomes": []})


def pytest_runtest_logreport(report):
    if report.when != "call" and not (report.when == "setup" and report.outcome != "passed"):
        return
    marker = report.user_properties and dict(report.user_properties).get("criterion")
    if marker:
        number, title = marker
        _CRITERIA[number]["title"] = title
        _CRITERIA[number]["outcomes"].append(report.outcome)


def pytest_runtest_makereport(item, call):
    marker = item.get_closest_marker("criterion")
    if marker is not None and not any(k == "criterion" for k, _ in item.user_properties):
        item.user_properties.append(("criterion", tuple(marker.args)))


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        entry = _CRITERIA[number]
        outcomes = entry["outcomes"]
        verdict = "PASS" if outcomes and all(o == "passed" for o in outcomes) else "FAIL"
        terminalreporter.write_line(f"criterion {number}: {verdict}  {entry['title']} ({len(outcomes)} checks)")
