import numpy as np
import torch
from PIL import Image

from peergan.plotting import plot_distance_matrix, plot_image_strip, plot_loss_curves


def test_loss_curves(tmp_path):
    records = [{"step": i, "loss_D": 1.0 / (i + 1), "loss_G": 0.5 + 0.01 * i,
                "r1": 0.1 if i % 4 == 0 else None, "L_direction": 0.9 if i % 4 == 0 else None, "p": 0.01 * i}
               for i in range(20)]
    path = plot_loss_curves(records, tmp_path / "losses.png")
    with Image.open(path) as img:
        assert img.size[0] > 400 and img.size[1] > 300


def test_loss_curves_without_lazy_terms(tmp_path):
    records = [{"step": 0, "loss_D": 1.0, "loss_G": 1.0, "r1": None, "L_direction": None, "p": 0.0}]
    assert plot_loss_curves(records, tmp_path / "l.png").exists()


def test_image_strip(tmp_path):
    frames = torch.rand(5, 3, 8, 8) * 2 - 1
    path = plot_image_strip(frames, tmp_path / "strip.png", title="path", labels=[str(i) for i in range(5)])
    with Image.open(path) as img:
        assert img.size[0] > img.size[1]


def test_single_frame_strip(tmp_path):
    assert plot_image_strip(torch.zeros(1, 3, 4, 4), tmp_path / "one.png").exists()


def test_distance_matrix(tmp_path):
    path = plot_distance_matrix(np.random.default_rng(0).random((4, 6)), tmp_path / "m.png", title="C")
    assert path.stat().st_size > 0
