"""Shared fixtures: textured test images, simple camera rigs and cached
simulator runs (scenes are rendered once per session)."""

from __future__ import annotations

from pathlib import Path

import numpy as np
import pytest

from fruitcount.config import PipelineConfig, load_scene_config
from fruitcount.core import CameraPose, FrameImage, Intrinsics
from fruitcount.pipeline import MemorySource, run_pipeline
from fruitcount.simulate import generate

CONFIGS = Path(__file__).resolve().parent.parent / "configs"


def textured(shape, seed=0, n_waves=6, amplitude=40.0, shift=(0.0, 0.0)):
    """Smooth sum-of-sinusoids texture; ``shift`` translates the content
    by (rows, cols) exactly, so shifted pairs have a known flow."""
    rng = np.random.default_rng(seed)
    rows = np.arange(shape[0], dtype=np.float64)[:, None] - shift[0]
    cols = np.arange(shape[1], dtype=np.float64)[None, :] - shift[1]
    img = np.full(shape, 128.0)
    for _ in range(n_waves):
        period = rng.uniform(12.0, 40.0)
        theta = rng.uniform(0, np.pi)
        phase = rng.uniform(0, 2 * np.pi)
        k = 2 * np.pi / period
        img += amplitude / np.sqrt(n_waves) * np.sin(k * (np.cos(theta) * rows + np.sin(theta) * cols) + phase)
    return img


def frame(pixels, index=0) -> FrameImage:
    return FrameImage(index, np.asarray(pixels, dtype=np.float64))


def lateral_poses(n, speed=0.1, intr=None) -> list[CameraPose]:
    """Cameras translating along +x, looking down +z."""
    intr = intr or Intrinsics(500.0, 500.0, 319.5, 239.5)
    return [CameraPose(k, np.eye(3), np.array([-speed * k, 0.0, 0.0]), intr) for k in range(n)]


def random_rotation(rng) -> np.ndarray:
    q, r = np.linalg.qr(rng.normal(size=(3, 3)))
    q = q @ np.diag(np.sign(np.diag(r)))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def _scene_and_run(name, provider="lk", correction=True):
    cfg = load_scene_config(CONFIGS / name)
    scene = generate(cfg)
    result = run_pipeline(
        PipelineConfig(flow_provider=provider, enable_correction=correction), MemorySource.from_scene(scene)
    )
    return scene, result


@pytest.fixture(scope="session")
def clean_run():
    return _scene_and_run("scene_clean.toml", provider="truth")


@pytest.fixture(scope="session")
def gap_run():
    return _scene_and_run("scene_gaps.toml")


@pytest.fixture(scope="session")
def backrow_run():
    return _scene_and_run("scene_backrow.toml")


@pytest.fixture(scope="session")
def decoy_run():
    return _scene_and_run("scene_decoys.toml")
