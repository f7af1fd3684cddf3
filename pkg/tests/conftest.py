"""Shared fixtures: synthetic scenes, prepared data, and trained models.

The repository ships no benchmark data, so tests synthesize crowd scenes with
the same record format and 0.4 s step semantics (see _synth.py). Training
fixtures are session-scoped; the smoke fixture follows the 10+10-epoch
protocol and the full fixture trains to early stopping.
"""

import os
import sys

import pytest

sys.path.insert(0, os.path.dirname(__file__))

from _synth import write_manifest, write_scene  # noqa: E402

from fepdiff import pipeline  # noqa: E402

SCENES = ["univ_synth", "hotel_synth", "zara1_synth"]


@pytest.fixture(scope="session")
def scene_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("scenes")
    for i, name in enumerate(SCENES):
        write_scene(str(root / f"{name}.txt"), n_agents=14, n_frames=45, seed=i)
    write_manifest(str(root / "manifest.txt"), {n: f"{n}.txt" for n in SCENES})
    return root


@pytest.fixture(scope="session")
def manifest_path(scene_dir):
    return str(scene_dir / "manifest.txt")


@pytest.fixture(scope="session")
def prepared(manifest_path):
    return pipeline.prepare_dataset(manifest_path, delta=4.0)


def _smoke_config(**overrides) -> pipeline.ExperimentConfig:
    cfg = pipeline.ExperimentConfig(
        heldout="zara1_synth",
        belief_epochs=10,
        belief_patience=10,
        diffusion_epochs=10,
        warmup_epochs=5,
        seed=0,
    )
    for key, value in overrides.items():
        setattr(cfg, key, value)
    return cfg


@pytest.fixture(scope="session")
def smoke_config():
    return _smoke_config()


@pytest.fixture(scope="session")
def smoke_models(prepared, smoke_config):
    """Criterion-6 protocol: 10 stage-1 epochs, then 10 stage-2 epochs."""
    belief_ckpt = pipeline.train_belief(smoke_config, prepared)
    diffusion_ckpt = pipeline.train_diffusion(smoke_config, belief_ckpt, prepared)
    return smoke_config, belief_ckpt, diffusion_ckpt


@pytest.fixture(scope="session")
def full_models(prepared):
    """Longer training used by the baseline-beating criterion."""
    cfg = _smoke_config(belief_epochs=60, belief_patience=15, diffusion_epochs=20)
    belief_ckpt = pipeline.train_belief(cfg, prepared)
    diffusion_ckpt = pipeline.train_diffusion(cfg, belief_ckpt, prepared)
    return cfg, belief_ckpt, diffusion_ckpt


def tiny_config(**overrides) -> pipeline.ExperimentConfig:
    """Small dimensions for fast unit tests."""
    cfg = pipeline.ExperimentConfig(
        hidden_dim=32,
        gat_dim=16,
        latent_dim=24,
        heads=2,
        n_hypotheses=4,
        t_steps=20,
        ddim_steps=5,
        denoiser_width=32,
        denoiser_depth=2,
        belief_epochs=2,
        belief_patience=5,
        diffusion_epochs=2,
        warmup_epochs=1,
        heldout="zara1_synth",
    )
    for key, value in overrides.items():
        setattr(cfg, key, value)
    return cfg
