import numpy as np
import pytest

from cohesion.dataset import SynthConfig, synth_generate
from cohesion.feature_store import vectors_per_image


def per_image_features(cfg, feats):
    specs = cfg.specs()
    return {name: vectors_per_image(recs, specs[name]) for name, recs in feats.items()}


@pytest.fixture(scope="session")
def small_synth():
    """80/30/30 images; fast enough for per-module pipeline tests."""
    cfg = SynthConfig(seed=7, n_train=80, n_val=30, n_test=30)
    ds, feats = synth_generate(cfg)
    return cfg, ds, per_image_features(cfg, feats)


@pytest.fixture(scope="session")
def acceptance_synth():
    """The documented verification config: seed 42, 600/200/200 images,
    sigmas 0.05/0.10/0.15, face counts in [0,4] with 5% zero-face images."""
    cfg = SynthConfig()
    ds, feats = synth_generate(cfg)
    return cfg, ds, per_image_features(cfg, feats)
