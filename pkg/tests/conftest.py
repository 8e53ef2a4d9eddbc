import numpy as np
import pytest
import torch
from hypothesis import HealthCheck, settings

from bsonet.bsformer import BSformerConfig
from bsonet.imagecore import (Disk, Image, NoiseConfig, Rectangle, SceneSpec,
                              apply_noise, generate_phantom)
from bsonet.ranet import RANetConfig

settings.register_profile(
    "suite", deadline=None, derandomize=True,
    suppress_health_check=[HealthCheck.too_slow, HealthCheck.data_too_large])
settings.load_profile("suite")

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def standard_suite():
    """The fixed-seed noisy/clean pairs used for baseline sanity checks: one
    moderate-contrast two-object phantom under sigma-400 Gaussian noise, three
    noise draws. Contrast is kept mild so that even a plain Gaussian blur
    lowers MSE (edge error stays below the noise energy it removes)."""
    scene = SceneSpec(
        height=128, width=128, background=12000.0,
        primitives=(Disk(center=(45.0, 50.0), radius=24.0, intensity=15000.0),
                    Rectangle(corner=(80, 70), size=(30, 40), intensity=9500.0)))
    clean = generate_phantom(scene)
    return [(clean, apply_noise(clean, NoiseConfig(gaussian_sigma=400.0, seed=s)))
            for s in (101, 202, 303)]


@pytest.fixture(scope="session")
def mini_ranet_cfg():
    return RANetConfig(channels=8, num_layers=2, ca_reduction=4,
                       working_size=(32, 32), init_seed=0)


@pytest.fixture(scope="session")
def mini_bsformer_cfg():
    return BSformerConfig(embed_dim=8, encoder_depths=(2,), bottleneck_depth=1,
                          heads=(1, 2), fln_subsets=4, fln_dcr_blocks=1,
                          init_seed=0)


@pytest.fixture()
def rng():
    return np.random.default_rng(0)


def random_image(rng, height, width, low=0.0, high=65535.0) -> Image:
    return Image(rng.uniform(low, high, size=(height, width)))
