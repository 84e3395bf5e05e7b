"""Shared fixtures: small shapes, agents and an untrained field."""

import numpy as np
import pytest

from interxfer import agentkit, geomkit, rdif

# Narrow network so forward passes in tests are quick.
SMALL_ARCH = rdif.RdifArch(
    encoder_widths=(8, 8, 8),
    code_rows=8,
    neighbors=4,
    hyper_hidden=16,
    decoder_width=16,
    template_width=16,
    layers=3,
)


@pytest.fixture()
def mug():
    return geomkit.generate_shape("mug", seed=3)


@pytest.fixture()
def chair():
    return geomkit.generate_shape("chair", seed=4)


@pytest.fixture()
def mug_cloud(mug):
    return geomkit.sample_surface(mug, 256, seed=3)


@pytest.fixture()
def gripper():
    return agentkit.gripper()


@pytest.fixture()
def small_params():
    return rdif.RdifParams.initial(SMALL_ARCH, seed=0)


@pytest.fixture()
def rng():
    return np.random.default_rng(12345)
