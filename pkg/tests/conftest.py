"""Shared fixtures: a scaled-down controller configuration and small morphologies.

The small configuration keeps every architectural feature (two rank
classes, factorized attention/FFN/decoder, gates, morphology encoder)
while making forward/backward passes fast enough for property tests.
"""
import numpy as np
import pytest

from divmorph.controller import ControllerConfig, init_controller
from divmorph.factorized import DiversionConfig
from divmorph.specs import Limb, MorphSpec

SMALL_DIVERSION = {
    8: DiversionConfig(4, 2, 2, 1, 1),
    16: DiversionConfig(8, 4, 4, 2, 2),
}


def small_config(**overrides):
    kw = dict(
        embed_dim=16, heads=2, head_dim=4, ffn_dim=16,
        global_hidden=8, global_dim=8, dec_hidden=8, value_hidden=8,
        diversion=dict(SMALL_DIVERSION),
    )
    kw.update(overrides)
    return ControllerConfig(**kw)


def chain_morph(mid, limb_params):
    """Build a chain morphology from a list of (length, joint_range, damping,
    density) tuples without the 3..8 limb-count restriction (degenerate
    single-limb cases are useful in tests)."""
    limbs = tuple(Limb(*p) for p in limb_params)
    topology = tuple(i - 1 for i in range(len(limbs)))
    return MorphSpec(mid, limbs, topology)


@pytest.fixture
def cfg_small():
    return small_config()


@pytest.fixture
def morph3():
    return chain_morph("t3", [
        (0.6, 1.0, 0.2, 1.0),
        (0.8, 1.2, 0.3, 0.8),
        (0.4, 0.7, 0.15, 1.2),
    ])


@pytest.fixture
def morph1():
    return chain_morph("t1", [(1.0, 1.0, 0.1, 1.0)])


@pytest.fixture
def student_small(cfg_small):
    return init_controller(cfg_small, np.random.default_rng(0), factorized=True)


@pytest.fixture
def teacher_small(cfg_small):
    return init_controller(cfg_small, np.random.default_rng(1), factorized=False)


def random_obs(rng, n, cfg=None):
    limb_obs = 9 if cfg is None else cfg.limb_obs_dim
    glob = 4 if cfg is None else cfg.global_obs_dim
    return rng.standard_normal((n, limb_obs)), rng.standard_normal(glob)
