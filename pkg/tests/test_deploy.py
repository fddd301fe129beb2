"""Deployment: pruning equivalence, size accounting, binary file format."""
import json

import numpy as np
import pytest

from divmorph import envs
from divmorph.controller import compute_sigmas, forward, init_controller
from divmorph.deploy import (
    FORMAT_VERSION,
    DeployedAgent,
    agent_forward,
    deploy,
    load_agent,
    load_checkpoint,
    save_agent,
    save_checkpoint,
    size_report,
)
from divmorph.errors import ContractViolationError, FormatError
from divmorph.factorized import DiversionConfig
from tests.conftest import chain_morph, random_obs, small_config

TASK = envs.TASKS["flat"]


@pytest.fixture
def agent64(student_small, morph3):
    return deploy(student_small, morph3, TASK, dtype=np.float64)


@pytest.fixture
def agent32(student_small, morph3):
    return deploy(student_small, morph3, TASK, dtype=np.float32)


# ---------------------------------------------------------------------------
# pruned-forward equivalence
# ---------------------------------------------------------------------------

def test_pruned_equals_gated_double(student_small, morph3, agent64):
    rng = np.random.default_rng(0)
    for _ in range(20):
        obs, gobs = random_obs(rng, 3)
        full, _ = forward(student_small, morph3, TASK, obs, gobs)
        compact = agent_forward(agent64, obs, gobs)
        assert np.max(np.abs(full.mean - compact.mean)) <= 1e-12
        assert np.allclose(full.std, compact.std, atol=1e-12)


def test_pruned_equals_gated_single(student_small, morph3, agent32):
    rng = np.random.default_rng(1)
    for _ in range(20):
        obs, gobs = random_obs(rng, 3)
        full, _ = forward(student_small, morph3, TASK, obs, gobs)
        compact = agent_forward(agent32, obs, gobs)
        assert np.max(np.abs(full.mean - compact.mean)) <= 1e-5


def test_zero_observation_matches(student_small, morph3, agent64):
    obs = np.zeros((3, 9))
    gobs = np.zeros(4)
    full, _ = forward(student_small, morph3, TASK, obs, gobs)
    compact = agent_forward(agent64, obs, gobs)
    assert np.max(np.abs(full.mean - compact.mean)) <= 1e-12


def test_single_limb_agent(student_small, morph1):
    agent = deploy(student_small, morph1, TASK, dtype=np.float64)
    obs, gobs = random_obs(np.random.default_rng(2), 1)
    full, _ = forward(student_small, morph1, TASK, obs, gobs)
    compact = agent_forward(agent, obs, gobs)
    assert compact.mean.shape == (1,)
    assert np.max(np.abs(full.mean - compact.mean)) <= 1e-12


def test_unseen_morphology_deploys(student_small):
    m = envs.gen_morphologies(99, 1)[0]
    agent = deploy(student_small, m, envs.TASKS["steep"])
    state, obs, gobs = envs.reset(m, envs.TASKS["steep"], 0)
    done = False
    while not done:
        dist = agent_forward(agent, obs, gobs)
        state, obs, gobs, _, done = envs.step(state, m, envs.TASKS["steep"],
                                              np.clip(dist.mean, -1, 1))
    assert state.t == envs.HORIZON


def test_agent_validation(agent64):
    with pytest.raises(ContractViolationError):
        agent_forward(agent64, np.zeros((3, 5)), np.zeros(4))
    bad = np.zeros((3, 9)); bad[0, 0] = np.inf
    with pytest.raises(ContractViolationError):
        agent_forward(agent64, bad, np.zeros(4))


def test_deploy_requires_factorized(teacher_small, morph3):
    with pytest.raises(ContractViolationError):
        deploy(teacher_small, morph3, TASK)


def test_agent_carries_no_gates_or_encoders(agent32):
    assert not any(k.startswith(("gate.", "enc.", "value.", "fac."))
                   for k in agent32.dense)


# ---------------------------------------------------------------------------
# size accounting
# ---------------------------------------------------------------------------

def test_compact_rank_matches_config(student_small, agent32):
    for name, cm in agent32.compact.items():
        dc = student_small.cfg.dconf(name)
        assert cm.rank == dc.n_learngene + dc.k_morph + dc.k_task
        m, n = student_small.cfg.matrix_shapes()[name]
        assert cm.param_count() == (m + n) * cm.rank


def test_size_report_formula(student_small, agent32):
    full, deployed, ratio = size_report(student_small, agent32)
    shapes = student_small.cfg.matrix_shapes()
    dense_total = sum(m * n for m, n in shapes.values())
    assert full > dense_total      # gates/encoders/shared params included
    assert deployed == agent32.param_count()
    assert ratio == pytest.approx(full / deployed)


def test_smaller_k_yields_smaller_agent(morph3):
    def agent_with(diversion):
        cfg = small_config(diversion=diversion)
        ctl = init_controller(cfg, np.random.default_rng(0), factorized=True)
        return deploy(ctl, morph3, TASK)

    small_k = {8: DiversionConfig(4, 2, 2, 1, 1),
               16: DiversionConfig(8, 4, 4, 1, 1)}
    big_k = {8: DiversionConfig(4, 2, 2, 2, 2),
             16: DiversionConfig(8, 4, 4, 4, 4)}
    assert agent_with(small_k).param_count() < agent_with(big_k).param_count()


def test_compact_profile_per_matrix_arithmetic():
    # rank-128 matrix in the compact profile: r' = 16 + 4 + 4 = 24
    from divmorph.controller import PROFILES
    dc = PROFILES["compact"][128]
    r_prime = dc.n_learngene + dc.k_morph + dc.k_task
    assert r_prime == 24
    assert (128 + 128) * r_prime == 6144
    assert 128 * 128 / 6144 == pytest.approx(2.666, abs=1e-3)


# ---------------------------------------------------------------------------
# file format
# ---------------------------------------------------------------------------

def test_checkpoint_round_trip(tmp_path, student_small, morph3):
    p = str(tmp_path / "s.dmc")
    save_checkpoint(student_small, p, extra={"note": 1})
    ctl, manifest = load_checkpoint(p)
    assert manifest["kind"] == "checkpoint"
    assert manifest["format_version"] == FORMAT_VERSION
    assert manifest["token_hash"] == "fnv1a64"
    assert manifest["note"] == 1
    assert sorted(ctl.params) == sorted(student_small.params)
    for k in ctl.params:
        assert np.array_equal(ctl.params[k], student_small.params[k]), k
    for k in ctl.seeds:
        assert np.array_equal(ctl.seeds[k], student_small.seeds[k]), k
    assert ctl.cfg == student_small.cfg


def test_checkpoint_embeds_morphs(tmp_path, student_small):
    from divmorph.deploy import checkpoint_morphs
    morphs = envs.gen_morphologies(4, 3)
    p = str(tmp_path / "s.dmc")
    save_checkpoint(student_small, p, morphs=morphs)
    _, manifest = load_checkpoint(p)
    assert checkpoint_morphs(manifest) == morphs


def test_agent_round_trip_bit_identical(tmp_path, agent32, morph3):
    p = str(tmp_path / "a.dma")
    save_agent(agent32, p)
    loaded = load_agent(p)
    assert loaded.morph_id == agent32.morph_id
    assert loaded.task_id == agent32.task_id
    assert loaded.dtype == np.float32
    obs, gobs = random_obs(np.random.default_rng(3), 3)
    d1 = agent_forward(agent32, obs, gobs)
    d2 = agent_forward(loaded, obs, gobs)
    assert np.array_equal(d1.mean, d2.mean)
    assert np.array_equal(d1.std, d2.std)


def test_agent_serialized_bytes_match_formula(tmp_path, agent32, student_small):
    p = str(tmp_path / "a.dma")
    save_agent(agent32, p)
    with open(p, "rb") as f:
        manifest = json.loads(f.readline())
        blob = f.read()
    assert len(blob) == manifest["blob_bytes"]
    sizes = {name: int(np.prod(shape)) for name, shape in manifest["arrays"]}
    for name, (m, n) in student_small.cfg.matrix_shapes().items():
        r_prime = agent32.compact[name].rank
        assert sizes[f"L.{name}"] + sizes[f"R.{name}"] == (m + n) * r_prime
    assert sum(sizes.values()) * 4 == manifest["blob_bytes"]


def test_corrupt_blob_rejected(tmp_path, agent32):
    p = str(tmp_path / "a.dma")
    save_agent(agent32, p)
    raw = bytearray(open(p, "rb").read())
    raw[-1] ^= 0xFF
    open(p, "wb").write(bytes(raw))
    with pytest.raises(FormatError):
        load_agent(p)


def test_unknown_version_rejected(tmp_path, agent32):
    p = str(tmp_path / "a.dma")
    save_agent(agent32, p)
    with open(p, "rb") as f:
        header = json.loads(f.readline())
        blob = f.read()
    header["format_version"] = 999
    with open(p, "wb") as f:
        f.write(json.dumps(header).encode() + b"\n" + blob)
    with pytest.raises(FormatError):
        load_agent(p)


def test_kind_mismatch_rejected(tmp_path, student_small, agent32):
    pc = str(tmp_path / "c.dmc")
    pa = str(tmp_path / "a.dma")
    save_checkpoint(student_small, pc)
    save_agent(agent32, pa)
    with pytest.raises(FormatError):
        load_agent(pc)
    with pytest.raises(FormatError):
        load_checkpoint(pa)


def test_deploy_deterministic_bytes(tmp_path, student_small, morph3):
    p1, p2 = str(tmp_path / "1.dma"), str(tmp_path / "2.dma")
    save_agent(deploy(student_small, morph3, TASK), p1)
    save_agent(deploy(student_small, morph3, TASK), p2)
    assert open(p1, "rb").read() == open(p2, "rb").read()


def test_sigma_used_matches_gates(student_small, morph3, agent64):
    sigmas = compute_sigmas(student_small, morph3, TASK)
    for name, sig in sigmas.items():
        assert np.allclose(agent64.sigma[name], sig, atol=1e-12)
