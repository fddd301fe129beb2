"""Per-agent deployment: gate evaluation, pruning, compact serialization.

File layout (.dmc checkpoints and .dma agents): one JSON manifest line
(format version, config echo, array order, token-hash identity, blob byte
length, sha256) terminated by '\\n', followed by a raw little-endian
float blob holding every array back to back in manifest order.
Checkpoints store float64 (training continues from them); agents store
float32.

Agent array order: token projection; per layer ln1, q, k, v, o, ln2, in,
b1, out, b2 (factorized slots as left/right pairs); decoder; decoder
readout and bias; global-obs perceptron; log-std.
"""
from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, fields

import numpy as np

from .controller import (
    ActionDistribution,
    Controller,
    ControllerConfig,
    LN_EPS,
    LOGSTD_MAX,
    LOGSTD_MIN,
    compute_sigmas,
)
from .errors import ContractViolationError, FormatError
from .factorized import CompactMatrix, DiversionConfig, prune
from .gating import TOKEN_HASH
from .specs import MorphSpec

FORMAT_VERSION = 1

# Dense parameters that ship with every agent (no gates, encoders, critic).
def _agent_dense_keys(cfg):
    keys = ["token.w", "token.b"]
    for l in range(cfg.layers):
        keys += [f"l{l}.ln1.g", f"l{l}.ln1.b", f"l{l}.ln2.g", f"l{l}.ln2.b",
                 f"l{l}.b1", f"l{l}.b2"]
    keys += ["gobs.w1", "gobs.b1", "gobs.w2", "gobs.b2", "dec.r", "dec.b", "logstd"]
    return keys


def _agent_array_order(cfg):
    order = [("dense", "token.w"), ("dense", "token.b")]
    for l in range(cfg.layers):
        order += [("dense", f"l{l}.ln1.g"), ("dense", f"l{l}.ln1.b")]
        for t in ("q", "k", "v", "o"):
            order += [("left", f"l{l}.{t}"), ("right", f"l{l}.{t}")]
        order += [("dense", f"l{l}.ln2.g"), ("dense", f"l{l}.ln2.b"),
                  ("left", f"l{l}.in"), ("right", f"l{l}.in"), ("dense", f"l{l}.b1"),
                  ("left", f"l{l}.out"), ("right", f"l{l}.out"), ("dense", f"l{l}.b2")]
    order += [("left", "dcd"), ("right", "dcd"), ("dense", "dec.r"), ("dense", "dec.b"),
              ("dense", "gobs.w1"), ("dense", "gobs.b1"),
              ("dense", "gobs.w2"), ("dense", "gobs.b2"), ("dense", "logstd")]
    return order


@dataclass
class DeployedAgent:
    """Pruned low-rank controller for one (morphology, task) pair."""

    morph_id: str
    task_id: str
    cfg: ControllerConfig
    compact: dict        # matrix name -> CompactMatrix
    dense: dict          # shipped dense parameter arrays
    sigma: dict          # matrix name -> sigma actually used
    dtype: np.dtype

    def param_count(self):
        return (sum(c.param_count() for c in self.compact.values())
                + sum(v.size for v in self.dense.values()))


def deploy(ctl, morph, task, dtype=np.float32):
    """Gate, prune, and package one agent.  Deterministic in its inputs."""
    if not ctl.factorized:
        raise ContractViolationError("deployment requires a factorized checkpoint")
    task.validate()
    dtype = np.dtype(dtype)
    sigmas = compute_sigmas(ctl, morph, task)
    compact = {}
    for name in ctl.cfg.matrix_shapes():
        cm = prune(ctl.fm(name), sigmas[name])
        compact[name] = CompactMatrix(cm.m, cm.n,
                                      cm.left.astype(dtype), cm.right.astype(dtype))
    dense = {k: ctl.params[k].astype(dtype) for k in _agent_dense_keys(ctl.cfg)}
    sigma = {k: v.astype(dtype) for k, v in sigmas.items()}
    return DeployedAgent(morph.id, task.id, ctl.cfg, compact, dense, sigma, dtype)


def agent_forward(agent, obs, gobs):
    """Inference in low-rank form: every factorized product is
    (x @ left) @ right.T; the dense matrix is never materialized."""
    cfg = agent.cfg
    dt = agent.dtype
    obs = np.asarray(obs, dtype=dt)
    gobs = np.asarray(gobs, dtype=dt)
    if obs.ndim != 2 or obs.shape[1] != cfg.limb_obs_dim:
        raise ContractViolationError(f"obs shape {obs.shape} invalid")
    if not (np.all(np.isfinite(obs)) and np.all(np.isfinite(gobs))):
        raise ContractViolationError("non-finite observation")
    n = obs.shape[0]
    d = agent.dense
    h, dh = cfg.heads, cfg.head_dim

    def lowrank(x, name):
        cm = agent.compact[name]
        return (x @ cm.left) @ cm.right.T

    def ln(x, g, b):
        mu = x.mean(axis=-1, keepdims=True)
        var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
        return (x - mu) / np.sqrt(var + dt.type(LN_EPS)) * g + b

    x = obs @ d["token.w"] + d["token.b"]
    for l in range(cfg.layers):
        xn = ln(x, d[f"l{l}.ln1.g"], d[f"l{l}.ln1.b"])
        q = lowrank(xn, f"l{l}.q").reshape(n, h, dh).transpose(1, 0, 2)
        k = lowrank(xn, f"l{l}.k").reshape(n, h, dh).transpose(1, 0, 2)
        v = lowrank(xn, f"l{l}.v").reshape(n, h, dh).transpose(1, 0, 2)
        scores = q @ k.transpose(0, 2, 1) / np.sqrt(dt.type(dh))
        scores -= scores.max(axis=-1, keepdims=True)
        e = np.exp(scores)
        attn = e / e.sum(axis=-1, keepdims=True)
        av = (attn @ v).transpose(1, 0, 2).reshape(n, h * dh)
        x = x + lowrank(av, f"l{l}.o")
        xn2 = ln(x, d[f"l{l}.ln2.g"], d[f"l{l}.ln2.b"])
        ff = lowrank(xn2, f"l{l}.in") + d[f"l{l}.b1"]
        c = dt.type(np.sqrt(2.0 / np.pi))
        ff = dt.type(0.5) * ff * (1 + np.tanh(c * (ff + dt.type(0.044715) * ff**3)))
        x = x + lowrank(ff, f"l{l}.out") + d[f"l{l}.b2"]
    genc = np.tanh(gobs @ d["gobs.w1"] + d["gobs.b1"]) @ d["gobs.w2"] + d["gobs.b2"]
    enriched = np.concatenate([x, np.broadcast_to(genc, (n, cfg.global_dim))], axis=1)
    mean = lowrank(enriched, "dcd") @ d["dec.r"] + d["dec.b"]
    std = np.exp(np.clip(d["logstd"][:n], LOGSTD_MIN, LOGSTD_MAX))
    return ActionDistribution(mean, std)


# ---------------------------------------------------------------------------
# size accounting
# ---------------------------------------------------------------------------

def size_report(ctl, agent):
    """(full_params, deployed_params, ratio); 'full' is the dense-equivalent
    transformer plus gates and encoders, 'deployed' the serialized agent."""
    shapes = ctl.cfg.matrix_shapes()
    gate_enc = sum(v.size for k, v in ctl.params.items()
                   if k.startswith("gate.") or k.startswith("enc."))
    shared = sum(ctl.params[k].size for k in _agent_dense_keys(ctl.cfg))
    full = sum(m * n for m, n in shapes.values()) + gate_enc + shared
    deployed = agent.param_count()
    return full, deployed, full / deployed


# ---------------------------------------------------------------------------
# file format
# ---------------------------------------------------------------------------

def _write_file(path, manifest, arrays, dtype):
    dtype = np.dtype(dtype).newbyteorder("<")
    blob = b"".join(np.ascontiguousarray(a, dtype=dtype).tobytes() for _, a in arrays)
    manifest = dict(manifest)
    manifest.update({
        "format_version": FORMAT_VERSION,
        "token_hash": TOKEN_HASH,
        "dtype": dtype.str,
        "arrays": [[name, list(a.shape)] for name, a in arrays],
        "blob_bytes": len(blob),
        "sha256": hashlib.sha256(blob).hexdigest(),
    })
    header = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode()
    tmp = path + ".tmp"
    with open(tmp, "wb") as f:
        f.write(header + b"\n" + blob)
    os.replace(tmp, path)


def _read_file(path):
    with open(path, "rb") as f:
        header = f.readline()
        blob = f.read()
    try:
        manifest = json.loads(header.decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: bad manifest: {exc}") from exc
    if manifest.get("format_version") != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported format version "
                          f"{manifest.get('format_version')!r}")
    if len(blob) != manifest["blob_bytes"]:
        raise FormatError(f"{path}: blob length mismatch")
    if hashlib.sha256(blob).hexdigest() != manifest["sha256"]:
        raise FormatError(f"{path}: blob checksum mismatch")
    dtype = np.dtype(manifest["dtype"])
    arrays = {}
    off = 0
    for name, shape in manifest["arrays"]:
        size = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        arrays[name] = np.frombuffer(blob[off:off + size], dtype=dtype).reshape(shape).copy()
        off += size
    return manifest, arrays


def _cfg_to_dict(cfg):
    d = {f.name: getattr(cfg, f.name) for f in fields(cfg) if f.name != "diversion"}
    d["diversion"] = {
        str(r): [dc.n_learngene, dc.n_morph_tailor, dc.n_task_tailor, dc.k_morph, dc.k_task]
        for r, dc in cfg.diversion.items()
    }
    return d


def _cfg_from_dict(d):
    d = dict(d)
    div = {int(r): DiversionConfig(*v) for r, v in d.pop("diversion").items()}
    return ControllerConfig(diversion=div, **d)


def save_checkpoint(ctl, path, morphs=None, extra=None):
    manifest = {
        "kind": "checkpoint",
        "factorized": ctl.factorized,
        "config": _cfg_to_dict(ctl.cfg),
    }
    if morphs is not None:
        manifest["morphs"] = [m.to_dict() for m in morphs]
    if extra:
        manifest.update(extra)
    arrays = [(f"p.{k}", v) for k, v in ctl.params.items()]
    arrays += [(f"seed.{k}", v) for k, v in ctl.seeds.items()]
    _write_file(path, manifest, arrays, np.float64)


def load_checkpoint(path):
    """Returns (Controller, manifest).  Embedded morphs are under
    manifest['morphs'] when the producing run recorded them."""
    manifest, arrays = _read_file(path)
    if manifest.get("kind") != "checkpoint":
        raise FormatError(f"{path}: not a checkpoint file")
    cfg = _cfg_from_dict(manifest["config"])
    params = {k[2:]: v for k, v in arrays.items() if k.startswith("p.")}
    seeds = {k[5:]: v for k, v in arrays.items() if k.startswith("seed.")}
    return Controller(cfg, manifest["factorized"], params, seeds), manifest


def checkpoint_morphs(manifest):
    return [MorphSpec.from_dict(d).validate() for d in manifest.get("morphs", [])]


def save_agent(agent, path):
    manifest = {
        "kind": "agent",
        "morph_id": agent.morph_id,
        "task_id": agent.task_id,
        "config": _cfg_to_dict(agent.cfg),
        "sigma": {k: [float(x) for x in v] for k, v in agent.sigma.items()},
    }
    arrays = []
    for slot, name in _agent_array_order(agent.cfg):
        if slot == "dense":
            arrays.append((f"d.{name}", agent.dense[name]))
        elif slot == "left":
            arrays.append((f"L.{name}", agent.compact[name].left))
        else:
            arrays.append((f"R.{name}", agent.compact[name].right))
    _write_file(path, manifest, arrays, agent.dtype)


def load_agent(path):
    manifest, arrays = _read_file(path)
    if manifest.get("kind") != "agent":
        raise FormatError(f"{path}: not an agent file")
    cfg = _cfg_from_dict(manifest["config"])
    shapes = cfg.matrix_shapes()
    compact = {}
    for name, (m, n) in shapes.items():
        compact[name] = CompactMatrix(m, n, arrays[f"L.{name}"], arrays[f"R.{name}"])
    dense = {name: arrays[f"d.{name}"] for name in _agent_dense_keys(cfg)}
    sigma = {k: np.asarray(v) for k, v in manifest["sigma"].items()}
    dtype = np.dtype(manifest["dtype"])
    return DeployedAgent(manifest["morph_id"], manifest["task_id"], cfg,
                         compact, dense, sigma, dtype)
