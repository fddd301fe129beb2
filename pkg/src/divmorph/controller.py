"""Morphology-aware transformer policy over factorized (or dense) weights.

Tokens are per-limb observation+context vectors; pre-norm attention and
FFN blocks mix them; global observations are encoded by a small MLP and
concatenated to every node feature before a shared low-rank decoder
produces per-limb Gaussian action means.  The critic is a dense MLP on
the mean-pooled enriched features.

Shape convention: weights are stored input-dim x output-dim and applied
as row-vector products y = x @ W (the factorized projections act on node
embeddings from the right).
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import ContractViolationError
from .factorized import DiversionConfig, FactorizedMatrix, assemble_sigma, materialize_t, reconstruct
from .gating import (
    EMBED_DIM,
    embed_morph,
    embed_morph_t,
    embed_task,
    gate_forward,
    gate_forward_t,
    init_gate,
    init_morph_encoder,
)
from .linalg import SkewParam, thin_svd

LOGSTD_MIN, LOGSTD_MAX = -3.0, 1.0
LN_EPS = 1e-6
_LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass
class ControllerConfig:
    embed_dim: int = 128          # D
    heads: int = 2
    head_dim: int = 8             # d; heads*head_dim is each attention block's rank
    ffn_dim: int = 128
    layers: int = 2
    limb_obs_dim: int = 9
    global_obs_dim: int = 4
    global_hidden: int = 32
    global_dim: int = 32          # D_g
    dec_hidden: int = 16          # decoder factor rank
    value_hidden: int = 64
    max_limbs: int = 8
    profile: str = "fidelity"
    diversion: dict = field(default_factory=dict)  # rank -> DiversionConfig

    @property
    def attn_dim(self):
        return self.heads * self.head_dim

    def matrix_shapes(self):
        """Ordered name -> (m, n) map of all factorized matrix slots."""
        d, hd, dff = self.embed_dim, self.attn_dim, self.ffn_dim
        shapes = {}
        for l in range(self.layers):
            shapes[f"l{l}.q"] = (d, hd)
            shapes[f"l{l}.k"] = (d, hd)
            shapes[f"l{l}.v"] = (d, hd)
            shapes[f"l{l}.o"] = (hd, d)
            shapes[f"l{l}.in"] = (d, dff)
            shapes[f"l{l}.out"] = (dff, d)
        shapes["dcd"] = (d + self.global_dim, self.dec_hidden)
        return shapes

    def dconf(self, name):
        m, n = self.matrix_shapes()[name]
        rank = min(m, n)
        if rank not in self.diversion:
            raise ContractViolationError(f"no DiversionConfig for rank-{rank} matrix {name}")
        return self.diversion[rank]


PROFILES = {
    "fidelity": {
        16: DiversionConfig(8, 4, 4, 2, 2),
        128: DiversionConfig(96, 16, 16, 4, 4),
    },
    "compact": {
        16: DiversionConfig(8, 4, 4, 2, 2),
        128: DiversionConfig(16, 56, 56, 4, 4),
    },
}


def make_config(profile="fidelity", **overrides):
    if profile not in PROFILES:
        raise ContractViolationError(f"unknown profile {profile!r}")
    cfg = ControllerConfig(profile=profile, diversion=dict(PROFILES[profile]), **overrides)
    return cfg


@dataclass
class ActionDistribution:
    """Diagonal Gaussian over pre-clamp per-limb torque commands."""

    mean: np.ndarray
    std: np.ndarray

    def sample(self, rng):
        raw = self.mean + self.std * rng.standard_normal(self.mean.shape)
        return np.clip(raw, -1.0, 1.0), raw

    def log_prob(self, actions):
        z = (np.asarray(actions) - self.mean) / self.std
        return float(np.sum(-0.5 * z**2 - np.log(self.std) - 0.5 * _LOG_2PI))

    def entropy(self):
        return float(np.sum(0.5 * (1.0 + _LOG_2PI) + np.log(self.std)))


class Controller:
    """Parameter container for either the dense teacher or the factorized student.

    `params` maps flat names to numpy arrays (the single source of truth;
    optimizers mutate these in place between forward passes).  Square-factor
    SVD seeds live in `seeds` and are frozen constants.
    """

    def __init__(self, cfg, factorized, params, seeds):
        self.cfg = cfg
        self.factorized = factorized
        self.params = params
        self.seeds = seeds

    def fm(self, name):
        m, n = self.cfg.matrix_shapes()[name]
        r = min(m, n)
        return FactorizedMatrix(
            m, n, self.cfg.dconf(name),
            tall=self.params[f"fac.{name}.tall"],
            seed=self.seeds[name],
            skew=SkewParam(r, self.params[f"fac.{name}.skew"]),
            square_is_u=m < n,
        )

    def tensors(self):
        return {k: ad.Tensor(v) for k, v in self.params.items()}

    def copy(self):
        return Controller(self.cfg, self.factorized,
                          {k: v.copy() for k, v in self.params.items()},
                          {k: v.copy() for k, v in self.seeds.items()})


def _xavier(rng, m, n):
    b = np.sqrt(6.0 / (m + n))
    return rng.uniform(-b, b, size=(m, n))


def init_controller(cfg, rng, factorized=True):
    """Seed-deterministic parameter initialization (fixed draw order)."""
    from .factorized import init_factorized

    d = cfg.embed_dim
    params, seeds = {}, {}
    params["token.w"] = _xavier(rng, cfg.limb_obs_dim, d)
    params["token.b"] = np.zeros(d)
    shapes = cfg.matrix_shapes()
    for name, (m, n) in shapes.items():
        if factorized:
            fmat = init_factorized(m, n, cfg.dconf(name), rng)
            params[f"fac.{name}.tall"] = fmat.tall
            params[f"fac.{name}.skew"] = fmat.skew.upper
            seeds[name] = fmat.seed
        else:
            params[f"w.{name}"] = _xavier(rng, m, n)
    for l in range(cfg.layers):
        params[f"l{l}.ln1.g"] = np.ones(d)
        params[f"l{l}.ln1.b"] = np.zeros(d)
        params[f"l{l}.ln2.g"] = np.ones(d)
        params[f"l{l}.ln2.b"] = np.zeros(d)
        params[f"l{l}.b1"] = np.zeros(cfg.ffn_dim)
        params[f"l{l}.b2"] = np.zeros(d)
    params["gobs.w1"] = _xavier(rng, cfg.global_obs_dim, cfg.global_hidden)
    params["gobs.b1"] = np.zeros(cfg.global_hidden)
    params["gobs.w2"] = _xavier(rng, cfg.global_hidden, cfg.global_dim)
    params["gobs.b2"] = np.zeros(cfg.global_dim)
    # Small policy-readout init keeps initial pre-clamp action means near
    # zero; large initial means start inside the clamp's flat region where
    # all samples collapse to the same torque and the reward carries no
    # gradient signal.
    params["dec.r"] = rng.uniform(-1, 1, size=cfg.dec_hidden) * 0.01
    params["dec.b"] = np.zeros(1)
    params["logstd"] = np.full(cfg.max_limbs, -0.5)
    dv = d + cfg.global_dim
    params["value.w1"] = _xavier(rng, dv, cfg.value_hidden)
    params["value.b1"] = np.zeros(cfg.value_hidden)
    params["value.w2"] = _xavier(rng, cfg.value_hidden, 1)
    params["value.b2"] = np.zeros(1)
    if factorized:
        for name in shapes:
            dc = cfg.dconf(name)
            for tag, nt in (("kappa", dc.n_morph_tailor), ("tau", dc.n_task_tailor)):
                g = init_gate(nt, rng)
                for k, v in g.items():
                    params[f"gate.{name}.{tag}.{k}"] = v
        enc = init_morph_encoder(rng)
        for k, v in enc.items():
            params[f"enc.{k}"] = v
    return Controller(cfg, factorized, params, seeds)


# ---------------------------------------------------------------------------
# sigma routing
# ---------------------------------------------------------------------------

def compute_sigmas(ctl, morph, task):
    """Gate-assembled sigma vector per factorized matrix (numpy path)."""
    cfg = ctl.cfg
    e_tau = embed_task(task.instruction)
    e_kap = embed_morph(morph, _sub(ctl.params, "enc."))
    out = {}
    for name in cfg.matrix_shapes():
        dc = cfg.dconf(name)
        gk = gate_forward(e_kap, _sub(ctl.params, f"gate.{name}.kappa."), dc.k_morph)
        gt = gate_forward(e_tau, _sub(ctl.params, f"gate.{name}.tau."), dc.k_task)
        out[name] = assemble_sigma(dc, gk, gt)
    return out


def compute_sigmas_t(ctl, t, morph, task):
    """Tensor path; gradients flow into gates and the morphology encoder."""
    cfg = ctl.cfg
    e_tau = ad.constant(embed_task(task.instruction))
    e_kap = embed_morph_t(morph, _sub(t, "enc."))
    out = {}
    for name in cfg.matrix_shapes():
        dc = cfg.dconf(name)
        gk = gate_forward_t(e_kap, _sub(t, f"gate.{name}.kappa."), dc.k_morph)
        gt = gate_forward_t(e_tau, _sub(t, f"gate.{name}.tau."), dc.k_task)
        ones = ad.constant(np.ones(dc.n_learngene))
        out[name] = ad.concat([ones, gk, gt], axis=0)
    return out


def _sub(d, prefix):
    return {k[len(prefix):]: v for k, v in d.items() if k.startswith(prefix)}


def materialize_weights(ctl, sigmas=None):
    """Dense numpy weight matrices for every factorized slot."""
    if not ctl.factorized:
        return {name: ctl.params[f"w.{name}"] for name in ctl.cfg.matrix_shapes()}
    return {name: reconstruct(ctl.fm(name), sigmas[name]) for name in ctl.cfg.matrix_shapes()}


def materialize_weights_t(ctl, t, sigmas_t=None):
    if not ctl.factorized:
        return {name: t[f"w.{name}"] for name in ctl.cfg.matrix_shapes()}
    out = {}
    for name in ctl.cfg.matrix_shapes():
        fmat = ctl.fm(name)
        out[name] = materialize_t(fmat, t[f"fac.{name}.tall"], t[f"fac.{name}.skew"], sigmas_t[name])
    return out


# ---------------------------------------------------------------------------
# forward pass
# ---------------------------------------------------------------------------

def _layernorm(x, g, b):
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    return (x - mu) / (var + LN_EPS).sqrt() * g + b


def _proj(x, w, B, N):
    """(B, N, D) @ (D, K) as one flat GEMM (much faster than batched matmul)."""
    return (x.reshape(B * N, x.shape[-1]) @ w).reshape(B, N, w.shape[-1])


def forward_t(ctl, t, weights, obs, gobs, mask):
    """Batched forward pass on the autodiff graph.

    obs: (B, N, limb_obs_dim); gobs: (B, global_obs_dim); mask: (B, N) in
    {0, 1} marking real limbs.  Returns (mean (B, N), logstd (N,),
    value (B,)) as Tensors; entries at padded positions are meaningless
    and must be masked by the caller.
    """
    cfg = ctl.cfg
    B, N, _ = obs.shape
    h, dh = cfg.heads, cfg.head_dim
    obs_c = ad.constant(obs)
    x = _proj(obs_c, t["token.w"], B, N) + t["token.b"]
    key_mask = mask.astype(bool)[:, None, None, :]  # (B,1,1,N) over attention keys
    neg_inf = ad.constant(np.full((1,), -np.inf))
    for l in range(cfg.layers):
        xn = _layernorm(x, t[f"l{l}.ln1.g"], t[f"l{l}.ln1.b"])
        q = _proj(xn, weights[f"l{l}.q"], B, N).reshape(B, N, h, dh).transpose((0, 2, 1, 3))
        k = _proj(xn, weights[f"l{l}.k"], B, N).reshape(B, N, h, dh).transpose((0, 2, 1, 3))
        v = _proj(xn, weights[f"l{l}.v"], B, N).reshape(B, N, h, dh).transpose((0, 2, 1, 3))
        scores = (q @ k.swapaxes(-1, -2)) * (1.0 / np.sqrt(dh))
        scores = ad.where(key_mask, scores, neg_inf)
        attn = ad.softmax(scores, axis=-1)
        av = (attn @ v).transpose((0, 2, 1, 3)).reshape(B, N, h * dh)
        x = x + _proj(av, weights[f"l{l}.o"], B, N)
        xn2 = _layernorm(x, t[f"l{l}.ln2.g"], t[f"l{l}.ln2.b"])
        ff = ad.gelu(_proj(xn2, weights[f"l{l}.in"], B, N) + t[f"l{l}.b1"])
        x = x + _proj(ff, weights[f"l{l}.out"], B, N) + t[f"l{l}.b2"]

    genc = (gobs_t := ad.constant(gobs)) @ t["gobs.w1"] + t["gobs.b1"]
    genc = genc.tanh() @ t["gobs.w2"] + t["gobs.b2"]
    genc_b = genc.reshape(B, 1, cfg.global_dim) + ad.constant(np.zeros((B, N, cfg.global_dim)))
    enriched = ad.concat([x, genc_b], axis=-1)

    dec_h = _proj(enriched, weights["dcd"], B, N)
    mean = dec_h @ t["dec.r"] + t["dec.b"]

    ls = t["logstd"][0:N]
    ls = ad.where(ls.data < LOGSTD_MIN, ad.constant(np.full(N, LOGSTD_MIN)), ls)
    ls = ad.where(ls.data > LOGSTD_MAX, ad.constant(np.full(N, LOGSTD_MAX)), ls)

    m3 = ad.constant(mask[:, :, None])
    pooled = (enriched * m3).sum(axis=1) / ad.constant(mask.sum(axis=1, keepdims=True))
    val = (pooled @ t["value.w1"] + t["value.b1"]).tanh() @ t["value.w2"] + t["value.b2"]
    return mean, ls, val.reshape(B)


def forward_np(ctl, p, weights, obs, gobs, mask):
    """Plain-numpy mirror of forward_t for gradient-free inference.

    Same operation order as forward_t so results agree bit-for-bit; used on
    hot paths (episode rollouts, evaluation) where building the autodiff
    graph would dominate the cost.  p is the raw parameter dict; weights are
    pre-materialized dense matrices.
    """
    cfg = ctl.cfg
    B, N, _ = obs.shape
    h, dh = cfg.heads, cfg.head_dim

    def proj(x, w):
        return (x.reshape(B * N, x.shape[-1]) @ w).reshape(B, N, w.shape[-1])

    def ln(x, g, b):
        mu = x.mean(axis=-1, keepdims=True)
        var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
        return (x - mu) / np.sqrt(var + LN_EPS) * g + b

    x = proj(obs, p["token.w"]) + p["token.b"]
    key_mask = mask.astype(bool)[:, None, None, :]
    for l in range(cfg.layers):
        xn = ln(x, p[f"l{l}.ln1.g"], p[f"l{l}.ln1.b"])
        q = proj(xn, weights[f"l{l}.q"]).reshape(B, N, h, dh).transpose((0, 2, 1, 3))
        k = proj(xn, weights[f"l{l}.k"]).reshape(B, N, h, dh).transpose((0, 2, 1, 3))
        v = proj(xn, weights[f"l{l}.v"]).reshape(B, N, h, dh).transpose((0, 2, 1, 3))
        scores = (q @ k.swapaxes(-1, -2)) * (1.0 / np.sqrt(dh))
        scores = np.where(key_mask, scores, -np.inf)
        e = np.exp(scores - np.max(scores, axis=-1, keepdims=True))
        attn = e / e.sum(axis=-1, keepdims=True)
        av = (attn @ v).transpose((0, 2, 1, 3)).reshape(B, N, h * dh)
        x = x + proj(av, weights[f"l{l}.o"])
        xn2 = ln(x, p[f"l{l}.ln2.g"], p[f"l{l}.ln2.b"])
        ff = _gelu_np(proj(xn2, weights[f"l{l}.in"]) + p[f"l{l}.b1"])
        x = x + proj(ff, weights[f"l{l}.out"]) + p[f"l{l}.b2"]

    genc = np.tanh(gobs @ p["gobs.w1"] + p["gobs.b1"]) @ p["gobs.w2"] + p["gobs.b2"]
    genc_b = genc.reshape(B, 1, cfg.global_dim) + np.zeros((B, N, cfg.global_dim))
    enriched = np.concatenate([x, genc_b], axis=-1)

    dec_h = proj(enriched, weights["dcd"])
    mean = dec_h @ p["dec.r"] + p["dec.b"]

    ls = np.clip(p["logstd"][0:N], LOGSTD_MIN, LOGSTD_MAX)

    m3 = mask[:, :, None]
    pooled = (enriched * m3).sum(axis=1) / mask.sum(axis=1, keepdims=True)
    val = np.tanh(pooled @ p["value.w1"] + p["value.b1"]) @ p["value.w2"] + p["value.b2"]
    return mean, ls, val.reshape(B)


def _gelu_np(x):
    c = float(np.sqrt(2.0 / np.pi))
    return 0.5 * x * (1.0 + np.tanh(c * (x + 0.044715 * x**3)))


def forward(ctl, morph, task, obs, gobs, sigmas=None, weights=None):
    """Single-state convenience forward: returns (ActionDistribution, value).

    `weights` overrides the reconstructed matrices with pre-materialized
    dense ones (used to verify reconstruction-on-the-fly equivalence).
    """
    obs = np.asarray(obs, dtype=np.float64)
    gobs = np.asarray(gobs, dtype=np.float64)
    n = morph.n_limbs
    if obs.shape != (n, ctl.cfg.limb_obs_dim):
        raise ContractViolationError(f"obs shape {obs.shape} != ({n}, {ctl.cfg.limb_obs_dim})")
    if not (np.all(np.isfinite(obs)) and np.all(np.isfinite(gobs))):
        raise ContractViolationError("non-finite observation")
    with ad.no_grad():
        t = ctl.tensors()
        if weights is None:
            if ctl.factorized and sigmas is None:
                sigmas = compute_sigmas(ctl, morph, task)
            w_np = materialize_weights(ctl, sigmas)
        else:
            w_np = weights
        w_t = {k: ad.as_tensor(v) for k, v in w_np.items()}
        mean, ls, val = forward_t(ctl, t, w_t, obs[None], gobs[None], np.ones((1, n)))
    dist = ActionDistribution(mean.data[0].copy(), np.exp(ls.data).copy())
    return dist, float(val.data[0])


def gaussian_logp_t(mean, logstd, actions, mask):
    """Summed diagonal-Gaussian log density over real limbs, per batch row."""
    a = ad.constant(actions)
    z = (a - mean) * (-logstd).exp()
    per = -0.5 * z**2 - logstd - 0.5 * _LOG_2PI
    return (per * ad.constant(mask)).sum(axis=1)


def gaussian_entropy_t(logstd, mask):
    ent_per = logstd + 0.5 * (1.0 + _LOG_2PI)
    return (ad.constant(mask) @ ent_per.reshape(-1, 1)).reshape(-1)


def gaussian_kl_t(mean_t, std_t, mean_s, logstd_s, mask):
    """KL(teacher || student) per batch row, summed over real limbs.

    Teacher statistics are fixed numpy arrays; student mean/logstd are
    Tensors.
    """
    mt = ad.constant(mean_t)
    st = np.asarray(std_t)
    inv_s = (-logstd_s).exp()
    term = (logstd_s - ad.constant(np.log(st))
            + (ad.constant(st**2) + (mt - mean_s) ** 2) * (0.5 * inv_s**2)
            - 0.5)
    return (term * ad.constant(mask)).sum(axis=1)
