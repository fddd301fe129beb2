"""Task and morphology embeddings plus TopK-softmax routing gates.

The task embedding is a hashed bag of instruction tokens (FNV-1a 64-bit
into 64 buckets, L2-normalized): deterministic, dependency-free, and
instructions that share words land near each other, which is the only
property the routing mechanism relies on.
"""
from __future__ import annotations

import re

import numpy as np

from . import autodiff as ad
from .errors import ContractViolationError
from .linalg import softmax

EMBED_DIM = 64
GATE_HIDDEN = 64
MORPH_HIDDEN = 32
TOKEN_HASH = "fnv1a64"  # recorded in checkpoint manifests

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_TOKEN_RE = re.compile(r"[a-z0-9]+")


def _fnv1a64(token):
    h = _FNV_OFFSET
    for b in token.encode("utf-8"):
        h = ((h ^ b) * _FNV_PRIME) & 0xFFFFFFFFFFFFFFFF
    return h


def embed_task(instruction):
    """Hashed bag-of-tokens embedding of an instruction string, unit L2 norm."""
    tokens = _TOKEN_RE.findall(instruction.lower())
    if not tokens:
        raise ContractViolationError("instruction has no tokens")
    vec = np.zeros(EMBED_DIM)
    for tok in tokens:
        vec[_fnv1a64(tok) % EMBED_DIM] += 1.0
    return vec / np.linalg.norm(vec)


def init_morph_encoder(rng):
    """Per-limb MLP (6 -> 32 -> 32, tanh) + pooled linear head to EMBED_DIM."""
    def xav(m, n):
        b = np.sqrt(6.0 / (m + n))
        return rng.uniform(-b, b, size=(m, n))

    return {
        "w1": xav(6, MORPH_HIDDEN), "b1": np.zeros(MORPH_HIDDEN),
        "w2": xav(MORPH_HIDDEN, MORPH_HIDDEN), "b2": np.zeros(MORPH_HIDDEN),
        "w3": xav(2 * MORPH_HIDDEN, EMBED_DIM), "b3": np.zeros(EMBED_DIM),
    }


def embed_morph(morph, params):
    """Morphology embedding: shared limb MLP, mean+max pool, linear head."""
    from .envs import limb_context  # context features double as encoder input

    feats = limb_context(morph)
    h = np.tanh(feats @ params["w1"] + params["b1"])
    h = np.tanh(h @ params["w2"] + params["b2"])
    pooled = np.concatenate([h.mean(axis=0), h.max(axis=0)])
    return pooled @ params["w3"] + params["b3"]


def embed_morph_t(morph, t):
    """Tensor version of embed_morph over parameter tensors `t`."""
    from .envs import limb_context

    feats = ad.constant(limb_context(morph))
    h = (feats @ t["w1"] + t["b1"]).tanh()
    h = (h @ t["w2"] + t["b2"]).tanh()
    mean_pool = h.mean(axis=0)
    # max-pool indices taken from data; gradient flows to the argmax rows
    idx = np.argmax(h.data, axis=0)
    max_pool = h[idx, np.arange(h.shape[1])]
    pooled = ad.concat([mean_pool, max_pool], axis=0)
    return pooled @ t["w3"] + t["b3"]


def init_gate(n_out, rng):
    """Two-layer perceptron EMBED_DIM -> GATE_HIDDEN (tanh) -> n_out."""
    def xav(m, n):
        b = np.sqrt(6.0 / (m + n))
        return rng.uniform(-b, b, size=(m, n))

    return {
        "w1": xav(EMBED_DIM, GATE_HIDDEN), "b1": np.zeros(GATE_HIDDEN),
        "w2": xav(GATE_HIDDEN, n_out), "b2": np.zeros(n_out),
    }


def topk_support(logits, k):
    """Indices of the k largest logits, ties broken toward lower index."""
    logits = np.asarray(logits)
    if not (1 <= k <= logits.shape[-1]):
        raise ContractViolationError(f"k={k} outside [1, {logits.shape[-1]}]")
    order = np.argsort(-logits, kind="stable")
    return np.sort(order[:k])


def gate_logits(e, params):
    return np.tanh(e @ params["w1"] + params["b1"]) @ params["w2"] + params["b2"]


def gate_forward(e, params, k):
    """Sparse routing weights: softmax over the TopK logits, zero elsewhere."""
    logits = gate_logits(e, params)
    support = topk_support(logits, k)
    out = np.zeros_like(logits)
    out[support] = softmax(logits[support])
    return out


def gate_forward_t(e_t, t, k):
    """Tensor version; TopK support selection itself is non-differentiable."""
    logits = (e_t @ t["w1"] + t["b1"]).tanh() @ t["w2"] + t["b2"]
    support = topk_support(logits.data, k)
    mask = np.zeros(logits.shape, dtype=bool)
    mask[support] = True
    masked = ad.where(mask, logits, ad.constant(np.full(logits.shape, -np.inf)))
    return ad.softmax(masked)
