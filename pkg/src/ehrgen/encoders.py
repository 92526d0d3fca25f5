"""Amortized inference networks.

Each latent variable gets a pair of experts producing diagonal Gaussians:
a bidirectional LSTM over the token sequence and a feed-forward network over
the binary condition vector. The two are fused exactly by a product of
experts (precisions add), which sidesteps the question of where a static
condition vector should be concatenated into a sequence; no concatenation
path exists here.

Variances come from a softplus head plus a small floor so product-of-experts
precisions cannot overflow.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit as sigmoid

from . import _nn


@dataclass
class DiagGaussian:
    """Factorized Gaussian given by per-dimension mean and variance."""

    mean: np.ndarray
    var: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=float)
        self.var = np.asarray(self.var, dtype=float)
        if self.mean.shape != self.var.shape:
            raise ValueError("mean and variance shapes differ")
        if np.any(self.var <= 0):
            raise ValueError("variance must be strictly positive")


@dataclass(frozen=True)
class EncoderConfig:
    """Sizes for one latent variable's pair of encoders."""

    vocab_size: int
    cond_dim: int
    out_dim: int
    embed_dim: int = 32
    hidden: int = 64
    cond_hidden: int = 32
    var_floor: float = 1e-6


# ---------------------------------------------------------------------------
# sequence expert (bi-LSTM)
# ---------------------------------------------------------------------------

def init_sequence_encoder(cfg, rng):
    return {
        "emb": _nn.embedding_init(rng, cfg.vocab_size, cfg.embed_dim),
        "fwd": _nn.lstm_init(rng, cfg.embed_dim, cfg.hidden),
        "bwd": _nn.lstm_init(rng, cfg.embed_dim, cfg.hidden),
        "head_mean": _nn.dense_init(rng, 2 * cfg.hidden, cfg.out_dim),
        "head_var": _nn.dense_init(rng, 2 * cfg.hidden, cfg.out_dim),
    }


def encode_sequence(params, cfg, tokens, mask):
    """Diagonal Gaussian from the concatenated final states of both
    directions. Masked (PAD) positions never influence the output."""
    mask = np.asarray(mask, dtype=float)
    if np.any(mask.sum(axis=-1) < 1):
        raise ValueError("sequence encoder needs at least one unmasked step")
    emb, emb_cache = _nn.embedding(params["emb"], tokens)
    _, h_f, cache_f = _nn.lstm_forward(params["fwd"], emb, mask)
    emb_rev = emb[:, ::-1]
    mask_rev = mask[:, ::-1]
    _, h_b, cache_b = _nn.lstm_forward(params["bwd"], emb_rev, mask_rev)
    pooled = np.concatenate([h_f, h_b], axis=1)
    mean, cache_m = _nn.dense(params["head_mean"], pooled)
    pre, cache_v = _nn.dense(params["head_var"], pooled)
    var = _nn.softplus(pre) + cfg.var_floor
    cache = (cfg, emb_cache, cache_f, cache_b, cache_m, cache_v, pre)
    return DiagGaussian(mean, var), cache


def encode_sequence_backward(cache, dmean, dvar):
    cfg, emb_cache, cache_f, cache_b, cache_m, cache_v, pre = cache
    dpre = dvar * sigmoid(pre)
    g_m, dpool_m = _nn.dense_backward(cache_m, dmean)
    g_v, dpool_v = _nn.dense_backward(cache_v, dpre)
    dpool = dpool_m + dpool_v
    H = dpool.shape[1] // 2
    g_f, dx_f = _nn.lstm_backward(cache_f, dh_last=dpool[:, :H])
    g_b, dx_b = _nn.lstm_backward(cache_b, dh_last=dpool[:, H:])
    demb = dx_f + dx_b[:, ::-1]
    g_e = _nn.embedding_backward(emb_cache, demb)
    return {
        "emb": g_e,
        "fwd": g_f,
        "bwd": g_b,
        "head_mean": g_m,
        "head_var": g_v,
    }


# ---------------------------------------------------------------------------
# condition expert (feed-forward)
# ---------------------------------------------------------------------------

def init_condition_encoder(cfg, rng):
    return {
        "l1": _nn.dense_init(rng, cfg.cond_dim, cfg.cond_hidden),
        "head_mean": _nn.dense_init(rng, cfg.cond_hidden, cfg.out_dim),
        "head_var": _nn.dense_init(rng, cfg.cond_hidden, cfg.out_dim),
    }


def encode_conditions(params, cfg, y):
    y = np.asarray(y, dtype=float)
    a, cache_1 = _nn.dense(params["l1"], y)
    h = np.tanh(a)
    mean, cache_m = _nn.dense(params["head_mean"], h)
    pre, cache_v = _nn.dense(params["head_var"], h)
    var = _nn.softplus(pre) + cfg.var_floor
    cache = (cfg, cache_1, h, cache_m, cache_v, pre)
    return DiagGaussian(mean, var), cache


def encode_conditions_backward(cache, dmean, dvar):
    cfg, cache_1, h, cache_m, cache_v, pre = cache
    dpre = dvar * sigmoid(pre)
    g_m, dh_m = _nn.dense_backward(cache_m, dmean)
    g_v, dh_v = _nn.dense_backward(cache_v, dpre)
    da = (dh_m + dh_v) * (1.0 - h * h)
    g_1, _ = _nn.dense_backward(cache_1, da)
    return {"l1": g_1, "head_mean": g_m, "head_var": g_v}


# ---------------------------------------------------------------------------
# product of experts
# ---------------------------------------------------------------------------

def poe_combine(g1, g2):
    """Fuse two diagonal Gaussians by adding precisions.

    variance = 1 / (1/v1 + 1/v2); mean = variance * (m1/v1 + m2/v2).
    """
    if g1.mean.shape != g2.mean.shape:
        raise ValueError("experts must have equal dimensions")
    if np.any(g1.var <= 0) or np.any(g2.var <= 0):
        raise ValueError("variance must be strictly positive")
    prec = 1.0 / g1.var + 1.0 / g2.var
    var = 1.0 / prec
    mean = var * (g1.mean / g1.var + g2.mean / g2.var)
    return DiagGaussian(mean, var)


def poe_combine_backward(g1, g2, out, dmean, dvar):
    """Gradients of the fused (mean, var) w.r.t. both experts' (mean, var)."""
    r1 = out.var / g1.var
    r2 = out.var / g2.var
    dm1 = dmean * r1
    dm2 = dmean * r2
    dv1 = dvar * r1 * r1 + dmean * (out.mean - g1.mean) * r1 / g1.var
    dv2 = dvar * r2 * r2 + dmean * (out.mean - g2.mean) * r2 / g2.var
    return dm1, dv1, dm2, dv2


# ---------------------------------------------------------------------------
# reparameterized sampling
# ---------------------------------------------------------------------------

def reparam_sample(g, rng):
    """mean + sqrt(var) * eta with eta ~ N(0, I)."""
    eta = rng.standard_normal(g.mean.shape)
    return sample_with_eta(g, eta)


def sample_with_eta(g, eta):
    return g.mean + np.sqrt(g.var) * eta


def sample_with_eta_backward(g, eta, dout):
    """Gradients of the sample w.r.t. (mean, var) for fixed noise."""
    dmean = dout
    dvar = dout * eta / (2.0 * np.sqrt(g.var))
    return dmean, dvar
