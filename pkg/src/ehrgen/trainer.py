"""Hybrid training: SGMCMC over global weights, amortized VI for locals.

One iteration draws a minibatch, samples the local latents from their
variational posteriors, and then applies two updates computed from that same
forward pass: a preconditioned SGLD step on the global variables (decoder
weights theta and, for the conditional variant, the condition-embedding
matrix H), and an Adam step on the encoder parameters phi descending the
local objective J. After burn-in, thinned snapshots of (theta, H) are kept
in a small reservoir; generation later draws from it to realize weight
uncertainty.

Sign conventions: J is minimized; its negation is the per-batch evidence
lower bound. For the unconditional variant the latent cross term is the
closed-form E_q[ln N(z; 0, I)], so -J equals reconstruction minus
KL(q(z|x) || N(0, I)) exactly.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from . import _nn
from .decoder import DecoderConfig, init_decoder_params, ll_and_grads
from .encoders import (
    EncoderConfig,
    encode_conditions,
    encode_conditions_backward,
    encode_sequence,
    encode_sequence_backward,
    init_condition_encoder,
    init_sequence_encoder,
    poe_combine,
    poe_combine_backward,
    sample_with_eta,
    sample_with_eta_backward,
)
from .latent import HierarchyHyper, latent_log_density_grads
from .model import ModelParts, TrainedModel

VARIANTS = ("eva", "evac")

LN_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class TrainConfig:
    variant: str = "eva"
    latent_dim: int = 16
    n_iters: int = 2000
    minibatch: int = 32
    lr_phi: float = 1e-3
    lr_global: float = 1e-3
    psgld_alpha: float = 0.99
    psgld_lambda: float = 1e-5
    temperature: float = 1.0
    burn_in: int | None = None  # default: half the iteration budget
    thin: int = 200
    reservoir_size: int = 10
    clip_norm: float = 10.0
    embed_dim: int = 32
    hidden: int = 64
    cond_hidden: int = 32
    tau: float = 0.1
    gamma: float = 0.1
    log_every: int = 50
    seed: int = 0

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")
        # rate 0 is allowed so "no learning" degenerates to the identity
        if self.lr_phi < 0 or self.lr_global < 0:
            raise ValueError("learning rates must be non-negative")
        if self.minibatch < 1 or self.n_iters < 1:
            raise ValueError("minibatch and n_iters must be >= 1")
        if self.reservoir_size < 1 or self.thin < 1:
            raise ValueError("reservoir_size and thin must be >= 1")
        if not (0.0 <= self.psgld_alpha <= 1.0):
            raise ValueError("psgld_alpha must lie in [0, 1]")
        if self.psgld_lambda <= 0:
            raise ValueError("psgld_lambda must be positive")
        if self.temperature < 0:
            raise ValueError("temperature must be non-negative")

    @property
    def burn_in_iters(self):
        return self.n_iters // 2 if self.burn_in is None else self.burn_in

    @property
    def hyper(self):
        return HierarchyHyper(tau=self.tau, gamma=self.gamma)


@dataclass
class ElboReport:
    """Per-batch objective decomposition (sums over the batch records)."""

    recon: float
    cross: float
    entropy: float
    kl_b: float
    kl_w: float
    total: float
    kl_fraction: float

    @classmethod
    def from_terms(cls, recon, cross, entropy, kl_b, kl_w):
        total = -(recon + cross + entropy - kl_b - kl_w)
        # everything the bound loses to posterior divergence, as a fraction
        kl_total = total + recon
        frac = kl_total / max(abs(total), 1e-12)
        return cls(recon=float(recon), cross=float(cross),
                   entropy=float(entropy), kl_b=float(kl_b),
                   kl_w=float(kl_w), total=float(total),
                   kl_fraction=float(frac))

    def as_dict(self):
        return {
            "recon": self.recon, "cross": self.cross,
            "entropy": self.entropy, "kl_b": self.kl_b, "kl_w": self.kl_w,
            "total": self.total, "kl_fraction": self.kl_fraction,
        }


class TrainingDiverged(RuntimeError):
    """Objective became non-finite; carries the last finite report."""

    def __init__(self, iteration, last_report):
        super().__init__(f"objective non-finite at iteration {iteration}")
        self.iteration = iteration
        self.last_report = last_report


# ---------------------------------------------------------------------------
# closed-form Gaussian quantities
# ---------------------------------------------------------------------------

def kl_diag_gaussians(q, prior_mean, prior_var):
    """KL(q || N(prior_mean, prior_var I)) summed over all dimensions."""
    pv = float(prior_var)
    if pv <= 0:
        raise ValueError("prior variance must be positive")
    if np.any(q.var <= 0):
        raise ValueError("variance must be strictly positive")
    d = q.mean - prior_mean
    return float(0.5 * np.sum(q.var / pv + d * d / pv - 1.0 + np.log(pv / q.var)))


def entropy_diag_gaussian(g):
    if np.any(g.var <= 0):
        raise ValueError("variance must be strictly positive")
    return float(0.5 * np.sum(1.0 + np.log(2.0 * math.pi * g.var)))


def _check_finite(value, term):
    if not np.all(np.isfinite(value)):
        raise FloatingPointError(f"non-finite value in term '{term}'")


# ---------------------------------------------------------------------------
# posterior assembly
# ---------------------------------------------------------------------------

def init_phi(parts, rng):
    phi = {}
    for name in parts.latent_names:
        cfg = parts.enc_cfgs[name]
        group = {"seq": init_sequence_encoder(cfg, rng)}
        if parts.variant == "evac":
            group["cond"] = init_condition_encoder(cfg, rng)
        phi[name] = group
    return phi


def encode_posteriors(parts, phi, batch):
    """Variational posteriors for each latent (no caches); used at eval."""
    out = {}
    for name in parts.latent_names:
        q, _, _ = _posterior_with_caches(parts, phi, name, batch)
        out[name] = q["q"]
    return out


def _posterior_with_caches(parts, phi, name, batch):
    cfg = parts.enc_cfgs[name]
    q_seq, c_seq = encode_sequence(phi[name]["seq"], cfg, batch.tokens,
                                   batch.mask)
    if parts.variant == "eva":
        return {"q": q_seq, "q_seq": q_seq}, c_seq, None
    q_cond, c_cond = encode_conditions(phi[name]["cond"], cfg,
                                       batch.conditions)
    q = poe_combine(q_seq, q_cond)
    return {"q": q, "q_seq": q_seq, "q_cond": q_cond}, c_seq, c_cond


def _posterior_backward(parts, phi, name, qs, c_seq, c_cond, dmean, dvar):
    """Push (dmean, dvar) on the fused posterior back into encoder grads."""
    if parts.variant == "eva":
        return {"seq": encode_sequence_backward(c_seq, dmean, dvar)}
    dm_s, dv_s, dm_c, dv_c = poe_combine_backward(
        qs["q_seq"], qs["q_cond"], qs["q"], dmean, dvar)
    return {
        "seq": encode_sequence_backward(c_seq, dm_s, dv_s),
        "cond": encode_conditions_backward(c_cond, dm_c, dv_c),
    }


def draw_local_noises(rng, parts, n):
    """Fresh standard-normal reparameterization noise for each local."""
    noises = {"z": rng.standard_normal((n, parts.enc_cfgs["z"].out_dim))}
    if parts.variant == "evac":
        noises["w"] = rng.standard_normal((n, parts.enc_cfgs["w"].out_dim))
        noises["b"] = rng.standard_normal((n, parts.enc_cfgs["b"].out_dim))
    return noises


# ---------------------------------------------------------------------------
# objective core (single forward/backward shared by both update rules)
# ---------------------------------------------------------------------------

def _objective_core(parts, batch, theta, H, phi, noises):
    """Compute the report, phi gradients of J, and the unscaled data
    gradients for the globals, all from one pass with common noise."""
    hyper = parts.hyper
    posts, samples = {}, {}
    for name in parts.latent_names:
        qs, c_seq, c_cond = _posterior_with_caches(parts, phi, name, batch)
        posts[name] = (qs, c_seq, c_cond)
        samples[name] = sample_with_eta(qs["q"], noises[name])

    z_s = samples["z"]
    ll, g_theta_data, dz_recon = ll_and_grads(
        theta, parts.dec_cfg, z_s, batch.tokens, batch.mask)
    recon = float(ll.sum())
    _check_finite(recon, "reconstruction")

    q_z = posts["z"][0]["q"]
    entropy = entropy_diag_gaussian(q_z)
    _check_finite(entropy, "entropy")

    # per-latent gradients of J on the fused posterior (mean, var) and on
    # the drawn samples
    dmean = {n: np.zeros_like(posts[n][0]["q"].mean) for n in samples}
    dvar = {n: np.zeros_like(posts[n][0]["q"].var) for n in samples}
    dsample = {n: np.zeros_like(samples[n]) for n in samples}

    # reconstruction enters J negatively
    dsample["z"] -= dz_recon
    # entropy enters J negatively
    dvar["z"] -= 0.5 / q_z.var

    if parts.variant == "eva":
        # closed-form E_q[ln N(z; 0, I)]
        cross = float(-0.5 * np.sum(LN_2PI + q_z.mean ** 2 + q_z.var))
        dmean["z"] += q_z.mean
        dvar["z"] += 0.5
        kl_b = kl_w = 0.0
        dH_data = None
    else:
        ll_z, dz_c, dw_c, db_c, dH_data = latent_log_density_grads(
            z_s, H, batch.conditions, samples["w"], samples["b"], hyper.tau)
        cross = float(ll_z.sum())
        dsample["z"] -= dz_c
        dsample["w"] -= dw_c
        dsample["b"] -= db_c
        q_w = posts["w"][0]["q"]
        q_b = posts["b"][0]["q"]
        kl_w = kl_diag_gaussians(q_w, 0.0, 1.0)
        kl_b = kl_diag_gaussians(q_b, 0.0, hyper.gamma)
        dmean["w"] += q_w.mean
        dvar["w"] += 0.5 * (1.0 - 1.0 / q_w.var)
        dmean["b"] += q_b.mean / hyper.gamma
        dvar["b"] += 0.5 * (1.0 / hyper.gamma - 1.0 / q_b.var)
    _check_finite(cross, "latent cross")
    _check_finite(kl_b, "KL(b)")
    _check_finite(kl_w, "KL(w)")

    report = ElboReport.from_terms(recon, cross, entropy, kl_b, kl_w)

    phi_grads = {}
    for name in parts.latent_names:
        qs, c_seq, c_cond = posts[name]
        dm_s, dv_s = sample_with_eta_backward(qs["q"], noises[name],
                                              dsample[name])
        phi_grads[name] = _posterior_backward(
            parts, phi, name, qs, c_seq, c_cond,
            dmean[name] + dm_s, dvar[name] + dv_s)

    return report, phi_grads, samples, g_theta_data, dH_data


def local_objective(parts, batch, theta, H, phi, noises):
    """Variational objective J for the local latents and its phi gradient.

    theta and H are treated as fixed posterior samples; common random
    numbers come in through ``noises`` (one standard-normal array per
    latent), so repeated calls are deterministic.
    """
    report, phi_grads, _, _, _ = _objective_core(
        parts, batch, theta, H, phi, noises)
    return report, phi_grads


def global_grad_estimate(parts, batch, theta, H, phi, noises, n_total):
    """Single-sample estimate of the marginal log-posterior gradient for
    the globals: data term rescaled by n_total / batch size, plus the
    standard-normal prior gradient on every element."""
    _, _, _, g_theta_data, dH_data = _objective_core(
        parts, batch, theta, H, phi, noises)
    scale = n_total / len(batch)
    g_theta = _nn.tree_map(lambda g: scale * g, g_theta_data)
    _nn.tree_add_scaled(g_theta, theta, -1.0)
    g_H = None
    if parts.variant == "evac":
        g_H = scale * dH_data - H
    return g_theta, g_H


# ---------------------------------------------------------------------------
# preconditioned SGLD
# ---------------------------------------------------------------------------

@dataclass
class SamplerState:
    """Adaptive second-moment accumulator plus the kept posterior samples."""

    v: dict
    step: int = 0
    reservoir: deque = field(default_factory=deque)

    @classmethod
    def create(cls, params, reservoir_size):
        return cls(v=_nn.tree_zeros_like(params), step=0,
                   reservoir=deque(maxlen=reservoir_size))


def psgld_step(state, params, grad, step_size, temperature, rng,
               alpha=0.99, lam=1e-5):
    """One preconditioned Langevin ascent step, in place.

    V <- alpha V + (1 - alpha) g^2;  G <- 1 / (lam + sqrt(V));
    p <- p + (step/2) G g + temperature * N(0, step G).

    temperature 0 gives deterministic preconditioned ascent. The curvature
    correction term of the original method is omitted, as is common.
    """
    if step_size < 0:
        raise ValueError("step_size must be non-negative")
    walk = zip(_nn.iter_arrays(params), _nn.iter_arrays(grad),
               _nn.iter_arrays(state.v))
    for (path, p), (gpath, g), (vpath, v) in walk:
        if path != gpath or path != vpath:
            raise ValueError(f"tree mismatch: {path} / {gpath} / {vpath}")
        v *= alpha
        v += (1.0 - alpha) * g * g
        G = 1.0 / (lam + np.sqrt(v))
        p += 0.5 * step_size * G * g
        if temperature > 0:
            p += temperature * np.sqrt(step_size * G) * rng.standard_normal(
                p.shape)
    state.step += 1
    return state


# ---------------------------------------------------------------------------
# the training loop
# ---------------------------------------------------------------------------

def build_parts(config, vocab_size, cond_dim, t_max, dec_cfg=None):
    if dec_cfg is None:
        dec_cfg = DecoderConfig(vocab_size=vocab_size,
                                latent_dim=config.latent_dim, t_max=t_max)
    enc_kw = dict(vocab_size=vocab_size, cond_dim=max(cond_dim, 1),
                  embed_dim=config.embed_dim, hidden=config.hidden,
                  cond_hidden=config.cond_hidden)
    enc_cfgs = {"z": EncoderConfig(out_dim=config.latent_dim, **enc_kw)}
    if config.variant == "evac":
        if cond_dim < 1:
            raise ValueError("conditional variant needs condition columns")
        enc_cfgs["w"] = EncoderConfig(out_dim=cond_dim, **enc_kw)
        enc_cfgs["b"] = EncoderConfig(out_dim=config.latent_dim, **enc_kw)
    return ModelParts(variant=config.variant, dec_cfg=dec_cfg,
                      enc_cfgs=enc_cfgs, hyper=config.hyper)


def train(config, batch, vocab, condition_names=(), dec_cfg=None,
          metrics_sink=None, checkpoint_fn=None):
    """Run the alternating scheme over an encoded cohort.

    metrics_sink(iteration, ElboReport) is called every iteration;
    checkpoint_fn(iteration, snapshot) fires whenever a thinned posterior
    sample is stored. Raises TrainingDiverged on a non-finite objective.
    """
    n = len(batch)
    if n < 1:
        raise ValueError("empty training batch")
    t_max = batch.tokens.shape[1] - 1
    cond_dim = batch.conditions.shape[1]
    parts = build_parts(config, vocab.size, cond_dim, t_max, dec_cfg)
    if parts.dec_cfg.vocab_size != vocab.size:
        raise ValueError("decoder vocab size does not match the vocabulary")

    rng = np.random.default_rng(config.seed)
    theta = init_decoder_params(parts.dec_cfg, rng)
    H = None
    globals_ = {"theta": theta}
    if config.variant == "evac":
        H = 0.1 * rng.standard_normal((config.latent_dim, cond_dim))
        globals_["H"] = H
    phi = init_phi(parts, rng)

    adam = _nn.Adam(phi, lr=config.lr_phi)
    state = SamplerState.create(globals_, config.reservoir_size)
    burn_in = config.burn_in_iters
    history = []
    last_report = None

    for it in range(config.n_iters):
        idx = rng.choice(n, size=min(config.minibatch, n), replace=False)
        mb = batch.take(idx)
        noises = draw_local_noises(rng, parts, len(mb))

        try:
            report, phi_grads, _, g_theta_data, dH_data = _objective_core(
                parts, mb, globals_["theta"], H, phi, noises)
        except FloatingPointError as exc:
            raise TrainingDiverged(it, last_report) from exc
        if not math.isfinite(report.total):
            raise TrainingDiverged(it, last_report)

        # globals: ascend the rescaled log posterior
        scale = n / len(mb)
        g_globals = {"theta": _nn.tree_map(lambda g: scale * g, g_theta_data)}
        _nn.tree_add_scaled(g_globals["theta"], globals_["theta"], -1.0)
        if config.variant == "evac":
            g_globals["H"] = scale * dH_data - H
        _nn.clip_global_norm(g_globals, config.clip_norm)
        psgld_step(state, globals_, g_globals, config.lr_global,
                   config.temperature, rng,
                   alpha=config.psgld_alpha, lam=config.psgld_lambda)

        # locals: descend J = ascend -J
        neg_phi = _nn.tree_map(np.negative, phi_grads)
        _nn.clip_global_norm(neg_phi, config.clip_norm)
        adam.step(phi, neg_phi)

        if it >= burn_in and (it - burn_in) % config.thin == 0:
            snapshot = _nn.tree_copy(globals_)
            state.reservoir.append(snapshot)
            if checkpoint_fn is not None:
                checkpoint_fn(it, snapshot)

        last_report = report
        if metrics_sink is not None:
            metrics_sink(it, report)
        if it % config.log_every == 0 or it == config.n_iters - 1:
            history.append({"iteration": it, **report.as_dict()})

    return TrainedModel(
        variant=config.variant,
        dec_cfg=parts.dec_cfg,
        enc_cfgs=parts.enc_cfgs,
        hyper=parts.hyper,
        phi=phi,
        reservoir=list(state.reservoir),
        vocab=vocab,
        condition_names=tuple(condition_names),
        train_config=config,
        history=history,
    )
