"""Synthetic-cohort generation from a trained model.

Records are generated by drawing one (theta, H) snapshot per record from the
posterior reservoir (ensemble policy) or reusing the last snapshot (point
policy), drawing latents from the prior, and ancestral-sampling tokens.
Records sharing a snapshot are decoded together in one batch.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .corpus import Cohort, PatientRecord
from .decoder import ancestral_sample, decode_logits
from .latent import sample_prior_eva, sample_prior_evac

MODES = ("unconditional", "conditional")
POLICIES = ("ensemble", "point")
BACKGROUND = "background"

MAX_EMPTY_RESAMPLES = 5


@dataclass(frozen=True)
class GenerationRequest:
    count: int
    mode: str = "unconditional"
    conditions: tuple = ()  # names; used only in conditional mode
    y: tuple | None = None  # explicit condition vector, overrides names
    temperature: float = 1.0
    t_max: int | None = None  # cap record length below the model maximum
    seed: int = 0
    policy: str = "ensemble"

    def __post_init__(self):
        if self.count < 1:
            raise ValueError("count must be >= 1")
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.policy not in POLICIES:
            raise ValueError(f"unknown policy {self.policy!r}")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")


def condition_vector(model, names):
    """Binary y for the named conditions; the background coordinate, when
    the model has one, is always on."""
    index = {c: i for i, c in enumerate(model.condition_names)}
    y = np.zeros(len(model.condition_names))
    if BACKGROUND in index:
        y[index[BACKGROUND]] = 1.0
    for name in names:
        if name not in index:
            raise ValueError(f"unknown condition {name!r}")
        y[index[name]] = 1.0
    return y


def _request_y(model, request):
    if request.y is not None:
        y = np.asarray(request.y, dtype=float)
        if y.shape != (model.cond_dim,):
            raise ValueError("condition vector length mismatch")
        return y
    names = request.conditions if request.mode == "conditional" else ()
    return condition_vector(model, names)


def _force_single_visit(theta, cfg, z_row, rng, eos_id, pad_id, temperature):
    """Draw one non-terminal first token; used when resampling keeps
    producing immediately-terminated records."""
    logits, _ = decode_logits(theta, cfg, z_row[None, :],
                              np.zeros((1, 0), dtype=int), out_len=1)
    step = logits[0, 0] / temperature
    step[eos_id] = -np.inf
    step[pad_id] = -np.inf
    step -= step.max()
    probs = np.exp(step)
    probs /= probs.sum()
    return int(np.searchsorted(np.cumsum(probs), rng.random()))


def _draw_latents(model, snapshot, y, n, rng):
    if model.variant == "eva":
        return sample_prior_eva(model.dec_cfg.latent_dim, rng, n=n)
    _, _, z = sample_prior_evac(
        snapshot["H"], np.tile(y, (n, 1)),
        model.hyper.gamma, model.hyper.tau, rng)
    return z


def generate_cohort(model, request):
    """Sample ``request.count`` records; returns a Cohort in the same shape
    the corpus loader produces, so it can replace real data downstream."""
    if request.mode == "conditional" and model.variant != "evac":
        raise ValueError("conditional generation requires evac")
    if not model.reservoir:
        raise ValueError("model has an empty posterior reservoir")
    vocab = model.vocab
    t_cap = model.dec_cfg.t_max
    if request.t_max is not None:
        if request.t_max < 1:
            raise ValueError("t_max must be >= 1")
        t_cap = min(t_cap, request.t_max)

    y = None
    if model.variant == "evac":
        y = _request_y(model, request)

    rng = np.random.default_rng(request.seed)
    n = request.count
    if request.policy == "ensemble":
        picks = rng.integers(len(model.reservoir), size=n)
    else:
        picks = np.full(n, len(model.reservoir) - 1)

    visits_out = [None] * n
    for snap_idx in np.unique(picks):
        snapshot = model.reservoir[int(snap_idx)]
        rows = np.flatnonzero(picks == snap_idx)
        pending = rows
        for _ in range(MAX_EMPTY_RESAMPLES + 1):
            z = _draw_latents(model, snapshot, y, len(pending), rng)
            sampled = ancestral_sample(
                snapshot["theta"], model.dec_cfg, z, rng,
                eos_id=vocab.eos_id, temperature=request.temperature,
                forbid=(vocab.pad_id,))
            still_empty = []
            for row, toks in zip(pending, sampled):
                if toks:
                    visits_out[row] = toks[:t_cap]
                else:
                    still_empty.append(row)
            pending = np.asarray(still_empty, dtype=int)
            if len(pending) == 0:
                break
        for row in pending:
            # retry budget spent: force a single non-terminal first token
            z = _draw_latents(model, snapshot, y, 1, rng)
            tok = _force_single_visit(
                snapshot["theta"], model.dec_cfg, z[0], rng,
                vocab.eos_id, vocab.pad_id, request.temperature)
            visits_out[row] = [tok]

    conds = tuple(int(v) for v in y) if y is not None else ()
    records = [
        PatientRecord(
            id=f"g{i:06d}",
            visits=tuple(vocab.codes_of(t) for t in toks),
            conditions=conds,
        )
        for i, toks in enumerate(visits_out)
    ]
    return Cohort(records=records,
                  condition_names=list(model.condition_names),
                  vocab=vocab)


def generate_case_control(model, condition, n_case, n_control, seed):
    """Two cohorts: records conditioned on ``condition`` and background-only
    controls, with independent derived seeds."""
    if condition not in model.condition_names:
        raise ValueError(f"unknown condition {condition!r}")
    seeds = np.random.SeedSequence(seed).generate_state(2)
    empty = Cohort(records=[], condition_names=list(model.condition_names),
                   vocab=model.vocab)
    cases = empty
    if n_case > 0:
        cases = generate_cohort(model, GenerationRequest(
            count=n_case, mode="conditional", conditions=(condition,),
            seed=int(seeds[0])))
    controls = empty
    if n_control > 0:
        controls = generate_cohort(model, GenerationRequest(
            count=n_control, mode="conditional", conditions=(),
            seed=int(seeds[1])))
    return cases, controls
