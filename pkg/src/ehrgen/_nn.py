"""Minimal neural-net primitives in numpy with hand-written backward passes.

Everything runs in float64. Each forward function returns ``(output, cache)``
and has a matching ``*_backward`` that consumes the cache plus the upstream
gradient and returns gradients for the parameters and the inputs. Parameter
sets are plain dicts of named arrays so optimizers, clipping, and checkpoints
can treat every network uniformly.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.special import expit as sigmoid


# ---------------------------------------------------------------------------
# elementwise nonlinearities
# ---------------------------------------------------------------------------

def softplus(x):
    """log(1 + exp(x)), overflow-safe."""
    return np.logaddexp(0.0, x)


def log_softmax(x, axis=-1):
    """Log-softmax with max subtraction (naive softmax overflows)."""
    shifted = x - np.max(x, axis=axis, keepdims=True)
    return shifted - np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))


def softmax(x, axis=-1):
    return np.exp(log_softmax(x, axis=axis))


# ---------------------------------------------------------------------------
# parameter initialization
# ---------------------------------------------------------------------------

def dense_init(rng, n_in, n_out, scale=None):
    if scale is None:
        scale = 1.0 / math.sqrt(n_in)
    return {
        "W": rng.normal(0.0, scale, size=(n_in, n_out)),
        "b": np.zeros(n_out),
    }


def embedding_init(rng, n_tokens, dim, scale=0.1):
    return {"E": rng.normal(0.0, scale, size=(n_tokens, dim))}


def lstm_init(rng, n_in, n_hidden):
    """Standard LSTM cell weights; forget-gate bias starts at +1."""
    s_x = 1.0 / math.sqrt(n_in)
    s_h = 1.0 / math.sqrt(n_hidden)
    b = np.zeros(4 * n_hidden)
    b[n_hidden:2 * n_hidden] = 1.0
    return {
        "Wx": rng.normal(0.0, s_x, size=(n_in, 4 * n_hidden)),
        "Wh": rng.normal(0.0, s_h, size=(n_hidden, 4 * n_hidden)),
        "b": b,
    }


def conv1d_init(rng, kernel, n_in, n_out):
    scale = 1.0 / math.sqrt(kernel * n_in)
    return {
        "W": rng.normal(0.0, scale, size=(kernel, n_in, n_out)),
        "b": np.zeros(n_out),
    }


def conv_transpose1d_init(rng, n_in, n_out):
    # each output position is fed by exactly one tap, so fan-in is n_in
    scale = 1.0 / math.sqrt(n_in)
    return {
        "W": rng.normal(0.0, scale, size=(2, n_in, n_out)),
        "b": np.zeros(n_out),
    }


# ---------------------------------------------------------------------------
# dense / embedding
# ---------------------------------------------------------------------------

def dense(params, x):
    out = x @ params["W"] + params["b"]
    return out, (params, x)


def dense_backward(cache, dout):
    params, x = cache
    x2 = x.reshape(-1, x.shape[-1])
    d2 = dout.reshape(-1, dout.shape[-1])
    grads = {"W": x2.T @ d2, "b": d2.sum(axis=0)}
    dx = dout @ params["W"].T
    return grads, dx


def embedding(params, ids):
    out = params["E"][ids]
    return out, (params["E"].shape, ids)


def embedding_backward(cache, dout):
    shape, ids = cache
    dE = np.zeros(shape)
    np.add.at(dE, ids.reshape(-1), dout.reshape(-1, dout.shape[-1]))
    return {"E": dE}


# ---------------------------------------------------------------------------
# LSTM (mask-gated: masked steps carry state through unchanged)
# ---------------------------------------------------------------------------

def lstm_forward(params, x, mask):
    """Run an LSTM over ``x`` (B, L, E) with per-step mask (B, L).

    Masked steps leave (h, c) untouched, so the final state equals the state
    at each record's last unmasked step and the output is independent of the
    contents of masked positions.

    Returns (h_seq (B, L, H), h_last (B, H), cache).
    """
    B, L, _ = x.shape
    H = params["Wh"].shape[0]
    h = np.zeros((B, H))
    c = np.zeros((B, H))
    h_seq = np.zeros((B, L, H))
    steps = []
    for t in range(L):
        m = mask[:, t:t + 1]
        a = x[:, t] @ params["Wx"] + h @ params["Wh"] + params["b"]
        i = sigmoid(a[:, :H])
        f = sigmoid(a[:, H:2 * H])
        g = np.tanh(a[:, 2 * H:3 * H])
        o = sigmoid(a[:, 3 * H:])
        c_cand = f * c + i * g
        tc = np.tanh(c_cand)
        h_cand = o * tc
        c_new = m * c_cand + (1.0 - m) * c
        h_new = m * h_cand + (1.0 - m) * h
        steps.append((h, c, i, f, g, o, c_cand, tc, m))
        h, c = h_new, c_new
        h_seq[:, t] = h
    cache = (params, x, steps)
    return h_seq, h, cache


def lstm_backward(cache, dh_seq=None, dh_last=None):
    """Backprop through ``lstm_forward``.

    ``dh_seq`` is the gradient w.r.t. the full hidden sequence (may be None),
    ``dh_last`` w.r.t. the final state (may be None). Returns (grads, dx).
    """
    params, x, steps = cache
    B, L, E = x.shape
    H = params["Wh"].shape[0]
    dWx = np.zeros_like(params["Wx"])
    dWh = np.zeros_like(params["Wh"])
    db = np.zeros_like(params["b"])
    dx = np.zeros_like(x)
    dh = np.zeros((B, H)) if dh_last is None else dh_last.copy()
    dc = np.zeros((B, H))
    for t in range(L - 1, -1, -1):
        h_prev, c_prev, i, f, g, o, c_cand, tc, m = steps[t]
        if dh_seq is not None:
            dh = dh + dh_seq[:, t]
        dh_cand = m * dh
        dh_carry = (1.0 - m) * dh
        dc_cand = m * dc
        dc_carry = (1.0 - m) * dc
        do = dh_cand * tc
        dc_cand = dc_cand + dh_cand * o * (1.0 - tc * tc)
        df = dc_cand * c_prev
        di = dc_cand * g
        dg = dc_cand * i
        dc = dc_cand * f + dc_carry
        da = np.concatenate(
            [
                di * i * (1.0 - i),
                df * f * (1.0 - f),
                dg * (1.0 - g * g),
                do * o * (1.0 - o),
            ],
            axis=1,
        )
        dWx += x[:, t].T @ da
        dWh += h_prev.T @ da
        db += da.sum(axis=0)
        dx[:, t] = da @ params["Wx"].T
        dh = da @ params["Wh"].T + dh_carry
    grads = {"Wx": dWx, "Wh": dWh, "b": db}
    return grads, dx


# ---------------------------------------------------------------------------
# 1-D convolutions
# ---------------------------------------------------------------------------

def causal_conv1d(params, x, dilation):
    """Causal dilated conv: out[t] depends on x[t], x[t-d], ... x[t-(u-1)d]."""
    W, b = params["W"], params["b"]
    u = W.shape[0]
    B, L, _ = x.shape
    pad = (u - 1) * dilation
    xp = np.concatenate([np.zeros((B, pad, x.shape[2])), x], axis=1)
    out = np.broadcast_to(b, (B, L, W.shape[2])).copy()
    for j in range(u):
        # tap j reaches back by (u - 1 - j) * dilation steps
        out += xp[:, j * dilation:j * dilation + L] @ W[j]
    return out, (params, xp, dilation, L)


def causal_conv1d_backward(cache, dout):
    params, xp, dilation, L = cache
    W = params["W"]
    u = W.shape[0]
    pad = (u - 1) * dilation
    dW = np.zeros_like(W)
    dxp = np.zeros_like(xp)
    for j in range(u):
        sl = xp[:, j * dilation:j * dilation + L]
        dW[j] = np.einsum("blc,blk->ck", sl, dout)
        dxp[:, j * dilation:j * dilation + L] += dout @ W[j].T
    grads = {"W": dW, "b": dout.sum(axis=(0, 1))}
    return grads, dxp[:, pad:]


def conv_transpose1d(params, x):
    """Transposed conv, kernel 2 / stride 2: doubles the sequence length."""
    W, b = params["W"], params["b"]  # W: (2, C_in, C_out)
    B, L, _ = x.shape
    out = np.empty((B, 2 * L, W.shape[2]))
    out[:, 0::2] = x @ W[0]
    out[:, 1::2] = x @ W[1]
    out += b
    return out, (params, x)


def conv_transpose1d_backward(cache, dout):
    params, x = cache
    W = params["W"]
    d_even = dout[:, 0::2]
    d_odd = dout[:, 1::2]
    dW = np.stack(
        [
            np.einsum("blc,blk->ck", x, d_even),
            np.einsum("blc,blk->ck", x, d_odd),
        ]
    )
    grads = {"W": dW, "b": dout.sum(axis=(0, 1))}
    dx = d_even @ W[0].T + d_odd @ W[1].T
    return grads, dx


# ---------------------------------------------------------------------------
# gated activation: tanh(a) * sigmoid(g) over a channel split
# ---------------------------------------------------------------------------

def gated(x):
    C = x.shape[-1] // 2
    ta = np.tanh(x[..., :C])
    sg = sigmoid(x[..., C:])
    return ta * sg, (ta, sg)


def gated_backward(cache, dout):
    ta, sg = cache
    da = dout * sg * (1.0 - ta * ta)
    dg = dout * ta * sg * (1.0 - sg)
    return np.concatenate([da, dg], axis=-1)


# ---------------------------------------------------------------------------
# parameter-tree helpers
# ---------------------------------------------------------------------------

def iter_arrays(tree, prefix=""):
    """Yield (path, array) leaves of a nested dict of arrays."""
    for key in sorted(tree):
        val = tree[key]
        path = f"{prefix}{key}"
        if isinstance(val, dict):
            yield from iter_arrays(val, prefix=path + "/")
        else:
            yield path, val


def tree_map(fn, tree):
    return {
        k: tree_map(fn, v) if isinstance(v, dict) else fn(v)
        for k, v in tree.items()
    }


def tree_add_scaled(target, delta, scale=1.0):
    """target += scale * delta, in place, matching nested structure."""
    for k, v in delta.items():
        if isinstance(v, dict):
            tree_add_scaled(target[k], v, scale)
        else:
            target[k] += scale * v


def tree_zeros_like(tree):
    return tree_map(np.zeros_like, tree)


def tree_copy(tree):
    return tree_map(np.copy, tree)


def global_norm(tree):
    total = 0.0
    for _, arr in iter_arrays(tree):
        total += float(np.sum(arr * arr))
    return math.sqrt(total)


def clip_global_norm(tree, max_norm):
    """Scale the whole gradient tree so its global norm is <= max_norm."""
    norm = global_norm(tree)
    if norm > max_norm > 0.0:
        scale = max_norm / norm
        for _, arr in iter_arrays(tree):
            arr *= scale
    return norm


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

class Adam:
    """Adam over a nested dict of parameter arrays."""

    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = tree_zeros_like(params)
        self.v = tree_zeros_like(params)

    def step(self, params, grads):
        """Ascent step (parameters move along +grads), in place."""
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        corr1 = 1.0 - b1 ** self.t
        corr2 = 1.0 - b2 ** self.t
        for (path, p), (gpath, g), (_, m), (_, v) in zip(
            iter_arrays(params),
            iter_arrays(grads),
            iter_arrays(self.m),
            iter_arrays(self.v),
        ):
            if path != gpath:
                raise ValueError(f"gradient tree mismatch: {path} vs {gpath}")
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p += self.lr * (m / corr1) / (np.sqrt(v / corr2) + self.eps)
