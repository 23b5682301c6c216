"""Hand-constructed models and traces with known statistics."""

import numpy as np

from pglight.calibrate import ActivationStats, CalibrationSet
from pglight.model import ForwardTrace, LayerTrace, ModelConfig, random_init


def fake_trace(inputs, outputs, heads=None, inter=None, norm_outs=None):
    """One-layer trace with chosen per-token tensors; unset fields are zeros."""
    inputs = np.asarray(inputs, dtype=np.float32)
    outputs = np.asarray(outputs, dtype=np.float32)
    S, d = inputs.shape
    z = np.zeros((S, d), np.float32)
    norm_outs = norm_outs or {}
    heads = np.zeros((S, 1, 2), np.float32) if heads is None else np.asarray(heads, np.float32)
    inter = np.zeros((S, 1), np.float32) if inter is None else np.asarray(inter, np.float32)
    lt = LayerTrace(
        input=inputs,
        pre_attn_out=np.asarray(norm_outs.get("pre_attn", z), np.float32),
        heads=heads,
        attn_out=z,
        post_attn_out=None,
        pre_ffn_out=np.asarray(norm_outs.get("pre_ffn", z), np.float32),
        ffn_inter=inter,
        ffn_out=z,
        post_ffn_out=None,
        output=outputs,
    )
    return ForwardTrace([lt], np.asarray(norm_outs.get("final", z), np.float32))


def one_layer_stats(d, heads, ffn):
    cfg = ModelConfig(1, d, heads, heads, 2, ffn, 4, postnorm_present=((False, False),))
    return ActivationStats.zeros(cfg)


def _unit_rms_rows(w):
    e = w.embedding.astype(np.float64)
    w.embedding = (e / np.sqrt(np.mean(e * e, axis=1, keepdims=True))).astype(np.float32)


def linear_attention_layer_model(W_O_fn, post_gamma, seed=0, d=8, vocab=16):
    """One layer whose attention (S=1) computes post_norm(h @ W_O) with W_V = I; FFN is zero.

    Embedding rows have unit RMS so the pre-norm output equals the input up to eps.
    """
    cfg = ModelConfig(1, d, d // 4, d // 4, 4, 4, vocab)
    w = random_init(cfg, seed)
    _unit_rms_rows(w)
    lw = w.layers[0]
    lw.W_Q[:] = 0
    lw.W_K[:] = 0
    lw.W_V[:] = np.eye(d, dtype=np.float32)
    lw.W_O[:] = W_O_fn(d).astype(np.float32)
    lw.post_attn_gamma[:] = np.float32(post_gamma)
    lw.W_gate[:] = 0
    lw.W_up[:] = 0
    lw.W_down[:] = 0
    return w


def negation_model(seed=0):
    """Layer maps every single-token input x to (1 - 2/rms(x)) x, i.e. a negative multiple."""
    return linear_attention_layer_model(lambda d: -np.eye(d), 2.0, seed)


def rotation_model(seed=0):
    """Layer maps unit-RMS x to x @ R with R a quarter-turn in each channel pair."""

    def r_minus_i(d):
        R = np.zeros((d, d))
        for k in range(0, d, 2):
            R[k, k + 1] = 1.0
            R[k + 1, k] = -1.0
        return R - np.eye(d)

    return linear_attention_layer_model(r_minus_i, np.sqrt(2.0), seed)


def single_tokens(vocab):
    return CalibrationSet([[t] for t in range(vocab)], note="one token per sequence")
