"""Independent reference implementations used as test oracles.

Everything here is written with explicit Python loops over float64 values and
shares no code path with the package beyond the weight containers.
"""

import math

import numpy as np


def ref_rmsnorm(x, gamma, eps):
    d = len(x)
    ms = sum(float(v) * float(v) for v in x) / d
    s = 1.0 / math.sqrt(ms + eps)
    return [float(g) * float(v) * s for g, v in zip(gamma, x)]


def ref_matvec(x, W):
    rows, cols = W.shape
    out = [0.0] * cols
    for j in range(cols):
        acc = 0.0
        for i in range(rows):
            acc += float(x[i]) * float(W[i, j])
        out[j] = acc
    return out


def ref_rope(vec, pos, base=10000.0):
    dh = len(vec)
    half = dh // 2
    out = list(vec)
    for i in range(half):
        theta = pos * base ** (-2.0 * i / dh)
        c, s = math.cos(theta), math.sin(theta)
        a, b = vec[i], vec[i + half]
        out[i] = a * c - b * s
        out[i + half] = a * s + b * c
    return out


def ref_swish(v):
    return v / (1.0 + math.exp(-v)) if v > -700 else 0.0


def ref_forward(w, tokens):
    """Straight-line float64 forward; returns (logits, per-layer record dicts)."""
    cfg = w.config
    dh = cfg.head_dim
    S = len(tokens)
    xs = [[float(v) for v in w.embedding[t]] for t in tokens]
    records = []
    for li, lw in enumerate(w.layers):
        H, G = lw.W_Q.shape[1] // dh, lw.W_K.shape[1] // dh
        hpg = H // G
        rec = {"input": [list(x) for x in xs]}
        hs = [ref_rmsnorm(x, lw.pre_attn_gamma, cfg.eps) for x in xs]
        q = [ref_matvec(h, lw.W_Q) for h in hs]
        k = [ref_matvec(h, lw.W_K) for h in hs]
        v = [ref_matvec(h, lw.W_V) for h in hs]
        heads = [[None] * H for _ in range(S)]
        for j in range(H):
            g = j // hpg
            for t in range(S):
                qt = ref_rope(q[t][j * dh:(j + 1) * dh], t)
                logits = []
                for u in range(t + 1):
                    ku = ref_rope(k[u][g * dh:(g + 1) * dh], u)
                    logits.append(sum(a * b for a, b in zip(qt, ku)) / math.sqrt(dh))
                m = max(logits)
                e = [math.exp(z - m) for z in logits]
                tot = sum(e)
                o = [0.0] * dh
                for u in range(t + 1):
                    p = e[u] / tot
                    vu = v[u][g * dh:(g + 1) * dh]
                    for c in range(dh):
                        o[c] += p * vu[c]
                heads[t][j] = o
        attn = [ref_matvec([c for j in range(H) for c in heads[t][j]], lw.W_O) for t in range(S)]
        rec["heads"] = heads
        rec["attn_out"] = attn
        if lw.post_attn_gamma is not None:
            attn = [ref_rmsnorm(a, lw.post_attn_gamma, cfg.eps) for a in attn]
        xs = [[a + b for a, b in zip(x, y)] for x, y in zip(xs, attn)]
        h2 = [ref_rmsnorm(x, lw.pre_ffn_gamma, cfg.eps) for x in xs]
        inter = []
        for h in h2:
            gate = ref_matvec(h, lw.W_gate)
            up = ref_matvec(h, lw.W_up)
            inter.append([ref_swish(a) * b for a, b in zip(gate, up)])
        f = [ref_matvec(i, lw.W_down) for i in inter]
        rec["ffn_inter"] = inter
        rec["ffn_out"] = f
        if lw.post_ffn_gamma is not None:
            f = [ref_rmsnorm(a, lw.post_ffn_gamma, cfg.eps) for a in f]
        xs = [[a + b for a, b in zip(x, y)] for x, y in zip(xs, f)]
        rec["output"] = [list(x) for x in xs]
        records.append(rec)
    fin = [ref_rmsnorm(x, w.final_gamma, cfg.eps) for x in xs]
    logits = np.array([ref_matvec(x, w.output_head) for x in fin])
    return logits, records


def brute_force_stats(w, sequences):
    """Materialise every hook-site multiset from traces, then reduce with loops.

    Returns a dict mirroring ActivationStats fields, plus per-family scores.
    """
    from pglight.model import forward

    cfg = w.config
    sites = {}
    layer_inputs = [[] for _ in range(cfg.num_layers)]
    layer_outputs = [[] for _ in range(cfg.num_layers)]
    head_outs = [[] for _ in range(cfg.num_layers)]
    ffn_inters = [[] for _ in range(cfg.num_layers)]
    post_inputs = {}
    for seq in sequences:
        _, tr = forward(w, seq, trace=True)
        for site, out in tr.norm_outputs():
            sites.setdefault(site, []).extend(out.tolist())
        for i, lt in enumerate(tr.layers):
            layer_inputs[i].extend(lt.input.tolist())
            layer_outputs[i].extend(lt.output.tolist())
            head_outs[i].extend(lt.heads.tolist())
            ffn_inters[i].extend(lt.ffn_inter.tolist())
            if lt.post_attn_out is not None:
                post_inputs.setdefault(f"layers.{i}.attn", []).extend(lt.attn_out.tolist())
            if lt.post_ffn_out is not None:
                post_inputs.setdefault(f"layers.{i}.ffn", []).extend(lt.ffn_out.tolist())

    channel_abs_sum = {}
    for site, toks in sites.items():
        acc = [0.0] * cfg.hidden
        for tok in toks:
            for k, v in enumerate(tok):
                acc[k] += abs(v)
        channel_abs_sum[site] = acc
    channel = [sum(channel_abs_sum[s][k] for s in channel_abs_sum) for k in range(cfg.hidden)]

    head = []
    for toks in head_outs:
        H = len(toks[0])
        head.append([sum(math.sqrt(sum(c * c for c in tok[j])) for tok in toks) for j in range(H)])
    ffn = []
    for toks in ffn_inters:
        ffn.append([sum(abs(tok[m]) for tok in toks) for m in range(len(toks[0]))])
    layer = []
    for xin, xout in zip(layer_inputs, layer_outputs):
        cos = []
        for a, b in zip(xin, xout):
            na = math.sqrt(sum(v * v for v in a))
            nb = math.sqrt(sum(v * v for v in b))
            cos.append(sum(p * q for p, q in zip(a, b)) / (na * nb))
        layer.append(1.0 - sum(cos) / len(cos))
    inv_scale = {}
    for site, toks in post_inputs.items():
        d = len(toks[0])
        inv_scale[site] = sum(1.0 / math.sqrt(sum(v * v for v in t) / d + cfg.eps) for t in toks) / len(toks)
    return {
        "channel_abs_sum": channel_abs_sum,
        "channel": channel,
        "head": head,
        "ffn": ffn,
        "layer": layer,
        "inv_scale": inv_scale,
        "token_count": sum(len(s) for s in sequences),
    }


def brute_top_k(scores, k):
    """Exhaustive: the k-subset with the largest sum, lexicographically smallest on ties."""
    from itertools import combinations

    best, best_key = None, None
    for combo in combinations(range(len(scores)), k):
        key = (sum(scores[i] for i in combo), [-i for i in combo])
        if best_key is None or key > best_key:
            best, best_key = list(combo), key
    return best


def rel_close(a, b, rtol):
    """Max elementwise |a-b| relative to max|b|."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    scale = max(np.max(np.abs(b)), 1e-30)
    return float(np.max(np.abs(a - b)) / scale) <= rtol
