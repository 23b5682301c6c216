"""Sandwich-norm GQA transformer: configuration, weights and forward pass."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from .errors import InputError, NumericError, ShapeError
from .kernel import DTYPE, matmul, rmsnorm, softmax_rows, swish

ROPE_BASE = 10000.0
DEFAULT_EPS = 1e-6

NORM_NAMES = ("pre_attn_gamma", "post_attn_gamma", "pre_ffn_gamma", "post_ffn_gamma")
MATRIX_NAMES = ("W_Q", "W_K", "W_V", "W_O", "W_gate", "W_up", "W_down")


def _uniform_or_none(values, default):
    if values is None:
        return default, None
    values = tuple(int(v) for v in values)
    if len(set(values)) == 1:
        return values[0], None
    return max(values), values


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters.

    ``layer_kv_groups`` and ``layer_ffn_dims`` are only set when surgery leaves
    layers with different group counts or FFN widths; uniform tuples are folded
    back into the scalar fields so that equal architectures compare equal.
    """

    num_layers: int
    hidden: int
    num_query_heads: int
    num_kv_groups: int
    head_dim: int
    ffn_dim: int
    vocab: int
    eps: float = DEFAULT_EPS
    postnorm_present: tuple = None
    layer_kv_groups: tuple | None = None
    layer_ffn_dims: tuple | None = None

    def __post_init__(self):
        for name in ("num_layers", "hidden", "num_query_heads", "num_kv_groups", "head_dim", "ffn_dim", "vocab"):
            v = getattr(self, name)
            if not isinstance(v, (int, np.integer)) or isinstance(v, bool) or v < 1:
                raise ShapeError(f"config.{name} must be a count >= 1, got {v!r}")
            object.__setattr__(self, name, int(v))
        if not self.eps > 0 or not np.isfinite(self.eps):
            raise NumericError(f"config.eps must be a finite value > 0, got {self.eps!r}")
        object.__setattr__(self, "eps", float(self.eps))
        if self.num_query_heads % self.num_kv_groups:
            raise ShapeError(
                f"num_query_heads={self.num_query_heads} is not a multiple of num_kv_groups={self.num_kv_groups}"
            )
        if self.head_dim % 2:
            raise ShapeError(f"head_dim must be even for rotary encoding, got {self.head_dim}")
        hpg = self.num_query_heads // self.num_kv_groups

        pn = self.postnorm_present
        if pn is None:
            pn = ((True, True),) * self.num_layers
        pn = tuple((bool(a), bool(f)) for a, f in pn)
        if len(pn) != self.num_layers:
            raise ShapeError(f"postnorm_present has {len(pn)} entries for {self.num_layers} layers")
        object.__setattr__(self, "postnorm_present", pn)

        for name in ("layer_kv_groups", "layer_ffn_dims"):
            vals = getattr(self, name)
            if vals is not None:
                if len(vals) != self.num_layers:
                    raise ShapeError(f"{name} has {len(vals)} entries for {self.num_layers} layers")
                if any(int(v) < 1 for v in vals):
                    raise ShapeError(f"{name} entries must be >= 1, got {list(vals)}")
        groups, lg = _uniform_or_none(self.layer_kv_groups, self.num_kv_groups)
        ffn, lf = _uniform_or_none(self.layer_ffn_dims, self.ffn_dim)
        object.__setattr__(self, "num_kv_groups", groups)
        object.__setattr__(self, "num_query_heads", groups * hpg)
        object.__setattr__(self, "layer_kv_groups", lg)
        object.__setattr__(self, "ffn_dim", ffn)
        object.__setattr__(self, "layer_ffn_dims", lf)

    @property
    def heads_per_group(self) -> int:
        return self.num_query_heads // self.num_kv_groups

    def groups(self, layer: int) -> int:
        return self.layer_kv_groups[layer] if self.layer_kv_groups else self.num_kv_groups

    def heads(self, layer: int) -> int:
        return self.groups(layer) * self.heads_per_group

    def ffn(self, layer: int) -> int:
        return self.layer_ffn_dims[layer] if self.layer_ffn_dims else self.ffn_dim

    def replace(self, **changes) -> "ModelConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return {
            "num_layers": self.num_layers,
            "hidden": self.hidden,
            "num_query_heads": self.num_query_heads,
            "num_kv_groups": self.num_kv_groups,
            "head_dim": self.head_dim,
            "ffn_dim": self.ffn_dim,
            "vocab": self.vocab,
            "eps": self.eps,
            "postnorm_present": [list(p) for p in self.postnorm_present],
            "layer_kv_groups": list(self.layer_kv_groups) if self.layer_kv_groups else None,
            "layer_ffn_dims": list(self.layer_ffn_dims) if self.layer_ffn_dims else None,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ShapeError(f"unknown config fields: {sorted(unknown)}")
        d = dict(d)
        for name in ("postnorm_present", "layer_kv_groups", "layer_ffn_dims"):
            if d.get(name) is not None:
                d[name] = tuple(tuple(x) if isinstance(x, list) else x for x in d[name])
        return cls(**d)


@dataclass
class LayerWeights:
    pre_attn_gamma: np.ndarray
    post_attn_gamma: np.ndarray | None
    pre_ffn_gamma: np.ndarray
    post_ffn_gamma: np.ndarray | None
    W_Q: np.ndarray
    W_K: np.ndarray
    W_V: np.ndarray
    W_O: np.ndarray
    W_gate: np.ndarray
    W_up: np.ndarray
    W_down: np.ndarray

    def copy(self) -> "LayerWeights":
        return LayerWeights(**{k: (None if v is None else v.copy()) for k, v in vars(self).items()})


@dataclass
class WeightStore:
    config: ModelConfig
    embedding: np.ndarray
    layers: list = field(default_factory=list)
    final_gamma: np.ndarray = None
    output_head: np.ndarray = None

    def tensors(self):
        """Yield ``(name, array)`` for every tensor in manifest order."""
        yield "embedding", self.embedding
        for i, lw in enumerate(self.layers):
            for name in NORM_NAMES + MATRIX_NAMES:
                t = getattr(lw, name)
                if t is not None:
                    yield f"layers.{i}.{name}", t
        yield "final_gamma", self.final_gamma
        yield "output_head", self.output_head

    def expected_shapes(self) -> dict:
        c = self.config
        d, dh = c.hidden, c.head_dim
        shapes = {"embedding": (c.vocab, d)}
        for i in range(c.num_layers):
            h, g, f = c.heads(i), c.groups(i), c.ffn(i)
            attn_post, ffn_post = c.postnorm_present[i]
            p = f"layers.{i}."
            shapes[p + "pre_attn_gamma"] = (d,)
            if attn_post:
                shapes[p + "post_attn_gamma"] = (d,)
            shapes[p + "pre_ffn_gamma"] = (d,)
            if ffn_post:
                shapes[p + "post_ffn_gamma"] = (d,)
            shapes[p + "W_Q"] = (d, h * dh)
            shapes[p + "W_K"] = (d, g * dh)
            shapes[p + "W_V"] = (d, g * dh)
            shapes[p + "W_O"] = (h * dh, d)
            shapes[p + "W_gate"] = (d, f)
            shapes[p + "W_up"] = (d, f)
            shapes[p + "W_down"] = (f, d)
        shapes["final_gamma"] = (d,)
        shapes["output_head"] = (d, c.vocab)
        return shapes

    def validate(self) -> "WeightStore":
        """Check every shape, presence and finiteness invariant; return self."""
        c = self.config
        if len(self.layers) != c.num_layers:
            raise ShapeError(f"weight store has {len(self.layers)} layers, config says {c.num_layers}")
        for i, lw in enumerate(self.layers):
            attn_post, ffn_post = c.postnorm_present[i]
            if (lw.post_attn_gamma is not None) != attn_post:
                raise ShapeError(f"layers.{i}.post_attn_gamma presence disagrees with postnorm_present={attn_post}")
            if (lw.post_ffn_gamma is not None) != ffn_post:
                raise ShapeError(f"layers.{i}.post_ffn_gamma presence disagrees with postnorm_present={ffn_post}")
        expected = self.expected_shapes()
        seen = set()
        for name, t in self.tensors():
            seen.add(name)
            if t is None:
                raise ShapeError(f"tensor {name} is missing")
            if t.dtype != DTYPE:
                raise ShapeError(f"tensor {name} has dtype {t.dtype}, expected float32")
            if t.shape != expected[name]:
                raise ShapeError(f"tensor {name} has shape {t.shape}, expected {expected[name]}")
            bad = np.flatnonzero(~np.isfinite(t))
            if bad.size:
                raise NumericError(f"tensor {name} has non-finite value at flat index {int(bad[0])}")
        missing = set(expected) - seen
        if missing:
            raise ShapeError(f"missing tensors: {sorted(missing)}")
        return self

    def copy(self) -> "WeightStore":
        return WeightStore(
            config=self.config,
            embedding=self.embedding.copy(),
            layers=[lw.copy() for lw in self.layers],
            final_gamma=self.final_gamma.copy(),
            output_head=self.output_head.copy(),
        )

    def norm_gammas(self):
        """Yield ``(name, gamma)`` for every RMSNorm present, final norm last."""
        for i, lw in enumerate(self.layers):
            for name in NORM_NAMES:
                g = getattr(lw, name)
                if g is not None:
                    yield f"layers.{i}.{name}", g
        yield "final_gamma", self.final_gamma


@dataclass
class LayerTrace:
    input: np.ndarray
    pre_attn_out: np.ndarray
    heads: np.ndarray  # S x H x d_head, before W_O
    attn_out: np.ndarray  # module output entering the post-attention norm site
    post_attn_out: np.ndarray | None
    pre_ffn_out: np.ndarray
    ffn_inter: np.ndarray  # S x d_ffn, swish(gate) * up
    ffn_out: np.ndarray
    post_ffn_out: np.ndarray | None
    output: np.ndarray


@dataclass
class ForwardTrace:
    layers: list
    final_norm_out: np.ndarray

    def norm_outputs(self):
        """Yield ``(site, S x d output)`` for every RMSNorm evaluated."""
        for i, lt in enumerate(self.layers):
            yield f"layers.{i}.pre_attn", lt.pre_attn_out
            if lt.post_attn_out is not None:
                yield f"layers.{i}.post_attn", lt.post_attn_out
            yield f"layers.{i}.pre_ffn", lt.pre_ffn_out
            if lt.post_ffn_out is not None:
                yield f"layers.{i}.post_ffn", lt.post_ffn_out
        yield "final", self.final_norm_out


def rope_tables(seq_len: int, head_dim: int):
    half = head_dim // 2
    inv_freq = ROPE_BASE ** (-np.arange(half, dtype=np.float64) * 2.0 / head_dim)
    ang = np.arange(seq_len, dtype=np.float64)[:, None] * inv_freq[None, :]
    return np.cos(ang).astype(DTYPE), np.sin(ang).astype(DTYPE)


def apply_rope(x: np.ndarray, cos: np.ndarray, sin: np.ndarray) -> np.ndarray:
    """Rotate ``x`` of shape S x H x d_head; first/second halves form the pairs."""
    half = x.shape[-1] // 2
    x1, x2 = x[..., :half], x[..., half:]
    c, s = cos[:, None, :], sin[:, None, :]
    return np.concatenate([x1 * c - x2 * s, x1 * s + x2 * c], axis=-1)


def attention(cfg: ModelConfig, layer: int, lw: LayerWeights, h: np.ndarray, cos, sin) -> np.ndarray:
    """Causal GQA; returns per-head outputs S x H x d_head."""
    S = h.shape[0]
    dh, H, G = cfg.head_dim, cfg.heads(layer), cfg.groups(layer)
    hpg = cfg.heads_per_group
    q = apply_rope(matmul(h, lw.W_Q).reshape(S, H, dh), cos, sin)
    k = apply_rope(matmul(h, lw.W_K).reshape(S, G, dh), cos, sin)
    v = matmul(h, lw.W_V).reshape(S, G, dh)
    scale = DTYPE(1.0 / np.sqrt(dh))
    mask = np.triu(np.ones((S, S), dtype=bool), k=1)
    out = np.empty((S, H, dh), dtype=DTYPE)
    for j in range(H):
        g = j // hpg
        logits = matmul(q[:, j, :], np.ascontiguousarray(k[:, g, :].T)) * scale
        logits[mask] = -np.inf
        out[:, j, :] = matmul(softmax_rows(logits), np.ascontiguousarray(v[:, g, :]))
    return out


def forward(w: WeightStore, tokens, trace: bool = False):
    """Run the model over one token sequence.

    Returns ``(logits, trace)``; ``trace`` is None unless requested.
    """
    cfg = w.config
    tokens = np.asarray(tokens, dtype=np.int64).reshape(-1)
    if tokens.size < 1:
        raise InputError("token sequence is empty")
    bad = np.flatnonzero((tokens < 0) | (tokens >= cfg.vocab))
    if bad.size:
        raise InputError(f"token id {int(tokens[bad[0]])} at position {int(bad[0])} outside vocab of {cfg.vocab}")
    S = tokens.size
    cos, sin = rope_tables(S, cfg.head_dim)
    x = w.embedding[tokens].copy()
    layer_traces = []
    for i, lw in enumerate(w.layers):
        x_in = x
        h = rmsnorm(x, lw.pre_attn_gamma, cfg.eps)
        heads = attention(cfg, i, lw, h, cos, sin)
        a = matmul(heads.reshape(S, -1), lw.W_O)
        a_post = rmsnorm(a, lw.post_attn_gamma, cfg.eps) if lw.post_attn_gamma is not None else None
        x = x + (a if a_post is None else a_post)
        h2 = rmsnorm(x, lw.pre_ffn_gamma, cfg.eps)
        inter = swish(matmul(h2, lw.W_gate)) * matmul(h2, lw.W_up)
        f = matmul(inter, lw.W_down)
        f_post = rmsnorm(f, lw.post_ffn_gamma, cfg.eps) if lw.post_ffn_gamma is not None else None
        x = x + (f if f_post is None else f_post)
        if trace:
            layer_traces.append(LayerTrace(x_in, h, heads, a, a_post, h2, inter, f, f_post, x))
    final = rmsnorm(x, w.final_gamma, cfg.eps)
    logits = matmul(final, w.output_head)
    return logits, (ForwardTrace(layer_traces, final) if trace else None)


def random_init(config: ModelConfig, seed: int) -> WeightStore:
    """Seeded toy weights: N(0, 1/fan_in) matrices, unit gammas."""
    rng = np.random.default_rng(seed)
    c = config

    def mat(rows, cols, fan_in=None):
        std = 1.0 / np.sqrt(fan_in or rows)
        return (rng.standard_normal((rows, cols)) * std).astype(DTYPE)

    def ones():
        return np.ones(c.hidden, dtype=DTYPE)

    d, dh = c.hidden, c.head_dim
    embedding = mat(c.vocab, d, fan_in=d)
    layers = []
    for i in range(c.num_layers):
        h, g, f = c.heads(i), c.groups(i), c.ffn(i)
        attn_post, ffn_post = c.postnorm_present[i]
        layers.append(
            LayerWeights(
                pre_attn_gamma=ones(),
                post_attn_gamma=ones() if attn_post else None,
                pre_ffn_gamma=ones(),
                post_ffn_gamma=ones() if ffn_post else None,
                W_Q=mat(d, h * dh),
                W_K=mat(d, g * dh),
                W_V=mat(d, g * dh),
                W_O=mat(h * dh, d),
                W_gate=mat(d, f),
                W_up=mat(d, f),
                W_down=mat(f, d),
            )
        )
    return WeightStore(c, embedding, layers, ones(), mat(d, c.vocab)).validate()


TOY_CONFIG = ModelConfig(num_layers=2, hidden=8, num_query_heads=4, num_kv_groups=2, head_dim=4, ffn_dim=16, vocab=32)
