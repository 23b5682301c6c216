"""Calibration: stream forward traces into the accumulators needed for scoring.

Only running sums are kept, never the token multisets themselves. All sums
are float64.
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import InputError, NumericError, PglError, ShapeError
from .kernel import inv_rms
from .model import ModelConfig, WeightStore, forward

BUILTIN_SEQUENCES = 32
BUILTIN_LENGTH = 64


@dataclass
class CalibrationSet:
    sequences: list
    note: str = ""

    def __post_init__(self):
        if not self.sequences:
            raise InputError("calibration set is empty")
        seqs = []
        for i, s in enumerate(self.sequences):
            s = [int(t) for t in s]
            if not s:
                raise InputError(f"calibration sequence {i} is empty")
            seqs.append(s)
        self.sequences = seqs

    def __len__(self):
        return len(self.sequences)

    def shards(self, n: int) -> list:
        n = max(1, min(n, len(self.sequences)))
        bounds = np.linspace(0, len(self.sequences), n + 1).astype(int)
        return [CalibrationSet(self.sequences[a:b], self.note) for a, b in zip(bounds[:-1], bounds[1:])]


def parse_tokens(text: str, note: str = "") -> CalibrationSet:
    seqs = []
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        try:
            seqs.append([int(tok) for tok in line.split()])
        except ValueError:
            raise InputError(f"line {lineno}: token ids must be integers") from None
    return CalibrationSet(seqs, note)


def read_tokens(path) -> CalibrationSet:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise InputError(f"cannot read token file {path}: {exc.strerror}") from None
    return parse_tokens(text, note=str(path))


def write_tokens(c: CalibrationSet, path) -> None:
    Path(path).write_text("".join(" ".join(map(str, s)) + "\n" for s in c.sequences), encoding="utf-8")


def builtin_set(vocab: int, seed: int = 0, n: int = BUILTIN_SEQUENCES, length: int = BUILTIN_LENGTH) -> CalibrationSet:
    rng = np.random.default_rng(seed)
    seqs = rng.integers(0, vocab, size=(n, length)).tolist()
    return CalibrationSet(seqs, note=f"builtin seed={seed} {n}x{length}")


def _site_names(cfg: ModelConfig):
    for i in range(cfg.num_layers):
        attn_post, ffn_post = cfg.postnorm_present[i]
        yield f"layers.{i}.pre_attn"
        if attn_post:
            yield f"layers.{i}.post_attn"
        yield f"layers.{i}.pre_ffn"
        if ffn_post:
            yield f"layers.{i}.post_ffn"
    yield "final"


def _postnorm_sites(cfg: ModelConfig):
    for i in range(cfg.num_layers):
        attn_post, ffn_post = cfg.postnorm_present[i]
        if attn_post:
            yield f"layers.{i}.attn"
        if ffn_post:
            yield f"layers.{i}.ffn"


@dataclass
class ActivationStats:
    """Running sums over calibration tokens.

    ``channel_abs_sum`` is keyed by RMSNorm site (``layers.<i>.pre_attn`` ...
    ``final``); ``inv_scale_sum``/``inv_scale_count`` by post-norm site
    (``layers.<i>.attn`` / ``layers.<i>.ffn``).
    """

    channel_abs_sum: dict
    head_l2_sum: list
    ffn_abs_sum: list
    cosine_sim_sum: np.ndarray
    layer_token_count: np.ndarray
    inv_scale_sum: dict
    inv_scale_count: dict
    token_count: int = 0
    sequence_count: int = 0
    eps: float = field(default=0.0)

    @classmethod
    def zeros(cls, cfg: ModelConfig) -> "ActivationStats":
        L = cfg.num_layers
        return cls(
            channel_abs_sum={s: np.zeros(cfg.hidden) for s in _site_names(cfg)},
            head_l2_sum=[np.zeros(cfg.heads(i)) for i in range(L)],
            ffn_abs_sum=[np.zeros(cfg.ffn(i)) for i in range(L)],
            cosine_sim_sum=np.zeros(L),
            layer_token_count=np.zeros(L, dtype=np.int64),
            inv_scale_sum={s: 0.0 for s in _postnorm_sites(cfg)},
            inv_scale_count={s: 0 for s in _postnorm_sites(cfg)},
            eps=cfg.eps,
        )

    @property
    def num_layers(self) -> int:
        return len(self.head_l2_sum)

    def add_trace(self, tr, eps: float) -> None:
        """Fold one sequence's ForwardTrace into the sums."""
        S = tr.final_norm_out.shape[0]
        for site, out in tr.norm_outputs():
            if site not in self.channel_abs_sum:
                raise ShapeError(f"trace has RMSNorm site {site} unknown to these stats")
            self.channel_abs_sum[site] += np.abs(out.astype(np.float64)).sum(axis=0)
        for i, lt in enumerate(tr.layers):
            heads = lt.heads.astype(np.float64)
            self.head_l2_sum[i] += np.sqrt((heads * heads).sum(axis=-1)).sum(axis=0)
            self.ffn_abs_sum[i] += np.abs(lt.ffn_inter.astype(np.float64)).sum(axis=0)
            self.cosine_sim_sum[i] += cosine_rows(lt.input, lt.output).sum()
            self.layer_token_count[i] += S
            for kind, site_in, present in (("attn", lt.attn_out, lt.post_attn_out), ("ffn", lt.ffn_out, lt.post_ffn_out)):
                if present is not None:
                    key = f"layers.{i}.{kind}"
                    self.inv_scale_sum[key] += float(inv_rms(site_in, eps).sum())
                    self.inv_scale_count[key] += S
        self.token_count += S
        self.sequence_count += 1

    def _check_compatible(self, other: "ActivationStats") -> None:
        same = (
            self.channel_abs_sum.keys() == other.channel_abs_sum.keys()
            and self.inv_scale_sum.keys() == other.inv_scale_sum.keys()
            and [a.shape for a in self.head_l2_sum] == [b.shape for b in other.head_l2_sum]
            and [a.shape for a in self.ffn_abs_sum] == [b.shape for b in other.ffn_abs_sum]
            and all(a.shape == other.channel_abs_sum[k].shape for k, a in self.channel_abs_sum.items())
        )
        if not same:
            raise ShapeError("cannot merge activation stats from differently shaped models")

    def validate(self) -> "ActivationStats":
        for name, arr in self._arrays():
            if not np.all(np.isfinite(arr)):
                raise NumericError(f"stats accumulator {name} is not finite")
            if name != "cosine_sim_sum" and np.any(np.asarray(arr) < 0):
                raise NumericError(f"stats accumulator {name} is negative")
        if np.any(np.abs(self.cosine_sim_sum) > self.layer_token_count + 1e-6 * np.maximum(1, self.layer_token_count)):
            raise NumericError("cosine_sim_sum outside [-token_count, token_count]")
        if self.num_layers and np.any(self.layer_token_count != self.token_count):
            raise NumericError("per-layer token counts disagree with the global count")
        for k, n in self.inv_scale_count.items():
            if n != self.token_count:
                raise NumericError(f"inv-scale token count for {k} disagrees with the global count")
        return self

    def _arrays(self):
        for k, v in self.channel_abs_sum.items():
            yield f"channel_abs_sum[{k}]", v
        for i, v in enumerate(self.head_l2_sum):
            yield f"head_l2_sum[{i}]", v
        for i, v in enumerate(self.ffn_abs_sum):
            yield f"ffn_abs_sum[{i}]", v
        yield "cosine_sim_sum", self.cosine_sim_sum
        for k, v in self.inv_scale_sum.items():
            yield f"inv_scale_sum[{k}]", np.asarray(v)

    def to_dict(self) -> dict:
        return {
            "token_count": int(self.token_count),
            "sequence_count": int(self.sequence_count),
            "eps": self.eps,
            "channel_abs_sum": {k: v.tolist() for k, v in self.channel_abs_sum.items()},
            "head_l2_sum": [v.tolist() for v in self.head_l2_sum],
            "ffn_abs_sum": [v.tolist() for v in self.ffn_abs_sum],
            "cosine_sim_sum": self.cosine_sim_sum.tolist(),
            "layer_token_count": self.layer_token_count.tolist(),
            "inv_scale_sum": dict(self.inv_scale_sum),
            "inv_scale_count": dict(self.inv_scale_count),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ActivationStats":
        return cls(
            channel_abs_sum={k: np.asarray(v, dtype=np.float64) for k, v in d["channel_abs_sum"].items()},
            head_l2_sum=[np.asarray(v, dtype=np.float64) for v in d["head_l2_sum"]],
            ffn_abs_sum=[np.asarray(v, dtype=np.float64) for v in d["ffn_abs_sum"]],
            cosine_sim_sum=np.asarray(d["cosine_sim_sum"], dtype=np.float64),
            layer_token_count=np.asarray(d["layer_token_count"], dtype=np.int64),
            inv_scale_sum={k: float(v) for k, v in d["inv_scale_sum"].items()},
            inv_scale_count={k: int(v) for k, v in d["inv_scale_count"].items()},
            token_count=int(d["token_count"]),
            sequence_count=int(d["sequence_count"]),
            eps=float(d["eps"]),
        )

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "ActivationStats":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def cosine_rows(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Row-wise cosine similarity in float64.

    A zero row against a zero row counts as 1, a zero row against a
    non-zero row as 0.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    dot = (x * y).sum(axis=-1)
    nx = np.sqrt((x * x).sum(axis=-1))
    ny = np.sqrt((y * y).sum(axis=-1))
    den = nx * ny
    both_zero = (nx == 0) & (ny == 0)
    with np.errstate(invalid="ignore", divide="ignore"):
        cos = np.where(den > 0, dot / np.where(den > 0, den, 1.0), np.where(both_zero, 1.0, 0.0))
    return np.clip(cos, -1.0, 1.0)


def _collect_serial(w: WeightStore, c: CalibrationSet, offset: int = 0) -> ActivationStats:
    stats = ActivationStats.zeros(w.config)
    for i, seq in enumerate(c.sequences):
        try:
            _, tr = forward(w, seq, trace=True)
        except PglError as exc:
            raise type(exc)(f"calibration sequence {offset + i}: {exc}") from None
        stats.add_trace(tr, w.config.eps)
    return stats


def collect(w: WeightStore, c: CalibrationSet, workers: int = 1) -> ActivationStats:
    """Reduce the model's activations over ``c`` into ActivationStats.

    With ``workers > 1`` the set is split into contiguous shards whose
    partial stats are merged in shard order.
    """
    if workers <= 1 or len(c) == 1:
        return _collect_serial(w, c).validate()
    shards = c.shards(workers)
    offsets = np.cumsum([0] + [len(s) for s in shards[:-1]])
    with ThreadPoolExecutor(max_workers=len(shards)) as pool:
        parts = list(pool.map(lambda a: _collect_serial(w, *a), zip(shards, offsets)))
    out = parts[0]
    for p in parts[1:]:
        out = merge(out, p)
    return out.validate()


def merge(a: ActivationStats, b: ActivationStats) -> ActivationStats:
    a._check_compatible(b)
    return ActivationStats(
        channel_abs_sum={k: a.channel_abs_sum[k] + b.channel_abs_sum[k] for k in a.channel_abs_sum},
        head_l2_sum=[x + y for x, y in zip(a.head_l2_sum, b.head_l2_sum)],
        ffn_abs_sum=[x + y for x, y in zip(a.ffn_abs_sum, b.ffn_abs_sum)],
        cosine_sim_sum=a.cosine_sim_sum + b.cosine_sim_sum,
        layer_token_count=a.layer_token_count + b.layer_token_count,
        inv_scale_sum={k: a.inv_scale_sum[k] + b.inv_scale_sum[k] for k in a.inv_scale_sum},
        inv_scale_count={k: a.inv_scale_count[k] + b.inv_scale_count[k] for k in a.inv_scale_count},
        token_count=a.token_count + b.token_count,
        sequence_count=a.sequence_count + b.sequence_count,
        eps=a.eps,
    )
