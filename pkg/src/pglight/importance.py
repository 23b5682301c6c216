"""Importance scores derived from calibration statistics.

Scores are raw sums over calibration tokens (no per-token normalisation),
except the layer score, which is an average cosine distance.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .calibrate import ActivationStats
from .errors import NumericError, PlanError


@dataclass
class ImportanceScores:
    channel: np.ndarray
    head: list
    ffn: list
    layer: np.ndarray
    kv_group: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "channel": self.channel.tolist(),
            "head": {str(i): v.tolist() for i, v in enumerate(self.head)},
            "ffn": {str(i): v.tolist() for i, v in enumerate(self.ffn)},
            "layer": self.layer.tolist(),
            "kv_group": {str(k): list(v) for k, v in self.kv_group.items()},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ImportanceScores":
        def by_layer(m):
            return [np.asarray(m[k], dtype=np.float64) for k in sorted(m, key=int)]

        return cls(
            channel=np.asarray(d["channel"], dtype=np.float64),
            head=by_layer(d["head"]),
            ffn=by_layer(d["ffn"]),
            layer=np.asarray(d["layer"], dtype=np.float64),
            kv_group={int(k): list(v) for k, v in d.get("kv_group", {}).items()},
        )

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "ImportanceScores":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def channel_scores(stats: ActivationStats) -> np.ndarray:
    """Per-channel sum of |normed activation| over every RMSNorm site, in site order."""
    sites = list(stats.channel_abs_sum.values())
    out = np.zeros_like(sites[0])
    for s in sites:
        out = out + s
    return out


def head_scores(stats: ActivationStats) -> list:
    return [h.copy() for h in stats.head_l2_sum]


def ffn_scores(stats: ActivationStats) -> list:
    return [f.copy() for f in stats.ffn_abs_sum]


def layer_scores(stats: ActivationStats) -> np.ndarray:
    counts = stats.layer_token_count
    if np.any(counts == 0):
        raise NumericError("layer score needs at least one calibration token per layer")
    return np.clip(1.0 - stats.cosine_sim_sum / counts, 0.0, 2.0)


def kv_group_scores(surviving: list) -> list:
    """Mean surviving-head score per KV group; ``surviving`` is a list of score lists."""
    out = []
    for g, heads in enumerate(surviving):
        heads = list(heads)
        if not heads:
            raise PlanError(f"KV group {g} has no surviving heads and cannot be scored")
        out.append(float(np.mean(np.asarray(heads, dtype=np.float64))))
    return out


def score_all(stats: ActivationStats, config=None) -> ImportanceScores:
    """All score families; KV-group scores (every head surviving) need ``config``."""
    heads = head_scores(stats)
    kv = {}
    if config is not None:
        hpg = config.heads_per_group
        for i, h in enumerate(heads):
            kv[i] = kv_group_scores([h[g * hpg:(g + 1) * hpg] for g in range(config.groups(i))])
    return ImportanceScores(
        channel=channel_scores(stats),
        head=heads,
        ffn=ffn_scores(stats),
        layer=layer_scores(stats),
        kv_group=kv,
    )
