"""Forward-only quality metrics and an analytic per-token cost model."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .calibrate import CalibrationSet
from .errors import InputError, ShapeError
from .kernel import log_softmax
from .model import ModelConfig, WeightStore, forward

# rough per-element cost of one RMSNorm: square, reduce, rsqrt-scale, gamma
NORM_OPS_PER_CHANNEL = 4


def kd_loss(teacher: WeightStore, student: WeightStore, data: CalibrationSet) -> float:
    """Mean per-token KL(teacher || student) over the full vocabulary, in nats."""
    if teacher.config.vocab != student.config.vocab:
        raise ShapeError(f"teacher vocab {teacher.config.vocab} != student vocab {student.config.vocab}")
    total, count = 0.0, 0
    for seq in data.sequences:
        lt = log_softmax(forward(teacher, seq)[0])
        ls = log_softmax(forward(student, seq)[0])
        kl = np.sum(np.exp(lt) * (lt - ls), axis=-1)
        total += float(np.maximum(kl, 0.0).sum())
        count += kl.shape[0]
    return total / count


def nll_sum(w: WeightStore, data: CalibrationSet):
    total, count = 0.0, 0
    for seq in data.sequences:
        if len(seq) < 2:
            continue
        lp = log_softmax(forward(w, seq)[0])
        targets = np.asarray(seq[1:])
        total -= float(lp[np.arange(len(seq) - 1), targets].sum())
        count += len(seq) - 1
    return total, count


def perplexity(w: WeightStore, data: CalibrationSet) -> float:
    total, count = nll_sum(w, data)
    if count == 0:
        raise InputError("perplexity needs at least one sequence with two or more tokens")
    return float(np.exp(total / count))


@dataclass
class CostEstimate:
    param_count: int
    flops_per_token: int
    layer_flops_per_token: int
    norm_count: int
    vector_ops_per_token: int
    relative_speed: float
    seq_len: int


def param_count(cfg: ModelConfig) -> int:
    d, dh, V = cfg.hidden, cfg.head_dim, cfg.vocab
    n = V * d + d + d * V
    for i in range(cfg.num_layers):
        H, G, f = cfg.heads(i), cfg.groups(i), cfg.ffn(i)
        norms = 2 + sum(cfg.postnorm_present[i])
        n += norms * d + d * H * dh + 2 * d * G * dh + H * dh * d + 3 * d * f
    return n


def layer_flops(cfg: ModelConfig, layer: int, seq_len: int) -> int:
    """Decode-time multiply-add flops of one layer at context length ``seq_len``."""
    d, dh = cfg.hidden, cfg.head_dim
    H, G, f = cfg.heads(layer), cfg.groups(layer), cfg.ffn(layer)
    proj = d * H * dh + 2 * d * G * dh + H * dh * d + 3 * d * f
    attn = 2 * H * dh * seq_len
    return 2 * (proj + attn)


def _raw_cost(cfg: ModelConfig, seq_len: int):
    lf = sum(layer_flops(cfg, i, seq_len) for i in range(cfg.num_layers))
    norms = 1 + sum(2 + sum(cfg.postnorm_present[i]) for i in range(cfg.num_layers))
    return lf, lf + 2 * cfg.hidden * cfg.vocab, norms


def estimate_cost(config: ModelConfig, seq_len: int = 1024, reference: ModelConfig | None = None) -> CostEstimate:
    if seq_len < 1:
        raise InputError(f"seq_len must be >= 1, got {seq_len}")
    lf, total, norms = _raw_cost(config, seq_len)
    ref_total = _raw_cost(reference, seq_len)[1] if reference is not None else total
    return CostEstimate(
        param_count=param_count(config),
        flops_per_token=total,
        layer_flops_per_token=lf,
        norm_count=norms,
        vector_ops_per_token=norms * NORM_OPS_PER_CHANNEL * config.hidden,
        relative_speed=ref_total / total,
        seq_len=seq_len,
    )


@dataclass
class EvalReport:
    kd_loss: float
    perplexity: float
    teacher_perplexity: float
    cost: CostEstimate

    def to_dict(self) -> dict:
        return asdict(self)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1) + "\n", encoding="utf-8")

    def table(self) -> str:
        rows = [
            ("kd_loss (nats/token)", f"{self.kd_loss:.6f}"),
            ("perplexity", f"{self.perplexity:.4f}"),
            ("teacher perplexity", f"{self.teacher_perplexity:.4f}"),
            ("params", f"{self.cost.param_count}"),
            ("flops/token", f"{self.cost.flops_per_token}"),
            ("rmsnorm layers", f"{self.cost.norm_count}"),
            ("relative speed", f"{self.cost.relative_speed:.3f}x"),
        ]
        width = max(len(k) for k, _ in rows)
        return "\n".join(f"{k:<{width}}  {v}" for k, v in rows)


def evaluate(teacher: WeightStore, student: WeightStore, data: CalibrationSet, seq_len: int = 1024) -> EvalReport:
    return EvalReport(
        kd_loss=kd_loss(teacher, student, data),
        perplexity=perplexity(student, data),
        teacher_perplexity=perplexity(teacher, data),
        cost=estimate_cost(student.config, seq_len, reference=teacher.config),
    )
