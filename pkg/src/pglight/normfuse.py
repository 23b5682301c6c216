"""Post-RMSNorm absorption.

A post-module RMSNorm is replaced by a fixed per-channel scale
``gamma * mean(1 / rms(x))`` (mean over calibration tokens entering that
norm) and the scale is folded into the columns of the projection that
produced ``x`` (W_O for attention, W_down for the FFN).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .calibrate import ActivationStats, CalibrationSet
from .errors import InputError, NumericError, PlanError, ShapeError
from .model import WeightStore, forward
from .surgery import _rebuilt

SITE_KINDS = {"attn": ("post_attn_gamma", "W_O"), "ffn": ("post_ffn_gamma", "W_down")}


def parse_sites(spec: str, w: WeightStore) -> list:
    """Turn ``all`` / ``attn`` / ``ffn`` / ``none`` / ``1.attn,2.ffn`` into site keys.

    Kind selectors only pick sites whose post-norm is still present.
    """
    spec = (spec or "none").strip()
    cfg = w.config
    if spec in ("none", ""):
        return []
    if spec in ("all", "attn", "ffn"):
        kinds = ("attn", "ffn") if spec == "all" else (spec,)
        return [
            f"layers.{i}.{k}"
            for i in range(cfg.num_layers)
            for k in kinds
            if cfg.postnorm_present[i][0 if k == "attn" else 1]
        ]
    sites = []
    for part in spec.split(","):
        try:
            layer, kind = part.strip().split(".")
            layer = int(layer)
        except ValueError:
            raise InputError(f"bad site selector {part!r}; expected <layer>.<attn|ffn>") from None
        if kind not in SITE_KINDS or not 0 <= layer < cfg.num_layers:
            raise InputError(f"bad site selector {part!r}")
        sites.append(f"layers.{layer}.{kind}")
    return sites


def _split_site(site: str):
    try:
        prefix, layer, kind = site.split(".")
        assert prefix == "layers" and kind in SITE_KINDS
        return int(layer), kind
    except (ValueError, AssertionError):
        raise InputError(f"bad post-norm site {site!r}") from None


@dataclass
class AbsorptionReport:
    sites: list = field(default_factory=list)
    max_rel_logit_deviation: float | None = None

    def to_dict(self) -> dict:
        return {"sites": self.sites, "max_rel_logit_deviation": self.max_rel_logit_deviation}

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1) + "\n", encoding="utf-8")


def inv_scale(stats: ActivationStats, site: str) -> float:
    """Calibration mean of ``1 / sqrt(||x||^2 / d + eps)`` at a post-norm site."""
    if site not in stats.inv_scale_count:
        raise InputError(f"stats have no accumulator for post-norm site {site}")
    n = stats.inv_scale_count[site]
    if n == 0:
        raise NumericError(f"post-norm site {site} saw no calibration tokens")
    return stats.inv_scale_sum[site] / n


def remap_stats(stats: ActivationStats, layer_origin) -> ActivationStats:
    """Post-norm accumulators of a source model, re-keyed for a model whose
    layer ``i`` came from source layer ``layer_origin[i]``."""
    out = ActivationStats.from_dict(stats.to_dict())
    out.inv_scale_sum, out.inv_scale_count = {}, {}
    for i, o in enumerate(layer_origin):
        for kind in SITE_KINDS:
            src = f"layers.{o}.{kind}"
            if src in stats.inv_scale_count:
                out.inv_scale_sum[f"layers.{i}.{kind}"] = stats.inv_scale_sum[src]
                out.inv_scale_count[f"layers.{i}.{kind}"] = stats.inv_scale_count[src]
    return out


def fuse_columns(W: np.ndarray, scale: np.ndarray) -> np.ndarray:
    """Scale column ``j`` of ``W`` by ``scale[j]``."""
    if W.shape[1] != scale.shape[0]:
        raise ShapeError(f"cannot fuse a {scale.shape[0]}-vector into a matrix with {W.shape[1]} columns")
    return np.ascontiguousarray(W * scale[None, :].astype(np.float32))


def absorb(w: WeightStore, stats: ActivationStats, sites):
    """Fold the listed post-norms into their producing projections.

    Returns ``(weights, AbsorptionReport)``. ``stats`` must come from a
    calibration run of ``w`` itself.
    """
    sites = list(sites)
    if len(set(sites)) != len(sites):
        raise PlanError(f"duplicate absorption sites in {sites}")
    layers = [lw.copy() for lw in w.layers]
    report = AbsorptionReport()
    for site in sites:
        layer, kind = _split_site(site)
        if not 0 <= layer < len(layers):
            raise InputError(f"site {site} outside model with {len(layers)} layers")
        gamma_name, proj_name = SITE_KINDS[kind]
        lw = layers[layer]
        gamma = getattr(lw, gamma_name)
        if gamma is None:
            raise PlanError(f"post-norm at {site} is already absorbed")
        s_inv = inv_scale(stats, site)
        if not s_inv > 0 or not np.isfinite(s_inv):
            raise NumericError(f"inverse scale at {site} is {s_inv}, expected a finite value > 0")
        gamma_abs = (gamma.astype(np.float64) * s_inv).astype(np.float32)
        setattr(lw, proj_name, fuse_columns(getattr(lw, proj_name), gamma_abs))
        setattr(lw, gamma_name, None)
        report.sites.append(
            {
                "site": site,
                "inv_scale": s_inv,
                "token_count": int(stats.inv_scale_count[site]),
                "gamma_abs_mean": float(gamma_abs.astype(np.float64).mean()),
            }
        )
    return _rebuilt(w, layers), report


def max_rel_deviation(ref: np.ndarray, other: np.ndarray) -> float:
    """Max over rows of ``max|ref - other| / max|ref|`` (row-wise infinity norms)."""
    ref = np.asarray(ref, dtype=np.float64)
    other = np.asarray(other, dtype=np.float64)
    if ref.shape != other.shape:
        raise ShapeError(f"cannot compare outputs of shape {ref.shape} and {other.shape}")
    num = np.max(np.abs(ref - other), axis=-1)
    den = np.max(np.abs(ref), axis=-1)
    rel = np.where(den > 0, num / np.where(den > 0, den, 1.0), np.where(num > 0, np.inf, 0.0))
    return float(np.max(rel)) if rel.size else 0.0


def verify_absorption(w_sandwich: WeightStore, w_absorbed: WeightStore, probe: CalibrationSet) -> float:
    """Largest relative logit deviation between the two models over ``probe``."""
    a, b = w_sandwich.config, w_absorbed.config
    if (a.vocab, a.hidden, a.num_layers) != (b.vocab, b.hidden, b.num_layers):
        raise ShapeError("absorbed model shape differs from the sandwich model beyond post-norm removal")
    worst = 0.0
    for seq in probe.sequences:
        ref, _ = forward(w_sandwich, seq)
        out, _ = forward(w_absorbed, seq)
        worst = max(worst, max_rel_deviation(ref, out))
    return worst
