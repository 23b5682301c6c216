"""Structured pruning of a WeightStore.

Width: hidden channels, query heads within KV groups, FFN neurons. Depth:
plain layer drops, or cross-layer attention merging where the best KV groups
of a removed layer are moved into the nearest preceding kept layer. After
channel pruning every RMSNorm gamma is rescaled to its pre-pruning L2 norm.

Every rewrite returns a fresh WeightStore; inputs are never modified.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .calibrate import ActivationStats
from .errors import NumericError, PlanError
from .importance import ImportanceScores, kv_group_scores, score_all
from .model import NORM_NAMES, LayerWeights, ModelConfig, WeightStore

KEEP, DROP, MERGE = "keep", "drop", "merge"
LAYER_ACTIONS = (KEEP, DROP, MERGE)


def select_top_k(scores, k: int) -> list:
    """Indices of the ``k`` largest scores, ties to the lower index, sorted ascending."""
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    n = scores.size
    if not isinstance(k, (int, np.integer)) or not 1 <= k <= n:
        raise PlanError(f"top-k: k={k} outside [1, {n}]")
    order = sorted(range(n), key=lambda i: (-scores[i], i))
    return sorted(order[:k])


def derive_config(base: ModelConfig, embedding, layers, vocab=None) -> ModelConfig:
    """Rebuild a config from actual tensor shapes after a rewrite."""
    dh = base.head_dim
    if not layers:
        raise PlanError("at least one layer must remain")
    groups = [lw.W_K.shape[1] // dh for lw in layers]
    heads = [lw.W_Q.shape[1] // dh for lw in layers]
    hpg = {h // g for h, g in zip(heads, groups)}
    if len(hpg) != 1 or any(h % g for h, g in zip(heads, groups)):
        raise PlanError(f"layers disagree on query heads per KV group: heads={heads} groups={groups}")
    ffns = [lw.W_gate.shape[1] for lw in layers]
    return ModelConfig(
        num_layers=len(layers),
        hidden=embedding.shape[1],
        num_query_heads=groups[0] * hpg.pop(),
        num_kv_groups=groups[0],
        head_dim=dh,
        ffn_dim=ffns[0],
        vocab=vocab or base.vocab,
        eps=base.eps,
        postnorm_present=tuple((lw.post_attn_gamma is not None, lw.post_ffn_gamma is not None) for lw in layers),
        layer_kv_groups=tuple(groups),
        layer_ffn_dims=tuple(ffns),
    )


def _rebuilt(w: WeightStore, layers, embedding=None, final_gamma=None, output_head=None) -> WeightStore:
    embedding = w.embedding if embedding is None else embedding
    out = WeightStore(
        config=derive_config(w.config, embedding, layers),
        embedding=np.ascontiguousarray(embedding),
        layers=layers,
        final_gamma=np.ascontiguousarray(w.final_gamma if final_gamma is None else final_gamma),
        output_head=np.ascontiguousarray(w.output_head if output_head is None else output_head),
    )
    return out.validate()


def _cols(a, idx):
    return np.ascontiguousarray(a[:, idx])


def _rows(a, idx):
    return np.ascontiguousarray(a[idx, :])


def _head_cols(head_ids, dh):
    return np.concatenate([np.arange(j * dh, (j + 1) * dh) for j in head_ids]).astype(np.int64)


# --------------------------------------------------------------------------- plan


@dataclass
class PrunePlan:
    """Target architecture.

    ``keep_channels`` and ``keep_ffn`` accept either explicit data (index list /
    per-layer counts) or a single count; counts are turned into index sets from
    scores by :meth:`resolve`. ``None`` means keep everything on that axis.
    Layer indices always refer to the unpruned model.
    """

    keep_channels: list | int | None = None
    heads_per_group: int | None = None
    groups_per_layer: int | None = None
    keep_ffn: list | int | None = None
    layer_action: list | None = None

    def to_dict(self) -> dict:
        return {
            "keep_channels": self.keep_channels,
            "heads_per_group": self.heads_per_group,
            "groups_per_layer": self.groups_per_layer,
            "keep_ffn": self.keep_ffn,
            "layer_action": self.layer_action,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PrunePlan":
        unknown = set(d) - set(cls().to_dict())
        if unknown:
            raise PlanError(f"unknown plan fields: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path) -> "PrunePlan":
        try:
            return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
        except (OSError, json.JSONDecodeError) as exc:
            raise PlanError(f"cannot read plan {path}: {exc}") from None

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1) + "\n", encoding="utf-8")

    def resolve(self, cfg: ModelConfig, scores: ImportanceScores | None = None) -> "PrunePlan":
        """Return a fully explicit, validated plan for ``cfg``."""
        L, d = cfg.num_layers, cfg.hidden
        kc = self.keep_channels
        if kc is None:
            kc = list(range(d))
        elif isinstance(kc, (int, np.integer)):
            if scores is None:
                raise PlanError("a channel count needs channel scores to resolve")
            kc = select_top_k(scores.channel, int(kc))
        kc = [int(i) for i in kc]
        if not kc or any(b <= a for a, b in zip(kc, kc[1:])) or kc[0] < 0 or kc[-1] >= d:
            raise PlanError(f"keep_channels must be non-empty, strictly increasing and within [0, {d})")

        q = cfg.heads_per_group if self.heads_per_group is None else int(self.heads_per_group)
        if not 1 <= q <= cfg.heads_per_group:
            raise PlanError(f"heads_per_group={q} outside [1, {cfg.heads_per_group}]")

        kf = self.keep_ffn
        if kf is None:
            kf = [cfg.ffn(i) for i in range(L)]
        elif isinstance(kf, (int, np.integer)):
            kf = [int(kf)] * L
        kf = [int(k) for k in kf]
        if len(kf) != L:
            raise PlanError(f"keep_ffn has {len(kf)} entries for {L} layers")
        for i, k in enumerate(kf):
            if not 1 <= k <= cfg.ffn(i):
                raise PlanError(f"keep_ffn[{i}]={k} outside [1, {cfg.ffn(i)}]")

        acts = [KEEP] * L if self.layer_action is None else [str(a) for a in self.layer_action]
        if len(acts) != L:
            raise PlanError(f"layer_action has {len(acts)} entries for {L} layers")
        bad = [a for a in acts if a not in LAYER_ACTIONS]
        if bad:
            raise PlanError(f"unknown layer actions {bad}; expected one of {LAYER_ACTIONS}")
        if acts[0] == MERGE:
            raise PlanError("layer 0 cannot merge into a predecessor")
        if KEEP not in acts:
            raise PlanError("at least one layer must be kept")

        gp = self.groups_per_layer
        if gp is not None:
            gp = int(gp)
            if gp < 1:
                raise PlanError(f"groups_per_layer must be >= 1, got {gp}")
        return PrunePlan(kc, q, gp, kf, acts)

    def is_identity(self, cfg: ModelConfig) -> bool:
        p = self.resolve(cfg)
        return (
            p.keep_channels == list(range(cfg.hidden))
            and p.heads_per_group == cfg.heads_per_group
            and p.keep_ffn == [cfg.ffn(i) for i in range(cfg.num_layers)]
            and all(a == KEEP for a in p.layer_action)
        )


@dataclass
class SurgeryReport:
    gamma_stats: list = field(default_factory=list)
    slnp: dict = field(default_factory=dict)
    clap: list = field(default_factory=list)
    layer_origin: list = field(default_factory=list)
    plan: dict = field(default_factory=dict)
    final_config: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "plan": self.plan,
            "layer_origin": self.layer_origin,
            "clap": self.clap,
            "slnp": self.slnp,
            "gamma_stats": self.gamma_stats,
            "final_config": self.final_config,
        }

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1) + "\n", encoding="utf-8")


# --------------------------------------------------------------------------- width


def prune_channels(w: WeightStore, keep) -> WeightStore:
    d = w.config.hidden
    keep = [int(i) for i in keep]
    if not keep or any(b <= a for a, b in zip(keep, keep[1:])) or keep[0] < 0 or keep[-1] >= d:
        raise PlanError(f"channel index set must be non-empty, strictly increasing and within [0, {d})")
    idx = np.asarray(keep, dtype=np.int64)
    layers = []
    for lw in w.layers:
        layers.append(
            LayerWeights(
                pre_attn_gamma=lw.pre_attn_gamma[idx],
                post_attn_gamma=None if lw.post_attn_gamma is None else lw.post_attn_gamma[idx],
                pre_ffn_gamma=lw.pre_ffn_gamma[idx],
                post_ffn_gamma=None if lw.post_ffn_gamma is None else lw.post_ffn_gamma[idx],
                W_Q=_rows(lw.W_Q, idx),
                W_K=_rows(lw.W_K, idx),
                W_V=_rows(lw.W_V, idx),
                W_O=_cols(lw.W_O, idx),
                W_gate=_rows(lw.W_gate, idx),
                W_up=_rows(lw.W_up, idx),
                W_down=_cols(lw.W_down, idx),
            )
        )
    return _rebuilt(w, layers, _cols(w.embedding, idx), w.final_gamma[idx], _rows(w.output_head, idx))


def _kept_heads(cfg: ModelConfig, layer: int, scores, q: int) -> list:
    hpg, G = cfg.heads_per_group, cfg.groups(layer)
    scores = np.asarray(scores, dtype=np.float64)
    if scores.size != G * hpg:
        raise PlanError(f"layer {layer}: {scores.size} head scores for {G * hpg} heads")
    kept = []
    for g in range(G):
        kept += [g * hpg + j for j in select_top_k(scores[g * hpg:(g + 1) * hpg], q)]
    return kept


def _prune_heads(w: WeightStore, head_scores, q: int):
    cfg = w.config
    if not isinstance(q, (int, np.integer)) or not 1 <= q <= cfg.heads_per_group:
        raise PlanError(f"heads per group q={q} outside [1, {cfg.heads_per_group}]")
    if len(head_scores) != cfg.num_layers:
        raise PlanError(f"head scores cover {len(head_scores)} layers, model has {cfg.num_layers}")
    layers, kept_all = [], []
    for i, lw in enumerate(w.layers):
        kept = _kept_heads(cfg, i, head_scores[i], q)
        cols = _head_cols(kept, cfg.head_dim)
        nl = lw.copy()
        nl.W_Q = _cols(lw.W_Q, cols)
        nl.W_O = _rows(lw.W_O, cols)
        layers.append(nl)
        kept_all.append(kept)
    return _rebuilt(w, layers), kept_all


def prune_heads(w: WeightStore, head_scores, q: int) -> WeightStore:
    """Keep the ``q`` best query heads inside every KV group of every layer."""
    return _prune_heads(w, head_scores, q)[0]


def prune_ffn(w: WeightStore, ffn_scores, keep_counts) -> WeightStore:
    cfg = w.config
    if isinstance(keep_counts, (int, np.integer)):
        keep_counts = [int(keep_counts)] * cfg.num_layers
    if len(keep_counts) != cfg.num_layers or len(ffn_scores) != cfg.num_layers:
        raise PlanError("FFN keep counts and scores must cover every layer")
    layers = []
    for i, lw in enumerate(w.layers):
        if np.asarray(ffn_scores[i]).size != cfg.ffn(i):
            raise PlanError(f"layer {i}: {np.asarray(ffn_scores[i]).size} FFN scores for {cfg.ffn(i)} neurons")
        idx = np.asarray(select_top_k(ffn_scores[i], keep_counts[i]), dtype=np.int64)
        nl = lw.copy()
        nl.W_gate = _cols(lw.W_gate, idx)
        nl.W_up = _cols(lw.W_up, idx)
        nl.W_down = _rows(lw.W_down, idx)
        layers.append(nl)
    return _rebuilt(w, layers)


# --------------------------------------------------------------------------- depth


def drop_layers(w: WeightStore, layer_ids) -> WeightStore:
    L = w.config.num_layers
    drop = set(int(i) for i in layer_ids)
    if any(not 0 <= i < L for i in drop):
        raise PlanError(f"layer ids {sorted(drop)} outside [0, {L})")
    if len(drop) >= L:
        raise PlanError("cannot drop every layer")
    return _rebuilt(w, [lw.copy() for i, lw in enumerate(w.layers) if i not in drop])


def merge_runs(actions) -> dict:
    """Map each recipient layer to the merge-marked layers it absorbs."""
    runs = {}
    recipient = None
    for i, a in enumerate(actions):
        if a == KEEP:
            recipient = i
        elif a == MERGE:
            if recipient is None:
                raise PlanError(f"layer {i} is marked merge but no preceding layer is kept")
            runs.setdefault(recipient, []).append(i)
    return runs


def clap_merge(w: WeightStore, head_scores, plan: PrunePlan):
    """Cross-layer attention merge.

    Heads are pruned to ``plan.heads_per_group`` per KV group in every layer,
    then for each recipient the KV groups of the recipient and its donors are
    ranked jointly by mean surviving-head score and the best
    ``plan.groups_per_layer`` are assembled, verbatim, into the recipient's
    attention. Donor layers are removed. Returns ``(weights, fragment)``.
    """
    cfg = w.config
    plan = PrunePlan(
        heads_per_group=plan.heads_per_group, groups_per_layer=plan.groups_per_layer, layer_action=plan.layer_action
    ).resolve(cfg)
    runs = merge_runs(plan.layer_action)
    if not runs:
        raise PlanError("no layer is marked merge")
    q = plan.heads_per_group
    pruned, kept = _prune_heads(w, head_scores, q)
    dh = cfg.head_dim

    layers = [lw.copy() for lw in pruned.layers]
    merges = []
    for r, donors in runs.items():
        candidates = []
        for origin in [r] + donors:
            surviving = [
                [float(head_scores[origin][j]) for j in kept[origin][g * q:(g + 1) * q]]
                for g in range(cfg.groups(origin))
            ]
            for g, s in enumerate(kv_group_scores(surviving)):
                candidates.append({"origin_layer": origin, "group": g, "score": s, "heads": kept[origin][g * q:(g + 1) * q]})
        target = cfg.groups(r) if plan.groups_per_layer is None else plan.groups_per_layer
        if target > len(candidates):
            raise PlanError(f"groups_per_layer={target} exceeds the {len(candidates)} groups available to layer {r}")
        ranked = sorted(range(len(candidates)), key=lambda i: (-candidates[i]["score"], i))
        chosen = sorted(ranked[:target])

        k_parts, v_parts, q_blocks, o_blocks = [], [], [], []
        for ci in chosen:
            c = candidates[ci]
            src = pruned.layers[c["origin_layer"]]
            g = c["group"]
            kv = np.arange(g * dh, (g + 1) * dh)
            hc = np.arange(g * q * dh, (g + 1) * q * dh)
            k_parts.append(src.W_K[:, kv])
            v_parts.append(src.W_V[:, kv])
            q_blocks.append(src.W_Q[:, hc])
            o_blocks.append(src.W_O[hc, :])
        rec = layers[r]
        rec.W_K = np.ascontiguousarray(np.concatenate(k_parts, axis=1))
        rec.W_V = np.ascontiguousarray(np.concatenate(v_parts, axis=1))
        rec.W_Q = np.ascontiguousarray(np.concatenate(q_blocks, axis=1))
        rec.W_O = np.ascontiguousarray(np.concatenate(o_blocks, axis=0))
        merges.append(
            {
                "recipient": r,
                "donors": donors,
                "groups_per_layer": target,
                "candidates": [{k: c[k] for k in ("origin_layer", "group", "score")} for c in candidates],
                "selected": [{k: candidates[ci][k] for k in ("origin_layer", "group", "score", "heads")} for ci in chosen],
            }
        )

    donors_all = {d for ds in runs.values() for d in ds}
    survivors = [i for i in range(cfg.num_layers) if i not in donors_all]
    out = _rebuilt(pruned, [layers[i] for i in survivors])
    return out, {"merges": merges, "layer_origin": survivors, "kept_heads": kept}


# --------------------------------------------------------------------------- norms


def slnp_rescale(w_before: WeightStore, w_after: WeightStore):
    """Rescale every gamma in ``w_after`` back to the L2 norm it had in ``w_before``.

    Returns ``(weights, {norm name: scalar})``.
    """
    before = dict(w_before.norm_gammas())
    after = dict(w_after.norm_gammas())
    if before.keys() != after.keys():
        raise PlanError("rescale needs models with the same RMSNorm layers")
    scalars = {}
    for name, g in after.items():
        n_orig = float(np.linalg.norm(before[name].astype(np.float64)))
        n_pruned = float(np.linalg.norm(g.astype(np.float64)))
        if n_pruned == 0.0:
            raise NumericError(f"{name}: every retained gamma entry is zero, cannot rescale")
        if n_orig == 0.0:
            raise NumericError(f"{name}: original gamma is all zero, rescale scalar would be 0")
        scalars[name] = n_orig / n_pruned

    def scaled(name, g):
        if g is None:
            return None
        return (g.astype(np.float64) * scalars[name]).astype(np.float32)

    layers = []
    for i, lw in enumerate(w_after.layers):
        nl = lw.copy()
        for nm in NORM_NAMES:
            setattr(nl, nm, scaled(f"layers.{i}.{nm}", getattr(lw, nm)))
        layers.append(nl)
    out = _rebuilt(w_after, layers, final_gamma=scaled("final_gamma", w_after.final_gamma))
    return out, scalars


def _mean_std(g) -> dict:
    g = np.asarray(g, dtype=np.float64)
    return {"mean": float(g.mean()), "std": float(g.std())}


def gamma_report(w_orig: WeightStore, w_new: WeightStore, layer_origin, keep_channels) -> list:
    """Mean/std of each final gamma, and of the original gamma on retained channels only."""
    idx = np.asarray(keep_channels, dtype=np.int64)
    rows = []
    for name, g in w_new.norm_gammas():
        if name == "final_gamma":
            src_name, origin = name, None
        else:
            _, i, nm = name.split(".")
            origin = layer_origin[int(i)]
            src_name = f"layers.{origin}.{nm}"
        orig = dict(w_orig.norm_gammas())[src_name]
        rows.append({"norm": name, "origin": src_name, "before": _mean_std(orig[idx]), "after": _mean_std(g)})
    return rows


# --------------------------------------------------------------------------- pipeline


def apply_plan(w: WeightStore, stats: ActivationStats, plan: PrunePlan, clap: bool = True, slnp: bool = True):
    """Apply ``plan`` in fixed order: heads (with cross-layer merge), layer
    drops, FFN neurons, channels, gamma rescale.

    ``clap=False`` turns merge actions into plain drops and ``slnp=False``
    skips the rescale; both exist for ablations.
    """
    scores = score_all(stats)
    cfg = w.config
    plan = plan.resolve(cfg, scores)
    report = SurgeryReport(plan=plan.to_dict())

    actions = list(plan.layer_action)
    if not clap:
        actions = [DROP if a == MERGE else a for a in actions]
    if MERGE in actions:
        cur, frag = clap_merge(w, scores.head, PrunePlan(**{**plan.to_dict(), "layer_action": actions}))
        origin = frag["layer_origin"]
        report.clap = frag["merges"]
    else:
        cur = prune_heads(w, scores.head, plan.heads_per_group)
        origin = list(range(cfg.num_layers))

    drop_ids = [i for i, o in enumerate(origin) if actions[o] == DROP]
    if drop_ids:
        cur = drop_layers(cur, drop_ids)
        origin = [o for i, o in enumerate(origin) if i not in set(drop_ids)]

    cur = prune_ffn(cur, [scores.ffn[o] for o in origin], [plan.keep_ffn[o] for o in origin])

    before_channels = cur
    cur = prune_channels(cur, plan.keep_channels)
    if slnp:
        cur, report.slnp = slnp_rescale(before_channels, cur)

    report.layer_origin = origin
    report.gamma_stats = gamma_report(w, cur, origin, plan.keep_channels)
    report.final_config = cur.config.to_dict()
    return cur, report
