"""Command-line front end: calibrate, score, prune, absorb, evaluate, verify.

Every command writes JSON reports (and checkpoints, where relevant) into
``--out``; stdout only carries a short summary. Failures print a JSON error
object on stderr and exit with 2 (usage), 3 (validation) or 4 (numeric).
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .calibrate import CalibrationSet, builtin_set, collect, read_tokens
from .checkpoint import load_checkpoint, save_checkpoint
from .errors import InputError, NumericError, PglError
from .evaluate import estimate_cost, evaluate
from .importance import score_all
from .model import ModelConfig, forward, random_init
from .normfuse import absorb, parse_sites, remap_stats, verify_absorption
from .surgery import PrunePlan, apply_plan

COMMANDS = ("init-toy", "calibrate", "score", "prune", "absorb", "eval", "estimate", "verify", "pipeline")


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n", encoding="utf-8")


def _calib(args, vocab: int, held_out: bool = False) -> CalibrationSet:
    spec = args.calib or "builtin"
    if spec == "builtin" or spec.startswith("builtin:"):
        seed = int(spec.split(":", 1)[1]) if ":" in spec else args.seed
        return builtin_set(vocab, seed=seed + (1 if held_out else 0))
    if not Path(spec).exists():
        raise InputError(f"calibration file {spec} does not exist")
    return read_tokens(spec)


def _probe(args, vocab: int) -> CalibrationSet:
    if args.probe:
        return read_tokens(args.probe)
    return _calib(args, vocab, held_out=True)


def _plan(args) -> PrunePlan:
    if not args.plan:
        return PrunePlan()
    text = args.plan.strip()
    if text.startswith("{"):
        try:
            return PrunePlan.from_dict(json.loads(text))
        except json.JSONDecodeError as exc:
            raise InputError(f"inline plan is not valid JSON: {exc}") from None
    if not Path(text).exists():
        raise InputError(f"plan file {text} does not exist")
    return PrunePlan.load(text)


def _out(args) -> Path:
    out = Path(args.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _need_checkpoint(args):
    if not args.checkpoint:
        raise InputError("--checkpoint is required")
    return load_checkpoint(args.checkpoint)


# ---------------------------------------------------------------- commands


def cmd_init_toy(args):
    cfg = ModelConfig(
        num_layers=args.layers,
        hidden=args.hidden,
        num_query_heads=args.heads,
        num_kv_groups=args.groups,
        head_dim=args.head_dim,
        ffn_dim=args.ffn,
        vocab=args.vocab,
    )
    w = random_init(cfg, args.seed)
    out = _out(args)
    save_checkpoint(w, out / "toy.pgl")
    print(f"wrote {out / 'toy.pgl'} ({cfg.num_layers} layers, d={cfg.hidden}, seed={args.seed})")


def cmd_calibrate(args):
    w = _need_checkpoint(args)
    stats = collect(w, _calib(args, w.config.vocab), workers=args.workers)
    out = _out(args)
    stats.save(out / "stats.json")
    print(f"calibrated on {stats.sequence_count} sequences / {stats.token_count} tokens -> {out / 'stats.json'}")
    return stats


def cmd_score(args):
    w = _need_checkpoint(args)
    stats = collect(w, _calib(args, w.config.vocab), workers=args.workers)
    scores = score_all(stats, w.config)
    out = _out(args)
    scores.save(out / "scores.json")
    print("layer BI: " + " ".join(f"{s:.4f}" for s in scores.layer))
    return scores


def _prune(w, args, out: Path):
    stats = collect(w, _calib(args, w.config.vocab), workers=args.workers)
    stats.save(out / "stats.json")
    score_all(stats, w.config).save(out / "scores.json")
    student, report = apply_plan(w, stats, _plan(args), clap=not args.no_clap, slnp=not args.no_slnp)
    report.save(out / "surgery.json")
    return student, report, stats


def _absorb(w, args, out: Path, stats=None):
    """``stats`` defaults to a fresh calibration of ``w``; the pipeline passes the
    teacher's run, re-keyed to the student's layers."""
    sites = parse_sites(args.sites, w)
    if not sites:
        return w, None
    if stats is None:
        stats = collect(w, _calib(args, w.config.vocab), workers=args.workers)
    absorbed, report = absorb(w, stats, sites)
    report.max_rel_logit_deviation = verify_absorption(w, absorbed, _probe(args, w.config.vocab))
    report.save(out / "absorption.json")
    return absorbed, report


def cmd_prune(args):
    w = _need_checkpoint(args)
    out = _out(args)
    student, report, _ = _prune(w, args, out)
    save_checkpoint(student, out / "student.pgl")
    c = student.config
    print(f"pruned -> {out / 'student.pgl'}: L={c.num_layers} d={c.hidden} heads/group={c.heads_per_group}")


def cmd_absorb(args):
    w = _need_checkpoint(args)
    out = _out(args)
    absorbed, report = _absorb(w, args, out)
    save_checkpoint(absorbed, out / "absorbed.pgl")
    n = 0 if report is None else len(report.sites)
    dev = None if report is None else report.max_rel_logit_deviation
    print(f"absorbed {n} post-norm sites -> {out / 'absorbed.pgl'} (max rel logit deviation {dev})")


def cmd_eval(args):
    student = _need_checkpoint(args)
    teacher = load_checkpoint(args.teacher) if args.teacher else student
    rep = evaluate(teacher, student, _probe(args, student.config.vocab), seq_len=args.seq_len)
    out = _out(args)
    rep.save(out / "eval.json")
    print(rep.table())
    return rep


def cmd_estimate(args):
    w = _need_checkpoint(args)
    ref = load_checkpoint(args.teacher).config if args.teacher else None
    cost = estimate_cost(w.config, args.seq_len, reference=ref)
    out = _out(args)
    _write_json(out / "cost.json", vars(cost))
    print(f"params={cost.param_count} flops/token={cost.flops_per_token} relative_speed={cost.relative_speed:.3f}")


def verify_model(w, report_path=None) -> dict:
    """Re-check model invariants (and a surgery report, if given); raise on violation."""
    w.validate()
    logits, tr = forward(w, [0, min(1, w.config.vocab - 1)], trace=True)
    if logits.shape != (2, w.config.vocab) or not np.all(np.isfinite(logits)):
        raise NumericError("forward produced non-finite or misshaped logits")
    checks = {"tensors": "ok", "forward": "ok", "trace_layers": len(tr.layers)}
    if report_path:
        rep = json.loads(Path(report_path).read_text(encoding="utf-8"))
        for name, c in rep.get("slnp", {}).items():
            if not c > 0:
                raise NumericError(f"rescale scalar for {name} is {c}, expected > 0")
        if rep.get("final_config") and ModelConfig.from_dict(rep["final_config"]) != w.config:
            raise PglError("surgery report final_config does not match the checkpoint")
        for site in rep.get("sites", []):
            if not site["inv_scale"] > 0:
                raise NumericError(f"inverse scale at {site['site']} is not positive")
        checks["report"] = "ok"
    return checks


def cmd_verify(args):
    w = _need_checkpoint(args)
    checks = verify_model(w, args.report)
    out = _out(args)
    _write_json(out / "verify.json", checks)
    print("verify: ok")


def cmd_pipeline(args):
    teacher = _need_checkpoint(args)
    out = _out(args)
    student, report, stats = _prune(teacher, args, out)
    student, absorption = _absorb(student, args, out, remap_stats(stats, report.layer_origin))
    save_checkpoint(student, out / "student.pgl")
    rep = evaluate(teacher, student, _probe(args, teacher.config.vocab), seq_len=args.seq_len)
    rep.save(out / "eval.json")
    checks = verify_model(student, out / "surgery.json" if absorption is None else None)
    _write_json(out / "verify.json", checks)
    print(rep.table())


HANDLERS = {
    "init-toy": cmd_init_toy,
    "calibrate": cmd_calibrate,
    "score": cmd_score,
    "prune": cmd_prune,
    "absorb": cmd_absorb,
    "eval": cmd_eval,
    "estimate": cmd_estimate,
    "verify": cmd_verify,
    "pipeline": cmd_pipeline,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pglight", description=__doc__.splitlines()[0])
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--checkpoint", help="input .pgl checkpoint")
    p.add_argument("--calib", help="token file, or 'builtin' / 'builtin:<seed>' (default builtin)")
    p.add_argument("--probe", help="held-out token file for eval/absorption checks")
    p.add_argument("--plan", help="PrunePlan JSON file or inline JSON object")
    p.add_argument("--sites", default="none", help="post-norm sites to absorb: none|all|attn|ffn|<layer>.<attn|ffn>,...")
    p.add_argument("--out", default=".", help="output directory")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--report", help="report JSON to re-check (verify)")
    p.add_argument("--teacher", help="reference checkpoint for eval/estimate")
    p.add_argument("--seq-len", type=int, default=1024, help="context length for the cost estimate")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--no-clap", action="store_true", help="treat merge actions as plain drops")
    p.add_argument("--no-slnp", action="store_true", help="skip gamma rescaling after channel pruning")
    toy = p.add_argument_group("init-toy")
    toy.add_argument("--layers", type=int, default=2)
    toy.add_argument("--hidden", type=int, default=8)
    toy.add_argument("--heads", type=int, default=4)
    toy.add_argument("--groups", type=int, default=2)
    toy.add_argument("--head-dim", type=int, default=4)
    toy.add_argument("--ffn", type=int, default=16)
    toy.add_argument("--vocab", type=int, default=32)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        HANDLERS[args.command](args)
    except PglError as exc:
        err = {"error": type(exc).__name__, "message": str(exc), "exit_code": exc.exit_code}
        print(json.dumps(err), file=sys.stderr)
        return exc.exit_code
    except (OSError, json.JSONDecodeError, KeyError) as exc:
        err = {"error": type(exc).__name__, "message": str(exc), "exit_code": 3}
        print(json.dumps(err), file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
