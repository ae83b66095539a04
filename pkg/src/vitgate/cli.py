"""Command-line front end: one subcommand per toolkit stage."""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .checkpoint import CheckpointError, ConfigError, ViTConfig, load, save
from .data import Dataset, labeled_dataset, noise_probes
from .defenses import (
    OCCLUSION_NOTE,
    PatchDropConfig,
    ProtocolError,
    PruneProtocol,
    detector_threshold,
    fine_prune_sweep,
    hit_miss_csv,
    hit_miss_stats,
    patchdrop_curve,
    patchdrop_scores,
)
from .dfba import DfbaError, default_dfba_plan, dfba_diagnose, dfba_inject
from .diagnostics import DiagnosticsError, depth_trace, evaluate, margin_histograms, weight_audit, write_csv
from .injector import InjectionError, InjectionPlan, allowed_mask, changed_mask, default_plan, inject, stage1_evidence
from .triggers import TriggerError, TriggerSet, build_trigger_set, stamp
from .vit import new_model

EXIT_USAGE = 2
EXIT_FORMAT = 3
EXIT_INJECTION = 4
EXIT_PROTOCOL = 5
EXIT_IO = 6

NEURAL_CLEANSE_NOTE = (
    "neural-cleanse is not provided: it reverse-engineers triggers by gradient optimization, "
    "and this toolkit is forward-only. See the README section on defenses."
)


class UsageError(ValueError):
    pass


def _write(out_dir: Path, name: str, text: str) -> Path:
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / name
    path.write_text(text)
    return path


def _manifest(args, outputs: list[str]) -> str:
    """key: value lines describing the run."""
    inputs = {k: str(v) for k, v in vars(args).items() if k not in ("func",) and v is not None}
    lines = [
        f"command: {args.command}",
        f"seed: {getattr(args, 'seed', None)}",
        f"tool_version: {__version__}",
        f"out_dir: {args.out_dir}",
        "arguments: " + json.dumps(inputs, sort_keys=True),
        "outputs: " + json.dumps(outputs),
    ]
    return "\n".join(lines) + "\n"


def _guard_output(inputs, output) -> None:
    out = Path(output).resolve()
    for p in inputs:
        if p is not None and Path(p).resolve() == out:
            raise UsageError(f"refusing to overwrite input file {p}")


def _load_plan(path) -> InjectionPlan:
    return InjectionPlan.from_manifest(Path(path).read_text())


def _dataset(original, count: int, seed: int) -> Dataset:
    return labeled_dataset(original, count, seed)


def _subset(text: str | None) -> list[int]:
    if not text:
        return []
    return [int(s) for s in text.split(",") if s.strip()]


# ---------------------------------------------------------------- commands


def cmd_new_model(args) -> list[str]:
    cfg = ViTConfig(
        image_size=args.image_size,
        patch_size=args.patch_size,
        embed_dim=args.dim,
        num_heads=args.heads,
        head_dim=args.dim // args.heads if args.dim % args.heads == 0 else -1,
        depth=args.depth,
        mlp_hidden=args.mlp_hidden,
        num_classes=args.classes,
    )
    save(new_model(cfg, args.seed), args.output)
    return [str(args.output)]


def cmd_inject(args) -> list[str]:
    _guard_output([args.input, args.plan], args.output)
    ckpt = load(args.input)
    if args.plan:
        plan = _load_plan(args.plan)
    else:
        plan = default_plan(ckpt, n=args.n, m=args.m, target=args.target, probe_seed=args.seed)
    if args.highway:
        plan = replace(plan, highway_mode=args.highway)
    if args.calibration:
        plan = replace(plan, calibration_mode=args.calibration)
    if args.disable:
        plan = replace(plan, disabled_stages=tuple(args.disable))
    edited, report = inject(ckpt, plan)
    save(edited, args.output)
    out_dir = Path(args.out_dir)
    paths = [str(args.output)]
    paths.append(str(_write(out_dir, "plan.json", plan.to_manifest())))
    paths.append(str(_write(out_dir, "triggers.json", build_trigger_set(ckpt, plan.triggers).to_manifest())))
    paths.append(str(_write(out_dir, "inject_report.json", report.to_text())))
    return paths


def _triggers_for(args, ckpt) -> TriggerSet:
    if getattr(args, "triggers", None):
        return TriggerSet.load(args.triggers)
    return build_trigger_set(ckpt, _load_plan(args.plan).triggers)


def cmd_stamp(args) -> list[str]:
    ckpt = load(args.original)
    ts = _triggers_for(args, ckpt)
    if args.images:
        images = np.load(args.images)
    else:
        images = labeled_dataset(ckpt, args.count, args.seed).images
    _guard_output([args.images], args.output)
    np.save(args.output, stamp(images, ts, _subset(args.subset)))
    return [str(args.output)]


def cmd_eval(args) -> list[str]:
    original = load(args.original)
    edited = load(args.checkpoint)
    plan = _load_plan(args.plan)
    ts = build_trigger_set(original, plan.triggers)
    report = evaluate(edited, ts, plan.m, _dataset(original, args.count, args.seed), plan.target)
    out = [str(_write(Path(args.out_dir), "eval.csv", report.to_csv()))]
    if args.margins:
        samples = margin_histograms(edited, ts, plan, noise_probes(edited.config, args.margin_probes, args.seed + 1))
        out.append(str(_write(Path(args.out_dir), "margins.csv", samples.histogram_csv())))
        print(json.dumps(samples.margins(), sort_keys=True))
    print(report.to_csv(), end="")
    return out


def cmd_trace(args) -> list[str]:
    original = load(args.original)
    edited = load(args.checkpoint)
    plan = _load_plan(args.plan)
    ts = build_trigger_set(original, plan.triggers)
    images = stamp(_dataset(original, args.count, args.seed).images, ts, _subset(args.subset))
    coord = plan.gate_coord if args.coord is None else args.coord
    trace = depth_trace(edited, images, coord)
    header = ["input"] + [f"block{l + 1}" for l in range(trace.shape[1])]
    rows = [[i] + [f"{v:.9g}" for v in row] for i, row in enumerate(trace)]
    return [str(_write(Path(args.out_dir), "trace.csv", write_csv(header, rows)))]


def cmd_bound(args) -> list[str]:
    from .bounds import bound_table, empirical_gate_gaps, estimate_assumption_inputs

    original = load(args.original)
    plan = _load_plan(args.plan)
    if args.alpha is not None:
        plan = replace(plan, alpha=args.alpha)
    if args.beta is not None:
        plan = replace(plan, beta=args.beta)
    s1 = stage1_evidence(original, plan)
    probes = noise_probes(original.config, args.count, args.seed)
    pairs = noise_probes(original.config, args.count, args.seed + 1)
    rows = []
    for i, spec in enumerate(plan.triggers):
        inp = estimate_assumption_inputs(s1, spec, probes, args.eta, plan.alpha, plan.beta, original=original)
        check = empirical_gate_gaps(s1, spec, pairs, inp, original=original)
        for row in bound_table(inp, check):
            rows.append({"trigger": i, **row})
    keys = list(rows[0])
    text = write_csv(keys, [[r[k] for k in keys] for r in rows])
    print(text, end="")
    return [str(_write(Path(args.out_dir), "bound.csv", text))]


def cmd_audit(args) -> list[str]:
    before = load(args.before)
    after = load(args.after)
    audit = weight_audit(before, after, args.block)
    out_dir = Path(args.out_dir)
    outs = [
        str(_write(out_dir, "spectra.csv", audit.spectra_csv())),
        str(_write(out_dir, "norm_histograms.csv", audit.histogram_csv())),
    ]
    changed = changed_mask(before, after)
    total = sum(v.size for v in before.tensors.values())
    n_changed = int(sum(m.sum() for m in changed.values()))
    summary = {"changed_params": n_changed, "total_params": total, "edited_fraction": n_changed / total}
    if args.plan:
        plan = _load_plan(args.plan)
        allowed = allowed_mask(before.config, plan)
        outside = 0
        for name, m in changed.items():
            ok = allowed.get(name)
            outside += int(m.sum()) if ok is None else int((m & ~ok).sum())
        summary["changes_outside_documented_slices"] = outside
    outs.append(str(_write(out_dir, "audit_summary.json", json.dumps(summary, indent=1, sort_keys=True))))
    print(json.dumps(summary, sort_keys=True))
    return outs


def cmd_defend(args) -> list[str]:
    if args.defense == "neural-cleanse":
        print(NEURAL_CLEANSE_NOTE)
        return []
    original = load(args.original)
    edited = load(args.checkpoint)
    plan = _load_plan(args.plan)
    ts = build_trigger_set(original, plan.triggers)
    ds = _dataset(original, args.count, args.seed)
    non_target = ds.subset(ds.labels != plan.target)
    out_dir = Path(args.out_dir)
    if args.defense == "patchdrop":
        ratios = [float(r) for r in args.ratios.split(",")]
        curve = patchdrop_curve(
            edited, ts, plan.m, non_target, plan.target, ratios, args.trials, args.grid_side, args.seed
        )
        return [str(_write(out_dir, "patchdrop.csv", curve.to_csv()))]
    if args.defense == "detector":
        conf = PatchDropConfig(ratio=float(args.ratios.split(",")[0]), grid_side=args.grid_side, trials=args.trials)
        rng = np.random.default_rng(args.seed)
        clean = patchdrop_scores(edited, ds.images, conf, rng)
        k_d = detector_threshold(clean)
        rows = [("clean", "", f"{float((clean > k_d).mean()):.4f}", k_d)]
        for subset in ([0, 1], list(range(len(ts)))):
            scores = patchdrop_scores(edited, stamp(non_target.images, ts, subset), conf, rng)
            rows.append(("stamped", "+".join(map(str, subset)), f"{float((scores > k_d).mean()):.4f}", k_d))
        return [str(_write(out_dir, "detector.csv", write_csv(["inputs", "subset", "flag_rate", "k_d"], rows)))]
    if args.defense == "prune":
        cfg = edited.config
        sweep = fine_prune_sweep(
            edited,
            PruneProtocol(max_fraction=args.max_fraction),
            noise_probes(cfg, 512, args.seed + 1),
            ts,
            plan.m,
            ds,
            plan.target,
            {"gate_block0": (0, plan.gate_neuron_block0), "gate_last": (cfg.depth - 1, plan.gate_neuron_last)},
        )
        print(json.dumps({"gate_ranks": sweep.gate_ranks, "units": len(sweep.ranking), "stop_fraction": sweep.stop_fraction}))
        return [str(_write(out_dir, "prune.csv", sweep.to_csv()))]
    if args.defense == "occlusion":
        window = args.window or edited.config.patch_size
        stats = hit_miss_stats(edited, ts, plan.m, ds, plan.target, window)
        print(OCCLUSION_NOTE)
        return [str(_write(out_dir, "occlusion.csv", hit_miss_csv(stats)))]
    raise UsageError(f"unknown defense {args.defense}")


def cmd_dfba(args) -> list[str]:
    _guard_output([args.original], args.output)
    original = load(args.original)
    reserved = None
    plan = None
    if args.plan:
        plan = _load_plan(args.plan)
        reserved = {0: {plan.gate_neuron_block0}, original.config.depth - 1: {plan.gate_neuron_last}}
    dplan = default_dfba_plan(original, target=args.target, reserved=reserved, gamma_path=args.gamma_path, alpha_head=args.alpha_head)
    edited, trig = dfba_inject(original, dplan, reserved)
    save(edited, args.output)
    out_dir = Path(args.out_dir)
    outs = [str(args.output), str(_write(out_dir, "dfba_trigger.json", trig.to_manifest()))]
    outs.append(str(_write(out_dir, "dfba_plan.json", json.dumps(dplan.to_dict(), indent=1))))
    if args.compare and plan is not None:
        other = load(args.compare)
        ds = _dataset(original, args.count, args.seed)
        diag = dfba_diagnose(original, edited, trig, dplan, other, build_trigger_set(original, plan.triggers), plan.gate_coord, ds, plan.target)
        rows = []
        for name, d in diag.items():
            for depth, a in enumerate(d.auc):
                rows.append((name, d.coord, depth, f"{a:.6f}", f"{d.clean_target_logit:.6f}", f"{d.trigger_target_logit:.6f}", f"{d.asr:.3f}", f"{d.c_acc:.3f}"))
        header = ["attack", "coord", "depth", "auc", "clean_target_logit", "trigger_target_logit", "asr", "c_acc"]
        outs.append(str(_write(out_dir, "dfba_diagnosis.csv", write_csv(header, rows))))
    return outs


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="vitgate", description=__doc__)
    p.add_argument("--version", action="version", version=f"vitgate {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, func, help_text):
        sp = sub.add_parser(name, help=help_text)
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--out-dir", default=".")
        sp.set_defaults(func=func)
        return sp

    sp = add("new-model", cmd_new_model, "write a seeded random-init checkpoint")
    sp.add_argument("output")
    sp.add_argument("--depth", type=int, default=6)
    sp.add_argument("--dim", type=int, default=64)
    sp.add_argument("--heads", type=int, default=4)
    sp.add_argument("--classes", type=int, default=10)
    sp.add_argument("--image-size", type=int, default=32)
    sp.add_argument("--patch-size", type=int, default=8)
    sp.add_argument("--mlp-hidden", type=int, default=256)

    sp = add("inject", cmd_inject, "apply the gated backdoor rewrite")
    sp.add_argument("input")
    sp.add_argument("output")
    sp.add_argument("--plan")
    sp.add_argument("--n", type=int, default=3)
    sp.add_argument("--m", type=int, default=2)
    sp.add_argument("--target", type=int, default=1)
    sp.add_argument("--highway", choices=["hard_zero", "min_norm"])
    sp.add_argument("--calibration", choices=["paper_constants", "auto"])
    sp.add_argument("--disable", action="append", choices=["evidence", "boolean_gate", "highway", "injection"])

    sp = add("stamp", cmd_stamp, "stamp triggers onto images (.npy)")
    sp.add_argument("original")
    sp.add_argument("output")
    sp.add_argument("--plan")
    sp.add_argument("--triggers")
    sp.add_argument("--images")
    sp.add_argument("--subset", default="")
    sp.add_argument("--count", type=int, default=64)

    sp = add("eval", cmd_eval, "m-of-n truth table metrics")
    sp.add_argument("original")
    sp.add_argument("checkpoint")
    sp.add_argument("--plan", required=True)
    sp.add_argument("--count", type=int, default=500)
    sp.add_argument("--margins", action="store_true")
    sp.add_argument("--margin-probes", type=int, default=512)

    sp = add("trace", cmd_trace, "depth trace of a [CLS] coordinate")
    sp.add_argument("original")
    sp.add_argument("checkpoint")
    sp.add_argument("--plan", required=True)
    sp.add_argument("--subset", default="")
    sp.add_argument("--coord", type=int)
    sp.add_argument("--count", type=int, default=100)

    sp = add("bound", cmd_bound, "analytic margin bound vs measured gaps")
    sp.add_argument("original")
    sp.add_argument("--plan", required=True)
    sp.add_argument("--eta", type=float, default=0.01)
    sp.add_argument("--alpha", type=float)
    sp.add_argument("--beta", type=float)
    sp.add_argument("--count", type=int, default=2000)

    sp = add("audit", cmd_audit, "weight-diff audit and spectra")
    sp.add_argument("before")
    sp.add_argument("after")
    sp.add_argument("--block", type=int, default=0)
    sp.add_argument("--plan")

    sp = add("defend", cmd_defend, "run a forward-only defense")
    sp.add_argument("defense", choices=["patchdrop", "detector", "prune", "occlusion", "neural-cleanse"])
    sp.add_argument("original", nargs="?")
    sp.add_argument("checkpoint", nargs="?")
    sp.add_argument("--plan")
    sp.add_argument("--count", type=int, default=500)
    sp.add_argument("--ratios", default="0.1,0.3,0.5")
    sp.add_argument("--trials", type=int, default=2000)
    sp.add_argument("--grid-side", type=int, default=8)
    sp.add_argument("--max-fraction", type=float, default=0.07)
    sp.add_argument("--window", type=int)

    sp = add("dfba", cmd_dfba, "single-neuron path baseline")
    sp.add_argument("original")
    sp.add_argument("output")
    sp.add_argument("--plan")
    sp.add_argument("--compare")
    sp.add_argument("--target", type=int, default=1)
    sp.add_argument("--gamma-path", type=float, default=2.0)
    sp.add_argument("--alpha-head", type=float, default=3.0)
    sp.add_argument("--count", type=int, default=400)
    return p


def _check(args) -> None:
    if args.command == "defend" and args.defense != "neural-cleanse":
        if not (args.original and args.checkpoint and args.plan):
            raise UsageError("defend needs ORIGINAL CHECKPOINT and --plan")
    if args.command == "stamp" and not (args.plan or args.triggers):
        raise UsageError("stamp needs --plan or --triggers")
    for name in ("count", "trials"):
        if getattr(args, name, 1) is not None and getattr(args, name, 1) <= 0:
            raise UsageError(f"--{name} must be positive")


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        _check(args)
        outputs = args.func(args)
        _write(Path(args.out_dir), f"run_manifest_{args.command}.txt", _manifest(args, outputs))
    except UsageError as e:
        print(f"error[usage]: {e}", file=sys.stderr)
        return EXIT_USAGE
    except ConfigError as e:
        print(f"error[config]: {e}", file=sys.stderr)
        return EXIT_USAGE
    except CheckpointError as e:
        print(f"error[checkpoint]: {e}", file=sys.stderr)
        return EXIT_FORMAT
    except (InjectionError, DfbaError, TriggerError) as e:
        print(f"error[injection]: {e}", file=sys.stderr)
        return EXIT_INJECTION
    except (ProtocolError, DiagnosticsError) as e:
        print(f"error[protocol]: {e}", file=sys.stderr)
        return EXIT_PROTOCOL
    except (OSError, json.JSONDecodeError, KeyError) as e:
        print(f"error[io]: {e}", file=sys.stderr)
        return EXIT_IO
    return 0


if __name__ == "__main__":
    sys.exit(main())
