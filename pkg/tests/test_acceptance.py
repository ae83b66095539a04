"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run alone with ``python3 -m pytest tests/test_acceptance.py -v -s``.
The PatchDrop criterion (C4) runs the 64px model and takes several minutes.
"""

import math
import time
from dataclasses import replace

import numpy as np
import pytest

from vitgate.bounds import empirical_gate_gaps, estimate_assumption_inputs, margin
from vitgate.checkpoint import Checkpoint, CheckpointError, ViTConfig, _encode, decode, tensors_equal_bitwise
from vitgate.data import labeled_dataset, noise_probes, non_target
from vitgate.defenses import PruneProtocol, fine_prune_sweep, hit_miss_stats, patchdrop_curve, survival_model
from vitgate.diagnostics import auc, evaluate, singular_values
from vitgate.injector import allowed_mask, changed_mask, default_plan, inject, stage1_evidence
from vitgate.kernels import gelu, softmax_rows
from vitgate.triggers import build_trigger_set, enumerate_modes, stamp
from vitgate.vit import TraceOptions, forward, new_model, predict


@pytest.fixture
def verdict(capsys):
    """Print one PASS/FAIL line, then fail the test if the criterion failed."""

    def report(name: str, ok: bool, detail: str) -> None:
        with capsys.disabled():
            print(f"\n{'PASS' if ok else 'FAIL'} {name}: {detail}")
        assert ok, f"{name}: {detail}"

    return report


def pairwise_auc(neg, pos):
    wins = sum(1.0 if p > n else 0.5 if p == n else 0.0 for p in pos for n in neg)
    return wins / (len(neg) * len(pos))


def test_c1_truth_table(verdict):
    t0 = time.perf_counter()
    ck = new_model(ViTConfig(), 0)
    plan = default_plan(ck)
    edited, _ = inject(ck, plan)
    rep = evaluate(edited, build_trigger_set(ck, plan.triggers), plan.m, labeled_dataset(ck, 1000, 21), plan.target)
    elapsed = time.perf_counter() - t0
    asr = {r.mode: r.asr for r in rep.modes if r.attack}
    far = {r.mode: r.far for r in rep.modes if not r.attack}
    ok = min(asr.values()) >= 99.0 and max(far.values()) <= 1.0 and elapsed < 120.0
    verdict("C1 2-of-3 truth table", ok, f"min ASR {min(asr.values()):.2f}%, max FAR {max(far.values()):.2f}%, {elapsed:.1f}s")


def test_c2_hard_zero_constant(verdict):
    ck = new_model(ViTConfig(), 0)
    plan = replace(default_plan(ck), highway_mode="hard_zero")
    edited, _ = inject(ck, plan)
    ts = build_trigger_set(ck, plan.triggers)
    base = labeled_dataset(ck, 100, 5).images
    modes = [sorted(s) for s, _ in enumerate_modes(3, 2)]
    x = np.concatenate([stamp(base[i::len(modes)], ts, s) for i, s in enumerate(modes)])
    _, tr = forward(edited, x, TraceOptions(cls=True))
    last = ck.config.depth - 1
    ref = tr.cls[1][:, plan.gate_coord]
    varying = sum(tr.cls[l][:, plan.gate_coord].tobytes() != ref.tobytes() for l in range(1, last + 1))
    verdict("C2 hard_zero gate transport", len(x) == 100 and varying == 0, f"{len(x)} inputs, {varying} of {last} depths differ bitwise")


def test_c3_margin_soundness(verdict):
    ck = new_model(ViTConfig(), 0)
    plan = replace(default_plan(ck), alpha=10.0)
    s1 = stage1_evidence(ck, plan)
    probes = noise_probes(ck.config, 2000, 11)
    pairs = noise_probes(ck.config, 1500, 12)
    details, ok = [], True
    for i, spec in enumerate(plan.triggers):
        inp = estimate_assumption_inputs(s1, spec, probes, 0.01, plan.alpha, plan.beta, original=ck)
        check = empirical_gate_gaps(s1, spec, pairs, inp, original=ck)
        lo, hi = margin(inp, beta=1.0).delta_gate, margin(inp, beta=1.5).delta_gate
        ok &= check.eligible >= 1000 and 1.0 - check.failure_fraction >= 0.99 and hi > lo > 0
        details.append(f"t{i}: {check.eligible} pairs, sound {100 * (1 - check.failure_fraction):.1f}%, gap {lo:.3f}->{hi:.3f}")
    verdict("C3 margin soundness", ok, "; ".join(details))


def test_c4_patchdrop_law(verdict):
    cfg = ViTConfig(image_size=64)
    ck = new_model(cfg, 0)
    plan = default_plan(ck, alpha=4.0)
    edited, _ = inject(ck, plan)
    ts = build_trigger_set(ck, plan.triggers)
    ds = non_target(labeled_dataset(ck, 1000, 3), plan.target)
    curve = patchdrop_curve(edited, ts, plan.m, ds, plan.target, [0.1, 0.3, 0.5], trials=2000, grid_side=8, seed=0)
    closed = abs(survival_model(0.9, 2, 2) - 0.81) < 1e-12 and abs(survival_model(0.9, 3, 2) - 0.972) < 1e-12
    worst = max(curve.points, key=lambda p: abs(p.z_score))
    ok = closed and all(abs(p.z_score) <= 3.0 for p in curve.points)
    zs = ", ".join(f"r={p.ratio}/k={p.stamped}: z={p.z_score:+.2f}" for p in curve.points)
    verdict("C4 PatchDrop survival law", ok, f"{zs}; worst measured {worst.measured:.4f} vs {worst.predicted:.4f}")


def test_c5_ablations(verdict):
    ck = new_model(ViTConfig(), 0)
    plan = default_plan(ck)
    ts = build_trigger_set(ck, plan.triggers)
    ds = labeled_dataset(ck, 1000, 21)

    def run(p, target):
        edited, _ = inject(ck, p)
        return evaluate(edited, ts, p.m, ds, target)

    full = run(plan, plan.target)
    no_gate = run(replace(plan, disabled_stages=("boolean_gate",)), plan.target)
    no_inject = run(replace(plan, disabled_stages=("injection",)), plan.target)
    no_highway = run(replace(plan, disabled_stages=("highway",)), plan.target)
    new_target = (plan.target + 2) % ck.config.num_classes
    moved = inject(ck, replace(plan, target=new_target))[0]
    attack = [s for s, a in enumerate_modes(3, 2) if a]
    keep = ds.labels != new_target
    keep &= ds.labels != plan.target
    stamped = np.concatenate([stamp(ds.images[keep], ts, s) for s in attack])
    pred = predict(moved, stamped)
    new_rate, old_rate = 100 * float((pred == new_target).mean()), 100 * float((pred == plan.target).mean())
    far_rise = no_highway.benign_far - full.benign_far
    ok = no_gate.attack_asr < 5 and no_inject.attack_asr < 5 and far_rise >= 10 and new_rate >= 95 and old_rate <= 5
    verdict(
        "C5 stage ablations",
        ok,
        f"no gate ASR {no_gate.attack_asr:.1f}%, no injection ASR {no_inject.attack_asr:.1f}%, "
        f"no highway FAR +{far_rise:.1f} pts, moved payload {new_rate:.1f}% new / {old_rate:.1f}% old",
    )


def test_c6_occlusion(verdict):
    ck = new_model(ViTConfig(), 0)
    plan = default_plan(ck)
    edited, _ = inject(ck, plan)
    ts = build_trigger_set(ck, plan.triggers)
    ds = labeled_dataset(ck, 200, 21)
    stats = hit_miss_stats(edited, ts, plan.m, ds, plan.target, ck.config.patch_size)
    two = [s for s in stats if s.size == 2]
    three = [s for s in stats if s.size == 3]
    ok = all(s.residual_asr <= 40 and abs(s.residual_asr - s.miss_rate) <= 10 for s in two)
    ok &= all(s.residual_asr >= 90 for s in three)
    detail = ", ".join(f"{s.mode} residual {s.residual_asr:.1f}% miss {s.miss_rate:.1f}%" for s in stats)
    verdict("C6 occlusion blocking", ok, detail)


def test_c7_fine_pruning(verdict):
    ck = new_model(ViTConfig(), 0)
    plan = default_plan(ck)
    edited, _ = inject(ck, plan)
    ts = build_trigger_set(ck, plan.triggers)
    ds = labeled_dataset(ck, 1500, 6)
    last = ck.config.depth - 1
    gates = {"block0": (0, plan.gate_neuron_block0), "last": (last, plan.gate_neuron_last)}
    sweep = fine_prune_sweep(edited, PruneProtocol(max_fraction=0.07), noise_probes(ck.config, 512, 77), ts, plan.m, ds, plan.target, gates)
    p = sweep.clean_agreement[0] / 100
    noise = 3 * 100 * math.sqrt(p * (1 - p) / len(ds))
    running = np.minimum.accumulate(sweep.clean_agreement)
    rise = float(np.max(np.asarray(sweep.clean_agreement) - running))
    drop = sweep.asr[0] - sweep.asr[-1]
    total = len(sweep.ranking)
    top = all(r > 0.9 * total for r in sweep.gate_ranks.values())
    ok = drop <= 5 and rise <= noise and top
    verdict(
        "C7 fine-pruning",
        ok,
        f"ASR {sweep.asr[0]:.2f}->{sweep.asr[-1]:.2f} at {100 * sweep.fractions[-1]:.1f}%, "
        f"agreement {sweep.clean_agreement[0]:.2f}->{sweep.clean_agreement[-1]:.2f} (max rise {rise:.2f} <= {noise:.2f}), "
        f"gate ranks {sweep.gate_ranks} of {total}",
    )


def test_c8_checkpoint_round_trip(verdict):
    rng = np.random.default_rng(8)
    cfgs = [None, ViTConfig()]
    bad_round_trips = 0
    for case in range(1000):
        tensors = {}
        for t in range(int(rng.integers(0, 5))):
            shape = tuple(int(d) for d in rng.integers(1, 6, size=int(rng.integers(1, 4))))
            tensors[f"w{case}.{t}"] = rng.integers(0, 2**32, size=shape, dtype=np.uint64).astype(np.uint32).view(np.float32)
        ck = Checkpoint(tensors, cfgs[case % 2])
        back = decode(_encode(ck))
        if not (tensors_equal_bitwise(ck, back) and back.config == ck.config and list(back.tensors) == list(ck.tensors)):
            bad_round_trips += 1
    blob = _encode(new_model(ViTConfig(depth=3, mlp_hidden=32), 0))
    escaped = 0
    for _ in range(1000):
        data = bytearray(blob)
        kind = rng.integers(0, 3)
        if kind == 0:
            data = data[: int(rng.integers(0, len(data)))]
        else:
            for pos in rng.integers(0, min(len(data), 400) if kind == 1 else len(data), size=int(rng.integers(1, 8))):
                data[pos] = int(rng.integers(0, 256))
        try:
            out = decode(bytes(data))
            escaped += any(v.dtype != np.float32 for v in out.tensors.values())
        except CheckpointError:
            pass
        except Exception:
            escaped += 1
    verdict("C8 checkpoint format", bad_round_trips == 0 and escaped == 0, f"1000 round trips, {bad_round_trips} mismatched; 1000 mutations, {escaped} unhandled")


def test_c9_numerics(verdict):
    rng = np.random.default_rng(9)
    x = rng.normal(0, 20, size=(500, 17))
    sm = softmax_rows(x)
    ref = np.exp(x - x.max(axis=1, keepdims=True))
    ref /= ref.sum(axis=1, keepdims=True)
    sm_err = max(float(np.abs(sm.sum(axis=1) - 1).max()), float(np.abs(sm - ref).max()))
    auc_bad = 0
    for _ in range(50):
        neg = rng.integers(-4, 5, size=int(rng.integers(1, 201)))
        pos = rng.integers(-4, 5, size=int(rng.integers(1, 201)))
        auc_bad += auc(neg, pos) != pairwise_auc(neg, pos)
    svd_err = 0.0
    for n in (8, 16):
        for _ in range(20):
            m = rng.standard_normal((n, n))
            svd_err = max(svd_err, float(np.abs(singular_values(m) - np.linalg.svd(m, compute_uv=False)).max()))
    g = float(gelu(np.array([-2.0]))[0])
    g_err = abs(g - (-2.0) * 0.5 * (1 + math.erf(-2.0 / math.sqrt(2))))
    ok = sm_err <= 1e-6 and auc_bad == 0 and svd_err <= 1e-8 and g_err <= 1e-3
    verdict("C9 numerics", ok, f"softmax err {sm_err:.1e}, AUC mismatches {auc_bad}, Jacobi vs LAPACK {svd_err:.1e}, gelu(-2) err {g_err:.1e}")


def test_c10_locality(verdict):
    ck = new_model(ViTConfig(), 0)
    plan = default_plan(ck)
    t0 = time.perf_counter()
    edited, report = inject(ck, plan)
    elapsed = time.perf_counter() - t0
    allowed = allowed_mask(ck.config, plan)
    outside = 0
    for name, m in changed_mask(ck, edited).items():
        ok_mask = allowed.get(name)
        outside += int(m.sum()) if ok_mask is None else int((m & ~ok_mask).sum())
    ok = elapsed < 1.0 and outside == 0 and report.edited_fraction < 0.01
    verdict("C10 injection locality", ok, f"{elapsed:.2f}s, {outside} edits outside slices, edited fraction {100 * report.edited_fraction:.3f}%")


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-v", "-s"]))
