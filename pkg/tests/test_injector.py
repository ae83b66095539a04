from dataclasses import replace

import numpy as np
import pytest

from vitgate.checkpoint import ViTConfig
from vitgate.data import noise_probes
from vitgate.diagnostics import depth_trace
from vitgate.injector import (
    MARKER,
    PAPER_CONSTANTS,
    STAGES,
    Calibration,
    CalibrationError,
    InjectionError,
    InjectionPlan,
    ModeStats,
    allowed_mask,
    calibrate,
    changed_mask,
    default_plan,
    highway_blocks,
    indicator_samples,
    inject,
    simulated_indicator_samples,
    stage1_evidence,
    stage2_boolean_gate,
    stage3_highway,
    stage4_conditional_injection,
    two_point,
)
from vitgate.kernels import gelu, gelu_scalar
from vitgate.triggers import TriggerSpec, enumerate_modes, stamp
from vitgate.vit import TraceOptions, block_names, forward, new_model


def outside_allowed(before, after, allowed):
    return sum(int((m & ~allowed.get(name, np.zeros_like(m))).sum()) for name, m in changed_mask(before, after).items())


class TestPlan:
    def test_default_plan_is_valid_and_disjoint(self, toy, toy_plan):
        assert toy_plan.n == 3 and toy_plan.m == 2 and toy_plan.target == 1
        coords = set(toy_plan.slots) | {toy_plan.gate_coord}
        assert len(coords) == 4
        assert [t.cell for t in toy_plan.triggers] == [(3, 0), (3, 3), (0, 1)]

    def test_manifest_round_trip(self, toy_plan):
        assert InjectionPlan.from_manifest(toy_plan.to_manifest()) == toy_plan

    @pytest.mark.parametrize(
        "change",
        [
            {"m": 4},
            {"m": 0},
            {"target": 10},
            {"gate_coord": 64},
            {"alpha": 1.0},
            {"beta": 0.0},
            {"gamma": -1.0},
            {"gate_neuron_last": 256},
            {"highway_mode": "soft"},
            {"calibration_mode": "magic"},
            {"disabled_stages": ("bogus",)},
            {"gate_weights": (1.0, 2.0)},
        ],
    )
    def test_validation(self, toy_plan, change):
        with pytest.raises(InjectionError):
            replace(toy_plan, **change).validate(ViTConfig())

    def test_slot_equal_to_gate_rejected(self, toy_plan):
        bad = replace(toy_plan, gate_coord=toy_plan.slots[0])
        with pytest.raises(InjectionError):
            bad.validate(ViTConfig())

    def test_duplicate_key_coord_in_head(self, toy_plan):
        t0 = toy_plan.triggers[0]
        twin = TriggerSpec(t0.head, t0.key_coord, (1, 1), toy_plan.triggers[1].slot)
        with pytest.raises(InjectionError):
            replace(toy_plan, triggers=(t0, twin)).validate(ViTConfig())

    def test_reserved_neuron_collision(self, toy_plan):
        with pytest.raises(InjectionError):
            toy_plan.validate(ViTConfig(), {0: {toy_plan.gate_neuron_block0}})


class TestStage1:
    def test_unit_gains_route_head_output(self, toy, toy_plan):
        plan = replace(toy_plan, alpha=1.0, beta=1.0)
        s1 = stage1_evidence(toy, plan)
        img = noise_probes(toy.config, 6, 9)
        _, tr = forward(s1, img, TraceOptions(cls=False, branches=True, heads=True, upto=0))
        for t in plan.triggers:
            assert np.array_equal(tr.attn_out[0][:, t.slot], tr.heads[0][:, t.head, t.key_coord])

    def test_beta_is_linear(self, toy, toy_plan):
        img = noise_probes(toy.config, 6, 9)
        outs = []
        for beta in (1.5, 3.0):
            s1 = stage1_evidence(toy, replace(toy_plan, beta=beta))
            _, tr = forward(s1, img, TraceOptions(cls=False, branches=True, upto=0))
            outs.append(tr.attn_out[0][:, list(toy_plan.slots)].astype(np.float64))
        np.testing.assert_allclose(outs[1], 2 * outs[0], rtol=1e-6, atol=1e-7)

    def test_margin_grows_with_alpha_then_saturates(self, toy, toy_plan, toy_triggers):
        """Low-quantile slot gap rises strictly up to alpha=3; past that the trigger already holds ~all attention."""
        img = noise_probes(toy.config, 512, 17)
        q01 = []
        for alpha in (1.0, 2.0, 3.0, 5.0):
            s1 = stage1_evidence(toy, replace(toy_plan, alpha=alpha))
            opts = TraceOptions(cls=False, branches=True, upto=0)
            _, clean = forward(s1, img, opts)
            row = []
            for i, t in enumerate(toy_plan.triggers):
                _, hot = forward(s1, stamp(img, toy_triggers, [i]), opts)
                gap = hot.attn_out[0][:, t.slot].astype(np.float64) - clean.attn_out[0][:, t.slot]
                row.append(np.quantile(gap, 0.01))
            q01.append(row)
        q01 = np.array(q01)
        assert np.all(np.diff(q01[:3], axis=0) > 0)
        assert np.all(q01[3] > q01[1])

    def test_locality(self, toy, toy_plan):
        s1 = stage1_evidence(toy, toy_plan)
        assert outside_allowed(toy, s1, allowed_mask(toy.config, toy_plan, ("evidence",))) == 0


class TestCalibration:
    def test_paper_constants_echo(self, toy, toy_plan):
        plan = replace(toy_plan, calibration_mode="paper_constants")
        cal = calibrate(stage1_evidence(toy, plan), plan)
        assert cal.constants() == (3.0, 3.0, 3.0, -10.0, 8.0, -2.0)
        assert PAPER_CONSTANTS["alpha"] == 3.0 and PAPER_CONSTANTS["beta"] == 1.5

    def test_no_separation_fails(self):
        with pytest.raises(CalibrationError):
            two_point(1.0, 1.0)

    def test_two_point_hits_both_targets(self):
        w, b = two_point(0.2, 1.4)
        assert w * 0.2 + b == pytest.approx(-5.0)
        assert w * 1.4 + b == pytest.approx(3.0)

    def test_synthetic_separated_stats(self):
        r = np.random.default_rng(0)
        benign = {frozenset(): r.normal(0.0, 0.1, 500), frozenset({0}): r.normal(0.5, 0.1, 500)}
        attack = {frozenset({0, 1}): r.normal(10.0, 1.0, 500)}
        stats = ModeStats.from_samples({**benign, **attack}, {**{k: False for k in benign}, **{k: True for k in attack}})
        w, b = stats.solve()
        rep = stats.report()
        assert rep["attack_lo"] > rep["benign_hi"]
        assert w * rep["benign_hi"] + b == pytest.approx(-5.0)

    def test_inseparable_stats_report(self):
        samples = {frozenset(): np.array([0.0, 1.0]), frozenset({0}): np.array([0.5, 0.6])}
        stats = ModeStats.from_samples(samples, {frozenset(): False, frozenset({0}): True})
        with pytest.raises(CalibrationError) as exc:
            stats.solve()
        assert "inseparable" in str(exc.value)

    def test_simulated_indicators_match_forward(self, toy, toy_plan):
        s1 = stage1_evidence(toy, toy_plan)
        probes = noise_probes(toy.config, 32, 3)
        sim = simulated_indicator_samples(s1, toy_plan, probes)
        real = indicator_samples(s1, toy_plan, probes)
        for k in real:
            np.testing.assert_allclose(sim[k], real[k], atol=1e-4)

    def test_auto_calibration_separates(self, toy_injected):
        cal = toy_injected[1].calibration
        assert cal.mode == "auto"
        for key in ("gate", "last_gate"):
            assert cal.stats[key]["attack_lo"] > cal.stats[key]["benign_hi"]


class TestGate:
    def test_rest_output_near_zero(self):
        assert abs(float(gelu(np.array([PAPER_CONSTANTS["gate_bias"]]))[0])) < 1e-6

    def test_truth_table_on_held_probes(self, toy, toy_plan, toy_triggers, toy_injected):
        edited, _ = toy_injected
        probes = noise_probes(toy.config, 200, 99)
        nrn = toy_plan.gate_neuron_block0
        for subset, attack in enumerate_modes(3, 2):
            _, tr = forward(edited, stamp(probes, toy_triggers, subset), TraceOptions(cls=False, fc1=True, upto=0))
            fires = tr.fc1[0][:, nrn] > 0
            rate = fires.mean() if not attack else 1 - fires.mean()
            assert rate <= 0.01, (subset, rate)

    def test_one_of_one_threshold(self, toy):
        plan = default_plan(toy, n=1, m=1)
        s1 = stage1_evidence(toy, plan)
        ind = indicator_samples(s1, plan, noise_probes(toy.config, 256, 0))
        stats = ModeStats.from_samples({k: v[:, 0] for k, v in ind.items()}, {k: len(k) == 1 for k in ind})
        w, b = stats.solve()
        assert w > 0
        assert w * ind[frozenset()][:, 0].max() + b < 0 < w * ind[frozenset({0})][:, 0].min() + b

    def test_stage2_locality(self, toy, toy_plan, toy_injected):
        cal = toy_injected[1].calibration
        s2 = stage2_boolean_gate(toy, toy_plan, cal)
        assert outside_allowed(toy, s2, allowed_mask(toy.config, toy_plan, ("boolean_gate",))) == 0


class TestHighway:
    def test_hard_zero_bitwise_constant(self, toy, toy_plan):
        plan = replace(toy_plan, highway_mode="hard_zero")
        edited, _ = inject(toy, plan)
        tr = depth_trace(edited, noise_probes(toy.config, 100, 5), plan.gate_coord)
        held = tr[:, : toy.config.depth - 1]
        assert np.all(held == held[:, :1])

    def test_min_norm_drift_reported_small(self, toy, toy_plan, toy_injected):
        edited, _ = toy_injected
        tr = depth_trace(edited, noise_probes(toy.config, 100, 5), toy_plan.gate_coord)
        drift = np.abs(np.diff(tr[:, : toy.config.depth - 1].astype(np.float64), axis=1))
        assert drift.max() < 1.0

    def test_depth_three_edits_one_block(self):
        cfg = ViTConfig(depth=3)
        assert list(highway_blocks(cfg)) == [1]
        ck = new_model(cfg, 0)
        plan = default_plan(ck)
        s3 = stage3_highway(ck, plan)
        touched = {name.split(".")[1] for name, m in changed_mask(ck, s3).items() if m.any()}
        assert touched == {"1"}

    def test_stage3_locality(self, toy, toy_plan):
        s3 = stage3_highway(toy, toy_plan)
        assert outside_allowed(toy, s3, allowed_mask(toy.config, toy_plan, ("highway",))) == 0


class TestInjection:
    def test_rest_shift(self):
        rest = gelu_scalar(8.0 * 0.0 - 2.0)
        assert rest == pytest.approx(-0.0454, abs=2e-4)

    def test_gamma_linear_shift(self, toy, toy_plan, toy_injected):
        cal = toy_injected[1].calibration
        n = block_names(toy.config.depth - 1)
        nrn = toy_plan.gate_neuron_last
        cols = []
        for gamma in (2.0, 4.0):
            ck = stage4_conditional_injection(toy, replace(toy_plan, gamma=gamma), cal)
            cols.append(ck[n["fc2_w"]][:, nrn].astype(np.float64))
        w_cls = toy["head.weight"][toy_plan.target].astype(np.float64)
        s = 0.7
        assert w_cls @ (s * cols[1]) == pytest.approx(2 * (w_cls @ (s * cols[0])), rel=1e-6)

    def test_target_logit_monotone_in_gamma(self, toy, toy_plan, toy_triggers):
        imgs = stamp(noise_probes(toy.config, 64, 8), toy_triggers, [0, 1])
        prev = None
        for gamma in (1.0, 2.0, 4.0, 8.0, 16.0):
            ck, _ = inject(toy, replace(toy_plan, gamma=gamma))
            logits, _ = forward(ck, imgs)
            u = logits[:, toy_plan.target].astype(np.float64)
            if prev is not None:
                assert np.all(u >= prev - 1e-5)
            prev = u

    def test_stage4_locality(self, toy, toy_plan, toy_injected):
        s4 = stage4_conditional_injection(toy, toy_plan, toy_injected[1].calibration)
        assert outside_allowed(toy, s4, allowed_mask(toy.config, toy_plan, ("injection",))) == 0


class TestInject:
    def test_full_locality_and_fraction(self, toy, toy_plan, toy_injected):
        edited, rep = toy_injected
        assert outside_allowed(toy, edited, allowed_mask(toy.config, toy_plan)) == 0
        assert rep.edited_fraction < 0.01
        assert rep.edited_params == sum(int(m.sum()) for m in changed_mask(toy, edited).values())

    def test_marker_blocks_reinjection(self, toy_plan, toy_injected):
        edited, _ = toy_injected
        assert MARKER in edited
        with pytest.raises(InjectionError):
            inject(edited, toy_plan)

    def test_input_not_mutated(self, toy, toy_plan):
        before = {k: v.tobytes() for k, v in toy.tensors.items()}
        inject(toy, toy_plan)
        assert before == {k: v.tobytes() for k, v in toy.tensors.items()}

    @pytest.mark.parametrize("stage", STAGES)
    def test_ablation_touches_only_enabled_stages(self, toy, toy_plan, stage):
        plan = replace(toy_plan, disabled_stages=(stage,))
        edited, _ = inject(toy, plan)
        enabled = [s for s in STAGES if s != stage]
        assert outside_allowed(toy, edited, allowed_mask(toy.config, plan, enabled)) == 0

    def test_report_text(self, toy_injected):
        text = toy_injected[1].to_text()
        assert "edited_fraction" in text and "stage_norms" in text

    def test_calibration_dataclass(self):
        cal = Calibration((1.0, 2.0), -3.0, 4.0, -5.0, "auto")
        assert cal.constants() == (1.0, 2.0, -3.0, 4.0, -5.0)
