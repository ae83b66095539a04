from dataclasses import replace

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vitgate.data import Dataset, noise_probes
from vitgate.diagnostics import (
    DiagnosticsError,
    NonConvergenceError,
    auc,
    auc_by_block,
    depth_trace,
    evaluate,
    jacobi_eigh,
    margin_histograms,
    singular_values,
    trace_drift,
    weight_audit,
)
from vitgate.injector import inject
from vitgate.triggers import stamp
from vitgate.vit import TraceOptions, block_names, forward

small_samples = st.lists(st.integers(-5, 5), min_size=1, max_size=40)


def pairwise_auc(neg, pos):
    wins = 0.0
    for p in pos:
        for n in neg:
            wins += 1.0 if p > n else 0.5 if p == n else 0.0
    return wins / (len(neg) * len(pos))


def standardized_gap(a, b):
    return (b.mean(0) - a.mean(0)) / np.sqrt(a.var(0) + b.var(0))


class TestAuc:
    def test_identical(self):
        x = [1.0, 2.0, 3.0]
        assert auc(x, x) == 0.5

    def test_separated(self):
        assert auc([0, 1, 2], [3, 4]) == 1.0
        assert auc([3, 4], [0, 1, 2]) == 0.0

    @settings(max_examples=300, deadline=None)
    @given(small_samples, small_samples)
    def test_matches_pairwise_oracle_exactly(self, neg, pos):
        assert auc(neg, pos) == pairwise_auc(neg, pos)

    def test_oracle_on_continuous_samples(self, rng):
        for _ in range(20):
            neg = rng.normal(0, 1, rng.integers(1, 200))
            pos = rng.normal(0.5, 1, rng.integers(1, 200))
            assert auc(neg, pos) == pairwise_auc(neg, pos)

    @settings(max_examples=200, deadline=None)
    @given(small_samples, small_samples)
    def test_complement(self, x, y):
        assert auc(x, y) + auc(y, x) == 1.0

    @settings(max_examples=100, deadline=None)
    @given(small_samples, small_samples, st.randoms())
    def test_order_independent(self, x, y, r):
        xs, ys = list(x), list(y)
        r.shuffle(xs)
        r.shuffle(ys)
        assert auc(xs, ys) == auc(x, y)

    def test_empty(self):
        with pytest.raises(DiagnosticsError):
            auc([], [1.0])

    def test_by_block(self):
        clean = np.array([[0.0, 5.0], [1.0, 6.0]])
        hot = np.array([[2.0, 0.0], [3.0, 1.0]])
        assert auc_by_block(clean, hot).tolist() == [1.0, 0.0]
        with pytest.raises(DiagnosticsError):
            auc_by_block(clean, hot[:, :1])


class TestSpectra:
    def test_diagonal(self):
        d = np.array([3.0, -7.0, 0.5, 2.0])
        np.testing.assert_allclose(singular_values(np.diag(d)), [7.0, 3.0, 2.0, 0.5], rtol=1e-14)

    @pytest.mark.parametrize("n", [8, 16])
    def test_matches_lapack(self, n, rng):
        for _ in range(25):
            m = rng.standard_normal((n, n))
            ref = np.linalg.svd(m, compute_uv=False)
            assert np.abs(singular_values(m) - ref).max() <= 1e-8

    def test_matches_high_precision_reference(self, rng):
        m = rng.standard_normal((8, 8))
        mpmath.mp.dps = 40
        ref = sorted((float(v) for v in mpmath.svd_r(mpmath.matrix(m.tolist()), compute_uv=False)), reverse=True)
        assert np.abs(singular_values(m) - np.array(ref)).max() <= 1e-8

    def test_rectangular(self, rng):
        m = rng.standard_normal((16, 5))
        np.testing.assert_allclose(singular_values(m), np.linalg.svd(m, compute_uv=False), atol=1e-10)
        np.testing.assert_allclose(singular_values(m.T), np.linalg.svd(m, compute_uv=False), atol=1e-10)

    def test_eigenvectors_diagonalize(self, rng):
        a = rng.standard_normal((6, 6))
        sym = a + a.T
        vals, vecs = jacobi_eigh(sym)
        np.testing.assert_allclose(vecs.T @ sym @ vecs, np.diag(vals), atol=1e-9)
        assert np.all(np.diff(vals) <= 0)

    def test_zero_and_nonsquare(self):
        vals, _ = jacobi_eigh(np.zeros((3, 3)))
        assert vals.tolist() == [0.0, 0.0, 0.0]
        with pytest.raises(DiagnosticsError):
            jacobi_eigh(np.zeros((2, 3)))

    def test_sweep_budget(self, rng):
        a = rng.standard_normal((8, 8))
        with pytest.raises(NonConvergenceError):
            jacobi_eigh(a + a.T, tol=1e-300, max_sweeps=1)


class TestEvaluate:
    def test_null_attack(self, toy, toy_triggers, toy_eval):
        ds, _ = toy_eval
        rep = evaluate(toy, toy_triggers, 2, ds, 1)
        assert rep.attack_asr < 5.0
        assert rep.mode("clean").tllr == 0.0

    def test_edited_truth_table(self, toy_injected, toy_triggers, toy_eval):
        ds, _ = toy_eval
        rep = evaluate(toy_injected[0], toy_triggers, 2, ds, 1)
        assert rep.mode("t0+t1+t2").asr >= 99.0
        assert rep.benign_tllr < 1.0
        for row in rep.modes:
            for v in (row.c_acc, row.asr, row.tllr, row.far):
                assert v is None or 0.0 <= v <= 100.0
        assert len(rep.to_csv().splitlines()) == 1 + 4 * 3 + 4 * 2 + 4

    def test_asr_counts_only_non_target(self, toy_injected, toy_triggers, toy_eval):
        ds, nt = toy_eval
        full = evaluate(toy_injected[0], toy_triggers, 2, ds, 1)
        only = evaluate(toy_injected[0], toy_triggers, 2, nt, 1)
        assert full.mode("t0+t1").asr == only.mode("t0+t1").asr
        assert full.mode("t0+t1").count_non_target == len(nt)

    def test_shuffle_invariant(self, toy_injected, toy_triggers, toy_eval, rng):
        ds, _ = toy_eval
        perm = rng.permutation(len(ds))
        a = evaluate(toy_injected[0], toy_triggers, 2, ds, 1)
        b = evaluate(toy_injected[0], toy_triggers, 2, Dataset(ds.images[perm], ds.labels[perm]), 1)
        assert a.rows() == b.rows()

    def test_bad_inputs(self, toy, toy_triggers, toy_eval):
        ds, _ = toy_eval
        with pytest.raises(DiagnosticsError):
            evaluate(toy, toy_triggers, 2, ds.subset(np.zeros(len(ds), bool)), 1)
        with pytest.raises(DiagnosticsError):
            evaluate(toy, toy_triggers, 2, ds, 10)


class TestGateInternals:
    def test_calibrated_margins_positive(self, toy_injected, toy_triggers, toy_plan, toy):
        gs = margin_histograms(toy_injected[0], toy_triggers, toy_plan, noise_probes(toy.config, 64, 3))
        m = gs.margins()
        assert m["gate_out"] > 0 and m["last_pre"] > 0
        assert gs.histogram_csv(10).startswith("probe,lo,hi,benign,attack")

    def test_unedited_margin_reported(self, toy, toy_triggers, toy_plan):
        gs = margin_histograms(toy, toy_triggers, toy_plan, noise_probes(toy.config, 32, 3))
        assert set(gs.margins()) == {"gate_out", "last_pre"}

    def test_hard_zero_transport(self, toy, toy_plan, toy_triggers):
        plan = replace(toy_plan, highway_mode="hard_zero")
        edited, _ = inject(toy, plan)
        x = stamp(noise_probes(toy.config, 64, 4), toy_triggers, [0, 2])
        _, tr = forward(edited, x, TraceOptions(cls=True))
        L = toy.config.depth - 1
        assert tr.cls[1][:, plan.gate_coord].tobytes() == tr.cls[L][:, plan.gate_coord].tobytes()
        trace = depth_trace(edited, x, plan.gate_coord)
        assert np.all(trace_drift(trace)[:, : L - 1] == 0)

    def test_ablated_highway_separation_decays(self, toy, toy_plan, toy_triggers, toy_injected):
        x = noise_probes(toy.config, 200, 3)
        L = toy.config.depth - 1
        gaps = {}
        for name, edited in (("full", toy_injected[0]), ("ablated", inject(toy, replace(toy_plan, disabled_stages=("highway",)))[0])):
            clean = depth_trace(edited, x, toy_plan.gate_coord)
            hot = depth_trace(edited, stamp(x, toy_triggers, [0, 1]), toy_plan.gate_coord)
            gaps[name] = standardized_gap(clean, hot)
        assert gaps["ablated"][L - 1] < 0.85 * gaps["ablated"][0]
        assert gaps["ablated"][L - 1] < 0.85 * gaps["full"][L - 1]


class TestAudit:
    def test_self_audit_identical(self, toy):
        a = weight_audit(toy, toy, 0)
        for b_spec, a_spec in zip(a.before.proj_head_spectra, a.after.proj_head_spectra):
            assert np.array_equal(b_spec, a_spec)
        for before, after in a.histograms().values():
            assert np.array_equal(before, after)

    def test_min_norm_slices_stay_in_range(self, toy, toy_plan, toy_injected):
        edited, _ = toy_injected
        g = toy_plan.gate_coord
        for layer in range(1, toy.config.depth - 1):
            n = block_names(layer)
            for key in ("proj_w", "fc2_w"):
                norms = np.linalg.norm(toy[n[key]].astype(np.float64), axis=1)
                new = np.linalg.norm(edited[n[key]][g].astype(np.float64))
                assert norms.min() <= new <= norms.max()

    def test_audit_csv(self, toy, toy_injected):
        a = weight_audit(toy, toy_injected[0], 0, bins=5)
        assert a.spectra_csv().startswith("side,matrix,index,singular_value")
        assert len(a.histogram_csv().splitlines()) == 1 + 4 * 5

    def test_audit_checks(self, toy):
        with pytest.raises(DiagnosticsError):
            weight_audit(toy, toy, 6)
