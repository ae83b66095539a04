"""Evaluation metrics, gate-margin distributions, depth traces, AUC and weight audits."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from .checkpoint import Checkpoint
from .data import Dataset
from .injector import InjectionPlan
from .triggers import TriggerSet, enumerate_modes, mode_name, stamp
from .vit import TraceOptions, block_names, forward, head_slices, predict


class DiagnosticsError(ValueError):
    pass


class NonConvergenceError(ArithmeticError):
    pass


# ---------------------------------------------------------------- metrics


@dataclass(frozen=True)
class ModeMetrics:
    """Percentages for one stamping mode.

    c_acc: agreement with the dataset labels over all inputs.
    asr:   target-label rate over non-target inputs (attack modes).
    tllr:  target-label rate over non-target inputs (benign modes).
    far:   target-label rate over all inputs (benign modes).
    """

    mode: str
    size: int
    attack: bool
    count: int
    count_non_target: int
    c_acc: float
    asr: float | None
    tllr: float | None
    far: float | None


@dataclass
class EvalReport:
    target: int
    m: int
    modes: list[ModeMetrics]

    def _mean(self, attr: str, attack: bool) -> float:
        vals = [getattr(r, attr) for r in self.modes if r.attack == attack and getattr(r, attr) is not None]
        return float(np.mean(vals)) if vals else float("nan")

    @property
    def benign_c_acc(self) -> float:
        return self._mean("c_acc", False)

    @property
    def attack_asr(self) -> float:
        return self._mean("asr", True)

    @property
    def benign_tllr(self) -> float:
        return self._mean("tllr", False)

    @property
    def benign_far(self) -> float:
        return self._mean("far", False)

    def mode(self, name: str) -> ModeMetrics:
        for r in self.modes:
            if r.mode == name:
                return r
        raise KeyError(name)

    def rows(self) -> list[tuple[str, str, float]]:
        out = []
        for r in self.modes:
            for metric in ("c_acc", "asr", "tllr", "far"):
                v = getattr(r, metric)
                if v is not None:
                    out.append((r.mode, metric, v))
        out.append(("benign", "c_acc", self.benign_c_acc))
        out.append(("benign", "tllr", self.benign_tllr))
        out.append(("benign", "far", self.benign_far))
        out.append(("attack", "asr", self.attack_asr))
        return out

    def to_csv(self) -> str:
        return write_csv(["mode", "metric", "percent"], [(a, b, f"{c:.4f}") for a, b, c in self.rows()])


def _pct(mask: np.ndarray) -> float:
    return 100.0 * float(mask.mean())


def evaluate(
    ckpt: Checkpoint, triggers: TriggerSet, m: int, dataset: Dataset, target: int, batch_size: int = 512
) -> EvalReport:
    """Per-mode C-ACC, ASR, TLLR and FAR over all 2^n stamping modes."""
    if len(dataset) == 0:
        raise DiagnosticsError("dataset is empty")
    if not 0 <= target < ckpt.config.num_classes:
        raise DiagnosticsError(f"target class {target} out of range")
    non_target = dataset.labels != target
    rows = []
    for subset, attack in enumerate_modes(len(triggers), m):
        pred = predict(ckpt, stamp(dataset.images, triggers, subset), batch_size)
        hit = pred == target
        nt = hit[non_target]
        rate_nt = _pct(nt) if nt.size else None
        rows.append(
            ModeMetrics(
                mode=mode_name(subset),
                size=len(subset),
                attack=attack,
                count=len(pred),
                count_non_target=int(non_target.sum()),
                c_acc=_pct(pred == dataset.labels),
                asr=rate_nt if attack else None,
                tllr=None if attack else rate_nt,
                far=None if attack else _pct(hit),
            )
        )
    return EvalReport(target, m, rows)


# ---------------------------------------------------------------- gate internals


@dataclass
class GateSamples:
    """Block-0 gate output and last-block gate pre-activation, split by mode kind."""

    gate_out: dict[bool, np.ndarray]
    last_pre: dict[bool, np.ndarray]

    def margins(self) -> dict[str, float]:
        """min(attack) - max(benign) at each probe point; positive means separated."""
        return {
            "gate_out": float(self.gate_out[True].min() - self.gate_out[False].max()),
            "last_pre": float(self.last_pre[True].min() - self.last_pre[False].max()),
        }

    def histograms(self, bins: int = 40) -> dict[str, tuple[np.ndarray, dict[bool, np.ndarray]]]:
        out = {}
        for name, d in (("gate_out", self.gate_out), ("last_pre", self.last_pre)):
            lo = min(d[True].min(), d[False].min())
            hi = max(d[True].max(), d[False].max())
            if hi <= lo:
                hi = lo + 1.0
            edges = np.linspace(lo, hi, bins + 1)
            out[name] = (edges, {k: np.histogram(v, edges)[0] for k, v in d.items()})
        return out

    def histogram_csv(self, bins: int = 40) -> str:
        rows = []
        for name, (edges, counts) in self.histograms(bins).items():
            for i in range(bins):
                rows.append((name, f"{edges[i]:.6g}", f"{edges[i + 1]:.6g}", int(counts[False][i]), int(counts[True][i])))
        return write_csv(["probe", "lo", "hi", "benign", "attack"], rows)


def margin_histograms(
    ckpt: Checkpoint, triggers: TriggerSet, plan: InjectionPlan, probes: np.ndarray
) -> GateSamples:
    """x^(1)_CLS[g] and the last-block gate neuron's fc1 pre-activation on every mode."""
    L = ckpt.config.depth - 1
    g = plan.gate_coord
    gate = {True: [], False: []}
    last = {True: [], False: []}
    for subset, attack in enumerate_modes(len(triggers), plan.m):
        _, tr = forward(ckpt, stamp(probes, triggers, subset), TraceOptions(cls=True, fc1=True))
        gate[attack].append(tr.cls[1][:, g].astype(np.float64))
        last[attack].append(tr.fc1[L][:, plan.gate_neuron_last].astype(np.float64))
    return GateSamples(
        {k: np.concatenate(v) for k, v in gate.items()},
        {k: np.concatenate(v) for k, v in last.items()},
    )


def depth_trace(ckpt: Checkpoint, images: np.ndarray, coord: int) -> np.ndarray:
    """(B, L) array of x^(l)_CLS[coord] for l = 1..L, where x^(l) is the output of block l."""
    _, tr = forward(ckpt, images, TraceOptions(cls=True))
    return np.stack([c[:, coord] for c in tr.cls[1:]], axis=1)


def trace_drift(trace: np.ndarray) -> np.ndarray:
    """Per-block change of a depth trace, shape (B, L-1)."""
    return np.diff(trace.astype(np.float64), axis=1)


# ---------------------------------------------------------------- separability


def auc(negatives, positives) -> float:
    """Mann-Whitney AUC = P(positive > negative) + 0.5 P(tie), via average ranks."""
    x = np.asarray(negatives, dtype=np.float64).ravel()
    y = np.asarray(positives, dtype=np.float64).ravel()
    if x.size == 0 or y.size == 0:
        raise DiagnosticsError("AUC needs two non-empty samples")
    pooled = np.concatenate([x, y])
    order = np.argsort(pooled, kind="mergesort")
    ranks = np.empty(pooled.size, dtype=np.float64)
    sorted_vals = pooled[order]
    # Tie groups get the mean of their 1-based positions.
    starts = np.flatnonzero(np.r_[True, sorted_vals[1:] != sorted_vals[:-1]])
    ends = np.r_[starts[1:], pooled.size]
    for s, e in zip(starts, ends):
        ranks[order[s:e]] = (s + 1 + e) / 2.0
    u = ranks[x.size :].sum() - y.size * (y.size + 1) / 2.0
    return float(u / (x.size * y.size))


def auc_by_block(clean: np.ndarray, triggered: np.ndarray) -> np.ndarray:
    """Per-column AUC of two (samples, blocks) statistic arrays."""
    clean = np.asarray(clean)
    triggered = np.asarray(triggered)
    if clean.ndim != 2 or triggered.ndim != 2 or clean.shape[1] != triggered.shape[1]:
        raise DiagnosticsError("per-block statistics must be 2-D with matching block counts")
    return np.array([auc(clean[:, b], triggered[:, b]) for b in range(clean.shape[1])])


# ---------------------------------------------------------------- spectra


def jacobi_eigh(sym: np.ndarray, tol: float = 1e-10, max_sweeps: int = 100) -> tuple[np.ndarray, np.ndarray]:
    """Eigenvalues (descending) and eigenvectors of a symmetric matrix by cyclic Jacobi rotations.

    Stops when the off-diagonal Frobenius norm falls below tol times the
    matrix norm.
    """
    a = np.array(sym, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise DiagnosticsError("jacobi_eigh needs a square matrix")
    n = a.shape[0]
    vecs = np.eye(n)
    scale = np.linalg.norm(a)
    if scale == 0.0:
        return np.zeros(n), vecs
    for _ in range(max_sweeps):
        off = np.linalg.norm(a[~np.eye(n, dtype=bool)])
        if off <= tol * scale:
            vals = np.diag(a).copy()
            order = np.argsort(-vals, kind="stable")
            return vals[order], vecs[:, order]
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if abs(apq) <= 1e-300 + 1e-18 * np.sqrt(abs(a[p, p] * a[q, q])):
                    a[p, q] = a[q, p] = 0.0
                    continue
                theta = (a[q, q] - a[p, p]) / (2.0 * apq)
                if abs(theta) > 1e150:
                    t = 0.5 / theta
                elif theta == 0.0:
                    t = 1.0
                else:
                    t = np.sign(theta) / (abs(theta) + np.sqrt(theta * theta + 1.0))
                c = 1.0 / np.sqrt(t * t + 1.0)
                s = t * c
                ap, aq = a[:, p].copy(), a[:, q].copy()
                a[:, p], a[:, q] = c * ap - s * aq, s * ap + c * aq
                ap, aq = a[p, :].copy(), a[q, :].copy()
                a[p, :], a[q, :] = c * ap - s * aq, s * ap + c * aq
                a[p, q] = a[q, p] = 0.0
                vp, vq = vecs[:, p].copy(), vecs[:, q].copy()
                vecs[:, p], vecs[:, q] = c * vp - s * vq, s * vp + c * vq
    raise NonConvergenceError(f"Jacobi did not converge in {max_sweeps} sweeps")


def singular_values(mat: np.ndarray, tol: float = 1e-10, max_sweeps: int = 100) -> np.ndarray:
    """Singular values (descending) from the Jacobi eigenvalues of the smaller Gram matrix."""
    m = np.asarray(mat, dtype=np.float64)
    gram = m.T @ m if m.shape[0] >= m.shape[1] else m @ m.T
    vals, _ = jacobi_eigh(gram, tol, max_sweeps)
    return np.sqrt(np.clip(vals, 0.0, None))


@dataclass
class AuditSide:
    proj_head_spectra: list[np.ndarray]
    fc2_spectrum: np.ndarray
    norms: dict[str, np.ndarray]


@dataclass
class WeightAudit:
    block: int
    before: AuditSide
    after: AuditSide
    bins: dict[str, np.ndarray] = field(default_factory=dict)

    def histograms(self) -> dict[str, tuple[np.ndarray, np.ndarray]]:
        """Shared-bin before/after counts for every norm family."""
        return {
            k: (np.histogram(self.before.norms[k], e)[0], np.histogram(self.after.norms[k], e)[0])
            for k, e in self.bins.items()
        }

    def spectra_csv(self) -> str:
        rows = []
        for side, s in (("before", self.before), ("after", self.after)):
            for h, vals in enumerate(s.proj_head_spectra):
                rows += [(side, f"proj_head{h}", i, f"{v:.10g}") for i, v in enumerate(vals)]
            rows += [(side, "fc2", i, f"{v:.10g}") for i, v in enumerate(s.fc2_spectrum)]
        return write_csv(["side", "matrix", "index", "singular_value"], rows)

    def histogram_csv(self) -> str:
        rows = []
        for k, (b, a) in self.histograms().items():
            e = self.bins[k]
            rows += [(k, f"{e[i]:.6g}", f"{e[i + 1]:.6g}", int(b[i]), int(a[i])) for i in range(len(b))]
        return write_csv(["family", "lo", "hi", "before", "after"], rows)


def _audit_side(ckpt: Checkpoint, block: int) -> AuditSide:
    cfg = ckpt.config
    n = block_names(block)
    proj = ckpt[n["proj_w"]].astype(np.float64)
    fc2 = ckpt[n["fc2_w"]].astype(np.float64)
    spectra = [singular_values(proj[:, head_slices(cfg, h).o_cols]) for h in range(cfg.num_heads)]
    norms = {
        "proj_rows": np.linalg.norm(proj, axis=1),
        "proj_cols": np.linalg.norm(proj, axis=0),
        "fc2_rows": np.linalg.norm(fc2, axis=1),
        "fc2_cols": np.linalg.norm(fc2, axis=0),
    }
    return AuditSide(spectra, singular_values(fc2), norms)


def weight_audit(before: Checkpoint, after: Checkpoint, block: int, bins: int = 20) -> WeightAudit:
    """Per-head W_O spectra, fc2 spectrum, and row/column norm histograms before vs after."""
    if before.config != after.config:
        raise DiagnosticsError("audit needs checkpoints with the same config")
    if not 0 <= block < before.config.depth:
        raise DiagnosticsError(f"block {block} out of range")
    b, a = _audit_side(before, block), _audit_side(after, block)
    edges = {}
    for k in b.norms:
        lo = min(b.norms[k].min(), a.norms[k].min())
        hi = max(b.norms[k].max(), a.norms[k].max())
        edges[k] = np.linspace(lo, hi if hi > lo else lo + 1.0, bins + 1)
    return WeightAudit(block, b, a, edges)


# ---------------------------------------------------------------- output


def write_csv(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()
