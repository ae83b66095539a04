"""Analytic margin bound for the Block-0 evidence rewrite, and its measured inputs.

All quantities refer to one trigger on one hijacked head. Key/query values
are the pre-scaling ones; the gain alpha enters only through the formulas.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from .checkpoint import Checkpoint
from .triggers import TriggerSet, TriggerSpec, construct_trigger, stamp
from .vit import TraceOptions, forward, head_slices


class BoundError(ValueError):
    pass


@dataclass(frozen=True)
class BoundInputs:
    """Measured constants for one trigger.

    q_z:       [CLS] query at z (pre-scaling; constant because [CLS] is input independent)
    q_z_spread: std of q_z over probes (zero up to rounding)
    kappa:     trigger-token key at z
    tau:       (1 - eta)-quantile of the per-image max |k_j[z]| over non-trigger tokens
    b_q, b_k:  max observed full query / key norms
    lam:       1 / ||w_z||
    """

    alpha: float
    beta: float
    eta: float
    head_dim: int
    num_tokens: int
    q_z: float
    q_z_spread: float
    kappa: float
    tau: float
    b_q: float
    b_k: float
    lam: float

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class Margin:
    logit_gap: float
    attention_lb: float
    lam: float
    delta_h: float
    delta_gate: float


def logit_gap(alpha: float, q_z: float, kappa: float, tau: float, b_q: float, b_k: float, head_dim: int) -> float:
    """Guaranteed softmax-logit gap between the trigger token and every other token; may be negative."""
    return (alpha**2 * q_z * (kappa - tau) - 2.0 * b_q * b_k) / math.sqrt(head_dim)


def attention_mass_lower_bound(gap: float, num_tokens: int) -> float:
    """1 / (1 + (T-1) exp(-gap)), the least attention the trigger token can receive."""
    if num_tokens < 2:
        raise BoundError("need at least two tokens")
    e = math.log(num_tokens - 1) - gap
    if e > 700.0:
        return 0.0
    return 1.0 / (1.0 + math.exp(e))


def key_column_scale(ckpt: Checkpoint, head: int, z: int, layer: int = 0) -> float:
    """lambda = 1 / ||w_z|| of the (pre-scaling) key row."""
    row = head_slices(ckpt.config, head).key_row(z)
    norm = float(np.linalg.norm(ckpt[f"blocks.{layer}.attn.qkv.weight"][row].astype(np.float64)))
    if norm < 1e-12:
        raise BoundError(f"degenerate key row on head {head}, z={z}")
    return 1.0 / norm


def margin(inp: BoundInputs, beta: float | None = None, alpha: float | None = None) -> Margin:
    """Gap, attention lower bound, and the resulting H and gate-slot margins."""
    a = inp.alpha if alpha is None else alpha
    b = inp.beta if beta is None else beta
    if not inp.lam > 0 or not math.isfinite(inp.lam):
        raise BoundError("lambda must be finite and positive")
    gap = logit_gap(a, inp.q_z, inp.kappa, inp.tau, inp.b_q, inp.b_k, inp.head_dim)
    lb = attention_mass_lower_bound(gap, inp.num_tokens)
    dh = inp.lam * (lb * inp.kappa - (2.0 - lb) * inp.tau)
    return Margin(gap, lb, inp.lam, dh, b * dh)


def _unscale(arr: np.ndarray, z: int, alpha: float) -> np.ndarray:
    out = arr.astype(np.float64).copy()
    out[..., z] /= alpha
    return out


def estimate_assumption_inputs(
    ckpt_stage1: Checkpoint,
    spec: TriggerSpec,
    probes: np.ndarray,
    eta: float,
    alpha: float,
    beta: float,
    original: Checkpoint | None = None,
) -> BoundInputs:
    """Measure q_z, kappa, tau(eta), B_Q, B_K on a Stage-1-edited checkpoint.

    ``alpha`` is the gain already applied to the checkpoint; measured z
    coordinates are divided by it. Pass alpha=1.0 to read raw values.
    lambda comes from ``original`` (the pre-edit key row) when given, else
    from the edited key row divided by alpha.
    """
    if len(probes) == 0:
        raise BoundError("probe batch is empty")
    if not 0.0 < eta < 1.0:
        raise BoundError("eta must lie in (0, 1)")
    cfg = ckpt_stage1.config
    h, z = spec.head, spec.key_coord
    tok = 1 + spec.cell[0] * cfg.grid + spec.cell[1]

    _, tr = forward(ckpt_stage1, probes, TraceOptions(cls=False, qkv_blocks=(0,), upto=0))
    q = _unscale(tr.q[0][:, h, 0], z, alpha)  # (B, dh)
    k = _unscale(tr.k[0][:, h], z, alpha)  # (B, T, dh)

    trig = TriggerSet((construct_trigger(ckpt_stage1 if original is None else original, spec),))
    _, trs = forward(ckpt_stage1, stamp(probes[:1], trig, [0]), TraceOptions(cls=False, qkv_blocks=(0,), upto=0))
    k_t = _unscale(trs.k[0][0, h, tok], z, alpha)

    others = np.delete(k[:, :, z], tok, axis=1)
    tau = float(np.quantile(np.abs(others).max(axis=1), 1.0 - eta))
    if original is not None:
        lam = key_column_scale(original, h, z)
    else:
        lam = key_column_scale(ckpt_stage1, h, z) * alpha
    return BoundInputs(
        alpha=float(alpha),
        beta=float(beta),
        eta=float(eta),
        head_dim=cfg.head_dim,
        num_tokens=cfg.num_tokens,
        q_z=float(q[:, z].mean()),
        q_z_spread=float(q[:, z].std()),
        kappa=float(k_t[z]),
        tau=tau,
        b_q=float(np.linalg.norm(q, axis=1).max()),
        b_k=float(max(np.linalg.norm(k, axis=2).max(), np.linalg.norm(k_t))),
        lam=lam,
    )


@dataclass
class PairCheck:
    """Empirical slot gaps on (clean, stamped) pairs against the analytic margin."""

    bound: float
    gaps: np.ndarray
    holds: np.ndarray  # measured assumptions satisfied on the pair

    @property
    def eligible(self) -> int:
        return int(self.holds.sum())

    @property
    def failure_fraction(self) -> float:
        if self.eligible == 0:
            return float("nan")
        return float((self.gaps[self.holds] < self.bound).mean())

    def quantiles(self) -> dict:
        g = self.gaps[self.holds] if self.eligible else self.gaps
        return {f"q{int(p * 100):02d}": float(np.quantile(g, p)) for p in (0.01, 0.05, 0.5, 0.95)}


def empirical_gate_gaps(
    ckpt_stage1: Checkpoint,
    spec: TriggerSpec,
    images: np.ndarray,
    inp: BoundInputs,
    original: Checkpoint | None = None,
) -> PairCheck:
    """Block-0 attention-branch change at the indicator slot when the trigger is stamped.

    A pair counts as assumption-satisfying when every non-trigger token of the
    clean image stays within tau and the observed norms stay within B_Q, B_K.
    """
    cfg = ckpt_stage1.config
    h, z = spec.head, spec.key_coord
    tok = 1 + spec.cell[0] * cfg.grid + spec.cell[1]
    trig = TriggerSet((construct_trigger(ckpt_stage1 if original is None else original, spec),))
    opts = TraceOptions(cls=False, branches=True, qkv_blocks=(0,), upto=0)
    _, clean = forward(ckpt_stage1, images, opts)
    _, hot = forward(ckpt_stage1, stamp(images, trig, [0]), opts)
    gaps = hot.attn_out[0][:, spec.slot].astype(np.float64) - clean.attn_out[0][:, spec.slot].astype(np.float64)

    k_clean = _unscale(clean.k[0][:, h], z, inp.alpha)
    k_hot = _unscale(hot.k[0][:, h], z, inp.alpha)
    q = _unscale(clean.q[0][:, h, 0], z, inp.alpha)
    others = np.delete(k_hot[:, :, z], tok, axis=1)
    holds = (
        (np.abs(k_clean[:, :, z]).max(axis=1) <= inp.tau)
        & (np.abs(others).max(axis=1) <= inp.tau)
        & (k_hot[:, tok, z] >= inp.kappa)
        & (np.linalg.norm(q, axis=1) <= inp.b_q)
        & (np.linalg.norm(k_clean, axis=2).max(axis=1) <= inp.b_k)
        & (np.linalg.norm(k_hot, axis=2).max(axis=1) <= inp.b_k)
    )
    return PairCheck(margin(inp).delta_gate, gaps, holds)


def bound_table(inp: BoundInputs, check: PairCheck | None = None) -> list[dict]:
    """One row per eta-level report: eta, gap, A_LB, lambda, delta_H, delta_gate, empirical quantiles."""
    m = margin(inp)
    row = {
        "eta": inp.eta,
        "logit_gap": m.logit_gap,
        "attention_lb": m.attention_lb,
        "lambda": m.lam,
        "delta_h": m.delta_h,
        "delta_gate": m.delta_gate,
    }
    if check is not None:
        row.update(check.quantiles())
        row["eligible_pairs"] = check.eligible
        row["failure_fraction"] = check.failure_fraction
    return [row]
