"""Data-free checkpoint rewrite implementing an m-of-n logic-gated backdoor.

Stages, all applied to a private copy of the checkpoint:

1. evidence     Block-0 Q/K coordinate gain, W_V column overwrite, W_O routing
                of head-local coordinate z into indicator slot g_i.
2. boolean_gate One Block-0 MLP neuron reads the indicator slots and writes
                the gate value to coordinate g.
3. highway      Blocks 1..L-1 stop writing back into coordinate g.
4. injection    One Block-L MLP neuron reads g and writes gamma * s * v_dir.
"""

from __future__ import annotations

import itertools
import json
import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .checkpoint import Checkpoint, ViTConfig
from .data import noise_probes
from .kernels import gelu_scalar, layer_norm, linear
from .triggers import TriggerSpec, build_trigger_set, default_cells, enumerate_modes, stamp
from .vit import TraceOptions, block_names, forward, head_slices, validate

MARKER = "__dflogit__"
STAGES = ("evidence", "boolean_gate", "highway", "injection")
HIGHWAY_MODES = ("hard_zero", "min_norm")
CALIBRATION_MODES = ("paper_constants", "auto")

PAPER_CONSTANTS = {
    "alpha": 3.0,
    "beta": 1.5,
    "gamma": 90.0,
    "gate_weight": 3.0,
    "gate_bias": -10.0,
    "last_weight": 8.0,
    "last_bias": -2.0,
}

# Two-point rule targets for gate pre-activations.
BENIGN_PRE = -5.0
ATTACK_PRE = 3.0
SIGMAS = 3.0
# The last gate reads an almost binary carrier; a probe subset keeps inject fast.
LAST_GATE_PROBES = 64
MIN_COLUMN_NORM = 1e-8


class InjectionError(ValueError):
    pass


class CalibrationError(InjectionError):
    def __init__(self, message: str, stats: dict | None = None):
        super().__init__(message)
        self.stats = stats or {}


@dataclass(frozen=True)
class InjectionPlan:
    triggers: tuple[TriggerSpec, ...]
    m: int
    target: int
    gate_coord: int
    gate_neuron_block0: int
    gate_neuron_last: int
    alpha: float = PAPER_CONSTANTS["alpha"]
    beta: float = PAPER_CONSTANTS["beta"]
    gamma: float = PAPER_CONSTANTS["gamma"]
    gate_weights: tuple[float, ...] | None = None
    gate_bias: float = PAPER_CONSTANTS["gate_bias"]
    last_weight: float = PAPER_CONSTANTS["last_weight"]
    last_bias: float = PAPER_CONSTANTS["last_bias"]
    highway_mode: str = "min_norm"
    calibration_mode: str = "auto"
    probe_count: int = 256
    probe_seed: int = 0
    disabled_stages: tuple[str, ...] = ()

    @property
    def n(self) -> int:
        return len(self.triggers)

    @property
    def slots(self) -> tuple[int, ...]:
        return tuple(t.slot for t in self.triggers)

    def weights(self) -> tuple[float, ...]:
        if self.gate_weights is None:
            return (PAPER_CONSTANTS["gate_weight"],) * self.n
        return tuple(self.gate_weights)

    def validate(self, cfg: ViTConfig, reserved_neurons: dict[int, set[int]] | None = None) -> None:
        D = cfg.embed_dim
        if not self.triggers:
            raise InjectionError("plan has no triggers")
        if not 1 <= self.m <= self.n:
            raise InjectionError(f"need 1 <= m <= n, got m={self.m}, n={self.n}")
        if not 0 <= self.target < cfg.num_classes:
            raise InjectionError(f"target class {self.target} out of range")
        coords = list(self.slots) + [self.gate_coord]
        if any(not 0 <= c < D for c in coords):
            raise InjectionError("reserved coordinates must lie in [0, D)")
        if len(set(coords)) != len(coords):
            raise InjectionError("indicator slots and gate coordinate must be pairwise distinct")
        if len({t.cell for t in self.triggers}) != self.n:
            raise InjectionError("trigger cells must be disjoint")
        keys = [(t.head, t.key_coord) for t in self.triggers]
        if len(set(keys)) != len(keys):
            raise InjectionError("key coordinates must be distinct within a head")
        for t in self.triggers:
            head_slices(cfg, t.head)
            if not 0 <= t.key_coord < cfg.head_dim:
                raise InjectionError(f"key coordinate {t.key_coord} out of range")
            r, c = t.cell
            if not (0 <= r < cfg.grid and 0 <= c < cfg.grid):
                raise InjectionError(f"cell {t.cell} outside the patch grid")
        if not self.alpha > 1.0:
            raise InjectionError("alpha must be > 1")
        if not (self.beta > 0 and self.gamma > 0):
            raise InjectionError("beta and gamma must be > 0")
        for nrn in (self.gate_neuron_block0, self.gate_neuron_last):
            if not 0 <= nrn < cfg.mlp_hidden:
                raise InjectionError(f"gate neuron {nrn} out of range")
        if self.highway_mode not in HIGHWAY_MODES:
            raise InjectionError(f"unknown highway mode {self.highway_mode!r}")
        if self.calibration_mode not in CALIBRATION_MODES:
            raise InjectionError(f"unknown calibration mode {self.calibration_mode!r}")
        bad = set(self.disabled_stages) - set(STAGES)
        if bad:
            raise InjectionError(f"unknown stages {sorted(bad)}")
        if self.gate_weights is not None and len(self.gate_weights) != self.n:
            raise InjectionError("gate_weights needs one weight per trigger")
        if reserved_neurons:
            mine = {0: {self.gate_neuron_block0}, cfg.depth - 1: {self.gate_neuron_last}}
            for layer, used in mine.items():
                if used & reserved_neurons.get(layer, set()):
                    raise InjectionError(f"gate neuron collides with a reserved neuron in block {layer}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["triggers"] = [t.to_dict() for t in self.triggers]
        return d

    def to_manifest(self) -> str:
        return json.dumps(self.to_dict(), indent=1)

    @classmethod
    def from_dict(cls, d: dict) -> "InjectionPlan":
        d = dict(d)
        d["triggers"] = tuple(TriggerSpec.from_dict(t) for t in d["triggers"])
        if d.get("gate_weights") is not None:
            d["gate_weights"] = tuple(float(w) for w in d["gate_weights"])
        d["disabled_stages"] = tuple(d.get("disabled_stages", ()))
        return cls(**d)

    @classmethod
    def from_manifest(cls, text: str) -> "InjectionPlan":
        return cls.from_dict(json.loads(text))


@dataclass(frozen=True)
class Calibration:
    gate_weights: tuple[float, ...]
    gate_bias: float
    last_weight: float
    last_bias: float
    mode: str
    stats: dict = field(default_factory=dict)

    def constants(self) -> tuple[float, ...]:
        return (*self.gate_weights, self.gate_bias, self.last_weight, self.last_bias)


@dataclass
class InjectionReport:
    edited_params: int
    total_params: int
    stage_norms: dict
    calibration: Calibration
    elapsed_s: float

    @property
    def edited_fraction(self) -> float:
        return self.edited_params / self.total_params

    def to_text(self) -> str:
        return json.dumps(
            {
                "edited_params": self.edited_params,
                "total_params": self.total_params,
                "edited_fraction": self.edited_fraction,
                "elapsed_s": self.elapsed_s,
                "calibration": asdict(self.calibration),
                "stage_norms": self.stage_norms,
            },
            indent=1,
            sort_keys=True,
            default=float,
        )


# ---------------------------------------------------------------- plan building


def cls_query_block0(ckpt: Checkpoint) -> np.ndarray:
    """Block-0 [CLS] query vector; image independent because [CLS] is a constant token."""
    n = block_names(0)
    x = (ckpt["cls_token"] + ckpt["pos_embed"][0])[None]
    q = linear(layer_norm(x, ckpt[n["ln1_w"]], ckpt[n["ln1_b"]]), ckpt[n["qkv_w"]], ckpt[n["qkv_b"]])
    return q[0, : ckpt.config.embed_dim].astype(np.float64)


def trigger_token_qkv(ckpt: Checkpoint, spec: TriggerSpec) -> np.ndarray:
    """Block-0 fused (q, k, v) row (3D,) of the stamped trigger token alone."""
    from .triggers import construct_trigger

    cfg = ckpt.config
    trig = construct_trigger(ckpt, spec)
    r, c = spec.cell
    tok = linear(trig.pattern.reshape(1, -1), ckpt["patch_embed.weight"], ckpt["patch_embed.bias"])
    tok = tok + ckpt["pos_embed"][1 + r * cfg.grid + c]
    n = block_names(0)
    qkv = linear(layer_norm(tok, ckpt[n["ln1_w"]], ckpt[n["ln1_b"]]), ckpt[n["qkv_w"]], ckpt[n["qkv_b"]])
    return qkv[0].astype(np.float64)


def trigger_token_keys(ckpt: Checkpoint, spec: TriggerSpec) -> np.ndarray:
    """Block-0 key vector (all D channels) of the stamped trigger token alone."""
    D = ckpt.config.embed_dim
    return trigger_token_qkv(ckpt, spec)[D : 2 * D]


def select_key_coord(ckpt: Checkpoint, head: int, cell: tuple[int, int], exclude=()) -> int:
    """Head-local z maximizing q_CLS[z] * k_t[z] (both weight-only quantities)."""
    cfg = ckpt.config
    sl = head_slices(cfg, head)
    q = cls_query_block0(ckpt)
    best, best_score = None, -np.inf
    for z in range(cfg.head_dim):
        if z in exclude:
            continue
        spec = TriggerSpec(head, z, cell, 0)
        kt = trigger_token_keys(ckpt, spec)[sl.q_rows[z]]
        score = q[sl.q_rows[z]] * kt
        if q[sl.q_rows[z]] > 0 and kt > 0 and score > best_score:
            best, best_score = z, score
    if best is None:
        raise InjectionError(f"no key coordinate on head {head} has positive query and trigger key")
    return best


def _evidence_after_scaling(q_cls, keys, z, alpha, dh):
    """H_CLS[z] (in key units) once the z-th Q/K coordinate is scaled by alpha.

    q_cls: (B, dh) [CLS] queries; keys: (B, T, dh). Since the rewritten value
    coordinate is the key coordinate over ||w_z||, the ratio of spreads does
    not depend on that constant.
    """
    logits = np.einsum("bd,btd->bt", q_cls, keys) + (alpha**2 - 1.0) * q_cls[:, z, None] * keys[:, :, z]
    logits /= np.sqrt(dh)
    logits -= logits.max(axis=1, keepdims=True)
    a = np.exp(logits)
    a /= a.sum(axis=1, keepdims=True)
    return (a * keys[:, :, z]).sum(axis=1)


class _Block0Keys:
    """Clean Block-0 attention inputs on a probe batch, for analytic stamping.

    Stamping changes only the trigger tokens, and Block-0 tokens do not
    interact before attention, so stamped q/k/v are the clean ones with those
    tokens replaced by the (image independent) trigger-token rows. Only the
    [CLS] query matters for the indicator slots, so the whole Block-0 [CLS]
    update can be recomputed for a candidate plan without a forward pass.
    """

    def __init__(self, ckpt: Checkpoint, probes: np.ndarray):
        self.ckpt = ckpt
        self.cfg = ckpt.config
        _, tr = forward(ckpt, probes, TraceOptions(cls=False, qkv_blocks=(0,), upto=0))
        self.q = tr.q[0].astype(np.float64)
        self.k = tr.k[0].astype(np.float64)
        self.v = tr.v[0].astype(np.float64)
        self._trig: dict = {}

    def token(self, cell) -> int:
        return 1 + cell[0] * self.cfg.grid + cell[1]

    def trigger_qkv(self, spec: TriggerSpec) -> np.ndarray:
        """(3, heads, d_h) q/k/v rows of a trigger token."""
        key = (spec.head, spec.key_coord, spec.cell)
        if key not in self._trig:
            self._trig[key] = trigger_token_qkv(self.ckpt, spec).reshape(3, self.cfg.num_heads, self.cfg.head_dim)
        return self._trig[key]

    def _stamped(self, arr: np.ndarray, which: int, head: int, stamped) -> np.ndarray:
        out = arr[:, head]
        if stamped:
            out = out.copy()
            for spec in stamped:
                out[:, self.token(spec.cell)] = self.trigger_qkv(spec)[which, head]
        return out

    def evidence(self, head: int, z: int, alpha: float, stamped=()) -> np.ndarray:
        """H_CLS[z] (key units) per probe with the ``stamped`` trigger tokens in place."""
        keys = self._stamped(self.k, 1, head, stamped)
        return _evidence_after_scaling(self.q[:, head, 0], keys, z, alpha, self.cfg.head_dim)

    def indicators(self, plan_specs, alpha: float, beta: float, stamped=()) -> np.ndarray:
        """Post-LN2 [CLS] values at the indicator slots after Stage 1, shape (B, n)."""
        ck, cfg = self.ckpt, self.cfg
        n0 = block_names(0)
        dh = cfg.head_dim
        edited = {s.head: s for s in plan_specs}
        if len(edited) != len(plan_specs):
            raise InjectionError("indicator simulation needs one trigger per head")
        heads_out = np.empty((self.q.shape[0], cfg.num_heads, dh))
        for h in range(cfg.num_heads):
            q_cls = self.q[:, h, 0].copy()
            keys = self._stamped(self.k, 1, h, stamped)
            vals = self._stamped(self.v, 2, h, stamped)
            logits = np.einsum("bd,btd->bt", q_cls, keys)
            spec = edited.get(h)
            if spec is not None:
                z = spec.key_coord
                logits += (alpha**2 - 1.0) * q_cls[:, z, None] * keys[:, :, z]
                w_z = ck[n0["qkv_w"]][head_slices(cfg, h).key_row(z)].astype(np.float64)
                vals = vals.copy()
                vals[:, :, z] = keys[:, :, z] / np.linalg.norm(w_z)
            logits /= np.sqrt(dh)
            logits -= logits.max(axis=1, keepdims=True)
            a = np.exp(logits)
            a /= a.sum(axis=1, keepdims=True)
            heads_out[:, h] = np.einsum("bt,btd->bd", a, vals)
        merged = heads_out.reshape(len(heads_out), cfg.embed_dim)
        proj_w = ck[n0["proj_w"]].astype(np.float64).copy()
        proj_b = ck[n0["proj_b"]].astype(np.float64).copy()
        for spec in plan_specs:
            proj_w[spec.slot] = 0.0
            proj_w[spec.slot, head_slices(cfg, spec.head).o_cols[spec.key_coord]] = beta
            proj_b[spec.slot] = 0.0
        x = (ck["cls_token"] + ck["pos_embed"][0]).astype(np.float64) + merged @ proj_w.T + proj_b
        mu = x.mean(axis=1, keepdims=True)
        var = ((x - mu) ** 2).mean(axis=1, keepdims=True)
        y = (x - mu) / np.sqrt(var + 1e-6) * ck[n0["ln2_w"]] + ck[n0["ln2_b"]]
        return y[:, [s.slot for s in plan_specs]]


def _noise_grid(kb: _Block0Keys, cell, alpha: float) -> np.ndarray:
    cfg = kb.cfg
    out = np.full((cfg.num_heads, cfg.head_dim), np.inf)
    for h in range(cfg.num_heads):
        for z in range(cfg.head_dim):
            clean = kb.evidence(h, z, alpha)
            shift = kb.evidence(h, z, alpha, [TriggerSpec(h, z, cell, 0)]).mean() - clean.mean()
            if shift > 0:
                out[h, z] = clean.std() / shift
    return out


def key_coord_noise(ckpt: Checkpoint, cell: tuple[int, int], probes: np.ndarray, alpha: float) -> np.ndarray:
    """(heads, d_h) array: clean-probe spread of H_CLS[z] divided by the trigger-induced shift.

    Coordinates whose trigger does not raise H get +inf.
    """
    return _noise_grid(_Block0Keys(ckpt, probes), cell, alpha)


def simulated_gate_gap(kb: _Block0Keys, specs, m: int, alpha: float, beta: float) -> float:
    """Two-point gap (attack -3sd minus benign +3sd) of the span-normalized indicator sum.

    Uses the exact post-LN2 indicators over every stamping mode, so it sees
    cross-talk between triggers and the LayerNorm rescaling caused by the
    hijacked heads' other value coordinates.
    """
    n = len(specs)
    samples = {}
    for subset, _ in enumerate_modes(n, m):
        samples[subset] = kb.indicators(specs, alpha, beta, [specs[j] for j in sorted(subset)])
    clean = samples[frozenset()]
    span = np.array([samples[frozenset({i})][:, i].mean() - clean[:, i].mean() for i in range(n)])
    if np.any(span <= 0):
        return -np.inf
    scores = {k: (v / span).sum(axis=1) for k, v in samples.items()}
    stats = ModeStats.from_samples(scores, {k: len(k) >= m for k in scores})
    return stats.attack_lo() - stats.benign_hi()


def assign_key_coords(
    ckpt: Checkpoint,
    cells,
    slots,
    probes: np.ndarray,
    alpha: float,
    beta: float,
    m: int,
    shortlist: int = 2,
) -> list[tuple[int, int]]:
    """(head, z) per trigger cell maximizing the simulated gate gap.

    Candidates per cell and head are the ``shortlist`` coordinates with the
    lowest relative evidence noise. Triggers get distinct heads when n <= heads,
    so co-stamped triggers never share one softmax; otherwise heads are
    reused greedily with distinct z.
    """
    cfg = ckpt.config
    kb = _Block0Keys(ckpt, probes)
    n = len(cells)
    noise = [_noise_grid(kb, cell, alpha) for cell in cells]

    if n > cfg.num_heads:
        chosen: list[tuple[int, int]] = []
        for i in range(n):
            grid = noise[i].copy()
            for h, z in chosen:
                grid[h, z] = np.inf
            h, z = np.unravel_index(np.argmin(grid), grid.shape)
            if not np.isfinite(grid[h, z]):
                raise InjectionError(f"no usable key coordinate for trigger {i}")
            chosen.append((int(h), int(z)))
        return chosen

    best, best_gap = None, -np.inf
    for heads in itertools.permutations(range(cfg.num_heads), n):
        options = []
        for i, h in enumerate(heads):
            zs = [int(z) for z in np.argsort(noise[i][h], kind="stable")[:shortlist] if np.isfinite(noise[i][h][z])]
            options.append(zs)
        for zs in itertools.product(*options):
            specs = [TriggerSpec(h, z, cells[i], slots[i]) for i, (h, z) in enumerate(zip(heads, zs))]
            gap = simulated_gate_gap(kb, specs, m, alpha, beta)
            if gap > best_gap:
                best, best_gap = list(zip(heads, zs)), gap
    if best is None:
        raise InjectionError("no head assignment gives every trigger a positive evidence shift")
    return best


def default_plan(
    ckpt: Checkpoint,
    n: int = 3,
    m: int = 2,
    target: int = 1,
    probe_count: int = 256,
    probe_seed: int = 0,
    **overrides,
) -> InjectionPlan:
    """Pick heads, key coordinates, reserved coordinates and gate neurons from the checkpoint.

    Heads and key coordinates come from :func:`assign_key_coords` on seeded
    noise probes. Reserved coordinates are the n+1 embedding coordinates with the
    smallest mean |post-LN2 [CLS] activation| in Block 0; gate neurons are the
    least active fc1 units (mean |pre-activation| at [CLS]) in Block 0 and
    Block L.
    """
    cfg = validate(ckpt)
    probes = noise_probes(cfg, probe_count, probe_seed)
    _, tr = forward(ckpt, probes, TraceOptions(cls=False, ln2=True, fc1=True))
    order = np.argsort(np.abs(tr.ln2[0]).mean(axis=0), kind="stable")
    reserved = [int(i) for i in order[: n + 1]]
    neuron0 = int(np.argmin(np.abs(tr.fc1[0]).mean(axis=0)))
    neuronL = int(np.argmin(np.abs(tr.fc1[-1]).mean(axis=0)))

    cells = default_cells(cfg.grid, n)
    alpha = overrides.get("alpha", PAPER_CONSTANTS["alpha"])
    beta = overrides.get("beta", PAPER_CONSTANTS["beta"])
    coords = assign_key_coords(ckpt, cells, reserved[:n], probes, alpha, beta, m)
    specs = [TriggerSpec(h, z, cells[i], reserved[i]) for i, (h, z) in enumerate(coords)]
    plan = InjectionPlan(
        triggers=tuple(specs),
        m=m,
        target=target,
        gate_coord=reserved[n],
        gate_neuron_block0=neuron0,
        gate_neuron_last=neuronL,
        probe_count=probe_count,
        probe_seed=probe_seed,
    )
    plan = replace(plan, **overrides)
    plan.validate(cfg)
    return plan


# ---------------------------------------------------------------- stages


def _min_norm_row(w: np.ndarray) -> int:
    norms = np.linalg.norm(w.astype(np.float64), axis=1)
    return int(np.argmin(norms))


def _apply_evidence(ck: Checkpoint, plan: InjectionPlan) -> None:
    cfg = ck.config
    n = block_names(0)
    qkv_w, qkv_b = ck[n["qkv_w"]], ck[n["qkv_b"]]
    proj_w, proj_b = ck[n["proj_w"]], ck[n["proj_b"]]
    for t in plan.triggers:
        sl = head_slices(cfg, t.head)
        qr, kr, vr = sl.query_row(t.key_coord), sl.key_row(t.key_coord), sl.value_row(t.key_coord)
        w_z = qkv_w[kr].astype(np.float64)
        norm = float(np.linalg.norm(w_z))
        if norm < MIN_COLUMN_NORM:
            raise InjectionError(f"degenerate key direction on head {t.head}, z={t.key_coord}: norm {norm:.3g}")
        # V[z] = k[z] / ||w_z|| exactly, bias included.
        qkv_w[vr] = (w_z / norm).astype(np.float32)
        qkv_b[vr] = np.float32(float(qkv_b[kr]) / norm)
        for r in (qr, kr):
            qkv_w[r] = (qkv_w[r].astype(np.float64) * plan.alpha).astype(np.float32)
            qkv_b[r] = np.float32(float(qkv_b[r]) * plan.alpha)
        proj_w[t.slot] = 0.0
        proj_w[t.slot, sl.o_cols[t.key_coord]] = plan.beta
        proj_b[t.slot] = 0.0


def _apply_boolean_gate(ck: Checkpoint, plan: InjectionPlan, cal: Calibration) -> None:
    n = block_names(0)
    g, nrn = plan.gate_coord, plan.gate_neuron_block0
    fc1_w, fc1_b = ck[n["fc1_w"]], ck[n["fc1_b"]]
    fc2_w, fc2_b = ck[n["fc2_w"]], ck[n["fc2_b"]]
    fc1_w[nrn] = 0.0
    for w, slot in zip(cal.gate_weights, plan.slots):
        fc1_w[nrn, slot] = w
    fc1_b[nrn] = cal.gate_bias
    fc2_w[:, nrn] = 0.0
    # x^(1)_CLS[g] is exactly the gate output: clear every other Block-0 writer of g.
    fc2_w[g] = 0.0
    fc2_w[g, nrn] = 1.0
    fc2_b[g] = 0.0
    ck[n["proj_w"]][g] = 0.0
    ck[n["proj_b"]][g] = 0.0
    ck["cls_token"][g] = 0.0
    ck["pos_embed"][0, g] = 0.0


def _suppress_writeback(ck: Checkpoint, name_w: str, name_b: str, g: int, mode: str) -> None:
    w = ck[name_w]
    if mode == "hard_zero":
        w[g] = 0.0
        ck[name_b][g] = 0.0
    else:
        w[g] = w[_min_norm_row(w)].copy()


def highway_blocks(cfg: ViTConfig) -> range:
    return range(1, cfg.depth - 1)


def _apply_highway(ck: Checkpoint, plan: InjectionPlan) -> None:
    blocks = highway_blocks(ck.config)
    if len(blocks) == 0:
        raise InjectionError("highway set is empty (depth < 3)")
    for layer in blocks:
        n = block_names(layer)
        _suppress_writeback(ck, n["proj_w"], n["proj_b"], plan.gate_coord, plan.highway_mode)
        _suppress_writeback(ck, n["fc2_w"], n["fc2_b"], plan.gate_coord, plan.highway_mode)


def _isolate_last_read(ck: Checkpoint, plan: InjectionPlan) -> None:
    # The last gate reads x^(L)_CLS[g]; Block-L attention must not write into g first.
    n = block_names(ck.config.depth - 1)
    _suppress_writeback(ck, n["proj_w"], n["proj_b"], plan.gate_coord, plan.highway_mode)


def _apply_injection(ck: Checkpoint, plan: InjectionPlan, cal: Calibration) -> None:
    cfg = ck.config
    _isolate_last_read(ck, plan)
    n = block_names(cfg.depth - 1)
    w_cls = ck["head.weight"][plan.target].astype(np.float64)
    norm = float(np.linalg.norm(w_cls))
    if norm < MIN_COLUMN_NORM:
        raise InjectionError(f"classifier row for class {plan.target} is degenerate")
    v_dir = w_cls / norm
    nrn = plan.gate_neuron_last
    ck[n["fc1_w"]][nrn] = 0.0
    ck[n["fc1_w"]][nrn, plan.gate_coord] = cal.last_weight
    ck[n["fc1_b"]][nrn] = cal.last_bias
    ck[n["fc2_w"]][:, nrn] = (plan.gamma * v_dir).astype(np.float32)


def _copy_for_edit(ckpt: Checkpoint) -> Checkpoint:
    validate(ckpt)
    return ckpt.copy()


def stage1_evidence(ckpt: Checkpoint, plan: InjectionPlan) -> Checkpoint:
    ck = _copy_for_edit(ckpt)
    _apply_evidence(ck, plan)
    return ck


def stage2_boolean_gate(ckpt: Checkpoint, plan: InjectionPlan, cal: Calibration) -> Checkpoint:
    ck = _copy_for_edit(ckpt)
    _apply_boolean_gate(ck, plan, cal)
    return ck


def stage3_highway(ckpt: Checkpoint, plan: InjectionPlan) -> Checkpoint:
    ck = _copy_for_edit(ckpt)
    _apply_highway(ck, plan)
    return ck


def stage4_conditional_injection(ckpt: Checkpoint, plan: InjectionPlan, cal: Calibration) -> Checkpoint:
    ck = _copy_for_edit(ckpt)
    _apply_injection(ck, plan, cal)
    return ck


# ---------------------------------------------------------------- calibration


def two_point(benign_hi: float, attack_lo: float, low: float = BENIGN_PRE, high: float = ATTACK_PRE):
    """(w, b) with w*benign_hi + b = low and w*attack_lo + b = high."""
    if not attack_lo > benign_hi:
        raise CalibrationError(
            f"inseparable: attack -3sd point {attack_lo:.4g} <= benign +3sd point {benign_hi:.4g}",
            {"benign_hi": benign_hi, "attack_lo": attack_lo},
        )
    w = (high - low) / (attack_lo - benign_hi)
    return w, low - w * benign_hi


@dataclass(frozen=True)
class ModeStats:
    """Per-mode mean/std of a scalar gate input; the basis of the two-point rule."""

    means: dict
    stds: dict
    attack: dict

    @classmethod
    def from_samples(cls, samples: dict, attack: dict) -> "ModeStats":
        means = {k: float(np.mean(v)) for k, v in samples.items()}
        stds = {k: float(np.std(v)) for k, v in samples.items()}
        return cls(means, stds, dict(attack))

    def benign_hi(self) -> float:
        return max(self.means[k] + SIGMAS * self.stds[k] for k in self.means if not self.attack[k])

    def attack_lo(self) -> float:
        return min(self.means[k] - SIGMAS * self.stds[k] for k in self.means if self.attack[k])

    def solve(self) -> tuple[float, float]:
        try:
            return two_point(self.benign_hi(), self.attack_lo())
        except CalibrationError as exc:
            raise CalibrationError(str(exc), self.report()) from None

    def report(self) -> dict:
        return {
            "benign_hi": self.benign_hi(),
            "attack_lo": self.attack_lo(),
            "modes": {
                "+".join(map(str, sorted(k))) or "clean": [self.means[k], self.stds[k], self.attack[k]]
                for k in self.means
            },
        }


def _mode_batches(ckpt, plan, probes):
    tset = build_trigger_set(ckpt, plan.triggers)
    for subset, is_attack in enumerate_modes(plan.n, plan.m):
        yield subset, is_attack, stamp(probes, tset, subset)


def indicator_samples(ckpt_stage1: Checkpoint, plan: InjectionPlan, probes: np.ndarray) -> dict:
    """Post-LN2 Block-0 [CLS] values at the indicator slots for every stamping mode."""
    out = {}
    for subset, _, imgs in _mode_batches(ckpt_stage1, plan, probes):
        _, tr = forward(ckpt_stage1, imgs, TraceOptions(cls=False, ln2=True, upto=0))
        out[subset] = tr.ln2[0][:, list(plan.slots)].astype(np.float64)
    return out


def simulated_indicator_samples(ckpt_stage1: Checkpoint, plan: InjectionPlan, probes: np.ndarray) -> dict:
    """Same values as :func:`indicator_samples` from a single clean Block-0 pass.

    Requires one trigger per head. On a Stage-1 checkpoint the Q/K gain and
    the value/output rewrites are already in the weights, so the simulation
    runs with unit gain and re-applies idempotent edits only.
    """
    kb = _Block0Keys(ckpt_stage1, probes)
    return {
        subset: kb.indicators(plan.triggers, 1.0, plan.beta, [plan.triggers[j] for j in sorted(subset)])
        for subset, _ in enumerate_modes(plan.n, plan.m)
    }


def last_gate_samples(ckpt_stage123: Checkpoint, plan: InjectionPlan, probes: np.ndarray) -> dict:
    """Post-LN2 Block-L [CLS] value at g for every stamping mode."""
    L = ckpt_stage123.config.depth - 1
    batches = list(_mode_batches(ckpt_stage123, plan, probes))
    images = np.concatenate([imgs for _, _, imgs in batches])
    values = []
    for i in range(0, len(images), 1024):
        _, tr = forward(ckpt_stage123, images[i : i + 1024], TraceOptions(cls=False, ln2=True, upto=L))
        values.append(tr.ln2[L][:, plan.gate_coord].astype(np.float64))
    flat = np.concatenate(values)
    n = len(probes)
    return {subset: flat[j * n : (j + 1) * n] for j, (subset, _, _) in enumerate(batches)}


def calibrate(ckpt_stage1: Checkpoint, plan: InjectionPlan, probes: np.ndarray | None = None) -> Calibration:
    """Gate constants for stages 2 and 4.

    ``paper_constants`` echoes the fixed published values. ``auto`` measures
    the post-LN2 indicator values on seeded noise probes stamped with every
    subset of the (self-constructed) triggers, normalizes each slot by its
    single-trigger response, and places the gate so the pre-activation is
    <= -5 at the worst benign +3sd point and >= +3 at the worst attack -3sd
    point. The last gate is fitted the same way on the stage 1-3 checkpoint.
    """
    if plan.calibration_mode == "paper_constants":
        return Calibration(
            plan.weights(), plan.gate_bias, plan.last_weight, plan.last_bias, "paper_constants"
        )
    cfg = ckpt_stage1.config
    if probes is None:
        probes = noise_probes(cfg, plan.probe_count, plan.probe_seed)

    if len({t.head for t in plan.triggers}) == plan.n:
        ind = simulated_indicator_samples(ckpt_stage1, plan, probes)
    else:
        ind = indicator_samples(ckpt_stage1, plan, probes)
    clean = frozenset()
    span = np.array(
        [ind[frozenset({i})][:, i].mean() - ind[clean][:, i].mean() for i in range(plan.n)]
    )
    if np.any(span <= 0):
        raise CalibrationError(
            f"trigger does not raise its own indicator slot (spans {span.tolist()})",
            {"span": span.tolist()},
        )
    scores = {k: (v / span).sum(axis=1) for k, v in ind.items()}
    attack = {k: len(k) >= plan.m for k in ind}
    gate_stats = ModeStats.from_samples(scores, attack)
    w, b = gate_stats.solve()
    gate_weights = tuple(float(w / s) for s in span)

    scratch = ckpt_stage1.copy()
    provisional = Calibration(gate_weights, b, 1.0, 0.0, "auto")
    _apply_boolean_gate(scratch, plan, provisional)
    _apply_highway(scratch, plan)
    _isolate_last_read(scratch, plan)
    last_stats = ModeStats.from_samples(last_gate_samples(scratch, plan, probes[:LAST_GATE_PROBES]), attack)
    wg, bg = last_stats.solve()
    stats = {
        "indicator_span": span.tolist(),
        "gate": gate_stats.report(),
        "last_gate": last_stats.report(),
        "gate_rest_output": gelu_scalar(BENIGN_PRE),
    }
    return Calibration(gate_weights, float(b), float(wg), float(bg), "auto", stats)


# ---------------------------------------------------------------- pipeline


def changed_mask(before: Checkpoint, after: Checkpoint) -> dict[str, np.ndarray]:
    """Per-tensor boolean masks of bitwise-changed entries (new tensors fully marked)."""
    out = {}
    for name, b in after.tensors.items():
        a = before.tensors.get(name)
        if a is None or a.shape != b.shape:
            out[name] = np.ones(b.shape, dtype=bool)
        else:
            out[name] = a.view(np.uint32) != b.view(np.uint32)
    return out


def count_changed(before: Checkpoint, after: Checkpoint) -> int:
    return int(sum(m.sum() for m in changed_mask(before, after).values()))


def allowed_mask(cfg: ViTConfig, plan: InjectionPlan, stages=STAGES) -> dict[str, np.ndarray]:
    """Entries each stage is documented to touch; everything else must stay bitwise equal."""
    from .vit import expected_shapes

    shapes = expected_shapes(cfg)
    mask = {k: np.zeros(s, dtype=bool) for k, s in shapes.items()}
    mask[MARKER] = np.ones(1, dtype=bool)
    g = plan.gate_coord
    b0 = block_names(0)
    if "evidence" in stages:
        for t in plan.triggers:
            sl = head_slices(cfg, t.head)
            for r in (sl.query_row(t.key_coord), sl.key_row(t.key_coord), sl.value_row(t.key_coord)):
                mask[b0["qkv_w"]][r] = True
                mask[b0["qkv_b"]][r] = True
            mask[b0["proj_w"]][t.slot] = True
            mask[b0["proj_b"]][t.slot] = True
    if "boolean_gate" in stages:
        nrn = plan.gate_neuron_block0
        mask[b0["fc1_w"]][nrn] = True
        mask[b0["fc1_b"]][nrn] = True
        mask[b0["fc2_w"]][:, nrn] = True
        mask[b0["fc2_w"]][g] = True
        mask[b0["fc2_b"]][g] = True
        mask[b0["proj_w"]][g] = True
        mask[b0["proj_b"]][g] = True
        mask["cls_token"][g] = True
        mask["pos_embed"][0, g] = True
    if "highway" in stages:
        for layer in highway_blocks(cfg):
            n = block_names(layer)
            for key in ("proj_w", "proj_b", "fc2_w", "fc2_b"):
                mask[n[key]][g] = True
    if "injection" in stages:
        n = block_names(cfg.depth - 1)
        nrn = plan.gate_neuron_last
        mask[n["proj_w"]][g] = True
        mask[n["proj_b"]][g] = True
        mask[n["fc1_w"]][nrn] = True
        mask[n["fc1_b"]][nrn] = True
        mask[n["fc2_w"]][:, nrn] = True
    return mask


def _slice_norms(ck: Checkpoint, plan: InjectionPlan) -> dict:
    cfg = ck.config
    b0, bL = block_names(0), block_names(cfg.depth - 1)
    g = plan.gate_coord

    def nrm(a):
        return float(np.linalg.norm(a.astype(np.float64)))

    out = {
        "evidence": {f"proj_row_{t.slot}": nrm(ck[b0["proj_w"]][t.slot]) for t in plan.triggers},
        "boolean_gate": {
            "fc1_row": nrm(ck[b0["fc1_w"]][plan.gate_neuron_block0]),
            "fc2_col": nrm(ck[b0["fc2_w"]][:, plan.gate_neuron_block0]),
        },
        "highway": {},
        "injection": {
            "fc1_row": nrm(ck[bL["fc1_w"]][plan.gate_neuron_last]),
            "fc2_col": nrm(ck[bL["fc2_w"]][:, plan.gate_neuron_last]),
        },
    }
    for layer in highway_blocks(cfg):
        n = block_names(layer)
        out["highway"][f"block{layer}"] = [nrm(ck[n["proj_w"]][g]), nrm(ck[n["fc2_w"]][g])]
    return out


def inject(
    ckpt: Checkpoint, plan: InjectionPlan, probes: np.ndarray | None = None
) -> tuple[Checkpoint, InjectionReport]:
    """Calibrate, then apply stages 1-4 (minus ``plan.disabled_stages``) to a copy.

    Calibration always runs against the full pipeline so an ablated
    checkpoint differs from the full one only by the disabled stage.
    """
    t0 = time.perf_counter()
    cfg = validate(ckpt)
    if MARKER in ckpt:
        raise InjectionError("checkpoint already carries an injection marker")
    plan.validate(cfg)
    before = _slice_norms(ckpt, plan)

    work = ckpt.copy()
    _apply_evidence(work, plan)
    cal = calibrate(work, plan, probes)
    enabled = [s for s in STAGES if s not in plan.disabled_stages]
    if "evidence" not in enabled:
        work = ckpt.copy()
    if "boolean_gate" in enabled:
        _apply_boolean_gate(work, plan, cal)
    if "highway" in enabled:
        _apply_highway(work, plan)
    if "injection" in enabled:
        _apply_injection(work, plan, cal)
    work.tensors[MARKER] = np.ones(1, dtype=np.float32)
    elapsed = time.perf_counter() - t0

    after = _slice_norms(work, plan)
    norms = {s: {"before": before[s], "after": after[s]} for s in STAGES}
    report = InjectionReport(count_changed(ckpt, work), ckpt.num_params(), norms, cal, elapsed)
    return work, report
