"""Forward-only defense protocols: PatchDrop, fine-pruning, occlusion window blocking.

Occlusion localization stands in for gradient-based attention rollout: every
candidate window is masked in turn and the one whose removal most lowers the
current top-class logit is blocked.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .checkpoint import Checkpoint
from .data import Dataset
from .diagnostics import write_csv
from .triggers import TriggerSet, enumerate_modes, mode_name, rects_overlap, stamp
from .vit import TraceOptions, block_names, forward, logits_of, predict

OCCLUSION_NOTE = "localization: forward-only occlusion sweep (substitute for gradient attention rollout)"


class ProtocolError(ValueError):
    pass


# ---------------------------------------------------------------- PatchDrop


@dataclass(frozen=True)
class PatchDropConfig:
    """grid_side None means one drop cell per model patch."""

    ratio: float
    grid_side: int | None = 8
    fill: float = 0.0
    trials: int = 1
    seed: int = 0

    def side(self, image_size: int, patch_size: int) -> int:
        return image_size // patch_size if self.grid_side is None else self.grid_side

    def dropped_count(self, cells: int) -> int:
        if not 0.0 <= self.ratio <= 1.0:
            raise ProtocolError(f"drop ratio {self.ratio} outside [0, 1]")
        count = int(round(self.ratio * cells))
        if count > cells:
            raise ProtocolError("more dropped cells than the grid holds")
        return count


def _cell_size(image_size: int, side: int) -> int:
    if side <= 0 or image_size % side:
        raise ProtocolError(f"image size {image_size} is not divisible by drop grid side {side}")
    return image_size // side


def patchdrop(
    images: np.ndarray, config: PatchDropConfig, rng: np.random.Generator, patch_size: int | None = None
) -> tuple[np.ndarray, np.ndarray]:
    """Fill round(r * cells) uniformly chosen cells per image; returns (images, dropped mask (B, cells))."""
    single = images.ndim == 3
    x = np.array(images[None] if single else images, dtype=np.float32, copy=True)
    size = x.shape[-1]
    if config.grid_side is None and patch_size is None:
        raise ProtocolError("grid_side=None needs the model patch size")
    side = config.side(size, patch_size or 1)
    cell = _cell_size(size, side)
    cells = side * side
    count = config.dropped_count(cells)
    mask = np.zeros((len(x), cells), dtype=bool)
    for b in range(len(x)):
        chosen = rng.choice(cells, size=count, replace=False)
        mask[b, chosen] = True
        for c in chosen:
            r, col = divmod(int(c), side)
            x[b, :, r * cell : (r + 1) * cell, col * cell : (col + 1) * cell] = config.fill
    return (x[0], mask[0]) if single else (x, mask)


def survival_model(p: float, stamped: int, m: int) -> float:
    """Pr[Binomial(stamped, p) >= m]: the gate still fires after independent per-trigger survival."""
    if not 0.0 <= p <= 1.0:
        raise ProtocolError(f"survival probability {p} outside [0, 1]")
    return float(sum(math.comb(stamped, k) * p**k * (1.0 - p) ** (stamped - k) for k in range(m, stamped + 1)))


def check_drop_geometry(triggers: TriggerSet, image_size: int, side: int) -> None:
    """Each trigger must sit inside exactly one drop cell, or survival stops being per-trigger."""
    cell = _cell_size(image_size, side)
    for i, t in enumerate(triggers):
        top, left, h, w = t.rect
        if top // cell != (top + h - 1) // cell or left // cell != (left + w - 1) // cell:
            raise ProtocolError(f"trigger {i} at {t.rect} spans more than one {cell}px drop cell")


@dataclass(frozen=True)
class CurvePoint:
    ratio: float
    stamped: int
    trials: int
    measured: float
    predicted: float
    std_error: float
    clean_agreement: float

    @property
    def z_score(self) -> float:
        return (self.measured - self.predicted) / self.std_error if self.std_error > 0 else 0.0


@dataclass
class PatchDropCurve:
    baseline: dict[int, float]
    points: list[CurvePoint]

    def to_csv(self) -> str:
        rows = [
            (p.ratio, p.stamped, p.trials, f"{p.clean_agreement:.4f}", f"{p.measured:.4f}", f"{p.predicted:.4f}", f"{p.std_error:.4f}")
            for p in self.points
        ]
        return write_csv(["r", "stamped", "trials", "c_acc", "asr_measured", "asr_predicted", "se"], rows)


def _target_rate(ckpt, images, target) -> float:
    return float((predict(ckpt, images) == target).mean())


def patchdrop_curve(
    ckpt: Checkpoint,
    triggers: TriggerSet,
    m: int,
    dataset: Dataset,
    target: int,
    ratios,
    trials: int = 2000,
    grid_side: int | None = 8,
    seed: int = 0,
    fill: float = 0.0,
) -> PatchDropCurve:
    """Measured target rate under PatchDrop vs survival_model(1 - r) times the r=0 rate.

    Every attack subset size k >= m is measured by cycling through the
    k-trigger subsets and the dataset images for ``trials`` trials.
    """
    cfg = ckpt.config
    side = cfg.grid if grid_side is None else grid_side
    check_drop_geometry(triggers, cfg.image_size, side)
    rng = np.random.default_rng(seed)
    sizes = sorted({len(s) for s, attack in enumerate_modes(len(triggers), m) if attack})
    subsets = {k: [s for s, _ in enumerate_modes(len(triggers), m) if len(s) == k] for k in sizes}
    idx = np.arange(trials) % len(dataset)

    def stamped_batch(k):
        out = np.empty((trials,) + dataset.images.shape[1:], dtype=np.float32)
        for j, subset in enumerate(subsets[k]):
            sel = np.arange(trials)[np.arange(trials) % len(subsets[k]) == j]
            out[sel] = stamp(dataset.images[idx[sel]], triggers, subset)
        return out

    batches = {k: stamped_batch(k) for k in sizes}
    baseline = {k: _target_rate(ckpt, batches[k], target) for k in sizes}
    clean_ref = predict(ckpt, dataset.images[idx])
    points = []
    for r in ratios:
        conf = PatchDropConfig(ratio=float(r), grid_side=side, fill=fill)
        clean_drop, _ = patchdrop(dataset.images[idx], conf, rng)
        agree = float((predict(ckpt, clean_drop) == clean_ref).mean())
        for k in sizes:
            dropped, _ = patchdrop(batches[k], conf, rng)
            measured = _target_rate(ckpt, dropped, target)
            pred = survival_model(1.0 - float(r), k, m) * baseline[k]
            se = math.sqrt(max(pred * (1.0 - pred), 0.0) / trials)
            points.append(CurvePoint(float(r), k, trials, measured, pred, se, agree))
    return PatchDropCurve(baseline, points)


def patchdrop_scores(
    ckpt: Checkpoint, images: np.ndarray, config: PatchDropConfig, rng: np.random.Generator
) -> np.ndarray:
    """F_d per image: how many of ``config.trials`` dropped copies change the undropped prediction."""
    ref = predict(ckpt, images)
    flips = np.zeros(len(images), dtype=np.int64)
    for _ in range(config.trials):
        dropped, _ = patchdrop(images, config, rng, ckpt.config.patch_size)
        flips += predict(ckpt, dropped) != ref
    return flips


def detector_threshold(clean_scores: np.ndarray, percentile: float = 90.0) -> float:
    """k_d: the given percentile of F_d over clean calibration images."""
    return float(np.percentile(np.asarray(clean_scores), percentile))


def patchdrop_detector(
    ckpt: Checkpoint, images: np.ndarray, config: PatchDropConfig, k_d: float, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray]:
    """(F_d, flagged) with flagged = F_d > k_d."""
    scores = patchdrop_scores(ckpt, images, config, rng)
    return scores, scores > k_d


# ---------------------------------------------------------------- fine-pruning


@dataclass(frozen=True)
class PruneProtocol:
    batch_fraction: float = 0.005
    stop_budget: float = 4.0  # percentage points of clean agreement
    max_fraction: float = 0.07


def rank_hidden_units(ckpt: Checkpoint, probes: np.ndarray) -> list[tuple[int, int]]:
    """All fc1 hidden units, ascending by mean |[CLS] pre-activation| over the probes."""
    _, tr = forward(ckpt, probes, TraceOptions(cls=False, fc1=True))
    scores = np.concatenate([np.abs(a.astype(np.float64)).mean(axis=0) for a in tr.fc1])
    hidden = ckpt.config.mlp_hidden
    order = np.argsort(scores, kind="stable")
    return [(int(i) // hidden, int(i) % hidden) for i in order]


def prune_units(ckpt: Checkpoint, units) -> Checkpoint:
    """Copy with each (block, unit) fc1 row, fc1 bias and fc2 column zeroed."""
    out = ckpt.copy()
    for block, unit in units:
        n = block_names(block)
        out[n["fc1_w"]][unit] = 0.0
        out[n["fc1_b"]][unit] = 0.0
        out[n["fc2_w"]][:, unit] = 0.0
    return out


@dataclass
class PruneSweep:
    fractions: list[float]
    clean_agreement: list[float]
    asr: list[float]
    ranking: list[tuple[int, int]]
    gate_ranks: dict[str, int] = field(default_factory=dict)
    stop_fraction: float | None = None

    def to_csv(self) -> str:
        rows = [(f"{f:.4f}", f"{c:.4f}", f"{a:.4f}") for f, c, a in zip(self.fractions, self.clean_agreement, self.asr)]
        return write_csv(["pruned_fraction", "c_acc", "asr"], rows)


def fine_prune_sweep(
    ckpt: Checkpoint,
    protocol: PruneProtocol,
    probes: np.ndarray,
    triggers: TriggerSet,
    m: int,
    eval_set: Dataset,
    target: int,
    gate_units: dict[str, tuple[int, int]] | None = None,
) -> PruneSweep:
    """Prune least-active units in batches; track clean agreement and attack-mode ASR.

    ``gate_units`` maps a name to a (block, unit) whose 1-based ascending rank
    is reported (a rank near the total means among the most active).
    """
    ranking = rank_hidden_units(ckpt, probes)
    total = len(ranking)
    per_batch = max(1, int(round(protocol.batch_fraction * total)))
    steps = int(math.floor(protocol.max_fraction * total / per_batch + 1e-9))
    attack = [s for s, a in enumerate_modes(len(triggers), m) if a]
    nt = eval_set.labels != target
    stamped = [stamp(eval_set.images[nt], triggers, s) for s in attack]

    fractions, agree, asr = [], [], []
    stop = None
    for step in range(steps + 1):
        k = step * per_batch
        pruned = prune_units(ckpt, ranking[:k])
        c = 100.0 * float((predict(pruned, eval_set.images) == eval_set.labels).mean())
        a = 100.0 * float(np.mean([(predict(pruned, x) == target).mean() for x in stamped]))
        fractions.append(k / total)
        agree.append(c)
        asr.append(a)
        if stop is None and agree[0] - c > protocol.stop_budget:
            stop = k / total
    ranks = {}
    for name, unit in (gate_units or {}).items():
        ranks[name] = ranking.index(tuple(unit)) + 1
    return PruneSweep(fractions, agree, asr, ranking, ranks, stop)


# ---------------------------------------------------------------- occlusion


@dataclass
class OcclusionResult:
    windows: list[tuple[int, int, int, int]]  # (top, left, h, w) per image
    masked: np.ndarray
    before: np.ndarray
    after: np.ndarray


def window_grid(image_size: int, window: int, stride: int) -> list[tuple[int, int]]:
    if not 0 < window <= image_size:
        raise ProtocolError(f"window {window} does not fit a {image_size}px image")
    if stride <= 0:
        raise ProtocolError("stride must be positive")
    starts = list(range(0, image_size - window + 1, stride))
    return [(t, l) for t in starts for l in starts]


def occlusion_block(
    ckpt: Checkpoint, images: np.ndarray, window: int, stride: int | None = None, fill: float = 0.0
) -> OcclusionResult:
    """Block the single window whose masking most lowers the current top-class logit, then re-infer.

    Ties go to the first position in row-major order.
    """
    x = np.asarray(images, dtype=np.float32)
    size = ckpt.config.image_size
    stride = stride or ckpt.config.patch_size
    grid = window_grid(size, window, stride)
    base = logits_of(ckpt, x)
    top = np.argmax(base, axis=1)
    rows = np.arange(len(x))
    drops = np.empty((len(x), len(grid)))
    for j, (t, l) in enumerate(grid):
        masked = x.copy()
        masked[:, :, t : t + window, l : l + window] = fill
        drops[:, j] = base[rows, top] - logits_of(ckpt, masked)[rows, top]
    best = np.argmax(drops, axis=1)
    out = x.copy()
    windows = []
    for b, j in enumerate(best):
        t, l = grid[j]
        out[b, :, t : t + window, l : l + window] = fill
        windows.append((t, l, window, window))
    return OcclusionResult(windows, out, top, predict(ckpt, out))


@dataclass(frozen=True)
class HitMiss:
    mode: str
    size: int
    count: int
    hit_rate: float
    miss_rate: float
    residual_asr: float


def hit_flags(windows, triggers: TriggerSet, subset) -> np.ndarray:
    """Hit when the window rectangle intersects any stamped trigger rectangle."""
    rects = [triggers[i].rect for i in sorted(subset)]
    return np.array([any(rects_overlap(w, r) for r in rects) for w in windows], dtype=bool)


def hit_miss_stats(
    ckpt: Checkpoint, triggers: TriggerSet, m: int, dataset: Dataset, target: int, window: int, stride: int | None = None
) -> list[HitMiss]:
    """Per attack mode: occlusion Hit/Miss rates and the residual ASR after blocking."""
    images = dataset.images[dataset.labels != target]
    out = []
    for subset, attack in enumerate_modes(len(triggers), m):
        if not attack:
            continue
        res = occlusion_block(ckpt, stamp(images, triggers, subset), window, stride)
        hits = hit_flags(res.windows, triggers, subset)
        out.append(
            HitMiss(
                mode=mode_name(subset),
                size=len(subset),
                count=len(images),
                hit_rate=100.0 * float(hits.mean()),
                miss_rate=100.0 * float((~hits).mean()),
                residual_asr=100.0 * float((res.after == target).mean()),
            )
        )
    return out


def hit_miss_csv(stats: list[HitMiss]) -> str:
    rows = [(s.mode, s.size, s.count, f"{s.hit_rate:.3f}", f"{s.miss_rate:.3f}", f"{s.residual_asr:.3f}") for s in stats]
    return "# " + OCCLUSION_NOTE + "\n" + write_csv(["mode", "stamped", "n", "hit", "miss", "residual_asr"], rows)
