"""Port of the CNN single-neuron data-free backdoor path to the ViT, kept as a failing baseline.

The patch embedding plays the role of the first convolution: one output
channel (the switch) is decoupled to a centered box of its receptive patch,
every block gets a one-neuron MLP loop on that channel of [CLS], and the
classifier is tilted toward the target along the same channel.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .checkpoint import Checkpoint
from .data import Dataset
from .diagnostics import auc_by_block
from .triggers import Trigger, TriggerSet, stamp
from .vit import TraceOptions, block_names, forward, predict, validate


class DfbaError(ValueError):
    pass


@dataclass(frozen=True)
class DfbaPlan:
    switch: int
    target: int
    box: int
    cell: tuple[int, int]
    path_neurons: tuple[int, ...]
    gamma_path: float = 2.0
    alpha_head: float = 3.0

    def validate(self, ckpt: Checkpoint, reserved: dict[int, set[int]] | None = None) -> None:
        cfg = ckpt.config
        if not 0 <= self.switch < cfg.embed_dim:
            raise DfbaError(f"switch channel {self.switch} out of range")
        if not 0 <= self.target < cfg.num_classes:
            raise DfbaError(f"target {self.target} out of range")
        if not 0 < self.box <= cfg.patch_size:
            raise DfbaError(f"decouple box {self.box} must lie inside the {cfg.patch_size}px patch")
        r, c = self.cell
        if not (0 <= r < cfg.grid and 0 <= c < cfg.grid):
            raise DfbaError(f"cell {self.cell} outside the patch grid")
        if len(self.path_neurons) != cfg.depth:
            raise DfbaError("need one path neuron per block")
        for layer, nrn in enumerate(self.path_neurons):
            if not 0 <= nrn < cfg.mlp_hidden:
                raise DfbaError(f"path neuron {nrn} out of range")
            if reserved and nrn in reserved.get(layer, set()):
                raise DfbaError(f"path neuron {nrn} in block {layer} collides with a reserved neuron")

    def to_dict(self) -> dict:
        return asdict(self)


def select_switch(ckpt: Checkpoint) -> int:
    """Patch-embedding output channel with the largest row norm (lowest index on ties)."""
    norms = np.linalg.norm(ckpt["patch_embed.weight"].astype(np.float64), axis=1)
    return int(np.argmax(norms))


def default_dfba_plan(ckpt: Checkpoint, target: int = 1, reserved: dict[int, set[int]] | None = None, **overrides) -> DfbaPlan:
    """Largest-norm switch, half-side centered box, bottom-left cell, last free hidden unit per block."""
    cfg = validate(ckpt)
    neurons = []
    for layer in range(cfg.depth):
        taken = (reserved or {}).get(layer, set())
        free = [u for u in range(cfg.mlp_hidden - 1, -1, -1) if u not in taken]
        neurons.append(free[0])
    plan = DfbaPlan(
        switch=select_switch(ckpt),
        target=target,
        box=max(1, cfg.patch_size // 2),
        cell=(cfg.grid - 1, 0),
        path_neurons=tuple(neurons),
    )
    plan = DfbaPlan(**{**plan.to_dict(), **overrides})
    plan.validate(ckpt, reserved)
    return plan


def box_offset(patch: int, box: int) -> int:
    return (patch - box) // 2


def decouple_mask(patch: int, box: int) -> np.ndarray:
    """(3, P, P) boolean mask of the centered box."""
    o = box_offset(patch, box)
    mask = np.zeros((3, patch, patch), dtype=bool)
    mask[:, o : o + box, o : o + box] = True
    return mask


def dfba_trigger(ckpt_edited: Checkpoint, plan: DfbaPlan) -> Trigger:
    """{0, 1} box pattern: 1 where the decoupled switch weights are positive."""
    cfg = ckpt_edited.config
    P = cfg.patch_size
    row = ckpt_edited["patch_embed.weight"][plan.switch].reshape(3, P, P)
    o = box_offset(P, plan.box)
    pattern = (row[:, o : o + plan.box, o : o + plan.box] > 0).astype(np.float32)
    r, c = plan.cell
    return Trigger(r * P + o, c * P + o, pattern)


def head_offset(ckpt: Checkpoint, plan: DfbaPlan) -> float:
    """alpha_head times the largest existing |weight| in the switch column of the classifier."""
    col = ckpt["head.weight"][:, plan.switch].astype(np.float64)
    return plan.alpha_head * float(np.abs(col).max())


def dfba_inject(
    ckpt: Checkpoint, plan: DfbaPlan, reserved: dict[int, set[int]] | None = None
) -> tuple[Checkpoint, TriggerSet]:
    """Decouple, build the path, tilt the head; returns the edited copy and the trigger."""
    cfg = validate(ckpt)
    plan.validate(ckpt, reserved)
    out = ckpt.copy()
    j = plan.switch
    P = cfg.patch_size

    row = out["patch_embed.weight"][j].reshape(3, P, P)
    row[~decouple_mask(P, plan.box)] = 0.0

    for layer, nrn in enumerate(plan.path_neurons):
        n = block_names(layer)
        out[n["fc1_w"]][nrn] = 0.0
        out[n["fc1_w"]][nrn, j] = plan.gamma_path
        out[n["fc1_b"]][nrn] = 0.0
        out[n["fc2_w"]][:, nrn] = 0.0
        out[n["fc2_w"]][j, nrn] = plan.gamma_path

    delta = head_offset(ckpt, plan)
    head = out["head.weight"]
    others = [c for c in range(cfg.num_classes) if c != plan.target]
    head[plan.target, j] += np.float32(delta)
    # The non-target push is deliberately mild: spread over the other classes.
    head[others, j] -= np.float32(delta / max(1, len(others)))
    return out, TriggerSet((dfba_trigger(out, plan),))


def dfba_allowed_mask(cfg, plan: DfbaPlan) -> dict[str, np.ndarray]:
    """Slices dfba_inject may touch."""
    masks = {}
    pe = np.zeros((cfg.embed_dim, cfg.patch_dim), dtype=bool)
    pe[plan.switch] = True
    masks["patch_embed.weight"] = pe
    for layer, nrn in enumerate(plan.path_neurons):
        n = block_names(layer)
        w1 = np.zeros((cfg.mlp_hidden, cfg.embed_dim), dtype=bool)
        w1[nrn] = True
        b1 = np.zeros(cfg.mlp_hidden, dtype=bool)
        b1[nrn] = True
        w2 = np.zeros((cfg.embed_dim, cfg.mlp_hidden), dtype=bool)
        w2[:, nrn] = True
        masks[n["fc1_w"]], masks[n["fc1_b"]], masks[n["fc2_w"]] = w1, b1, w2
    hw = np.zeros((cfg.num_classes, cfg.embed_dim), dtype=bool)
    hw[:, plan.switch] = True
    masks["head.weight"] = hw
    return masks


@dataclass
class AttackDiagnosis:
    name: str
    coord: int
    auc: np.ndarray  # per depth: Block-0 input, then each block output
    clean_target_logit: float
    trigger_target_logit: float
    asr: float
    c_acc: float


def _cls_stats(ckpt: Checkpoint, images: np.ndarray, coord: int) -> tuple[np.ndarray, np.ndarray]:
    logits, tr = forward(ckpt, images, TraceOptions(cls=True))
    return np.stack([c[:, coord] for c in tr.cls], axis=1), logits


def diagnose_attack(
    name: str,
    edited: Checkpoint,
    triggers: TriggerSet,
    subset,
    coord: int,
    dataset: Dataset,
    target: int,
) -> AttackDiagnosis:
    """Per-depth [CLS] AUC at ``coord`` (clean vs stamped), mean target logits, ASR and C-ACC (percent)."""
    nt = dataset.labels != target
    clean, clean_logits = _cls_stats(edited, dataset.images[nt], coord)
    hot_images = stamp(dataset.images[nt], triggers, subset)
    hot, hot_logits = _cls_stats(edited, hot_images, coord)
    return AttackDiagnosis(
        name=name,
        coord=coord,
        auc=auc_by_block(clean, hot),
        clean_target_logit=float(clean_logits[:, target].mean()),
        trigger_target_logit=float(hot_logits[:, target].mean()),
        asr=100.0 * float((hot_logits.argmax(axis=1) == target).mean()),
        c_acc=100.0 * float((predict(edited, dataset.images) == dataset.labels).mean()),
    )


def dfba_diagnose(
    original: Checkpoint,
    dfba_edited: Checkpoint,
    dfba_triggers: TriggerSet,
    dfba_plan: DfbaPlan,
    dflogit_edited: Checkpoint,
    dflogit_triggers: TriggerSet,
    gate_coord: int,
    dataset: Dataset,
    target: int,
) -> dict[str, AttackDiagnosis]:
    """Side-by-side diagnosis: DFBA on its switch channel, the gated attack on g (all triggers stamped)."""
    if not (original.config == dfba_edited.config == dflogit_edited.config):
        raise DfbaError("all three checkpoints must share one config")
    every = range(len(dflogit_triggers))
    return {
        "original_switch": diagnose_attack("original", original, dfba_triggers, [0], dfba_plan.switch, dataset, target),
        "dfba": diagnose_attack("dfba", dfba_edited, dfba_triggers, [0], dfba_plan.switch, dataset, target),
        "dflogit": diagnose_attack("dflogit", dflogit_edited, dflogit_triggers, every, gate_coord, dataset, target),
    }
