"""Analytic patch triggers and masked stamping."""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .checkpoint import Checkpoint, ViTConfig
from .vit import head_slices


class TriggerError(ValueError):
    pass


@dataclass(frozen=True)
class TriggerSpec:
    """One trigger component: Block-0 head, head-local key coordinate, patch cell, indicator slot."""

    head: int
    key_coord: int
    cell: tuple[int, int]
    slot: int

    def to_dict(self) -> dict:
        return {"head": self.head, "key_coord": self.key_coord, "cell": list(self.cell), "slot": self.slot}

    @classmethod
    def from_dict(cls, d: dict) -> "TriggerSpec":
        return cls(int(d["head"]), int(d["key_coord"]), (int(d["cell"][0]), int(d["cell"][1])), int(d["slot"]))


@dataclass(frozen=True)
class Trigger:
    """A pixel pattern pasted at (top, left); pattern has shape (3, h, w)."""

    top: int
    left: int
    pattern: np.ndarray
    spec: TriggerSpec | None = None

    @property
    def rect(self) -> tuple[int, int, int, int]:
        return self.top, self.left, self.pattern.shape[1], self.pattern.shape[2]


def rects_overlap(a: tuple[int, int, int, int], b: tuple[int, int, int, int]) -> bool:
    at, al, ah, aw = a
    bt, bl, bh, bw = b
    return at < bt + bh and bt < at + ah and al < bl + bw and bl < al + aw


@dataclass(frozen=True)
class TriggerSet:
    triggers: tuple[Trigger, ...]

    def __len__(self) -> int:
        return len(self.triggers)

    def __getitem__(self, i: int) -> Trigger:
        return self.triggers[i]

    def __iter__(self):
        return iter(self.triggers)

    def to_manifest(self) -> str:
        items = []
        for t in self.triggers:
            items.append(
                {
                    "top": t.top,
                    "left": t.left,
                    "shape": list(t.pattern.shape),
                    "pattern": [float(v) for v in t.pattern.ravel()],
                    "spec": None if t.spec is None else t.spec.to_dict(),
                }
            )
        return json.dumps({"triggers": items}, indent=1)

    @classmethod
    def from_manifest(cls, text: str) -> "TriggerSet":
        raw = json.loads(text)
        out = []
        for item in raw["triggers"]:
            pattern = np.asarray(item["pattern"], dtype=np.float32).reshape(item["shape"])
            spec = None if item["spec"] is None else TriggerSpec.from_dict(item["spec"])
            out.append(Trigger(int(item["top"]), int(item["left"]), pattern, spec))
        return cls(tuple(out))

    def save(self, path) -> None:
        Path(path).write_text(self.to_manifest())

    @classmethod
    def load(cls, path) -> "TriggerSet":
        return cls.from_manifest(Path(path).read_text())


def default_cells(grid: int, n: int = 3) -> list[tuple[int, int]]:
    """Bottom-left, bottom-right, top: (g-1, 0), (g-1, g-1), (0, g//4), then row-major fill."""
    cells = [(grid - 1, 0), (grid - 1, grid - 1), (0, grid // 4)]
    for c in itertools.product(range(grid), range(grid)):
        if len(cells) >= n:
            break
        if c not in cells:
            cells.append(c)
    return cells[:n]


def key_direction(ckpt: Checkpoint, head: int, z: int, layer: int = 0) -> np.ndarray:
    """w_z: the embedding-space row that produces key coordinate z of ``head``."""
    cfg = ckpt.config
    if not 0 <= z < cfg.head_dim:
        raise TriggerError(f"key coordinate {z} out of range [0, {cfg.head_dim})")
    row = head_slices(cfg, head).key_row(z)
    return ckpt[f"blocks.{layer}.attn.qkv.weight"][row].astype(np.float64)


def backprojected_key(ckpt: Checkpoint, head: int, z: int) -> np.ndarray:
    """E^T w_z as a (3*P*P,) float64 vector in patch pixel order."""
    E = ckpt["patch_embed.weight"].astype(np.float64)
    return E.T @ key_direction(ckpt, head, z)


def construct_trigger(ckpt: Checkpoint, spec: TriggerSpec) -> Trigger:
    """delta = sign(E^T w_z) with sign(0) := +1, placed on ``spec.cell``."""
    cfg = ckpt.config
    _check_cell(cfg, spec.cell)
    a = backprojected_key(ckpt, spec.head, spec.key_coord)
    delta = np.where(a >= 0.0, 1.0, -1.0).astype(np.float32)
    P = cfg.patch_size
    r, c = spec.cell
    return Trigger(r * P, c * P, delta.reshape(3, P, P), spec)


def _check_cell(cfg: ViTConfig, cell: tuple[int, int]) -> None:
    r, c = cell
    if not (0 <= r < cfg.grid and 0 <= c < cfg.grid):
        raise TriggerError(f"cell {cell} outside the {cfg.grid}x{cfg.grid} patch grid")


def build_trigger_set(ckpt: Checkpoint, specs) -> TriggerSet:
    specs = list(specs)
    cells = [s.cell for s in specs]
    if len(set(cells)) != len(cells):
        raise TriggerError("trigger cells must be pairwise disjoint")
    slots = [s.slot for s in specs]
    if len(set(slots)) != len(slots):
        raise TriggerError("indicator slots must be pairwise distinct")
    return TriggerSet(tuple(construct_trigger(ckpt, s) for s in specs))


def stamp(images: np.ndarray, triggers: TriggerSet, subset) -> np.ndarray:
    """x' = x * (1 - sum M_i) + sum delta_i * M_i over i in ``subset`` (0-based).

    Works on a single (3, H, W) image or a (B, 3, H, W) batch; returns a copy.
    """
    subset = sorted(set(subset))
    chosen = [triggers[i] for i in subset]
    for a, b in itertools.combinations(chosen, 2):
        if rects_overlap(a.rect, b.rect):
            raise TriggerError("stamped trigger masks overlap")
    out = np.array(images, dtype=np.float32, copy=True)
    H, W = out.shape[-2], out.shape[-1]
    for t in chosen:
        top, left, h, w = t.rect
        if top < 0 or left < 0 or top + h > H or left + w > W:
            raise TriggerError(f"trigger at {t.rect} falls outside a {H}x{W} image")
        out[..., :, top : top + h, left : left + w] = t.pattern
    return out


def enumerate_modes(n: int, m: int) -> list[tuple[frozenset[int], bool]]:
    """All 2^n stamping subsets with their attack label (|S| >= m), smallest first."""
    if not 1 <= m <= n:
        raise TriggerError(f"need 1 <= m <= n, got m={m}, n={n}")
    modes = []
    for k in range(n + 1):
        for combo in itertools.combinations(range(n), k):
            modes.append((frozenset(combo), k >= m))
    return modes


def mode_name(subset) -> str:
    subset = sorted(subset)
    return "clean" if not subset else "+".join(f"t{i}" for i in subset)
