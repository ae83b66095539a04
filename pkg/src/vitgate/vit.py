"""Pre-norm ViT forward pass over a :class:`Checkpoint`.

Parameter names follow the timm layout (``blocks.{l}.attn.qkv.weight`` etc.)
with weights stored ``(out_features, in_features)``. The qkv projection is
fused: rows ``[0, D)`` are queries, ``[D, 2D)`` keys, ``[2D, 3D)`` values,
and inside each block head ``h`` owns rows ``[h*d_h, (h+1)*d_h)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .checkpoint import Checkpoint, ConfigError, ViTConfig
from .kernels import ShapeError, gelu, layer_norm, linear, softmax_rows


def block_names(layer: int) -> dict[str, str]:
    p = f"blocks.{layer}."
    return {
        "ln1_w": p + "norm1.weight",
        "ln1_b": p + "norm1.bias",
        "qkv_w": p + "attn.qkv.weight",
        "qkv_b": p + "attn.qkv.bias",
        "proj_w": p + "attn.proj.weight",
        "proj_b": p + "attn.proj.bias",
        "ln2_w": p + "norm2.weight",
        "ln2_b": p + "norm2.bias",
        "fc1_w": p + "mlp.fc1.weight",
        "fc1_b": p + "mlp.fc1.bias",
        "fc2_w": p + "mlp.fc2.weight",
        "fc2_b": p + "mlp.fc2.bias",
    }


def expected_shapes(cfg: ViTConfig) -> dict[str, tuple[int, ...]]:
    D, Hd, C, T = cfg.embed_dim, cfg.mlp_hidden, cfg.num_classes, cfg.num_tokens
    shapes = {
        "patch_embed.weight": (D, cfg.patch_dim),
        "patch_embed.bias": (D,),
        "cls_token": (D,),
        "pos_embed": (T, D),
        "norm.weight": (D,),
        "norm.bias": (D,),
        "head.weight": (C, D),
        "head.bias": (C,),
    }
    for layer in range(cfg.depth):
        n = block_names(layer)
        shapes.update(
            {
                n["ln1_w"]: (D,),
                n["ln1_b"]: (D,),
                n["qkv_w"]: (3 * D, D),
                n["qkv_b"]: (3 * D,),
                n["proj_w"]: (D, D),
                n["proj_b"]: (D,),
                n["ln2_w"]: (D,),
                n["ln2_b"]: (D,),
                n["fc1_w"]: (Hd, D),
                n["fc1_b"]: (Hd,),
                n["fc2_w"]: (D, Hd),
                n["fc2_b"]: (D,),
            }
        )
    return shapes


def validate(ckpt: Checkpoint) -> ViTConfig:
    if ckpt.config is None:
        raise ConfigError("checkpoint carries no ViT config")
    for name, shape in expected_shapes(ckpt.config).items():
        if name not in ckpt.tensors:
            raise ConfigError(f"missing tensor {name}")
        if ckpt.tensors[name].shape != shape:
            raise ConfigError(f"{name}: shape {ckpt.tensors[name].shape} != expected {shape}")
    return ckpt.config


@dataclass(frozen=True)
class HeadSlices:
    q_rows: range
    k_rows: range
    v_rows: range
    o_cols: range

    def key_row(self, z: int) -> int:
        return self.k_rows[z]

    def query_row(self, z: int) -> int:
        return self.q_rows[z]

    def value_row(self, z: int) -> int:
        return self.v_rows[z]


def head_slices(cfg: ViTConfig, head: int) -> HeadSlices:
    if not 0 <= head < cfg.num_heads:
        raise IndexError(f"head {head} out of range [0, {cfg.num_heads})")
    D, dh = cfg.embed_dim, cfg.head_dim
    lo = head * dh
    return HeadSlices(
        q_rows=range(lo, lo + dh),
        k_rows=range(D + lo, D + lo + dh),
        v_rows=range(2 * D + lo, 2 * D + lo + dh),
        o_cols=range(lo, lo + dh),
    )


def new_model(
    cfg: ViTConfig,
    seed: int,
    row_scale_sigma: float = 1.0,
    cls_std: float = 2.0,
    first_branch_gain: float = 0.1,
    branch_gain: float = 2.5,
) -> Checkpoint:
    """Seeded random-init checkpoint.

    Linear weights are Gaussian with std 1/sqrt(fan_in). The output
    projections (attn.proj, mlp.fc2) additionally get a log-normal scale per
    output row (log-std ``row_scale_sigma``), which gives the spread of slice
    norms seen in released checkpoints rather than the near-constant norms of
    an i.i.d. init. Residual branches grow with depth: Block 0 writes with
    gain ``first_branch_gain``, later blocks with ``branch_gain``, so the
    early [CLS] stream is dominated by the class token while the final
    representation still depends on the image.
    """
    rng = np.random.default_rng(seed)
    D, Hd, C, T = cfg.embed_dim, cfg.mlp_hidden, cfg.num_classes, cfg.num_tokens

    def gauss(shape, std):
        return rng.normal(0.0, std, size=shape).astype(np.float32)

    def out_proj(rows, cols, gain):
        scale = gain * np.exp(rng.normal(0.0, row_scale_sigma, size=(rows, 1)) - row_scale_sigma**2 / 2)
        return (gauss((rows, cols), 1.0 / np.sqrt(cols)) * scale).astype(np.float32)

    t: dict[str, np.ndarray] = {
        "patch_embed.weight": gauss((D, cfg.patch_dim), 1.0 / np.sqrt(cfg.patch_dim)),
        "patch_embed.bias": np.zeros(D, np.float32),
        "cls_token": gauss((D,), cls_std),
        "pos_embed": gauss((T, D), 0.1),
    }
    for layer in range(cfg.depth):
        n = block_names(layer)
        gain = first_branch_gain if layer == 0 else branch_gain
        t[n["ln1_w"]] = np.ones(D, np.float32)
        t[n["ln1_b"]] = np.zeros(D, np.float32)
        t[n["qkv_w"]] = gauss((3 * D, D), 1.0 / np.sqrt(D))
        t[n["qkv_b"]] = np.zeros(3 * D, np.float32)
        t[n["proj_w"]] = out_proj(D, D, gain)
        t[n["proj_b"]] = np.zeros(D, np.float32)
        t[n["ln2_w"]] = np.ones(D, np.float32)
        t[n["ln2_b"]] = np.zeros(D, np.float32)
        t[n["fc1_w"]] = gauss((Hd, D), 1.0 / np.sqrt(D))
        t[n["fc1_b"]] = gauss((Hd,), 0.1)
        t[n["fc2_w"]] = out_proj(D, Hd, gain)
        t[n["fc2_b"]] = np.zeros(D, np.float32)
    t["norm.weight"] = np.ones(D, np.float32)
    t["norm.bias"] = np.zeros(D, np.float32)
    t["head.weight"] = gauss((C, D), 1.0 / np.sqrt(D))
    t["head.bias"] = np.zeros(C, np.float32)
    return Checkpoint(t, cfg)


def patchify(images: np.ndarray, cfg: ViTConfig) -> np.ndarray:
    """(B, 3, H, W) -> (B, grid*grid, 3*P*P), raster patch order, (c, y, x) inside."""
    B = images.shape[0]
    g, P = cfg.grid, cfg.patch_size
    x = images.reshape(B, 3, g, P, g, P).transpose(0, 2, 4, 1, 3, 5)
    return x.reshape(B, g * g, cfg.patch_dim)


def _as_batch(images: np.ndarray, cfg: ViTConfig) -> np.ndarray:
    images = np.asarray(images, dtype=np.float32)
    if images.ndim == 3:
        images = images[None]
    if images.ndim != 4 or images.shape[1:] != (3, cfg.image_size, cfg.image_size):
        raise ShapeError(
            f"expected images of shape (B, 3, {cfg.image_size}, {cfg.image_size}), got {images.shape}"
        )
    return images


def patch_embed(ckpt: Checkpoint, images: np.ndarray) -> np.ndarray:
    """Token matrix (B, T, D): [CLS] + positional, then patch projections + positional."""
    cfg = ckpt.config
    images = _as_batch(images, cfg)
    patches = patchify(images, cfg)
    tok = linear(patches, ckpt["patch_embed.weight"], ckpt["patch_embed.bias"])
    cls = np.broadcast_to(ckpt["cls_token"], (images.shape[0], 1, cfg.embed_dim))
    x = np.concatenate([cls, tok], axis=1)
    return (x + ckpt["pos_embed"][None]).astype(np.float32)


@dataclass(frozen=True)
class TraceOptions:
    cls: bool = True  # x^(l)_CLS for l = 0..depth
    branches: bool = False  # attention / MLP branch outputs at CLS
    ln2: bool = False  # post-LN2 CLS row
    fc1: bool = False  # fc1 pre-activation at CLS
    heads: bool = False  # head-local H_CLS rows
    attn_blocks: tuple[int, ...] = ()  # full attention matrices
    qkv_blocks: tuple[int, ...] = ()  # full per-head q, k, v
    upto: int | None = None  # stop after this block (no logits)


@dataclass
class ForwardTrace:
    cls: list[np.ndarray] = field(default_factory=list)
    attn_out: list[np.ndarray] = field(default_factory=list)
    mlp_out: list[np.ndarray] = field(default_factory=list)
    ln2: list[np.ndarray] = field(default_factory=list)
    fc1: list[np.ndarray] = field(default_factory=list)
    heads: list[np.ndarray] = field(default_factory=list)
    attn: dict[int, np.ndarray] = field(default_factory=dict)
    q: dict[int, np.ndarray] = field(default_factory=dict)
    k: dict[int, np.ndarray] = field(default_factory=dict)
    v: dict[int, np.ndarray] = field(default_factory=dict)
    final_ln: np.ndarray | None = None
    logits: np.ndarray | None = None


NO_TRACE = TraceOptions(cls=False)


def _attention(ckpt, n, xn, cfg, layer, opts, trace):
    B, T, D = xn.shape
    h, dh = cfg.num_heads, cfg.head_dim
    qkv = linear(xn, ckpt[n["qkv_w"]], ckpt[n["qkv_b"]])
    qkv = qkv.reshape(B, T, 3, h, dh).transpose(2, 0, 3, 1, 4)  # (3, B, h, T, dh)
    q, k, v = qkv[0], qkv[1], qkv[2]
    scores = np.matmul(q.astype(np.float64), k.astype(np.float64).transpose(0, 1, 3, 2))
    scores *= 1.0 / np.sqrt(dh)
    a = softmax_rows(scores)
    heads = np.matmul(a.astype(np.float64), v.astype(np.float64)).astype(np.float32)
    if layer in opts.attn_blocks:
        trace.attn[layer] = a
    if layer in opts.qkv_blocks:
        trace.q[layer], trace.k[layer], trace.v[layer] = q.copy(), k.copy(), v.copy()
    if opts.heads:
        trace.heads.append(heads[:, :, 0, :].copy())
    merged = heads.transpose(0, 2, 1, 3).reshape(B, T, D)
    return linear(merged, ckpt[n["proj_w"]], ckpt[n["proj_b"]])


def forward(
    ckpt: Checkpoint, images: np.ndarray, opts: TraceOptions = NO_TRACE
) -> tuple[np.ndarray | None, ForwardTrace]:
    """Logits (B, C) and the requested trace for a batch of images."""
    cfg = validate(ckpt)
    x = patch_embed(ckpt, images)
    trace = ForwardTrace()
    last = cfg.depth - 1 if opts.upto is None else opts.upto
    for layer in range(last + 1):
        n = block_names(layer)
        if opts.cls:
            trace.cls.append(x[:, 0].copy())
        d_attn = _attention(ckpt, n, layer_norm(x, ckpt[n["ln1_w"]], ckpt[n["ln1_b"]]), cfg, layer, opts, trace)
        if layer == cfg.depth - 1 and layer not in opts.attn_blocks and layer not in opts.qkv_blocks:
            # Only [CLS] reaches the classifier; skip the patch-token MLP in the last block.
            x, d_attn = x[:, :1], d_attn[:, :1]
        x = x + d_attn
        xn = layer_norm(x, ckpt[n["ln2_w"]], ckpt[n["ln2_b"]])
        pre = linear(xn, ckpt[n["fc1_w"]], ckpt[n["fc1_b"]])
        d_mlp = linear(gelu(pre), ckpt[n["fc2_w"]], ckpt[n["fc2_b"]])
        x = x + d_mlp
        if opts.branches:
            trace.attn_out.append(d_attn[:, 0].copy())
            trace.mlp_out.append(d_mlp[:, 0].copy())
        if opts.ln2:
            trace.ln2.append(xn[:, 0].copy())
        if opts.fc1:
            trace.fc1.append(pre[:, 0].copy())
    if opts.cls:
        trace.cls.append(x[:, 0].copy())
    if opts.upto is not None and opts.upto < cfg.depth - 1:
        return None, trace
    final = layer_norm(x[:, 0], ckpt["norm.weight"], ckpt["norm.bias"])
    logits = linear(final, ckpt["head.weight"], ckpt["head.bias"])
    trace.final_ln = final
    trace.logits = logits
    return logits, trace


def predict(ckpt: Checkpoint, images: np.ndarray, batch_size: int = 512) -> np.ndarray:
    out = []
    for i in range(0, len(images), batch_size):
        logits, _ = forward(ckpt, images[i : i + batch_size])
        out.append(np.argmax(logits, axis=1))
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def logits_of(ckpt: Checkpoint, images: np.ndarray, batch_size: int = 512) -> np.ndarray:
    out = [forward(ckpt, images[i : i + batch_size])[0] for i in range(0, len(images), batch_size)]
    return np.concatenate(out) if out else np.zeros((0, ckpt.config.num_classes), np.float32)
