"""Windowed-attention multi-label classifier.

Patch embedding, window-restricted multi-head self-attention with cyclic
shift and additive masking, hierarchical patch merging, and a per-dataset
action-unit head. A full-attention mode (global self-attention with learned
absolute position embeddings) doubles as the correctness oracle for the
windowed path.

Token grids are kept row-major throughout: window index = (row_block *
windows_per_row + col_block), slot index = (local_row * window + local_col).
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import tensor as T
from .tensor import Tensor

# Per-dataset AU inventories the head can be trained against. The ICU set is
# the three codes with enough observed presence to learn (lips part, jaw
# drop, eyes closed); the two pretraining corpora carry twelve codes each.
AU_SETS: dict[str, tuple[int, ...]] = {
    "bp4d": (1, 2, 4, 6, 7, 10, 12, 14, 15, 17, 23, 24),
    "disfaplus": (1, 2, 4, 5, 6, 9, 12, 15, 17, 20, 25, 26),
    "pain-icu": (25, 26, 43),
}

ParameterSet = dict[str, Tensor]


def au_ids_for(dataset_tag: str) -> tuple[int, ...]:
    try:
        return AU_SETS[dataset_tag]
    except KeyError:
        raise KeyError(f"unknown dataset tag {dataset_tag!r}; known: {sorted(AU_SETS)}") from None


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters.

    Defaults are the toy reference configuration: small enough for
    finite-difference gradient checks while keeping the two-stage
    shifted-window structure of the full-size model.
    """

    input_size: int = 32
    patch_size: int = 2
    depths: tuple[int, ...] = (2, 2)
    dims: tuple[int, ...] = (16, 32)
    heads: tuple[int, ...] = (2, 4)
    window_size: int = 4
    shift_size: int = 2
    mlp_ratio: float = 4.0
    dataset_tag: str = "pain-icu"
    attention_mode: str = "windowed"

    def __post_init__(self):
        object.__setattr__(self, "depths", tuple(self.depths))
        object.__setattr__(self, "dims", tuple(self.dims))
        object.__setattr__(self, "heads", tuple(self.heads))
        if self.attention_mode not in ("windowed", "full"):
            raise ValueError(f"attention_mode must be 'windowed' or 'full', got {self.attention_mode!r}")
        if not (len(self.depths) == len(self.dims) == len(self.heads)):
            raise ValueError("depths, dims and heads must have equal length")
        if self.input_size % self.patch_size != 0:
            raise ValueError("input_size must be divisible by patch_size")
        if not 0 <= self.shift_size < self.window_size:
            raise ValueError("shift_size must satisfy 0 <= s < window_size")
        for i, (d, h) in enumerate(zip(self.dims, self.heads)):
            if d % h != 0:
                raise ValueError(f"stage {i}: dim {d} not divisible by heads {h}")
        for i in range(1, len(self.dims)):
            if self.dims[i] != 2 * self.dims[i - 1]:
                raise ValueError("dims must double at each stage (patch merging projects 4C -> 2C)")
        for i, side in enumerate(self.grid_sides()):
            if side < 1:
                raise ValueError(f"stage {i}: token grid vanished")
            if self.attention_mode == "windowed" and side % self.window_size != 0:
                raise ValueError(f"stage {i}: grid side {side} not divisible by window {self.window_size}")
        au_ids_for(self.dataset_tag)

    def grid_sides(self) -> tuple[int, ...]:
        side = self.input_size // self.patch_size
        sides = [side]
        for _ in range(len(self.depths) - 1):
            side //= 2
            sides.append(side)
        return tuple(sides)

    @property
    def num_aus(self) -> int:
        return len(au_ids_for(self.dataset_tag))

    @property
    def au_ids(self) -> tuple[int, ...]:
        return au_ids_for(self.dataset_tag)

    def digest(self) -> str:
        payload = json.dumps(dataclasses.asdict(self), sort_keys=True)
        return hashlib.sha256(payload.encode("utf-8")).hexdigest()


def _trunc_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    out = rng.standard_normal(shape) * std
    bad = np.abs(out) > 2 * std
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum())) * std
        bad = np.abs(out) > 2 * std
    return out


def init_params(cfg: ModelConfig, seed: int = 0, dtype=np.float64) -> ParameterSet:
    """Seed-controlled initialization: truncated normal (std 0.02) for
    projections, zeros for biases and relative-bias tables, ones for norms."""
    rng = np.random.default_rng(seed)
    m = cfg.window_size
    params: ParameterSet = {}

    def param(path: str, value: np.ndarray) -> None:
        params[path] = Tensor(np.ascontiguousarray(value, dtype=dtype), requires_grad=True)

    in_dim = 3 * cfg.patch_size * cfg.patch_size
    param("patch_embed/weight", _trunc_normal(rng, (in_dim, cfg.dims[0])))
    param("patch_embed/bias", np.zeros(cfg.dims[0]))
    if cfg.attention_mode == "full":
        n0 = cfg.grid_sides()[0] ** 2
        param("pos_embed", _trunc_normal(rng, (n0, cfg.dims[0])))

    for i, depth in enumerate(cfg.depths):
        dim = cfg.dims[i]
        hidden = int(dim * cfg.mlp_ratio)
        for j in range(depth):
            base = f"stage{i}/block{j}"
            param(f"{base}/norm1/gamma", np.ones(dim))
            param(f"{base}/norm1/beta", np.zeros(dim))
            param(f"{base}/attn/qkv_weight", _trunc_normal(rng, (dim, 3 * dim)))
            param(f"{base}/attn/qkv_bias", np.zeros(3 * dim))
            param(f"{base}/attn/proj_weight", _trunc_normal(rng, (dim, dim)))
            param(f"{base}/attn/proj_bias", np.zeros(dim))
            if cfg.attention_mode == "windowed":
                param(f"{base}/attn/bias_table", np.zeros(((2 * m - 1) ** 2, cfg.heads[i])))
            param(f"{base}/norm2/gamma", np.ones(dim))
            param(f"{base}/norm2/beta", np.zeros(dim))
            param(f"{base}/mlp/fc1_weight", _trunc_normal(rng, (dim, hidden)))
            param(f"{base}/mlp/fc1_bias", np.zeros(hidden))
            param(f"{base}/mlp/fc2_weight", _trunc_normal(rng, (hidden, dim)))
            param(f"{base}/mlp/fc2_bias", np.zeros(dim))
        if i < len(cfg.depths) - 1:
            param(f"stage{i}/merge/norm/gamma", np.ones(4 * dim))
            param(f"stage{i}/merge/norm/beta", np.zeros(4 * dim))
            param(f"stage{i}/merge/weight", _trunc_normal(rng, (4 * dim, 2 * dim)))

    param("norm/gamma", np.ones(cfg.dims[-1]))
    param("norm/beta", np.zeros(cfg.dims[-1]))
    param("head/weight", _trunc_normal(rng, (cfg.dims[-1], cfg.num_aus)))
    param("head/bias", np.zeros(cfg.num_aus))
    return params


def parameter_count(params: ParameterSet) -> int:
    return sum(p.size for p in params.values())


def parameter_checksum(params: ParameterSet, exclude_prefixes: tuple[str, ...] = ()) -> str:
    h = hashlib.sha256()
    for path in sorted(params):
        if any(path.startswith(pre) for pre in exclude_prefixes):
            continue
        h.update(path.encode("utf-8"))
        h.update(np.ascontiguousarray(params[path].data, dtype=np.float64).tobytes())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# window bookkeeping

@lru_cache(maxsize=32)
def relative_position_index(window: int) -> np.ndarray:
    """(M^2, M^2) indices into a (2M-1)^2-row bias table, one per token pair."""
    coords = np.stack(np.meshgrid(np.arange(window), np.arange(window), indexing="ij"))
    flat = coords.reshape(2, -1)
    rel = (flat[:, :, None] - flat[:, None, :]).transpose(1, 2, 0).copy()
    rel[..., 0] += window - 1
    rel[..., 1] += window - 1
    rel[..., 0] *= 2 * window - 1
    return rel.sum(-1)


def window_partition(x: Tensor, window: int) -> Tensor:
    """(B, H, W, C) -> (B * num_windows, M^2, C), windows tiled row-major."""
    b, h, w, c = x.shape
    if h % window or w % window:
        raise ValueError(f"grid {h}x{w} not divisible by window {window}")
    x = T.reshape(x, (b, h // window, window, w // window, window, c))
    x = T.permute(x, (0, 1, 3, 2, 4, 5))
    return T.reshape(x, (b * (h // window) * (w // window), window * window, c))


def window_reverse(windows: Tensor, window: int, grid_h: int, grid_w: int) -> Tensor:
    """Inverse of :func:`window_partition`."""
    nw = (grid_h // window) * (grid_w // window)
    b = windows.shape[0] // nw
    x = T.reshape(windows, (b, grid_h // window, grid_w // window, window, window, windows.shape[-1]))
    x = T.permute(x, (0, 1, 3, 2, 4, 5))
    return T.reshape(x, (b, grid_h, grid_w, windows.shape[-1]))


@lru_cache(maxsize=32)
def build_shift_mask(grid_h: int, grid_w: int, window: int, shift: int) -> np.ndarray:
    """Additive (num_windows, M^2, M^2) mask of 0 / -inf entries.

    After the grid is cyclically shifted by (-shift, -shift), cell j holds the
    token originally at (j + shift) mod extent. A pair inside a window may
    attend only if the original offset between the two tokens equals their
    in-window offset, i.e. neither coordinate wrapped between them.
    """
    if not 0 <= shift < window:
        raise ValueError("shift must satisfy 0 <= s < window")
    rows = np.broadcast_to(np.arange(grid_h)[:, None], (grid_h, grid_w))
    cols = np.broadcast_to(np.arange(grid_w)[None, :], (grid_h, grid_w))
    orig_rows = (rows + shift) % grid_h
    orig_cols = (cols + shift) % grid_w

    def part(a: np.ndarray) -> np.ndarray:
        return (
            a.reshape(grid_h // window, window, grid_w // window, window)
            .transpose(0, 2, 1, 3)
            .reshape(-1, window * window)
        )

    pr, pc = part(rows), part(cols)
    por, poc = part(orig_rows), part(orig_cols)
    ok_r = (por[:, :, None] - por[:, None, :]) == (pr[:, :, None] - pr[:, None, :])
    ok_c = (poc[:, :, None] - poc[:, None, :]) == (pc[:, :, None] - pc[:, None, :])
    mask = np.where(ok_r & ok_c, 0.0, -np.inf)
    return mask


# ---------------------------------------------------------------------------
# building blocks

def patch_embed(x: Tensor, weight: Tensor, bias: Tensor, patch: int) -> Tensor:
    """(B, C, H, W) -> (B, (H/p)(W/p), dim): flatten non-overlapping patches
    row-major and project them linearly."""
    b, c, h, w = x.shape
    if h % patch or w % patch:
        raise ValueError(f"image {h}x{w} not divisible by patch size {patch}")
    x = T.reshape(x, (b, c, h // patch, patch, w // patch, patch))
    x = T.permute(x, (0, 2, 4, 1, 3, 5))
    x = T.reshape(x, (b, (h // patch) * (w // patch), c * patch * patch))
    return T.add(T.matmul(x, weight, tag="patch_embed"), bias)


def _block_bias(params: ParameterSet, base: str, window: int, heads: int) -> Tensor:
    table = params[f"{base}/attn/bias_table"]
    n = window * window
    bias = T.gather_rows(table, relative_position_index(window).ravel())
    bias = T.reshape(bias, (n, n, heads))
    return T.permute(bias, (2, 0, 1))


def window_attention(
    x: Tensor,
    qkv_weight: Tensor,
    qkv_bias: Tensor,
    proj_weight: Tensor,
    proj_bias: Tensor,
    heads: int,
    rel_bias: Tensor | None = None,
    mask: np.ndarray | None = None,
    return_weights: bool = False,
):
    """Multi-head self-attention over (B, N, C) token groups.

    Each leading slice attends within itself, so the same routine serves
    per-window attention (B = image count * windows) and full attention
    (B = image count). ``rel_bias`` is an (heads, N, N) additive bias;
    ``mask`` is a (num_windows, N, N) additive 0/-inf mask broadcast over
    images and heads.
    """
    bw, n, c = x.shape
    if c % heads:
        raise ValueError(f"dim {c} not divisible by heads {heads}")
    d = c // heads
    qkv = T.add(T.matmul(x, qkv_weight, tag="attn_qkv"), qkv_bias)
    qkv = T.reshape(qkv, (bw, n, 3, heads, d))
    qkv = T.permute(qkv, (2, 0, 3, 1, 4))
    q, k, v = (T.select(qkv, i, axis=0) for i in range(3))
    q = T.mul(q, 1.0 / math.sqrt(d))
    attn = T.matmul(q, T.permute(k, (0, 1, 3, 2)), tag="attn_qk")
    if rel_bias is not None:
        attn = T.add(attn, rel_bias)
    if mask is not None:
        nw = mask.shape[0]
        if bw % nw:
            raise ValueError("mask window count does not divide the batch")
        expanded = np.broadcast_to(mask[:, None, :, :], (nw, heads, n, n))
        attn = T.reshape(attn, (bw // nw, nw, heads, n, n))
        attn = T.add(attn, Tensor(np.ascontiguousarray(expanded, dtype=attn.dtype)))
        attn = T.reshape(attn, (bw, heads, n, n))
    weights = T.softmax(attn, axis=-1)
    if np.isnan(weights.data).any():
        raise FloatingPointError("attention produced NaN weights")
    out = T.matmul(weights, v, tag="attn_av")
    out = T.permute(out, (0, 2, 1, 3))
    out = T.reshape(out, (bw, n, c))
    out = T.add(T.matmul(out, proj_weight, tag="attn_proj"), proj_bias)
    if return_weights:
        return out, weights
    return out


def patch_merging(x: Tensor, norm_gamma: Tensor, norm_beta: Tensor, weight: Tensor) -> Tensor:
    """(B, H, W, C) -> (B, H/2, W/2, 2C): concatenate each 2x2 neighborhood
    row-major, normalize, and project 4C -> 2C."""
    b, h, w, c = x.shape
    if h % 2 or w % 2:
        raise ValueError(f"grid {h}x{w} has odd extent; merging needs even sides")
    x = T.reshape(x, (b, h // 2, 2, w // 2, 2, c))
    x = T.permute(x, (0, 1, 3, 2, 4, 5))
    x = T.reshape(x, (b, h // 2, w // 2, 4 * c))
    x = T.layer_norm(x, norm_gamma, norm_beta)
    return T.matmul(x, weight, tag="patch_merge")


def _mlp(x: Tensor, params: ParameterSet, base: str) -> Tensor:
    h = T.add(T.matmul(x, params[f"{base}/mlp/fc1_weight"], tag="mlp"), params[f"{base}/mlp/fc1_bias"])
    h = T.gelu(h)
    return T.add(T.matmul(h, params[f"{base}/mlp/fc2_weight"], tag="mlp"), params[f"{base}/mlp/fc2_bias"])


def _attention_block(
    x: Tensor,
    params: ParameterSet,
    base: str,
    cfg: ModelConfig,
    stage: int,
    grid: int,
    shift: int,
) -> Tensor:
    heads = cfg.heads[stage]
    normed = T.layer_norm(x, params[f"{base}/norm1/gamma"], params[f"{base}/norm1/beta"])
    if cfg.attention_mode == "full":
        attn_out = window_attention(
            normed,
            params[f"{base}/attn/qkv_weight"],
            params[f"{base}/attn/qkv_bias"],
            params[f"{base}/attn/proj_weight"],
            params[f"{base}/attn/proj_bias"],
            heads,
        )
    else:
        m = cfg.window_size
        b = x.shape[0]
        grid_x = T.reshape(normed, (b, grid, grid, cfg.dims[stage]))
        if shift:
            grid_x = T.roll(T.roll(grid_x, -shift, axis=1), -shift, axis=2)
        windows = window_partition(grid_x, m)
        mask = build_shift_mask(grid, grid, m, shift) if shift else None
        attn_windows = window_attention(
            windows,
            params[f"{base}/attn/qkv_weight"],
            params[f"{base}/attn/qkv_bias"],
            params[f"{base}/attn/proj_weight"],
            params[f"{base}/attn/proj_bias"],
            heads,
            rel_bias=_block_bias(params, base, m, heads),
            mask=mask,
        )
        grid_x = window_reverse(attn_windows, m, grid, grid)
        if shift:
            grid_x = T.roll(T.roll(grid_x, shift, axis=1), shift, axis=2)
        attn_out = T.reshape(grid_x, (b, grid * grid, cfg.dims[stage]))
    x = T.add(x, attn_out)
    normed2 = T.layer_norm(x, params[f"{base}/norm2/gamma"], params[f"{base}/norm2/beta"])
    return T.add(x, _mlp(normed2, params, base))


def forward(params: ParameterSet, cfg: ModelConfig, x) -> Tensor:
    """Image batch (B, 3, H, W) or single image (3, H, W) -> AU logits.

    Stages alternate unshifted (even block index) and shifted (odd index)
    attention; tokens are average-pooled before the head.
    """
    x = T.as_tensor(x)
    single = x.ndim == 3
    if single:
        x = T.reshape(x, (1, *x.shape))
    if x.ndim != 4 or x.shape[1] != 3 or x.shape[2] != cfg.input_size or x.shape[3] != cfg.input_size:
        raise ValueError(f"expected (B, 3, {cfg.input_size}, {cfg.input_size}) input, got {x.shape}")

    tokens = patch_embed(x, params["patch_embed/weight"], params["patch_embed/bias"], cfg.patch_size)
    if cfg.attention_mode == "full":
        tokens = T.add(tokens, params["pos_embed"])

    sides = cfg.grid_sides()
    for i, depth in enumerate(cfg.depths):
        grid = sides[i]
        for j in range(depth):
            shift = 0 if j % 2 == 0 else cfg.shift_size
            tokens = _attention_block(tokens, params, f"stage{i}/block{j}", cfg, i, grid, shift)
        if i < len(cfg.depths) - 1:
            b = tokens.shape[0]
            grid_x = T.reshape(tokens, (b, grid, grid, cfg.dims[i]))
            grid_x = patch_merging(
                grid_x,
                params[f"stage{i}/merge/norm/gamma"],
                params[f"stage{i}/merge/norm/beta"],
                params[f"stage{i}/merge/weight"],
            )
            tokens = T.reshape(grid_x, (b, (grid // 2) ** 2, cfg.dims[i + 1]))

    tokens = T.layer_norm(tokens, params["norm/gamma"], params["norm/beta"])
    pooled = T.mean(tokens, axis=1)
    logits = T.add(T.matmul(pooled, params["head/weight"], tag="head"), params["head/bias"])
    if single:
        logits = T.reshape(logits, (cfg.num_aus,))
    return logits


def swap_head(params: ParameterSet, cfg: ModelConfig, new_tag: str, seed: int = 0):
    """Keep the backbone bit-exactly, reinitialize the head for a new AU set."""
    new_cfg = dataclasses.replace(cfg, dataset_tag=new_tag)
    rng = np.random.default_rng(seed)
    dtype = params["head/weight"].dtype
    new_params = dict(params)
    new_params["head/weight"] = Tensor(
        np.ascontiguousarray(_trunc_normal(rng, (cfg.dims[-1], new_cfg.num_aus)), dtype=dtype),
        requires_grad=True,
    )
    new_params["head/bias"] = Tensor(np.zeros(new_cfg.num_aus, dtype=dtype), requires_grad=True)
    return new_params, new_cfg


# ---------------------------------------------------------------------------
# complexity accounting

def attention_block_macs(n_tokens: int, dim: int, window_size: int | None = None) -> dict[str, int]:
    """Exact multiply-accumulate counts of the two attention matmuls for one
    block on one image: quadratic in tokens for full attention, linear for
    windowed (each token attends to its window's M^2 tokens)."""
    if window_size is None:
        per = n_tokens * n_tokens * dim
    else:
        if n_tokens % (window_size * window_size):
            raise ValueError("token count must be divisible by the window area")
        per = n_tokens * window_size * window_size * dim
    return {"qk": per, "av": per}


def attention_macs(cfg: ModelConfig) -> list[dict]:
    """Per-stage attention MAC table for a single image."""
    rows = []
    window = None if cfg.attention_mode == "full" else cfg.window_size
    for i, side in enumerate(cfg.grid_sides()):
        n = side * side
        per_block = attention_block_macs(n, cfg.dims[i], window)
        rows.append(
            {
                "stage": i,
                "tokens": n,
                "dim": cfg.dims[i],
                "blocks": cfg.depths[i],
                "qk_per_block": per_block["qk"],
                "av_per_block": per_block["av"],
                "qk_total": per_block["qk"] * cfg.depths[i],
                "av_total": per_block["av"] * cfg.depths[i],
            }
        )
    return rows
