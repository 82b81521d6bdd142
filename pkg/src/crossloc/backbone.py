"""Shared-weight hierarchical windowed-attention encoder.

Four stages over [B, H, W, C] token maps: windowed multi-head self-attention
(alternating plain and cyclically shifted windows), a pointwise feed-forward
branch (swappable for the grid-MoE variant), and 2x2 patch merging between
stages.  One parameter set serves both views; extents may differ per view.
Token extents not divisible by the window are right/bottom zero-padded and
the padded tokens masked out of attention.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ShapeError
from .module import Linear, Module, ModuleList, Parameter, conv_init, trunc_normal
from .tensor import (
    Tensor,
    concat,
    conv2d,
    gather,
    layer_norm,
    matmul,
    pad,
    roll,
    softmax,
    transpose,
)
from . import tensor as T

NEG_INF = -1e9


@dataclass
class BackboneConfig:
    patch_size: int = 4
    embed_dim: int = 16
    depths: tuple[int, ...] = (2, 2, 4, 2)
    num_heads: tuple[int, ...] = (1, 2, 4, 4)
    window_size: int = 4
    mlp_ratio: float = 2.0
    img_size: int = 128
    in_chans: int = 3

    def __post_init__(self):
        if len(self.depths) != len(self.num_heads):
            raise ConfigError("depths and num_heads must have equal length")
        for s, (d, h) in enumerate(zip(self.depths, self.num_heads)):
            dim = self.stage_dim(s)
            if dim % h:
                raise ConfigError(f"stage {s}: heads {h} do not divide channel dim {dim}")
            if d > 1 and d % 2:
                raise ConfigError(f"stage {s}: depth {d} must be even when shifted windows are used")
        if self.window_size < 1 or self.patch_size < 1:
            raise ConfigError("window_size and patch_size must be >= 1")

    @property
    def num_stages(self) -> int:
        return len(self.depths)

    def stage_dim(self, stage: int) -> int:
        return self.embed_dim * (2 ** stage)

    def stage_shapes(self, h: int, w: int) -> list[tuple[int, int, int]]:
        """Dry-run shape schedule: (rows, cols, channels) per stage."""
        if h % self.patch_size or w % self.patch_size:
            raise ShapeError(f"image extent {h}x{w} not divisible by patch size {self.patch_size}")
        hs, ws = h // self.patch_size, w // self.patch_size
        shapes = []
        for s in range(self.num_stages):
            shapes.append((hs, ws, self.stage_dim(s)))
            if s < self.num_stages - 1:
                if hs % 2 or ws % 2:
                    raise ShapeError(f"stage {s} extent {hs}x{ws} must be even before merging")
                hs, ws = hs // 2, ws // 2
        return shapes


def relative_position_index(m: int) -> np.ndarray:
    """[m*m, m*m] indices into the (2m-1)^2 relative-position bias table."""
    coords = np.stack(np.meshgrid(np.arange(m), np.arange(m), indexing="ij"))  # [2, m, m]
    flat = coords.reshape(2, -1)
    rel = flat[:, :, None] - flat[:, None, :]  # [2, T, T]
    rel = rel.transpose(1, 2, 0) + (m - 1)
    return rel[..., 0] * (2 * m - 1) + rel[..., 1]


def window_partition(x: Tensor, m: int) -> Tensor:
    """[B, H, W, C] -> [B*nh*nw, m*m, C]; extents must divide by m."""
    b, h, w, c = x.shape
    if h % m or w % m:
        raise ShapeError(f"token map {h}x{w} not divisible by window {m}")
    x = x.reshape(b, h // m, m, w // m, m, c)
    x = transpose(x, (0, 1, 3, 2, 4, 5))
    return x.reshape(b * (h // m) * (w // m), m * m, c)


def window_reverse(wins: Tensor, m: int, b: int, h: int, w: int) -> Tensor:
    c = wins.shape[-1]
    x = wins.reshape(b, h // m, w // m, m, m, c)
    x = transpose(x, (0, 1, 3, 2, 4, 5))
    return x.reshape(b, h, w, c)


def shift_window_mask(h: int, w: int, m: int, shift: int) -> np.ndarray | None:
    """Additive attention mask [nW, m*m, m*m] for padded and/or shifted maps.

    Group labels live in post-shift coordinates; tokens attend only within
    their group, and padded positions are never valid keys.  Returns None
    when no masking is needed.
    """
    hp, wp = h + (-h) % m, w + (-w) % m
    if hp == h and wp == w and shift == 0:
        return None
    valid = np.zeros((hp, wp), dtype=bool)
    valid[:h, :w] = True
    groups = np.zeros((hp, wp), dtype=np.int64)
    if shift > 0:
        valid = np.roll(valid, (-shift, -shift), axis=(0, 1))
        bands = (slice(0, hp - m), slice(hp - m, hp - shift), slice(hp - shift, hp))
        bands_w = (slice(0, wp - m), slice(wp - m, wp - shift), slice(wp - shift, wp))
        cnt = 0
        for hs in bands:
            for ws in bands_w:
                groups[hs, ws] = cnt
                cnt += 1
    ids = np.where(valid, groups, -1)
    ids = ids.reshape(hp // m, m, wp // m, m).transpose(0, 2, 1, 3).reshape(-1, m * m)
    same = ids[:, :, None] == ids[:, None, :]
    key_ok = (ids >= 0)[:, None, :]
    return np.where(same & key_ok, 0.0, NEG_INF)


class Mlp(Module):
    """Pointwise two-layer feed-forward: FC -> GELU -> FC."""

    def __init__(self, rng: np.random.Generator, dim: int, hidden: int):
        super().__init__()
        self.fc1 = Linear(rng, dim, hidden)
        self.fc2 = Linear(rng, hidden, dim)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(T.gelu(self.fc1(x)))


class WindowAttention(Module):
    """Multi-head self-attention within windows, with learned relative-position bias."""

    def __init__(self, rng: np.random.Generator, dim: int, num_heads: int, window_size: int):
        super().__init__()
        if dim % num_heads:
            raise ConfigError(f"heads {num_heads} do not divide dim {dim}")
        self.dim = dim
        self.num_heads = num_heads
        self.window_size = window_size
        self.head_dim = dim // num_heads
        self.scale = self.head_dim ** -0.5
        self.qkv = Linear(rng, dim, 3 * dim)
        self.proj = Linear(rng, dim, dim)
        table = (2 * window_size - 1) ** 2
        self.bias_table = Parameter(np.zeros((table, num_heads)))
        self._rel_index = relative_position_index(window_size).ravel()

    def __call__(self, wins: Tensor, mask: np.ndarray | None, batch: int) -> Tensor:
        nw, t, c = wins.shape
        if t != self.window_size ** 2:
            raise ShapeError(f"window holds {t} tokens, expected {self.window_size ** 2}")
        h, dh = self.num_heads, self.head_dim
        qkv = self.qkv(wins).reshape(nw, t, 3, h, dh)
        qkv = transpose(qkv, (2, 0, 3, 1, 4))  # [3, nW, h, T, dh]
        q, k, v = qkv[0], qkv[1], qkv[2]
        attn = matmul(q * self.scale, transpose(k, (0, 1, 3, 2)))  # [nW, h, T, T]
        bias = gather(self.bias_table, self._rel_index).reshape(t, t, h)
        attn = attn + transpose(bias, (2, 0, 1))
        if mask is not None:
            nm = mask.shape[0]
            attn = attn.reshape(batch, nm, h, t, t) + Tensor(mask[None, :, None])
            attn = attn.reshape(nw, h, t, t)
        attn = softmax(attn, axis=-1)
        out = matmul(attn, v)  # [nW, h, T, dh]
        out = transpose(out, (0, 2, 1, 3)).reshape(nw, t, c)
        return self.proj(out)


class SwinBlock(Module):
    """Residual windowed-attention block; odd-indexed blocks shift windows.

    ``ffn`` is the pointwise branch: a plain Mlp, or any module returning
    (map, routing-decision) for the MoE variant.
    """

    def __init__(
        self,
        rng: np.random.Generator,
        dim: int,
        num_heads: int,
        window_size: int,
        shift: int,
        ffn: Module,
    ):
        super().__init__()
        self.dim = dim
        self.window_size = window_size
        self.shift = shift
        self.norm1_g = Parameter(np.ones(dim))
        self.norm1_b = Parameter(np.zeros(dim))
        self.attn = WindowAttention(rng, dim, num_heads, window_size)
        self.norm2_g = Parameter(np.ones(dim))
        self.norm2_b = Parameter(np.zeros(dim))
        self.ffn = ffn
        self._mask_cache: dict[tuple[int, int], np.ndarray | None] = {}

    def _mask(self, h: int, w: int) -> np.ndarray | None:
        key = (h, w)
        if key not in self._mask_cache:
            self._mask_cache[key] = shift_window_mask(h, w, self.window_size, self.shift)
        return self._mask_cache[key]

    def __call__(self, x: Tensor):
        b, h, w, c = x.shape
        m = self.window_size
        t = layer_norm(x, self.norm1_g, self.norm1_b)
        pad_h, pad_w = (-h) % m, (-w) % m
        if pad_h or pad_w:
            t = pad(t, [(0, 0), (0, pad_h), (0, pad_w), (0, 0)])
        hp, wp = h + pad_h, w + pad_w
        if self.shift:
            t = roll(t, (-self.shift, -self.shift), (1, 2))
        wins = window_partition(t, m)
        wins = self.attn(wins, self._mask(h, w), b)
        t = window_reverse(wins, m, b, hp, wp)
        if self.shift:
            t = roll(t, (self.shift, self.shift), (1, 2))
        if pad_h or pad_w:
            t = t[:, :h, :w, :]
        x = x + t

        y = layer_norm(x, self.norm2_g, self.norm2_b)
        out = self.ffn(y)
        decision = None
        if isinstance(out, tuple):
            out, decision = out
        return x + out, decision


class PatchEmbed(Module):
    """Non-overlapping patch projection (conv, kernel = stride = patch) + layer norm."""

    def __init__(self, rng: np.random.Generator, patch: int, in_chans: int, dim: int):
        super().__init__()
        self.patch = patch
        self.w = Parameter(conv_init(rng, dim, in_chans, patch, patch))
        self.b = Parameter(np.zeros(dim))
        self.norm_g = Parameter(np.ones(dim))
        self.norm_b = Parameter(np.zeros(dim))

    def __call__(self, img: Tensor) -> Tensor:
        b, c, h, w = img.shape
        if h % self.patch or w % self.patch:
            raise ShapeError(f"image extent {h}x{w} not divisible by patch size {self.patch}")
        x = conv2d(img, self.w, self.b, stride=self.patch)
        x = transpose(x, (0, 2, 3, 1))  # [B, H/P, W/P, d]
        return layer_norm(x, self.norm_g, self.norm_b)


class PatchMerging(Module):
    """Concatenate 2x2 neighborhoods (4c), layer norm, project to 2c."""

    def __init__(self, rng: np.random.Generator, dim: int):
        super().__init__()
        self.norm_g = Parameter(np.ones(4 * dim))
        self.norm_b = Parameter(np.zeros(4 * dim))
        self.reduce = Parameter(trunc_normal(rng, (4 * dim, 2 * dim)))

    def __call__(self, x: Tensor) -> Tensor:
        b, h, w, c = x.shape
        if h % 2 or w % 2:
            raise ShapeError(f"patch merging needs even extents, got {h}x{w}")
        quads = [x[:, 0::2, 0::2, :], x[:, 1::2, 0::2, :], x[:, 0::2, 1::2, :], x[:, 1::2, 1::2, :]]
        y = concat(quads, axis=-1)
        y = layer_norm(y, self.norm_g, self.norm_b)
        return matmul(y, self.reduce)


class SwinEncoder(Module):
    """Four-stage encoder producing per-stage token maps for one image.

    ``ffn_factory(stage, block, dim) -> Module | None`` lets the caller swap
    selected feed-forward branches for grid-MoE modules; None keeps the Mlp.
    """

    def __init__(self, rng: np.random.Generator, cfg: BackboneConfig, ffn_factory=None):
        super().__init__()
        self.cfg = cfg
        self.patch_embed = PatchEmbed(rng, cfg.patch_size, cfg.in_chans, cfg.embed_dim)
        self.stages = ModuleList()
        self.merges = ModuleList()
        for s, depth in enumerate(cfg.depths):
            dim = cfg.stage_dim(s)
            blocks = ModuleList()
            for i in range(depth):
                ffn = ffn_factory(s, i, dim) if ffn_factory is not None else None
                if ffn is None:
                    ffn = Mlp(rng, dim, int(dim * cfg.mlp_ratio))
                shift = cfg.window_size // 2 if i % 2 else 0
                blocks.append(SwinBlock(rng, dim, cfg.num_heads[s], cfg.window_size, shift, ffn))
            self.stages.append(blocks)
            if s < cfg.num_stages - 1:
                self.merges.append(PatchMerging(rng, dim))

    def __call__(self, img: Tensor, route_log: list | None = None) -> list[Tensor]:
        x = self.patch_embed(img)
        feats: list[Tensor] = []
        for s, blocks in enumerate(self.stages):
            for i, block in enumerate(blocks):
                x, decision = block(x)
                if decision is not None and route_log is not None:
                    route_log.append((s, i, decision))
            feats.append(x)
            if s < len(self.stages) - 1:
                x = self.merges[s](x)
        return feats


def encode_pair(encoder: SwinEncoder, query: Tensor, reference: Tensor, route_log_q=None, route_log_r=None):
    """Run the shared encoder over both views (identical weights, two passes)."""
    return encoder(query, route_log_q), encoder(reference, route_log_r)
