"""Query-guided fusion of reference features, conditioned on a click prompt.

The query map (optionally carrying an extra Gaussian prompt channel projected
back to C) is average-pooled into one vector; every reference location is
scored by a sigmoid of the dot product with that vector, and the resulting
attention map gates the reference features fed to the localization head.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeError
from .module import Linear, Module
from .tensor import Tensor, concat, sigmoid
from . import tensor as T


@dataclass
class ClickPrompt:
    u: float = 0.0
    v: float = 0.0
    valid: bool = True


@dataclass
class FusionConfig:
    prompt_sigma: float = 1.5  # Gaussian spread of the click channel, in feature cells
    scale_logits: bool = True  # divide the dot product by sqrt(C) before the sigmoid


def prompt_mask(
    prompt: ClickPrompt, image_hw: tuple[int, int], feat_hw: tuple[int, int], sigma: float
) -> np.ndarray:
    """[h, w] Gaussian bump centered at the click, in feature-cell units.

    An invalid prompt yields an all-zero mask (unprompted mode).
    """
    h, w = feat_hw
    if not prompt.valid:
        return np.zeros((h, w))
    ih, iw = image_hw
    if not (0 <= prompt.u < iw and 0 <= prompt.v < ih):
        raise ValueError(f"click ({prompt.u}, {prompt.v}) outside image extents {iw}x{ih}")
    # continuous click position in cell-index units (cell centers at integers)
    fu = prompt.u * w / iw - 0.5
    fv = prompt.v * h / ih - 0.5
    ys, xs = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    return np.exp(-((xs - fu) ** 2 + (ys - fv) ** 2) / (2.0 * sigma ** 2))


def pool_query(feats: Tensor) -> Tensor:
    """Global average over spatial positions: [B, h, w, C] -> [B, C]."""
    return feats.mean(axis=(1, 2))


def fusion_attention(pooled: Tensor, ref: Tensor, scale: bool = False) -> Tensor:
    """A[b, i, j] = sigmoid(pooled[b] . ref[b, i, j]); optional 1/sqrt(C) scaling."""
    if pooled.shape[-1] != ref.shape[-1]:
        raise ShapeError(f"channel mismatch: query {pooled.shape} vs reference {ref.shape}")
    b, c = pooled.shape
    logits = (ref * pooled.reshape(b, 1, 1, c)).sum(axis=-1, keepdims=True)
    if scale:
        logits = logits * (c ** -0.5)
    return sigmoid(logits)


def apply_fusion(attention: Tensor, ref: Tensor) -> Tensor:
    """Gate reference features with the attention map, broadcast over channels."""
    if attention.shape[:3] != ref.shape[:3] or attention.shape[3] != 1:
        raise ShapeError(f"attention {attention.shape} does not match reference {ref.shape}")
    return attention * ref


class PromptEncoder(Module):
    """Appends the Gaussian click channel and projects C+1 back to C (1x1 conv)."""

    def __init__(self, rng: np.random.Generator, dim: int, cfg: FusionConfig):
        super().__init__()
        self.cfg = cfg
        self.proj = Linear(rng, dim + 1, dim)

    def __call__(
        self, feats: Tensor, prompts: list[ClickPrompt], image_hw: tuple[int, int]
    ) -> Tensor:
        b, h, w, c = feats.shape
        masks = np.stack(
            [prompt_mask(p, image_hw, (h, w), self.cfg.prompt_sigma) for p in prompts]
        )[..., None]
        return self.proj(concat([feats, Tensor(masks)], axis=-1))


class QueryGuidedFusion(Module):
    """Full fusion path: prompt conditioning, pooling, attention, gating."""

    def __init__(self, rng: np.random.Generator, dim: int, cfg: FusionConfig):
        super().__init__()
        self.cfg = cfg
        self.prompt_encoder = PromptEncoder(rng, dim, cfg)

    def __call__(
        self,
        query_feats: Tensor,
        ref_feats: Tensor,
        prompts: list[ClickPrompt],
        query_image_hw: tuple[int, int],
    ) -> tuple[Tensor, Tensor]:
        conditioned = self.prompt_encoder(query_feats, prompts, query_image_hw)
        pooled = pool_query(conditioned)
        attention = fusion_attention(pooled, ref_feats, scale=self.cfg.scale_logits)
        return apply_fusion(attention, ref_feats), attention
