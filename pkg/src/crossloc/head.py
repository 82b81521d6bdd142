"""Anchor-free localization head: center heatmap + per-cell box regression.

Two Conv-BN-ReLU stages feed two 1x1 projections: a sigmoid center heatmap
and an unconstrained (dx, dy, w, h) map.  Ground truth is a Gaussian bump on
the feature grid with the cell containing the box center forced to exactly 1
(the single positive), plus sub-cell offsets and feature-scale box size at
that cell.  Decoding inverts the construction from the heatmap argmax.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeError
from .module import Buffer, Module, Parameter, conv_init
from .tensor import Tensor, batch_norm_infer, batch_norm_train, conv2d, relu, sigmoid, transpose


@dataclass
class BBox:
    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        if not (self.x1 < self.x2 and self.y1 < self.y2):
            raise ValueError(f"degenerate box [{self.x1}, {self.y1}, {self.x2}, {self.y2}]")

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def area(self) -> float:
        return self.width * self.height

    @property
    def center(self) -> tuple[float, float]:
        return (self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0

    def as_list(self) -> list[float]:
        return [self.x1, self.y1, self.x2, self.y2]

    def clamped(self, width: float, height: float) -> "BBox":
        return BBox(
            max(self.x1, 0.0), max(self.y1, 0.0), min(self.x2, width), min(self.y2, height)
        )


@dataclass
class TargetMaps:
    heatmap: np.ndarray            # [h, w], Gaussian with the positive cell forced to 1
    offset: tuple[float, float]    # (dx, dy) in [0, 1) at the positive cell
    size: tuple[float, float]      # (w, h) in feature cells
    pos_cell: tuple[int, int]      # (col, row) of the positive cell


@dataclass
class Prediction:
    bbox: BBox
    center: tuple[float, float]
    score: float
    heatmap: np.ndarray

    def to_json(self) -> dict:
        return {
            "x1": self.bbox.x1,
            "y1": self.bbox.y1,
            "x2": self.bbox.x2,
            "y2": self.bbox.y2,
            "score": self.score,
            "center": [self.center[0], self.center[1]],
        }


@dataclass
class HeadConfig:
    hidden: int = 64
    bn_eps: float = 1e-5
    bn_momentum: float = 0.1
    sigma: float | None = None  # None: size-adaptive max(1, min(w, h)/6); else fixed


class ConvBnRelu(Module):
    def __init__(self, rng: np.random.Generator, cin: int, cout: int, eps: float, momentum: float):
        super().__init__()
        self.w = Parameter(conv_init(rng, cout, cin, 3, 3))
        self.b = Parameter(np.zeros(cout))
        self.gamma = Parameter(np.ones(cout))
        self.beta = Parameter(np.zeros(cout))
        self.running_mean = Buffer(np.zeros(cout))
        self.running_var = Buffer(np.ones(cout))
        self.eps = eps
        self.momentum = momentum

    def __call__(self, x: Tensor) -> Tensor:
        y = conv2d(x, self.w, self.b, stride=1, pad_px=1)
        if self.training:
            y, mean, var = batch_norm_train(y, self.gamma, self.beta, self.eps)
            m = self.momentum
            self.running_mean.data = (1 - m) * self.running_mean.data + m * mean
            self.running_var.data = (1 - m) * self.running_var.data + m * var
        else:
            y = batch_norm_infer(
                y, self.gamma, self.beta, self.running_mean.data, self.running_var.data, self.eps
            )
        return relu(y)


@dataclass
class HeadOutput:
    heatmap: Tensor  # [B, h, w, 1], values in (0, 1)
    bbox: Tensor     # [B, h, w, 4] carrying (dx, dy, w, h) per cell


class AnchorFreeHead(Module):
    def __init__(self, rng: np.random.Generator, in_dim: int, cfg: HeadConfig):
        super().__init__()
        self.cfg = cfg
        self.stage1 = ConvBnRelu(rng, in_dim, cfg.hidden, cfg.bn_eps, cfg.bn_momentum)
        self.stage2 = ConvBnRelu(rng, cfg.hidden, cfg.hidden, cfg.bn_eps, cfg.bn_momentum)
        self.hm_w = Parameter(conv_init(rng, 1, cfg.hidden, 1, 1))
        self.hm_b = Parameter(np.zeros(1))
        self.box_w = Parameter(conv_init(rng, 4, cfg.hidden, 1, 1))
        self.box_b = Parameter(np.zeros(4))

    def __call__(self, fused: Tensor) -> HeadOutput:
        x = transpose(fused, (0, 3, 1, 2))  # [B, C, h, w]
        x = self.stage2(self.stage1(x))
        heat = sigmoid(conv2d(x, self.hm_w, self.hm_b))
        box = conv2d(x, self.box_w, self.box_b)
        return HeadOutput(
            heatmap=transpose(heat, (0, 2, 3, 1)),
            bbox=transpose(box, (0, 2, 3, 1)),
        )


def gaussian_sigma(size_feat: tuple[float, float], fixed: float | None) -> float:
    if fixed is not None:
        return fixed
    return max(1.0, min(size_feat) / 6.0)


def build_targets(
    gt: BBox,
    image_hw: tuple[int, int],
    feat_hw: tuple[int, int],
    sigma: float | None = None,
) -> TargetMaps:
    """Project a ground-truth box to the feature grid and build supervision maps."""
    ih, iw = image_hw
    fh, fw = feat_hw
    if gt.area <= 0:
        raise ValueError(f"degenerate ground-truth box {gt.as_list()}")
    cx = (gt.x1 + gt.x2) / 2.0 * fw / iw
    cy = (gt.y1 + gt.y2) / 2.0 * fh / ih
    bw = (gt.x2 - gt.x1) * fw / iw
    bh = (gt.y2 - gt.y1) * fh / ih
    ix, iy = int(np.floor(cx)), int(np.floor(cy))
    ix, iy = min(ix, fw - 1), min(iy, fh - 1)
    s = gaussian_sigma((bw, bh), sigma)
    ys, xs = np.meshgrid(np.arange(fh), np.arange(fw), indexing="ij")
    heat = np.exp(-((xs - cx) ** 2 + (ys - cy) ** 2) / (2.0 * s ** 2))
    heat[iy, ix] = 1.0  # the single positive cell
    return TargetMaps(
        heatmap=heat,
        offset=(cx - ix, cy - iy),
        size=(bw, bh),
        pos_cell=(ix, iy),
    )


def decode_prediction(
    heatmap: np.ndarray, bbox_map: np.ndarray, image_hw: tuple[int, int]
) -> Prediction:
    """Invert the target construction at the heatmap argmax (row-major first tie)."""
    if heatmap.ndim == 3:
        heatmap = heatmap[..., 0]
    fh, fw = heatmap.shape
    ih, iw = image_hw
    flat = int(np.argmax(heatmap))
    iy, ix = divmod(flat, fw)
    dx, dy, bw, bh = (float(v) for v in bbox_map[iy, ix])
    cx, cy = ix + dx, iy + dy
    sx, sy = iw / fw, ih / fh
    px, py = cx * sx, cy * sy
    # guard against degenerate regression output; a clamped center keeps the
    # clipped box non-empty for any positive size
    bw_px, bh_px = max(bw * sx, 1e-3), max(bh * sy, 1e-3)
    ccx, ccy = float(np.clip(px, 0.0, iw)), float(np.clip(py, 0.0, ih))
    box = BBox(
        max(ccx - bw_px / 2.0, 0.0),
        max(ccy - bh_px / 2.0, 0.0),
        min(ccx + bw_px / 2.0, iw),
        min(ccy + bh_px / 2.0, ih),
    )
    return Prediction(
        bbox=box, center=(px, py), score=float(heatmap[iy, ix]), heatmap=heatmap
    )
