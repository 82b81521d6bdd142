"""Grid-level sparse Mixture-of-Experts feed-forward branch.

The token map is tiled into a fixed grid; each tile is mean-pooled, scored
by a linear router, and dispatched to its top-k experts.  Gate weights are
the softmax over the selected logits only (unselected experts contribute
exactly zero), ties broken toward the lowest expert index.  Each expert is
a pointwise FC-GELU-FC network matching the Mlp it replaces.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .backbone import Mlp
from .errors import ConfigError
from .module import Linear, Module, ModuleList
from .tensor import Tensor, gather, gather2d, scatter_rows, softmax, transpose
from . import tensor as T

INSERT_CHOICES = ("none", "even", "all")


@dataclass
class GmoeConfig:
    num_experts: int = 6
    top_k: int = 2
    grid: tuple[int, int] = (4, 4)
    hidden_ratio: float = 2.0
    # per-stage insertion plan; "even" = even-indexed blocks only
    plan: tuple[str, str, str, str] = ("none", "even", "even", "even")
    entropy_over_full_softmax: bool = False
    identical_experts: bool = False  # test hook: init all experts identically

    def __post_init__(self):
        if not 1 <= self.top_k <= self.num_experts:
            raise ConfigError(f"top_k {self.top_k} must be in [1, {self.num_experts}]")
        if self.grid[0] < 1 or self.grid[1] < 1:
            raise ConfigError(f"grid {self.grid} extents must be >= 1")
        for p in self.plan:
            if p not in INSERT_CHOICES:
                raise ConfigError(f"insertion plan entry {p!r} not one of {INSERT_CHOICES}")

    def inserts_at(self, stage: int, block: int) -> bool:
        plan = self.plan[stage] if stage < len(self.plan) else "none"
        return plan == "all" or (plan == "even" and block % 2 == 0)


@dataclass
class GatingDecision:
    """Routing outcome for every grid of one map: scores, selection, weights."""

    logits: np.ndarray          # [G, num_experts] raw router scores
    expert_ids: np.ndarray      # [G, top_k] selected experts, descending score
    weights: Tensor             # [G, top_k] renormalized gates (on the tape)
    grid: tuple[int, int]
    full_softmax: Tensor | None = None  # [G, num_experts], kept when configured

    @property
    def num_experts(self) -> int:
        return self.logits.shape[1]

    def entropy(self) -> np.ndarray:
        """Per-grid entropy of the gate distribution (0 log 0 := 0)."""
        w = self.full_softmax.data if self.full_softmax is not None else self.weights.data
        with np.errstate(divide="ignore", invalid="ignore"):
            terms = np.where(w > 0, w * np.log(w), 0.0)
        return -terms.sum(axis=1)

    def primary_expert(self) -> np.ndarray:
        """Argmax-weight expert per grid; exact weight ties resolve to the lowest id."""
        w = self.weights.data
        best = np.zeros(w.shape[0], dtype=np.int64)
        for g in range(w.shape[0]):
            top = w[g].max()
            cand = self.expert_ids[g][w[g] == top]
            best[g] = cand.min()
        return best


def effective_grid(grid: tuple[int, int], h: int, w: int) -> tuple[int, int]:
    """Clamp the configured grid so every tile holds at least one token."""
    return min(grid[0], h), min(grid[1], w)


def grid_partition(x: Tensor, grid: tuple[int, int]) -> tuple[Tensor, tuple[int, int]]:
    """[B, H, W, C] -> [B*G, th, tw, C] disjoint tiles; exact inverse exists."""
    b, h, w, c = x.shape
    gh, gw = grid
    if gh > h or gw > w:
        raise ConfigError(f"grid {grid} larger than token map {h}x{w}")
    if h % gh or w % gw:
        raise ConfigError(f"grid {grid} does not divide token map {h}x{w}")
    th, tw = h // gh, w // gw
    x = x.reshape(b, gh, th, gw, tw, c)
    x = transpose(x, (0, 1, 3, 2, 4, 5))
    return x.reshape(b * gh * gw, th, tw, c), (th, tw)


def grid_unpartition(tiles: Tensor, grid: tuple[int, int], b: int, h: int, w: int) -> Tensor:
    gh, gw = grid
    th, tw = h // gh, w // gw
    c = tiles.shape[-1]
    x = tiles.reshape(b, gh, gw, th, tw, c)
    x = transpose(x, (0, 1, 3, 2, 4, 5))
    return x.reshape(b, h, w, c)


def topk_select(logits: np.ndarray, top_k: int) -> np.ndarray:
    """Indices of the top_k largest scores per row, ties to the lowest index."""
    order = np.argsort(-logits, axis=-1, kind="stable")
    return order[..., :top_k]


def topk_renormalize(logits: Tensor, top_k: int) -> tuple[np.ndarray, Tensor]:
    """Select top_k experts and softmax over the selected logits only.

    Accepts [G, num_experts] (or a single [num_experts] row); returns
    (expert ids, renormalized weights).  Unselected experts get exactly 0.
    """
    squeeze = logits.ndim == 1
    if squeeze:
        logits = logits.reshape(1, -1)
    n, k_total = logits.shape
    if top_k > k_total:
        raise ConfigError(f"top_k {top_k} exceeds {k_total} experts")
    ids = topk_select(logits.data, top_k)
    rows = np.broadcast_to(np.arange(n)[:, None], ids.shape)
    selected = gather2d(logits, rows, ids)
    weights = softmax(selected, axis=-1)
    if squeeze:
        return ids[0], weights.reshape(-1)
    return ids, weights


class GridMoe(Module):
    """Drop-in feed-forward branch: routes each grid tile to its top-k experts."""

    def __init__(self, rng: np.random.Generator, dim: int, cfg: GmoeConfig):
        super().__init__()
        self.cfg = cfg
        self.dim = dim
        hidden = int(dim * cfg.hidden_ratio)
        self.router = Linear(rng, dim, cfg.num_experts)
        experts = [Mlp(rng, dim, hidden) for _ in range(cfg.num_experts)]
        if cfg.identical_experts:
            for e in experts[1:]:
                e.fc1.w.data = experts[0].fc1.w.data.copy()
                e.fc1.b.data = experts[0].fc1.b.data.copy()
                e.fc2.w.data = experts[0].fc2.w.data.copy()
                e.fc2.b.data = experts[0].fc2.b.data.copy()
        self.experts = ModuleList(experts)

    def gate_scores(self, tiles: Tensor) -> Tensor:
        """Mean-pool each tile over space and score it: [N, th, tw, C] -> [N, k]."""
        pooled = tiles.mean(axis=(1, 2))
        return self.router(pooled)

    def __call__(self, x: Tensor) -> tuple[Tensor, GatingDecision]:
        b, h, w, c = x.shape
        grid = effective_grid(self.cfg.grid, h, w)
        tiles, (th, tw) = grid_partition(x, grid)
        n = tiles.shape[0]
        logits = self.gate_scores(tiles)
        ids, weights = topk_renormalize(logits, self.cfg.top_k)
        full = softmax(logits, axis=-1) if self.cfg.entropy_over_full_softmax else None

        flat = tiles.reshape(n, th * tw, c)
        out = None
        for e in range(self.cfg.num_experts):
            rows, slots = np.nonzero(ids == e)
            if rows.size == 0:
                continue
            xe = gather(flat, rows)
            ye = self.experts[e](xe)
            we = gather2d(weights, rows, slots).reshape(-1, 1, 1)
            piece = scatter_rows(we * ye, rows, n)
            out = piece if out is None else out + piece
        out = out.reshape(n, th, tw, c)
        y = grid_unpartition(out, grid, b, h, w)
        decision = GatingDecision(
            logits=logits.data, expert_ids=ids, weights=weights, grid=grid, full_softmax=full
        )
        return y, decision


def gating_entropy(decisions) -> float:
    """Mean per-grid gate entropy over a batch of decisions."""
    vals = np.concatenate([d.entropy() for d in decisions])
    return float(vals.mean())


def gate_log_weight_term(decisions) -> Tensor:
    """Mean over grids of sum_i g_i log g_i (the negated entropy, on the tape)."""
    total = None
    count = 0
    for d in decisions:
        w = d.full_softmax if d.full_softmax is not None else d.weights
        term = (w * T.log(T.clamp_min(w, 1e-12))).sum()
        count += w.shape[0]
        total = term if total is None else total + term
    return total * (1.0 / count)


def expert_usage(decisions, num_experts: int) -> np.ndarray:
    """Histogram of how many grid assignments each expert received."""
    counts = np.zeros(num_experts, dtype=np.int64)
    for d in decisions:
        np.add.at(counts, d.expert_ids.ravel(), 1)
    return counts


def export_activation_map(decisions_by_stage: dict[int, GatingDecision]) -> list[dict]:
    """Fig-style per-stage maps: each grid labeled with its primary expert id."""
    out = []
    for stage in sorted(decisions_by_stage):
        d = decisions_by_stage[stage]
        gh, gw = d.grid
        primary = d.primary_expert()
        if primary.size != gh * gw:
            raise ValueError(f"stage {stage}: decision covers {primary.size} grids, expected {gh * gw}")
        out.append(
            {
                "stage": stage,
                "grid_h": gh,
                "grid_w": gw,
                "expert_ids": [int(v) for v in primary],
            }
        )
    return out


def expert_flops(dim: int, hidden: int, tokens: int, grids: int, top_k: int, num_experts: int) -> int:
    """Multiply-accumulate count for one MoE branch evaluation.

    Router cost depends on num_experts; expert cost scales linearly in top_k.
    """
    router = grids * dim * num_experts
    per_token_ffn = 2 * dim * hidden
    return router + top_k * tokens * per_token_ffn
