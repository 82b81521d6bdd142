"""Deterministic synthetic cross-view pair generator and dataset I/O.

A scene is parametric: a smooth value-noise background plus 3-6 distinctly
colored geometric landmarks (rects, discs, crosses, optionally striped).
The reference image rasterizes the scene directly; the query image samples
the same continuous scene through a rotate/zoom affine centered near one
target landmark, so correspondence is exact by construction.  All randomness
derives from (dataset seed, sample index).
"""

from __future__ import annotations

import dataclasses
import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ConfigError, DataFormatError
from .fusion import ClickPrompt
from .head import BBox

SCHEMA_VERSION = 1

KINDS = ("rect", "disc", "cross")
CROSS_BAR = 0.35

PALETTE = np.array(
    [
        [0.86, 0.20, 0.18],
        [0.22, 0.49, 0.85],
        [0.25, 0.73, 0.28],
        [0.95, 0.78, 0.12],
        [0.63, 0.27, 0.75],
        [0.95, 0.45, 0.13],
        [0.13, 0.75, 0.74],
        [0.91, 0.32, 0.60],
        [0.55, 0.76, 0.17],
        [0.45, 0.34, 0.22],
    ]
)


@dataclass
class SynthConfig:
    ref_size: int = 128
    query_size: int = 64
    landmarks: tuple[int, int] = (3, 6)
    half_size_frac: tuple[float, float] = (0.05, 0.14)  # of ref_size
    rotation_max_deg: float = 30.0
    zoom: tuple[float, float] = (1.5, 3.0)
    center_jitter: float = 4.0   # query-frame px between view center and target
    click_jitter: float = 3.0    # query-frame px around the target centroid
    color_jitter: float = 0.15
    seed: int = 0
    counts: dict = field(default_factory=lambda: {"train": 2000, "val": 570, "test": 286})

    def __post_init__(self):
        if self.ref_size % 4 or self.query_size % 4:
            raise ConfigError("image extents must be divisible by the patch size")
        if self.landmarks[0] < 1 or self.landmarks[1] < self.landmarks[0]:
            raise ConfigError(f"bad landmark count range {self.landmarks}")


@dataclass
class Landmark:
    kind: str
    cx: float
    cy: float
    hw: float
    hh: float
    color: np.ndarray
    striped: bool = False
    stripe_period: float = 4.0
    stripe_axis: tuple[float, float] = (1.0, 0.0)

    def bounds(self) -> BBox:
        return BBox(self.cx - self.hw, self.cy - self.hh, self.cx + self.hw, self.cy + self.hh)

    def contains(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        dx, dy = x - self.cx, y - self.cy
        if self.kind == "rect":
            return (np.abs(dx) <= self.hw) & (np.abs(dy) <= self.hh)
        if self.kind == "disc":
            return (dx / self.hw) ** 2 + (dy / self.hh) ** 2 <= 1.0
        if self.kind == "cross":
            horiz = (np.abs(dy) <= self.hh * CROSS_BAR) & (np.abs(dx) <= self.hw)
            vert = (np.abs(dx) <= self.hw * CROSS_BAR) & (np.abs(dy) <= self.hh)
            return horiz | vert
        raise ValueError(f"unknown landmark kind {self.kind!r}")


@dataclass
class Scene:
    size: int
    bg_grid: np.ndarray           # [gh, gw, 3] value-noise control points
    landmarks: list[Landmark]
    target: int
    # query view: reference = t_center + R(theta) @ (q - q_center) / zoom
    theta: float
    zoom: float
    q_center: tuple[float, float]
    color_gain: np.ndarray        # per-channel gain applied to the query view
    color_bias: float

    @property
    def gt(self) -> BBox:
        return self.landmarks[self.target].bounds().clamped(self.size, self.size)

    def query_to_ref(self, u, v):
        t = self.landmarks[self.target]
        qu, qv = np.asarray(u) - self.q_center[0], np.asarray(v) - self.q_center[1]
        c, s = math.cos(self.theta), math.sin(self.theta)
        rx = t.cx + (c * qu - s * qv) / self.zoom
        ry = t.cy + (s * qu + c * qv) / self.zoom
        return rx, ry

    def eval_colors(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        """Scene color at continuous reference coordinates; shape [..., 3]."""
        gh, gw = self.bg_grid.shape[:2]
        fx = np.clip(x / self.size, 0.0, 1.0) * (gw - 1)
        fy = np.clip(y / self.size, 0.0, 1.0) * (gh - 1)
        x0 = np.clip(fx.astype(int), 0, gw - 2)
        y0 = np.clip(fy.astype(int), 0, gh - 2)
        tx = (fx - x0)[..., None]
        ty = (fy - y0)[..., None]
        g = self.bg_grid
        out = (
            g[y0, x0] * (1 - tx) * (1 - ty)
            + g[y0, x0 + 1] * tx * (1 - ty)
            + g[y0 + 1, x0] * (1 - tx) * ty
            + g[y0 + 1, x0 + 1] * tx * ty
        )
        for lm in self.landmarks:
            inside = lm.contains(x, y)
            if not inside.any():
                continue
            color = np.broadcast_to(lm.color, out.shape).copy()
            if lm.striped:
                ax, ay = lm.stripe_axis
                phase = np.sin(2 * math.pi * (x * ax + y * ay) / lm.stripe_period)
                shade = np.where(phase >= 0, 1.0, 0.62)[..., None]
                color = color * shade
            out = np.where(inside[..., None], color, out)
        return out


@dataclass
class CrossViewSample:
    sample_id: str
    seed: int
    query: np.ndarray   # [Hq, Wq, 3] uint8
    ref: np.ndarray     # [Hr, Wr, 3] uint8
    click: ClickPrompt
    gt: BBox
    split: str = ""


def _quantize(img: np.ndarray) -> np.ndarray:
    return np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)


def sample_scene(seed_key, cfg: SynthConfig) -> Scene:
    """Draw scene geometry (no rendering); fully determined by the seed key."""
    rng = np.random.default_rng(seed_key)
    size = cfg.ref_size
    bg = rng.uniform(0.18, 0.55, size=(5, 5, 3))
    n = int(rng.integers(cfg.landmarks[0], cfg.landmarks[1] + 1))
    colors = PALETTE[rng.permutation(len(PALETTE))[:n]]
    lo, hi = cfg.half_size_frac
    landmarks: list[Landmark] = []
    for i in range(n):
        hw = float(rng.uniform(lo, hi) * size)
        hh = float(rng.uniform(lo, hi) * size)
        kind = KINDS[int(rng.integers(len(KINDS)))]
        if kind == "disc":
            hh = hw
        placed = None
        for _ in range(60):
            cx = float(rng.uniform(hw + 2, size - hw - 2))
            cy = float(rng.uniform(hh + 2, size - hh - 2))
            ok = all(
                max(abs(cx - o.cx), abs(cy - o.cy)) > 0.9 * (max(hw, hh) + max(o.hw, o.hh))
                for o in landmarks
            )
            if ok:
                placed = (cx, cy)
                break
        if placed is None:
            continue
        landmarks.append(
            Landmark(
                kind=kind,
                cx=placed[0],
                cy=placed[1],
                hw=hw,
                hh=hh,
                color=colors[i],
                striped=bool(rng.random() < 0.5),
                stripe_period=float(rng.uniform(3.0, 6.0)),
                stripe_axis=(1.0, 0.0) if rng.random() < 0.5 else (0.0, 1.0),
            )
        )
    target = int(rng.integers(len(landmarks)))
    t = landmarks[target]
    theta = math.radians(float(rng.uniform(-cfg.rotation_max_deg, cfg.rotation_max_deg)))
    fit = 0.85 * cfg.query_size / (2.0 * max(t.hw, t.hh))
    z_hi = min(cfg.zoom[1], max(fit, cfg.zoom[0] + 0.05))
    zoom = float(rng.uniform(cfg.zoom[0], z_hi))
    jit = cfg.center_jitter
    q_center = (
        cfg.query_size / 2.0 + float(rng.uniform(-jit, jit)),
        cfg.query_size / 2.0 + float(rng.uniform(-jit, jit)),
    )
    gain = 1.0 + rng.uniform(-cfg.color_jitter, cfg.color_jitter, size=3)
    bias = float(rng.uniform(-cfg.color_jitter / 2, cfg.color_jitter / 2))
    return Scene(
        size=size,
        bg_grid=bg,
        landmarks=landmarks,
        target=target,
        theta=theta,
        zoom=zoom,
        q_center=q_center,
        color_gain=gain,
        color_bias=bias,
    )


def _pick_click(scene: Scene, cfg: SynthConfig, rng: np.random.Generator) -> ClickPrompt:
    """Target centroid in query coordinates plus jitter, kept on the silhouette."""
    t = scene.landmarks[scene.target]
    base = np.array(scene.q_center)
    jitter = cfg.click_jitter
    for _ in range(20):
        cand = base + rng.uniform(-jitter, jitter, size=2)
        if not (0 <= cand[0] < cfg.query_size and 0 <= cand[1] < cfg.query_size):
            jitter *= 0.5
            continue
        rx, ry = scene.query_to_ref(cand[0], cand[1])
        if t.contains(np.asarray(rx), np.asarray(ry)):
            return ClickPrompt(u=float(cand[0]), v=float(cand[1]), valid=True)
        jitter *= 0.5
    u = min(max(base[0], 0.0), cfg.query_size - 1e-6)
    v = min(max(base[1], 0.0), cfg.query_size - 1e-6)
    return ClickPrompt(u=float(u), v=float(v), valid=True)


def render_reference(scene: Scene) -> np.ndarray:
    n = scene.size
    ys, xs = np.mgrid[0:n, 0:n] + 0.5
    return _quantize(scene.eval_colors(xs, ys))


def render_query(scene: Scene, cfg: SynthConfig) -> np.ndarray:
    n = cfg.query_size
    vs, us = np.mgrid[0:n, 0:n] + 0.5
    rx, ry = scene.query_to_ref(us, vs)
    img = scene.eval_colors(rx, ry)
    img = img * scene.color_gain + scene.color_bias
    return _quantize(img)


def generate_pair(index: int, cfg: SynthConfig, split: str = "") -> CrossViewSample:
    """Render one fully deterministic sample for (cfg.seed, index)."""
    scene = sample_scene((cfg.seed, index), cfg)
    click_rng = np.random.default_rng((cfg.seed, index, 1))
    return CrossViewSample(
        sample_id=f"{index:06d}",
        seed=cfg.seed,
        query=render_query(scene, cfg),
        ref=render_reference(scene),
        click=_pick_click(scene, cfg, click_rng),
        gt=scene.gt,
        split=split,
    )


def split_counts(n: int, ratio: tuple[int, int, int] = (7, 2, 1)) -> tuple[int, int, int]:
    """Largest-remainder split of n samples by the given ratio."""
    total = sum(ratio)
    raw = [n * r / total for r in ratio]
    counts = [int(v) for v in raw]
    rema = sorted(range(3), key=lambda i: raw[i] - counts[i], reverse=True)
    for i in range(n - sum(counts)):
        counts[rema[i % 3]] += 1
    return tuple(counts)


def iter_split_assignments(cfg: SynthConfig):
    idx = 0
    for split in ("train", "val", "test"):
        for _ in range(cfg.counts[split]):
            yield idx, split
            idx += 1


# -- augmentation -------------------------------------------------------------------


def hflip_reference(sample: CrossViewSample) -> CrossViewSample:
    w = sample.ref.shape[1]
    gt = sample.gt
    return dataclasses.replace(
        sample,
        ref=sample.ref[:, ::-1].copy(),
        gt=BBox(w - gt.x2, gt.y1, w - gt.x1, gt.y2),
    )


def hflip_query(sample: CrossViewSample) -> CrossViewSample:
    w = sample.query.shape[1]
    u = min(w - sample.click.u, w - 1e-6)
    return dataclasses.replace(
        sample,
        query=sample.query[:, ::-1].copy(),
        click=ClickPrompt(u=u, v=sample.click.v, valid=sample.click.valid),
    )


def _nn_index_map(n_out: int, n_in: int) -> np.ndarray:
    return np.minimum(((np.arange(n_out) + 0.5) * n_in / n_out).astype(int), n_in - 1)


def _footprint_interval(lo: float, hi: float, index_map: np.ndarray) -> tuple[int, int]:
    """Tight [start, stop) of output pixels whose source centers fall in [lo, hi)."""
    centers = index_map + 0.5
    sel = np.nonzero((centers >= lo) & (centers < hi))[0]
    if sel.size == 0:
        return 0, 0
    return int(sel[0]), int(sel[-1] + 1)


def scale_and_crop_reference(
    sample: CrossViewSample, scale: float, rng: np.random.Generator
) -> CrossViewSample:
    """Nearest-neighbor rescale, then crop or pad back to the original extent.

    The transformed box is the tight bounding box of the transformed pixel
    footprint, so a pixel-mask oracle agrees exactly.
    """
    img = sample.ref
    h, w = img.shape[:2]
    h2, w2 = max(int(round(h * scale)), 8), max(int(round(w * scale)), 8)
    iy, ix = _nn_index_map(h2, h), _nn_index_map(w2, w)
    scaled = img[iy[:, None], ix[None, :]]
    gt = sample.gt
    x1, x2 = _footprint_interval(gt.x1, gt.x2, ix)
    y1, y2 = _footprint_interval(gt.y1, gt.y2, iy)
    if x2 - x1 < 2 or y2 - y1 < 2:
        return sample  # box would collapse; skip this augmentation draw

    if w2 >= w:
        ox_lo, ox_hi = max(0, x2 - w), min(w2 - w, x1)
        oy_lo, oy_hi = max(0, y2 - h), min(h2 - h, y1)
        if ox_lo > ox_hi or oy_lo > oy_hi:
            return sample
        ox = int(rng.integers(ox_lo, ox_hi + 1))
        oy = int(rng.integers(oy_lo, oy_hi + 1))
        out = scaled[oy : oy + h, ox : ox + w]
        new = BBox(x1 - ox, y1 - oy, x2 - ox, y2 - oy)
    else:
        ox = int(rng.integers(0, w - w2 + 1))
        oy = int(rng.integers(0, h - h2 + 1))
        out = np.zeros_like(img)
        out[oy : oy + h2, ox : ox + w2] = scaled
        new = BBox(x1 + ox, y1 + oy, x2 + ox, y2 + oy)
    return dataclasses.replace(sample, ref=out.copy(), gt=new)


def augment(sample: CrossViewSample, rng: np.random.Generator) -> CrossViewSample:
    """Training-split augmentation: flips plus reference scale-crop jitter."""
    if rng.random() < 0.5:
        sample = hflip_reference(sample)
    if rng.random() < 0.5:
        sample = hflip_query(sample)
    scale = float(rng.uniform(0.8, 1.2))
    return scale_and_crop_reference(sample, scale, rng)


# -- dataset i/o --------------------------------------------------------------------


def write_dataset(out_dir, cfg: SynthConfig, progress=None) -> dict:
    """Generate and persist the full dataset; returns the manifest."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    records = []
    for idx, split in iter_split_assignments(cfg):
        sample = generate_pair(idx, cfg, split)
        qf = f"images/{sample.sample_id}_q.png"
        rf = f"images/{sample.sample_id}_r.png"
        Image.fromarray(sample.query).save(out / qf)
        Image.fromarray(sample.ref).save(out / rf)
        records.append(
            {
                "id": sample.sample_id,
                "split": split,
                "gt": sample.gt.as_list(),
                "click": [sample.click.u, sample.click.v],
                "query_file": qf,
                "ref_file": rf,
            }
        )
        if progress is not None:
            progress(idx)
    with open(out / "annotations.jsonl", "w") as f:
        for rec in records:
            f.write(json.dumps(rec) + "\n")
    manifest = {
        "version": SCHEMA_VERSION,
        "counts": dict(cfg.counts),
        "ref_size": cfg.ref_size,
        "query_size": cfg.query_size,
        "seed": cfg.seed,
        "generator": {
            "landmarks": list(cfg.landmarks),
            "half_size_frac": list(cfg.half_size_frac),
            "rotation_max_deg": cfg.rotation_max_deg,
            "zoom": list(cfg.zoom),
            "center_jitter": cfg.center_jitter,
            "click_jitter": cfg.click_jitter,
            "color_jitter": cfg.color_jitter,
        },
    }
    with open(out / "manifest.json", "w") as f:
        json.dump(manifest, f, indent=2)
    return manifest


def _validate_record(rec: dict, manifest: dict) -> dict:
    for key in ("id", "split", "gt", "click", "query_file", "ref_file"):
        if key not in rec:
            raise DataFormatError(f"annotation record missing field {key!r}: {rec}")
    x1, y1, x2, y2 = rec["gt"]
    if not (x1 < x2 and y1 < y2):
        raise DataFormatError(f"record {rec['id']}: invalid box {rec['gt']}")
    n = manifest["ref_size"]
    if x1 < 0 or y1 < 0 or x2 > n or y2 > n:
        raise DataFormatError(f"record {rec['id']}: box {rec['gt']} outside {n}x{n} bounds")
    u, v = rec["click"]
    q = manifest["query_size"]
    if not (0 <= u < q and 0 <= v < q):
        raise DataFormatError(f"record {rec['id']}: click {rec['click']} outside {q}x{q} bounds")
    return rec


class Dataset:
    """Loaded dataset directory: validated records plus lazy image access."""

    def __init__(self, root):
        self.root = Path(root)
        mpath = self.root / "manifest.json"
        if not mpath.exists():
            raise IOError(f"missing manifest: {mpath}")
        with open(mpath) as f:
            self.manifest = json.load(f)
        if self.manifest.get("version") != SCHEMA_VERSION:
            raise DataFormatError(
                f"dataset schema version {self.manifest.get('version')} != {SCHEMA_VERSION}"
            )
        apath = self.root / "annotations.jsonl"
        if not apath.exists():
            raise IOError(f"missing annotations: {apath}")
        self.records: list[dict] = []
        with open(apath) as f:
            for line in f:
                if line.strip():
                    self.records.append(_validate_record(json.loads(line), self.manifest))

    def split(self, name: str) -> list[dict]:
        return [r for r in self.records if r["split"] == name]

    def ids(self, split: str | None = None) -> list[str]:
        recs = self.records if split is None else self.split(split)
        return [r["id"] for r in recs]

    def record(self, sample_id: str) -> dict:
        for r in self.records:
            if r["id"] == sample_id:
                return r
        raise KeyError(f"unknown sample id {sample_id!r}")

    def _read_image(self, rel: str) -> np.ndarray:
        path = self.root / rel
        if not path.exists():
            raise IOError(f"missing image file: {path}")
        return np.asarray(Image.open(path).convert("RGB"))

    def load(self, rec: dict) -> CrossViewSample:
        return CrossViewSample(
            sample_id=rec["id"],
            seed=self.manifest["seed"],
            query=self._read_image(rec["query_file"]),
            ref=self._read_image(rec["ref_file"]),
            click=ClickPrompt(u=rec["click"][0], v=rec["click"][1], valid=True),
            gt=BBox(*rec["gt"]),
            split=rec["split"],
        )

    def load_split(self, name: str) -> list[CrossViewSample]:
        return [self.load(r) for r in self.split(name)]


def to_model_inputs(samples: list[CrossViewSample]):
    """Stack samples into [B, 3, H, W] float arrays in [0, 1] plus prompts/boxes."""
    query = np.stack([s.query for s in samples]).astype(np.float64) / 255.0
    ref = np.stack([s.ref for s in samples]).astype(np.float64) / 255.0
    return (
        query.transpose(0, 3, 1, 2),
        ref.transpose(0, 3, 1, 2),
        [s.click for s in samples],
        [s.gt for s in samples],
    )
