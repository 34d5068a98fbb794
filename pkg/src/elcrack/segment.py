"""Crack masks from the crack-channel activation map.

A pixel is foreground when its activation exceeds half of the map's
maximum.  A constant map carries no localization and yields no foreground
(for a positive constant the half-max rule alone would mark every pixel).
Masks are only emitted for images classified as 'crack'.  For small
exponents the crack region tends to show up as *low* activations; the
``inverted`` polarity negates the map before thresholding.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from elcrack import kernels
from elcrack.model import CLASSES, CRACK, NON_CRACK, classify, forward


class PolarityMode(str, Enum):
    DIRECT = "direct"
    INVERTED = "inverted"


def default_polarity(p: float) -> PolarityMode | None:
    """Polarity to use when none is given; ``None`` means the caller must choose (p <= 4)."""
    return PolarityMode.DIRECT if p > 4 else None


@dataclass
class SegmentationMask:
    grid: np.ndarray
    gated: bool = False

    def __post_init__(self):
        self.grid = np.asarray(self.grid, dtype=np.uint8)
        if self.grid.ndim != 2:
            raise ValueError(f"mask must be 2-D, got shape {self.grid.shape}")

    @property
    def foreground(self) -> int:
        return int(self.grid.sum())


def extract_heatmap(model, image: torch.Tensor) -> tuple[np.ndarray, str, np.ndarray]:
    """One forward pass: ``(crack map [H', W'], label, class probabilities)``."""
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            maps, scores = forward(model, image)
    finally:
        model.train(was_training)
    if maps.shape[0] != 1:
        raise ValueError("extract_heatmap takes a single image")
    label, probs = classify(scores[0])
    return maps[0, CRACK].numpy().astype(np.float64), label, probs


def threshold_mask(heatmap, polarity: PolarityMode | str = PolarityMode.DIRECT) -> SegmentationMask:
    y = np.ascontiguousarray(heatmap, dtype=np.float64)
    if y.ndim != 2:
        raise ValueError(f"heatmap must be 2-D, got shape {y.shape}")
    if not np.all(np.isfinite(y)):
        raise ValueError("heatmap contains non-finite values")
    invert = PolarityMode(polarity) is PolarityMode.INVERTED
    mask = kernels.half_max_threshold(y.reshape(1, -1), invert)
    return SegmentationMask(np.asarray(mask).reshape(y.shape))


def apply_gate(label: str, mask: SegmentationMask) -> SegmentationMask:
    if label not in CLASSES:
        raise ValueError(f"unknown label {label!r}")
    if label == CLASSES[NON_CRACK]:
        return SegmentationMask(np.zeros_like(mask.grid), gated=True)
    return mask


def nearest_indices(src: int, dst: int) -> np.ndarray:
    # pixel-center aligned nearest neighbour
    return np.minimum(((np.arange(dst) + 0.5) * src / dst).astype(np.int64), src - 1)


def upsample_mask(mask: SegmentationMask, target: int | tuple[int, int] = 300) -> SegmentationMask:
    th, tw = (target, target) if isinstance(target, int) else target
    h, w = mask.grid.shape
    if th < h or tw < w:
        raise ValueError(f"target {th}x{tw} is smaller than the mask {h}x{w}")
    grid = mask.grid[np.ix_(nearest_indices(h, th), nearest_indices(w, tw))]
    return SegmentationMask(grid, gated=mask.gated)


@dataclass
class SegmentationResult:
    heatmap: np.ndarray
    label: str
    probabilities: np.ndarray
    mask: SegmentationMask
    polarity: PolarityMode


def segment_image(model, image: torch.Tensor, polarity: PolarityMode | str | None = None, upsample: bool = True):
    """Heatmap, gate and threshold for one preprocessed image."""
    p = model.config.pooling.p
    if polarity is None:
        polarity = default_polarity(p)
        if polarity is None:
            raise ValueError(f"p = {p:g} <= 4: choose a polarity ('direct' or 'inverted') explicitly")
    polarity = PolarityMode(polarity)
    heatmap, label, probs = extract_heatmap(model, image)
    mask = apply_gate(label, threshold_mask(heatmap, polarity))
    if upsample:
        mask = upsample_mask(mask, model.config.input_size)
    return SegmentationResult(heatmap, label, probs, mask, polarity)


def crack_map_mean(heatmap: np.ndarray) -> float:
    return float(np.mean(heatmap))


def export_mask(result: SegmentationResult, image_path: str, p: float, out_dir: str | Path, stem: str | None = None) -> tuple[Path, Path]:
    """Write the mask as an 8-bit PNG (0/255) plus a JSON sidecar."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    stem = stem or Path(image_path).stem
    png = out_dir / f"{stem}_mask.png"
    Image.fromarray(result.mask.grid * np.uint8(255)).save(png)
    sidecar = out_dir / f"{stem}_mask.json"
    record = {
        "image_path": str(image_path),
        "p": "inf" if math.isinf(p) else p,
        "polarity": result.polarity.value,
        "gated": result.mask.gated,
        "label": result.label,
        "probabilities": {CLASSES[CRACK]: float(result.probabilities[CRACK]),
                          CLASSES[NON_CRACK]: float(result.probabilities[NON_CRACK])},
        "mask_file": png.name,
        "mask_shape": list(result.mask.grid.shape),
        "foreground_pixels": result.mask.foreground,
    }
    sidecar.write_text(json.dumps(record, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return png, sidecar
