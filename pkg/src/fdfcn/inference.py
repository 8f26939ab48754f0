"""Whole-volume segmentation by exact tiling, and overlap metrics."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, NamedTuple

import numpy as np

from .blocks import extract_block
from .errors import ShapeMismatch
from .volume_io import CLASS_NAMES


@dataclass(frozen=True)
class TilePlan:
    dims: tuple
    padded: tuple
    output_edge: int
    input_edge: int
    centers: tuple      # tile centers in padded-grid coordinates, C order

    @property
    def grid(self) -> tuple:
        return tuple(p // self.output_edge for p in self.padded)

    @property
    def pad(self) -> tuple:
        return tuple(p - d for p, d in zip(self.padded, self.dims))

    def tile_slices(self, center) -> tuple:
        half = self.output_edge // 2
        return tuple(slice(c - half, c - half + self.output_edge) for c in center)


def plan_tiles(dims, output_edge: int = 9, input_edge: int = 27) -> TilePlan:
    dims = tuple(int(d) for d in dims)
    if any(d < 1 for d in dims):
        raise ValueError(f"dims must be positive, got {dims}")
    e = output_edge
    padded = tuple(-(-d // e) * e for d in dims)
    axes = [np.arange(p // e) * e + e // 2 for p in padded]
    centers = tuple(tuple(int(v) for v in c)
                    for c in np.stack(np.meshgrid(*axes, indexing="ij"), -1).reshape(-1, 3))
    return TilePlan(dims, padded, e, input_edge, centers)


def segment_volume(predict: Callable, intensity: np.ndarray, coords: np.ndarray, plan: TilePlan,
                   batch: int = 16, order=None) -> np.ndarray:
    """Argmax label volume stitched from non-overlapping output tiles.

    ``predict(inputs, coords)`` maps (n,1,E,E,E) and (n,6,e,e,e) float32
    arrays to (n, C, e, e, e) logits.  ``intensity`` must already be
    normalized.  ``order`` optionally permutes tile processing.
    """
    if tuple(intensity.shape) != plan.dims:
        raise ShapeMismatch(f"volume {intensity.shape} does not match plan {plan.dims}")
    if tuple(coords.shape[1:]) != plan.dims:
        raise ShapeMismatch(f"coordinates {coords.shape} do not match plan {plan.dims}")
    out = np.zeros(plan.padded, dtype=np.uint8)
    idx = list(range(len(plan.centers))) if order is None else list(order)
    for start in range(0, len(idx), batch):
        chunk = [plan.centers[i] for i in idx[start:start + batch]]
        x = np.stack([extract_block(intensity, c, plan.input_edge)[None] for c in chunk])
        k = np.stack([extract_block(coords, c, plan.output_edge) for c in chunk])
        logits = predict(x.astype(np.float32), k.astype(np.float32))
        if logits.shape[0] != len(chunk) or logits.shape[2:] != (plan.output_edge,) * 3:
            raise ShapeMismatch(f"predictor returned {logits.shape} for {len(chunk)} tiles")
        labels = np.argmax(logits, axis=1)    # first maximum wins ties
        for c, lab in zip(chunk, labels):
            out[plan.tile_slices(c)] = lab
    d, h, w = plan.dims
    return out[:d, :h, :w]


def network_predictor(net, params) -> Callable:
    def predict(x, coords):
        logits, _ = net.forward(x, coords, params, train=False)
        return logits
    return predict


def _check(pred, ref):
    if pred.shape != ref.shape:
        raise ShapeMismatch(f"prediction {pred.shape} and reference {ref.shape} differ")


def dice(pred: np.ndarray, ref: np.ndarray, c: int) -> float:
    _check(pred, ref)
    p, r = pred == c, ref == c
    denom = p.sum() + r.sum()
    if denom == 0:
        return 1.0
    return float(2.0 * np.logical_and(p, r).sum() / denom)


def iou(pred: np.ndarray, ref: np.ndarray, c: int) -> float:
    _check(pred, ref)
    p, r = pred == c, ref == c
    union = np.logical_or(p, r).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(p, r).sum() / union)


class MetricRow(NamedTuple):
    name: str
    dice: float
    iou: float
    empty: bool


def report(pred: np.ndarray, ref: np.ndarray, structures=None, names=CLASS_NAMES) -> list:
    """Per-structure Dice/IoU rows followed by a ``mean`` row; background excluded."""
    _check(pred, ref)
    if structures is None:
        structures = range(1, len(names))
    rows = []
    for c in structures:
        empty = not (np.any(pred == c) or np.any(ref == c))
        rows.append(MetricRow(names[c] if c < len(names) else str(c),
                              dice(pred, ref, c), iou(pred, ref, c), empty))
    rows.append(MetricRow("mean", float(np.mean([r.dice for r in rows])),
                          float(np.mean([r.iou for r in rows])), False))
    return rows


def format_report(rows) -> str:
    lines = ["structure\tdice\tiou\tboth_empty"]
    for r in rows:
        lines.append(f"{r.name}\t{r.dice:.6f}\t{r.iou:.6f}\t{int(r.empty)}")
    return "\n".join(lines) + "\n"
