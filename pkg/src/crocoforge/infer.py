"""Confidence-weighted tiled inference plus dense-prediction metrics."""
from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

import numpy as np
from scipy.special import expit

from . import model as M
from .tensor import ContractViolation, Tensor


class MergeWeighting(str, Enum):
    stereo = "stereo"  # w = exp(-2*5*3*(sigmoid(d'/3) - 0.5))
    flow = "flow"  # w = exp(-2*2*5*(sigmoid(d'/5) - 0.5))
    unbounded = "unbounded"  # w = exp(-3 d')


@dataclass(frozen=True)
class TilePlan:
    """Tile origins covering an image, row-major; the last row/column is
    clamped so every tile lies fully inside the frame."""

    tile_size: tuple[int, int]  # (w, h)
    overlap_ratio: float
    origins: tuple[tuple[int, int], ...]  # (x, y), row-major


def _axis_origins(size: int, tile: int, overlap: float) -> list[int]:
    stride = tile * (1.0 - overlap)
    if stride <= 0:
        raise ContractViolation(f"overlap {overlap} leaves a non-positive stride")
    origins = []
    pos = 0.0
    while True:
        o = min(int(round(pos)), size - tile)
        if not origins or o > origins[-1]:
            origins.append(o)
        if o >= size - tile:
            break
        pos += stride
    return origins


def plan_tiles(
    image_size: tuple[int, int], tile_size: tuple[int, int], overlap: float
) -> TilePlan:
    """Grid of tile origins with stride tile*(1-overlap), clamped at the far
    edge; sizes and origins follow the (width, height) / (x, y) convention.
    A tile larger than the image is a contract violation."""
    w, h = image_size
    tw, th = tile_size
    if th > h or tw > w:
        raise ContractViolation(f"tile {tile_size} exceeds image {image_size}")
    if not (0.0 <= overlap < 1.0):
        raise ContractViolation(f"overlap {overlap} outside [0, 1)")
    ys = _axis_origins(h, th, overlap)
    xs = _axis_origins(w, tw, overlap)
    return TilePlan(
        tile_size=(tw, th),
        overlap_ratio=overlap,
        origins=tuple((x, y) for y in ys for x in xs),
    )


def merge_weight(d_raw: np.ndarray, kind: MergeWeighting) -> np.ndarray:
    """Per-pixel confidence weight from the raw scale channel: a monotone
    decreasing map, so low predicted scale (high confidence) dominates."""
    d_raw = np.asarray(d_raw, dtype=np.float64)
    kind = MergeWeighting(kind)
    if kind is MergeWeighting.stereo:
        return np.exp(-2.0 * 5.0 * 3.0 * (expit(d_raw / 3.0) - 0.5))
    if kind is MergeWeighting.flow:
        return np.exp(-2.0 * 2.0 * 5.0 * (expit(d_raw / 5.0) - 0.5))
    return np.exp(-3.0 * d_raw)


def _forward_numpy(
    img_a: np.ndarray,
    img_b: np.ndarray,
    config: M.ModelConfig,
    params: dict,
    scale_param: M.ScaleParam,
) -> tuple[np.ndarray, np.ndarray]:
    pred = M.forward_dense(img_a, img_b, config, params, scale_param)
    return pred.mu.data.copy(), pred.d_raw.data.copy()


def tiled_predict(
    img_a: np.ndarray,
    img_b: np.ndarray,
    config: M.ModelConfig,
    params: dict,
    scale_param: M.ScaleParam,
    tile_hw: tuple[int, int] | None = None,
    overlap: float = 0.5,
    weighting: MergeWeighting | None = None,
    clamp: tuple[float, float] | None = None,
    shift_secondary: bool = False,
) -> tuple[np.ndarray, np.ndarray]:
    """Run the dense model on overlapping tiles of both views and merge the
    per-tile predictions by confidence-weighted averaging.

    With a single tile covering the whole image the result is bitwise equal to
    the untiled forward pass.  ``shift_secondary`` additionally shifts the
    second view's tile window by half a stride (off by default).
    Returns (mu, d_raw_merged)."""
    h, w = img_a.shape[:2]
    if tile_hw is None:
        tile_hw = (h, w)
    if weighting is None:
        weighting = {
            M.ScaleParam.stereo_bounded: MergeWeighting.stereo,
            M.ScaleParam.flow_bounded: MergeWeighting.flow,
            M.ScaleParam.unbounded: MergeWeighting.unbounded,
        }[scale_param]
    plan = plan_tiles((w, h), (tile_hw[1], tile_hw[0]), overlap)
    tw, th = plan.tile_size
    if len(plan.origins) == 1 and plan.tile_size == (w, h):
        mu, d_raw = _forward_numpy(img_a, img_b, config, params, scale_param)
        if clamp is not None:
            mu = np.clip(mu, clamp[0], clamp[1])
        return mu, d_raw

    c = config.out_channels
    acc_mu = np.zeros((h, w, c))
    acc_d = np.zeros((h, w))
    acc_w = np.zeros((h, w))
    half = (int(round(th * (1.0 - overlap) / 2)), int(round(tw * (1.0 - overlap) / 2)))
    for (x, y) in plan.origins:
        tile_a = img_a[y : y + th, x : x + tw]
        if shift_secondary:
            yb = min(max(y + half[0], 0), h - th)
            xb = min(max(x + half[1], 0), w - tw)
        else:
            yb, xb = y, x
        tile_b = img_b[yb : yb + th, xb : xb + tw]
        mu, d_raw = _forward_numpy(tile_a, tile_b, config, params, scale_param)
        wgt = merge_weight(d_raw, weighting)
        acc_mu[y : y + th, x : x + tw] += mu * wgt[..., None]
        acc_d[y : y + th, x : x + tw] += d_raw * wgt
        acc_w[y : y + th, x : x + tw] += wgt
    mu = acc_mu / acc_w[..., None]
    d_raw = acc_d / acc_w
    if clamp is not None:
        mu = np.clip(mu, clamp[0], clamp[1])
    return mu, d_raw


# ---------------------------------------------------------------------------
# metrics


def _errors(pred: np.ndarray, gt: np.ndarray, valid: np.ndarray | None) -> np.ndarray:
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ContractViolation(f"shape mismatch {pred.shape} vs {gt.shape}")
    if pred.ndim == 3 and pred.shape[-1] > 1:
        err = np.sqrt(((pred - gt) ** 2).sum(axis=-1))
    else:
        err = np.abs(pred - gt).reshape(gt.shape[:2])
    if valid is not None:
        err = err[np.asarray(valid, dtype=bool)]
    else:
        err = err.ravel()
    if err.size == 0:
        raise ContractViolation("no valid pixels to score")
    return err


def epe(pred: np.ndarray, gt: np.ndarray, valid: np.ndarray | None = None) -> float:
    """Mean endpoint error (absolute error for single-channel fields)."""
    return float(_errors(pred, gt, valid).mean())


avg_err = epe


def bad_pixel_pct(
    pred: np.ndarray, gt: np.ndarray, tau: float, valid: np.ndarray | None = None
) -> float:
    """Percentage of pixels with error strictly greater than tau."""
    e = _errors(pred, gt, valid)
    return float((e > tau).mean() * 100.0)


def outlier_pct_3px(pred: np.ndarray, gt: np.ndarray, valid: np.ndarray | None = None) -> float:
    return bad_pixel_pct(pred, gt, 3.0, valid)


def evaluate(
    pred: np.ndarray, gt: np.ndarray, valid: np.ndarray | None = None
) -> dict[str, float]:
    e = _errors(pred, gt, valid)
    return {
        "epe": float(e.mean()),
        "bad_0.5": float((e > 0.5).mean() * 100.0),
        "bad_1": float((e > 1.0).mean() * 100.0),
        "bad_3": float((e > 3.0).mean() * 100.0),
        "outlier_3px": float((e > 3.0).mean() * 100.0),
    }
