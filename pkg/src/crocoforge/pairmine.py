"""Pair scoring, greedy diverse selection, and co-visible crop extraction.

The quality score favors well-overlapping views roughly 60 degrees apart:
score = iou * session_factor * 4 cos(angle) (1 - cos(angle)), which peaks at 1
for angle = 60 deg, vanishes at 0 and 90 deg, and goes negative beyond 90 deg.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import fileio
from .overlap import session_factor as session_factor_fn
from .overlap import vertex_iou, viewpoint_angle
from .scene import SceneImage, ground_truth_correspondences

CROP_SIZE = 256


@dataclass
class MiningConfig:
    score_threshold: float = 0.1
    redundancy_iou: float = 0.75
    crop_grid_stride: int = 128
    min_matches_per_crop: int = 32
    session_rule: bool = False

    def __post_init__(self):
        if not 0 < self.redundancy_iou <= 1:
            raise ValueError("redundancy_iou must be in (0, 1]")
        if self.score_threshold < 0:
            raise ValueError("score_threshold must be >= 0")


@dataclass
class ScoredPair:
    image_a: int
    image_b: int
    iou: float
    angle: float
    score: float


@dataclass
class CropPair:
    crop_a: np.ndarray
    crop_b: np.ndarray
    pair_id: str
    a_origin: tuple[int, int]
    b_origin: tuple[int, int]
    match_count: int


def pair_score(iou: float, angle: float, session_factor: float = 1.0) -> float:
    if not 0.0 <= iou <= 1.0:
        raise ValueError(f"iou out of range: {iou}")
    c = math.cos(angle)
    return iou * session_factor * 4.0 * c * (1.0 - c)


def greedy_select(
    scores: np.ndarray, ious: np.ndarray, config: MiningConfig
) -> list[tuple[int, int]]:
    """Iteratively pick the highest-scoring alive pair, then retire both images
    and any alive image whose raw IoU with either exceeds the redundancy cap.

    Ties break lexicographically on (min index, max index) for determinism.
    """
    scores = np.asarray(scores, dtype=np.float64)
    ious = np.asarray(ious, dtype=np.float64)
    n = scores.shape[0]
    if scores.shape != (n, n) or ious.shape != (n, n):
        raise ValueError("score/iou tables must be square and same size")
    alive = np.ones(n, dtype=bool)
    selected: list[tuple[int, int]] = []
    while True:
        best = None
        best_score = -np.inf
        for i in range(n):
            if not alive[i]:
                continue
            for j in range(i + 1, n):
                if alive[j] and scores[i, j] > best_score:
                    best_score = scores[i, j]
                    best = (i, j)
        if best is None or best_score < config.score_threshold:
            break
        i, j = best
        selected.append(best)
        alive[i] = alive[j] = False
        redundant = alive & (
            (ious[:, i] > config.redundancy_iou) | (ious[:, j] > config.redundancy_iou)
        )
        alive[redundant] = False
    return selected


def generate_crops(
    pair: tuple[SceneImage, SceneImage],
    matches: np.ndarray,
    config: MiningConfig,
    pair_id: str = "",
) -> list[CropPair]:
    """Cut co-visible 256x256 crop pairs: a stride grid on image A, B windows
    centered on the median of each A-window's matched B coordinates, kept
    greedily by match count with non-overlapping A windows."""
    img_a, img_b = pair
    ha, wa = img_a.pixels.shape[:2]
    hb, wb = img_b.pixels.shape[:2]
    if min(ha, wa, hb, wb) < CROP_SIZE:
        raise ValueError(f"images must be at least {CROP_SIZE}px on each side")
    if matches.shape[0] == 0:
        return []

    pa, pb = matches[:, 0], matches[:, 1]
    candidates = []
    for oy in range(0, ha - CROP_SIZE + 1, config.crop_grid_stride):
        for ox in range(0, wa - CROP_SIZE + 1, config.crop_grid_stride):
            inside = (
                (pa[:, 0] >= ox)
                & (pa[:, 0] < ox + CROP_SIZE)
                & (pa[:, 1] >= oy)
                & (pa[:, 1] < oy + CROP_SIZE)
            )
            count = int(np.count_nonzero(inside))
            if count < config.min_matches_per_crop:
                continue
            center = np.median(pb[inside], axis=0)
            # half-up rounding so a dense symmetric match set maps a window to
            # the identically-placed window under identity geometry
            bx = int(np.clip(np.floor(center[0] - CROP_SIZE / 2 + 0.5), 0, wb - CROP_SIZE))
            by = int(np.clip(np.floor(center[1] - CROP_SIZE / 2 + 0.5), 0, hb - CROP_SIZE))
            candidates.append((count, (ox, oy), (bx, by)))

    # highest match count first; grid order breaks ties deterministically
    candidates.sort(key=lambda c: -c[0])
    kept: list[CropPair] = []
    for count, (ox, oy), (bx, by) in candidates:
        overlapping = any(
            abs(ox - k.a_origin[0]) < CROP_SIZE and abs(oy - k.a_origin[1]) < CROP_SIZE
            for k in kept
        )
        if overlapping:
            continue
        kept.append(
            CropPair(
                crop_a=img_a.pixels[oy : oy + CROP_SIZE, ox : ox + CROP_SIZE],
                crop_b=img_b.pixels[by : by + CROP_SIZE, bx : bx + CROP_SIZE],
                pair_id=pair_id,
                a_origin=(ox, oy),
                b_origin=(bx, by),
                match_count=count,
            )
        )
    return kept


@dataclass
class SceneEntry:
    name: str
    images: list[SceneImage]
    cloud: object  # ScenePointCloud


def score_scene(images: list[SceneImage], config: MiningConfig):
    """Full symmetric IoU/angle/score tables for one scene's image list."""
    n = len(images)
    ious = np.zeros((n, n))
    angles = np.zeros((n, n))
    scores = np.zeros((n, n))
    for i in range(n):
        for j in range(i + 1, n):
            iou = vertex_iou(images[i].visible_ids, images[j].visible_ids)
            ang = viewpoint_angle(images[i].pose, images[j].pose)
            sf = 1.0
            if config.session_rule:
                sf = session_factor_fn(
                    images[i].pose.session_id, images[j].pose.session_id
                )
            ious[i, j] = ious[j, i] = iou
            angles[i, j] = angles[j, i] = ang
            scores[i, j] = scores[j, i] = pair_score(iou, ang, sf)
    return ious, angles, scores


def mine_dataset(scenes: list[SceneEntry], config: MiningConfig, out_dir) -> Path:
    """End-to-end mining: overlap tables -> scores -> greedy selection -> crop
    pairs, written as an NDJSON manifest plus paired PPM crop files."""
    out_dir = Path(out_dir)
    (out_dir / "pairs").mkdir(parents=True, exist_ok=True)
    records = []
    for entry in scenes:
        ious, angles, scores = score_scene(entry.images, config)
        selected = greedy_select(scores, ious, config)
        if not selected:
            records.append({"scene": entry.name, "note": "no pairs selected"})
            continue
        for i, j in selected:
            pair_id = f"{entry.name}_{i:03d}_{j:03d}"
            matches = ground_truth_correspondences(
                entry.images[i], entry.images[j], entry.cloud
            )
            crops = generate_crops(
                (entry.images[i], entry.images[j]), matches, config, pair_id
            )
            for k, crop in enumerate(crops):
                fileio.write_ppm(out_dir / "pairs" / f"{pair_id}_{k}_a.ppm", crop.crop_a)
                fileio.write_ppm(out_dir / "pairs" / f"{pair_id}_{k}_b.ppm", crop.crop_b)
            records.append(
                {
                    "pair_id": pair_id,
                    "scene": entry.name,
                    "image_a": i,
                    "image_b": j,
                    "iou": round(float(ious[i, j]), 12),
                    "angle_deg": round(float(np.degrees(angles[i, j])), 12),
                    "score": round(float(scores[i, j]), 12),
                    "crops": [
                        {
                            "a_origin": list(c.a_origin),
                            "b_origin": list(c.b_origin),
                            "match_count": c.match_count,
                        }
                        for c in crops
                    ],
                }
            )
    manifest = out_dir / "manifest.ndjson"
    with open(manifest, "w") as f:
        for rec in records:
            f.write(json.dumps(rec, sort_keys=True) + "\n")
    return manifest


def load_manifest(path) -> list[dict]:
    return [json.loads(line) for line in Path(path).read_text().splitlines() if line]
