"""Pairwise overlap between posed images: visible-vertex IoU (with or without
ball occlusion), volumetric frustum IoU, and the viewpoint angle.

Frustum IoU has no closed form for general pose pairs, so it is estimated by
deterministic low-discrepancy sampling (Halton) of the union bounding box;
documented tolerance 0.02.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import numpy as np
from scipy.stats import qmc

from .scene import CameraPose, ScenePointCloud

DEFAULT_DEPTH_RANGE = (0.1, 50.0)
FRUSTUM_SAMPLES = 1 << 17  # >= 1e5, power of two keeps Halton balanced


class OverlapMethod(str, Enum):
    vertex_iou = "vertex_iou"
    occluded_vertex_iou = "occluded_vertex_iou"
    frustum_iou = "frustum_iou"


@dataclass
class OverlapScore:
    iou: float
    viewpoint_angle: float
    method: OverlapMethod
    session_factor: float = 1.0

    def __post_init__(self):
        if not 0.0 <= self.iou <= 1.0:
            raise ValueError(f"iou out of range: {self.iou}")
        if not 0.0 <= self.viewpoint_angle <= np.pi:
            raise ValueError(f"viewpoint angle out of range: {self.viewpoint_angle}")
        if self.session_factor not in (1.0, 0.8):
            raise ValueError(f"session factor must be 1.0 or 0.8, got {self.session_factor}")


def vertex_iou(vis_a, vis_b) -> float:
    """|A ∩ B| / |A ∪ B| over visible point indices; 0 when both are empty."""
    a, b = set(np.asarray(vis_a).tolist()), set(np.asarray(vis_b).tolist())
    union = len(a | b)
    if union == 0:
        return 0.0
    return len(a & b) / union


def viewpoint_angle(pose_a: CameraPose, pose_b: CameraPose) -> float:
    """Angle between the two optical axes, in [0, pi]."""
    cosang = float(np.dot(pose_a.forward, pose_b.forward))
    return float(np.arccos(np.clip(cosang, -1.0, 1.0)))


def session_factor(session_a: str, session_b: str) -> float:
    """0.8 when both images come from the same capture session, else 1.0."""
    return 0.8 if session_a == session_b else 1.0


def _frustum_corners(pose: CameraPose, near: float, far: float) -> np.ndarray:
    """World coordinates of the 8 corners of the truncated view frustum."""
    us = np.array([0.0, pose.width, 0.0, pose.width])
    vs = np.array([0.0, 0.0, pose.height, pose.height])
    corners = []
    for z in (near, far):
        x = (us - pose.cx) / pose.fx * z
        y = (vs - pose.cy) / pose.fy * z
        cam = np.stack([x, y, np.full(4, z)], axis=1)
        corners.append((cam - pose.translation) @ pose.rotation)
    return np.concatenate(corners)


def _in_frustum(points: np.ndarray, pose: CameraPose, near: float, far: float) -> np.ndarray:
    pix, z = pose.project(points)
    return (
        (z > near)
        & (z < far)
        & (pix[:, 0] >= 0)
        & (pix[:, 0] < pose.width)
        & (pix[:, 1] >= 0)
        & (pix[:, 1] < pose.height)
    )


def frustum_iou(
    pose_a: CameraPose,
    pose_b: CameraPose,
    depth_range: tuple[float, float] = DEFAULT_DEPTH_RANGE,
    n_samples: int = FRUSTUM_SAMPLES,
) -> float:
    """Volume IoU of the two truncated view frusta, Monte Carlo over a fixed
    Halton sequence in the union's bounding box."""
    near, far = depth_range
    if not 0 < near < far:
        raise ValueError(f"need 0 < near < far, got {depth_range}")
    corners = np.concatenate(
        [_frustum_corners(pose_a, near, far), _frustum_corners(pose_b, near, far)]
    )
    lo, hi = corners.min(axis=0), corners.max(axis=0)
    sampler = qmc.Halton(d=3, scramble=False)
    pts = lo + sampler.random(n_samples) * (hi - lo)
    in_a = _in_frustum(pts, pose_a, near, far)
    in_b = _in_frustum(pts, pose_b, near, far)
    union = int(np.count_nonzero(in_a | in_b))
    if union == 0:
        return 0.0
    return int(np.count_nonzero(in_a & in_b)) / union


def pseudo_cloud_from_planes(planes: list[dict]) -> ScenePointCloud:
    """Build a pseudo point cloud from oriented planar patches: each plane
    contributes a 7 x 11 grid of points spanning 10 m x 6 m."""
    pts = []
    for plane in planes:
        center = np.asarray(plane["center"], dtype=np.float64)
        normal = np.asarray(plane["normal"], dtype=np.float64)
        n = np.linalg.norm(normal)
        if n == 0:
            raise ValueError("plane normal must be non-zero")
        normal = normal / n
        # in-plane frame: u spans the 10 m direction, v the 6 m direction
        helper = np.array([0.0, 1.0, 0.0])
        if abs(np.dot(helper, normal)) > 0.99:
            helper = np.array([0.0, 0.0, 1.0])
        u = np.cross(helper, normal)
        u /= np.linalg.norm(u)
        v = np.cross(normal, u)
        for a in np.linspace(-5.0, 5.0, 11):
            for b in np.linspace(-3.0, 3.0, 7):
                pts.append(center + a * u + b * v)
    if not pts:
        return ScenePointCloud(np.empty((0, 3)))
    return ScenePointCloud(np.array(pts))


# ---------------------------------------------------------------------------
# persistence: packed upper-triangular matrix + JSON sidecar


def save_overlap_matrix(path, matrix: np.ndarray, image_names: list[str], method: OverlapMethod) -> None:
    """Store the strict upper triangle of a symmetric overlap matrix as raw
    little-endian float32, with a JSON sidecar naming images and method."""
    matrix = np.asarray(matrix)
    n = matrix.shape[0]
    if matrix.shape != (n, n) or n != len(image_names):
        raise ValueError("matrix must be square and match the image list")
    iu = np.triu_indices(n, k=1)
    Path(path).write_bytes(np.ascontiguousarray(matrix[iu], dtype="<f4").tobytes())
    sidecar = {"images": list(image_names), "method": method.value, "n": n}
    Path(str(path) + ".json").write_text(json.dumps(sidecar, indent=1))


def load_overlap_matrix(path) -> tuple[np.ndarray, list[str], OverlapMethod]:
    sidecar = json.loads(Path(str(path) + ".json").read_text())
    n = sidecar["n"]
    tri = np.frombuffer(Path(path).read_bytes(), dtype="<f4")
    matrix = np.zeros((n, n), dtype=np.float64)
    iu = np.triu_indices(n, k=1)
    matrix[iu] = tri
    matrix += matrix.T
    return matrix, sidecar["images"], OverlapMethod(sidecar["method"])
