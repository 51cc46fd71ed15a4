"""Synthetic posed 3D scenes: point clouds, pinhole cameras, and an exact
visibility oracle under the ball-occlusion model.

Cameras use the world-to-camera convention x_cam = R x_world + t with the
optical axis along +z. A point occludes another when its ball (fixed radius)
intersects the camera-to-target segment and it is strictly nearer in depth;
coincident depths never occlude.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import fileio


class DegenerateSceneError(ValueError):
    """A scene spec left some camera with an empty view."""


@dataclass
class CameraPose:
    rotation: np.ndarray  # 3x3 orthonormal, world -> camera
    translation: np.ndarray  # 3-vector, meters
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    session_id: str = "default"

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64)
        self.translation = np.asarray(self.translation, dtype=np.float64)
        if self.rotation.shape != (3, 3):
            raise ValueError(f"rotation must be 3x3, got {self.rotation.shape}")
        if np.abs(self.rotation.T @ self.rotation - np.eye(3)).max() > 1e-9:
            raise ValueError("rotation is not orthonormal within 1e-9")
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point outside image")

    @property
    def forward(self) -> np.ndarray:
        """Optical axis in world coordinates (third row of R)."""
        return self.rotation[2]

    @property
    def center(self) -> np.ndarray:
        """Camera center in world coordinates."""
        return -self.rotation.T @ self.translation

    def to_camera(self, points: np.ndarray) -> np.ndarray:
        return points @ self.rotation.T + self.translation

    def project(self, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Project world points; returns (pixels (N,2), depths (N,))."""
        pc = self.to_camera(np.atleast_2d(points))
        z = pc[:, 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            u = self.fx * pc[:, 0] / z + self.cx
            v = self.fy * pc[:, 1] / z + self.cy
        return np.stack([u, v], axis=1), z

    def to_record(self) -> dict:
        return {
            "rotation": self.rotation.tolist(),
            "translation": self.translation.tolist(),
            "fx": self.fx,
            "fy": self.fy,
            "cx": self.cx,
            "cy": self.cy,
            "width": self.width,
            "height": self.height,
            "session_id": self.session_id,
        }

    @classmethod
    def from_record(cls, rec: dict) -> "CameraPose":
        return cls(
            rotation=np.array(rec["rotation"]),
            translation=np.array(rec["translation"]),
            fx=rec["fx"],
            fy=rec["fy"],
            cx=rec["cx"],
            cy=rec["cy"],
            width=rec["width"],
            height=rec["height"],
            session_id=rec.get("session_id", "default"),
        )


@dataclass
class ScenePointCloud:
    points: np.ndarray  # (N, 3) meters
    occlusion_radius: float = 0.0
    colors: np.ndarray | None = None  # (N, 3) in [0, 1]

    def __post_init__(self):
        self.points = np.atleast_2d(np.asarray(self.points, dtype=np.float64))
        if self.occlusion_radius < 0:
            raise ValueError("occlusion_radius must be >= 0")
        if self.colors is not None:
            self.colors = np.asarray(self.colors, dtype=np.float64)
            if self.colors.shape != self.points.shape:
                raise ValueError("colors must match points shape")

    def __len__(self) -> int:
        return self.points.shape[0]


@dataclass
class SceneImage:
    pixels: np.ndarray  # (H, W, 3) in [0, 1]
    pose: CameraPose
    visible_ids: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=np.int64))

    def __post_init__(self):
        self.visible_ids = np.asarray(self.visible_ids, dtype=np.int64)
        if self.pixels.shape[:2] != (self.pose.height, self.pose.width):
            raise ValueError(
                f"pixel dims {self.pixels.shape[:2]} != pose image size "
                f"({self.pose.height}, {self.pose.width})"
            )


@dataclass
class SceneSpec:
    n_points: int = 400
    extent: float = 10.0
    n_cameras: int = 8
    camera_ring_radius: float = 12.0
    occlusion_radius: float | None = None  # default: 1% of extent
    image_width: int = 320
    image_height: int = 320

    def __post_init__(self):
        if self.n_points < 1 or self.n_cameras < 2 or self.extent <= 0:
            raise ValueError("need n_points >= 1, n_cameras >= 2, extent > 0")
        if self.occlusion_radius is None:
            self.occlusion_radius = 0.01 * self.extent


def _look_at(position: np.ndarray, target: np.ndarray, up=(0.0, 0.0, 1.0)) -> np.ndarray:
    fwd = target - position
    n = np.linalg.norm(fwd)
    fwd = fwd / n if n > 1e-12 else np.array([0.0, 0.0, 1.0])
    up = np.asarray(up, dtype=np.float64)
    right = np.cross(fwd, up)
    if np.linalg.norm(right) < 1e-12:
        right = np.cross(fwd, (1.0, 0.0, 0.0))
    right /= np.linalg.norm(right)
    down = np.cross(fwd, right)
    r = np.stack([right, down, fwd])
    # snap to exact orthonormality for the pose invariant
    u, _, vt = np.linalg.svd(r)
    return u @ vt


def generate_scene(seed: int, spec: SceneSpec) -> tuple[ScenePointCloud, list[CameraPose]]:
    """Deterministic synthetic scene: a colored point blob ringed by cameras
    that all look at its centroid."""
    rng = np.random.default_rng(seed)
    pts = rng.uniform(-spec.extent / 2, spec.extent / 2, size=(spec.n_points, 3))
    colors = rng.uniform(0.1, 1.0, size=(spec.n_points, 3))
    cloud = ScenePointCloud(pts, occlusion_radius=spec.occlusion_radius, colors=colors)

    centroid = pts.mean(axis=0)
    focal = max(
        0.9 * spec.image_width * spec.camera_ring_radius / max(spec.extent, 1e-9) / 2,
        1.0,
    )
    poses = []
    for k in range(spec.n_cameras):
        theta = 2 * np.pi * k / spec.n_cameras
        height = 0.15 * spec.camera_ring_radius * np.sin(3.1 * theta + 0.7)
        pos = centroid + np.array(
            [
                spec.camera_ring_radius * np.cos(theta),
                spec.camera_ring_radius * np.sin(theta),
                height,
            ]
        )
        r = _look_at(pos, centroid)
        pose = CameraPose(
            rotation=r,
            translation=-r @ pos,
            fx=focal,
            fy=focal,
            cx=spec.image_width / 2,
            cy=spec.image_height / 2,
            width=spec.image_width,
            height=spec.image_height,
            session_id=f"seed{seed}",
        )
        poses.append(pose)

    for i, pose in enumerate(poses):
        if visible_points(cloud, pose).size == 0:
            raise DegenerateSceneError(f"camera {i} sees no points; adjust the spec")
    return cloud, poses


def visible_points(cloud: ScenePointCloud, pose: CameraPose) -> np.ndarray:
    """Sorted indices of points that project into the image and are not
    blocked by any other point's occlusion ball strictly in front of them."""
    if len(cloud) == 0:
        raise ValueError("empty point cloud")
    pix, z = pose.project(cloud.points)
    in_view = (
        (z > 0)
        & (pix[:, 0] >= 0)
        & (pix[:, 0] < pose.width)
        & (pix[:, 1] >= 0)
        & (pix[:, 1] < pose.height)
    )
    candidates = np.flatnonzero(in_view)
    r = cloud.occlusion_radius
    if r == 0 or candidates.size == 0:
        return candidates

    pc = pose.to_camera(cloud.points)  # (N, 3), camera at origin
    tgt = pc[candidates]  # (C, 3)
    # closest approach of each point j to each segment origin -> target i
    dots = pc @ tgt.T  # (N, C): P_j . P_i
    norm2 = np.einsum("ij,ij->i", tgt, tgt)  # (C,)
    t = np.clip(dots / norm2[None, :], 0.0, 1.0)  # (N, C)
    d2 = (
        np.einsum("ij,ij->i", pc, pc)[:, None]
        - 2.0 * t * dots
        + t * t * norm2[None, :]
    )
    hits = d2 < r * r  # ball intersects the segment
    nearer = pc[:, 2][:, None] < pc[candidates, 2][None, :]  # strict depth order
    occluder = hits & nearer
    occluder[candidates, np.arange(candidates.size)] = False  # a point never occludes itself
    return candidates[~occluder.any(axis=0)]


def _background(pose: CameraPose) -> np.ndarray:
    """Deterministic procedural backdrop, a low-frequency pattern tied to the
    viewing direction so different views disagree away from the point splats."""
    h, w = pose.height, pose.width
    v, u = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    f = pose.forward
    phase = 13.7 * f[0] + 7.3 * f[1] + 3.1 * f[2]
    base = 0.35 + 0.15 * np.sin(0.05 * u + 2.0 * phase) * np.cos(0.04 * v - phase)
    img = np.stack([base, 0.35 + 0.5 * (base - 0.35), np.flip(base, axis=1)], axis=2)
    return np.clip(img, 0.0, 1.0)


def render(cloud: ScenePointCloud, pose: CameraPose, splat_radius: int = 2) -> SceneImage:
    """Z-buffered splat of the visible points over the procedural background."""
    if cloud.colors is None:
        raise ValueError("render requires per-point colors")
    vis = visible_points(cloud, pose)
    img = _background(pose)
    pix, z = pose.project(cloud.points)
    # paint far-to-near so nearer splats overwrite
    order = vis[np.argsort(-z[vis], kind="stable")]
    h, w = pose.height, pose.width
    for i in order:
        u, v = pix[i]
        u0, u1 = max(int(round(u)) - splat_radius, 0), min(int(round(u)) + splat_radius + 1, w)
        v0, v1 = max(int(round(v)) - splat_radius, 0), min(int(round(v)) + splat_radius + 1, h)
        img[v0:v1, u0:u1] = cloud.colors[i]
    return SceneImage(pixels=img, pose=pose, visible_ids=vis)


def render_with_buffers(
    cloud: ScenePointCloud, pose: CameraPose, splat_radius: int = 2
) -> tuple[SceneImage, np.ndarray, np.ndarray]:
    """Like render, but also returns the depth buffer and per-pixel owning
    point id (-1 on background), which downstream code turns into exact
    dense disparity/flow ground truth."""
    if cloud.colors is None:
        raise ValueError("render requires per-point colors")
    vis = visible_points(cloud, pose)
    img = _background(pose)
    depth = np.full((pose.height, pose.width), np.inf)
    ids = np.full((pose.height, pose.width), -1, dtype=np.int64)
    pix, z = pose.project(cloud.points)
    order = vis[np.argsort(-z[vis], kind="stable")]
    h, w = pose.height, pose.width
    for i in order:
        u, v = pix[i]
        u0, u1 = max(int(round(u)) - splat_radius, 0), min(int(round(u)) + splat_radius + 1, w)
        v0, v1 = max(int(round(v)) - splat_radius, 0), min(int(round(v)) + splat_radius + 1, h)
        img[v0:v1, u0:u1] = cloud.colors[i]
        depth[v0:v1, u0:u1] = z[i]
        ids[v0:v1, u0:u1] = i
    return SceneImage(pixels=img, pose=pose, visible_ids=vis), depth, ids


def ground_truth_correspondences(
    img_a: SceneImage, img_b: SceneImage, cloud: ScenePointCloud
) -> np.ndarray:
    """Exact matches from shared geometry: one (pixel_a, pixel_b) row per
    co-visible point, as a (K, 2, 2) array ([:, 0] = pixel in image a)."""
    common = np.intersect1d(img_a.visible_ids, img_b.visible_ids)
    if common.size == 0:
        return np.empty((0, 2, 2))
    pa, _ = img_a.pose.project(cloud.points[common])
    pb, _ = img_b.pose.project(cloud.points[common])
    return np.stack([pa, pb], axis=1)


# ---------------------------------------------------------------------------
# scene directory layout: cloud.bin / colors.bin / cameras.json / meta.json /
# images/NNNN.ppm


def save_scene(directory, cloud: ScenePointCloud, images: list[SceneImage]) -> None:
    directory = Path(directory)
    (directory / "images").mkdir(parents=True, exist_ok=True)
    n = np.uint64(len(cloud))
    with open(directory / "cloud.bin", "wb") as f:
        f.write(n.tobytes())
        f.write(np.ascontiguousarray(cloud.points, dtype="<f4").tobytes())
    if cloud.colors is not None:
        with open(directory / "colors.bin", "wb") as f:
            f.write(n.tobytes())
            f.write(np.ascontiguousarray(cloud.colors, dtype="<f4").tobytes())
    records = [img.pose.to_record() for img in images]
    (directory / "cameras.json").write_text(json.dumps(records, indent=1))
    (directory / "meta.json").write_text(
        json.dumps({"occlusion_radius": cloud.occlusion_radius})
    )
    for i, img in enumerate(images):
        fileio.write_ppm(directory / "images" / f"{i:04d}.ppm", img.pixels)


def load_scene(directory) -> tuple[ScenePointCloud, list[SceneImage]]:
    directory = Path(directory)
    with open(directory / "cloud.bin", "rb") as f:
        n = int(np.frombuffer(f.read(8), dtype=np.uint64)[0])
        pts = np.frombuffer(f.read(n * 12), dtype="<f4").reshape(n, 3).astype(np.float64)
    colors = None
    if (directory / "colors.bin").exists():
        with open(directory / "colors.bin", "rb") as f:
            f.read(8)
            colors = np.frombuffer(f.read(n * 12), dtype="<f4").reshape(n, 3).astype(np.float64)
    meta = json.loads((directory / "meta.json").read_text())
    cloud = ScenePointCloud(pts, occlusion_radius=meta["occlusion_radius"], colors=colors)
    records = json.loads((directory / "cameras.json").read_text())
    images = []
    for i, rec in enumerate(records):
        pose = CameraPose.from_record(rec)
        pixels = fileio.read_ppm(directory / "images" / f"{i:04d}.ppm")
        images.append(SceneImage(pixels=pixels, pose=pose, visible_ids=visible_points(cloud, pose)))
    return cloud, images
