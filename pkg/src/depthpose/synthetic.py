"""Synthetic depth frames of a parametric head proxy at known poses.

The head is an ellipsoid with a smaller nose ellipsoid protruding from the
front surface, rendered by analytic ray intersection through a pinhole
camera.  Labels are exact by construction, which makes generated frames
usable as ground truth for end-to-end training and evaluation without any
real sensor data.

Camera frame: x right, y down, z forward (away from the camera).  The
nose protrudes toward the camera (negative z in the head frame) and sits
slightly below the head center so roll has an off-axis landmark.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .dataset_io import (
    BehindCameraError,
    PoseLabel,
    Sample,
    save_biwi_depth,
    save_calibration,
    save_pose_file,
    save_raw_depth,
)
from .depth_prep import CameraIntrinsics, DepthMap

DEFAULT_IMAGE_SIZE = (320, 240)
DEFAULT_INTRINSICS = CameraIntrinsics(fx=500.0, fy=500.0, cx=160.0, cy=120.0)

# (pitch, roll, yaw) half-ranges in degrees, the dataset's rotation spans.
DEFAULT_ANGLE_RANGES_DEG = (60.0, 50.0, 75.0)


@dataclass(frozen=True)
class HeadModel:
    """Ellipsoid head proxy with a nose protrusion.

    ``semi_axes_mm`` is (lateral, vertical, frontal); the nose is a second
    ellipsoid whose center is offset in the head frame so its tip clears
    the main surface.
    """

    semi_axes_mm: tuple[float, float, float] = (90.0, 120.0, 100.0)
    nose_semi_axes_mm: tuple[float, float, float] = (18.0, 22.0, 35.0)
    nose_offset_mm: tuple[float, float, float] = (0.0, 22.0, -85.0)
    surface_noise_sigma_mm: float = 3.0

    def __post_init__(self) -> None:
        if any(a <= 0 for a in self.semi_axes_mm + self.nose_semi_axes_mm):
            raise ValueError("semi-axes must be positive")
        if self.surface_noise_sigma_mm < 0:
            raise ValueError("noise sigma must be non-negative")
        if self.nose_tip_protrusion_mm <= 0:
            raise ValueError("nose must protrude beyond the main ellipsoid front")

    @property
    def nose_tip_protrusion_mm(self) -> float:
        reach = -self.nose_offset_mm[2] + self.nose_semi_axes_mm[2]
        return reach - self.semi_axes_mm[2]

    @property
    def max_extent_mm(self) -> float:
        return max(*self.semi_axes_mm, -self.nose_offset_mm[2] + self.nose_semi_axes_mm[2])


def _ray_grid(intrinsics: CameraIntrinsics, width: int, height: int) -> np.ndarray:
    """Per-pixel ray directions (H, W, 3) with unit z component."""
    us = (np.arange(width, dtype=np.float64) - intrinsics.cx) / intrinsics.fx
    vs = (np.arange(height, dtype=np.float64) - intrinsics.cy) / intrinsics.fy
    rays = np.empty((height, width, 3))
    rays[..., 0] = us[None, :]
    rays[..., 1] = vs[:, None]
    rays[..., 2] = 1.0
    return rays


def _ellipsoid_depth(
    rays: np.ndarray,
    center_mm: np.ndarray,
    rotation: np.ndarray,
    semi_axes: np.ndarray,
) -> np.ndarray:
    """Nearest-intersection depth of camera rays with a posed ellipsoid.

    Returns +inf where a ray misses.  Rays have unit z, so the ray
    parameter t of the nearest hit is directly the depth in mm.
    """
    d_head = rays @ rotation / semi_axes          # R^T applied to each ray
    c_head = (rotation.T @ center_mm) / semi_axes
    a = np.einsum("hwk,hwk->hw", d_head, d_head)
    b = d_head @ c_head
    disc = b * b - a * (c_head @ c_head - 1.0)
    hit = disc >= 0.0
    sqrt_disc = np.sqrt(np.where(hit, disc, 0.0))
    near = (b - sqrt_disc) / a
    t = np.full(rays.shape[:2], np.inf)
    ok = hit & (near > 0.0)
    t[ok] = near[ok]
    return t


def render_depth(
    model: HeadModel,
    pose: PoseLabel,
    intrinsics: CameraIntrinsics = DEFAULT_INTRINSICS,
    image_size: tuple[int, int] = DEFAULT_IMAGE_SIZE,
    rng: np.random.Generator | None = None,
    sequence_id: str = "00",
    frame_id: str = "00000",
) -> Sample:
    """Render one depth frame of the head proxy at the given pose.

    Gaussian surface noise of ``model.surface_noise_sigma_mm`` is added to
    hit pixels when an ``rng`` is supplied and sigma > 0.  Background
    pixels are invalid with depth 0.
    """
    width, height = image_size
    center = np.asarray(pose.head_center_mm, dtype=np.float64)
    if center[2] <= model.max_extent_mm:
        raise BehindCameraError(
            f"head center z={center[2]} mm must exceed the head extent "
            f"{model.max_extent_mm} mm"
        )
    rays = _ray_grid(intrinsics, width, height)
    depth = _ellipsoid_depth(rays, center, pose.rotation, np.asarray(model.semi_axes_mm))
    nose_center = center + pose.rotation @ np.asarray(model.nose_offset_mm)
    nose = _ellipsoid_depth(rays, nose_center, pose.rotation, np.asarray(model.nose_semi_axes_mm))
    depth = np.minimum(depth, nose)
    valid = np.isfinite(depth)
    if rng is not None and model.surface_noise_sigma_mm > 0:
        depth = depth + rng.normal(0.0, model.surface_noise_sigma_mm, size=depth.shape)
    data = np.where(valid, depth, 0.0)
    return Sample(
        depth=DepthMap(data=data, valid_mask=valid),
        label=pose,
        subject_id=sequence_id,
        sequence_id=sequence_id,
        frame_id=frame_id,
    )


def generate_dataset(
    n: int,
    angle_ranges_deg: tuple[float, float, float] = DEFAULT_ANGLE_RANGES_DEG,
    seed: int = 0,
    model: HeadModel = HeadModel(),
    intrinsics: CameraIntrinsics = DEFAULT_INTRINSICS,
    image_size: tuple[int, int] = DEFAULT_IMAGE_SIZE,
    center_mm: tuple[float, float, float] = (0.0, 0.0, 1000.0),
    center_jitter_mm: tuple[float, float, float] = (80.0, 60.0, 100.0),
) -> list[Sample]:
    """Generate ``n`` frames with poses drawn uniformly inside the ranges.

    Fully deterministic for a fixed seed: pose draws and surface noise all
    flow from one seeded generator.
    """
    if n <= 0:
        raise ValueError(f"sample count must be positive, got {n}")
    rng = np.random.default_rng(seed)
    ranges = np.asarray(angle_ranges_deg, dtype=np.float64)
    base = np.asarray(center_mm, dtype=np.float64)
    jitter = np.asarray(center_jitter_mm, dtype=np.float64)
    samples = []
    for i in range(n):
        euler = rng.uniform(-ranges, ranges)
        center = base + rng.uniform(-jitter, jitter)
        pose = PoseLabel.from_euler(euler, center)
        samples.append(
            render_depth(model, pose, intrinsics, image_size, rng=rng, frame_id=f"{i:05d}")
        )
    return samples


def write_dataset(
    samples: list[Sample],
    root: str | Path,
    intrinsics: CameraIntrinsics = DEFAULT_INTRINSICS,
    fmt: str = "raw",
    n_sequences: int = 24,
) -> Path:
    """Write samples to a dataset tree readable by :mod:`depthpose.dataset_io`.

    Frames are distributed round-robin over ``n_sequences`` sequence
    directories, each with its own calibration file.
    """
    if fmt not in ("raw", "biwi"):
        raise ValueError(f"unknown format {fmt!r}")
    root = Path(root)
    save_depth = save_raw_depth if fmt == "raw" else save_biwi_depth
    ext = "raw" if fmt == "raw" else "bin"
    counters = {}
    for i, sample in enumerate(samples):
        seq = f"{(i % n_sequences) + 1:02d}"
        seq_dir = root / seq
        if seq not in counters:
            seq_dir.mkdir(parents=True, exist_ok=True)
            save_calibration(intrinsics, seq_dir / "depth.cal")
            counters[seq] = 0
        frame = f"{counters[seq]:05d}"
        counters[seq] += 1
        save_depth(sample.depth, seq_dir / f"frame_{frame}_depth.{ext}")
        save_pose_file(sample.label, seq_dir / f"frame_{frame}_pose.txt")
    return root
