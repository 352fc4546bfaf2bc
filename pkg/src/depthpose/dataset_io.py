"""Dataset ingestion: Biwi-format depth/pose/calibration files, projection,
Euler-angle conversion, angle normalization, and the train/test split.

Two on-disk depth encodings are supported:

* ``biwi`` -- the run-length-encoded binary shipped with the Biwi Kinect
  head pose data: ``int32 width, int32 height``, then alternating
  ``int32 n_empty, int32 n_filled`` run headers, each followed by
  ``n_filled`` little-endian ``int16`` depths in millimeters.  Zero depth
  means "no measurement".
* ``raw`` -- a portable fallback so the full pipeline runs without the
  real dataset: ``uint32 width, uint32 height`` (8-byte header), then
  ``width*height`` little-endian ``uint16`` depths row-major, zero = invalid.

Directory layout for both: ``<root>/<seq>/frame_<n>_depth.<ext>`` plus
``frame_<n>_pose.txt`` and a per-sequence ``depth.cal`` whose first nine
numbers form the 3x3 intrinsic matrix.
"""

from __future__ import annotations

import logging
import math
import re
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .depth_prep import CameraIntrinsics, DepthMap

logger = logging.getLogger(__name__)

TEST_SEQUENCES = ("01", "12")
ALL_SEQUENCES = tuple(f"{i:02d}" for i in range(1, 25))

# Per-angle normalization scales in degrees, (pitch, roll, yaw) order,
# matching the dataset's rotation spans.
DEFAULT_ANGLE_SCALES_DEG = (60.0, 50.0, 75.0)

# Intrinsic rotation order: yaw about the vertical axis, then pitch about
# the lateral axis, then roll about the frontal axis.  Camera frame is
# x-right, y-down, z-forward.  Kept as a constant so an alternate
# decomposition can be validated against dataset ground truth.
EULER_CONVENTION = "intrinsic yaw(Y) -> pitch(X) -> roll(Z)"

ROTATION_TOLERANCE = 1e-3
GIMBAL_LOCK_MARGIN_DEG = 0.5

_ORTHO_TOL = ROTATION_TOLERANCE


class DepthFormatError(ValueError):
    """Malformed binary depth file; ``offset`` is the failing byte position."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


class PoseFormatError(ValueError):
    """Malformed or non-orthonormal pose annotation."""


class BehindCameraError(ValueError):
    """Point has non-positive depth, cannot be projected."""


class GimbalLockError(ValueError):
    """Pitch within the degenerate region where yaw/roll are non-unique."""


class SplitConfigError(ValueError):
    """Dataset is missing sequences required by the split."""


@dataclass
class PoseLabel:
    """Ground-truth head pose: rotation matrix, 3D center (mm), Euler angles.

    ``euler_deg`` is (pitch, roll, yaw) in degrees under EULER_CONVENTION.
    """

    rotation: np.ndarray
    head_center_mm: np.ndarray
    euler_deg: np.ndarray

    def __post_init__(self) -> None:
        self.rotation = np.asarray(self.rotation, dtype=np.float64)
        self.head_center_mm = np.asarray(self.head_center_mm, dtype=np.float64)
        self.euler_deg = np.asarray(self.euler_deg, dtype=np.float64)

    @classmethod
    def from_rotation(cls, rotation: np.ndarray, head_center_mm: np.ndarray) -> "PoseLabel":
        rotation = np.asarray(rotation, dtype=np.float64)
        return cls(rotation, np.asarray(head_center_mm, dtype=np.float64),
                   rotation_to_euler(rotation))

    @classmethod
    def from_euler(cls, euler_deg: np.ndarray, head_center_mm: np.ndarray) -> "PoseLabel":
        euler_deg = np.asarray(euler_deg, dtype=np.float64)
        return cls(euler_to_rotation(euler_deg), np.asarray(head_center_mm, dtype=np.float64),
                   euler_deg)


@dataclass
class Sample:
    """One dataset frame: depth map plus its pose label and identifiers."""

    depth: DepthMap
    label: PoseLabel
    subject_id: str
    sequence_id: str
    frame_id: str


@dataclass(frozen=True)
class AngleNormalizer:
    """Maps Euler angles (degrees) to the network's [-1, 1] target range."""

    scale_deg: tuple[float, float, float] = DEFAULT_ANGLE_SCALES_DEG

    def __post_init__(self) -> None:
        if any(s <= 0 for s in self.scale_deg):
            raise ValueError(f"angle scales must be positive, got {self.scale_deg}")

    def normalize(self, euler_deg: np.ndarray) -> np.ndarray:
        scaled = np.asarray(euler_deg, dtype=np.float64) / np.asarray(self.scale_deg)
        if np.any(np.abs(scaled) > 1.0):
            logger.warning(
                "angles %s exceed scales %s; clamping to [-1, 1]",
                np.asarray(euler_deg).tolist(), self.scale_deg,
            )
            scaled = np.clip(scaled, -1.0, 1.0)
        return scaled

    def denormalize(self, normalized: np.ndarray) -> np.ndarray:
        return np.asarray(normalized, dtype=np.float64) * np.asarray(self.scale_deg)


def normalize_angles(euler_deg: np.ndarray, normalizer: AngleNormalizer) -> np.ndarray:
    """Scale (pitch, roll, yaw) degrees into [-1, 1]; out-of-range values clamp."""
    return normalizer.normalize(euler_deg)


# ---------------------------------------------------------------------------
# Rotations

def _deg_trig(angle_deg: float) -> tuple[float, float]:
    a = math.radians(angle_deg)
    return math.cos(a), math.sin(a)


def euler_to_rotation(euler_deg: np.ndarray) -> np.ndarray:
    """Compose a rotation matrix from (pitch, roll, yaw) degrees.

    R = Ry(yaw) @ Rx(pitch) @ Rz(roll), i.e. intrinsic yaw, then pitch,
    then roll.
    """
    pitch, roll, yaw = (float(v) for v in np.asarray(euler_deg, dtype=np.float64))
    ca, sa = _deg_trig(yaw)
    cb, sb = _deg_trig(pitch)
    cc, sc = _deg_trig(roll)
    ry = np.array([[ca, 0.0, sa], [0.0, 1.0, 0.0], [-sa, 0.0, ca]])
    rx = np.array([[1.0, 0.0, 0.0], [0.0, cb, -sb], [0.0, sb, cb]])
    rz = np.array([[cc, -sc, 0.0], [sc, cc, 0.0], [0.0, 0.0, 1.0]])
    return ry @ rx @ rz


def _check_orthonormal(rotation: np.ndarray) -> None:
    if rotation.shape != (3, 3):
        raise PoseFormatError(f"rotation must be 3x3, got shape {rotation.shape}")
    residual = np.max(np.abs(rotation.T @ rotation - np.eye(3)))
    det = float(np.linalg.det(rotation))
    if residual > _ORTHO_TOL or abs(det - 1.0) > _ORTHO_TOL:
        raise PoseFormatError(
            f"matrix is not a rotation: |R'R - I| max {residual:.2e}, det {det:.6f}"
        )


def rotation_to_euler(rotation: np.ndarray) -> np.ndarray:
    """Decompose a rotation matrix into (pitch, roll, yaw) degrees.

    Raises :class:`GimbalLockError` when |pitch| is within
    GIMBAL_LOCK_MARGIN_DEG of 90 degrees, where yaw and roll are no longer
    separable.
    """
    rotation = np.asarray(rotation, dtype=np.float64)
    _check_orthonormal(rotation)
    sin_pitch = -float(np.clip(rotation[1, 2], -1.0, 1.0))
    pitch = math.degrees(math.asin(sin_pitch))
    if 90.0 - abs(pitch) < GIMBAL_LOCK_MARGIN_DEG:
        raise GimbalLockError(f"pitch {pitch:.3f} deg is inside the gimbal-lock region")
    yaw = math.degrees(math.atan2(rotation[0, 2], rotation[2, 2]))
    roll = math.degrees(math.atan2(rotation[1, 0], rotation[1, 1]))
    return np.array([pitch, roll, yaw])


def project_to_pixel(point_mm: np.ndarray, intrinsics: CameraIntrinsics) -> tuple[float, float]:
    """Project a camera-frame 3D point (mm) to pixel coordinates."""
    x, y, z = (float(v) for v in np.asarray(point_mm, dtype=np.float64))
    if z <= 0:
        raise BehindCameraError(f"point depth must be positive, got z={z} mm")
    return intrinsics.fx * x / z + intrinsics.cx, intrinsics.fy * y / z + intrinsics.cy


# ---------------------------------------------------------------------------
# Binary depth formats

def decode_biwi_depth(blob: bytes) -> DepthMap:
    """Decode the Biwi run-length binary depth format from memory."""
    if len(blob) < 8:
        raise DepthFormatError("file too short for width/height header", offset=len(blob))
    width, height = struct.unpack_from("<ii", blob, 0)
    if width <= 0 or height <= 0:
        raise DepthFormatError(f"invalid dimensions {width}x{height}", offset=0)
    total = width * height
    flat = np.zeros(total, dtype=np.float64)
    offset = 8
    p = 0
    while p < total:
        if offset + 8 > len(blob):
            raise DepthFormatError("truncated run header", offset=offset)
        n_empty, n_filled = struct.unpack_from("<ii", blob, offset)
        offset += 8
        if n_empty < 0 or n_filled < 0:
            raise DepthFormatError(f"negative run length ({n_empty}, {n_filled})", offset=offset - 8)
        if p + n_empty + n_filled > total:
            raise DepthFormatError(
                f"runs overflow header pixel count {total}", offset=offset - 8
            )
        p += n_empty
        if n_filled:
            end = offset + 2 * n_filled
            if end > len(blob):
                raise DepthFormatError("truncated depth run", offset=offset)
            flat[p : p + n_filled] = np.frombuffer(blob, dtype="<i2", count=n_filled, offset=offset)
            offset = end
            p += n_filled
    data = flat.reshape(height, width)
    return DepthMap(data=data, valid_mask=data > 0)


def encode_biwi_depth(depth: DepthMap) -> bytes:
    """Encode a DepthMap into the Biwi run-length binary format.

    Invalid pixels are stored as empty runs; valid depths must be integral
    millimeter values in [1, 32767].
    """
    values = np.where(depth.valid_mask, depth.data, 0.0).ravel()
    ints = np.rint(values).astype(np.int64)
    if np.any((ints[depth.valid_mask.ravel()] < 1) | (ints[depth.valid_mask.ravel()] > 32767)):
        raise ValueError("valid depths must fall in [1, 32767] mm to encode as int16")
    parts = [struct.pack("<ii", depth.width, depth.height)]
    total = ints.size
    p = 0
    while p < total:
        q = p
        while q < total and ints[q] == 0:
            q += 1
        r = q
        while r < total and ints[r] != 0:
            r += 1
        parts.append(struct.pack("<ii", q - p, r - q))
        if r > q:
            parts.append(ints[q:r].astype("<i2").tobytes())
        p = r
    return b"".join(parts)


def load_biwi_depth(path: str | Path) -> DepthMap:
    """Load a Biwi RLE ``.bin`` depth frame; zero depths come back invalid."""
    return decode_biwi_depth(Path(path).read_bytes())


def save_biwi_depth(depth: DepthMap, path: str | Path) -> None:
    Path(path).write_bytes(encode_biwi_depth(depth))


def decode_raw_depth(blob: bytes) -> DepthMap:
    """Decode the portable raw grid format (8-byte header + uint16 grid)."""
    if len(blob) < 8:
        raise DepthFormatError("file too short for width/height header", offset=len(blob))
    width, height = struct.unpack_from("<II", blob, 0)
    if width == 0 or height == 0:
        raise DepthFormatError(f"invalid dimensions {width}x{height}", offset=0)
    expected = 8 + 2 * width * height
    if len(blob) != expected:
        raise DepthFormatError(
            f"expected {expected} bytes for {width}x{height} grid, got {len(blob)}",
            offset=min(len(blob), expected),
        )
    grid = np.frombuffer(blob, dtype="<u2", offset=8).reshape(height, width).astype(np.float64)
    return DepthMap(data=grid, valid_mask=grid > 0)


def encode_raw_depth(depth: DepthMap) -> bytes:
    values = np.where(depth.valid_mask, depth.data, 0.0)
    ints = np.rint(values).astype(np.int64)
    if np.any((ints[depth.valid_mask] < 1) | (ints[depth.valid_mask] > 65535)):
        raise ValueError("valid depths must fall in [1, 65535] mm to encode as uint16")
    header = struct.pack("<II", depth.width, depth.height)
    return header + ints.astype("<u2").tobytes()


def load_raw_depth(path: str | Path) -> DepthMap:
    return decode_raw_depth(Path(path).read_bytes())


def save_raw_depth(depth: DepthMap, path: str | Path) -> None:
    Path(path).write_bytes(encode_raw_depth(depth))


# ---------------------------------------------------------------------------
# Text annotations

def _read_floats(path: str | Path) -> list[float]:
    tokens = Path(path).read_text().split()
    try:
        return [float(t) for t in tokens]
    except ValueError as exc:
        raise PoseFormatError(f"{path}: malformed number: {exc}") from None


def load_pose_file(path: str | Path) -> PoseLabel:
    """Parse a pose annotation: 3x3 rotation rows, then the head center (mm)."""
    numbers = _read_floats(path)
    if len(numbers) != 12:
        raise PoseFormatError(f"{path}: expected 12 numbers (rotation + center), got {len(numbers)}")
    rotation = np.array(numbers[:9], dtype=np.float64).reshape(3, 3)
    center = np.array(numbers[9:], dtype=np.float64)
    _check_orthonormal(rotation)
    return PoseLabel.from_rotation(rotation, center)


def save_pose_file(label: PoseLabel, path: str | Path) -> None:
    rows = [" ".join(f"{v:.10f}" for v in row) for row in label.rotation]
    center = " ".join(f"{v:.10f}" for v in label.head_center_mm)
    Path(path).write_text("\n".join(rows) + "\n\n" + center + "\n")


def load_calibration(path: str | Path) -> CameraIntrinsics:
    """Read intrinsics from a calibration file whose first nine numbers are
    the row-major 3x3 intrinsic matrix."""
    numbers = _read_floats(path)
    if len(numbers) < 9:
        raise PoseFormatError(f"{path}: expected at least 9 numbers, got {len(numbers)}")
    m = np.array(numbers[:9], dtype=np.float64).reshape(3, 3)
    return CameraIntrinsics(fx=m[0, 0], fy=m[1, 1], cx=m[0, 2], cy=m[1, 2])


def save_calibration(intrinsics: CameraIntrinsics, path: str | Path) -> None:
    m = intrinsics
    Path(path).write_text(
        f"{m.fx:.6f} 0.0 {m.cx:.6f}\n0.0 {m.fy:.6f} {m.cy:.6f}\n0.0 0.0 1.0\n"
    )


# ---------------------------------------------------------------------------
# Dataset indexing and split

_DEPTH_EXT = {"biwi": "bin", "raw": "raw"}
_FRAME_RE = re.compile(r"frame_(\d+)_depth\.(bin|raw)$")


@dataclass(frozen=True)
class FrameRef:
    """Index entry pointing at one frame's files on disk."""

    sequence_id: str
    frame_id: str
    depth_path: Path
    pose_path: Path
    fmt: str


@dataclass
class DatasetIndex:
    """Scanned dataset: frame references plus per-sequence intrinsics."""

    root: Path
    frames: list[FrameRef]
    intrinsics: dict[str, CameraIntrinsics] = field(default_factory=dict)

    def intrinsics_for(self, sequence_id: str) -> CameraIntrinsics:
        return self.intrinsics[sequence_id]


def scan_dataset(root: str | Path, fmt: str = "raw") -> DatasetIndex:
    """Build a frame index from ``<root>/<seq>/frame_<n>_depth.<ext>`` files.

    Single-threaded; the resulting index is read-only and safe to share
    across workers.
    """
    if fmt not in _DEPTH_EXT:
        raise ValueError(f"unknown format {fmt!r}; expected 'biwi' or 'raw'")
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"dataset root {root} does not exist")
    frames: list[FrameRef] = []
    intrinsics: dict[str, CameraIntrinsics] = {}
    for seq_dir in sorted(p for p in root.iterdir() if p.is_dir()):
        seq = seq_dir.name
        for depth_path in sorted(seq_dir.glob(f"frame_*_depth.{_DEPTH_EXT[fmt]}")):
            match = _FRAME_RE.search(depth_path.name)
            if match is None:
                continue
            frame_id = match.group(1)
            pose_path = depth_path.with_name(f"frame_{frame_id}_pose.txt")
            if not pose_path.exists():
                raise FileNotFoundError(f"missing pose annotation {pose_path}")
            frames.append(FrameRef(seq, frame_id, depth_path, pose_path, fmt))
        cal_path = seq_dir / "depth.cal"
        if cal_path.exists():
            intrinsics[seq] = load_calibration(cal_path)
    return DatasetIndex(root=root, frames=frames, intrinsics=intrinsics)


def load_sample(ref: FrameRef) -> Sample:
    """Load one indexed frame into memory."""
    loader = load_biwi_depth if ref.fmt == "biwi" else load_raw_depth
    return Sample(
        depth=loader(ref.depth_path),
        label=load_pose_file(ref.pose_path),
        subject_id=ref.sequence_id,
        sequence_id=ref.sequence_id,
        frame_id=ref.frame_id,
    )


def make_split(
    frames,
    test_sequences: tuple[str, ...] = TEST_SEQUENCES,
    required_sequences: tuple[str, ...] = ALL_SEQUENCES,
):
    """Partition frames into (train, test) by sequence id.

    Sequences in ``test_sequences`` go to test, everything else to train.
    Raises :class:`SplitConfigError` listing any ``required_sequences``
    absent from the data.
    """
    present = {f.sequence_id for f in frames}
    missing = [s for s in required_sequences if s not in present]
    if missing:
        raise SplitConfigError(f"dataset is missing sequences: {', '.join(missing)}")
    test_set = set(test_sequences)
    train = [f for f in frames if f.sequence_id not in test_set]
    test = [f for f in frames if f.sequence_id in test_set]
    return train, test
