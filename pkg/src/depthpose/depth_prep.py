"""Depth-frame preprocessing: dynamic face crop, normalization, row stretch.

Turns a raw depth frame plus a head-center annotation into the normalized
64x64 grid the pose network consumes.  The stages compose as

    crop -> segment_foreground -> resize_to_64 -> normalize -> row_stretch

Every stage is a pure function of its inputs, and pixel validity (sensor
holes, out-of-frame padding, background) travels in an explicit boolean
mask instead of sentinel values.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

NET_INPUT_SIDE = 64
DEFAULT_FACE_WIDTH_MM = 120.0
DEFAULT_FOREGROUND_BAND_MM = 150.0


class InvalidDistanceError(ValueError):
    """Head-to-camera distance is zero or negative."""


class EmptyCropError(ValueError):
    """Crop window does not intersect the image."""


class DegenerateInputError(ValueError):
    """Too few valid pixels, or constant values, to normalize."""


@dataclass
class DepthMap:
    """2D grid of depth samples in millimeters with a per-pixel validity mask.

    ``data`` is a (height, width) float array; ``valid_mask`` marks pixels
    that carry a real measurement (False = hole / background marker).
    Invalid pixels are excluded from all statistics downstream.
    """

    data: np.ndarray
    valid_mask: np.ndarray

    def __post_init__(self) -> None:
        self.data = np.asarray(self.data, dtype=np.float64)
        self.valid_mask = np.asarray(self.valid_mask, dtype=bool)
        if self.data.ndim != 2:
            raise ValueError(f"depth data must be 2-D, got shape {self.data.shape}")
        if self.data.shape != self.valid_mask.shape:
            raise ValueError(
                f"data shape {self.data.shape} != mask shape {self.valid_mask.shape}"
            )
        if self.width <= 0 or self.height <= 0:
            raise ValueError(f"depth map must be non-empty, got shape {self.data.shape}")

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]


@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole intrinsics: focal lengths and principal point, in pixels."""

    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self) -> None:
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")


@dataclass(frozen=True)
class CropWindow:
    """Integer pixel window centered on the face."""

    center_x: int
    center_y: int
    width: int
    height: int

    def __post_init__(self) -> None:
        if self.width <= 0 or self.height <= 0:
            raise ValueError(f"crop window must be non-empty, got {self.width}x{self.height}")


@dataclass
class NetInput:
    """Normalized network input grid plus its foreground mask."""

    data: np.ndarray
    foreground_mask: np.ndarray

    def __post_init__(self) -> None:
        self.data = np.asarray(self.data, dtype=np.float64)
        self.foreground_mask = np.asarray(self.foreground_mask, dtype=bool)
        if self.data.ndim != 2 or self.data.shape != self.foreground_mask.shape:
            raise ValueError(
                f"grid shape {self.data.shape} inconsistent with mask shape "
                f"{self.foreground_mask.shape}"
            )


def compute_crop_window(
    intrinsics: CameraIntrinsics,
    head_center_px: tuple[float, float],
    z_mm: float,
    face_width_mm: float = DEFAULT_FACE_WIDTH_MM,
) -> CropWindow:
    """Size a face crop dynamically: pixel extent = focal * face_width / distance.

    The window scales inversely with subject distance so the face fills a
    comparable pixel area regardless of range.
    """
    if z_mm <= 0:
        raise InvalidDistanceError(f"head distance must be positive, got {z_mm} mm")
    if face_width_mm <= 0:
        raise ValueError(f"face width must be positive, got {face_width_mm} mm")
    width = max(1, int(np.rint(intrinsics.fx * face_width_mm / z_mm)))
    height = max(1, int(np.rint(intrinsics.fy * face_width_mm / z_mm)))
    return CropWindow(
        center_x=int(np.rint(head_center_px[0])),
        center_y=int(np.rint(head_center_px[1])),
        width=width,
        height=height,
    )


def crop(depth: DepthMap, window: CropWindow) -> DepthMap:
    """Extract ``window`` from ``depth``; pixels outside the frame come back invalid.

    The output always has the requested window size.  Heads near the frame
    edge produce partially-invalid crops rather than failures.
    """
    x0 = window.center_x - window.width // 2
    y0 = window.center_y - window.height // 2
    x1, y1 = x0 + window.width, y0 + window.height

    ix0, ix1 = max(x0, 0), min(x1, depth.width)
    iy0, iy1 = max(y0, 0), min(y1, depth.height)
    if ix0 >= ix1 or iy0 >= iy1:
        raise EmptyCropError(
            f"window {window} does not intersect {depth.width}x{depth.height} image"
        )

    data = np.zeros((window.height, window.width), dtype=np.float64)
    mask = np.zeros((window.height, window.width), dtype=bool)
    data[iy0 - y0 : iy1 - y0, ix0 - x0 : ix1 - x0] = depth.data[iy0:iy1, ix0:ix1]
    mask[iy0 - y0 : iy1 - y0, ix0 - x0 : ix1 - x0] = depth.valid_mask[iy0:iy1, ix0:ix1]
    return DepthMap(data=data, valid_mask=mask)


def segment_foreground(depth: DepthMap, z_mm: float, band_mm: float = DEFAULT_FOREGROUND_BAND_MM) -> DepthMap:
    """Keep only pixels within ``band_mm`` of the head-center depth ``z_mm``."""
    if band_mm <= 0:
        raise ValueError(f"foreground band must be positive, got {band_mm} mm")
    in_band = np.abs(depth.data - z_mm) <= band_mm
    return DepthMap(data=depth.data.copy(), valid_mask=depth.valid_mask & in_band)


def _sample_axis(n_in: int, n_out: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Endpoint-aligned linear sample positions for one axis."""
    if n_in == 1:
        coords = np.zeros(n_out)
    else:
        coords = np.linspace(0.0, n_in - 1, n_out)
    lo = np.floor(coords).astype(np.intp)
    frac = coords - lo
    hi = np.minimum(lo + 1, n_in - 1)
    return lo, hi, frac


def bilinear_resize(
    data: np.ndarray, mask: np.ndarray, out_h: int, out_w: int
) -> tuple[np.ndarray, np.ndarray]:
    """Bilinear resize carrying validity: a target pixel is valid only if
    every source pixel it samples (with nonzero weight) is valid."""
    y0, y1, wy = _sample_axis(data.shape[0], out_h)
    x0, x1, wx = _sample_axis(data.shape[1], out_w)

    v00 = data[y0[:, None], x0[None, :]]
    v01 = data[y0[:, None], x1[None, :]]
    v10 = data[y1[:, None], x0[None, :]]
    v11 = data[y1[:, None], x1[None, :]]
    wyc = wy[:, None]
    wxc = wx[None, :]
    out = (
        v00 * (1.0 - wyc) * (1.0 - wxc)
        + v01 * (1.0 - wyc) * wxc
        + v10 * wyc * (1.0 - wxc)
        + v11 * wyc * wxc
    )

    m00 = mask[y0[:, None], x0[None, :]]
    m01 = mask[y0[:, None], x1[None, :]]
    m10 = mask[y1[:, None], x0[None, :]]
    m11 = mask[y1[:, None], x1[None, :]]
    x_exact = wxc == 0.0
    y_exact = wyc == 0.0
    out_mask = (
        m00
        & (m01 | x_exact)
        & (m10 | y_exact)
        & (m11 | x_exact | y_exact)
    )
    return out, out_mask


def resize_to_64(depth: DepthMap) -> DepthMap:
    """Resize to the 64x64 network resolution with bilinear interpolation."""
    data, mask = bilinear_resize(depth.data, depth.valid_mask, NET_INPUT_SIDE, NET_INPUT_SIDE)
    return DepthMap(data=data, valid_mask=mask)


def normalize(depth: DepthMap) -> NetInput:
    """Shift/scale valid pixels to mean 0, population variance 1.

    Invalid pixels are set to 0 and stay flagged in the foreground mask.
    Raises :class:`DegenerateInputError` when fewer than two valid pixels
    exist or all valid values are identical.
    """
    valid = depth.valid_mask
    n = int(valid.sum())
    if n < 2:
        raise DegenerateInputError(f"need at least 2 valid pixels to normalize, got {n}")
    values = depth.data[valid]
    mean = values.mean()
    var = values.var()
    if var == 0.0:
        raise DegenerateInputError("constant valid region cannot be variance-normalized")
    out = np.zeros_like(depth.data)
    out[valid] = (values - mean) / np.sqrt(var)
    return NetInput(data=out, foreground_mask=valid.copy())


def row_stretch(net_input: NetInput, origin: str = "foreground") -> NetInput:
    """Stretch each row's foreground span linearly across the full row width.

    Rows with no foreground stay all-zero (mask false); rows with a single
    foreground pixel are filled with that value.  ``origin`` selects where
    source coordinates start: ``"foreground"`` anchors the resample at the
    first foreground pixel, ``"column0"`` reproduces the plain
    ``x/(w-1)*(x_max-x_min)`` mapping that samples from column 0.
    """
    if origin not in ("foreground", "column0"):
        raise ValueError(f"origin must be 'foreground' or 'column0', got {origin!r}")
    h, w = net_input.data.shape
    out = np.zeros((h, w), dtype=np.float64)
    out_mask = np.zeros((h, w), dtype=bool)
    xs = np.arange(w, dtype=np.float64)

    for r in range(h):
        fg = np.flatnonzero(net_input.foreground_mask[r])
        if fg.size == 0:
            continue
        if fg.size == 1:
            out[r, :] = net_input.data[r, fg[0]]
            out_mask[r, :] = True
            continue
        x_min, x_max = int(fg[0]), int(fg[-1])
        src = xs / (w - 1) * (x_max - x_min)
        if origin == "foreground":
            src = src + x_min
        x1 = np.floor(src).astype(np.intp)
        x2 = x1 + 1
        row = net_input.data[r]
        in_range = x2 <= w - 1
        x2c = np.where(in_range, x2, x1)
        lam = x2 - src
        out[r] = np.where(in_range, row[x1] * lam + row[x2c] * (1.0 - lam), row[x1])
        out_mask[r, :] = True

    return NetInput(data=out, foreground_mask=out_mask)


def preprocess(
    depth: DepthMap,
    intrinsics: CameraIntrinsics,
    head_center_px: tuple[float, float],
    z_mm: float,
    face_width_mm: float = DEFAULT_FACE_WIDTH_MM,
    band_mm: float = DEFAULT_FOREGROUND_BAND_MM,
    origin: str = "foreground",
) -> NetInput:
    """Full preprocessing pipeline from raw frame to network input."""
    window = compute_crop_window(intrinsics, head_center_px, z_mm, face_width_mm)
    face = crop(depth, window)
    face = segment_foreground(face, z_mm, band_mm)
    face = resize_to_64(face)
    normalized = normalize(face)
    return row_stretch(normalized, origin=origin)
