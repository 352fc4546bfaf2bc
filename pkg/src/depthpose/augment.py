"""Training-set expansion: ten variants per preprocessed image.

Five 56x56 patches are cropped with jittered offsets anchored at the four
corners and the center, four more drop 8 pixels from the bottom / top /
left / right side, and one copy gets additive Gaussian noise.  All crops
are resized back to 64x64.  Pose labels are unchanged by every variant, so
callers simply reuse the source label.
"""

from __future__ import annotations

import numpy as np

from .depth_prep import NET_INPUT_SIDE, NetInput, bilinear_resize

PATCH_SIDE = 56
MAX_OFFSET = NET_INPUT_SIDE - PATCH_SIDE
DEFAULT_JITTER_SIGMA = 0.05
N_VARIANTS = 10

_DIRECTIONAL_OFFSETS = {
    # drop 8 px from the named side, centered on the other axis
    "bottom": (MAX_OFFSET // 2, 0),
    "top": (MAX_OFFSET // 2, MAX_OFFSET),
    "left": (MAX_OFFSET, MAX_OFFSET // 2),
    "right": (0, MAX_OFFSET // 2),
}


def _crop_resize(net_input: NetInput, x0: int, y0: int) -> NetInput:
    data = net_input.data[y0 : y0 + PATCH_SIDE, x0 : x0 + PATCH_SIDE]
    mask = net_input.foreground_mask[y0 : y0 + PATCH_SIDE, x0 : x0 + PATCH_SIDE]
    out, out_mask = bilinear_resize(data, mask, NET_INPUT_SIDE, NET_INPUT_SIDE)
    return NetInput(data=out, foreground_mask=out_mask)


def _anchored_offsets(rng: np.random.Generator) -> list[tuple[int, int]]:
    """Per-anchor crop origins: corner-anchored jitter in [0, MAX_OFFSET]."""
    offsets = []
    for anchor in ("top_left", "top_right", "bottom_left", "bottom_right", "center"):
        jx, jy = (int(v) for v in rng.integers(0, MAX_OFFSET + 1, size=2))
        if anchor == "top_left":
            offsets.append((jx, jy))
        elif anchor == "top_right":
            offsets.append((MAX_OFFSET - jx, jy))
        elif anchor == "bottom_left":
            offsets.append((jx, MAX_OFFSET - jy))
        elif anchor == "bottom_right":
            offsets.append((MAX_OFFSET - jx, MAX_OFFSET - jy))
        else:
            offsets.append((jx, jy))
    return offsets


def augment(
    net_input: NetInput, seed: int, jitter_sigma: float = DEFAULT_JITTER_SIGMA
) -> list[NetInput]:
    """Produce exactly ``N_VARIANTS`` augmented 64x64 images, deterministically.

    Raises ``ValueError`` if the input is not 64x64.
    """
    expected = (NET_INPUT_SIDE, NET_INPUT_SIDE)
    if net_input.data.shape != expected:
        raise ValueError(f"augment expects {expected} input, got {net_input.data.shape}")
    rng = np.random.default_rng(seed)
    variants = [_crop_resize(net_input, x0, y0) for x0, y0 in _anchored_offsets(rng)]
    for side in ("bottom", "top", "left", "right"):
        x0, y0 = _DIRECTIONAL_OFFSETS[side]
        variants.append(_crop_resize(net_input, x0, y0))
    noise = rng.normal(0.0, jitter_sigma, size=net_input.data.shape)
    variants.append(NetInput(net_input.data + noise, net_input.foreground_mask.copy()))
    return variants
