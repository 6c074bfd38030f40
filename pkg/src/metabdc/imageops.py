"""Plain-numpy image transforms shared by augmentation and preprocessing."""

from __future__ import annotations

import numpy as np


def resize_bilinear(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize of a single-channel (H, W) image, center-aligned.

    Same-size calls return an exact copy, which keeps identity-configured
    augmentation bit-identical to its input.
    """
    if img.ndim != 2:
        raise ValueError(f"expected (H, W), got shape {img.shape}")
    h, w = img.shape
    if out_h <= 0 or out_w <= 0:
        raise ValueError("output size must be positive")
    if (out_h, out_w) == (h, w):
        return img.copy()

    def axis_coords(n_in: int, n_out: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        src = (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5
        src = np.clip(src, 0.0, n_in - 1.0)
        lo = np.floor(src).astype(np.int64)
        hi = np.minimum(lo + 1, n_in - 1)
        frac = src - lo
        return lo, hi, frac

    r0, r1, rf = axis_coords(h, out_h)
    c0, c1, cf = axis_coords(w, out_w)
    top = img[r0][:, c0] * (1 - cf)[None, :] + img[r0][:, c1] * cf[None, :]
    bot = img[r1][:, c0] * (1 - cf)[None, :] + img[r1][:, c1] * cf[None, :]
    out = top * (1 - rf)[:, None] + bot * rf[:, None]
    return out.astype(img.dtype, copy=False)


def crop_with_padding(img: np.ndarray, center_r: float, center_c: float, n_rows: int, n_cols: int) -> np.ndarray:
    """Crop an n_rows x n_cols window centered near (center_r, center_c).

    The window is clipped to the image; out-of-bounds area is zero-filled.
    """
    if img.ndim != 2:
        raise ValueError(f"expected (H, W), got shape {img.shape}")
    h, w = img.shape
    r0 = int(round(center_r)) - n_rows // 2
    c0 = int(round(center_c)) - n_cols // 2
    out = np.zeros((n_rows, n_cols), dtype=img.dtype)
    src_r0, src_r1 = max(r0, 0), min(r0 + n_rows, h)
    src_c0, src_c1 = max(c0, 0), min(c0 + n_cols, w)
    if src_r0 < src_r1 and src_c0 < src_c1:
        out[src_r0 - r0 : src_r1 - r0, src_c0 - c0 : src_c1 - c0] = img[src_r0:src_r1, src_c0:src_c1]
    return out
