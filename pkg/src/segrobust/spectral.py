"""Fourier-domain comparison of image sets.

Each image is reduced to luma, transformed with a 2-D FFT, and summarised
as a centred log-magnitude spectrum ``log(1 + |F|)``. Two paired sets are
compared by the mean absolute spectrum difference over the bins that pass a
radial high-pass filter.

``filter_rate`` selects the cutoff on the normalised radius (0 at DC, 1 at
the spectrum corner): 0 keeps everything, 1 keeps ``r >= 0.25``, 2 keeps
``r >= 0.5``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Optional, Sequence

import numpy as np

from .labelmap import RgbImage

LUMA_WEIGHTS = (0.299, 0.587, 0.114)
FILTER_CUTOFFS: Mapping[int, float] = {0: 0.0, 1: 0.25, 2: 0.5}


@dataclass(frozen=True, eq=False)
class Spectrum:
    data: np.ndarray

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]


def luma(img: RgbImage) -> np.ndarray:
    rgb = img.data.astype(np.float64)
    return rgb @ np.asarray(LUMA_WEIGHTS)


def spectrum(img: RgbImage) -> Spectrum:
    if img.width < 2 or img.height < 2:
        raise ValueError(f"spectrum needs at least 2x2 pixels, got {img.width}x{img.height}")
    mag = np.abs(np.fft.fft2(luma(img)))
    return Spectrum(np.fft.fftshift(np.log1p(mag)))


def squared_radius_grid(height: int, width: int) -> np.ndarray:
    """Squared normalised distance of every centred bin from DC; the corner is 1.

    Computed as ``2 * (ky^2 / H^2 + kx^2 / W^2)``, which is exact for
    power-of-two sizes, so bins lying on a cutoff are not lost to rounding.
    """
    ky = (np.arange(height) - height // 2).astype(np.float64)
    kx = (np.arange(width) - width // 2).astype(np.float64)
    return 2.0 * (ky[:, None] ** 2 / height**2 + kx[None, :] ** 2 / width**2)


def highpass_mask(height: int, width: int, cutoff: float) -> np.ndarray:
    return squared_radius_grid(height, width) >= cutoff * cutoff


def _cutoff(filter_rate: int, cutoffs: Optional[Mapping[int, float]]) -> float:
    table = FILTER_CUTOFFS if cutoffs is None else cutoffs
    if filter_rate not in table:
        raise ValueError(f"filter_rate must be one of {sorted(table)}, got {filter_rate!r}")
    return float(table[filter_rate])


def spectral_distance(
    set_a: Sequence[RgbImage],
    set_b: Sequence[RgbImage],
    filter_rate: int = 0,
    cutoffs: Optional[Mapping[int, float]] = None,
) -> float:
    """Mean over pairs of the mean |spectrum_a - spectrum_b| on retained bins."""
    if len(set_a) != len(set_b):
        raise ValueError(f"image sets differ in length: {len(set_a)} vs {len(set_b)}")
    if not set_a:
        raise ValueError("image sets are empty")
    cutoff = _cutoff(filter_rate, cutoffs)
    per_pair = []
    for i, (a, b) in enumerate(zip(set_a, set_b)):
        if (a.height, a.width) != (b.height, b.width):
            raise ValueError(
                f"pair {i}: {a.width}x{a.height} vs {b.width}x{b.height} images"
            )
        keep = highpass_mask(a.height, a.width, cutoff)
        if not keep.any():
            raise ValueError(f"pair {i}: high-pass filter retains no bins")
        diff = np.abs(spectrum(a).data - spectrum(b).data)
        per_pair.append(diff[keep].mean())
    return float(np.mean(per_pair))
