"""Frequency-branch input: 2-D DFT of the luminance and its real encoding."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autograd import Tensor

LUMA_WEIGHTS = np.array([0.299, 0.587, 0.114])


@dataclass
class FrequencyMap:
    """Complex spectrum stored as two real grids indexed ``[v, u]``.

    ``u`` runs along the width (``M`` columns) and ``v`` along the height
    (``N`` rows), so the grids have the same H×W layout as the source image.
    """

    real: np.ndarray
    imag: np.ndarray

    @property
    def width(self) -> int:
        return self.real.shape[1]

    @property
    def height(self) -> int:
        return self.real.shape[0]

    def complex(self) -> np.ndarray:
        return self.real + 1j * self.imag

    @classmethod
    def from_complex(cls, z: np.ndarray) -> "FrequencyMap":
        return cls(np.ascontiguousarray(z.real), np.ascontiguousarray(z.imag))


def _twiddle(n: int, sign: float) -> np.ndarray:
    k = np.arange(n)
    # reduce the phase index mod n before scaling keeps the angles exact-ish
    phase = np.outer(k, k) % n
    return np.exp(sign * 2j * np.pi * phase / n)


def _as_grid(image) -> np.ndarray:
    arr = image.data if isinstance(image, Tensor) else np.asarray(image, dtype=np.float64)
    if arr.ndim == 3 and arr.shape[0] == 1:
        arr = arr[0]
    if arr.ndim != 2:
        raise ValueError(f"dft2 expects an H×W grid, got shape {arr.shape}")
    if arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ValueError("dft2 needs a non-empty grid")
    return arr.astype(np.float64)


def dft2(image) -> FrequencyMap:
    """F(u, v) = sum_x sum_y f(x, y) exp(-2 pi i (u x / M + v y / N)).

    Evaluated as two dense DFT-matrix products (exact summation, no FFT).
    """
    f = _as_grid(image)
    n_rows, n_cols = f.shape
    z = _twiddle(n_rows, -1.0) @ f @ _twiddle(n_cols, -1.0).T
    return FrequencyMap.from_complex(z)


def idft2(freq: FrequencyMap) -> Tensor:
    """Inverse of :func:`dft2` with 1/(MN) normalisation; returns the real part."""
    z = freq.complex()
    n_rows, n_cols = z.shape
    f = _twiddle(n_rows, 1.0) @ z @ _twiddle(n_cols, 1.0).T / (n_rows * n_cols)
    return Tensor(f.real)


def luminance(rgb) -> np.ndarray:
    """Rec. 601 luma of a 3×H×W image."""
    arr = rgb.data if isinstance(rgb, Tensor) else np.asarray(rgb, dtype=np.float64)
    if arr.ndim != 3 or arr.shape[0] != 3:
        raise ValueError(f"expected 3×H×W RGB, got {arr.shape}")
    return np.tensordot(LUMA_WEIGHTS, arr, axes=(0, 0))


def freq_representation(freq: FrequencyMap) -> Tensor:
    """Two-channel real encoding of a spectrum, DC centred.

    Channel 0 is ``log(1 + |F|)`` min-max scaled to [0, 1]; channel 1 is the
    phase divided by pi. A flat non-zero magnitude map scales to ones, an
    all-zero map to zeros.
    """
    z = np.fft.fftshift(freq.complex())
    mag = np.abs(z)
    logmag = np.log1p(mag)
    lo, hi = logmag.min(), logmag.max()
    if hi - lo > 0:
        ch0 = (logmag - lo) / (hi - lo)
    elif hi > 0:
        ch0 = np.ones_like(logmag)
    else:
        ch0 = np.zeros_like(logmag)
    # round-off residue in near-empty bins would give arbitrary phases
    scale = mag.max()
    z = np.where(mag > 1e-10 * scale, z, 0.0)
    ch1 = np.arctan2(z.imag, z.real) / np.pi
    return Tensor(np.stack([ch0, ch1]))


def frequency_input(rgb) -> Tensor:
    """RGB 3×H×W -> 2×H×W network input for the frequency branch."""
    return freq_representation(dft2(luminance(rgb)))
