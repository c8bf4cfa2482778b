"""Real Fourier transforms, trend/residual split and phase replacement.

The forward transform is unnormalised, ``F_k = sum_t x_t exp(-2 pi i k t / L)``,
and the inverse carries the ``1/L``.  Power-of-two lengths use an iterative
radix-2 FFT; other lengths fall back to a direct DFT, which is cheap at the
window lengths used here (``L = 24``).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


def wrap_phase(phi):
    """Map angles into (-pi, pi]."""
    phi = np.asarray(phi, dtype=np.float64)
    w = np.pi - np.mod(np.pi - phi, 2.0 * np.pi)
    return w if w.ndim else float(w)


@dataclass
class Spectrum:
    length: int
    amplitude: np.ndarray
    phase: np.ndarray

    @property
    def n_bins(self) -> int:
        return self.amplitude.shape[-1]

    def complex(self) -> np.ndarray:
        return self.amplitude * np.exp(1j * self.phase)

    @classmethod
    def from_complex(cls, coeffs: np.ndarray, length: int) -> "Spectrum":
        amp = np.abs(coeffs)
        phase = wrap_phase(np.angle(coeffs))
        # bins at round-off level carry no phase information
        floor = 1e-12 * amp.max(axis=-1, keepdims=True) if amp.size else 0.0
        phase = np.where(amp <= floor, 0.0, phase)
        return cls(length, amp, np.asarray(phase, dtype=np.float64))


@dataclass
class Decomposition:
    trend: np.ndarray
    residual: np.ndarray
    width: int


def _is_pow2(n: int) -> bool:
    return n >= 1 and (n & (n - 1)) == 0


def _fft_radix2(x: np.ndarray) -> np.ndarray:
    """Iterative Cooley-Tukey over the last axis; length must be a power of two."""
    n = x.shape[-1]
    bits = n.bit_length() - 1
    rev = np.zeros(n, dtype=np.int64)
    for i in range(n):
        rev[i] = int(format(i, f"0{bits}b")[::-1], 2) if bits else 0
    a = x[..., rev].astype(np.complex128)
    size = 2
    while size <= n:
        half = size // 2
        tw = np.exp(-2j * np.pi * np.arange(half) / size)
        a = a.reshape(a.shape[:-1] + (n // size, size))
        even = a[..., :half].copy()
        odd = a[..., half:] * tw
        a[..., :half] = even + odd
        a[..., half:] = even - odd
        a = a.reshape(a.shape[:-2] + (n,))
        size *= 2
    return a


def dft_matrices(length: int) -> tuple[np.ndarray, np.ndarray]:
    """Cosine and sine tables ``(L, L//2+1)`` with ``F = x @ C - 1j * (x @ S)``."""
    t = np.arange(length)[:, None]
    k = np.arange(length // 2 + 1)[None, :]
    ang = 2.0 * np.pi * t * k / length
    return np.cos(ang), np.sin(ang)


def _rfft_coeffs(x: np.ndarray) -> np.ndarray:
    n = x.shape[-1]
    if _is_pow2(n):
        return _fft_radix2(x)[..., : n // 2 + 1]
    c, s = dft_matrices(n)
    return x @ c - 1j * (x @ s)


def rfft(x) -> Spectrum:
    """Amplitude/phase spectrum over the last axis."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] < 2:
        raise ValueError(f"rfft needs at least 2 samples, got {x.shape[-1]}")
    return Spectrum.from_complex(_rfft_coeffs(x), x.shape[-1])


def irfft(s: Spectrum) -> np.ndarray:
    """Inverse of :func:`rfft`; DC and Nyquist bins contribute their real part only."""
    n = s.length
    coeffs = s.complex()
    k = np.arange(s.n_bins)
    weight = np.full(s.n_bins, 2.0)
    weight[0] = 1.0
    if n % 2 == 0:
        weight[-1] = 1.0
    t = np.arange(n)
    ang = 2.0 * np.pi * np.outer(k, t) / n
    re = (coeffs.real * weight) @ np.cos(ang)
    im = (coeffs.imag * weight) @ np.sin(ang)
    return (re - im) / n


def apply_phase(s: Spectrum, k: int, phi) -> Spectrum:
    """Copy of ``s`` with bin ``k`` given phase ``phi`` (amplitude untouched).

    For the DC bin (and Nyquist when ``L`` is even) the phase is snapped to
    0 or pi, whichever is closer, so the inverse stays real.
    """
    if not 0 <= k < s.n_bins:
        raise IndexError(f"bin {k} outside 0..{s.n_bins - 1}")
    phi = wrap_phase(phi)
    if k == 0 or (s.length % 2 == 0 and k == s.n_bins - 1):
        phi = np.where(np.abs(phi) > np.pi / 2, np.pi, 0.0)
    phase = s.phase.copy()
    phase[..., k] = phi
    return Spectrum(s.length, s.amplitude.copy(), phase)


def moving_average_matrix(length: int, width: int) -> np.ndarray:
    """``(L, L)`` operator ``M`` with ``trend = x @ M`` (replicate edge padding)."""
    half = width // 2
    m = np.zeros((length, length))
    for t in range(length):
        for j in range(t - half, t + half + 1):
            m[min(max(j, 0), length - 1), t] += 1.0 / width
    return m


def decompose(x, width: int = 5) -> Decomposition:
    """Centred moving-average trend and the remainder."""
    x = np.asarray(x, dtype=np.float64)
    length = x.shape[-1]
    if width < 1 or width % 2 == 0:
        raise ValueError(f"kernel width must be odd and positive, got {width}")
    if width > length:
        raise ValueError(f"kernel width {width} exceeds series length {length}")
    half = width // 2
    padded = np.concatenate(
        [np.repeat(x[..., :1], half, axis=-1), x, np.repeat(x[..., -1:], half, axis=-1)], axis=-1
    )
    trend = sum(padded[..., j : j + length] for j in range(width)) / width
    return Decomposition(trend=trend, residual=x - trend, width=width)
