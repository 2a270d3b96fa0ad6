"""Tensor substrate: fields, Gaussian kernels, circular convolution, FFT, grad checks.

A *field* is a real array whose last three axes are (channels, height, width).
Library code keeps float32; oracles and gradient checks run in float64.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Callable, Mapping

import numpy as np

from . import autodiff as ad

DTYPE = np.float32


class ShapeError(ValueError):
    pass


class GradientError(ArithmeticError):
    pass


def as_field(x, dtype=None) -> np.ndarray:
    """Validate a (C, H, W) or batched (B, C, H, W) field."""
    arr = np.asarray(x, dtype=dtype)
    if arr.ndim not in (3, 4):
        raise ShapeError(f"field must be (C,H,W) or (B,C,H,W), got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise FloatingPointError("field contains non-finite values")
    return arr


def rng_for(seed: int, *keys: int) -> np.random.Generator:
    """Counter-style generator keyed by ``(seed, *keys)``.

    Streams for distinct keys are independent, so noise for (step, index) can
    be regenerated on demand without storing it.
    """
    return np.random.default_rng(np.random.SeedSequence([int(seed), *map(int, keys)]))


def is_power_of_two(n: int) -> bool:
    return n > 0 and (n & (n - 1)) == 0


# -- kernels -----------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class Kernel2D:
    taps: np.ndarray
    taps1d: np.ndarray | None = None

    @property
    def size(self) -> int:
        return self.taps.shape[0]

    @property
    def tap_sum(self) -> float:
        return float(self.taps.sum())

    def __post_init__(self):
        t = self.taps
        if t.ndim != 2 or t.shape[0] != t.shape[1] or t.shape[0] % 2 != 1:
            raise ShapeError(f"kernel must be square with odd size, got {t.shape}")
        if not np.all(np.isfinite(t)):
            raise ValueError("kernel taps must be finite")


def identity_kernel(size: int = 1) -> Kernel2D:
    taps = np.zeros((size, size))
    taps[size // 2, size // 2] = 1.0
    return Kernel2D(taps)


def kernel_size_for(sigma: float, limit: int | None = None) -> int:
    """Smallest odd integer >= 6*sigma + 1, at least 3, clamped to ``limit``."""
    size = max(3, math.ceil(6.0 * sigma + 1.0))
    if size % 2 == 0:
        size += 1
    if limit is not None and size > limit:
        size = limit if limit % 2 == 1 else limit - 1
    return size


def gaussian_kernel(sigma: float, size: int | None = None) -> Kernel2D:
    """Sampled isotropic Gaussian, renormalised so the taps sum to one."""
    if not sigma > 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    if size is None:
        size = kernel_size_for(sigma)
    if size < 3 or size % 2 != 1:
        raise ValueError(f"kernel size must be odd and >= 3, got {size}")
    return _gaussian_cached(float(sigma), int(size))


@lru_cache(maxsize=128)
def _gaussian_cached(sigma: float, size: int) -> Kernel2D:
    r = size // 2
    d = np.arange(-r, r + 1, dtype=np.float64)
    g = np.exp(-(d * d) / (2.0 * sigma * sigma))
    g /= g.sum()
    taps = np.outer(g, g)
    taps /= taps.sum()
    g.flags.writeable = False
    taps.flags.writeable = False
    return Kernel2D(taps, g)


def conv_depthwise(x, k: Kernel2D):
    """Circular convolution of every channel of ``x`` with ``k``.

    Accepts arrays or tape variables; the result has the same shape as ``x``.
    """
    h, w = ad._shape(x)[-2:]
    if k.size > min(h, w):
        raise ShapeError(f"kernel size {k.size} exceeds field {h}x{w}")
    return ad.circular_filter(x, k.taps, k.taps1d)


def kernel_dft(k: Kernel2D, height: int, width: int) -> np.ndarray:
    """DFT of ``k`` embedded (centre at the origin) in an H x W periodic grid."""
    grid = np.zeros((height, width))
    r = k.size // 2
    for a in range(k.size):
        for b in range(k.size):
            grid[(a - r) % height, (b - r) % width] += k.taps[a, b]
    return np.fft.fft2(grid)


# -- FFT ---------------------------------------------------------------------

def _check_fft_shape(shape) -> None:
    h, w = shape[-2:]
    if not (is_power_of_two(h) and is_power_of_two(w)):
        raise ShapeError(f"FFT needs power-of-two dims, got {h}x{w}")


def fft2(x) -> np.ndarray:
    """Unnormalised forward DFT over the last two axes (complex128)."""
    x = np.asarray(x)
    _check_fft_shape(x.shape)
    return np.fft.fft2(x.astype(np.float64), axes=(-2, -1))


def ifft2(spec) -> np.ndarray:
    spec = np.asarray(spec)
    _check_fft_shape(spec.shape)
    return np.fft.ifft2(spec, axes=(-2, -1))


def radial_frequency(height: int, width: int) -> np.ndarray:
    """|f| in cycles/pixel for every cell of the DFT grid."""
    fy = np.fft.fftfreq(height)[:, None]
    fx = np.fft.fftfreq(width)[None, :]
    return np.sqrt(fy * fy + fx * fx)


# -- gradient checking -------------------------------------------------------

def grad_check(fn: Callable[[Mapping], object], params: Mapping[str, np.ndarray],
               report: dict | None = None) -> float:
    """Compare tape gradients of scalar ``fn`` with central differences.

    ``fn`` receives a mapping name -> array (or tape variable) and must
    return a scalar.  Everything runs in float64.  Returns
    ``max |analytic - numeric| / max(1, |numeric|)`` over all parameter
    entries; per-parameter maxima are written to ``report`` when given.
    """
    base = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    tape = ad.Tape()
    tracked = {k: tape.var(v, name=k) for k, v in base.items()}
    out = fn(tracked)
    if not isinstance(out, ad.Var) or out.value.size != 1:
        raise ValueError("grad_check needs a scalar-valued function of the parameters")
    tape.backward(out)

    worst = 0.0
    for name, v in base.items():
        analytic = tracked[name].grad
        if analytic is None:
            analytic = np.zeros_like(v)
        if not np.all(np.isfinite(analytic)):
            raise GradientError(f"non-finite analytic gradient for parameter {name!r}")
        numeric = np.zeros_like(v)
        flat = v.reshape(-1)
        for i in range(flat.size):
            theta = flat[i]
            h = 1e-5 * (1.0 + abs(theta))
            flat[i] = theta + h
            up = float(np.asarray(fn(base)).reshape(()))
            flat[i] = theta - h
            down = float(np.asarray(fn(base)).reshape(()))
            flat[i] = theta
            numeric.reshape(-1)[i] = (up - down) / (2.0 * h)
        if not np.all(np.isfinite(numeric)):
            raise GradientError(f"non-finite numeric gradient for parameter {name!r}")
        err = float(np.max(np.abs(analytic - numeric) / np.maximum(1.0, np.abs(numeric)), initial=0.0))
        if report is not None:
            report[name] = err
        worst = max(worst, err)
    return worst
