"""Frequency-energy analysis: DoG filter banks, band energies, FEI and SNR.

The bank uses Gaussian scales ``sigma_k = kappa * 2**k`` (k = 0..n-2) with
``kappa = min(H, W) / 128``.  A field is split into ``n`` bands::

    band 1      = G(sigma_1) * x
    band k      = (G(sigma_k) - G(sigma_{k-1})) * x      1 < k < n
    band n      = x - G(sigma_{n-1}) * x

which telescopes back to ``x`` exactly.  Convolutions are circular, so band
energies agree with their DFT-domain counterparts.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .diffusion import NoiseSchedule, forward_corrupt
from .numerics import (
    Kernel2D,
    ShapeError,
    conv_depthwise,
    fft2,
    gaussian_kernel,
    kernel_dft,
    kernel_size_for,
    radial_frequency,
    rng_for,
)

log = logging.getLogger(__name__)

EPS_ENERGY = 1e-12
KAPPA_MIN = 0.3
# mid-frequency window (cycles/pixel) used for log-log slope fits
MID_FREQ = (0.05, 0.35)
MIN_BIN_COUNT = 4


class DegenerateInputError(ValueError):
    """Raised when a field carries (numerically) no energy."""


@dataclass(frozen=True)
class FilterBank:
    n_bands: int
    sigmas: tuple[float, ...]
    kappa: float
    clamped: bool = False

    def __post_init__(self):
        if self.n_bands < 2:
            raise ValueError(f"n_bands must be >= 2, got {self.n_bands}")
        if len(self.sigmas) != self.n_bands - 1:
            raise ValueError("a bank with n bands needs n-1 sigmas")
        if any(s <= 0 for s in self.sigmas) or any(b <= a for a, b in zip(self.sigmas, self.sigmas[1:])):
            raise ValueError(f"sigmas must be positive and strictly increasing: {self.sigmas}")

    def kernels(self, height: int, width: int) -> list[Kernel2D]:
        limit = min(height, width)
        return [gaussian_kernel(s, kernel_size_for(s, limit)) for s in self.sigmas]


def build_filter_bank(n_bands: int, height: int, width: int, kappa: float | None = None) -> FilterBank:
    if n_bands < 2:
        raise ValueError(f"n_bands must be >= 2, got {n_bands}")
    if min(height, width) < 8:
        raise ShapeError(f"filter bank needs fields of at least 8x8, got {height}x{width}")
    if kappa is None:
        kappa = min(height, width) / 128.0
    clamped = kappa < KAPPA_MIN
    if clamped:
        log.info("kappa %.4g below %.2g for %dx%d; clamping", kappa, KAPPA_MIN, height, width)
        kappa = KAPPA_MIN
    sigmas = tuple(kappa * 2.0**k for k in range(n_bands - 1))
    return FilterBank(n_bands, sigmas, float(kappa), clamped)


def band_split(x, bank: FilterBank) -> list:
    """The n bands of ``x`` (array or tape variable, any leading axes)."""
    h, w = ad._shape(x)[-2:]
    blurred = [conv_depthwise(x, k) for k in bank.kernels(h, w)]
    bands = [blurred[0]]
    for lo, hi in zip(blurred, blurred[1:]):
        bands.append(hi - lo)
    bands.append(x - blurred[-1])
    return bands


@dataclass
class BandDecomposition:
    bands: list[np.ndarray]
    energies: np.ndarray

    def recompose(self) -> np.ndarray:
        out = self.bands[0].copy()
        for b in self.bands[1:]:
            out += b
        return out


def decompose(x, bank: FilterBank) -> BandDecomposition:
    x = np.asarray(x)
    if not np.all(np.isfinite(x)):
        raise FloatingPointError("decompose() needs a finite field")
    bands = band_split(x, bank)
    energies = np.array([_energy(b) for b in bands])
    return BandDecomposition(bands, energies)


def _energy(b: np.ndarray) -> float:
    b = b.astype(np.float64, copy=False)
    return float(np.vdot(b, b))


def band_energies(x, bank: FilterBank) -> np.ndarray:
    """Per-band squared L2 energies, summed over the last three axes.

    Returns shape ``(..., n_bands)``; for a single (C, H, W) field, ``(n,)``.
    """
    x = np.asarray(x)
    bands = band_split(x, bank)
    return np.stack([np.square(b, dtype=np.float64).sum(axis=(-3, -2, -1)) for b in bands], axis=-1)


def fei(d: BandDecomposition) -> np.ndarray:
    """Frequency-energy indicator: band energies normalised onto the simplex."""
    return _normalise(np.asarray(d.energies, dtype=np.float64))


def fei_of(x, bank: FilterBank) -> np.ndarray:
    """FEI of a field, or of each field in a batch (shape ``(..., n)``)."""
    return _normalise(band_energies(x, bank))


def _normalise(energies: np.ndarray) -> np.ndarray:
    total = energies.sum(axis=-1, keepdims=True)
    if np.any(total <= EPS_ENERGY):
        raise DegenerateInputError("total band energy is zero; FEI undefined")
    return energies / total


def band_responses(bank: FilterBank, height: int, width: int) -> list[np.ndarray]:
    """DFT-domain transfer function of every band filter (oracle use)."""
    g = [kernel_dft(k, height, width) for k in bank.kernels(height, width)]
    resp = [g[0]]
    for lo, hi in zip(g, g[1:]):
        resp.append(hi - lo)
    resp.append(1.0 - g[-1])
    return resp


# -- radial spectra ----------------------------------------------------------

@dataclass
class RadialSpectrum:
    bin_centers: np.ndarray
    amplitudes: np.ndarray
    counts: np.ndarray = field(repr=False)


def radial_bins(height: int, width: int, n_bins: int):
    """Assign every non-DC DFT cell to one of ``n_bins`` equal-width annuli.

    Returns (bin index per cell with -1 for DC, bin centres, cell counts).
    """
    if n_bins < 4:
        raise ValueError(f"n_bins must be >= 4, got {n_bins}")
    f = radial_frequency(height, width)
    fmax = 0.5 * np.sqrt(2.0)
    edges = np.linspace(0.0, fmax, n_bins + 1)
    idx = np.clip(np.searchsorted(edges, f, side="left") - 1, 0, n_bins - 1)
    idx[f == 0] = -1
    counts = np.bincount(idx[idx >= 0], minlength=n_bins)
    centers = 0.5 * (edges[:-1] + edges[1:])
    return idx, centers, counts


def _bin_mean(values: np.ndarray, idx: np.ndarray, counts: np.ndarray) -> np.ndarray:
    mask = idx >= 0
    sums = np.bincount(idx[mask], weights=values[mask], minlength=len(counts))
    return np.divide(sums, counts, out=np.zeros_like(sums), where=counts > 0)


def radial_spectrum(x, n_bins: int = 32) -> RadialSpectrum:
    """Mean DFT magnitude per annulus, averaged over channels."""
    x = np.asarray(x)
    if x.ndim == 2:
        x = x[None]
    h, w = x.shape[-2:]
    amp = np.abs(fft2(x)).mean(axis=0)
    idx, centers, counts = radial_bins(h, w, n_bins)
    return RadialSpectrum(centers, _bin_mean(amp, idx, counts), counts)


def fit_loglog_slope(centers, values, counts, freq_range=MID_FREQ, min_count: int = MIN_BIN_COUNT) -> float:
    """Least-squares slope of log(values) against log(frequency)."""
    centers, values, counts = map(np.asarray, (centers, values, counts))
    lo, hi = freq_range
    keep = (centers >= lo) & (centers <= hi) & (counts >= min_count) & (values > 0) & np.isfinite(values)
    if keep.sum() < 2:
        raise ValueError("fewer than two usable bins in the fit window")
    slope, _ = np.polyfit(np.log(centers[keep]), np.log(values[keep]), 1)
    return float(slope)


# -- SNR ---------------------------------------------------------------------

@dataclass
class SnrProfile:
    bin_centers: np.ndarray
    snr: np.ndarray
    counts: np.ndarray = field(repr=False)
    alpha_bar: float = 1.0


def _check_step(schedule: NoiseSchedule, t: int) -> None:
    if not 0 <= t <= schedule.T:
        raise IndexError(f"step {t} outside 0..{schedule.T}")


def measure_snr(x0, schedule: NoiseSchedule, t: int, n_bins: int = 32,
                n_noise_draws: int = 16, seed: int = 0) -> SnrProfile:
    """Per-annulus SNR of the forward process at step ``t``.

    The noise power is a Monte Carlo estimate over ``n_noise_draws``
    unit-Gaussian fields.  Bins with no noiseless corruption report +inf.
    """
    _check_step(schedule, t)
    if n_noise_draws < 8:
        raise ValueError("n_noise_draws must be >= 8")
    x0 = np.asarray(x0)
    h, w = x0.shape[-2:]
    idx, centers, counts = radial_bins(h, w, n_bins)
    signal = _bin_mean((np.abs(fft2(x0)) ** 2).mean(axis=0), idx, counts)
    rng = rng_for(seed, 0x5E5)
    noise = rng.standard_normal((n_noise_draws,) + x0.shape)
    noise_pow = _bin_mean((np.abs(fft2(noise)) ** 2).mean(axis=(0, 1)), idx, counts)
    a = float(schedule.alpha_bar[t])
    with np.errstate(divide="ignore", invalid="ignore"):
        if a >= 1.0:
            snr = np.full_like(signal, np.inf)
        else:
            snr = a * signal / ((1.0 - a) * noise_pow)
    snr[counts == 0] = np.nan
    return SnrProfile(centers, snr, counts, a)


def band_signal_noise_ratio(x0, bank: FilterBank, n_noise_draws: int = 32, seed: int = 0) -> np.ndarray:
    """Per-band ratio of clean-signal energy to expected unit-noise energy."""
    if n_noise_draws < 8:
        raise ValueError("n_noise_draws must be >= 8")
    x0 = np.asarray(x0, dtype=np.float64)
    signal = band_energies(x0, bank)
    rng = rng_for(seed, 0xBA4D)
    noise = rng.standard_normal((n_noise_draws,) + x0.shape)
    noise_energy = band_energies(noise, bank).mean(axis=0)
    return signal / noise_energy


def band_snr_table(x0, schedule: NoiseSchedule, bank: FilterBank, n_noise_draws: int = 32,
                   seed: int = 0) -> np.ndarray:
    """SNR of every band at every step, shape ``(T + 1, n_bands)``."""
    ratio = band_signal_noise_ratio(x0, bank, n_noise_draws, seed)
    a = schedule.alpha_bar[:, None]
    with np.errstate(divide="ignore"):
        odds = np.where(a >= 1.0, np.inf, a / np.maximum(1.0 - a, 0.0))
    return odds * ratio[None, :]


def snr_crossings(table: np.ndarray) -> np.ndarray:
    """First step in denoising order (T down to 0) where each band's SNR >= 1."""
    out = np.full(table.shape[1], -1, dtype=int)
    for k in range(table.shape[1]):
        hits = np.nonzero(table[:, k] >= 1.0)[0]
        if hits.size:
            out[k] = hits.max()
    return out


# -- evolution ---------------------------------------------------------------

@dataclass
class EvolutionTable:
    t: np.ndarray
    alpha_bar: np.ndarray
    e: np.ndarray  # (rows, n_bands)

    @property
    def header(self) -> list[str]:
        return ["t", "alpha_bar"] + [f"e{k + 1}" for k in range(self.e.shape[1])]

    def rows(self):
        for i in range(len(self.t)):
            yield [int(self.t[i]), float(self.alpha_bar[i]), *map(float, self.e[i])]


def energy_evolution(x0, schedule: NoiseSchedule, bank: FilterBank, seed: int = 0,
                     chunk: int = 64) -> EvolutionTable:
    """FEI of the forward-corrupted field at every step 0..T.

    The noise for step ``t`` is keyed by ``(seed, t)``, so rows are
    reproducible independently of each other.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    steps = np.arange(schedule.T + 1)
    e = np.empty((len(steps), bank.n_bands))
    for start in range(0, len(steps), chunk):
        ts = steps[start:start + chunk]
        noise = np.stack([rng_for(seed, 0xE7, int(t)).standard_normal(x0.shape) for t in ts])
        xt = forward_corrupt(x0[None], ts, schedule, noise)
        e[start:start + len(ts)] = fei_of(xt, bank)
    return EvolutionTable(steps, schedule.alpha_bar.copy(), e)
