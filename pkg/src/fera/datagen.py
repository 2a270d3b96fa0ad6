"""Synthetic fields: power-law Gaussian textures and band-boosted "style" variants."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .io import load_tensor, save_tensor
from .numerics import DTYPE, radial_frequency, rng_for
from .spectrum import FilterBank, band_split

SIZES = (16, 32, 64, 128)


@dataclass(frozen=True)
class SyntheticSpec:
    kind: str = "powerlaw"
    gamma: float = 2.0
    boost_band: int | None = None  # 1-based band index
    boost_factor: float = 1.0
    size: int = 32
    channels: int = 1
    seed: int = 0

    def validate(self) -> None:
        if self.kind not in ("powerlaw", "band_boost"):
            raise ValueError(f"unknown synthetic kind {self.kind!r}")
        if not 0.0 <= self.gamma <= 4.0:
            raise ValueError(f"gamma must lie in [0, 4], got {self.gamma}")
        if not self.boost_factor > 0:
            raise ValueError(f"boost_factor must be positive, got {self.boost_factor}")
        if self.size not in SIZES:
            raise ValueError(f"size must be one of {SIZES}, got {self.size}")
        if self.channels < 1:
            raise ValueError("channels must be >= 1")
        if self.kind == "band_boost" and self.boost_band is None:
            raise ValueError("band_boost needs boost_band")


def _powerlaw64(spec: SyntheticSpec) -> np.ndarray:
    n = spec.size
    white = rng_for(spec.seed, 0x9A).standard_normal((spec.channels, n, n))
    f = radial_frequency(n, n)
    amp = np.zeros_like(f)
    amp[f > 0] = f[f > 0] ** (-spec.gamma / 2.0)
    # the spectrum of real white noise is Hermitian, so the filtered inverse is real
    field = np.fft.ifft2(np.fft.fft2(white, axes=(-2, -1)) * amp, axes=(-2, -1)).real
    return field / field.std()


def gen_powerlaw(spec: SyntheticSpec) -> np.ndarray:
    """Zero-mean, unit-variance field with power spectrum proportional to f^-gamma."""
    spec.validate()
    if spec.kind != "powerlaw":
        raise ValueError("gen_powerlaw needs kind='powerlaw'")
    return _powerlaw64(spec).astype(DTYPE)


def gen_band_boost(spec: SyntheticSpec, bank: FilterBank) -> np.ndarray:
    """Power-law field with one filter-bank band scaled by ``boost_factor``."""
    spec.validate()
    if spec.kind != "band_boost":
        raise ValueError("gen_band_boost needs kind='band_boost'")
    if not 1 <= spec.boost_band <= bank.n_bands:
        raise ValueError(f"boost_band {spec.boost_band} outside 1..{bank.n_bands}")
    x = _powerlaw64(spec)
    if spec.boost_factor != 1.0:
        band = band_split(x, bank)[spec.boost_band - 1]
        # sum of bands with one scaled == x + (factor - 1) * band
        x = x + (spec.boost_factor - 1.0) * band
        x = x / x.std()
    return x.astype(DTYPE)


def generate(spec: SyntheticSpec, bank: FilterBank | None = None) -> np.ndarray:
    if spec.kind == "band_boost":
        if bank is None:
            raise ValueError("band_boost generation needs a filter bank")
        return gen_band_boost(spec, bank)
    return gen_powerlaw(spec)


def generate_many(spec: SyntheticSpec, seeds: Sequence[int], bank: FilterBank | None = None) -> np.ndarray:
    """Stack of fields, one per seed: shape (len(seeds), C, H, W)."""
    return np.stack([generate(replace(spec, seed=int(s)), bank) for s in seeds])


def materialize(directory, spec: SyntheticSpec, seeds: Sequence[int], bank: FilterBank | None = None) -> Path:
    """Write one tensor file per seed plus ``manifest.json``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    files = []
    for s in seeds:
        name = f"field_{int(s):06d}.fera"
        save_tensor(directory / name, generate(replace(spec, seed=int(s)), bank))
        files.append(name)
    manifest = {"spec": asdict(spec), "seeds": [int(s) for s in seeds], "files": files}
    if bank is not None:
        manifest["filter_bank"] = {"n_bands": bank.n_bands, "sigmas": list(bank.sigmas), "kappa": bank.kappa}
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    return directory


def load_directory(directory) -> np.ndarray:
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    return np.stack([load_tensor(directory / f) for f in manifest["files"]])
