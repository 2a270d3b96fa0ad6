import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fera.datagen import SyntheticSpec, generate
from fera.diffusion import make_schedule
from fera.numerics import ShapeError, kernel_dft, rng_for
from fera.spectrum import (DegenerateInputError, band_energies, band_responses, band_snr_table, band_split,
                           build_filter_bank, decompose, energy_evolution, fei, fei_of, fit_loglog_slope,
                           measure_snr, radial_spectrum, snr_crossings)


def fft_band_energies(x, bank):
    """Band energies from DFT-domain filter responses (Parseval), float64."""
    X = np.fft.fft2(np.asarray(x, np.float64), axes=(-2, -1))
    n = x.shape[-2] * x.shape[-1]
    return np.array([np.sum(np.abs(r * X) ** 2) / n for r in band_responses(bank, *x.shape[-2:])])


def test_bank_scale_rule():
    assert build_filter_bank(3, 128, 128).sigmas == (1.0, 2.0)
    assert build_filter_bank(2, 128, 128).sigmas == (1.0,)
    b = build_filter_bank(3, 64, 64)
    assert b.kappa == 0.5 and b.sigmas == (0.5, 1.0) and not b.clamped
    b = build_filter_bank(3, 32, 32)
    assert b.clamped and b.sigmas == pytest.approx((0.3, 0.6))


def test_bank_errors():
    with pytest.raises(ValueError):
        build_filter_bank(1, 32, 32)
    with pytest.raises(ShapeError):
        build_filter_bank(3, 4, 4)


def test_constant_field_lives_in_lowest_band():
    bank = build_filter_bank(3, 16, 16)
    x = np.full((1, 16, 16), 1.75)
    bands = band_split(x, bank)
    np.testing.assert_allclose(bands[0], x, atol=1e-12)
    for b in bands[1:]:
        assert np.max(np.abs(b)) < 1e-12
    np.testing.assert_allclose(fei(decompose(x, bank)), [1.0, 0.0, 0.0], atol=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1), st.sampled_from([1, 3]), st.sampled_from([16, 32, 64]), st.integers(2, 5),
       st.sampled_from([np.float32, np.float64]))
def test_reconstruction_identity(seed, c, n, nb, dtype):
    x = np.random.default_rng(seed).standard_normal((c, n, n)).astype(dtype)
    bank = build_filter_bank(nb, n, n)
    err = np.max(np.abs(decompose(x, bank).recompose() - x))
    assert err < (1e-5 if dtype == np.float32 else 1e-10)


def test_parseval_per_band_white_noise():
    x = rng_for(0, 1).standard_normal((1, 64, 64))
    bank = build_filter_bank(3, 64, 64)
    e = band_energies(x, bank)
    oracle = fft_band_energies(x, bank)
    assert np.max(np.abs(e - oracle) / oracle) < 1e-5
    np.testing.assert_allclose(fei_of(x, bank), oracle / oracle.sum(), atol=1e-4)


def test_fei_scale_invariance_and_simplex(rng):
    bank = build_filter_bank(3, 32, 32)
    x = rng.standard_normal((2, 32, 32)).astype(np.float32)
    ref = fei_of(x, bank)
    assert abs(ref.sum() - 1) < 1e-6 and np.all(ref >= 0)
    for c in (1e-3, 1.0, 1e3):
        assert np.max(np.abs(fei_of(np.float32(c) * x, bank) - ref)) < 1e-6


def test_fei_degenerate_zero_field():
    bank = build_filter_bank(3, 16, 16)
    with pytest.raises(DegenerateInputError):
        fei_of(np.zeros((1, 16, 16)), bank)


def test_band_responses_match_kernel_dfts():
    bank = build_filter_bank(3, 64, 64)
    g = [kernel_dft(k, 64, 64) for k in bank.kernels(64, 64)]
    r = band_responses(bank, 64, 64)
    np.testing.assert_allclose(r[0], g[0], atol=1e-12)
    np.testing.assert_allclose(r[1], g[1] - g[0], atol=1e-12)
    np.testing.assert_allclose(r[2], 1 - g[1], atol=1e-12)
    np.testing.assert_allclose(sum(r), 1.0, atol=1e-12)


@pytest.mark.parametrize("n", [128, 256])
def test_middle_band_is_band_pass(n):
    bank = build_filter_bank(4, n, n)
    for r in band_responses(bank, n, n)[1:-1]:
        mag = np.abs(r)
        assert mag[0, 0] <= 1e-3
        assert mag[n // 2, n // 2] <= 1e-3
        peak = np.unravel_index(np.argmax(mag), mag.shape)
        assert peak != (0, 0) and peak != (n // 2, n // 2)


def _partition_error(n, seeds=8):
    bank = build_filter_bank(3, n, n)
    errs = []
    for s in range(seeds):
        x = rng_for(s, 0x77).standard_normal((1, n, n))
        errs.append(abs(band_energies(x, bank).sum() - np.sum(x**2)) / np.sum(x**2))
    return max(errs), bank


def _partition_oracle(bank, n):
    # expected excess for white noise: mean over the DFT grid of sum_k |H_k|^2 - 1
    return abs(sum(np.mean(np.abs(r) ** 2) for r in band_responses(bank, n, n)) - 1.0)


@pytest.mark.parametrize("n", [64, 128])
def test_partition_error_matches_filter_oracle(n):
    err, bank = _partition_error(n)
    assert err == pytest.approx(_partition_oracle(bank, n), abs=0.03)


def test_partition_bound_holds_at_128():
    assert _partition_error(128)[0] < 0.25


@pytest.mark.xfail(strict=True, reason="the DoG bands at kappa=0.5 overlap; the white-noise excess is ~0.40, "
                                       "above the 0.25 bound (see decisions ledger)")
def test_partition_bound_at_64():
    assert _partition_error(64)[0] < 0.25


def test_radial_spectrum_impulse_and_constant():
    x = np.zeros((1, 32, 32))
    x[0, 3, 7] = 1.0
    amp = radial_spectrum(x, 16).amplitudes
    np.testing.assert_allclose(amp[np.isfinite(amp)], 1.0, atol=1e-12)
    amp = radial_spectrum(np.full((1, 32, 32), 4.0), 16).amplitudes
    assert np.nanmax(amp) < 1e-9


def test_radial_bins_increasing():
    spec = radial_spectrum(rng_for(1).standard_normal((1, 16, 16)), 8)
    c = spec.bin_centers
    assert np.all(np.diff(c) > 0) and c[0] > 0 and c[-1] <= 0.5 * np.sqrt(2) + 1e-12


def test_powerlaw_amplitude_slope():
    slopes = []
    for seed in range(16):
        s = radial_spectrum(generate(SyntheticSpec(gamma=2.0, size=64, seed=seed)))
        slopes.append(fit_loglog_slope(s.bin_centers, s.amplitudes, s.counts))
    assert np.mean(slopes) == pytest.approx(-1.0, abs=0.15)


def test_snr_infinite_without_noise_and_monotone():
    sched = make_schedule("linear", 100)
    x = generate(SyntheticSpec(gamma=2.0, size=32, seed=3))
    assert np.all(np.isinf(measure_snr(x, sched, 0).snr[np.isfinite(measure_snr(x, sched, 50).snr)]))
    prev = None
    for t in (90, 60, 30, 10, 1):
        snr = measure_snr(x, sched, t, seed=2).snr
        if prev is not None:
            ok = np.isfinite(snr)
            assert np.all(snr[ok] >= prev[ok])
        prev = snr
    with pytest.raises(IndexError):
        measure_snr(x, sched, 101)
    with pytest.raises(ValueError):
        measure_snr(x, sched, 10, n_noise_draws=4)


def test_snr_crossings_definition():
    table = np.array([[np.inf, np.inf], [5.0, 2.0], [2.0, 0.5], [0.5, 0.1]])
    np.testing.assert_array_equal(snr_crossings(table), [2, 1])
    np.testing.assert_array_equal(snr_crossings(np.zeros((3, 1))), [-1])


def test_band_snr_crossings_coarse_to_fine():
    sched = make_schedule("linear", 1000)
    bank = build_filter_bank(3, 64, 64)
    for seed in range(4):
        x = generate(SyntheticSpec(gamma=2.0, size=64, seed=seed))
        t = snr_crossings(band_snr_table(x, sched, bank, seed=seed))
        assert t[0] >= t[1] >= t[2] and t[0] > t[2]


def test_energy_evolution_endpoints():
    sched = make_schedule("linear", 1000)
    bank = build_filter_bank(3, 64, 64)
    r = band_responses(bank, 64, 64)
    white = np.array([np.mean(np.abs(h) ** 2) for h in r])
    white /= white.sum()
    last = []
    for seed in range(16):
        x = generate(SyntheticSpec(gamma=2.0, size=64, seed=seed))
        ev = energy_evolution(x, sched, bank, seed=seed)
        assert ev.e.shape == (1001, 3)
        np.testing.assert_allclose(ev.e.sum(axis=1), 1.0, atol=1e-9)
        np.testing.assert_allclose(ev.e[0], fei_of(x.astype(np.float64), bank), atol=1e-12)
        last.append(ev.e[-1])
    assert np.max(np.abs(np.mean(last, axis=0) - white)) < 0.05


def test_energy_evolution_deterministic():
    sched = make_schedule("cosine", 50)
    bank = build_filter_bank(3, 16, 16)
    x = generate(SyntheticSpec(gamma=1.0, size=16, seed=1))
    a = energy_evolution(x, sched, bank, seed=5).e
    np.testing.assert_array_equal(a, energy_evolution(x, sched, bank, seed=5).e)
