import math

import numpy as np
import pytest

from fera.adapters import AdapterContext, init_expert_bank
from fera.datagen import SyntheticSpec, generate_many
from fera.diffusion import (NoiseSchedule, NumericError, denoise, forward_corrupt, init_denoiser, layer_features,
                            make_schedule, parameter_count, sample, sub_schedule, timestep_embedding, x0_estimate)
from fera.io import load_checkpoint, save_checkpoint
from fera.numerics import ShapeError, rng_for
from fera.spectrum import fit_loglog_slope, radial_spectrum


def test_linear_schedule_values():
    s = make_schedule("linear", 1000)
    assert s.alpha_bar[0] == 1.0 and s.betas[0] == 0.0
    assert s.alpha_bar[1000] < 0.01
    betas = np.linspace(1e-4, 2e-2, 1000)
    assert s.alpha_bar[1000] == pytest.approx(math.prod(1 - b for b in betas), rel=1e-12)
    np.testing.assert_allclose(s.betas[1:], betas, rtol=0, atol=1e-15)
    np.testing.assert_allclose(s.alpha_bar, np.cumprod(1 - s.betas), rtol=1e-6)


def test_cosine_schedule_monotone():
    s = make_schedule("cosine", 100)
    assert s.alpha_bar[0] == 1.0
    assert np.all(np.diff(s.alpha_bar) < 0)
    assert s.T == 100


def test_schedule_errors():
    with pytest.raises(ValueError):
        make_schedule("linear", 9)
    with pytest.raises(ValueError):
        make_schedule("quadratic", 100)


def test_forward_corrupt_edges(rng):
    s = make_schedule("linear", 100)
    x0 = rng.standard_normal((1, 8, 8)).astype(np.float32)
    eps = rng.standard_normal((1, 8, 8)).astype(np.float32)
    np.testing.assert_array_equal(forward_corrupt(x0, 0, s, eps), x0)
    out = forward_corrupt(np.zeros_like(x0), 40, s, eps)
    np.testing.assert_allclose(out, np.sqrt(1 - s.alpha_bar[40]) * eps, rtol=1e-6)
    with pytest.raises(ShapeError):
        forward_corrupt(x0, 3, s, np.zeros((1, 4, 4)))
    with pytest.raises(IndexError):
        forward_corrupt(x0, 101, s, eps)


def test_forward_corrupt_second_moment():
    s = make_schedule("linear", 1000)
    x0 = rng_for(0, 9).standard_normal((1, 16, 16))
    for t in (50, 400, 900):
        norms = [np.sum(forward_corrupt(x0, t, s, rng_for(1, t, i).standard_normal(x0.shape)) ** 2) for i in range(64)]
        a = s.alpha_bar[t]
        expected = a * np.sum(x0**2) + (1 - a) * x0.size
        assert np.mean(norms) == pytest.approx(expected, rel=0.05)


def test_x0_estimate_round_trip():
    s = make_schedule("linear", 1000)
    r = rng_for(3)
    for _ in range(20):
        x0 = r.standard_normal((2, 1, 8, 8))
        eps = r.standard_normal(x0.shape)
        t = r.integers(0, 1001, 2)
        assert np.max(np.abs(x0_estimate(forward_corrupt(x0, t, s, eps), eps, t, s) - x0)) < 1e-4


def test_x0_estimate_zero_prediction_and_guard(rng):
    s = make_schedule("linear", 100)
    x = rng.standard_normal((1, 4, 4))
    np.testing.assert_allclose(x0_estimate(x, np.zeros_like(x), 60, s), x / np.sqrt(s.alpha_bar[60]))
    tiny = NoiseSchedule("custom", np.zeros(11), np.concatenate([[1.0], np.geomspace(0.5, 1e-12, 10)]))
    with pytest.raises(NumericError):
        x0_estimate(x, x, 10, tiny)


def test_zero_network_outputs_zero():
    params = {k: np.zeros_like(v) for k, v in init_denoiser(1).items()}
    x = rng_for(0).standard_normal((1, 8, 8)).astype(np.float32)
    assert np.all(denoise(params, x, 10) == 0)


def test_denoiser_shapes_and_counts():
    p = init_denoiser(2, hidden=16, emb_dim=32)
    expected = sum(i * o + o for i, o in layer_features(2, 16)) + 32 * 32
    assert parameter_count(p) == expected
    x = rng_for(1).standard_normal((3, 2, 8, 8)).astype(np.float32)
    out = denoise(p, x, np.array([1, 50, 999]))
    assert out.shape == x.shape and out.dtype == np.float32
    np.testing.assert_allclose(denoise(p, x[1], 50), out[1], rtol=1e-5, atol=1e-6)


def test_checkpoint_roundtrip_keeps_parameter_count(tmp_path):
    p = init_denoiser(1, seed=4)
    save_checkpoint(tmp_path / "d.ckpt", p)
    back = load_checkpoint(tmp_path / "d.ckpt")
    assert parameter_count(back) == parameter_count(p)
    x = rng_for(2).standard_normal((1, 8, 8)).astype(np.float32)
    np.testing.assert_array_equal(denoise(back, x, 7), denoise(p, x, 7))


def test_zero_up_adapters_are_neutral():
    p = init_denoiser(1, seed=1)
    feats = layer_features(1)
    bank = init_expert_bank(3, 4, 1.0, {0: feats[0], 1: feats[1]}, seed=2)
    x = rng_for(5).standard_normal((2, 1, 8, 8)).astype(np.float32)
    w = np.array([[0.2, 0.3, 0.5], [1.0, 0.0, 0.0]], dtype=np.float32)
    np.testing.assert_array_equal(denoise(p, x, 30, AdapterContext(bank, w)), denoise(p, x, 30))


@pytest.mark.filterwarnings("ignore:invalid value:RuntimeWarning")
def test_nonfinite_activation_names_layer():
    p = init_denoiser(1)
    p["conv1.w"] = np.full_like(p["conv1.w"], np.inf)
    with pytest.raises(NumericError, match="layer 1"):
        denoise(p, rng_for(0).standard_normal((1, 8, 8)).astype(np.float32), 5)


def test_timestep_embedding_shape():
    e = timestep_embedding(np.array([0, 10]), 8)
    assert e.shape == (2, 8)
    np.testing.assert_array_equal(e[0], [0, 0, 0, 0, 1, 1, 1, 1])


def test_sub_schedule():
    assert sub_schedule(1000, 4) == [1000, 750, 500, 250]
    assert sub_schedule(10, 10) == list(range(10, 0, -1))
    with pytest.raises(ValueError):
        sub_schedule(10, 11)


def test_one_step_zero_network_closed_form():
    s = make_schedule("linear", 1000)
    params = {k: np.zeros_like(v) for k, v in init_denoiser(1).items()}
    out = sample(params, s, steps=1, seed=9, shape=(1, 8, 8))
    x_T = rng_for(9, 0x5A, 0).standard_normal((1, 1, 8, 8)).astype(np.float32)
    # one step from T to 0: the posterior mean collapses to the x0 estimate x_T / sqrt(abar_T)
    np.testing.assert_allclose(out.final, x_T[0] / np.sqrt(s.alpha_bar[1000]), rtol=1e-5)


def test_sampling_deterministic_with_trajectory():
    s = make_schedule("linear", 100)
    p = init_denoiser(1, seed=3)
    a = sample(p, s, 5, seed=4, shape=(1, 8, 8), keep_trajectory=True)
    b = sample(p, s, 5, seed=4, shape=(1, 8, 8), keep_trajectory=True)
    assert len(a.trajectory) == 6 and a.timesteps == [100, 80, 60, 40, 20]
    for u, v in zip(a.trajectory, b.trajectory):
        np.testing.assert_array_equal(u, v)
    c = sample(p, s, 5, seed=5, shape=(1, 8, 8))
    assert not np.array_equal(a.final, c.final)


def test_sample_rejects_too_many_steps():
    with pytest.raises(ValueError):
        sample(init_denoiser(1), make_schedule("linear", 20), 21, shape=(1, 8, 8))


def _slope(x):
    r = radial_spectrum(x)
    return fit_loglog_slope(r.bin_centers, r.amplitudes, r.counts)


@pytest.mark.slow
def test_trained_samples_follow_training_spectrum(pretrained):
    base, _, _ = pretrained
    s = make_schedule("linear", 1000)
    train_slope = np.mean([_slope(x) for x in generate_many(SyntheticSpec(gamma=2.0), range(16))])
    samples = sample(base, s, 30, seed=0, shape=(1, 32, 32), batch=16).final
    sample_slope = np.mean([_slope(x) for x in samples])
    assert abs(sample_slope - train_slope) < 0.5
