"""Toy DDPM: noise schedules, forward corruption, a 3-layer conv denoiser and sampler."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from . import autodiff as ad
from .numerics import DTYPE, ShapeError, rng_for

HIDDEN = 16
EMB_DIM = 32
KSIZE = 3
N_LAYERS = 3
ALPHA_BAR_MIN = 1e-8


class NumericError(FloatingPointError):
    pass


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    kind: str
    betas: np.ndarray  # length T+1, betas[0] = 0
    alpha_bar: np.ndarray  # length T+1, alpha_bar[0] = 1

    @property
    def T(self) -> int:
        return len(self.alpha_bar) - 1


def make_schedule(kind: str = "linear", T: int = 1000) -> NoiseSchedule:
    if T < 10:
        raise ValueError(f"schedule needs T >= 10, got {T}")
    if kind == "linear":
        betas = np.linspace(1e-4, 2e-2, T, dtype=np.float64)
    elif kind == "cosine":
        s = 0.008
        steps = np.arange(T + 1, dtype=np.float64)
        f = np.cos((steps / T + s) / (1 + s) * math.pi / 2) ** 2
        ab = f / f[0]
        betas = np.clip(1.0 - ab[1:] / ab[:-1], 1e-8, 0.999)
    else:
        raise ValueError(f"unknown schedule kind {kind!r}")
    betas = np.concatenate([[0.0], betas])
    alpha_bar = np.cumprod(1.0 - betas)
    for arr in (betas, alpha_bar):
        arr.flags.writeable = False
    return NoiseSchedule(kind, betas, alpha_bar)


def _per_sample(schedule: NoiseSchedule, t, values: np.ndarray, ndim: int, dtype):
    """Index ``values`` by scalar or per-sample ``t`` and shape for broadcasting."""
    t = np.asarray(t)
    if np.any(t < 0) or np.any(t > schedule.T):
        raise IndexError(f"step outside 0..{schedule.T}")
    v = values[t]
    if t.ndim == 0:
        return dtype.type(v)
    return v.reshape(v.shape + (1,) * (ndim - 1)).astype(dtype)


def forward_corrupt(x0, t, schedule: NoiseSchedule, noise):
    """sqrt(abar_t) * x0 + sqrt(1 - abar_t) * noise, with ``t`` scalar or per sample."""
    x0 = np.asarray(x0)
    noise = np.asarray(noise)
    try:
        ok = x0.shape == noise.shape or np.broadcast_shapes(x0.shape, noise.shape) == noise.shape
    except ValueError:
        ok = False
    if not ok:
        raise ShapeError(f"noise shape {noise.shape} does not match field {x0.shape}")
    dtype = np.result_type(x0.dtype, noise.dtype)
    ndim = max(x0.ndim, noise.ndim)
    a = _per_sample(schedule, t, np.sqrt(schedule.alpha_bar), ndim, dtype)
    b = _per_sample(schedule, t, np.sqrt(1.0 - schedule.alpha_bar), ndim, dtype)
    return a * x0 + b * noise


def x0_estimate(x_t, eps_hat, t, schedule: NoiseSchedule):
    """Clean-field estimate implied by an epsilon prediction."""
    ab = schedule.alpha_bar[np.asarray(t)]
    if np.any(ab < ALPHA_BAR_MIN):
        raise NumericError(f"alpha_bar {np.min(ab):.3g} too small to invert")
    xv = ad.value(x_t)
    ndim = max(np.ndim(xv), len(ad._shape(eps_hat)))
    dtype = np.result_type(xv.dtype, ad.value(eps_hat).dtype)
    a = _per_sample(schedule, t, np.sqrt(schedule.alpha_bar), ndim, dtype)
    b = _per_sample(schedule, t, np.sqrt(1.0 - schedule.alpha_bar), ndim, dtype)
    return (x_t - b * eps_hat) / a


# -- denoiser ----------------------------------------------------------------

def timestep_embedding(t, dim: int = EMB_DIM) -> np.ndarray:
    """Sinusoidal embedding, shape (B, dim) for per-sample t."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    ang = t[:, None] * freqs[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


def layer_features(channels: int, hidden: int = HIDDEN) -> list[tuple[int, int]]:
    """(in_features, out_features) of each conv layer's flattened weight."""
    widths = [channels, hidden, hidden, channels]
    return [(widths[i] * KSIZE * KSIZE, widths[i + 1]) for i in range(N_LAYERS)]


def init_denoiser(channels: int = 1, hidden: int = HIDDEN, emb_dim: int = EMB_DIM, seed: int = 0) -> dict[str, np.ndarray]:
    rng = rng_for(seed, 0xDE)
    params: dict[str, np.ndarray] = {}
    for i, (fan_in, fan_out) in enumerate(layer_features(channels, hidden)):
        params[f"conv{i}.w"] = (rng.standard_normal((fan_out, fan_in)) / math.sqrt(fan_in)).astype(DTYPE)
        params[f"conv{i}.b"] = np.zeros(fan_out, dtype=DTYPE)
    params["temb.w"] = (rng.standard_normal((2 * hidden, emb_dim)) / math.sqrt(emb_dim)).astype(DTYPE)
    return params


def parameter_count(params: Mapping[str, np.ndarray]) -> int:
    return int(sum(np.size(ad.value(v)) for v in params.values()))


def denoise(params: Mapping, x_t, t, adapters=None):
    """Epsilon prediction of the toy denoiser.

    ``params`` values may be arrays or tape variables.  ``adapters`` is an
    optional :class:`fera.adapters.AdapterContext`; each attached layer adds
    the routed low-rank correction to its pre-activation.
    """
    from .adapters import blended_correction

    x = ad.value(x_t) if not isinstance(x_t, ad.Var) else x_t
    single = len(ad._shape(x)) == 3
    if single:
        x = x[None]
    B, C, H, W = ad._shape(x)
    t_arr = np.broadcast_to(np.asarray(t), (B,))
    dtype = ad.value(params["conv0.w"]).dtype
    emb = timestep_embedding(t_arr, ad._shape(params["temb.w"])[1]).astype(dtype)
    tbias = ad.matmul(emb, ad.transpose(params["temb.w"]))  # (B, 2*hidden)
    hidden = ad._shape(params["conv0.w"])[0]

    h = x
    for i in range(N_LAYERS):
        patches = ad.unfold(h, KSIZE)
        y = ad.matmul(params[f"conv{i}.w"], patches)
        if adapters is not None and i in adapters.bank.attachment:
            y = y + blended_correction(adapters.bank, adapters.weights, i, patches)
        y = y + ad.reshape(params[f"conv{i}.b"], (-1, 1))
        if i < N_LAYERS - 1:
            tb = ad.getitem(tbias, (slice(None), slice(i * hidden, (i + 1) * hidden)))
            y = ad.silu(y + ad.reshape(tb, (B, hidden, 1)))
        if not np.all(np.isfinite(ad.value(y))):
            raise NumericError(f"non-finite activations in layer {i}")
        h = ad.reshape(y, (B, -1, H, W))
    return h[0] if single else h


# -- sampling ----------------------------------------------------------------

@dataclass
class DiffusionSample:
    final: np.ndarray
    seed: int
    timesteps: list[int]
    trajectory: list[np.ndarray] | None = field(default=None, repr=False)


def sub_schedule(T: int, steps: int) -> list[int]:
    """Uniformly strided timesteps T, ..., in decreasing order."""
    if not 1 <= steps <= T:
        raise ValueError(f"steps must be in 1..{T}, got {steps}")
    return [int(round(T - i * T / steps)) for i in range(steps)]


def sample(params: Mapping, schedule: NoiseSchedule, steps: int = 30, seed: int = 0, routing=None,
           shape: tuple[int, int, int] = (1, 32, 32), batch: int | None = None,
           keep_trajectory: bool = False, callback: Callable | None = None) -> DiffusionSample:
    """DDPM ancestral sampling on a strided sub-schedule.

    ``routing`` (a :class:`fera.routing.RoutingPolicy` or ``None``) supplies the
    adapter context for each denoiser call from the current latent.
    ``callback(i, t, x_t, weights)`` is invoked before every denoiser call.
    """
    ts = sub_schedule(schedule.T, steps)
    dtype = ad.value(params["conv0.w"]).dtype
    lead = (1 if batch is None else batch,)
    x = rng_for(seed, 0x5A, 0).standard_normal(lead + tuple(shape)).astype(dtype)
    traj = [x.copy()] if keep_trajectory else None
    for i, s in enumerate(ts):
        s_prev = ts[i + 1] if i + 1 < len(ts) else 0
        ctx = routing.context(x, s, schedule.T) if routing is not None else None
        if callback is not None:
            callback(i, s, x, None if ctx is None else ad.value(ctx.weights))
        eps = denoise(params, x, s, ctx)
        x0_hat = x0_estimate(x, eps, s, schedule)
        a_s = float(schedule.alpha_bar[s])
        a_p = float(schedule.alpha_bar[s_prev])
        beta = 1.0 - a_s / a_p
        c0 = math.sqrt(a_p) * beta / (1.0 - a_s)
        c1 = math.sqrt(1.0 - beta) * (1.0 - a_p) / (1.0 - a_s)
        x = (dtype.type(c0) * x0_hat + dtype.type(c1) * x).astype(dtype)
        if s_prev > 0:
            var = (1.0 - a_p) / (1.0 - a_s) * beta
            z = rng_for(seed, 0x5A, i + 1).standard_normal(x.shape).astype(dtype)
            x = x + dtype.type(math.sqrt(var)) * z
        if traj is not None:
            traj.append(x.copy())
    final = x[0] if batch is None else x
    if traj is not None and batch is None:
        traj = [f[0] for f in traj]
    return DiffusionSample(final, seed, ts, traj)
