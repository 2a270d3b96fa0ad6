"""Losses (denoising, frequency-energy consistency) and the training loop."""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Mapping

import numpy as np

from . import autodiff as ad
from .adapters import ExpertBank, bank_from_parameters, init_expert_bank
from .diffusion import (
    EMB_DIM,
    HIDDEN,
    NoiseSchedule,
    denoise,
    forward_corrupt,
    init_denoiser,
    layer_features,
    make_schedule,
    x0_estimate,
)
from .io import load_checkpoint, save_checkpoint, write_csv
from .numerics import DTYPE, ShapeError, rng_for
from .routing import MODES, ROUTER_HIDDEN, RouterParams, RoutingPolicy, entropy, init_router
from .spectrum import EPS_ENERGY, FilterBank, band_split, build_filter_bank, fei_of

log = logging.getLogger(__name__)

FECL_WEIGHTS = ("fei_xt", "fei_x0", "uniform")
TRAIN_HEADER = ["step", "loss_denoise", "loss_fecl", "loss_total", "routing_entropy"]


class ConfigError(ValueError):
    pass


# -- losses ------------------------------------------------------------------

def denoise_loss(eps_hat, eps):
    """Mean squared error over all elements."""
    if ad._shape(eps_hat) != ad._shape(eps):
        raise ShapeError(f"prediction {ad._shape(eps_hat)} vs target {ad._shape(eps)}")
    return ad.mean(ad.square(ad.sub(eps_hat, eps)))


def _l2(x, axes):
    return ad.sqrt(ad.sum(ad.square(x), axis=axes))


def band_profile(x, bank: FilterBank):
    """Per-sample ratios ||x^(k)|| / ||x|| (shape (B, n)) and the norms ||x||.

    Samples with ||x||^2 <= EPS_ENERGY get an all-zero profile.
    """
    axes = (-3, -2, -1)
    total = ad.sum(ad.square(x), axis=axes)
    bad = ad.value(total) <= EPS_ENERGY
    # band norms go through a zero-safe square root
    norms = [_safe_sqrt(ad.sum(ad.square(b), axis=axes)) for b in band_split(x, bank)]
    dtype = ad.value(total).dtype
    denom = _safe_sqrt(total) + bad.astype(dtype)
    profile = ad.div(ad.stack(norms, axis=-1), ad.reshape(denom, ad._shape(denom) + (1,)))
    return profile, bad


def _safe_sqrt(s):
    """sqrt with a zero (sub)gradient wherever the argument is exactly zero."""
    sv = ad.value(s)
    out = np.sqrt(sv)

    def vjp(g, need):
        return (np.divide(g, 2 * out, out=np.zeros_like(g), where=out > 0),)

    return ad._emit(out, (s,), vjp)


@dataclass
class FeclTerms:
    delta: np.ndarray
    residual: np.ndarray
    profile_delta: np.ndarray
    profile_residual: np.ndarray
    weights: np.ndarray
    value: float
    degenerate: bool


def fecl_batch(z_lora, z_base, z_true, bank: FilterBank, weights):
    """Frequency-energy consistency loss averaged over a batch.

    Returns (value, degenerate mask).  Samples whose correction or residual
    has no energy contribute zero.
    """
    delta = ad.sub(z_lora, z_base)
    resid = ad.sub(z_lora, z_true)
    p, bad_d = band_profile(delta, bank)
    q, bad_r = band_profile(resid, bank)
    bad = bad_d | bad_r
    w = np.asarray(weights, dtype=ad.value(p).dtype)
    per_sample = ad.sum(ad.mul(w, ad.square(ad.sub(p, q))), axis=-1)
    keep = (~bad).astype(w.dtype)
    value = ad.div(ad.sum(ad.mul(per_sample, keep)), w.dtype.type(len(keep)))
    return value, bad


def fecl(z_lora, z_base, z_true, bank: FilterBank, weights=None) -> FeclTerms:
    """FECL for a single (C, H, W) triple; ``weights`` defaults to uniform."""
    z_lora, z_base, z_true = (np.asarray(z, dtype=np.float64) for z in (z_lora, z_base, z_true))
    if not z_lora.shape == z_base.shape == z_true.shape:
        raise ShapeError("fecl operands must share a shape")
    if weights is None:
        weights = np.full(bank.n_bands, 1.0 / bank.n_bands)
    weights = np.asarray(weights, dtype=np.float64)
    value, bad = fecl_batch(z_lora[None], z_base[None], z_true[None], bank, weights[None])
    p, _ = band_profile((z_lora - z_base)[None], bank)
    q, _ = band_profile((z_lora - z_true)[None], bank)
    return FeclTerms(z_lora - z_base, z_lora - z_true, p[0], q[0], weights, float(value), bool(bad[0]))


# -- model and configuration -------------------------------------------------

@dataclass
class TrainConfig:
    stage: str = "adapt"  # "pretrain" or "adapt"
    lambda_f: float = 0.1
    lr: float = 1e-3
    steps: int = 2000
    batch: int = 8
    seed: int = 0
    n_bands: int = 3
    kappa: float = 0.0  # filter-bank base scale; 0 applies min(H, W) / 128
    M: int = 3
    rank: int = 4
    scale: float = 1.0
    layers: tuple[int, ...] = (1,)
    tau: float = 0.7
    router_hidden: int = ROUTER_HIDDEN
    routing: str = "fei_soft"
    fecl_weights: str = "fei_xt"
    schedule: str = "linear"
    T: int = 1000
    hidden: int = HIDDEN
    emb_dim: int = EMB_DIM
    weight_decay: float = 0.01
    clip: float = 1.0
    val_repeats: int = 4
    val_seed: int = 7919

    def validate(self) -> None:
        if self.stage not in ("pretrain", "adapt"):
            raise ConfigError(f"stage must be 'pretrain' or 'adapt', got {self.stage!r}")
        if self.lambda_f < 0:
            raise ConfigError("lambda_f must be >= 0")
        for name in ("steps", "batch", "n_bands", "M", "rank", "T", "hidden", "emb_dim", "val_repeats"):
            v = getattr(self, name)
            if v < (0 if name == "steps" else 1):
                raise ConfigError(f"{name} must be positive, got {v}")
        if self.routing not in MODES:
            raise ConfigError(f"routing must be one of {MODES}")
        if self.fecl_weights not in FECL_WEIGHTS:
            raise ConfigError(f"fecl_weights must be one of {FECL_WEIGHTS}")
        if self.kappa < 0:
            raise ConfigError("kappa must be >= 0 (0 selects the default rule)")
        if not self.lr > 0 or not self.tau > 0:
            raise ConfigError("lr and tau must be positive")


@dataclass
class Model:
    """Frozen base denoiser plus (optionally) routed adapter experts."""

    base: dict[str, np.ndarray]
    policy: RoutingPolicy | None = None

    def adapter_parameters(self) -> dict[str, object]:
        return {} if self.policy is None else self.policy.parameters()

    def state(self) -> dict[str, np.ndarray]:
        """Everything a checkpoint stores."""
        out = {k: np.asarray(ad.value(v)) for k, v in self.base.items()}
        if self.policy is not None:
            out.update({k: np.asarray(ad.value(v)) for k, v in self.policy.parameters().items()})
            out["adapters/scale"] = np.array([self.policy.bank.scale], dtype=DTYPE)
            if self.policy.router is not None:
                out["router/tau"] = np.array([self.policy.router.tau], dtype=DTYPE)
        return out

    def bind(self, values: Mapping[str, object]) -> "Model":
        base = {k: values.get(k, v) for k, v in self.base.items()}
        policy = None if self.policy is None else self.policy.with_parameters(values)
        return Model(base, policy)

    def eps(self, x_t, t, T: int):
        ctx = None if self.policy is None else self.policy.context(x_t, t, T)
        return denoise(self.base, x_t, t, ctx), ctx


def build_model(config: TrainConfig, base: Mapping[str, np.ndarray] | None, channels: int, size: int) -> Model:
    """Base denoiser (fresh when ``base`` is None) plus adapters for the adapt stage."""
    if base is None:
        base = init_denoiser(channels, config.hidden, config.emb_dim, seed=config.seed)
    base = dict(base)
    if config.stage == "pretrain":
        return Model(base, None)
    feats = layer_features(channels, base["conv0.w"].shape[0])
    attachment = {l: feats[l] for l in config.layers}
    bank = init_expert_bank(config.M, config.rank, config.scale, attachment, seed=config.seed)
    fbank = build_filter_bank(config.n_bands, size, size, config.kappa or None)
    router = None
    if config.routing in ("fei_soft", "fei_hard", "timestep_soft"):
        router = init_router(config.n_bands, config.M, config.router_hidden, config.tau, seed=config.seed)
    return Model(base, RoutingPolicy(config.routing, bank, fbank, router))


def model_from_state(state: Mapping[str, np.ndarray], config: TrainConfig, size: int) -> Model:
    base = {k: v for k, v in state.items() if k.startswith(("conv", "temb"))}
    if not any(k.startswith("expert") for k in state):
        return Model(base, None)
    scale = float(state["adapters/scale"][0]) if "adapters/scale" in state else config.scale
    bank = bank_from_parameters(state, scale)
    router = None
    if "router/w1" in state:
        tau = float(state["router/tau"][0]) if "router/tau" in state else config.tau
        router = RouterParams(state["router/w1"], state["router/b1"], state["router/w2"], state["router/b2"], tau)
    fbank = build_filter_bank(router.n_inputs if router is not None else config.n_bands, size, size,
                              config.kappa or None)
    mode = config.routing
    if router is None and mode in ("fei_soft", "fei_hard", "timestep_soft"):
        mode = "none"
    return Model(base, RoutingPolicy(mode, bank, fbank, router))


# -- batches and the total objective -----------------------------------------

@dataclass
class Batch:
    x0: np.ndarray
    t: np.ndarray
    noise: np.ndarray


def draw_batch(data: np.ndarray, step: int, config: TrainConfig) -> Batch:
    """Deterministic batch keyed by (seed, step, sample index)."""
    rng = rng_for(config.seed, 0xDA7A, step)
    idx = rng.integers(0, len(data), config.batch)
    t = rng.integers(1, config.T + 1, config.batch)
    noise = np.stack([rng_for(config.seed, 0x401, step, i).standard_normal(data.shape[1:])
                      for i in range(config.batch)]).astype(data.dtype)
    return Batch(data[idx], t, noise)


def fecl_weights(mode: str, x_t, x0, bank: FilterBank) -> np.ndarray:
    B = len(x0)
    if mode == "uniform":
        return np.full((B, bank.n_bands), 1.0 / bank.n_bands)
    src = x_t if mode == "fei_xt" else x0
    energies_ok = np.square(src, dtype=np.float64).sum(axis=(1, 2, 3)) > EPS_ENERGY
    w = np.full((B, bank.n_bands), 1.0 / bank.n_bands)
    if energies_ok.any():
        w[energies_ok] = fei_of(src[energies_ok], bank)
    return w


def total_loss(model: Model, batch: Batch, schedule: NoiseSchedule, config: TrainConfig):
    """L = L_denoise + lambda_f * L_FECL, with a breakdown of both terms.

    FECL operands live at the clean-field level: the x0 estimates of the
    adapted and frozen-base predictions, and the true x0.
    """
    x_t = forward_corrupt(batch.x0, batch.t, schedule, batch.noise)
    eps, ctx = model.eps(x_t, batch.t, schedule.T)
    l_den = denoise_loss(eps, batch.noise)
    terms = {"denoise": float(ad.value(l_den)), "fecl": 0.0, "entropy": 0.0}
    if ctx is not None:
        terms["entropy"] = float(entropy(ctx.weights).mean())
    if model.policy is None or config.lambda_f == 0:
        terms["total"] = terms["denoise"]
        return l_den, terms
    base_only = {k: ad.value(v) for k, v in model.base.items()}
    eps_base = denoise(base_only, x_t, batch.t)
    z_lora = x0_estimate(x_t, eps, batch.t, schedule)
    z_base = x0_estimate(x_t, eps_base, batch.t, schedule)
    w = fecl_weights(config.fecl_weights, x_t, batch.x0, model.policy.filter_bank)
    l_fecl, _ = fecl_batch(z_lora, z_base, batch.x0, model.policy.filter_bank, w)
    dtype = ad.value(l_den).dtype
    total = ad.add(l_den, ad.mul(dtype.type(config.lambda_f), l_fecl))
    terms["fecl"] = float(ad.value(l_fecl))
    terms["total"] = float(ad.value(total))
    return total, terms


def trainable_names(model: Model, stage: str) -> list[str]:
    return list(model.base) if stage == "pretrain" else list(model.adapter_parameters())


def loss_and_grads(model: Model, batch: Batch, schedule: NoiseSchedule, config: TrainConfig):
    names = trainable_names(model, config.stage)
    current = {**model.base, **model.adapter_parameters()}
    tape = ad.Tape()
    tracked = {n: tape.var(current[n], name=n) for n in names}
    loss, terms = total_loss(model.bind(tracked), batch, schedule, config)
    if isinstance(loss, ad.Var) and loss.requires_grad:
        tape.backward(loss)
    grads = {n: (v.grad if v.grad is not None else np.zeros_like(v.value)) for n, v in tracked.items()}
    return terms, grads


# -- optimiser ---------------------------------------------------------------

class AdamW:
    def __init__(self, lr: float, betas=(0.9, 0.999), eps: float = 1e-8, weight_decay: float = 0.0,
                 clip: float | None = 1.0):
        self.lr, self.betas, self.eps, self.wd, self.clip = lr, betas, eps, weight_decay, clip
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, params: dict[str, np.ndarray], grads: Mapping[str, np.ndarray]) -> float:
        """In-place update; returns the pre-clip global gradient norm."""
        names = sorted(grads)
        norm = float(np.sqrt(sum(float(np.vdot(grads[n], grads[n])) for n in names)))
        factor = 1.0
        if self.clip is not None and norm > self.clip:
            factor = self.clip / (norm + 1e-12)
        self.t += 1
        b1, b2 = self.betas
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for n in names:
            p = params[n]
            g = grads[n] * p.dtype.type(factor)
            m = self.m.setdefault(n, np.zeros_like(p))
            v = self.v.setdefault(n, np.zeros_like(p))
            m *= p.dtype.type(b1)
            m += p.dtype.type(1 - b1) * g
            v *= p.dtype.type(b2)
            v += p.dtype.type(1 - b2) * g * g
            if self.wd:
                p *= p.dtype.type(1.0 - self.lr * self.wd)
            p -= p.dtype.type(self.lr) * (m / p.dtype.type(c1)) / (np.sqrt(v / p.dtype.type(c2)) + p.dtype.type(self.eps))
        return norm


# -- validation and training -------------------------------------------------

def validation_loss(model: Model, val: np.ndarray, schedule: NoiseSchedule, config: TrainConfig,
                    chunk: int = 64) -> float:
    """Mean denoising loss on a fixed grid of (field, step, noise) triples.

    Steps are stratified over 1..T and noise is keyed by ``val_seed`` only,
    so every configuration is scored on identical inputs.
    """
    reps = config.val_repeats
    n = len(val) * reps
    ts = 1 + (np.arange(n) * config.T) // n
    ts = ts[rng_for(config.val_seed, 0x7E).permutation(n)]
    total = 0.0
    for start in range(0, n, chunk):
        ids = np.arange(start, min(n, start + chunk))
        x0 = val[ids % len(val)]
        noise = np.stack([rng_for(config.val_seed, 0x7A1, int(i)).standard_normal(val.shape[1:]) for i in ids]).astype(val.dtype)
        x_t = forward_corrupt(x0, ts[ids], schedule, noise)
        eps, _ = model.eps(x_t, ts[ids], schedule.T)
        total += float(np.square(np.asarray(eps, np.float64) - noise).mean()) * len(ids)
    return total / n


@dataclass
class TrainReport:
    config: dict
    val_initial: float
    val_final: float
    steps: int
    rows: list = field(default_factory=list, repr=False)
    seconds: float = 0.0
    degenerate_routing: int = 0

    @property
    def improvement_ratio(self) -> float:
        return self.val_final / self.val_initial if self.val_initial > 0 else float("nan")


def train(config: TrainConfig, train_data: np.ndarray, val_data: np.ndarray, out: str | Path | None = None,
          base: Mapping[str, np.ndarray] | None = None, model: Model | None = None,
          csv_path: str | Path | None = None) -> tuple[Model, TrainReport]:
    """Run ``config.steps`` optimiser steps and return the model and a report.

    The pretrain stage updates the base denoiser; the adapt stage needs a base
    (``base`` or ``model``) and updates only expert and router parameters.
    """
    config.validate()
    train_data = np.asarray(train_data, dtype=DTYPE)
    val_data = np.asarray(val_data, dtype=DTYPE)
    channels, size = train_data.shape[1], train_data.shape[-1]
    if model is None:
        if config.stage == "adapt" and base is None:
            raise ConfigError("adapt stage needs a base denoiser checkpoint")
        model = build_model(config, base, channels, size)
    schedule = make_schedule(config.schedule, config.T)
    params = {k: np.array(v, copy=True) for k, v in {**model.base, **model.adapter_parameters()}.items()}
    model = model.bind(params)
    opt = AdamW(config.lr, weight_decay=config.weight_decay, clip=config.clip)
    names = trainable_names(model, config.stage)

    started = time.perf_counter()
    val_initial = validation_loss(model, val_data, schedule, config)
    rows = []
    for step in range(config.steps):
        batch = draw_batch(train_data, step, config)
        terms, grads = loss_and_grads(model, batch, schedule, config)
        opt.step({n: params[n] for n in names}, grads)
        rows.append([step, terms["denoise"], terms["fecl"], terms["total"], terms["entropy"]])
        if step % 500 == 0:
            log.info("step %d total %.5f", step, terms["total"])
    val_final = validation_loss(model, val_data, schedule, config) if config.steps else val_initial

    report = TrainReport(_config_dict(config), val_initial, val_final, config.steps, rows,
                         time.perf_counter() - started,
                         0 if model.policy is None else model.policy.degenerate_count)
    if csv_path is not None:
        write_csv(csv_path, TRAIN_HEADER, rows)
    if out is not None:
        save_checkpoint(out, model.state())
    return model, report


def _config_dict(config: TrainConfig) -> dict:
    d = asdict(config)
    d["layers"] = list(config.layers)
    return d


def load_model(path, config: TrainConfig, size: int) -> Model:
    return model_from_state(load_checkpoint(path), config, size)
