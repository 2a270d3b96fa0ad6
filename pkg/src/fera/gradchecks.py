"""Registry of central-difference gradient checks for every differentiable piece.

Each check builds a small float64 problem and returns the worst relative
error reported by :func:`fera.numerics.grad_check`.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from .adapters import blended_correction, init_expert_bank
from .diffusion import denoise, init_denoiser, layer_features, make_schedule
from .numerics import grad_check, rng_for
from .objective import Batch, Model, TrainConfig, fecl_batch, total_loss
from .routing import RouterParams, RoutingPolicy, route_soft
from .spectrum import build_filter_bank

TOLERANCE = 1e-4
_CHECKS: dict[str, Callable[[int], float]] = {}


def register(name: str):
    def wrap(fn):
        _CHECKS[name] = fn
        return fn
    return wrap


def names() -> list[str]:
    return list(_CHECKS)


def _rng(seed: int, key: int) -> np.random.Generator:
    return rng_for(seed, 0x6C, key)


def _f64(d):
    return {k: np.asarray(v, dtype=np.float64) for k, v in d.items()}


@register("sum_squares")
def check_sum_squares(seed: int = 0) -> float:
    x = _rng(seed, 1).standard_normal((3, 4))
    return grad_check(lambda p: ad.sum(ad.square(p["x"])), {"x": x})


@register("softmax_cross_entropy")
def check_softmax_ce(seed: int = 0) -> float:
    rng = _rng(seed, 2)
    logits = rng.standard_normal((4, 5))
    target = np.eye(5)[rng.integers(0, 5, 4)]
    return grad_check(lambda p: -ad.sum(ad.mul(target, ad.log(ad.softmax(p["z"], axis=-1)))), {"z": logits})


@register("router_mlp")
def check_router(seed: int = 0) -> float:
    rng = _rng(seed, 3)
    n, M, hidden = 3, 3, 5
    params = {"w1": rng.standard_normal((hidden, n)), "b1": 0.1 * rng.standard_normal(hidden),
              "w2": rng.standard_normal((M, hidden)), "b2": 0.1 * rng.standard_normal(M)}
    e = rng.dirichlet(np.ones(n), size=4)
    target = rng.standard_normal((4, M))

    def fn(p):
        alpha = route_soft(RouterParams(p["w1"], p["b1"], p["w2"], p["b2"], 0.7), e)
        return ad.sum(ad.mul(target, alpha))

    return grad_check(fn, params)


@register("expert_factors")
def check_experts(seed: int = 0) -> float:
    rng = _rng(seed, 4)
    bank = init_expert_bank(2, 2, 1.0, {1: (6, 3)}, seed=seed)
    params = {k: rng.standard_normal(np.shape(v)) for k, v in bank.parameters().items()}
    patches = rng.standard_normal((2, 6, 5))
    weights = rng.dirichlet(np.ones(2), size=2)
    target = rng.standard_normal((2, 3, 5))

    def fn(p):
        c = blended_correction(bank.with_parameters(p), p.get("alpha", weights), 1, patches)
        return ad.sum(ad.mul(target, c))

    return grad_check(fn, {**params, "alpha": weights})


@register("fecl")
def check_fecl(seed: int = 0) -> float:
    rng = _rng(seed, 5)
    bank = build_filter_bank(3, 8, 8)
    z_base = rng.standard_normal((2, 1, 8, 8))
    z_true = rng.standard_normal((2, 1, 8, 8))
    z_lora = z_base + 0.3 * rng.standard_normal((2, 1, 8, 8))
    w = rng.dirichlet(np.ones(3), size=2)
    return grad_check(lambda p: fecl_batch(p["z_lora"], z_base, z_true, bank, w)[0], {"z_lora": z_lora})


def _tiny_base(seed: int, hidden: int = 4, emb_dim: int = 8) -> dict[str, np.ndarray]:
    base = _f64(init_denoiser(1, hidden, emb_dim, seed=seed))
    rng = _rng(seed, 6)
    # non-zero biases so every path carries gradient
    return {k: v + 0.05 * rng.standard_normal(v.shape) if k.endswith(".b") else v for k, v in base.items()}


@register("denoiser")
def check_denoiser(seed: int = 0) -> float:
    rng = _rng(seed, 7)
    base = _tiny_base(seed)
    x_t = rng.standard_normal((2, 1, 8, 8))
    t = np.array([50, 700])
    target = rng.standard_normal((2, 1, 8, 8))
    return grad_check(lambda p: ad.sum(ad.mul(target, denoise(p, x_t, t))), base)


@register("total_loss")
def check_total_loss(seed: int = 0) -> float:
    rng = _rng(seed, 8)
    hidden = 4
    base = _tiny_base(seed, hidden)
    config = TrainConfig(stage="adapt", lambda_f=0.1, M=2, rank=2, layers=(1,), T=100, batch=2,
                         hidden=hidden, emb_dim=8, router_hidden=4)
    feats = layer_features(1, hidden)
    bank = init_expert_bank(config.M, config.rank, 1.0, {1: feats[1]}, seed=seed)
    bank = bank.with_parameters({k: 0.1 * rng.standard_normal(np.shape(v)) for k, v in bank.parameters().items()})
    router = RouterParams(rng.standard_normal((4, 3)), 0.1 * rng.standard_normal(4),
                          rng.standard_normal((2, 4)), 0.1 * rng.standard_normal(2), config.tau)
    policy = RoutingPolicy("fei_soft", bank, build_filter_bank(3, 8, 8), router)
    model = Model(base, policy)
    schedule = make_schedule("linear", config.T)
    batch = Batch(rng.standard_normal((2, 1, 8, 8)), np.array([10, 60]), rng.standard_normal((2, 1, 8, 8)))
    params = _f64(policy.parameters())

    return grad_check(lambda p: total_loss(model.bind(p), batch, schedule, config)[0], params)


@dataclass
class CheckResult:
    name: str
    error: float
    passed: bool
    message: str = ""


def run_all(seed: int = 0, tolerance: float = TOLERANCE, only=None) -> list[CheckResult]:
    results = []
    for name, fn in _CHECKS.items():
        if only and name not in only:
            continue
        try:
            err = float(fn(seed))
            results.append(CheckResult(name, err, err < tolerance))
        except Exception as exc:  # a crashing check is a failing check
            results.append(CheckResult(name, float("nan"), False, f"{type(exc).__name__}: {exc}"))
    return results
