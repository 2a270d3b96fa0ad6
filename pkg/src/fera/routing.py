"""Expert routing: the soft FEI router, discrete threshold routing and timestep variants."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .adapters import AdapterContext, ExpertBank
from .numerics import DTYPE, rng_for
from .spectrum import FilterBank, band_energies, EPS_ENERGY

log = logging.getLogger(__name__)

TAU = 0.7
ROUTER_HIDDEN = 16
MODES = ("fei_soft", "fei_hard", "timestep_soft", "timestep_hard", "none")
SIMPLEX_TOL = 1e-6


@dataclass(frozen=True)
class RouterParams:
    w1: object  # (hidden, n_bands)
    b1: object
    w2: object  # (M, hidden)
    b2: object
    tau: float = TAU

    def __post_init__(self):
        if not self.tau > 0:
            raise ValueError(f"tau must be positive, got {self.tau}")

    @property
    def n_inputs(self) -> int:
        return ad._shape(self.w1)[1]

    @property
    def n_experts(self) -> int:
        return ad._shape(self.w2)[0]

    def parameters(self) -> dict[str, object]:
        return {"router/w1": self.w1, "router/b1": self.b1, "router/w2": self.w2, "router/b2": self.b2}

    def with_parameters(self, params: Mapping[str, object]) -> "RouterParams":
        return replace(self, **{k: params.get(f"router/{k}", getattr(self, k)) for k in ("w1", "b1", "w2", "b2")})


def init_router(n_bands: int, M: int, hidden: int = ROUTER_HIDDEN, tau: float = TAU, seed: int = 0,
                zero: bool = False) -> RouterParams:
    rng = rng_for(seed, 0x40)
    if zero:
        w1 = np.zeros((hidden, n_bands), dtype=DTYPE)
        w2 = np.zeros((M, hidden), dtype=DTYPE)
    else:
        w1 = (rng.standard_normal((hidden, n_bands)) / np.sqrt(n_bands)).astype(DTYPE)
        w2 = (rng.standard_normal((M, hidden)) / np.sqrt(hidden)).astype(DTYPE)
    return RouterParams(w1, np.zeros(hidden, DTYPE), w2, np.zeros(M, DTYPE), tau)


def router_logits(params: RouterParams, e):
    """Two-layer perceptron g(e); ``e`` is (n,) or (B, n)."""
    h = ad.silu(ad.matmul(e, ad.transpose(params.w1)) + params.b1)
    logits = ad.matmul(h, ad.transpose(params.w2)) + params.b2
    if not np.all(np.isfinite(ad.value(logits))):
        raise FloatingPointError("router produced non-finite logits")
    return logits


def softmax_tau(logits, tau: float):
    dtype = ad.value(logits).dtype
    return ad.softmax(ad.div(logits, dtype.type(tau)), axis=-1)


def check_simplex(v, tol: float = SIMPLEX_TOL) -> None:
    v = np.asarray(ad.value(v))
    if np.any(v < 0) or np.any(np.abs(v.sum(axis=-1) - 1.0) > tol):
        raise ValueError("vector is not on the probability simplex")


def route_soft(params: RouterParams, e):
    """alpha = softmax(g(e) / tau)."""
    ev = np.asarray(ad.value(e))
    if ev.shape[-1] != params.n_inputs:
        raise ValueError(f"FEI has {ev.shape[-1]} bands, router expects {params.n_inputs}")
    check_simplex(ev)
    return softmax_tau(router_logits(params, e), params.tau)


def route_timestep_soft(params: RouterParams, t, T: int):
    """Soft routing keyed by t/T, repeated across the router's input width."""
    t = np.asarray(t, dtype=np.float64)
    if np.any(t < 0) or np.any(t > T):
        raise IndexError(f"step outside 0..{T}")
    dtype = ad.value(params.w1).dtype
    u = np.repeat((t / T)[..., None], params.n_inputs, axis=-1).astype(dtype)
    return softmax_tau(router_logits(params, u), params.tau)


def even_thresholds(M: int, T: int) -> tuple[int, ...]:
    """M-1 thresholds splitting 1..T into equal intervals."""
    return tuple(int(round(j * T / M)) for j in range(1, M))


def route_discrete(thresholds: Sequence[int], t: int, T: int) -> np.ndarray:
    """One-hot weights selecting the expert owning step ``t``.

    Experts are ordered by noise level: expert 0 owns the highest steps.  A
    step equal to a threshold belongs to the lower-noise interval.
    """
    th = np.asarray(thresholds, dtype=np.int64)
    if th.size and (np.any(np.diff(th) <= 0) or th[0] <= 0 or th[-1] >= T):
        raise ValueError(f"thresholds must be strictly increasing inside (0, {T}): {list(thresholds)}")
    if not 0 <= t <= T:
        raise IndexError(f"step {t} outside 0..{T}")
    out = np.zeros(th.size + 1, dtype=DTYPE)
    out[int(np.count_nonzero(th >= t))] = 1.0
    return out


def entropy(alpha) -> np.ndarray:
    a = np.asarray(ad.value(alpha), dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(a > 0, a * np.log(a), 0.0)
    return -terms.sum(axis=-1)


@dataclass
class RoutingPolicy:
    """Everything needed to turn a latent (and its step) into an adapter context."""

    mode: str
    bank: ExpertBank
    filter_bank: FilterBank
    router: RouterParams | None = None
    thresholds: tuple[int, ...] | None = None
    # shared across copies made by with_parameters()
    stats: dict = field(default_factory=lambda: {"degenerate": 0}, compare=False, repr=False)

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown routing mode {self.mode!r}; choose from {MODES}")
        if self.mode in ("fei_soft", "fei_hard", "timestep_soft") and self.router is None:
            raise ValueError(f"mode {self.mode} needs router parameters")
        if self.router is not None and self.router.n_experts != self.bank.M:
            raise ValueError("router output width differs from expert count")

    def fei(self, x_t) -> tuple[np.ndarray, np.ndarray]:
        """Batched FEI of ``x_t`` plus a mask of zero-energy rows (uniform FEI)."""
        x = np.asarray(x_t)
        if x.ndim == 3:
            x = x[None]
        energies = band_energies(x, self.filter_bank)
        total = energies.sum(axis=-1, keepdims=True)
        bad = (total <= EPS_ENERGY)[:, 0]
        e = np.where(bad[:, None], 1.0 / energies.shape[-1], energies / np.where(total > 0, total, 1.0))
        return e, bad

    def weights(self, x_t, t, T: int):
        """Routing weights (B, M); a tape variable when the router is taped."""
        x = np.asarray(x_t)
        B = 1 if x.ndim == 3 else x.shape[0]
        t_arr = np.broadcast_to(np.asarray(t), (B,))
        M = self.bank.M
        dtype = x.dtype if x.dtype.kind == "f" else DTYPE
        if self.mode == "none":
            return np.full((B, M), 1.0 / M, dtype=dtype)
        if self.mode == "timestep_hard":
            th = self.thresholds if self.thresholds is not None else even_thresholds(M, T)
            return np.stack([route_discrete(th, int(s), T) for s in t_arr]).astype(dtype)
        if self.mode == "timestep_soft":
            return route_timestep_soft(self.router, t_arr, T)

        e, bad = self.fei(x)
        if bad.any():
            self.stats["degenerate"] += int(bad.sum())
            log.warning("zero-energy latent; routing uniformly (%d so far)", self.stats["degenerate"])
        e = e.astype(ad.value(self.router.w1).dtype)
        if self.mode == "fei_hard":
            logits = np.asarray(ad.value(router_logits(self.router, e)))
            alpha = np.zeros_like(logits)
            alpha[np.arange(B), logits.argmax(axis=-1)] = 1.0
        else:
            alpha = route_soft(self.router, e)
        if bad.any():
            mask = bad[:, None].astype(ad.value(alpha).dtype)
            alpha = alpha * (1 - mask) + mask / M
        return alpha

    @property
    def degenerate_count(self) -> int:
        return self.stats["degenerate"]

    def context(self, x_t, t, T: int) -> AdapterContext:
        return AdapterContext(self.bank, self.weights(x_t, t, T))

    def with_parameters(self, params: Mapping[str, object]) -> "RoutingPolicy":
        router = self.router.with_parameters(params) if self.router is not None else None
        return replace(self, bank=self.bank.with_parameters(params), router=router)

    def parameters(self) -> dict[str, object]:
        out = dict(self.bank.parameters())
        if self.router is not None:
            out.update(self.router.parameters())
        return out


# -- traces ------------------------------------------------------------------

@dataclass
class RoutingTrace:
    t: np.ndarray
    e: np.ndarray  # (steps, n_bands)
    alpha: np.ndarray  # (steps, M)

    @property
    def header(self) -> list[str]:
        n, M = self.e.shape[1], self.alpha.shape[1]
        return ["t"] + [f"e{k + 1}" for k in range(n)] + [f"a{m + 1}" for m in range(M)]

    def rows(self):
        for i in range(len(self.t)):
            yield [int(self.t[i]), *map(float, self.e[i]), *map(float, self.alpha[i])]

    def max_adjacent_jump(self) -> float:
        return max_adjacent_jump(self.alpha)


def max_adjacent_jump(alpha: np.ndarray) -> float:
    """Largest per-expert weight change between consecutive steps."""
    alpha = np.asarray(alpha, dtype=np.float64)
    if len(alpha) < 2:
        return 0.0
    return float(np.abs(np.diff(alpha, axis=0)).max())


def switch_count(alpha: np.ndarray) -> int:
    """Number of steps where the dominant expert changes."""
    top = np.asarray(alpha).argmax(axis=-1)
    return int(np.count_nonzero(np.diff(top)))


def routing_trace(policy: RoutingPolicy, params: Mapping, schedule, steps: int = 30, seed: int = 0,
                  shape: tuple[int, int, int] = (1, 32, 32)) -> RoutingTrace:
    """Sample once and record the FEI and routing weights at each step."""
    from .diffusion import sample

    ts, es, alphas = [], [], []

    def record(i, t, x, w):
        ts.append(t)
        es.append(policy.fei(x)[0][0])
        alphas.append(np.asarray(w, dtype=np.float64)[0])

    sample(params, schedule, steps, seed, routing=policy, shape=shape, callback=record)
    return RoutingTrace(np.array(ts), np.array(es), np.array(alphas))
