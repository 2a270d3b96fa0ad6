"""Low-rank adapter experts for the denoiser's conv layers.

Each expert holds, per attached layer, a down factor ``D`` (rank x in) and an
up factor ``U`` (out x rank) acting on the layer's flattened (im2col) input,
so its correction is ``scale / rank * U @ (D @ patches)``, a low-rank conv.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, replace
from typing import Mapping

import numpy as np

from . import autodiff as ad
from .numerics import DTYPE, ShapeError, rng_for

INIT_STD = 0.02
_NAME = re.compile(r"^expert(\d+)/layer(\d+)/(down|up)$")


@dataclass(frozen=True)
class LoraExpert:
    down: Mapping[int, object]
    up: Mapping[int, object]
    rank: int
    scale: float = 1.0


@dataclass(frozen=True)
class ExpertBank:
    experts: tuple[LoraExpert, ...]
    attachment: tuple[int, ...]

    @property
    def M(self) -> int:
        return len(self.experts)

    @property
    def rank(self) -> int:
        return self.experts[0].rank

    @property
    def scale(self) -> float:
        return self.experts[0].scale

    def parameters(self) -> dict[str, object]:
        out = {}
        for m, e in enumerate(self.experts):
            for layer in self.attachment:
                out[f"expert{m}/layer{layer}/down"] = e.down[layer]
                out[f"expert{m}/layer{layer}/up"] = e.up[layer]
        return out

    def with_parameters(self, params: Mapping[str, object]) -> "ExpertBank":
        """Copy of the bank with factors replaced by entries of ``params``."""
        experts = []
        for m, e in enumerate(self.experts):
            down = {l: params.get(f"expert{m}/layer{l}/down", e.down[l]) for l in self.attachment}
            up = {l: params.get(f"expert{m}/layer{l}/up", e.up[l]) for l in self.attachment}
            experts.append(replace(e, down=down, up=up))
        return replace(self, experts=tuple(experts))

    def parameter_count(self) -> int:
        return int(sum(np.size(ad.value(v)) for v in self.parameters().values()))


def init_expert_bank(M: int, rank: int, scale: float, attachment: Mapping[int, tuple[int, int]],
                     seed: int = 0) -> ExpertBank:
    """Fresh bank: Gaussian down factors, zero up factors (output-neutral).

    ``attachment`` maps layer id -> (in_features, out_features).
    """
    if M < 1:
        raise ValueError(f"need at least one expert, got M={M}")
    if not attachment:
        raise ValueError("attachment list is empty")
    for layer, (fin, fout) in attachment.items():
        if not 1 <= rank <= min(fin, fout):
            raise ValueError(f"rank {rank} invalid for layer {layer} ({fin} -> {fout})")
    experts = []
    for m in range(M):
        down, up = {}, {}
        for layer, (fin, fout) in sorted(attachment.items()):
            rng = rng_for(seed, 0xAD, m, layer)
            down[layer] = (INIT_STD * rng.standard_normal((rank, fin))).astype(DTYPE)
            up[layer] = np.zeros((fout, rank), dtype=DTYPE)
        experts.append(LoraExpert(down, up, rank, float(scale)))
    return ExpertBank(tuple(experts), tuple(sorted(attachment)))


def bank_from_parameters(params: Mapping[str, np.ndarray], scale: float = 1.0) -> ExpertBank:
    """Rebuild a bank from ``expert{m}/layer{id}/{down|up}`` entries."""
    found: dict[int, dict[int, dict[str, np.ndarray]]] = {}
    for name, arr in params.items():
        match = _NAME.match(name)
        if match:
            m, layer, kind = int(match[1]), int(match[2]), match[3]
            found.setdefault(m, {}).setdefault(layer, {})[kind] = arr
    if not found:
        raise KeyError("no expert factors found")
    layers = tuple(sorted(found[0]))
    experts = []
    for m in sorted(found):
        f = found[m]
        rank = f[layers[0]]["down"].shape[0]
        experts.append(LoraExpert({l: f[l]["down"] for l in layers}, {l: f[l]["up"] for l in layers}, rank, scale))
    return ExpertBank(tuple(experts), layers)


def expert_correction(e: LoraExpert, layer_id: int, layer_input):
    """``scale/rank * U @ (D @ input)`` for a feature vector or (..., in, N) patches."""
    try:
        down, up = e.down[layer_id], e.up[layer_id]
    except KeyError:
        raise KeyError(f"expert not attached to layer {layer_id}") from None
    dtype = ad.value(down).dtype
    return ad.mul(dtype.type(e.scale / e.rank), ad.matmul(up, ad.matmul(down, layer_input)))


def blended_correction(bank: ExpertBank, weights, layer_id: int, layer_input):
    """Routing-weighted sum of expert corrections.

    ``weights`` has shape (M,) or, for batched patches (B, in, N), (B, M).
    """
    wshape = ad._shape(weights)
    if wshape[-1] != bank.M:
        raise ShapeError(f"{wshape[-1]} routing weights for {bank.M} experts")
    total = None
    for m, e in enumerate(bank.experts):
        c = expert_correction(e, layer_id, layer_input)
        wm = ad.getitem(weights, (..., m))
        extra = len(ad._shape(c)) - len(ad._shape(wm))
        if ad._shape(wm):
            wm = ad.reshape(wm, ad._shape(wm) + (1,) * extra)
        term = ad.mul(wm, c)
        total = term if total is None else total + term
    return total


def merged_weight(weight: np.ndarray, bank: ExpertBank, weights: np.ndarray, layer_id: int) -> np.ndarray:
    """Host weight with a frozen blend of experts folded in."""
    out = np.array(weight, dtype=np.float64)
    for a, e in zip(np.asarray(weights, dtype=np.float64), bank.experts):
        out += a * e.scale / e.rank * (np.asarray(e.up[layer_id], np.float64) @ np.asarray(e.down[layer_id], np.float64))
    return out


@dataclass
class AdapterContext:
    bank: ExpertBank
    weights: object  # (M,) or (B, M); array or tape variable
