"""Desk-scale experiments: datasets, base pretraining, adaptation studies and ablation grids."""

from __future__ import annotations

import itertools
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import RunConfig
from .datagen import SyntheticSpec, generate_many
from .io import load_checkpoint
from .objective import TrainConfig, train
from .spectrum import build_filter_bank

log = logging.getLogger(__name__)

# disjoint seed ranges for the four synthetic splits
SPLIT_OFFSETS = {"pretrain_train": 0, "pretrain_val": 1_000_000, "style_train": 2_000_000, "style_val": 3_000_000}
DATA_BANDS = 3

# routing ablation grid: mode -> (FEI input, soft router)
ROUTING_GRID = {
    "fei_soft": (True, True),
    "fei_hard": (True, False),
    "timestep_soft": (False, True),
    "timestep_hard": (False, False),
}
GRID_HEADER = ["n_bands", "M", "lambda_f", "routing", "seed", "adapter_params", "val_initial", "val_final"]


@dataclass
class Datasets:
    pretrain_train: np.ndarray
    pretrain_val: np.ndarray
    style_train: np.ndarray
    style_val: np.ndarray


def make_datasets(cfg: RunConfig) -> Datasets:
    """Power-law fields for pretraining and band-boosted fields for adaptation.

    The boosted band indexes a fixed 3-band default bank so the data do not
    change when a sweep varies the model's own bank.
    """
    d = cfg.section("data")
    size, n_tr, n_va = d["size"], d["n_train"], d["n_val"]
    plain = SyntheticSpec("powerlaw", d["gamma"], size=size, channels=d["channels"])
    style = SyntheticSpec("band_boost", d["gamma"], d["style_band"], d["style_factor"], size, d["channels"])
    bank = build_filter_bank(DATA_BANDS, size, size)
    split = {k: range(off, off + (n_tr if k.endswith("train") else n_va)) for k, off in SPLIT_OFFSETS.items()}
    return Datasets(
        generate_many(plain, split["pretrain_train"]),
        generate_many(plain, split["pretrain_val"]),
        generate_many(style, split["style_train"], bank),
        generate_many(style, split["style_val"], bank),
    )


def pretrain_base(cfg: RunConfig, data: Datasets, out=None, csv_path=None):
    """Base denoiser weights; loaded from ``pretrain.checkpoint`` when set."""
    ckpt = cfg["pretrain.checkpoint"]
    if ckpt:
        state = load_checkpoint(ckpt)
        return {k: v for k, v in state.items() if k.startswith(("conv", "temb"))}, None
    model, report = train(cfg.train_config("pretrain"), data.pretrain_train, data.pretrain_val,
                          out=out, csv_path=csv_path)
    log.info("pretrain val %.5f -> %.5f", report.val_initial, report.val_final)
    return model.base, report


def worker_count() -> int:
    env = os.environ.get("FERA_THREADS", "").strip()
    if env:
        n = int(env)
        if n < 1:
            raise ValueError(f"FERA_THREADS must be >= 1, got {env!r}")
        return n
    return os.cpu_count() or 1


def _adapt_one(job) -> dict:
    config, base, data, label = job
    model, report = train(config, data.style_train, data.style_val, base=base)
    return {
        "label": label,
        "n_bands": config.n_bands,
        "M": config.M,
        "lambda_f": config.lambda_f,
        "routing": config.routing,
        "seed": config.seed,
        "adapter_params": sum(int(np.size(v)) for v in model.adapter_parameters().values()),
        "val_initial": report.val_initial,
        "val_final": report.val_final,
    }


def run_jobs(jobs, threads: int | None = None) -> list[dict]:
    """Run adaptation jobs, in a process pool when more than one worker is allowed.

    Results come back in job order whatever the completion order.
    """
    threads = worker_count() if threads is None else threads
    if threads <= 1 or len(jobs) <= 1:
        return [_adapt_one(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=min(threads, len(jobs))) as pool:
        return list(pool.map(_adapt_one, jobs))


def grid_cells(cfg: RunConfig) -> list[dict]:
    """Cross product of the [ablate] lists, ordered by config key."""
    a = cfg.section("ablate")
    for r in a["routing"]:
        if r not in ROUTING_GRID and r != "none":
            raise ValueError(f"unknown routing {r!r} in ablate.routing")
    cells = [dict(n_bands=n, M=m, lambda_f=lf, routing=r, seed=s)
             for n, m, lf, r, s in itertools.product(a["bands"], a["experts"], a["lambda_f"], a["routing"], a["seeds"])]
    return sorted(cells, key=cell_key)


def cell_key(cell: dict) -> tuple:
    return (cell["n_bands"], cell["M"], cell["lambda_f"], cell["routing"], cell["seed"])


def run_grid(cfg: RunConfig, base, data: Datasets, cells, threads: int | None = None) -> list[dict]:
    jobs = [(cfg.train_config("adapt", **cell), base, data, "grid") for cell in cells]
    rows = run_jobs(jobs, threads)
    return sorted(rows, key=cell_key)


def grid_means(rows) -> dict[str, float]:
    """Mean final validation loss per routing mode."""
    out = {}
    for mode in ROUTING_GRID:
        vals = [r["val_final"] for r in rows if r["routing"] == mode]
        if vals:
            out[mode] = float(np.mean(vals))
    return out


def grid_ordering_holds(means: dict[str, float]) -> bool:
    """(FEI on, soft on) <= each single-module variant <= (both off)."""
    full, none = means["fei_soft"], means["timestep_hard"]
    singles = [means["fei_hard"], means["timestep_soft"]]
    return all(full <= s <= none for s in singles)


STUDY_VARIANTS = ("fera", "lora", "fei_hard", "timestep_soft", "timestep_hard")


def study_configs(cfg: RunConfig, seed: int) -> dict[str, TrainConfig]:
    """FeRA, an equal-parameter single LoRA, and the three routing ablations."""
    fera = cfg.train_config("adapt", seed=seed)
    return {
        "fera": fera,
        "lora": cfg.train_config("adapt", seed=seed, M=1, rank=fera.M * fera.rank, routing="none", lambda_f=0.0),
        "fei_hard": cfg.train_config("adapt", seed=seed, routing="fei_hard"),
        "timestep_soft": cfg.train_config("adapt", seed=seed, routing="timestep_soft"),
        "timestep_hard": cfg.train_config("adapt", seed=seed, routing="timestep_hard"),
    }


def adaptation_study(cfg: RunConfig, base, data: Datasets, seeds=(0, 1, 2), threads: int | None = None) -> list[dict]:
    jobs = [(c, base, data, name) for s in seeds for name, c in study_configs(cfg, s).items()]
    return run_jobs(jobs, threads)


def summarize_study(rows) -> dict:
    by = {(r["label"], r["seed"]): r["val_final"] for r in rows}
    seeds = sorted({r["seed"] for r in rows})
    wins = sum(by[("fera", s)] <= by[("lora", s)] for s in seeds)
    means = {name: float(np.mean([by[(name, s)] for s in seeds])) for name in STUDY_VARIANTS}
    grid = {"fei_soft": means["fera"], "fei_hard": means["fei_hard"],
            "timestep_soft": means["timestep_soft"], "timestep_hard": means["timestep_hard"]}
    return {"seeds": seeds, "fera_wins": wins, "means": means, "grid_holds": grid_ordering_holds(grid)}


def ensure_dir(path) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    return path
