"""Multi-seed comparison sweeps: ablations, popularity baseline and collision trends."""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass

import numpy as np
import torch

from .config import Config
from .data import nested_item_subsets, synth_dataset
from .mf import popularity_recommend
from .pipeline import fit_assignment, generative_report, run_pipeline
from .rec_id import collision_stats
from .rq_vae import RQVAE

log = logging.getLogger(__name__)

SWEEPS = {
    "pos": [("relation", {"pos_encoding": "relation"}), ("sinusoid", {"pos_encoding": "sinusoid"}),
            ("none", {"pos_encoding": "none"})],
    "token": [("popularity", {"token_variant": "popularity"}), ("random", {"token_variant": "random"})],
    "length": [(f"M={m}", {"id_length": m}) for m in (2, 3, 4, 5)],
    "codebook": [(f"L={size}", {"codebook_size": size}) for size in (64, 128, 256, 512)],
}
# variants that leave the first stage untouched reuse its codes
_SHARES_ASSIGNMENT = {"pos", "token"}


@dataclass
class SweepRow:
    sweep: str
    variant: str
    seed: int
    recall: float
    ndcg: float
    popularity_recall: float
    collision_rate: float
    seconds: float


def synth_for(cfg: Config):
    return synth_dataset(cfg.synth_users, cfg.synth_items, cfg.synth_density, cfg.dims(), cfg.seed,
                         cfg.synth_rank, cfg.synth_noise)


def run_sweep(cfg: Config, sweep: str, seeds=(0, 1, 2)) -> list[SweepRow]:
    """Train every variant of ``sweep`` on each seed's synthetic dataset and report held-out metrics."""
    if sweep not in SWEEPS:
        raise ValueError(f"unknown sweep {sweep!r}; choose from {sorted(SWEEPS)}")
    rows = []
    for seed in seeds:
        base = cfg.replace(seed=seed)
        dataset, bank = synth_for(base)
        pop = popularity_recommend(dataset, base.k).recall
        shared = fit_assignment(base, dataset, bank) if sweep in _SHARES_ASSIGNMENT else None
        for name, overrides in SWEEPS[sweep]:
            c = base.replace(**overrides)
            t0 = time.perf_counter()
            run = run_pipeline(c, dataset, bank, shared)
            rep = generative_report(c, run.model, run.ctx, run.registry, dataset)
            rows.append(SweepRow(sweep, name, seed, rep.recall, rep.ndcg, pop,
                                 run.registry.collisions().collision_rate, time.perf_counter() - t0))
            log.info("sweep %s seed %d %s recall %.4f", sweep, seed, name, rep.recall)
    return rows


def majority(rows: list[SweepRow], better: str, worse: str) -> tuple[int, int]:
    """(seeds where ``better`` >= ``worse``, seeds compared)."""
    by = {(r.seed, r.variant): r.recall for r in rows}
    seeds = sorted({r.seed for r in rows})
    wins = sum(by[(s, better)] >= by[(s, worse)] for s in seeds)
    return wins, len(seeds)


def sweep_table(rows: list[SweepRow]) -> str:
    lines = ["sweep\tvariant\tseed\trecall\tndcg\tpopularity_recall\tcollision_rate\tseconds"]
    lines += [f"{r.sweep}\t{r.variant}\t{r.seed}\t{r.recall:.6f}\t{r.ndcg:.6f}\t{r.popularity_recall:.6f}\t"
              f"{r.collision_rate:.6f}\t{r.seconds:.1f}" for r in rows]
    return "\n".join(lines) + "\n"


def sweep_summary(rows: list[SweepRow]) -> str:
    out = []
    for sweep in dict.fromkeys(r.sweep for r in rows):
        sel = [r for r in rows if r.sweep == sweep]
        out.append(f"[{sweep}]")
        for variant in dict.fromkeys(r.variant for r in sel):
            vals = np.array([r.recall for r in sel if r.variant == variant])
            out.append(f"  {variant:<12} recall@k mean {vals.mean():.4f} over {len(vals)} seed(s): "
                       + " ".join(f"{v:.4f}" for v in vals))
        out.append(f"  popularity   recall@k mean {np.mean([r.popularity_recall for r in sel]):.4f}")
    return "\n".join(out) + "\n"


@torch.no_grad()
def collision_trend(quantizer: RQVAE, item_reps: np.ndarray, fractions=(1 / 16, 1 / 8, 1 / 4, 1 / 2, 1), seed: int = 0):
    """Pre-token collision rate of a fixed quantizer's codes over nested item subsets."""
    codes = quantizer.codes_for(torch.as_tensor(np.asarray(item_reps), dtype=quantizer.codebooks.dtype))
    subsets = nested_item_subsets(len(codes), list(fractions), seed)
    return [(f, len(s), collision_stats(codes[s]).collision_rate) for f, s in zip(fractions, subsets)]
