"""Per-user inference cost of inner-product retrieval versus constrained generation as the catalog grows."""
from __future__ import annotations

import csv
import gc
import io
import logging
import statistics
import time
from dataclasses import dataclass, field

import numpy as np
import torch
from threadpoolctl import threadpool_limits

from .generation import beam_search
from .metrics import top_k_scores
from .rec_id import RecIdRegistry, Vocab
from .recommender import RecContext, Seq2SeqRecommender

log = logging.getLogger(__name__)

MODELS = ("mf", "generative")


@dataclass
class BenchRow:
    model: str
    n_items: int
    per_user_ms: float  # median over repetitions
    runs_ms: list[float] = field(default_factory=list)

    @property
    def std_ms(self) -> float:
        return statistics.pstdev(self.runs_ms) if self.runs_ms else 0.0


@dataclass
class BenchReport:
    rows: list[BenchRow] = field(default_factory=list)
    settings: dict = field(default_factory=dict)

    def series(self, model: str) -> list[BenchRow]:
        return sorted((r for r in self.rows if r.model == model), key=lambda r: r.n_items)

    def growth(self, model: str) -> float:
        """Per-user time at the largest catalog over the smallest."""
        s = self.series(model)
        return s[-1].per_user_ms / s[0].per_user_ms if len(s) > 1 else 1.0

    def spread(self, model: str) -> float:
        """Max over min per-user time across the sweep."""
        t = [r.per_user_ms for r in self.series(model)]
        return max(t) / min(t) if t else 1.0

    def crossover(self) -> int | None:
        """Smallest catalog size at which generation is faster than MF."""
        mf = {r.n_items: r.per_user_ms for r in self.series("mf")}
        for r in self.series("generative"):
            if r.n_items in mf and r.per_user_ms < mf[r.n_items]:
                return r.n_items
        return None

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["model", "n_items", "per_user_ms", "std_ms", "runs_ms"])
        for r in self.rows:
            w.writerow([r.model, r.n_items, f"{r.per_user_ms:.4f}", f"{r.std_ms:.4f}", " ".join(f"{x:.4f}" for x in r.runs_ms)])
        return buf.getvalue()

    def to_text(self) -> str:
        lines = [f"{'model':<12}{'items':>10}{'ms/user':>12}{'std':>10}"]
        lines += [f"{r.model:<12}{r.n_items:>10}{r.per_user_ms:>12.3f}{r.std_ms:>10.3f}" for r in self.rows]
        for m in sorted({r.model for r in self.rows}):
            lines.append(f"{m} growth (largest/smallest): {self.growth(m):.2f}x, spread: {self.spread(m):.2f}x")
        if {"mf", "generative"} <= {r.model for r in self.rows}:
            c = self.crossover()
            lines.append(f"crossover: {'none in sweep' if c is None else f'{c} items'}")
        return "\n".join(lines)


def random_registry(n_items: int, levels: int, codebook_size: int, rng: np.random.Generator) -> RecIdRegistry:
    """Distinct uniformly drawn semantic tuples, last token 1 (no collisions)."""
    capacity = codebook_size**levels
    if n_items > capacity:
        raise ValueError(f"{n_items} items exceed tuple capacity {capacity}")
    flat = rng.choice(capacity, n_items, replace=False)
    codes = np.stack([(flat // codebook_size**m) % codebook_size for m in reversed(range(levels))], 1)
    rec_ids = np.concatenate([codes, np.ones((n_items, 1), dtype=np.int64)], 1)
    return RecIdRegistry(rec_ids, Vocab(levels, codebook_size, 1))


def _median_per_user(fn, users: np.ndarray, repetitions: int) -> tuple[float, list[float]]:
    fn(users[0])  # warm-up
    runs = []
    # as timeit does: keep the cyclic collector (which would walk the whole trie) out of the timings
    gc.collect()
    gc.disable()
    try:
        for _ in range(repetitions):
            t0 = time.perf_counter()
            for u in users:
                fn(u)
            runs.append((time.perf_counter() - t0) * 1e3 / len(users))
    finally:
        gc.enable()
    return statistics.median(runs), runs


def bench_inference(
    base_items: int = 2**20,
    scales=(1 / 16, 1 / 8, 1 / 4, 1 / 2, 1),
    repetitions: int = 5,
    users: int = 20,
    dim: int = 64,
    k: int = 10,
    beam_width: int = 10,
    levels: int = 3,
    codebook_size: int = 128,
    layers: int = 2,
    heads: int = 4,
    history: int = 20,
    models=MODELS,
    seed: int = 0,
) -> BenchReport:
    """Time per-user top-K retrieval at catalog sizes ``base_items * s``.

    MF scores all I items with one inner product each, then selects the top K.
    Generation encodes the user's history and runs trie-constrained beam search;
    its cost does not depend on I. Weights are random: only cost is measured.
    Single-threaded BLAS and torch so the comparison runs on fixed hardware.
    """
    unknown = set(models) - set(MODELS)
    if unknown:
        raise ValueError(f"unknown model(s) {sorted(unknown)}")
    report = BenchReport(settings=dict(base_items=base_items, scales=list(scales), repetitions=repetitions, users=users,
                                       dim=dim, k=k, beam_width=beam_width, levels=levels, codebook_size=codebook_size))
    if repetitions <= 0:
        return report
    prev_threads = torch.get_num_threads()
    torch.set_num_threads(1)
    try:
        with threadpool_limits(limits=1):
            for s in scales:
                n = int(base_items * s)
                rng = np.random.default_rng(seed)
                user_ids = np.arange(users)
                if "mf" in models:
                    item_f = rng.standard_normal((n, dim), dtype=np.float32)
                    user_f = rng.standard_normal((users, dim), dtype=np.float32)
                    med, runs = _median_per_user(lambda u: top_k_scores(item_f @ user_f[u], k), user_ids, repetitions)
                    report.rows.append(BenchRow("mf", n, med, runs))
                    del item_f
                if "generative" in models:
                    report.rows.append(_bench_generative(n, rng, user_ids, repetitions, dim, k, beam_width,
                                                         levels, codebook_size, layers, heads, history, seed))
                log.info("bench %d items done", n)
    finally:
        torch.set_num_threads(prev_threads)
    return report


def _bench_generative(n, rng, user_ids, repetitions, dim, k, beam_width, levels, codebook_size, layers, heads, history, seed):
    registry = random_registry(n, levels, codebook_size, rng)
    model = Seq2SeqRecommender(registry.vocab.size, levels + 1, dim, heads, layers, max_len=history, seed=seed).eval()
    hist = [rng.choice(n, history, replace=False) for _ in user_ids]
    ctx = RecContext.build(rng.standard_normal((n, dim), dtype=np.float32),
                           rng.standard_normal((len(user_ids), dim), dtype=np.float32), hist, history)

    @torch.no_grad()
    def run(u):
        e, mask, h_u = ctx.batch([u], [hist[u]])
        beam_search(model, model.encode(e, mask, h_u), mask, registry, k, beam_width=beam_width)

    med, runs = _median_per_user(run, user_ids, repetitions)
    return BenchRow("generative", n, med, runs)
