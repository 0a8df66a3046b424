"""Constrained beam search over the Rec-ID prefix trie, and exact sequence scoring."""
from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch
from torch import Tensor

from .rec_id import BOS, RecIdRegistry
from .recommender import RecContext, Seq2SeqRecommender


@dataclass
class Beam:
    tokens: tuple[int, ...]
    log_prob: float
    alive: bool = True


@dataclass
class BeamResult:
    items: list[int]
    scores: list[float]
    tokens: list[tuple[int, ...]]
    exhausted: bool = False  # fewer than K reachable items
    trace: list[list[Beam]] = field(default_factory=list)


def _excluded_counts(registry: RecIdRegistry, exclusions: Sequence[int]) -> Counter:
    counts: Counter = Counter()
    for item in set(int(x) for x in exclusions):
        toks = registry.item_tokens(item)
        for d in range(1, len(toks) + 1):
            counts[toks[:d]] += 1
    return counts


@torch.no_grad()
def encode_user(model: Seq2SeqRecommender, ctx: RecContext, user: int, history=None, rng=None):
    hist = ctx.train_items[user] if history is None else np.asarray(history, dtype=np.int64)
    e, mask, h_u = ctx.batch([user], [hist], rng)
    return model.encode(e, mask, h_u), mask


@torch.no_grad()
def beam_search(
    model: Seq2SeqRecommender,
    memory: Tensor,
    mask: Tensor,
    registry: RecIdRegistry,
    k: int,
    exclusions: Sequence[int] = (),
    beam_width: int | None = None,
    keep_trace: bool = False,
) -> BeamResult:
    """Decode ``id_length`` tokens keeping the top beams over trie-valid continuations.

    Excluded items are removed from the trie for this search (a prefix stays
    valid while it still leads to a non-excluded item), so every finished beam
    is a recommendable item. Ties go to the lexicographically smaller token
    sequence.
    """
    if k < 1:
        raise ValueError("K must be >= 1")
    width = max(k, beam_width or k)
    excl = _excluded_counts(registry, exclusions)
    beams = [Beam((), 0.0)]
    trace = []
    for _ in range(registry.vocab.id_length):
        prefix = torch.tensor([(BOS,) + b.tokens for b in beams], dtype=torch.long)
        logits = model.decode(memory.expand(len(beams), -1, -1), mask.expand(len(beams), -1), prefix)[:, -1]
        logp = torch.log_softmax(logits.double(), -1).numpy()
        parents, toks, scores = [], [], []
        for bi, beam in enumerate(beams):
            kids = registry.valid_next_tokens(beam.tokens)
            if excl:
                kids = np.array(
                    [c for c in kids.tolist() if registry.count_under(beam.tokens + (c,)) > excl.get(beam.tokens + (c,), 0)],
                    dtype=np.int64,
                )
            if len(kids) == 0:
                continue
            parents.append(np.full(len(kids), bi))
            toks.append(kids)
            scores.append(beam.log_prob + logp[bi, kids])
        if not parents:
            beams = []
            break
        parents, toks, scores = np.concatenate(parents), np.concatenate(toks), np.concatenate(scores)
        # beams are kept lexicographically sorted, so parent index orders prefixes
        order = np.lexsort((toks, parents, -scores))[:width]
        order = order[np.lexsort((toks[order], parents[order]))]  # restore lexicographic beam order
        beams = [Beam(beams[parents[o]].tokens + (int(toks[o]),), float(scores[o])) for o in order]
        if keep_trace:
            trace.append(list(beams))
    ranked = sorted(beams, key=lambda b: (-b.log_prob, b.tokens))[:k]
    items = [registry.item_for_tokens(b.tokens) for b in ranked]
    return BeamResult(items, [b.log_prob for b in ranked], [b.tokens for b in ranked], len(items) < k, trace)


@torch.no_grad()
def score_items(model: Seq2SeqRecommender, memory: Tensor, mask: Tensor, registry: RecIdRegistry, items=None) -> np.ndarray:
    """Teacher-forced sum of token log-probabilities for each item's Rec-ID."""
    items = np.arange(registry.n_items) if items is None else np.asarray(items, dtype=np.int64)
    target = torch.as_tensor(registry.tokens[items])
    n = len(items)
    prefix = torch.cat([torch.full((n, 1), BOS, dtype=torch.long), target[:, :-1]], 1)
    logits = model.decode(memory.expand(n, -1, -1), mask.expand(n, -1), prefix)
    logp = torch.log_softmax(logits.double(), -1)
    return logp.gather(-1, target[..., None]).squeeze(-1).sum(-1).numpy()


def score_item(model, memory, mask, registry: RecIdRegistry, rec_id: Sequence[int]) -> float:
    item = registry.item_for_rec_id(rec_id)
    return float(score_items(model, memory, mask, registry, [item])[0])


def exhaustive_ranking(model, memory, mask, registry: RecIdRegistry, k: int, exclusions: Sequence[int] = ()) -> list[int]:
    """All items ranked by full-sequence score (ties by token order); the beam-search oracle."""
    scores = score_items(model, memory, mask, registry)
    excl = set(int(x) for x in exclusions)
    keyed = sorted(
        (i for i in range(registry.n_items) if i not in excl),
        key=lambda i: (-scores[i], registry.item_tokens(i)),
    )
    return keyed[:k]


def recommend_users(
    model: Seq2SeqRecommender,
    ctx: RecContext,
    registry: RecIdRegistry,
    users,
    k: int = 10,
    exclude_train: bool = True,
    beam_width: int | None = None,
) -> dict[int, BeamResult]:
    out = {}
    for u in users:
        u = int(u)
        if len(ctx.train_items[u]) == 0:
            continue
        memory, mask = encode_user(model, ctx, u, rng=np.random.default_rng(u))
        excl = ctx.train_items[u] if exclude_train else ()
        out[u] = beam_search(model, memory, mask, registry, k, excl, beam_width)
    return out
