"""Matrix-factorization baseline, popularity ranker, and inner-product top-K retrieval."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .data import InteractionDataset
from .graph_encoder import bpr_loss, sample_triples
from .metrics import MetricReport, evaluate, top_k_scores
from .numeric import make_generator, make_optimizer, xavier_init


def inner_product_topk(
    user_vecs: np.ndarray,
    item_vecs: np.ndarray,
    users,
    k: int,
    exclude: list[np.ndarray] | None = None,
) -> dict[int, list[int]]:
    out = {}
    for u in users:
        scores = item_vecs @ user_vecs[u]
        out[int(u)] = top_k_scores(scores, k, () if exclude is None else exclude[u]).tolist()
    return out


def eval_embeddings(user_vecs, item_vecs, dataset: InteractionDataset, which: str = "test", k: int = 10) -> MetricReport:
    truth_lists = dataset.test_items if which == "test" else dataset.valid_items
    truth = {u: t for u, t in enumerate(truth_lists) if len(t)}
    recs = inner_product_topk(np.asarray(user_vecs), np.asarray(item_vecs), truth.keys(), k, dataset.train_items)
    return evaluate(recs, truth, k)


@dataclass
class MfModel:
    user_factors: np.ndarray
    item_factors: np.ndarray

    def scores(self, user: int) -> np.ndarray:
        """Exactly I inner products."""
        return self.item_factors @ self.user_factors[user]

    def recommend(self, user: int, k: int, exclude=()) -> list[int]:
        return top_k_scores(self.scores(user), k, exclude).tolist()


def mf_train(
    dataset: InteractionDataset,
    dim: int = 64,
    epochs: int = 100,
    lr: float = 0.01,
    l2: float = 1e-5,
    batch_size: int = 1000,
    optimizer: str = "adam",
    seed: int = 0,
    patience: int = 20,
    k: int = 10,
) -> MfModel:
    """BPR-trained factors with early stopping on validation Recall@k."""
    g = make_generator(seed)
    rng = np.random.default_rng(seed)
    U = nn.Parameter(xavier_init((dataset.n_users, dim), g))
    V = nn.Parameter(xavier_init((dataset.n_items, dim), g))
    opt = make_optimizer([U, V], optimizer, lr, l2)
    best, best_state, stale = -1.0, None, 0
    for _ in range(epochs):
        triples = sample_triples(dataset, rng)
        triples = torch.as_tensor(triples[rng.permutation(len(triples))])
        for start in range(0, len(triples), batch_size):
            opt.zero_grad()
            bpr_loss(U, V, triples[start:start + batch_size], reduction="mean").backward()
            opt.step()
        score = eval_embeddings(U.detach().numpy(), V.detach().numpy(), dataset, "valid", k).recall
        if score > best:
            best, stale = score, 0
            best_state = (U.detach().clone().numpy(), V.detach().clone().numpy())
        else:
            stale += 1
            if stale >= patience:
                break
    if best_state is None:
        best_state = (U.detach().numpy(), V.detach().numpy())
    return MfModel(*best_state)


def mf_recommend(model: MfModel, dataset: InteractionDataset, k: int = 10, which: str = "test") -> MetricReport:
    return eval_embeddings(model.user_factors, model.item_factors, dataset, which, k)


def popularity_recommend(dataset: InteractionDataset, k: int = 10, which: str = "test") -> MetricReport:
    truth_lists = dataset.test_items if which == "test" else dataset.valid_items
    pop = dataset.popularity.astype(np.float64)
    truth = {u: t for u, t in enumerate(truth_lists) if len(t)}
    recs = {u: top_k_scores(pop, k, dataset.train_items[u]).tolist() for u in truth}
    return evaluate(recs, truth, k)
