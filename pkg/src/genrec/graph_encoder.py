"""Mean-aggregation graph convolution over the user-item graph, seeded from multimodal features."""
from __future__ import annotations

import numpy as np
import torch
from torch import Tensor, nn

from .data import BipartiteGraph, InteractionDataset
from .numeric import concat, leaky_relu, make_generator, xavier_init


def mean_aggregator(adj: tuple[np.ndarray, ...], n_cols: int, dtype=torch.float32) -> Tensor:
    """Sparse row-normalized matrix; rows of isolated nodes are empty."""
    rows, cols, vals = [], [], []
    for r, nbrs in enumerate(adj):
        if len(nbrs) == 0:
            continue
        rows.extend([r] * len(nbrs))
        cols.extend(nbrs.tolist())
        vals.extend([1.0 / len(nbrs)] * len(nbrs))
    idx = torch.tensor([rows, cols], dtype=torch.long).reshape(2, -1)
    return torch.sparse_coo_tensor(idx, torch.tensor(vals, dtype=dtype), (len(adj), n_cols), check_invariants=True).coalesce()


def gcn_layer(h_self: Tensor, h_nbr: Tensor, agg: Tensor, w_self: Tensor, w_nbr: Tensor) -> Tensor:
    """LeakyReLU(h_self W1 + mean_{nbrs}(h_nbr) W2); isolated nodes keep only the self term."""
    return leaky_relu(h_self @ w_self + torch.sparse.mm(agg, h_nbr @ w_nbr))


class GraphEncoder(nn.Module):
    def __init__(
        self,
        n_users: int,
        n_items: int,
        features: np.ndarray | Tensor,
        dim: int = 64,
        layers: int = 2,
        seed: int = 0,
        dtype: torch.dtype = torch.float32,
    ):
        super().__init__()
        if layers < 1:
            raise ValueError("layer count must be >= 1")
        g = make_generator(seed)
        feats = torch.as_tensor(np.asarray(features), dtype=dtype)
        if feats.shape[0] != n_items:
            raise ValueError(f"features have {feats.shape[0]} rows for {n_items} items")
        self.n_users, self.n_items, self.dim = n_users, n_items, dim
        self.register_buffer("features", feats)
        self.proj = nn.Parameter(xavier_init((feats.shape[1], dim), g, dtype))
        self.item_cf = nn.Parameter(xavier_init((n_items, dim), g, dtype))
        self.user_h0 = nn.Parameter(xavier_init((n_users, 2 * dim), g, dtype))
        self.w_self = nn.ParameterList([nn.Parameter(xavier_init((2 * dim, 2 * dim), g, dtype)) for _ in range(layers)])
        self.w_nbr = nn.ParameterList([nn.Parameter(xavier_init((2 * dim, 2 * dim), g, dtype)) for _ in range(layers)])
        self.out = nn.Parameter(xavier_init((2 * dim, dim), g, dtype))
        self._agg_iu: Tensor | None = None
        self._agg_ui: Tensor | None = None

    @property
    def layers(self) -> int:
        return len(self.w_self)

    @property
    def has_graph(self) -> bool:
        return self._agg_iu is not None

    def set_graph(self, graph: BipartiteGraph) -> "GraphEncoder":
        dtype = self.proj.dtype
        self._agg_iu = mean_aggregator(graph.item_adj, graph.n_users, dtype)
        self._agg_ui = mean_aggregator(graph.user_adj, graph.n_items, dtype)
        return self

    def init_item_nodes(self) -> Tensor:
        return concat(self.features @ self.proj, self.item_cf)

    def propagate(self) -> tuple[Tensor, Tensor]:
        """2D-wide node states after the last layer (before the output projection)."""
        if self._agg_iu is None:
            raise RuntimeError("call set_graph() before encoding")
        h_u, h_i = self.user_h0, self.init_item_nodes()
        for w1, w2 in zip(self.w_self, self.w_nbr):
            h_u, h_i = (
                gcn_layer(h_u, h_i, self._agg_ui, w1, w2),
                gcn_layer(h_i, h_u, self._agg_iu, w1, w2),
            )
        return h_u, h_i

    def forward(self) -> tuple[Tensor, Tensor]:
        h_u, h_i = self.propagate()
        return h_u @ self.out, h_i @ self.out


def bpr_loss(h_u: Tensor, h_i: Tensor, triples: Tensor, reduction: str = "sum") -> Tensor:
    """Sum of -ln sigmoid(h_u.h_i - h_u.h_j) over (u, i, j) rows."""
    u, i, j = triples[:, 0], triples[:, 1], triples[:, 2]
    hu = h_u[u]
    margin = (hu * h_i[i]).sum(-1) - (hu * h_i[j]).sum(-1)
    loss = nn.functional.softplus(-margin)
    return loss.sum() if reduction == "sum" else loss.mean()


def sample_triples(dataset: InteractionDataset, rng: np.random.Generator) -> np.ndarray:
    """One uniformly drawn item outside the user's training positives, per training pair."""
    pairs = dataset.pairs()
    n = dataset.n_items
    observed = set((pairs[:, 0] * n + pairs[:, 1]).tolist())
    neg = rng.integers(0, n, len(pairs))
    keys = pairs[:, 0] * n + neg
    bad = np.array([k in observed for k in keys.tolist()], dtype=bool)
    while bad.any():
        neg[bad] = rng.integers(0, n, int(bad.sum()))
        keys = pairs[:, 0] * n + neg
        bad = np.array([k in observed for k in keys.tolist()], dtype=bool)
    return np.concatenate([pairs, neg[:, None]], axis=1)
