"""Encoder-decoder Transformer that generates Rec-ID tokens from a user's interacted items.

The encoder replaces absolute positions with relation-aware self-attention:
user-specific query/key/value matrices ``W_u = mlp(h_u) * U`` are added to
the per-head projections. The decoder is a standard causal Transformer
decoder over the Rec-ID vocabulary.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import Tensor, nn

from .numeric import make_generator, make_optimizer, xavier_init
from .rec_id import BOS, PAD, RecIdRegistry

log = logging.getLogger(__name__)

POS_MODES = ("relation", "sinusoid", "none")


def sinusoid_table(n: int, dim: int, dtype=torch.float32) -> Tensor:
    pos = torch.arange(n, dtype=torch.float64)[:, None]
    div = torch.exp(torch.arange(0, dim, 2, dtype=torch.float64) * (-math.log(10000.0) / dim))
    table = torch.zeros(n, dim, dtype=torch.float64)
    table[:, 0::2] = torch.sin(pos * div)
    table[:, 1::2] = torch.cos(pos * div)[:, : dim // 2]
    return table.to(dtype)


@dataclass
class EncodedSequence:
    tokens: np.ndarray  # (N,) item index + 1, 0 for padding
    embeddings: Tensor  # (N, D)
    mask: np.ndarray  # (N,) True at real positions


def select_history(items: np.ndarray, max_len: int, rng: np.random.Generator | None) -> np.ndarray:
    """Seeded uniform subsample when the history exceeds ``max_len``; order is preserved."""
    items = np.asarray(items, dtype=np.int64)
    if len(items) <= max_len:
        return items
    if rng is None:
        rng = np.random.default_rng(0)
    keep = np.sort(rng.choice(len(items), max_len, replace=False))
    return items[keep]


def embed_input(items, item_reps: Tensor, max_len: int = 20, rng: np.random.Generator | None = None) -> EncodedSequence:
    """Rows ``h_i`` for each kept item followed by zero rows for padding."""
    items = np.asarray(items, dtype=np.int64)
    if len(items) == 0:
        raise ValueError("cannot encode an empty interaction list")
    kept = select_history(items, max_len, rng)
    tokens = np.zeros(max_len, dtype=np.int64)
    tokens[: len(kept)] = kept + 1
    emb = torch.zeros(max_len, item_reps.shape[1], dtype=item_reps.dtype)
    emb[: len(kept)] = item_reps[torch.as_tensor(kept)]
    return EncodedSequence(tokens, emb, tokens > 0)


def padded_table(item_reps: np.ndarray | Tensor, dtype=torch.float32) -> Tensor:
    """Item representations with a zero row prepended, so token 0 embeds to zero."""
    reps = torch.as_tensor(np.asarray(item_reps), dtype=dtype)
    return torch.cat([torch.zeros(1, reps.shape[1], dtype=dtype), reps], 0)


class RelationAwareAttention(nn.Module):
    """Multi-head self-attention with optional user-specific relation terms.

    Head ``a`` uses column slice ``a`` of the layer's ``W^Q/W^K/W^V`` and of
    the user matrices, so with zero user scalars this is standard multi-head
    attention.
    """

    def __init__(self, dim: int, heads: int, user_aware: bool = True, generator=None, dtype=torch.float32):
        super().__init__()
        if dim % heads:
            raise ValueError(f"dim {dim} not divisible by {heads} heads")
        g = generator or make_generator(0)
        self.dim, self.heads, self.head_dim, self.user_aware = dim, heads, dim // heads, user_aware
        self.w_q = nn.Parameter(xavier_init((dim, dim), g, dtype))
        self.w_k = nn.Parameter(xavier_init((dim, dim), g, dtype))
        self.w_v = nn.Parameter(xavier_init((dim, dim), g, dtype))
        self.w_o = nn.Parameter(xavier_init((dim, dim), g, dtype))
        self.b_o = nn.Parameter(torch.zeros(dim, dtype=dtype))
        if user_aware:
            self.u_q = nn.Parameter(xavier_init((dim, dim), g, dtype))
            self.u_k = nn.Parameter(xavier_init((dim, dim), g, dtype))
            self.u_v = nn.Parameter(xavier_init((dim, dim), g, dtype))
            self.scalar = nn.Linear(dim, 3, dtype=dtype)  # one D->1 map per foundational matrix
            with torch.no_grad():
                self.scalar.weight.copy_(xavier_init((3, dim), g, dtype))
                self.scalar.bias.zero_()
        self.last_weights: Tensor | None = None

    def user_scalars(self, h_u: Tensor) -> Tensor:
        """(B, 3) scalars for the query, key and value foundational matrices."""
        return self.scalar(h_u)

    def user_matrices(self, h_u: Tensor) -> tuple[Tensor, Tensor, Tensor]:
        s = self.user_scalars(h_u)
        return (
            s[:, 0, None, None] * self.u_q,
            s[:, 1, None, None] * self.u_k,
            s[:, 2, None, None] * self.u_v,
        )

    def _split(self, x: Tensor) -> Tensor:
        b, n, _ = x.shape
        return x.view(b, n, self.heads, self.head_dim).transpose(1, 2)

    def forward(self, e: Tensor, mask: Tensor, h_u: Tensor | None = None) -> Tensor:
        """``e`` (B, N, D), ``mask`` (B, N) True at real positions."""
        if not bool(mask.any(-1).all()):
            raise ValueError("every sequence needs at least one unmasked position")
        q, k, v = self._split(e @ self.w_q), self._split(e @ self.w_k), self._split(e @ self.w_v)
        logits = q @ k.transpose(-1, -2)
        if self.user_aware and h_u is not None:
            s = self.user_scalars(h_u)
            qu = self._split(e @ self.u_q) * s[:, 0, None, None, None]
            ku = self._split(e @ self.u_k) * s[:, 1, None, None, None]
            vu = self._split(e @ self.u_v) * s[:, 2, None, None, None]
            logits = logits + qu @ ku.transpose(-1, -2)
            v = v + vu
        logits = logits / math.sqrt(self.head_dim)
        logits = logits.masked_fill(~mask[:, None, None, :], float("-inf"))
        weights = torch.softmax(logits, dim=-1)
        self.last_weights = weights.detach()
        x = (weights @ v).transpose(1, 2).reshape(e.shape)
        return x @ self.w_o + self.b_o

    def fused_heads(self, e: Tensor, mask: Tensor, h_u: Tensor | None = None) -> Tensor:
        """Per-head outputs (B, A, N, D_h) from the single-product form

        ``softmax(E (Wq Wk^T + Wuq Wuk^T) E^T / sqrt(D_h)) E (Wv + Wuv)``.
        """
        outs = []
        if self.user_aware and h_u is not None:
            uq, uk, uv = self.user_matrices(h_u)
        for a in range(self.heads):
            sl = slice(a * self.head_dim, (a + 1) * self.head_dim)
            rel = self.w_q[:, sl] @ self.w_k[:, sl].T
            val = self.w_v[:, sl]
            if self.user_aware and h_u is not None:
                rel = rel + uq[:, :, sl] @ uk[:, :, sl].transpose(-1, -2)
                val = val + uv[:, :, sl]
            logits = e @ rel @ e.transpose(-1, -2) / math.sqrt(self.head_dim)
            logits = logits.masked_fill(~mask[:, None, :], float("-inf"))
            outs.append(torch.softmax(logits, -1) @ (e @ val))
        return torch.stack(outs, 1)


class EncoderLayer(nn.Module):
    """Attention -> add & norm -> feed-forward -> add & norm."""

    def __init__(self, dim, heads, ff_dim, user_aware, dropout, generator, dtype):
        super().__init__()
        self.attn = RelationAwareAttention(dim, heads, user_aware, generator, dtype)
        self.norm1 = nn.LayerNorm(dim, dtype=dtype)
        self.norm2 = nn.LayerNorm(dim, dtype=dtype)
        self.ff1 = nn.Linear(dim, ff_dim, dtype=dtype)
        self.ff2 = nn.Linear(ff_dim, dim, dtype=dtype)
        self.drop = nn.Dropout(dropout)
        with torch.no_grad():
            for lin in (self.ff1, self.ff2):
                lin.weight.copy_(xavier_init(tuple(lin.weight.shape), generator, dtype))
                lin.bias.zero_()

    def forward(self, x: Tensor, mask: Tensor, h_u: Tensor | None) -> Tensor:
        x = self.norm1(x + self.drop(self.attn(x, mask, h_u)))
        return self.norm2(x + self.drop(self.ff2(self.drop(torch.relu(self.ff1(x))))))


class Seq2SeqRecommender(nn.Module):
    def __init__(
        self,
        vocab_size: int,
        id_length: int,
        dim: int = 64,
        heads: int = 4,
        layers: int = 2,
        ff_dim: int | None = None,
        pos_mode: str = "relation",
        max_len: int = 20,
        dropout: float = 0.0,
        seed: int = 0,
        dtype: torch.dtype = torch.float32,
    ):
        super().__init__()
        if pos_mode not in POS_MODES:
            raise ValueError(f"pos_mode must be one of {POS_MODES}")
        g = make_generator(seed)
        ff_dim = ff_dim or 2 * dim
        self.vocab_size, self.id_length, self.dim, self.pos_mode, self.max_len = vocab_size, id_length, dim, pos_mode, max_len
        self.enc_layers = nn.ModuleList(
            [EncoderLayer(dim, heads, ff_dim, pos_mode == "relation", dropout, g, dtype) for _ in range(layers)]
        )
        self.register_buffer("enc_pos", sinusoid_table(max_len, dim, dtype))
        self.register_buffer("dec_pos", sinusoid_table(id_length + 1, dim, dtype))
        self.tok_emb = nn.Parameter(xavier_init((vocab_size, dim), g, dtype))
        dec_layer = nn.TransformerDecoderLayer(
            dim, heads, ff_dim, dropout, batch_first=True, norm_first=False, dtype=dtype
        )
        self.decoder = nn.TransformerDecoder(dec_layer, layers)
        self.out = nn.Linear(dim, vocab_size, dtype=dtype)
        with torch.no_grad():
            for name, p in list(self.decoder.named_parameters()) + list(self.out.named_parameters()):
                if "norm" in name:
                    continue
                if p.dim() >= 2:
                    p.copy_(xavier_init(tuple(p.shape), g, dtype))
                else:
                    p.zero_()

    def encode(self, e: Tensor, mask: Tensor, h_u: Tensor | None = None) -> Tensor:
        x = e
        if self.pos_mode == "sinusoid":
            x = x + self.enc_pos[: x.shape[1]] * mask[..., None]
        for layer in self.enc_layers:
            x = layer(x, mask, h_u)
        return x

    def decode(self, memory: Tensor, mask: Tensor, prefix: Tensor) -> Tensor:
        """Logits (B, T, V) for every prefix position; ``prefix`` starts with BOS."""
        t = prefix.shape[1]
        y = self.tok_emb[prefix] + self.dec_pos[:t]
        causal = torch.triu(torch.ones(t, t, dtype=torch.bool), diagonal=1)
        h = self.decoder(y, memory, tgt_mask=causal, memory_key_padding_mask=~mask)
        return self.out(h)

    def forward(self, e: Tensor, mask: Tensor, h_u: Tensor | None, target: Tensor) -> Tensor:
        """Teacher-forced logits (B, M, V) for target token rows (B, M)."""
        bos = torch.full((target.shape[0], 1), BOS, dtype=torch.long)
        prefix = torch.cat([bos, target[:, :-1]], 1)
        return self.decode(self.encode(e, mask, h_u), mask, prefix)


def sequence_loss(logits: Tensor, target: Tensor) -> Tensor:
    """Cross-entropy averaged over tokens and instances."""
    return nn.functional.cross_entropy(logits.reshape(-1, logits.shape[-1]), target.reshape(-1))


@dataclass
class RecContext:
    """Frozen inputs shared by training and inference."""

    item_table: Tensor  # (I + 1, D), row 0 = padding
    user_reps: Tensor  # (U, D)
    train_items: list[np.ndarray]
    max_len: int = 20

    @classmethod
    def build(cls, item_reps, user_reps, train_items, max_len=20, dtype=torch.float32):
        return cls(padded_table(item_reps, dtype), torch.as_tensor(np.asarray(user_reps), dtype=dtype), train_items, max_len)

    def batch(self, users, histories: list[np.ndarray], rng=None) -> tuple[Tensor, Tensor, Tensor]:
        """Embeddings (B, N, D), mask (B, N) and h_u (B, D) for a list of histories."""
        tok = np.zeros((len(histories), self.max_len), dtype=np.int64)
        for r, items in enumerate(histories):
            kept = select_history(items, self.max_len, rng)
            tok[r, : len(kept)] = kept + 1
        tok_t = torch.as_tensor(tok)
        return self.item_table[tok_t], tok_t > 0, self.user_reps[torch.as_tensor(np.asarray(users, dtype=np.int64))]


def training_instances(train_items: list[np.ndarray]) -> np.ndarray:
    """Every (user, item) training pair whose user has another training item to condition on."""
    rows = [(u, int(i)) for u, items in enumerate(train_items) if len(items) > 1 for i in items]
    return np.array(rows, dtype=np.int64).reshape(-1, 2)


@dataclass
class RecSchedule:
    epochs: int = 200
    batch_size: int = 500
    lr: float = 1e-3
    l2: float = 1e-5
    optimizer: str = "adam"
    patience: int = 20
    eval_every: int = 1
    k: int = 10
    seed: int = 0
    stop_at: float | None = None  # end training once the validation score reaches this


@dataclass
class RecTrainResult:
    history: list[dict] = field(default_factory=list)
    best_epoch: int = 0
    best_recall: float = 0.0


def train_recommender(
    model: Seq2SeqRecommender,
    ctx: RecContext,
    registry: RecIdRegistry,
    schedule: RecSchedule,
    validate=None,
) -> RecTrainResult:
    """Teacher-forced cross-entropy over each target item's Rec-ID tokens.

    ``validate(model) -> float`` drives early stopping (best snapshot restored);
    without it the model trains for the full epoch budget.
    """
    instances = training_instances(ctx.train_items)
    if len(instances) == 0:
        raise ValueError("no training instances")
    if instances[:, 1].max() >= registry.n_items:
        raise KeyError("target item missing from registry")
    targets = torch.as_tensor(registry.tokens[instances[:, 1]])
    rng = np.random.default_rng(schedule.seed)
    opt = make_optimizer(model.parameters(), schedule.optimizer, schedule.lr, schedule.l2)
    result = RecTrainResult()
    best_state, stale = None, 0
    for epoch in range(1, schedule.epochs + 1):
        model.train()
        order = rng.permutation(len(instances))
        total, batches = 0.0, 0
        for start in range(0, len(order), schedule.batch_size):
            idx = order[start:start + schedule.batch_size]
            users = instances[idx, 0]
            hist = [ctx.train_items[u][ctx.train_items[u] != i] for u, i in instances[idx]]
            e, mask, h_u = ctx.batch(users, hist, rng)
            opt.zero_grad()
            loss = sequence_loss(model(e, mask, h_u, targets[idx]), targets[idx])
            if not torch.isfinite(loss):
                raise FloatingPointError(f"recommender loss became {loss.item()} at epoch {epoch}")
            loss.backward()
            opt.step()
            total += loss.item()
            batches += 1
        model.eval()
        row = {"epoch": epoch, "loss": total / batches}
        if validate is not None and epoch % schedule.eval_every == 0:
            score = validate(model)
            row["valid_recall"] = score
            if best_state is None or score > result.best_recall:
                result.best_recall, result.best_epoch, stale = score, epoch, 0
                best_state = {k: v.clone() for k, v in model.state_dict().items()}
            else:
                stale += schedule.eval_every
        result.history.append(row)
        log.info("rec epoch %d loss %.4f valid %s", epoch, row["loss"], row.get("valid_recall"))
        if validate is not None and stale >= schedule.patience:
            break
        if schedule.stop_at is not None and row.get("valid_recall", -1.0) >= schedule.stop_at:
            break
    if best_state is not None:
        model.load_state_dict(best_state)
    model.eval()
    return result
