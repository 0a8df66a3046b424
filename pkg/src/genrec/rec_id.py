"""Rec-ID assignment: semantic tokens plus a collision-resolving last token, vocabulary layout and prefix trie."""
from __future__ import annotations

from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

PAD, BOS = 0, 1
N_SPECIAL = 2


class RegistryError(ValueError):
    pass


@dataclass(frozen=True)
class Vocab:
    """Disjoint integer ranges per semantic level, then the last-token range, after PAD/BOS."""

    levels: int
    codebook_size: int
    max_group: int = 256

    @property
    def id_length(self) -> int:
        return self.levels + 1

    @property
    def size(self) -> int:
        return N_SPECIAL + self.levels * self.codebook_size + self.max_group

    def offset(self, position: int) -> int:
        return N_SPECIAL + position * self.codebook_size

    def encode(self, rec_id: Sequence[int]) -> tuple[int, ...]:
        """Raw (c_1..c_{M-1}, p) with 1-based p -> vocabulary tokens."""
        *codes, p = rec_id
        return tuple(self.offset(m) + int(c) for m, c in enumerate(codes)) + (self.offset(self.levels) + int(p) - 1,)

    def decode(self, tokens: Sequence[int]) -> tuple[int, ...]:
        *codes, p = tokens
        return tuple(int(t) - self.offset(m) for m, t in enumerate(codes)) + (int(p) - self.offset(self.levels) + 1,)

    def position_range(self, position: int) -> range:
        width = self.max_group if position == self.levels else self.codebook_size
        return range(self.offset(position), self.offset(position) + width)


def group_by_tuple(codes: np.ndarray) -> dict[tuple[int, ...], list[int]]:
    groups: dict[tuple[int, ...], list[int]] = defaultdict(list)
    for item, row in enumerate(np.asarray(codes).tolist()):
        groups[tuple(row)].append(item)
    return dict(groups)


def assign_popularity_tokens(groups: Mapping, popularity: Sequence[int]) -> dict[int, int]:
    """Within each group: descending popularity gets token 1; ties by ascending item index."""
    tokens = {}
    for items in groups.values():
        ranked = sorted(items, key=lambda i: (-int(popularity[i]), i))
        for rank, item in enumerate(ranked, 1):
            tokens[item] = rank
    return tokens


def assign_random_tokens(groups: Mapping, seed: int) -> dict[int, int]:
    rng = np.random.default_rng(seed)
    tokens = {}
    for key in sorted(groups):
        items = sorted(groups[key])
        for rank, k in enumerate(rng.permutation(len(items)), 1):
            tokens[items[k]] = rank
    return tokens


@dataclass(frozen=True)
class CollisionStats:
    n_items: int
    n_groups: int
    collision_rate: float
    max_group: int
    histogram: dict[int, int] = field(default_factory=dict)

    def report(self) -> str:
        lines = [
            f"items: {self.n_items}",
            f"distinct semantic tuples: {self.n_groups}",
            f"collision rate: {self.collision_rate:.6f}",
            f"largest group: {self.max_group}",
            "group_size\tgroups",
        ]
        lines += [f"{k}\t{v}" for k, v in sorted(self.histogram.items())]
        return "\n".join(lines)


def collision_stats(codes: np.ndarray) -> CollisionStats:
    """Collision rate = fraction of items whose semantic tuple is shared by another item."""
    groups = group_by_tuple(codes)
    sizes = [len(v) for v in groups.values()]
    n = int(sum(sizes))
    shared = sum(s for s in sizes if s > 1)
    return CollisionStats(n, len(groups), shared / n if n else 0.0, max(sizes, default=0), dict(Counter(sizes)))


class RecIdRegistry:
    """Bijective item <-> Rec-ID map with a token-level prefix trie."""

    def __init__(self, rec_ids: np.ndarray, vocab: Vocab):
        rec_ids = np.asarray(rec_ids, dtype=np.int64)
        if rec_ids.ndim != 2 or rec_ids.shape[1] != vocab.id_length:
            raise RegistryError(f"rec_ids must be (items, {vocab.id_length})")
        self.vocab = vocab
        self.rec_ids = rec_ids
        self.tokens = self._to_tokens(rec_ids, vocab)
        self._item_of: dict[tuple[int, ...], int] = {}
        for item, row in enumerate(self.tokens.tolist()):
            key = tuple(row)
            if key in self._item_of:
                raise RegistryError(f"items {self._item_of[key]} and {item} share Rec-ID {vocab.decode(key)}")
            self._item_of[key] = item
        self._children, self._count = self._build_trie(self.tokens)

    @staticmethod
    def _to_tokens(rec_ids: np.ndarray, vocab: Vocab) -> np.ndarray:
        out = np.empty_like(rec_ids)
        for m in range(vocab.levels):
            out[:, m] = rec_ids[:, m] + vocab.offset(m)
        out[:, -1] = rec_ids[:, -1] - 1 + vocab.offset(vocab.levels)
        return out

    @staticmethod
    def _build_trie(tokens: np.ndarray):
        children: dict[tuple, list[int]] = {}
        count: dict[tuple, int] = {}
        order = np.lexsort(tokens.T[::-1])
        rows = tokens[order].tolist()
        # Rows are sorted, so each prefix's children arrive contiguous and ascending.
        for depth in range(tokens.shape[1] + 1):
            for row in rows:
                key = tuple(row[:depth])
                count[key] = count.get(key, 0) + 1
                if depth < tokens.shape[1]:
                    kids = children.setdefault(key, [])
                    if not kids or kids[-1] != row[depth]:
                        kids.append(row[depth])
        return {k: np.array(v, dtype=np.int64) for k, v in children.items()}, count

    @property
    def n_items(self) -> int:
        return len(self.rec_ids)

    def rec_id(self, item: int) -> tuple[int, ...]:
        return tuple(int(x) for x in self.rec_ids[item])

    def item_tokens(self, item: int) -> tuple[int, ...]:
        return tuple(int(x) for x in self.tokens[item])

    def item_for_tokens(self, tokens: Sequence[int]) -> int:
        try:
            return self._item_of[tuple(int(t) for t in tokens)]
        except KeyError:
            raise RegistryError(f"unknown Rec-ID tokens {tuple(tokens)}") from None

    def item_for_rec_id(self, rec_id: Sequence[int]) -> int:
        return self.item_for_tokens(self.vocab.encode(rec_id))

    def valid_next_tokens(self, prefix: Sequence[int] = ()) -> np.ndarray:
        return self._children.get(tuple(int(t) for t in prefix), np.empty(0, dtype=np.int64))

    def count_under(self, prefix: Sequence[int]) -> int:
        return self._count.get(tuple(int(t) for t in prefix), 0)

    def path_count(self) -> int:
        return sum(1 for k in self._count if len(k) == self.vocab.id_length)

    def collisions(self) -> CollisionStats:
        return collision_stats(self.rec_ids[:, :-1])

    def export_lines(self, item_ids: Sequence[str] = ()) -> Iterable[str]:
        for item, row in enumerate(self.rec_ids.tolist()):
            name = item_ids[item] if item_ids else str(item)
            yield name + " " + " ".join(str(x) for x in row)

    def save(self, path: str | Path) -> None:
        np.savez(path, rec_ids=self.rec_ids, levels=self.vocab.levels,
                 codebook_size=self.vocab.codebook_size, max_group=self.vocab.max_group)

    @classmethod
    def load(cls, path: str | Path) -> "RecIdRegistry":
        with np.load(path) as z:
            vocab = Vocab(int(z["levels"]), int(z["codebook_size"]), int(z["max_group"]))
            return cls(z["rec_ids"], vocab)


def build_registry(
    codes: np.ndarray,
    popularity: Sequence[int],
    codebook_size: int,
    variant: str = "popularity",
    seed: int = 0,
    max_group: int = 256,
) -> RecIdRegistry:
    """Append the collision-resolving token to each item's semantic tuple."""
    codes = np.asarray(codes, dtype=np.int64)
    if codes.ndim != 2:
        raise RegistryError("codes must be (items, levels)")
    groups = group_by_tuple(codes)
    too_big = {k: v for k, v in groups.items() if len(v) > max_group}
    if too_big:
        key, items = next(iter(too_big.items()))
        raise RegistryError(
            f"{len(too_big)} collision group(s) exceed max size {max_group}; e.g. {key}: {len(items)} items {items[:20]}"
        )
    if variant == "popularity":
        tokens = assign_popularity_tokens(groups, popularity)
    elif variant == "random":
        tokens = assign_random_tokens(groups, seed)
    else:
        raise ValueError(f"unknown token variant {variant!r}")
    last = np.array([tokens[i] for i in range(len(codes))], dtype=np.int64)
    vocab = Vocab(codes.shape[1], codebook_size, max_group)
    return RecIdRegistry(np.concatenate([codes, last[:, None]], axis=1), vocab)
