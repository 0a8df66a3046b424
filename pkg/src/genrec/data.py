"""Interaction logs, multimodal feature banks, splits and the user-item graph."""
from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

MODALITIES = ("visual", "acoustic", "textual")
TRAIN, VALID, TEST = 0, 1, 2


class DataError(ValueError):
    """Malformed or inconsistent input data."""


@dataclass(frozen=True, eq=False)
class InteractionDataset:
    n_users: int
    n_items: int
    users: np.ndarray
    items: np.ndarray
    split: np.ndarray
    user_ids: tuple[str, ...] = ()
    item_ids: tuple[str, ...] = ()

    def __post_init__(self):
        if not (len(self.users) == len(self.items) == len(self.split)):
            raise DataError("users/items/split arrays differ in length")
        if len(self.users):
            if self.users.min() < 0 or self.users.max() >= self.n_users:
                raise DataError("user index out of range")
            if self.items.min() < 0 or self.items.max() >= self.n_items:
                raise DataError("item index out of range")
        keys = self.users.astype(np.int64) * self.n_items + self.items
        if len(np.unique(keys)) != len(keys):
            raise DataError("duplicate (user, item) pairs")

    def __len__(self) -> int:
        return len(self.users)

    @cached_property
    def popularity(self) -> np.ndarray:
        """Training-interaction count per item."""
        mask = self.split == TRAIN
        return np.bincount(self.items[mask], minlength=self.n_items)

    def _by_user(self, which: int) -> list[np.ndarray]:
        out: list[list[int]] = [[] for _ in range(self.n_users)]
        for u, i in zip(self.users[self.split == which], self.items[self.split == which]):
            out[u].append(int(i))
        return [np.array(sorted(x), dtype=np.int64) for x in out]

    @cached_property
    def train_items(self) -> list[np.ndarray]:
        return self._by_user(TRAIN)

    @cached_property
    def valid_items(self) -> list[np.ndarray]:
        return self._by_user(VALID)

    @cached_property
    def test_items(self) -> list[np.ndarray]:
        return self._by_user(TEST)

    def pairs(self, which: int = TRAIN) -> np.ndarray:
        mask = self.split == which
        return np.stack([self.users[mask], self.items[mask]], axis=1)

    def stats(self) -> dict:
        n = len(self)
        return {
            "users": self.n_users,
            "items": self.n_items,
            "interactions": n,
            "density": n / max(1, self.n_users * self.n_items),
            "train": int((self.split == TRAIN).sum()),
            "valid": int((self.split == VALID).sum()),
            "test": int((self.split == TEST).sum()),
        }

    def save(self, path: str | Path) -> None:
        np.savez(
            path,
            n_users=self.n_users,
            n_items=self.n_items,
            users=self.users,
            items=self.items,
            split=self.split,
            user_ids=np.array(self.user_ids, dtype=str),
            item_ids=np.array(self.item_ids, dtype=str),
        )

    @classmethod
    def load(cls, path: str | Path) -> "InteractionDataset":
        with np.load(path) as z:
            return cls(
                int(z["n_users"]),
                int(z["n_items"]),
                z["users"].astype(np.int64),
                z["items"].astype(np.int64),
                z["split"].astype(np.int8),
                tuple(str(x) for x in z["user_ids"]),
                tuple(str(x) for x in z["item_ids"]),
            )


def format_stats(stats: Mapping) -> str:
    return "\n".join(f"{k}: {v:.6f}" if isinstance(v, float) else f"{k}: {v}" for k, v in stats.items())


def assign_splits(users: np.ndarray, n_users: int, seed: int) -> np.ndarray:
    """Per-user seeded shuffle into 80/10/10; users with <3 interactions go entirely to train."""
    rng = np.random.default_rng(seed)
    split = np.full(len(users), TRAIN, dtype=np.int8)
    order = np.argsort(users, kind="stable")
    bounds = np.searchsorted(users[order], np.arange(n_users + 1))
    for u in range(n_users):
        idx = order[bounds[u]:bounds[u + 1]]
        n = len(idx)
        if n < 3:
            continue
        idx = idx[rng.permutation(n)]
        n_eval = max(1, int(round(0.1 * n)))
        split[idx[:n_eval]] = VALID
        split[idx[n_eval:2 * n_eval]] = TEST
    return split


def from_pairs(users, items, n_users: int, n_items: int, seed: int, user_ids=(), item_ids=()) -> InteractionDataset:
    users = np.asarray(users, dtype=np.int64)
    items = np.asarray(items, dtype=np.int64)
    return InteractionDataset(
        n_users, n_items, users, items, assign_splits(users, n_users, seed), tuple(user_ids), tuple(item_ids)
    )


def load_interactions(path: str | Path, seed: int = 0) -> InteractionDataset:
    """Read ``user<TAB>item`` lines, remap ids densely in order of first appearance."""
    user_map: dict[str, int] = {}
    item_map: dict[str, int] = {}
    users, items = [], []
    seen: dict[tuple[int, int], int] = {}
    dups = []
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.rstrip("\n").rstrip("\r")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 2 or not parts[0] or not parts[1]:
                raise DataError(f"{path}:{lineno}: expected 'user<TAB>item', got {line!r}")
            u = user_map.setdefault(parts[0], len(user_map))
            i = item_map.setdefault(parts[1], len(item_map))
            if (u, i) in seen:
                dups.append((parts[0], parts[1], seen[(u, i)], lineno))
                continue
            seen[(u, i)] = lineno
            users.append(u)
            items.append(i)
    if dups:
        report = "; ".join(f"({a}, {b}) lines {x} and {y}" for a, b, x, y in dups[:10])
        raise DataError(f"{len(dups)} duplicate pair(s): {report}")
    if not users:
        raise DataError(f"{path}: no interactions")
    return from_pairs(users, items, len(user_map), len(item_map), seed, user_map.keys(), item_map.keys())


def write_interactions(dataset: InteractionDataset, path: str | Path) -> None:
    uid = dataset.user_ids or tuple(str(u) for u in range(dataset.n_users))
    iid = dataset.item_ids or tuple(str(i) for i in range(dataset.n_items))
    with open(path, "w", encoding="utf-8") as fh:
        for u, i in zip(dataset.users, dataset.items):
            fh.write(f"{uid[u]}\t{iid[i]}\n")


def write_id_maps(dataset: InteractionDataset, directory: str | Path) -> None:
    directory = Path(directory)
    uid = dataset.user_ids or tuple(str(u) for u in range(dataset.n_users))
    iid = dataset.item_ids or tuple(str(i) for i in range(dataset.n_items))
    (directory / "user_map.tsv").write_text("".join(f"{x}\t{k}\n" for k, x in enumerate(uid)))
    (directory / "item_map.tsv").write_text("".join(f"{x}\t{k}\n" for k, x in enumerate(iid)))


@dataclass(frozen=True, eq=False)
class ItemFeatureBank:
    features: dict[str, np.ndarray | None] = field(default_factory=dict)

    def __post_init__(self):
        present = [m for m in MODALITIES if self.features.get(m) is not None]
        if not present:
            raise DataError("at least one modality must be present")
        rows = {m: self.features[m].shape[0] for m in present}
        if len(set(rows.values())) != 1:
            raise DataError(f"modality row counts disagree: {rows}")

    @property
    def present(self) -> dict[str, bool]:
        return {m: self.features.get(m) is not None for m in MODALITIES}

    @property
    def n_items(self) -> int:
        return next(v.shape[0] for v in self.features.values() if v is not None)

    @property
    def dims(self) -> dict[str, int]:
        return {m: (0 if self.features.get(m) is None else self.features[m].shape[1]) for m in MODALITIES}

    @property
    def total_dim(self) -> int:
        return sum(self.dims.values())

    def concatenated(self) -> np.ndarray:
        """Present modalities concatenated in visual, acoustic, textual order."""
        return np.concatenate([self.features[m] for m in MODALITIES if self.features.get(m) is not None], axis=1)

    def subset(self, items: np.ndarray) -> "ItemFeatureBank":
        return ItemFeatureBank({m: (None if v is None else v[items]) for m, v in self.features.items()})


def _descriptor_path(path: Path) -> Path:
    return path.with_suffix(".desc")


def write_feature_file(matrix: np.ndarray, path: str | Path) -> None:
    path = Path(path)
    matrix = np.ascontiguousarray(matrix, dtype="<f4")
    path.write_bytes(matrix.tobytes())
    _descriptor_path(path).write_text(f"{matrix.shape[0]} {matrix.shape[1]}\n")


def read_feature_file(path: str | Path) -> np.ndarray:
    path = Path(path)
    header = _descriptor_path(path).read_text().split("\n", 1)[0].split()
    if len(header) != 2:
        raise DataError(f"{_descriptor_path(path)}: header must be 'I D'")
    n, d = int(header[0]), int(header[1])
    raw = np.frombuffer(path.read_bytes(), dtype="<f4")
    if raw.size != n * d:
        raise DataError(f"{path}: expected {n}x{d} floats, found {raw.size}")
    return raw.reshape(n, d).astype(np.float32)


def load_features(paths: Mapping[str, str | Path | None], n_items: int) -> ItemFeatureBank:
    """Load per-modality ``.f32`` files; a missing or absent path marks the modality missing."""
    feats: dict[str, np.ndarray | None] = {}
    for m in MODALITIES:
        p = paths.get(m)
        if p is None or not Path(p).exists():
            feats[m] = None
            continue
        mat = read_feature_file(p)
        if mat.shape[0] != n_items:
            raise DataError(f"{m} features have {mat.shape[0]} rows, expected {n_items}")
        feats[m] = mat
    return ItemFeatureBank(feats)


def save_bank(bank: ItemFeatureBank, directory: str | Path) -> dict[str, str]:
    directory = Path(directory)
    out = {}
    for m in MODALITIES:
        if bank.features.get(m) is not None:
            p = directory / f"{m}.f32"
            write_feature_file(bank.features[m], p)
            out[m] = str(p)
    return out


def bank_paths(directory: str | Path) -> dict[str, Path]:
    return {m: Path(directory) / f"{m}.f32" for m in MODALITIES}


@dataclass(frozen=True)
class SynthTruth:
    """Latent structure behind a synthetic dataset."""

    user_cluster: np.ndarray
    item_cluster: np.ndarray
    user_factors: np.ndarray
    item_factors: np.ndarray
    item_bias: np.ndarray


def synth_dataset(
    n_users: int,
    n_items: int,
    density: float,
    dims: Sequence[int] = (32, 16, 16),
    seed: int = 0,
    rank: int = 8,
    noise: float = 0.5,
    feature_noise: float = 0.1,
    pop_strength: float = 1.0,
    return_truth: bool = False,
):
    """Latent-factor synthetic interactions plus modality features projected from the item factors.

    Each user and item belongs to one of ``rank`` clusters; factors are the
    cluster one-hot plus Gaussian noise. A user's items are the top-``n`` by
    ``3 * <u, v> + pop_strength * bias + noise * Gumbel``, with ``bias`` in [0, 1).
    With ``noise=0`` every interacted item shares the user's cluster (when the
    cluster is large enough). A zero entry in ``dims`` drops that modality.
    """
    if density * n_users * n_items < n_users:
        raise ValueError("density too low: every user needs at least one interaction")
    rng = np.random.default_rng(seed)
    user_cluster = rng.integers(0, rank, n_users)
    item_cluster = np.arange(n_items) % rank
    rng.shuffle(item_cluster)
    eye = np.eye(rank)
    uf = eye[user_cluster] + noise * rng.standard_normal((n_users, rank))
    vf = eye[item_cluster] + noise * rng.standard_normal((n_items, rank))
    bias = rng.random(n_items) ** 2
    mean_n = density * n_items
    counts = np.clip(rng.poisson(mean_n, n_users), 1, n_items)
    users, items = [], []
    for u in range(n_users):
        score = 3.0 * vf @ uf[u] + pop_strength * bias
        if noise > 0:
            score = score + noise * rng.gumbel(size=n_items)
        top = np.argsort(-score, kind="stable")[: counts[u]]
        users.extend([u] * len(top))
        items.extend(top.tolist())
    dataset = from_pairs(users, items, n_users, n_items, seed)
    feats: dict[str, np.ndarray | None] = {}
    for m, d in zip(MODALITIES, dims):
        if d <= 0:
            feats[m] = None
            continue
        proj = rng.standard_normal((rank, d)) / np.sqrt(rank)
        feats[m] = (vf @ proj + feature_noise * rng.standard_normal((n_items, d))).astype(np.float32)
    bank = ItemFeatureBank(feats)
    if return_truth:
        return dataset, bank, SynthTruth(user_cluster, item_cluster, uf, vf, bias)
    return dataset, bank


@dataclass(frozen=True, eq=False)
class BipartiteGraph:
    n_users: int
    n_items: int
    user_adj: tuple[np.ndarray, ...]
    item_adj: tuple[np.ndarray, ...]

    def degree_items(self) -> np.ndarray:
        return np.array([len(a) for a in self.item_adj], dtype=np.int64)

    def degree_users(self) -> np.ndarray:
        return np.array([len(a) for a in self.user_adj], dtype=np.int64)

    def edges(self) -> np.ndarray:
        """(E, 2) array of (user, item) pairs."""
        rows = [(u, i) for u, adj in enumerate(self.user_adj) for i in adj]
        return np.array(rows, dtype=np.int64).reshape(-1, 2)


def build_graph(dataset: InteractionDataset) -> BipartiteGraph:
    """Symmetric adjacency over training edges only."""
    pairs = dataset.pairs(TRAIN)
    uadj: list[list[int]] = [[] for _ in range(dataset.n_users)]
    iadj: list[list[int]] = [[] for _ in range(dataset.n_items)]
    for u, i in pairs:
        uadj[u].append(int(i))
        iadj[i].append(int(u))
    return BipartiteGraph(
        dataset.n_users,
        dataset.n_items,
        tuple(np.array(sorted(a), dtype=np.int64) for a in uadj),
        tuple(np.array(sorted(a), dtype=np.int64) for a in iadj),
    )


def nested_item_subsets(n_items: int, fractions: Sequence[float], seed: int) -> list[np.ndarray]:
    """Item index sets for each fraction; smaller fractions are prefixes of larger ones."""
    perm = np.random.default_rng(seed).permutation(n_items)
    return [np.sort(perm[: max(1, int(round(f * n_items)))]) for f in fractions]


def restrict_items(dataset: InteractionDataset, keep: np.ndarray, seed: int) -> InteractionDataset:
    """Keep ``keep`` items and their interactions; drop users left empty; re-split."""
    keep = np.sort(np.asarray(keep))
    remap = np.full(dataset.n_items, -1, dtype=np.int64)
    remap[keep] = np.arange(len(keep))
    mask = remap[dataset.items] >= 0
    users = dataset.users[mask]
    live = np.unique(users)
    umap = np.full(dataset.n_users, -1, dtype=np.int64)
    umap[live] = np.arange(len(live))
    uids = tuple(dataset.user_ids[u] for u in live) if dataset.user_ids else ()
    iids = tuple(dataset.item_ids[i] for i in keep) if dataset.item_ids else ()
    return from_pairs(umap[users], remap[dataset.items[mask]], len(live), len(keep), seed, uids, iids)


def split_summary(dataset: InteractionDataset) -> Counter:
    return Counter(int(s) for s in dataset.split)


def dump_json(obj, path: str | Path) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
