"""HTTP front end over a trained artifact directory."""
from __future__ import annotations

from functools import cached_property
from pathlib import Path

import numpy as np
from fastapi import FastAPI, HTTPException
from pydantic import BaseModel, Field

from .generation import beam_search, encode_user, score_items
from .pipeline import Bundle, load_bundle
from .rec_id import RegistryError


class RecommendRequest(BaseModel):
    users: list[str] = Field(min_length=1)
    k: int | None = Field(default=None, ge=1)
    exclude_train: bool | None = None


class Recommendation(BaseModel):
    item: str
    rank: int
    score: float
    rec_id: list[int]


class UserRecommendations(BaseModel):
    user: str
    items: list[Recommendation]
    exhausted: bool


class RecommendResponse(BaseModel):
    results: list[UserRecommendations]


class ScoreRequest(BaseModel):
    user: str
    items: list[str] = Field(min_length=1)


class ScoreResponse(BaseModel):
    user: str
    scores: dict[str, float]


class RecIdResponse(BaseModel):
    item: str
    rec_id: list[int]


class LookupRequest(BaseModel):
    rec_id: list[int]


class StatsResponse(BaseModel):
    users: int
    items: int
    interactions: int
    id_length: int
    codebook_size: int
    collision_rate: float
    config: dict[str, str]


class Catalog:
    """A loaded bundle plus external-id lookups."""

    def __init__(self, bundle: Bundle):
        self.b = bundle
        ds = bundle.dataset
        self.user_names = ds.user_ids or tuple(str(u) for u in range(ds.n_users))
        self.item_names = ds.item_ids or tuple(str(i) for i in range(ds.n_items))

    @cached_property
    def user_index(self) -> dict[str, int]:
        return {n: i for i, n in enumerate(self.user_names)}

    @cached_property
    def item_index(self) -> dict[str, int]:
        return {n: i for i, n in enumerate(self.item_names)}

    def user(self, name: str) -> int:
        try:
            return self.user_index[name]
        except KeyError:
            raise HTTPException(404, f"unknown user {name!r}") from None

    def item(self, name: str) -> int:
        try:
            return self.item_index[name]
        except KeyError:
            raise HTTPException(404, f"unknown item {name!r}") from None

    def memory(self, u: int):
        if len(self.b.ctx.train_items[u]) == 0:
            raise HTTPException(422, f"user {self.user_names[u]!r} has no training interactions")
        return encode_user(self.b.model, self.b.ctx, u, rng=np.random.default_rng(u))


def create_app(artifacts: str | Path | None = None, bundle: Bundle | None = None) -> FastAPI:
    if bundle is None:
        if artifacts is None:
            raise ValueError("need an artifact directory or a loaded bundle")
        bundle = load_bundle(artifacts)
    cat = Catalog(bundle)
    app = FastAPI(title="genrec", version="0.1.0")

    @app.get("/health")
    def health() -> dict:
        return {"status": "ok"}

    @app.get("/stats", response_model=StatsResponse)
    def stats() -> StatsResponse:
        b = cat.b
        return StatsResponse(
            users=b.dataset.n_users,
            items=b.dataset.n_items,
            interactions=len(b.dataset),
            id_length=b.registry.vocab.id_length,
            codebook_size=b.registry.vocab.codebook_size,
            collision_rate=b.registry.collisions().collision_rate,
            config={k: v.strip() for k, v in (line.split("=", 1) for line in b.cfg.to_text().splitlines())},
        )

    @app.post("/recommend", response_model=RecommendResponse)
    def recommend(req: RecommendRequest) -> RecommendResponse:
        b = cat.b
        k = req.k or b.cfg.k
        exclude = b.cfg.exclude_train if req.exclude_train is None else req.exclude_train
        out = []
        for name in req.users:
            u = cat.user(name)
            memory, mask = cat.memory(u)
            res = beam_search(b.model, memory, mask, b.registry, k,
                              b.ctx.train_items[u] if exclude else (), max(b.cfg.beam_width, k))
            items = [
                Recommendation(item=cat.item_names[i], rank=r, score=s, rec_id=list(b.registry.rec_id(i)))
                for r, (i, s) in enumerate(zip(res.items, res.scores), 1)
            ]
            out.append(UserRecommendations(user=name, items=items, exhausted=res.exhausted))
        return RecommendResponse(results=out)

    @app.post("/score", response_model=ScoreResponse)
    def score(req: ScoreRequest) -> ScoreResponse:
        u = cat.user(req.user)
        idx = [cat.item(n) for n in req.items]
        memory, mask = cat.memory(u)
        vals = score_items(cat.b.model, memory, mask, cat.b.registry, idx)
        return ScoreResponse(user=req.user, scores={n: float(v) for n, v in zip(req.items, vals)})

    @app.get("/rec-id/{item}", response_model=RecIdResponse)
    def rec_id(item: str) -> RecIdResponse:
        return RecIdResponse(item=item, rec_id=list(cat.b.registry.rec_id(cat.item(item))))

    @app.post("/lookup", response_model=RecIdResponse)
    def lookup(req: LookupRequest) -> RecIdResponse:
        try:
            i = cat.b.registry.item_for_rec_id(req.rec_id)
        except (RegistryError, ValueError) as err:
            raise HTTPException(404, str(err)) from None
        return RecIdResponse(item=cat.item_names[i], rec_id=req.rec_id)

    return app
