"""Stage orchestration shared by the CLI and the HTTP service.

Each stage reads and writes declared files under one artifact directory; the
in-memory helpers (``fit_*``) are what the stages and experiments call.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .checkpoint import load_checkpoint, save_checkpoint
from .config import Config
from .data import (
    InteractionDataset,
    ItemFeatureBank,
    bank_paths,
    build_graph,
    format_stats,
    load_features,
    load_interactions,
    save_bank,
    synth_dataset,
    write_id_maps,
    write_interactions,
)
from .generation import recommend_users
from .graph_encoder import GraphEncoder
from .metrics import MetricReport, evaluate
from .mf import mf_recommend, mf_train, popularity_recommend
from .rec_id import RecIdRegistry, build_registry
from .recommender import RecContext, RecSchedule, Seq2SeqRecommender, train_recommender
from .rq_vae import RQVAE, JointSchedule, train_joint

log = logging.getLogger(__name__)


class MissingArtifact(FileNotFoundError):
    def __init__(self, path: Path, command: str):
        self.path, self.command = path, command
        super().__init__(f"{path} not found; run `genrec {command}` first")


class Paths:
    def __init__(self, root: str | Path):
        self.root = Path(root)

    def __getattr__(self, name):
        files = {
            "config": "config.resolved",
            "dataset": "data/dataset.npz",
            "data_dir": "data",
            "interactions": "data/interactions.tsv",
            "stats": "data/stats.txt",
            "encoder": "encoder.ckpt",
            "quantizer": "quantizer.ckpt",
            "reps": "representations.npz",
            "codes": "codes.txt",
            "joint_log": "joint_log.tsv",
            "registry": "registry.npz",
            "rec_ids": "rec_ids.txt",
            "collisions": "collisions.txt",
            "recommender": "recommender.ckpt",
            "rec_log": "rec_log.tsv",
            "recommendations": "recommendations.txt",
            "metrics": "metrics.txt",
            "metrics_tsv": "metrics.tsv",
        }
        if name not in files:
            raise AttributeError(name)
        return self.root / files[name]

    def require(self, name: str, command: str) -> Path:
        p = getattr(self, name)
        if not p.exists():
            raise MissingArtifact(p, command)
        return p


def _setup(cfg: Config) -> None:
    torch.set_num_threads(cfg.threads)


def _write_log(rows: list[dict], path: Path) -> None:
    keys = sorted({k for r in rows for k in r}, key=lambda k: (k != "epoch", k))
    lines = ["\t".join(keys)]
    for r in rows:
        lines.append("\t".join("" if r.get(k) is None else (f"{r[k]:.6f}" if isinstance(r[k], float) else str(r[k])) for k in keys))
    path.write_text("\n".join(lines) + "\n")


# in-memory fitting


@dataclass
class Assignment:
    encoder: GraphEncoder
    quantizer: RQVAE
    user_reps: np.ndarray
    item_reps: np.ndarray
    codes: np.ndarray
    history: list[dict] = field(default_factory=list)


def fit_assignment(cfg: Config, dataset: InteractionDataset, bank: ItemFeatureBank) -> Assignment:
    _setup(cfg)
    enc = GraphEncoder(dataset.n_users, dataset.n_items, bank.concatenated(), cfg.dim, cfg.gcn_layers, cfg.seed)
    enc.set_graph(build_graph(dataset))
    quant = RQVAE(cfg.dim, cfg.latent, cfg.levels, cfg.codebook_size, cfg.beta, cfg.seed + 1)
    sched = JointSchedule(
        epochs=cfg.joint_epochs, batch_size=cfg.batch_size, item_batch_size=cfg.item_batch_size, lr=cfg.lr,
        l2=cfg.l2, optimizer=cfg.optimizer, patience=cfg.patience, eval_every=cfg.eval_every, k=cfg.k,
        refine_epochs=cfg.quantizer_refine_epochs, seed=cfg.seed,
    )
    result = train_joint(dataset, enc, quant, sched)
    with torch.no_grad():
        h_u, h_i = enc()
        codes = quant.codes_for(h_i)
    return Assignment(enc, quant, h_u.numpy(), h_i.numpy(), codes, result.history)


def make_registry(cfg: Config, codes: np.ndarray, dataset: InteractionDataset) -> RecIdRegistry:
    return build_registry(codes, dataset.popularity, cfg.codebook_size, cfg.token_variant, cfg.seed, cfg.max_group)


def new_recommender(cfg: Config, registry: RecIdRegistry) -> Seq2SeqRecommender:
    return Seq2SeqRecommender(
        registry.vocab.size, registry.vocab.id_length, cfg.dim, cfg.heads, cfg.layers, cfg.ff_dim,
        cfg.pos_encoding, cfg.max_len, cfg.dropout, cfg.seed + 2,
    )


def generative_report(cfg, model, ctx, registry, dataset, which="test", users=None) -> MetricReport:
    truth_lists = dataset.test_items if which == "test" else dataset.valid_items
    truth = {u: t for u, t in enumerate(truth_lists) if len(t) and (users is None or u in users)}
    results = recommend_users(model, ctx, registry, truth.keys(), cfg.k, cfg.exclude_train, cfg.beam_width)
    return evaluate({u: r.items for u, r in results.items()}, truth, cfg.k)


def fit_recommender(cfg: Config, dataset, registry, user_reps, item_reps):
    _setup(cfg)
    ctx = RecContext.build(item_reps, user_reps, dataset.train_items, cfg.max_len)
    model = new_recommender(cfg, registry)
    sched = RecSchedule(
        epochs=cfg.rec_epochs, batch_size=cfg.batch_size, lr=cfg.rec_lr, l2=cfg.l2, optimizer=cfg.optimizer,
        patience=cfg.patience, eval_every=cfg.eval_every, k=cfg.k, seed=cfg.seed,
    )
    has_valid = any(len(v) for v in dataset.valid_items)
    validate = (lambda m: generative_report(cfg, m, ctx, registry, dataset, "valid").recall) if has_valid else None
    result = train_recommender(model, ctx, registry, sched, validate)
    return model, ctx, result


def training_target_recall(model, ctx: RecContext, registry: RecIdRegistry, k: int = 10, beam_width=None) -> float:
    """Recall@k of each training item generated from the user's other training items.

    Mirrors the training instances: the target is held out of the input and the
    remaining inputs are excluded from the generated list. Averaged over users.
    """
    from .generation import beam_search, encode_user

    per_user = []
    for u, items in enumerate(ctx.train_items):
        if len(items) < 2:
            continue
        hits = 0
        for i in items:
            rest = items[items != i]
            memory, mask = encode_user(model, ctx, u, rest, np.random.default_rng(u))
            hits += int(i) in beam_search(model, memory, mask, registry, k, rest, beam_width).items
        per_user.append(hits / len(items))
    return float(np.mean(per_user)) if per_user else 0.0


@dataclass
class PipelineRun:
    assignment: Assignment
    registry: RecIdRegistry
    model: Seq2SeqRecommender
    ctx: RecContext
    rec_history: list[dict]


def run_pipeline(cfg: Config, dataset: InteractionDataset, bank: ItemFeatureBank, assignment: Assignment | None = None) -> PipelineRun:
    assignment = assignment or fit_assignment(cfg, dataset, bank)
    registry = make_registry(cfg, assignment.codes, dataset)
    model, ctx, result = fit_recommender(cfg, dataset, registry, assignment.user_reps, assignment.item_reps)
    return PipelineRun(assignment, registry, model, ctx, result.history)


# file-backed stages


def stage_synth(cfg: Config, out: str | Path) -> InteractionDataset:
    paths = Paths(out)
    paths.data_dir.mkdir(parents=True, exist_ok=True)
    cfg.save(paths.config)
    dataset, bank = synth_dataset(
        cfg.synth_users, cfg.synth_items, cfg.synth_density, cfg.dims(), cfg.seed, cfg.synth_rank, cfg.synth_noise
    )
    dataset.save(paths.dataset)
    write_interactions(dataset, paths.interactions)
    write_id_maps(dataset, paths.data_dir)
    save_bank(bank, paths.data_dir)
    paths.stats.write_text(format_stats(dataset.stats()) + "\n")
    return dataset


def stage_ingest(cfg: Config, out: str | Path, interactions: str | Path, features: dict) -> InteractionDataset:
    """Copy an external interaction log and feature files into the artifact layout."""
    paths = Paths(out)
    paths.data_dir.mkdir(parents=True, exist_ok=True)
    cfg.save(paths.config)
    dataset = load_interactions(interactions, cfg.seed)
    bank = load_features(features, dataset.n_items)
    dataset.save(paths.dataset)
    write_interactions(dataset, paths.interactions)
    write_id_maps(dataset, paths.data_dir)
    save_bank(bank, paths.data_dir)
    paths.stats.write_text(format_stats(dataset.stats()) + "\n")
    return dataset


def load_data(out: str | Path) -> tuple[InteractionDataset, ItemFeatureBank]:
    paths = Paths(out)
    dataset = InteractionDataset.load(paths.require("dataset", "synth"))
    return dataset, load_features(bank_paths(paths.data_dir), dataset.n_items)


def stage_train_rqvae(cfg: Config, out: str | Path) -> Assignment:
    paths = Paths(out)
    dataset, bank = load_data(out)
    cfg.save(paths.config)
    a = fit_assignment(cfg, dataset, bank)
    save_checkpoint(paths.encoder, "graph_encoder", a.encoder.state_dict(),
                    {"n_users": dataset.n_users, "n_items": dataset.n_items, "dim": cfg.dim, "layers": cfg.gcn_layers})
    save_checkpoint(paths.quantizer, "rq_vae", a.quantizer.state_dict(),
                    {"dim": cfg.dim, "latent": cfg.latent, "levels": cfg.levels, "codebook_size": cfg.codebook_size,
                     "beta": cfg.beta})
    np.savez(paths.reps, user=a.user_reps, item=a.item_reps, codes=a.codes)
    names = dataset.item_ids or tuple(str(i) for i in range(dataset.n_items))
    paths.codes.write_text("".join(f"{names[i]} " + " ".join(map(str, row)) + "\n" for i, row in enumerate(a.codes.tolist())))
    _write_log(a.history, paths.joint_log)
    return a


def load_reps(out) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    with np.load(Paths(out).require("reps", "train-rqvae")) as z:
        return z["user"], z["item"], z["codes"]


def stage_assign_ids(cfg: Config, out: str | Path) -> RecIdRegistry:
    paths = Paths(out)
    dataset, _ = load_data(out)
    _, _, codes = load_reps(out)
    registry = make_registry(cfg, codes, dataset)
    registry.save(paths.registry)
    paths.rec_ids.write_text("\n".join(registry.export_lines(dataset.item_ids)) + "\n")
    paths.collisions.write_text(registry.collisions().report() + "\n")
    return registry


def stage_train_rec(cfg: Config, out: str | Path):
    paths = Paths(out)
    dataset, _ = load_data(out)
    user_reps, item_reps, _ = load_reps(out)
    registry = RecIdRegistry.load(paths.require("registry", "assign-ids"))
    cfg.save(paths.config)
    model, ctx, result = fit_recommender(cfg, dataset, registry, user_reps, item_reps)
    save_checkpoint(paths.recommender, "recommender", model.state_dict(), {"config": cfg.to_text()})
    _write_log(result.history, paths.rec_log)
    return model


@dataclass
class Bundle:
    cfg: Config
    dataset: InteractionDataset
    registry: RecIdRegistry
    model: Seq2SeqRecommender
    ctx: RecContext


def load_bundle(out: str | Path) -> Bundle:
    paths = Paths(out)
    dataset, _ = load_data(out)
    user_reps, item_reps, _ = load_reps(out)
    registry = RecIdRegistry.load(paths.require("registry", "assign-ids"))
    state, meta = load_checkpoint(paths.require("recommender", "train-rec"), "recommender")
    cfg = Config.from_text(meta["config"])
    _setup(cfg)
    model = new_recommender(cfg, registry)
    model.load_state_dict(state)
    model.eval()
    ctx = RecContext.build(item_reps, user_reps, dataset.train_items, cfg.max_len)
    return Bundle(cfg, dataset, registry, model, ctx)


def stage_recommend(out: str | Path, users=None, k: int | None = None) -> Path:
    b = load_bundle(out)
    k = k or b.cfg.k
    users = range(b.dataset.n_users) if users is None else users
    results = recommend_users(b.model, b.ctx, b.registry, users, k, b.cfg.exclude_train, max(b.cfg.beam_width, k))
    uid = b.dataset.user_ids or tuple(str(u) for u in range(b.dataset.n_users))
    iid = b.dataset.item_ids or tuple(str(i) for i in range(b.dataset.n_items))
    lines = [
        f"{uid[u]} {iid[item]} {rank} {score:.6f}"
        for u, r in results.items()
        for rank, (item, score) in enumerate(zip(r.items, r.scores), 1)
    ]
    path = Paths(out).recommendations
    path.write_text("\n".join(lines) + "\n")
    return path


def stage_evaluate(out: str | Path, with_mf: bool = True) -> dict[str, MetricReport]:
    b = load_bundle(out)
    cfg = b.cfg
    reports = {"generative": generative_report(cfg, b.model, b.ctx, b.registry, b.dataset, "test")}
    reports["popularity"] = popularity_recommend(b.dataset, cfg.k)
    if with_mf:
        mf = mf_train(b.dataset, cfg.dim, epochs=cfg.rec_epochs, l2=cfg.l2, batch_size=cfg.batch_size,
                      seed=cfg.seed, patience=cfg.patience, k=cfg.k)
        reports["mf"] = mf_recommend(mf, b.dataset, cfg.k)
    paths = Paths(out)
    paths.metrics.write_text(metric_table(reports, cfg.exclude_train))
    paths.metrics_tsv.write_text(
        f"model\trecall@{cfg.k}\tndcg@{cfg.k}\tusers\n"
        + "".join(f"{n}\t{r.recall:.6f}\t{r.ndcg:.6f}\t{len(r.per_user)}\n" for n, r in reports.items())
    )
    return reports


def metric_table(reports: dict[str, MetricReport], exclude_train: bool = True) -> str:
    k = next(iter(reports.values())).k
    head = f"{'model':<12} {'Recall@' + str(k):>10} {'NDCG@' + str(k):>10} {'users':>6}"
    rows = [f"{n:<12} {r.recall:>10.4f} {r.ndcg:>10.4f} {len(r.per_user):>6}" for n, r in reports.items()]
    note = f"# training items {'excluded from' if exclude_train else 'kept in'} recommendations"
    return "\n".join([head, *rows, note]) + "\n"
