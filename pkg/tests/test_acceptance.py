"""Acceptance gate: one test per criterion, each printing a PASS/FAIL line.

Thresholds are the stated ones; nothing is loosened to make a run green.
"""
import time

import numpy as np
import pytest
import torch

from conftest import record_criterion
from oracles import elementwise_attention_head

from genrec.bench import bench_inference
from genrec.config import Config
from genrec.data import synth_dataset
from genrec.experiments import collision_trend, majority, run_sweep
from genrec.generation import beam_search, encode_user, exhaustive_ranking
from genrec.graph_encoder import GraphEncoder, bpr_loss
from genrec.data import build_graph, from_pairs
from genrec.numeric import finite_difference_grad, gradient_check, relative_error
from genrec.pipeline import fit_assignment, make_registry, new_recommender, training_target_recall
from genrec.rec_id import Vocab, build_registry, group_by_tuple
from genrec.recommender import RecContext, RecSchedule, RelationAwareAttention, Seq2SeqRecommender, sequence_loss, train_recommender
from genrec.rq_vae import RQVAE

D64 = torch.float64


# 1 -------------------------------------------------------------------------


def _rqvae_surrogate_errors(seed):
    q = RQVAE(dim=5, latent=3, levels=3, codebook_size=4, seed=seed, dtype=D64)
    h = torch.randn(6, 5, generator=torch.Generator().manual_seed(seed), dtype=D64)
    with torch.no_grad():
        z0 = q.encode(h)
        out0 = q.quantize(z0)
        picked0 = q.codebooks[torch.arange(3), out0.codes].clone()
        shift0, r0, codes = out0.zhat - z0, out0.residuals.clone(), out0.codes

    def surrogate():
        z = q.enc2(torch.nn.functional.leaky_relu(q.enc1(h), 0.01))
        h_rec = q.dec2(torch.nn.functional.leaky_relu(q.dec1(z + shift0), 0.01))
        b = q.codebooks[torch.arange(3), codes]
        r = torch.stack([z, z - picked0[:, 0], z - picked0[:, 0] - picked0[:, 1]], 1)
        return ((h - h_rec) ** 2).sum() + ((r0 - b) ** 2).sum() + 0.25 * ((r - picked0) ** 2).sum()

    params = dict(q.named_parameters())
    grads = torch.autograd.grad(q(h)[2], list(params.values()))
    return {n: relative_error(g, finite_difference_grad(surrogate, p, 1e-6)) for (n, p), g in zip(params.items(), grads)}


def test_criterion_01_gradient_suite():
    t0 = time.perf_counter()
    worst = {}
    for seed in range(3):
        ds = from_pairs([0, 0, 1, 2, 2, 3], [0, 1, 1, 2, 0, 3], 4, 5, seed=seed)
        feats = np.random.default_rng(seed).normal(size=(5, 4))
        enc = GraphEncoder(4, 5, feats, dim=3, layers=2, seed=seed, dtype=D64).set_graph(build_graph(ds))
        tr = torch.tensor([[0, 0, 3], [1, 1, 4], [2, 2, 1], [3, 3, 0]])
        worst["graph_encoder"] = max(worst.get("graph_encoder", 0), max(
            gradient_check(lambda: bpr_loss(*enc(), tr), dict(enc.named_parameters()), 1e-6).values()))

        worst["rq_vae"] = max(worst.get("rq_vae", 0), max(_rqvae_surrogate_errors(seed).values()))

        g = torch.Generator().manual_seed(seed)
        attn = RelationAwareAttention(8, 2, True, g, D64)
        e = torch.randn(2, 4, 8, generator=g, dtype=D64)
        mask = torch.tensor([[True, True, True, False], [True] * 4])
        h_u = torch.randn(2, 8, generator=g, dtype=D64)
        w = torch.randn(2, 4, 8, generator=g, dtype=D64)
        worst["attention"] = max(worst.get("attention", 0), max(
            gradient_check(lambda: (attn(e, mask, h_u) * w).sum(), dict(attn.named_parameters()), 1e-6).values()))

        model = Seq2SeqRecommender(12, 3, dim=4, heads=1, layers=1, max_len=3, seed=seed, dtype=D64)
        mem = torch.randn(2, 3, 4, generator=g, dtype=D64)
        m = torch.tensor([[True, True, False], [True] * 3])
        prefix, target = torch.tensor([[1, 3, 7], [1, 4, 8]]), torch.tensor([[3, 7, 10], [4, 8, 11]])
        dec_params = {n: p for n, p in model.named_parameters() if n.startswith(("decoder", "tok_emb", "out"))}
        worst["decoder"] = max(worst.get("decoder", 0), max(
            gradient_check(lambda: sequence_loss(model.decode(mem, m, prefix), target), dec_params, 1e-6).values()))
    elapsed = time.perf_counter() - t0
    ok = max(worst.values()) < 1e-4 and elapsed < 60
    record_criterion(1, "gradient suite", ok,
                     " ".join(f"{k}={v:.1e}" for k, v in worst.items()) + f" (<1e-4), {elapsed:.1f}s (<60s)")
    assert ok


# 2 -------------------------------------------------------------------------


def test_criterion_02_quantizer_invariants():
    t0 = time.perf_counter()
    q = RQVAE(dim=16, latent=8, levels=3, codebook_size=128, seed=0, dtype=D64)
    z = torch.randn(1000, 8, generator=torch.Generator().manual_seed(0), dtype=D64)
    out = q.quantize(z)
    # telescoping: z - b1 - b2 - b3 + (b1 + b2 + b3) reassociated in floating point
    tele = (out.zhat + out.final_residual - z).abs().max().item()
    ulp = torch.finfo(D64).eps * z.abs().max().item()
    tele_ok = tele <= 8 * ulp
    # brute-force scan at every level
    books = q.codebooks.detach()
    r, brute_ok = z.clone(), True
    for m in range(3):
        scan = np.empty(1000, dtype=np.int64)
        rn, bn = r.numpy(), books[m].numpy()
        for n in range(1000):
            d = ((rn[n] - bn) ** 2).sum(1)
            scan[n] = int(np.flatnonzero(d == d.min())[0])
        brute_ok &= bool(np.array_equal(scan, out.codes[:, m].numpy()))
        r = r - books[m][torch.as_tensor(scan)]
    h = torch.randn(50, 16, dtype=D64)
    zz = q.encode(h)
    qq = q.quantize(zz)
    st_ok = torch.equal(q.decode(zz, qq.zhat), q.decoder(qq.zhat))
    elapsed = time.perf_counter() - t0
    ok = tele_ok and brute_ok and st_ok and elapsed < 30
    record_criterion(2, "quantizer invariants", ok,
                     f"telescoping max|dz|={tele:.1e} (<= 8 ulp={8 * ulp:.1e}); argmin==scan on 1000x3 at L=128: "
                     f"{brute_ok}; straight-through bit-exact: {st_ok}; {elapsed:.1f}s (<30s)")
    assert ok


# 3 -------------------------------------------------------------------------


def test_criterion_03_fused_equivalence():
    worst_fused = worst_std = 0.0
    for seed in range(100):
        g = torch.Generator().manual_seed(seed)
        attn = RelationAwareAttention(16, 4, True, g, D64)
        e = torch.randn(1, 8, 16, generator=g, dtype=D64)
        n_real = 1 + seed % 8
        mask = torch.zeros(1, 8, dtype=torch.bool)
        mask[0, :n_real] = True
        h_u = torch.randn(1, 16, generator=g, dtype=D64)
        fused = attn.fused_heads(e, mask, h_u)
        uq, uk, uv = attn.user_matrices(h_u)
        for a in range(4):
            sl = slice(4 * a, 4 * a + 4)
            ref = elementwise_attention_head(e[0], mask[0], attn.w_q[:, sl], attn.w_k[:, sl], attn.w_v[:, sl],
                                             uq[0][:, sl], uk[0][:, sl], uv[0][:, sl])
            worst_fused = max(worst_fused, (fused[0, a] - ref).abs().max().item())
        with torch.no_grad():
            attn.scalar.weight.zero_()
            attn.scalar.bias.zero_()
        ref_layer = torch.nn.MultiheadAttention(16, 4, batch_first=True, dtype=D64)
        with torch.no_grad():
            ref_layer.in_proj_weight.copy_(torch.cat([attn.w_q.T, attn.w_k.T, attn.w_v.T]))
            ref_layer.in_proj_bias.zero_()
            ref_layer.out_proj.weight.copy_(attn.w_o.T)
            ref_layer.out_proj.bias.copy_(attn.b_o)
            expected, _ = ref_layer(e, e, e, key_padding_mask=~mask)
            got = attn(e, mask, h_u)
        worst_std = max(worst_std, (got - expected)[mask].abs().max().item())
    ok = worst_fused < 1e-6 and worst_std < 1e-6
    record_criterion(3, "fused vs elementwise attention", ok,
                     f"fused max diff {worst_fused:.1e}, zero-user vs standard MHA {worst_std:.1e} (both <1e-6), 100 instances N=8 D=16")
    assert ok


# 4 -------------------------------------------------------------------------


def test_criterion_04_rec_id_uniqueness_and_capacity():
    rng = np.random.default_rng(0)
    n = 10_000
    codes = rng.integers(0, 16, (n, 3))
    reg = build_registry(codes, rng.integers(0, 50, n), 16, max_group=256)
    bijective = len({reg.rec_id(i) for i in range(n)}) == n and all(
        reg.item_for_rec_id(reg.rec_id(i)) == i for i in range(n))
    groups = group_by_tuple(codes)
    tokens_ok = all(sorted(reg.rec_ids[items, -1].tolist()) == list(range(1, len(items) + 1)) for items in groups.values())
    vocab = Vocab(3, 4)
    full = np.array(np.meshgrid(*[range(4)] * 3, indexing="ij")).reshape(3, -1).T
    small = build_registry(full, np.zeros(len(full), int), 4, max_group=1)
    capacity = int(np.prod([len(vocab.position_range(p)) for p in range(3)]))
    enumerated = len({small.item_tokens(i)[:3] for i in range(small.n_items)})
    ok = bijective and tokens_ok and capacity == enumerated == 64
    record_criterion(4, "Rec-ID uniqueness and capacity", ok,
                     f"bijection over {n} items: {bijective}; capacity L^(M-1)={capacity}, enumerated {enumerated} (=64); "
                     f"popularity tokens exactly 1..|g| in {len(groups)} groups: {tokens_ok}")
    assert ok


# 5 -------------------------------------------------------------------------


def _tiny_trained(seed):
    rng = np.random.default_rng(seed)
    n_items = int(rng.integers(10, 51))
    ds, _ = synth_dataset(16, n_items, 0.25, dims=(4, 0, 4), seed=seed)
    reg = build_registry(rng.integers(0, 4, (n_items, 2)), ds.popularity, 4, max_group=n_items)
    ctx = RecContext.build(rng.normal(size=(n_items, 8)), rng.normal(size=(16, 8)), ds.train_items, max_len=8)
    model = Seq2SeqRecommender(reg.vocab.size, 3, dim=8, heads=2, layers=1, max_len=8, seed=seed)
    train_recommender(model, ctx, reg, RecSchedule(epochs=5, batch_size=32, lr=0.01, seed=seed))
    return model, ctx, reg


def test_criterion_05_beam_search_exactness():
    exact, valid, total = 0, 0, 0
    for seed in range(20):
        model, ctx, reg = _tiny_trained(seed)
        memory, mask = encode_user(model, ctx, 0)
        k = min(10, reg.n_items)
        got = beam_search(model, memory, mask, reg, k, beam_width=reg.n_items).items
        exact += got == exhaustive_ranking(model, memory, mask, reg, k)
        for width in (1, 2, 5, reg.n_items):
            res = beam_search(model, memory, mask, reg, min(5, reg.n_items), beam_width=width)
            for toks in res.tokens:
                total += 1
                valid += reg.count_under(toks) == 1
    ok = exact == 20 and valid == total
    record_criterion(5, "beam search exactness", ok,
                     f"{exact}/20 trained models match exhaustive ranking; {valid}/{total} emitted IDs valid")
    assert ok


# 6 -------------------------------------------------------------------------


@pytest.mark.slow
def test_criterion_06_overfit_sanity():
    t0 = time.perf_counter()
    cfg = Config(synth_users=64, synth_items=128, synth_density=0.1, optimizer="adam", codebook_size=16,
                 joint_epochs=100, eval_every=25, patience=10_000, quantizer_refine_epochs=50, batch_size=128, seed=0)
    ds, bank = synth_dataset(64, 128, 0.1, cfg.dims(), 0, cfg.synth_rank, cfg.synth_noise)
    a = fit_assignment(cfg, ds, bank)
    reg = make_registry(cfg, a.codes, ds)
    ctx = RecContext.build(a.item_reps, a.user_reps, ds.train_items, cfg.max_len)
    model = new_recommender(cfg, reg)
    sched = RecSchedule(epochs=500, batch_size=128, lr=1e-3, l2=0.0, eval_every=25, patience=10_000, stop_at=0.9)
    res = train_recommender(model, ctx, reg, sched, lambda m: training_target_recall(m, ctx, reg, 10))
    best = res.best_recall
    elapsed = time.perf_counter() - t0
    ok = best >= 0.9 and res.best_epoch <= 500 and elapsed < 15 * 60
    record_criterion(6, "overfit sanity", ok,
                     f"training-target Recall@10 {best:.3f} (>=0.9) at epoch {res.best_epoch} (<=500), {elapsed:.0f}s (<900s)")
    assert ok


# 7, 8, 10 ------------------------------------------------------------------

SIGNAL_CFG = Config(synth_users=400, synth_items=200, synth_density=0.05, optimizer="adam", codebook_size=16,
                    batch_size=128, joint_epochs=100, quantizer_refine_epochs=50, rec_epochs=60, eval_every=4,
                    patience=16)


@pytest.fixture(scope="module")
def sweeps():
    # the last token only matters inside collision groups, so the token sweep
    # uses a small codebook where most items share their semantic tuple
    return {"pos": run_sweep(SIGNAL_CFG, "pos"), "token": run_sweep(SIGNAL_CFG.replace(codebook_size=4), "token")}


@pytest.mark.slow
def test_criterion_07_signal_recovery(sweeps):
    rows = [r for r in sweeps["token"]]
    by = {(r.seed, r.variant): r for r in rows}
    seeds = sorted({r.seed for r in rows})
    lift = {s: by[(s, "popularity")].recall / by[(s, "popularity")].popularity_recall - 1 for s in seeds}
    beats = sum(v >= 0.2 for v in lift.values())
    wins, n = majority(rows, "popularity", "random")
    ok = beats * 2 > len(seeds) and wins * 2 > n
    record_criterion(7, "signal recovery", ok,
                     "relative lift over popularity " + " ".join(f"s{s}={v:+.0%}" for s, v in lift.items())
                     + f" (>=+20% in {beats}/{len(seeds)}); popularity-token >= random-token in {wins}/{n} seeds; recall "
                     + " ".join(f"s{s}:{by[(s, 'popularity')].recall:.3f}/{by[(s, 'random')].recall:.3f}" for s in seeds))
    assert ok


@pytest.mark.slow
def test_criterion_08_ablation_direction(sweeps):
    rows = sweeps["pos"]
    by = {(r.seed, r.variant): r.recall for r in rows}
    seeds = sorted({r.seed for r in rows})
    chain = sum(by[(s, "relation")] >= by[(s, "sinusoid")] >= by[(s, "none")] for s in seeds)
    w1, _ = majority(rows, "relation", "sinusoid")
    w2, _ = majority(rows, "sinusoid", "none")
    ok = chain * 2 > len(seeds)
    record_criterion(8, "ablation direction", ok,
                     f"relation>=sinusoid>=none in {chain}/{len(seeds)} seeds (relation>=sinusoid {w1}, sinusoid>=none {w2}); "
                     + " ".join(f"s{s}:{by[(s, 'relation')]:.3f}/{by[(s, 'sinusoid')]:.3f}/{by[(s, 'none')]:.3f}" for s in seeds))
    assert ok


@pytest.mark.slow
def test_criterion_10_collision_trend(sweeps):
    cfg = Config(synth_users=500, synth_items=4096, synth_density=0.004, optimizer="adam", codebook_size=16,
                 batch_size=256, joint_epochs=30, quantizer_refine_epochs=30, eval_every=5, patience=10, seed=0)
    ds, bank = synth_dataset(cfg.synth_users, cfg.synth_items, cfg.synth_density, cfg.dims(), 0, cfg.synth_rank, cfg.synth_noise)
    a = fit_assignment(cfg, ds, bank)
    trend = collision_trend(a.quantizer, a.item_reps, seed=0)
    rates = [r for _, _, r in trend]
    monotone = all(b >= a_ for a_, b in zip(rates, rates[1:]))
    tok = {(r.seed, r.variant): r.recall for r in sweeps["token"]}
    seeds = sorted({s for s, _ in tok})
    record_criterion(10, "collision trend", monotone,
                     "rates " + " ".join(f"{n}:{r:.3f}" for _, n, r in trend) + " non-decreasing: " + str(monotone)
                     + f"; popularity vs random token recall mean {np.mean([tok[(s, 'popularity')] for s in seeds]):.3f}"
                     + f" / {np.mean([tok[(s, 'random')] for s in seeds]):.3f}")
    assert monotone


# 9 -------------------------------------------------------------------------


@pytest.mark.slow
def test_criterion_09_efficiency_trend():
    rep = bench_inference(base_items=2**20, scales=(1 / 16, 1 / 8, 1 / 4, 1 / 2, 1), repetitions=5, users=50)
    k, h, m, d, l = 10, 2, 4, 64, 128
    gen_cost, sem_cost = k * h * (m**3 + m**2 * d), m * k * l
    mf_growth, gen_spread, cross = rep.growth("mf"), rep.spread("generative"), rep.crossover()
    ok = mf_growth >= 8 and gen_spread < 1.5 and cross is not None
    record_criterion(9, "efficiency trend", ok,
                     f"MF growth x16 catalog = {mf_growth:.1f}x (>=8); generative spread {gen_spread:.2f}x (<1.5); "
                     f"crossover at {cross} items; KH(M^3+M^2D)={gen_cost} > MKL={sem_cost}; I up to {2**20}")
    print(rep.to_text())
    assert ok
