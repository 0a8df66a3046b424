import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from genrec.data import synth_dataset
from genrec.graph_encoder import GraphEncoder
from genrec.numeric import finite_difference_grad, relative_error
from genrec.rq_vae import RQVAE, JointSchedule, train_joint


def brute_force_codes(z, books):
    codes = []
    r = z.clone()
    for book in books:
        best = []
        for row in r:
            d = [float(((row - b) ** 2).sum()) for b in book]
            best.append(min(range(len(d)), key=lambda j: (d[j], j)))
        c = torch.tensor(best)
        codes.append(c)
        r = r - book[c]
    return torch.stack(codes, 1)


def test_loss_frozen_example():
    # r = 1, b = 0, h = h_rec: 1 + 0.25 * 1
    q = RQVAE(dim=2, latent=1, levels=1, codebook_size=2, dtype=torch.float64)
    with torch.no_grad():
        q.codebooks.zero_()
    h = torch.zeros(1, 2, dtype=torch.float64)
    z = torch.ones(1, 1, dtype=torch.float64)
    qz = q.quantize(z)
    assert q.loss(h, h, qz).item() == pytest.approx(1.25)


def test_argmin_tie_lowest_index():
    q = RQVAE(dim=2, latent=1, levels=1, codebook_size=2, dtype=torch.float64)
    with torch.no_grad():
        q.codebooks.copy_(torch.tensor([[[1.0], [-1.0]]]))
    assert q.quantize(torch.zeros(1, 1, dtype=torch.float64)).codes.item() == 0


def test_exact_codeword_gives_zero_residual():
    q = RQVAE(dim=4, latent=3, levels=3, codebook_size=8, dtype=torch.float64)
    z = q.codebooks[0, 5].detach()[None] + 0.0
    with torch.no_grad():
        q.codebooks[1:] = 0.0
    out = q.quantize(z)
    assert out.codes[0, 0].item() == 5
    assert torch.equal(out.residuals[0, 1], torch.zeros(3, dtype=torch.float64))


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 4), st.sampled_from([2, 4, 16]))
def test_telescoping_and_greedy_selection(seed, levels, size):
    q = RQVAE(dim=6, latent=4, levels=levels, codebook_size=size, seed=seed, dtype=torch.float64)
    z = torch.randn(7, 4, generator=torch.Generator().manual_seed(seed), dtype=torch.float64)
    out = q.quantize(z)
    assert torch.allclose(out.zhat + out.final_residual, z, rtol=0, atol=1e-12)
    assert torch.equal(out.codes, brute_force_codes(z, q.codebooks.detach()))


def test_straight_through_forward_bit_exact():
    q = RQVAE(dim=8, latent=4, levels=3, codebook_size=8, seed=2)
    h = torch.randn(5, 8)
    z = q.encode(h)
    out = q.quantize(z)
    assert torch.equal(q.decode(z, out.zhat), q.decoder(out.zhat))


def test_gradients_match_finite_differences():
    """Autograd of the stop-gradient loss equals finite differences of its frozen-constant surrogate.

    Every stop-gradient operand is evaluated once at the current parameters and held
    fixed, giving a smooth function whose true gradient is the training gradient.
    """
    q = RQVAE(dim=5, latent=3, levels=2, codebook_size=4, seed=1, dtype=torch.float64)
    h = torch.randn(6, 5, generator=torch.Generator().manual_seed(3), dtype=torch.float64)
    params = dict(q.named_parameters())
    with torch.no_grad():
        z0 = q.encode(h)
        out0 = q.quantize(z0)
        codes = out0.codes
        picked0 = q.codebooks[torch.arange(2), codes].clone()  # (n, levels, latent)
        shift0 = out0.zhat - z0
        r0 = out0.residuals.clone()

    def surrogate():
        z = q.enc2(torch.nn.functional.leaky_relu(q.enc1(h), 0.01))
        h_rec = q.dec2(torch.nn.functional.leaky_relu(q.dec1(z + shift0), 0.01))
        b = q.codebooks[torch.arange(2), codes]
        r = torch.stack([z, z - picked0[:, 0]], 1)
        return ((h - h_rec) ** 2).sum() + ((r0 - b) ** 2).sum() + 0.25 * ((r - picked0) ** 2).sum()

    _, _, loss = q(h)
    grads = torch.autograd.grad(loss, list(params.values()))
    assert loss.item() == pytest.approx(surrogate().item(), rel=1e-12)
    for (name, p), g in zip(params.items(), grads):
        fd = finite_difference_grad(surrogate, p, eps=1e-6)
        assert relative_error(g, fd) < 1e-4, name


def test_encoder_gets_gradient_through_straight_through():
    q = RQVAE(dim=4, latent=2, levels=2, codebook_size=4, dtype=torch.float64)
    h = torch.randn(3, 4, dtype=torch.float64)
    h_rec, _, _ = q(h)
    ((h - h_rec) ** 2).sum().backward()
    assert q.enc1.weight.grad.abs().sum() > 0
    assert q.codebooks.grad is None or q.codebooks.grad.abs().sum() == 0


def test_reseed_dead_codes():
    q = RQVAE(dim=4, latent=2, levels=2, codebook_size=4)
    used = torch.tensor([[True, False, True, True], [True, True, True, True]])
    residuals = torch.randn(10, 2, 2)
    assert q.reseed_dead(used, residuals, torch.Generator().manual_seed(0)) == 1
    assert any(torch.equal(q.codebooks[0, 1], residuals[j, 0]) for j in range(10))


@pytest.fixture(scope="module")
def joint_run():
    ds, bank = synth_dataset(40, 50, 0.1, dims=(8, 4, 4), seed=0)
    enc = GraphEncoder(ds.n_users, ds.n_items, bank.concatenated(), dim=8, seed=0)
    q = RQVAE(dim=8, latent=4, levels=3, codebook_size=4, seed=1)
    sched = JointSchedule(epochs=3, batch_size=64, item_batch_size=16, patience=100)
    return train_joint(ds, enc, q, sched, record_steps=True), enc, q


def test_joint_schedule_alternates(joint_run):
    res, _, _ = joint_run
    assert res.steps[0::2] == ["bpr"] * (len(res.steps) // 2)
    assert res.steps[1::2] == ["rqvae"] * (len(res.steps) // 2)
    assert len(res.history) == 3 and all(np.isfinite(r["bpr"]) for r in res.history)


def test_joint_codes_shape(joint_run):
    _, enc, q = joint_run
    with torch.no_grad():
        codes = q.codes_for(enc()[1])
    assert codes.shape == (50, 3) and codes.max() < 4
