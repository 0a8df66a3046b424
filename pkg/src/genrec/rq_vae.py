"""Residual-quantized autoencoder over item representations, and joint training with the graph encoder."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import Tensor, nn

from .data import InteractionDataset, build_graph
from .graph_encoder import GraphEncoder, bpr_loss, sample_triples
from .mf import eval_embeddings
from .numeric import leaky_relu, make_generator, make_optimizer, sq_l2_dist, straight_through, xavier_init

log = logging.getLogger(__name__)


class NumericError(RuntimeError):
    """Training produced a non-finite loss."""


def _linear(d_in: int, d_out: int, g: torch.Generator, dtype) -> nn.Linear:
    layer = nn.Linear(d_in, d_out, dtype=dtype)
    with torch.no_grad():
        layer.weight.copy_(xavier_init((d_out, d_in), g, dtype))
        layer.bias.zero_()
    return layer


@dataclass
class Quantized:
    codes: Tensor  # (n, levels)
    residuals: Tensor  # (n, levels, latent): r_1 .. r_{M-1}
    final_residual: Tensor  # (n, latent)
    zhat: Tensor  # (n, latent)


class RQVAE(nn.Module):
    def __init__(
        self,
        dim: int = 64,
        latent: int = 32,
        levels: int = 3,
        codebook_size: int = 128,
        beta: float = 0.25,
        seed: int = 0,
        dtype: torch.dtype = torch.float32,
    ):
        super().__init__()
        g = make_generator(seed)
        self.dim, self.latent, self.levels, self.codebook_size, self.beta = dim, latent, levels, codebook_size, beta
        self.enc1 = _linear(dim, dim, g, dtype)
        self.enc2 = _linear(dim, latent, g, dtype)
        self.dec1 = _linear(latent, dim, g, dtype)
        self.dec2 = _linear(dim, dim, g, dtype)
        self.codebooks = nn.Parameter(
            torch.stack([xavier_init((codebook_size, latent), g, dtype) for _ in range(levels)])
        )

    def encode(self, h: Tensor) -> Tensor:
        return self.enc2(leaky_relu(self.enc1(h)))

    def decoder(self, x: Tensor) -> Tensor:
        return self.dec2(leaky_relu(self.dec1(x)))

    def quantize(self, z: Tensor) -> Quantized:
        """Greedy residual quantization; argmin ties resolve to the lowest index."""
        books = self.codebooks.detach()
        r = z
        codes, residuals, picked = [], [], []
        for m in range(self.levels):
            residuals.append(r)
            c = torch.argmin(sq_l2_dist(r.detach(), books[m]), dim=-1)
            b = books[m][c]
            codes.append(c)
            picked.append(b)
            r = r - b
        zhat = picked[0]
        for b in picked[1:]:
            zhat = zhat + b
        return Quantized(torch.stack(codes, 1), torch.stack(residuals, 1), r, zhat)

    def decode(self, z: Tensor, zhat: Tensor) -> Tensor:
        return self.decoder(straight_through(z, zhat))

    def loss(self, h: Tensor, h_rec: Tensor, q: Quantized, reduction: str = "sum") -> Tensor:
        """Reconstruction + codebook + beta * commitment, summed over levels."""
        idx = torch.arange(self.levels)
        b = self.codebooks[idx, q.codes]  # (n, levels, latent)
        r = q.residuals
        per_item = ((h - h_rec) ** 2).sum(-1)
        per_item = per_item + ((r.detach() - b) ** 2).sum((-1, -2))
        per_item = per_item + self.beta * ((r - b.detach()) ** 2).sum((-1, -2))
        return per_item.sum() if reduction == "sum" else per_item.mean()

    def forward(self, h: Tensor, reduction: str = "sum") -> tuple[Tensor, Quantized, Tensor]:
        z = self.encode(h)
        q = self.quantize(z)
        h_rec = self.decode(z, q.zhat)
        return h_rec, q, self.loss(h, h_rec, q, reduction)

    @torch.no_grad()
    def codes_for(self, h: Tensor) -> np.ndarray:
        return self.quantize(self.encode(h)).codes.numpy()

    @torch.no_grad()
    def reseed_dead(self, used: Tensor, residuals: Tensor, generator: torch.Generator) -> int:
        """Move never-selected entries onto randomly drawn residuals of the same level."""
        n = residuals.shape[0]
        count = 0
        for m in range(self.levels):
            dead = (~used[m]).nonzero().flatten()
            if len(dead) == 0 or n == 0:
                continue
            pick = torch.randint(0, n, (len(dead),), generator=generator)
            self.codebooks.data[m, dead] = residuals[pick, m]
            count += len(dead)
        return count


@dataclass
class JointSchedule:
    epochs: int = 200
    batch_size: int = 1000
    item_batch_size: int = 256
    lr: float = 1e-3
    l2: float = 1e-5
    optimizer: str = "adam"
    patience: int = 20
    eval_every: int = 1
    k: int = 10
    reseed_dead: bool = True
    freeze_codebooks: bool = False
    refine_epochs: int = 0
    seed: int = 0


@dataclass
class JointResult:
    history: list[dict] = field(default_factory=list)
    best_epoch: int = 0
    best_recall: float = 0.0
    steps: list[str] = field(default_factory=list)


def _check(loss: Tensor, what: str, epoch: int) -> None:
    if not torch.isfinite(loss):
        raise NumericError(f"{what} loss became {loss.item()} at epoch {epoch}")


def train_joint(
    dataset: InteractionDataset,
    encoder: GraphEncoder,
    quantizer: RQVAE,
    schedule: JointSchedule,
    record_steps: bool = False,
) -> JointResult:
    """Alternate BPR steps (graph encoder) and RQ-VAE steps (quantizer) per mini-batch.

    Early-stops on validation Recall@k of the encoder's inner-product ranking and
    restores the best snapshot of both modules.
    """
    if not encoder.has_graph:
        encoder.set_graph(build_graph(dataset))
    rng = np.random.default_rng(schedule.seed)
    gen = make_generator(schedule.seed)
    opt_g = make_optimizer(encoder.parameters(), schedule.optimizer, schedule.lr, schedule.l2)
    qparams = [p for n, p in quantizer.named_parameters() if not (schedule.freeze_codebooks and n == "codebooks")]
    opt_q = make_optimizer(qparams, schedule.optimizer, schedule.lr, schedule.l2)
    result = JointResult()
    best_state, stale = None, 0
    has_valid = any(len(v) for v in dataset.valid_items)
    for epoch in range(1, schedule.epochs + 1):
        triples = sample_triples(dataset, rng)
        triples = torch.as_tensor(triples[rng.permutation(len(triples))])
        n_bpr = math.ceil(len(triples) / schedule.batch_size)
        item_order = torch.as_tensor(rng.permutation(dataset.n_items))
        n_item_batches = math.ceil(dataset.n_items / schedule.item_batch_size)
        n_steps = max(n_bpr, n_item_batches)
        used = torch.zeros(quantizer.levels, quantizer.codebook_size, dtype=torch.bool)
        bpr_total = rq_total = 0.0
        for step in range(n_steps):
            b = step % n_bpr
            opt_g.zero_grad()
            h_u, h_i = encoder()
            loss_b = bpr_loss(h_u, h_i, triples[b * schedule.batch_size:(b + 1) * schedule.batch_size], "mean")
            _check(loss_b, "bpr", epoch)
            loss_b.backward()
            opt_g.step()
            bpr_total += loss_b.item()

            ib = step % n_item_batches
            batch = item_order[ib * schedule.item_batch_size:(ib + 1) * schedule.item_batch_size]
            with torch.no_grad():
                h_items = encoder()[1][batch]
            opt_q.zero_grad()
            _, q, loss_q = quantizer(h_items, reduction="mean")
            _check(loss_q, "rqvae", epoch)
            loss_q.backward()
            opt_q.step()
            rq_total += loss_q.item()
            used[torch.arange(quantizer.levels)[:, None], q.codes.T] = True
            if record_steps:
                result.steps.extend(["bpr", "rqvae"])

        with torch.no_grad():
            h_u, h_i = encoder()
            all_q = quantizer.quantize(quantizer.encode(h_i))
        if schedule.reseed_dead and not schedule.freeze_codebooks:
            quantizer.reseed_dead(used, all_q.residuals, gen)
        row = {"epoch": epoch, "bpr": bpr_total / n_steps, "rqvae": rq_total / n_steps}
        if has_valid and epoch % schedule.eval_every == 0:
            rec = eval_embeddings(h_u.numpy(), h_i.numpy(), dataset, "valid", schedule.k).recall
            row["valid_recall"] = rec
            if rec > result.best_recall or best_state is None:
                result.best_recall, result.best_epoch, stale = rec, epoch, 0
                best_state = (
                    {k: v.clone() for k, v in encoder.state_dict().items()},
                    {k: v.clone() for k, v in quantizer.state_dict().items()},
                )
            else:
                stale += schedule.eval_every
        result.history.append(row)
        log.info("joint epoch %d bpr %.4f rqvae %.4f valid %s", epoch, row["bpr"], row["rqvae"], row.get("valid_recall"))
        if has_valid and stale >= schedule.patience:
            break
    if best_state is not None:
        encoder.load_state_dict(best_state[0])
        quantizer.load_state_dict(best_state[1])
    if schedule.refine_epochs:
        with torch.no_grad():
            h_i = encoder()[1]
        refine_quantizer(quantizer, h_i, schedule, opt_q, gen, rng, result)
    return result


def refine_quantizer(quantizer, h_i, schedule, opt, gen, rng, result) -> None:
    """Quantizer-only epochs on frozen item representations."""
    for epoch in range(1, schedule.refine_epochs + 1):
        order = torch.as_tensor(rng.permutation(len(h_i)))
        used = torch.zeros(quantizer.levels, quantizer.codebook_size, dtype=torch.bool)
        total, n = 0.0, 0
        for start in range(0, len(order), schedule.item_batch_size):
            opt.zero_grad()
            _, q, loss = quantizer(h_i[order[start:start + schedule.item_batch_size]], reduction="mean")
            _check(loss, "rqvae", epoch)
            loss.backward()
            opt.step()
            used[torch.arange(quantizer.levels)[:, None], q.codes.T] = True
            total, n = total + loss.item(), n + 1
        if schedule.reseed_dead and not schedule.freeze_codebooks and epoch < schedule.refine_epochs:
            with torch.no_grad():
                quantizer.reseed_dead(used, quantizer.quantize(quantizer.encode(h_i)).residuals, gen)
        result.history.append({"epoch": len(result.history) + 1, "rqvae": total / n, "phase": "refine"})


@torch.no_grad()
def final_representations(encoder: GraphEncoder) -> tuple[np.ndarray, np.ndarray]:
    h_u, h_i = encoder()
    return h_u.numpy(), h_i.numpy()
