import numpy as np
import pytest
import torch

from genrec.generation import beam_search, exhaustive_ranking, score_item, score_items
from genrec.rec_id import build_registry
from genrec.recommender import Seq2SeqRecommender


def setup(n_items=20, size=4, seed=0):
    rng = np.random.default_rng(seed)
    reg = build_registry(rng.integers(0, size, (n_items, 2)), rng.integers(0, 9, n_items), size, max_group=n_items)
    model = Seq2SeqRecommender(reg.vocab.size, 3, dim=8, heads=2, layers=1, seed=seed, dtype=torch.float64)
    with torch.no_grad():  # sharpen the output distribution so beams actually compete
        model.out.weight.mul_(4)
    memory = torch.randn(1, 3, 8, generator=torch.Generator().manual_seed(seed), dtype=torch.float64)
    mask = torch.ones(1, 3, dtype=torch.bool)
    return model, memory, mask, reg


@pytest.mark.parametrize("seed", range(5))
def test_wide_beam_equals_exhaustive(seed):
    model, memory, mask, reg = setup(seed=seed)
    got = beam_search(model, memory, mask, reg, k=5, beam_width=reg.n_items)
    assert got.items == exhaustive_ranking(model, memory, mask, reg, 5)
    scores = score_items(model, memory, mask, reg)
    assert np.allclose(got.scores, scores[got.items], atol=1e-12)


@pytest.mark.parametrize("width", [1, 2, 3, 7])
def test_all_outputs_valid(width):
    model, memory, mask, reg = setup(seed=width)
    res = beam_search(model, memory, mask, reg, k=min(width, 5), beam_width=width, keep_trace=True)
    assert len(set(res.items)) == len(res.items)
    for toks in res.tokens:
        assert reg.item_for_tokens(toks) in res.items
    for step in res.trace:
        for beam in step:
            assert reg.count_under(beam.tokens) > 0


def test_beam_width_at_least_k():
    model, memory, mask, reg = setup()
    assert len(beam_search(model, memory, mask, reg, k=6, beam_width=1).items) == 6


def test_exclusions_backfilled():
    model, memory, mask, reg = setup(seed=3)
    top = beam_search(model, memory, mask, reg, k=4, beam_width=reg.n_items).items
    res = beam_search(model, memory, mask, reg, k=4, exclusions=top[:2], beam_width=reg.n_items)
    assert not set(res.items) & set(top[:2])
    assert res.items == exhaustive_ranking(model, memory, mask, reg, 4, exclusions=top[:2])
    assert len(res.items) == 4


def test_exhausted_catalog_flag():
    model, memory, mask, reg = setup(n_items=6)
    res = beam_search(model, memory, mask, reg, k=5, exclusions=[0, 1, 2])
    assert res.exhausted and len(res.items) == 3


def test_score_matches_sum_of_step_logprobs():
    model, memory, mask, reg = setup()
    toks = reg.item_tokens(4)
    prefix = torch.tensor([[1, *toks[:-1]]])
    logp = torch.log_softmax(model.decode(memory, mask, prefix).double(), -1)[0]
    expected = sum(float(logp[t, tok]) for t, tok in enumerate(toks))
    assert score_item(model, memory, mask, reg, reg.rec_id(4)) == pytest.approx(expected, abs=1e-12)


def test_invalid_k():
    model, memory, mask, reg = setup()
    with pytest.raises(ValueError):
        beam_search(model, memory, mask, reg, k=0)
