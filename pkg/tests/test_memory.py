import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from cmml.memory import MemoryBank, MemoryEnrichment, batch_similarity_loss, retrieve, similarity_loss

D = torch.float64


def bank_with(rows, decay=0.2):
    rows = torch.as_tensor(np.asarray(rows, dtype=np.float64))
    b = MemoryBank(rows.shape[0], rows.shape[1], decay)
    with torch.no_grad():
        b.slots.copy_(rows)
    return b


def test_update_fixed_point():
    b = bank_with([[1.0, 2.0], [-3.0, 0.5]])
    before = b.slots.clone()
    b.update(torch.tensor([[1.0, 2.0]], dtype=D))
    assert torch.equal(b.slots, before)


def test_update_arithmetic():
    b = bank_with([[0.0, 0.0], [-1.0, 0.0]])
    touched = b.update(torch.tensor([[1.0, 0.0]], dtype=D))
    # cos with the zero slot is 0 > -1, so slot 0 is the argmax
    assert touched == [0]
    assert torch.allclose(b.slots[0], torch.tensor([0.2, 0.0], dtype=D), atol=1e-15)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(1, 40), st.floats(0.01, 1.0))
def test_repeated_update_geometric_contraction(seed, K, lam):
    g = np.random.default_rng(seed)
    b = bank_with(g.standard_normal((1, 5)), decay=lam)
    tok = torch.tensor(g.standard_normal((1, 5)), dtype=D)
    d0 = float(torch.linalg.vector_norm(b.slots[0] - tok[0]))
    for _ in range(K):
        b.update(tok)
    dK = float(torch.linalg.vector_norm(b.slots[0] - tok[0]))
    assert dK <= (1 - lam) ** K * d0 + 1e-9


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_update_touches_one_slot_per_token(seed):
    g = np.random.default_rng(seed)
    b = bank_with(g.standard_normal((6, 4)))
    before = b.slots.clone()
    touched = b.update(torch.tensor(g.standard_normal((1, 4)), dtype=D))
    changed = torch.nonzero((b.slots != before).any(dim=1)).flatten().tolist()
    assert len(touched) == 1 and set(changed) <= set(touched)


def test_update_sequential_later_tokens_see_earlier_writes():
    b = bank_with([[1.0, 0.0], [0.0, 1.0]], decay=0.5)
    b.update(torch.tensor([[0.0, 1.0], [1.0, 1.0]], dtype=D))
    # reference loop written independently
    bank = np.array([[1.0, 0.0], [0.0, 1.0]])
    for tok in np.array([[0.0, 1.0], [1.0, 1.0]]):
        cs = bank @ tok / (np.linalg.norm(bank, axis=1) * np.linalg.norm(tok) + 1e-8)
        k = int(np.argmax(cs))
        bank[k] = 0.5 * bank[k] + 0.5 * tok
    np.testing.assert_allclose(b.slots.numpy(), bank, atol=1e-15)


def test_frozen_bank_is_bitwise_constant():
    b = bank_with(np.random.default_rng(0).standard_normal((4, 3)))
    b.freeze()
    before = b.slots.clone()
    assert b.update(torch.ones(5, 3, dtype=D)) == []
    assert torch.equal(b.slots, before) and b.frozen


def test_identical_rows_retrieve_that_row():
    v = np.array([0.3, -1.0, 2.0])
    b = bank_with(np.tile(v, (5, 1)))
    Z = torch.tensor(np.random.default_rng(1).standard_normal((4, 3)), dtype=D)
    np.testing.assert_allclose(b.read(Z).numpy(), np.tile(v, (4, 1)), atol=1e-15)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(1, 9))
def test_retrieval_weights_distribution_and_convex_hull(seed, n_slots):
    g = np.random.default_rng(seed)
    b = bank_with(g.standard_normal((n_slots, 4)) * g.uniform(0.1, 10))
    Z = torch.tensor(g.standard_normal((2, 3, 4)), dtype=D)
    w = b.retrieval_weights(Z)
    assert (w >= 0).all()
    assert torch.allclose(w.sum(-1), torch.ones((), dtype=D), atol=1e-9)
    G = b.read(Z)
    lo, hi = b.slots.min(dim=0).values, b.slots.max(dim=0).values
    assert (G >= lo - 1e-12).all() and (G <= hi + 1e-12).all()


def test_two_slot_hand_case():
    # unit query; slots chosen to have cosines 0.9 and 0.1 with it
    q = np.array([1.0, 0.0])
    s0 = np.array([0.9, math.sqrt(1 - 0.81)])
    s1 = 2.0 * np.array([0.1, -math.sqrt(1 - 0.01)])
    b = bank_with([s0, s1])
    w = b.retrieval_weights(torch.tensor(q[None], dtype=D))[0].numpy()
    e = np.exp([0.9, 0.1])
    np.testing.assert_allclose(w, e / e.sum(), atol=1e-6)
    np.testing.assert_allclose(w, [0.690, 0.310], atol=1e-3)
    G = b.read(torch.tensor(q[None], dtype=D))[0].numpy()
    np.testing.assert_allclose(G, w[0] * s0 + w[1] * s1, atol=1e-6)


def test_retrieve_is_residual_enrichment():
    torch.manual_seed(0)
    b = bank_with(np.random.default_rng(2).standard_normal((4, 8)))
    enrich = MemoryEnrichment(8, heads=4)
    Z = torch.randn(3, 8, dtype=D)
    out = retrieve(b, Z, enrich)
    assert torch.allclose(out, Z + enrich.attn(Z, b.read(Z)), atol=1e-15)


def test_no_gradient_reaches_bank():
    b = bank_with(np.random.default_rng(3).standard_normal((4, 8)))
    enrich = MemoryEnrichment(8, heads=4)
    Z = torch.randn(3, 8, dtype=D, requires_grad=True)
    retrieve(b, Z, enrich).sum().backward()
    assert not b.slots.requires_grad and b.slots.grad is None
    assert [n for n, _ in b.named_parameters()] == []


def test_similarity_loss_examples():
    x = torch.tensor([[1.0, 2.0], [3.0, -1.0]], dtype=D)
    assert float(similarity_loss([x], [x])) == pytest.approx(0.0, abs=1e-8)
    orth = torch.stack([torch.tensor([-2.0, 1.0]), torch.tensor([1.0, 3.0])]).to(D)
    assert float(similarity_loss([x], [orth])) == pytest.approx(1.0, abs=1e-12)
    assert float(similarity_loss([x], [-x])) == pytest.approx(2.0, abs=1e-8)
    assert float(similarity_loss([], [])) == 0.0


def test_similarity_loss_mean_over_missing_modalities():
    x = torch.tensor([[1.0, 0.0]], dtype=D)
    val = similarity_loss([x, x], [x, -x])
    assert float(val) == pytest.approx(1.0, abs=1e-8)


def test_batch_similarity_loss_pairs():
    x = torch.tensor([[[1.0, 0.0]], [[0.0, 1.0]]], dtype=D)
    a = batch_similarity_loss([x, x[:1]], [x, -x[:1]])
    # three (sample, modality) pairs with losses 0, 0, 2
    assert float(a) == pytest.approx(2 / 3, abs=1e-8)
    assert float(batch_similarity_loss([x[:0]], [x[:0]])) == 0.0
