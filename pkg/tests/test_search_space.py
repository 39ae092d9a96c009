import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from ruas.search_space import (
    NUM_EDGES, PRIMITIVES, Genotype, GenotypeFormatError, MixedCell, Primitive,
    derive_genotype, instantiate_discrete, mixed_cell_forward, primitive_forward, relax,
)


def gen(seed=0):
    return torch.Generator().manual_seed(seed)


def one_hot_logits(choice, scale=100.0):
    a = torch.zeros(NUM_EDGES, len(PRIMITIVES), dtype=torch.float64)
    for i, c in enumerate(choice):
        a[i, c] = scale
    return a


def test_relax_uniform_and_saturated():
    p = relax(torch.zeros(NUM_EDGES, 7, dtype=torch.float64))
    assert torch.allclose(p, torch.full_like(p, 1 / 7), atol=0, rtol=1e-12)
    a = torch.zeros(1, 7, dtype=torch.float64)
    a[0, 2] = 100.0
    assert relax(a)[0, 2] > 1 - 1e-6


def test_relax_matches_direct_evaluation():
    a = torch.randn(NUM_EDGES, 7, dtype=torch.float64, generator=gen(3)) * 3
    e = np.exp(a.numpy())
    direct = e / e.sum(axis=1, keepdims=True)
    assert np.abs(relax(a).numpy() - direct).max() <= 1e-9


def test_sc_is_identity():
    x = torch.randn(1, 3, 5, 5, dtype=torch.float64, generator=gen())
    assert torch.equal(primitive_forward("SC", None, x), x)
    assert torch.equal(Primitive("SC", 3)(x), x)


@pytest.mark.parametrize("kind", ["RC1", "RC3", "RDC3_2"])
def test_residual_with_zero_kernel_is_identity(kind):
    p = Primitive(kind, 3, gen())
    with torch.no_grad():
        p.conv.weight.zero_()
    x = torch.randn(1, 3, 5, 5, dtype=torch.float64, generator=gen(1))
    assert torch.equal(p(x), x)


def test_c1_hand_computation():
    w = torch.tensor([[1.0, -2.0], [0.5, 0.25]], dtype=torch.float64).reshape(2, 2, 1, 1)
    b = torch.tensor([0.1, -1.0], dtype=torch.float64)
    x = torch.tensor([0.3, 0.4], dtype=torch.float64).reshape(1, 2, 1, 1)
    out = primitive_forward("C1", {"weight": w, "bias": b}, x).flatten().tolist()
    pre = [0.3 - 0.8 + 0.1, 0.15 + 0.1 - 1.0]
    expect = [v if v > 0 else 0.05 * v for v in pre]
    assert out == pytest.approx(expect, abs=1e-15)


def test_width_mismatch_raises():
    with pytest.raises(ValueError):
        Primitive("C3", 3)(torch.zeros(1, 2, 4, 4, dtype=torch.float64))


@pytest.mark.parametrize("kind", PRIMITIVES)
def test_primitives_preserve_size(kind):
    x = torch.randn(1, 3, 7, 5, dtype=torch.float64, generator=gen())
    assert Primitive(kind, 3, gen())(x).shape == x.shape


def test_uniform_alpha_gives_mean_of_primitives():
    cell = MixedCell(1, 1, 3, gen())
    h = torch.randn(1, 3, 5, 5, dtype=torch.float64, generator=gen(4))
    probs = relax(torch.zeros(NUM_EDGES, 7, dtype=torch.float64))
    mixed = sum(p * op(h) for p, op in zip(probs[0], cell.edges[0]))
    mean = torch.stack([op(h) for op in cell.edges[0]]).mean(0)
    assert torch.allclose(mixed, mean, atol=1e-14)


def test_mixed_all_sc_equals_discrete():
    cell = MixedCell(1, 1, 3, gen())
    a = one_hot_logits([PRIMITIVES.index("SC")] * 4)
    x = torch.rand(1, 1, 6, 6, dtype=torch.float64, generator=gen(2))
    disc = instantiate_discrete(Genotype(("SC",) * 4, 3, "IEM"), cell)
    assert torch.equal(mixed_cell_forward(cell, a, None, x), disc(x))


@pytest.mark.parametrize("seed", range(5))
def test_one_hot_consistency(seed):
    rng = np.random.default_rng(seed)
    cell = MixedCell(3, 3, 6, gen(seed))
    choice = rng.integers(0, 7, NUM_EDGES)
    a = one_hot_logits(choice)
    g = derive_genotype(a, 6, "NRM")
    assert g.ops == tuple(PRIMITIVES[c] for c in choice)
    x = torch.rand(1, 3, 6, 6, dtype=torch.float64, generator=gen(seed + 10))
    diff = (cell(x, a) - instantiate_discrete(g, cell)(x)).abs().max()
    assert diff <= 1e-6


def test_continuity_in_alpha():
    cell = MixedCell(1, 1, 3, gen())
    a = torch.randn(NUM_EDGES, 7, dtype=torch.float64, generator=gen(5))
    x = torch.rand(1, 1, 6, 6, dtype=torch.float64, generator=gen(6))
    b = a.clone()
    b[1, 3] += 1e-6
    assert (cell(x, a) - cell(x, b)).abs().max() < 1e-5


def test_functional_weights_override():
    cell = MixedCell(1, 1, 3, gen())
    a = torch.zeros(NUM_EDGES, 7, dtype=torch.float64)
    x = torch.rand(1, 1, 6, 6, dtype=torch.float64, generator=gen(6))
    weights = {k: torch.zeros_like(v) for k, v in cell.named_parameters()}
    assert torch.equal(mixed_cell_forward(cell, a, weights, x), torch.zeros_like(x))
    assert torch.equal(mixed_cell_forward(cell, a, None, x), cell(x, a))


def test_derive_examples():
    a = torch.zeros(NUM_EDGES, 7, dtype=torch.float64)
    assert derive_genotype(a, 3, "IEM").ops == ("C1",) * 4
    a[2, PRIMITIVES.index("C3")] = 0.5
    assert derive_genotype(a, 3, "IEM").ops[2] == "C3"


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, (NUM_EDGES, 7), elements=st.floats(-20, 20)),
       arrays(np.float64, (NUM_EDGES, 1), elements=st.floats(-50, 50)))
def test_derive_matches_brute_force_and_shift_invariance(alpha, shift):
    a = torch.from_numpy(alpha)
    probs = relax(a).numpy()
    brute = []
    for row in probs:
        best_i, best = 0, row[0]
        for i in range(1, 7):
            if row[i] > best:
                best_i, best = i, row[i]
        brute.append(PRIMITIVES[best_i])
    assert derive_genotype(a, 3, "IEM").ops == tuple(brute)
    shifted = derive_genotype(a + torch.from_numpy(shift), 3, "IEM").ops
    # argmax of the logits themselves is shift invariant; relaxed ties may differ only by rounding
    assert all(probs[i, PRIMITIVES.index(s)] >= probs[i].max() * (1 - 1e-12) for i, s in enumerate(shifted))


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, (NUM_EDGES, 7), elements=st.floats(-30, 30)))
def test_relaxed_rows_sum_to_one(alpha):
    s = relax(torch.from_numpy(alpha)).sum(1)
    assert torch.allclose(s, torch.ones_like(s), atol=1e-7, rtol=0)


def test_sc_genotype_has_no_edge_parameters():
    cell = instantiate_discrete(Genotype(("SC",) * 4, 3, "IEM"), in_ch=1, out_ch=1)
    assert sum(p.numel() for p in cell.edges.parameters()) == 0
    assert sum(p.numel() for p in cell.parameters()) == 58


def test_c3_genotype_edge_parameters():
    cell = instantiate_discrete(Genotype(("C3",) * 4, 3, "IEM"), generator=gen(), in_ch=1, out_ch=1)
    assert sum(p.numel() for p in cell.edges.parameters()) == 4 * (3 * 3 * 3 * 3 + 3) == 336


def test_genotype_text_round_trip():
    g = Genotype(("C3", "RC1", "SC", "RDC3_2"), 6, "NRM")
    assert Genotype.from_text(g.to_text()) == g
    assert Genotype.parse("C3, RC1,SC,RDC3_2", 6, "NRM") == g


@pytest.mark.parametrize("bad", [
    '{"module": "IEM", "width": 3, "edges": ["XX", "C1", "C1", "C1"]}',
    '{"module": "IEM", "width": 3, "edges": ["C1", "C1", "C1"]}',
    '{"module": "ABC", "width": 3, "edges": ["C1", "C1", "C1", "C1"]}',
    '{"module": "IEM", "width": 0, "edges": ["C1", "C1", "C1", "C1"]}',
    'not json',
])
def test_genotype_format_errors(bad):
    with pytest.raises(GenotypeFormatError):
        Genotype.from_text(bad)


def test_init_statistics():
    p = Primitive("C3", 6, gen())
    std = float(p.conv.weight.detach().std())
    assert std == pytest.approx(math.sqrt(2 / 54), rel=0.15)
    assert torch.equal(p.conv.bias, torch.zeros(6, dtype=torch.float64))
