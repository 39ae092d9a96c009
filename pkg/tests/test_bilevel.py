import json
import math
from pathlib import Path

import pytest
import torch

from ruas.bilevel import (
    ModuleLosses, NumericalError, _step_t, hypergradient, init_search, run_search,
    search_epoch, virtual_step,
)
from ruas.config import ConfigError, LossWeights, NetworkConfig, SearchConfig
from ruas.data import Sample, split_by_hash, to_tensor
from ruas.losses import cooperative_val_loss
from ruas.synthetic import synth_lowlight

GOLDEN = Path(__file__).parent / "data" / "golden_search.json"
SMALL_NET = NetworkConfig(K=2, N=1, width_t=2, width_n=2)


def toy(alpha_value, xi, eps_fd=0.01):
    alpha = torch.tensor(alpha_value, dtype=torch.float64, requires_grad=True)
    w = {"w": torch.tensor(alpha_value, dtype=torch.float64, requires_grad=True)}
    return hypergradient(lambda a, p: (p["w"] - a) ** 2, lambda a, p: p["w"] ** 2,
                         alpha, w, xi, eps_fd)


def test_virtual_step_examples():
    w = {"a": torch.tensor(1.0, dtype=torch.float64)}
    assert float(virtual_step(w, [torch.tensor(2.0, dtype=torch.float64)], 0.1)["a"].detach()) == pytest.approx(0.8)
    assert torch.equal(virtual_step(w, [torch.zeros(())], 0.1)["a"], w["a"])
    g = [torch.tensor(3.0, dtype=torch.float64)]
    half = virtual_step(virtual_step(w, g, 0.05), g, 0.05)
    assert torch.allclose(half["a"], virtual_step(w, g, 0.1)["a"], rtol=0, atol=1e-15)


def test_first_order_mode_is_exact():
    torch.manual_seed(0)
    alpha = torch.randn(3, dtype=torch.float64, requires_grad=True)
    w = {"w": torch.randn(3, dtype=torch.float64, requires_grad=True)}

    def val(a, p):
        return (torch.sin(a) * p["w"]).sum() ** 2

    expect = torch.autograd.grad(val(alpha, w), alpha)[0]
    got = hypergradient(lambda a, p: ((p["w"] - a) ** 2).sum(), val, alpha, w, 0.0)
    assert torch.equal(got, expect)


@pytest.mark.parametrize("xi", [0.1, 0.05, 0.01])
def test_toy_one_step_estimate_closed_form(xi):
    """At w = a the virtual step leaves w unchanged, so the estimate is 4*xi*a, not 2a."""
    assert float(toy(0.7, xi)) == pytest.approx(4 * xi * 0.7, rel=1e-9)


def test_toy_exact_when_virtual_step_reaches_best_response():
    # xi = 0.5 makes one virtual step land on the inner optimum for any start
    assert float(toy(0.7, 0.5)) == pytest.approx(2 * 0.7, rel=1e-9)


def _linear_ratios(tr, val, alpha, w, xis):
    g0 = hypergradient(tr, val, alpha, w, 0.0)
    diffs = [float((hypergradient(tr, val, alpha, w, xi) - g0).norm()) for xi in xis]
    return diffs, [big / small for big, small in zip(diffs, diffs[1:])]


def test_hypergradient_converges_linearly_on_smooth_problem():
    gen = torch.Generator().manual_seed(0)
    A = torch.randn(5, 4, dtype=torch.float64, generator=gen)
    c = torch.randn(5, dtype=torch.float64, generator=gen)
    alpha = torch.randn(4, dtype=torch.float64, generator=gen).requires_grad_(True)
    w = {"w": torch.randn(5, dtype=torch.float64, generator=gen).requires_grad_(True)}

    def tr(a, p):
        return 0.5 * ((p["w"] - torch.tanh(A @ a)) ** 2).sum() + 0.1 * (p["w"] ** 4).sum()

    def val(a, p):
        return ((p["w"] - c) ** 2).sum() + 0.01 * (a ** 2).sum()

    diffs, ratios = _linear_ratios(tr, val, alpha, w, (1e-2, 1e-3, 1e-4))
    assert diffs[0] > diffs[1] > diffs[2] > 0
    assert all(9 < r < 11 for r in ratios)


def test_hypergradient_converges_linearly_on_network():
    # the network's training gradient has norm ~1e2, so the linear regime starts well below 1e-4
    cfg = SearchConfig(network=SMALL_NET)
    state = init_search(cfg)
    losses = ModuleLosses(state.model, cfg)
    gen = torch.Generator().manual_seed(0)
    y = 0.3 + 0.3 * torch.rand(2, 3, 6, 6, dtype=torch.float64, generator=gen)
    a = (0.3 * torch.randn(4, 7, dtype=torch.float64, generator=gen)).requires_grad_(True)
    w = dict(state.model.iem.cell.named_parameters())
    diffs, ratios = _linear_ratios(lambda al, p: losses.iem(y[:1], al, p)[0],
                                   lambda al, p: losses.iem(y[1:], al, p)[0], a, w, (1e-6, 1e-7, 1e-8))
    assert diffs[0] > diffs[1] > diffs[2]
    assert all(10 / 1.5 < r < 10 * 1.5 for r in ratios)


def test_coupling_gradient_matches_finite_differences():
    cfg = SearchConfig(network=SMALL_NET)
    state = init_search(cfg)
    losses = ModuleLosses(state.model, cfg)
    y = 0.05 + 0.3 * torch.rand(1, 3, 6, 6, dtype=torch.float64, generator=torch.Generator().manual_seed(2))
    gen = torch.Generator().manual_seed(1)
    a_t = (0.5 * torch.randn(4, 7, dtype=torch.float64, generator=gen)).requires_grad_(True)
    a_n = 0.5 * torch.randn(4, 7, dtype=torch.float64, generator=gen)

    def coupling(a):
        return losses.coupled(y, a, a_n)[1]

    auto = torch.autograd.grad(coupling(a_t), a_t)[0]
    fd = torch.zeros_like(auto)
    h = 1e-5
    with torch.no_grad():
        for idx in range(a_t.numel()):
            e = torch.zeros(a_t.numel(), dtype=torch.float64)
            e[idx] = h
            e = e.view_as(a_t)
            fd.view(-1)[idx] = (coupling(a_t + e) - coupling(a_t - e)) / (2 * h)
    assert float((auto - fd).norm() / fd.norm()) <= 1e-3


def _tiny(n=4, size=12, seed=3):
    return synth_lowlight(n, size=size, seed=seed, noise_sigma=0.03)


def test_golden_trajectory():
    cfg = SearchConfig(epochs=1, seed=0)
    tr, val = split_by_hash(_tiny())
    history = search_epoch(init_search(cfg), tr, val, cfg).history
    golden = json.loads(GOLDEN.read_text())
    assert json.loads(json.dumps(history, sort_keys=True)) == golden


def test_zero_epochs_gives_tie_break_genotypes():
    res = run_search(SearchConfig(epochs=0), _tiny())
    assert res.genotype_t.ops == ("C1",) * 4 and res.genotype_n.ops == ("C1",) * 4
    assert len(res.epoch_history) == 1


def test_empty_dataset_rejected():
    with pytest.raises(ConfigError):
        run_search(SearchConfig(epochs=1), [])
    with pytest.raises(ConfigError):
        run_search(SearchConfig(epochs=1), _tiny(1))


def test_non_finite_loss_aborts_with_step():
    data = _tiny()
    bad = Sample(data[0].name, data[0].image.copy())
    bad.image[0, 0, 0] = float("nan")
    cfg = SearchConfig(epochs=1, network=SMALL_NET)
    with pytest.raises(NumericalError) as info:
        run_search(cfg, [bad] + data[1:] + [bad])
    assert info.value.step is not None and info.value.epoch == 0


def test_beta_zero_disables_coupling():
    cfg = SearchConfig(network=SMALL_NET, losses=LossWeights(beta=0.0))
    y_tr, y_val = (to_tensor([s.image]) for s in _tiny(2, 8))
    a, b = init_search(cfg), init_search(cfg)
    with torch.no_grad():
        b.alpha_n.normal_(generator=torch.Generator().manual_seed(0))
    _step_t(a, ModuleLosses(a.model, cfg), cfg, y_tr, y_val, coupling=True)
    _step_t(b, ModuleLosses(b.model, cfg), cfg, y_tr, y_val, coupling=True)
    assert torch.equal(a.alpha_t, b.alpha_t)


def test_first_order_alpha_step_is_descent():
    cfg = SearchConfig(network=SMALL_NET, xi=0.0, losses=LossWeights(beta=0.0))
    state = init_search(cfg)
    losses = ModuleLosses(state.model, cfg)
    y_tr, y_val = (to_tensor([s.image]) for s in _tiny(2, 8))
    a = state.alpha_t
    with torch.no_grad():
        a.normal_(generator=torch.Generator().manual_seed(1))
    w = {k: v for k, v in state.model.iem.cell.named_parameters()}
    g = hypergradient(lambda al, p: losses.iem(y_tr, al, p)[0],
                      lambda al, p: losses.iem(y_val, al, p)[0], a, w, 0.0)
    before = float(losses.iem(y_val, a)[0].detach())
    expect = torch.autograd.grad(losses.iem(y_val, a)[0], a)[0]
    assert torch.equal(g, expect)
    with torch.no_grad():
        a -= 1e-5 * g
    assert float(losses.iem(y_val, a)[0].detach()) <= before


def test_min_min_on_frozen_batch():
    cfg = SearchConfig(network=SMALL_NET, alpha_lr=1e-7, weight_lr=1e-7)
    sample = _tiny(1, 8)
    state = init_search(cfg)
    losses = ModuleLosses(state.model, cfg)
    y = to_tensor([sample[0].image])

    def coop():
        with torch.no_grad():
            l_t, l_n = losses.coupled(y, state.alpha_t, state.alpha_n)
        return float(cooperative_val_loss(l_t, l_n, cfg.losses.beta))

    before = coop()
    search_epoch(state, sample, sample, cfg)
    assert coop() <= before + 1e-6


@pytest.mark.parametrize("mode", ["cooperative", "separate", "naive-joint"])
def test_modes_run(mode):
    cfg = SearchConfig(epochs=1, mode=mode, network=SMALL_NET)
    res = run_search(cfg, _tiny())
    per_epoch = 2 if mode == "separate" else 1
    assert len(res.epoch_history) == 1 + per_epoch
    assert res.genotype_t.module == "IEM" and res.genotype_n.module == "NRM"
    if mode == "naive-joint":
        assert res.state.alpha_t is res.state.alpha_n
    if mode == "separate":
        assert [r["phase"] for r in res.epoch_history] == ["init", "t", "n"]


def test_search_descends_on_synthetic_data():
    cfg = SearchConfig(epochs=5, network=NetworkConfig())
    res = run_search(cfg, synth_lowlight(8, size=16, seed=0, noise_sigma=0.03))
    assert res.epoch_history[-1]["coop_val"] < res.epoch_history[0]["coop_val"]


def test_search_is_deterministic():
    cfg = SearchConfig(epochs=2, seed=4, network=SMALL_NET)
    a = run_search(cfg, _tiny())
    b = run_search(cfg, _tiny())
    assert a.genotype_t == b.genotype_t and a.genotype_n == b.genotype_n
    assert a.history == b.history
    assert all(math.isfinite(r["coop_val"]) for r in a.history)
