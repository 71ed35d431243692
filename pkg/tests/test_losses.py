import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from dbdmp import losses as L

import oracles as O
import suites


@pytest.mark.parametrize("name,computed,expected", suites.loss_examples(), ids=lambda v: v if isinstance(v, str) else "")
def test_loss_examples(name, computed, expected):
    assert abs(computed - expected) <= suites.EXAMPLE_TOL


def test_losses_match_numpy_rederivation():
    worst = {}
    for name, diff in suites.loss_random_oracles():
        worst[name] = max(worst.get(name, 0.0), diff)
    assert max(worst.values()) < 1e-12, worst


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_gradients_match_central_differences(seed):
    for name, err, _ in suites.gradient_errors(seed=seed):
        assert err <= 1e-4, (name, err)


def test_consensus_weights_are_constants():
    torch.manual_seed(0)
    p = torch.softmax(torch.randn(1, 2, 5, dtype=torch.float64), 1).requires_grad_(True)
    q = torch.softmax(torch.randn(1, 2, 5, dtype=torch.float64), 1)
    w = L.consensus_weights(p, q)
    assert not w.requires_grad
    assert torch.all((w > 0) & (w <= 1))


@settings(max_examples=60, deadline=None)
@given(
    fg=st.lists(st.floats(0.0, 1.0), min_size=6, max_size=6),
    fg2=st.lists(st.floats(0.0, 1.0), min_size=6, max_size=6),
    lab=st.lists(st.integers(0, 1), min_size=6, max_size=6),
    t=st.integers(0, 200),
)
def test_losses_finite_for_extreme_inputs(fg, fg2, lab, t):
    p = torch.tensor([[[1 - v for v in fg], fg]], dtype=torch.float64)
    q = torch.tensor([[[1 - v for v in fg2], fg2]], dtype=torch.float64)
    y = torch.tensor([lab], dtype=torch.float64)
    y_hat = torch.stack([1 - y, y], 1)
    terms = L.total_loss(p, q, y, y_hat, t, L.LossConfig())
    assert all(math.isfinite(float(v)) for v in terms.values())
    assert float(terms["total"]) >= -1e-12


def test_total_loss_decomposes():
    rng = np.random.default_rng(1)
    fg = rng.uniform(0.1, 0.9, size=(2, 4, 4))
    p = torch.tensor(np.stack([1 - fg, fg], 1))
    q = torch.tensor(np.stack([fg, 1 - fg], 1))
    y = torch.tensor(rng.integers(0, 2, (2, 4, 4)), dtype=torch.float64)
    y_hat = torch.stack([1 - y, y], 1) * 0.8 + 0.1
    cfg = L.LossConfig()
    for t in (0, 10, 99, 150):
        terms = L.total_loss(p, q, y, y_hat, t, cfg)
        lam = O.np_ramp(t, cfg.lam, cfg.t_max)
        expect = terms["sup_main"] + terms["sup_aux"] + lam * (terms["pseudo_main"] + terms["pseudo_aux"])
        assert abs(float(terms["total"] - expect)) < 1e-12
        assert float(terms["lambda_p"]) == lam
        parts = sum(v for k, v in terms.items() if k.startswith("main_"))
        assert abs(float(parts - terms["sup_main"])) < 1e-12


def test_ablation_term_selection():
    cfg = L.LossConfig(sup_terms=("ce", "tversky"), pseudo_term="dice")
    p = torch.full((1, 2, 3), 0.5, dtype=torch.float64)
    y = torch.tensor([[1.0, 0.0, 1.0]], dtype=torch.float64)
    assert set(L.supervised_terms(p, y, cfg)) == {"ce", "tversky"}
    assert float(L.pseudo_loss(p, p, p, L.LossConfig(pseudo_term="none"))) == 0.0
    base = L.baseline_loss(p, y, L.LossConfig(sup_terms=("ce",)))
    assert abs(float(base["total"]) - math.log(2)) < 1e-12
    with pytest.raises(ValueError):
        L.term_subset(["ce", "focal"])


def test_ramp_up_trace():
    for t in range(0, 121):
        assert L.ramp_up(t, 2.0, 99) == O.np_ramp(t, 2.0, 99)
    assert L.ramp_up(99) == 2.0 and L.ramp_up(500) == 2.0
    with pytest.raises(ValueError):
        L.ramp_up(-1)


def test_shape_errors():
    with pytest.raises(ValueError):
        L.mse_reconstruction(torch.zeros(1, 1, 2), torch.zeros(1, 1, 2), torch.zeros(1, 1, 3))
    with pytest.raises(ValueError):
        L.cross_entropy(torch.zeros(1, 2, 2), torch.zeros(1, 2, 3))
    with pytest.raises(ValueError):
        L.pce(torch.zeros(1, 2, 2), torch.zeros(1, 3))


def test_config_validation():
    with pytest.raises(ValueError):
        L.LossConfig(alpha=1.0)
    with pytest.raises(ValueError):
        L.LossConfig(tau=0)
    with pytest.raises(ValueError):
        L.LossConfig(sup_terms=("bogus",))
