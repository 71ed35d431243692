import pytest
import torch

from dbdmp.network import (
    DualBranchNet,
    NetworkConfig,
    SingleBranchNet,
    build_network,
    perturb,
)

SMALL = NetworkConfig(levels=3, base_features=4)


def test_feature_widths_capped():
    assert NetworkConfig().features() == [16, 32, 64, 128, 256]
    assert NetworkConfig(levels=6, base_features=32).features()[-1] == 256


def test_full_size_bottleneck_shape():
    torch.manual_seed(0)
    enc = DualBranchNet(NetworkConfig(levels=5, base_features=1, max_features=2)).encoder.eval()
    with torch.no_grad():
        f = enc(torch.zeros(1, 1, 224, 128, 64))
    assert tuple(f.bottleneck.shape[2:]) == (14, 8, 4)
    for k, s in enumerate(f.skips):
        assert tuple(s.shape[2:]) == (224 // 2**k, 128 // 2**k, 64 // 2**k)


def test_indivisible_axis_named():
    net = DualBranchNet(SMALL)
    with pytest.raises(ValueError, match="axis H"):
        net(torch.zeros(1, 1, 8, 6, 8))


def test_probability_pair_normalised_and_finite():
    torch.manual_seed(0)
    net = DualBranchNet(SMALL)
    p_main, p_aux = net(torch.zeros(2, 1, 8, 8, 8))
    for p in (p_main, p_aux):
        assert torch.isfinite(p).all()
        assert torch.allclose(p.sum(1), torch.ones_like(p[:, 0]), atol=1e-5)
        assert p.min() >= 0 and p.max() <= 1


def test_eval_mode_deterministic_and_batch_consistent():
    torch.manual_seed(0)
    net = DualBranchNet(SMALL).eval()
    x = torch.randn(1, 1, 8, 8, 8).repeat(2, 1, 1, 1, 1)
    with torch.no_grad():
        a = net(x)
        b = net(x)
    assert torch.equal(a.p_aux, b.p_aux)
    assert torch.allclose(a.p_main[0], a.p_main[1], atol=1e-6)


def test_dropout_only_on_aux_branch_in_training():
    torch.manual_seed(0)
    net = DualBranchNet(SMALL).train()
    x = torch.randn(1, 1, 8, 8, 8)
    f = net.encode(x)
    # the main decoder sees clean features: repeated calls agree
    assert torch.equal(net.decode_main(f), net.decode_main(f))
    assert not torch.equal(net.decode_aux(f), net.decode_aux(f))


def test_zero_dropout_branches_differ_only_by_parameters():
    torch.manual_seed(0)
    cfg = NetworkConfig(levels=3, base_features=4, dropout_rate=0.0)
    net = DualBranchNet(cfg).train()
    net.aux.load_state_dict(net.main.state_dict())
    p = net(torch.randn(1, 1, 8, 8, 8))
    assert torch.equal(p.p_main, p.p_aux)


def test_perturb_scopes():
    torch.manual_seed(0)
    f = DualBranchNet(SMALL).encode(torch.randn(1, 1, 8, 8, 8))
    g = perturb(f, 0.5, "bottleneck", True)
    assert all(torch.equal(a, b) for a, b in zip(f.skips, g.skips))
    assert not torch.equal(f.bottleneck, g.bottleneck)
    g = perturb(f, 0.5, "skips", True)
    assert torch.equal(f.bottleneck, g.bottleneck)
    assert perturb(f, 0.5, "both", False) is f


def test_reconstruction_head_and_switch():
    net = DualBranchNet(NetworkConfig(levels=2, base_features=4, head_mode="reconstruction"))
    p_main, _ = net(torch.randn(1, 1, 8, 8, 8))
    assert p_main.shape == (1, 1, 8, 8, 8)
    enc_state = {k: v.clone() for k, v in net.encoder.state_dict().items()}
    net.set_head_mode("segmentation")
    assert net.main.head.out_channels == 2
    assert all(torch.equal(v, net.encoder.state_dict()[k]) for k, v in enc_state.items())


def test_single_branch_baseline():
    net = build_network(SMALL, dual=False)
    assert isinstance(net, SingleBranchNet)
    out = net(torch.randn(1, 1, 8, 8, 8))
    assert out.shape == (1, 2, 8, 8, 8)
    with pytest.raises(RuntimeError):
        net.decode_aux(None)
    assert not any(k.startswith("aux.") for k in net.state_dict())


def test_config_validation_and_diff():
    with pytest.raises(ValueError):
        NetworkConfig(levels=1)
    with pytest.raises(ValueError):
        NetworkConfig(dropout_rate=1.0)
    assert NetworkConfig().diff(NetworkConfig(levels=4)) == {"levels": (5, 4)}
