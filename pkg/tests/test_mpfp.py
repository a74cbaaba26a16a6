import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from tempera.errors import ConfigError, ShapeError
from tempera.mpfp import BlockA, BlockB, BlockC, MultiPassPyramid, PyramidConfig, parameter_count
from tempera.network import lecun_normal_, weight_fingerprint


def pyramid(seed=0, dtype=torch.float64, **kw):
    net = MultiPassPyramid(PyramidConfig(**kw)).to(dtype)
    lecun_normal_(net, torch.Generator().manual_seed(seed))
    return net


def zero_biases(m):
    for mod in m.modules():
        if getattr(mod, "bias", None) is not None:
            torch.nn.init.zeros_(mod.bias)


@pytest.mark.parametrize("n,out", [(192, 96), (96, 48), (190, 95), (7, 4)])
def test_block_a_halves_extent(n, out):
    a = BlockA(2, 4, 3, 2)
    assert a(torch.randn(1, 2, n, n)).shape == (1, 4, out, out)


@pytest.mark.parametrize("n", [192, 96, 190, 63])
def test_block_b_restores_block_a_extent(n):
    a, b = BlockA(2, 4, 3, 2), BlockB(4, 2, 3, 2)
    x = torch.randn(1, 2, n, n + 2)
    assert b(a(x), x.shape[-2:]).shape == x.shape


def test_zero_input_zero_output():
    a, b = BlockA(3, 6, 3, 2), BlockB(6, 3, 3, 2)
    zero_biases(a)
    zero_biases(b)
    z = torch.zeros(1, 3, 16, 16)
    assert torch.count_nonzero(a(z)) == 0
    assert torch.count_nonzero(b(a(z), (16, 16))) == 0


def test_block_a_param_count_is_two_convs():
    a = BlockA(4, 8, 3, 2)
    assert parameter_count(a) == (4 * 8 * 9 + 8) + (8 * 8 * 9 + 8)


def test_bilinear_keeps_constant_maps_constant():
    b = BlockB(2, 2, 3, 2)
    for conv in (b.conv1, b.conv2):
        torch.nn.init.zeros_(conv.weight)
        torch.nn.init.constant_(conv.bias, 0.3)
    out = b(torch.zeros(1, 2, 5, 5), (9, 10))
    assert out.shape[-2:] == (9, 10)
    assert torch.allclose(out, out.flatten()[0].expand_as(out))


def test_se_gates_equal_for_symmetric_input():
    c = BlockC(4, 3, 2)
    torch.nn.init.constant_(c.se.fc1.weight, 0.1)
    torch.nn.init.constant_(c.se.fc2.weight, -0.2)
    zero_biases(c.se)
    x = torch.randn(1, 1, 6, 6).repeat(1, 4, 1, 1)
    g = c.se.gates(x)
    assert torch.all((g > 0) & (g < 1))
    assert torch.allclose(g, g[0, 0].expand_as(g))


def test_block_c_zero_upsampled_is_gated_lateral():
    c = BlockC(4, 3, 2)
    lat = torch.randn(2, 4, 8, 8)
    pre = torch.nn.functional.selu(c.lateral(lat))
    out = c(lat, torch.zeros_like(lat))
    assert torch.allclose(out, c.se(pre))
    # gates are below 1, so no channel can grow
    assert torch.all(out.flatten(2).norm(dim=2) <= pre.flatten(2).norm(dim=2) + 1e-6)


def test_block_c_extent_mismatch():
    c = BlockC(4, 3, 2)
    with pytest.raises(ShapeError):
        c(torch.zeros(1, 4, 8, 8), torch.zeros(1, 4, 8, 9))


def test_block_a_too_small_names_level():
    net = pyramid(levels=3, base_channels=2)
    with pytest.raises(ShapeError, match="level 2"):
        net(torch.zeros(1, 1, 4, 4, dtype=torch.float64))


def test_pass_depths():
    assert [MultiPassPyramid.depth(3, k) for k in (1, 2, 3)] == [3, 2, 1]


def test_pass_index_out_of_range():
    net = pyramid(base_channels=2)
    with pytest.raises(ConfigError):
        net.pyramid_forward(torch.zeros(1, 1, 16, 16, dtype=torch.float64), 4)
    with pytest.raises(ConfigError):
        net.pyramid_forward(torch.zeros(1, 1, 16, 16, dtype=torch.float64), 0)


def test_pass_calls_expected_blocks(monkeypatch):
    net = pyramid(base_channels=2)
    calls = []
    orig = net.block_a
    monkeypatch.setattr(net, "block_a", lambda x, level: calls.append(level) or orig(x, level))
    x = torch.randn(1, 1, 16, 16, dtype=torch.float64)
    for k in (1, 2, 3):
        calls.clear()
        net.pyramid_forward(x, k)
        assert calls == list(range(4 - k))


@pytest.mark.parametrize("n", [192, 64])
def test_pass_and_merge_preserve_extent(n):
    net = pyramid(dtype=torch.float32, base_channels=4)
    x = torch.randn(1, 1, n, n)
    for k in (1, 2, 3):
        assert net.pyramid_forward(x, k).shape == (1, 4, n, n)
    assert net(x).shape == (1, 4, n, n)


@settings(max_examples=15, deadline=None)
@given(levels=st.integers(1, 3), base=st.integers(1, 6), half=st.integers(4, 12))
def test_merged_output_channels_and_extent(levels, base, half):
    net = pyramid(levels=levels, base_channels=base, dtype=torch.float32)
    n = 2 * half
    assert net(torch.randn(2, 1, n, n)).shape == (2, base, n, n)


def test_single_level_is_one_u_pass():
    net = pyramid(levels=1, base_channels=3)
    x = torch.randn(1, 1, 12, 12, dtype=torch.float64)
    assert len(net.passes(x)) == 1
    x0 = torch.nn.functional.selu(net.adapter(x))
    manual = net.skip[0](x0, net.up[0](net.down[0](x0), (12, 12)))
    assert torch.allclose(net.passes(x)[0], manual)


def test_parameter_count_independent_of_slices():
    net = pyramid(dtype=torch.float32)
    before = parameter_count(net)
    net(torch.randn(1, 1, 32, 32))
    net(torch.randn(17, 1, 32, 32))
    assert parameter_count(net) == before
    assert parameter_count(pyramid(seed=3, dtype=torch.float32)) == before


def test_gradients_from_all_slices_accumulate():
    net = pyramid(base_channels=2)
    x = torch.randn(3, 1, 16, 16, dtype=torch.float64)
    net(x).sum().backward()
    together = [p.grad.clone() for p in net.parameters()]
    net.zero_grad()
    for i in range(3):
        net(x[i:i + 1]).sum().backward()
    for a, p in zip(together, net.parameters()):
        assert torch.allclose(a, p.grad, atol=1e-10)


def test_same_weights_for_every_slice():
    net = pyramid(base_channels=2)
    fp = weight_fingerprint(net)
    a = net(torch.randn(1, 1, 16, 16, dtype=torch.float64))
    b = net(torch.randn(1, 1, 16, 16, dtype=torch.float64))
    assert weight_fingerprint(net) == fp
    assert not torch.allclose(a, b)


def test_deterministic_forward():
    x = torch.randn(2, 1, 16, 16, dtype=torch.float64)
    assert torch.equal(pyramid(seed=4)(x), pyramid(seed=4)(x))


def test_init_variance_matches_lecun():
    net = pyramid(dtype=torch.float32)
    checked = 0
    for m in net.modules():
        if isinstance(m, (torch.nn.Conv2d, torch.nn.Linear)):
            assert torch.count_nonzero(m.bias) == 0
            if m.weight.numel() >= 1000:
                target = 1.0 / m.weight[0].numel()
                assert abs(m.weight.var().item() / target - 1) < 0.2
                checked += 1
    assert checked >= 5


def fd_relative_error(net, x, n_weights=100, h=1e-6, seed=0):
    params = list(net.parameters())
    net.zero_grad()
    loss = lambda: (net(x) ** 2).mean() + net(x).sum() * 1e-2
    loss().backward()
    sizes = np.array([p.numel() for p in params])
    rng = np.random.default_rng(seed)
    flat = rng.choice(sizes.sum(), size=min(n_weights, sizes.sum()), replace=False)
    owners = np.searchsorted(np.cumsum(sizes), flat, side="right")
    analytic, numeric = [], []
    with torch.no_grad():
        for f, o in zip(flat, owners):
            p = params[o].view(-1)
            i = f - (np.cumsum(sizes)[o - 1] if o else 0)
            analytic.append(params[o].grad.view(-1)[i].item())
            old = p[i].item()
            p[i] = old + h
            up = loss().item()
            p[i] = old - h
            down = loss().item()
            p[i] = old
            numeric.append((up - down) / (2 * h))
    a, n = np.array(analytic), np.array(numeric)
    return np.linalg.norm(a - n) / max(np.linalg.norm(a), np.linalg.norm(n))


def test_pyramid_gradient_matches_finite_differences():
    torch.manual_seed(0)
    net = pyramid(base_channels=4)
    for m in net.modules():
        if getattr(m, "bias", None) is not None:
            torch.nn.init.normal_(m.bias, 0, 0.1)
    x = torch.randn(2, 1, 16, 16, dtype=torch.float64)
    assert fd_relative_error(net, x) < 1e-5
