import numpy as np
import pytest
import torch

from tempera.errors import ShapeError
from tempera.gst import GstLayer, build_context
from tempera.losses import LossWeights, dice_loss, focal_loss, total_loss
from tempera.network import NetworkConfig, init_weights, predict, run_case, weight_fingerprint
from tempera.volume import AffineTransform, Geometry, VolumeGrid


def mini_case(seed=0, shape=(8, 8, 4)):
    rng = np.random.default_rng(seed)
    sa_geom = Geometry(shape, (1.25, 1.25, 2.5), (0, 0, 0), np.eye(3))
    # LA plane: a rotated cut through the SA centre
    c, s = np.cos(0.4), np.sin(0.4)
    direction = np.array([[1, 0, 0], [0, c, -s], [0, s, c]])[:, [0, 2, 1]]
    la_geom = Geometry((shape[0], shape[1], 1), (1.25, 1.25, 2.5), (0, 0, 0), direction)
    la_geom = Geometry(la_geom.shape, la_geom.spacing, la_geom.origin - (la_geom.center_world() - sa_geom.center_world()),
                       direction)
    sa = VolumeGrid.from_geometry(rng.normal(size=shape), sa_geom)
    la = VolumeGrid.from_geometry(rng.normal(size=la_geom.shape), la_geom)
    gst = GstLayer(build_context(AffineTransform.identity(), sa_geom, la_geom))
    sa_truth = torch.from_numpy((rng.random(shape) > 0.6).astype(np.float64))
    la_truth = torch.from_numpy((rng.random(la_geom.shape) > 0.6).astype(np.float64))
    return sa, la, gst, sa_truth, la_truth


def mini_net(seed=0):
    net = init_weights(NetworkConfig.miniature(), seed=seed, dtype=torch.float64)
    # non-zero biases so the check also covers them
    g = torch.Generator().manual_seed(seed + 100)
    with torch.no_grad():
        for name, p in net.named_parameters():
            if name.endswith("bias"):
                p.copy_(0.1 * torch.randn(p.shape, generator=g, dtype=p.dtype))
    return net


def test_output_extents_and_range():
    sa, la, gst, *_ = mini_case()
    out = run_case(mini_net(), sa, la, gst)
    assert out.sa_probability.shape == (8, 8, 4)
    assert out.la_probability.shape == (8, 8, 1)
    for p in (out.sa_probability, out.la_probability):
        assert p.min() >= 0 and p.max() <= 1
    assert out.intermediate["sa_features"].shape == (4, 4, 8, 8)


def test_full_size_extents():
    sa_geom = Geometry((32, 32, 5), (1.25, 1.25, 10), (0, 0, 0), np.eye(3))
    la_geom = sa_geom.shifted((0, 0, 2), (32, 32, 1))
    net = init_weights(NetworkConfig(), seed=0)
    gst = GstLayer(build_context(AffineTransform.identity(), sa_geom, la_geom))
    out = net(torch.zeros(32, 32, 5), torch.zeros(32, 32, 1), gst)
    assert out.sa_probability.shape == (32, 32, 5)
    assert out.la_probability.shape == (32, 32, 1)


def test_shape_errors_name_stage():
    sa, la, gst, *_ = mini_case()
    net = mini_net()
    with pytest.raises(ShapeError, match="network input"):
        net(torch.zeros(8, 8), torch.zeros(8, 8, 1, dtype=torch.float64), gst)
    with pytest.raises(ShapeError, match="gst"):
        net(torch.zeros(8, 8, 5, dtype=torch.float64), torch.zeros(8, 8, 1, dtype=torch.float64), gst)


def test_init_biases_zero_and_deterministic():
    a = init_weights(NetworkConfig(), seed=3)
    b = init_weights(NetworkConfig(), seed=3)
    assert weight_fingerprint(a) == weight_fingerprint(b)
    assert weight_fingerprint(a) != weight_fingerprint(init_weights(NetworkConfig(), seed=4))
    for name, p in a.named_parameters():
        if name.endswith("bias"):
            assert torch.count_nonzero(p) == 0


def test_init_variance_per_layer():
    net = init_weights(NetworkConfig(), seed=1)
    checked = 0
    for name, p in net.named_parameters():
        if name.endswith("weight") and p.numel() >= 1000:
            target = 1.0 / p[0].numel()
            assert abs(p.var().item() / target - 1) < 0.2, name
            checked += 1
    assert checked >= 8


def test_forward_deterministic():
    sa, la, gst, *_ = mini_case()
    net = mini_net()
    a, b = run_case(net, sa, la, gst), run_case(net, sa, la, gst)
    assert torch.equal(a.sa_probability, b.sa_probability)
    assert torch.equal(a.la_probability, b.la_probability)


def case_loss(net, sa, la, gst, sa_truth, la_truth, weights=None):
    out = run_case(net, sa, la, gst)
    return total_loss(out.sa_probability, sa_truth, out.la_probability, la_truth, weights)


def test_end_to_end_gradient_matches_finite_differences():
    sa, la, gst, sa_truth, la_truth = mini_case()
    net = mini_net()
    params = list(net.parameters())
    sizes = np.array([p.numel() for p in params])
    ends = np.cumsum(sizes)
    net.zero_grad()
    case_loss(net, sa, la, gst, sa_truth, la_truth).backward()
    flat = np.random.default_rng(0).choice(ends[-1], size=100, replace=False)
    analytic, numeric = [], []
    h = 1e-6
    with torch.no_grad():
        for f in flat:
            o = int(np.searchsorted(ends, f, side="right"))
            i = int(f - (ends[o - 1] if o else 0))
            p = params[o].view(-1)
            analytic.append(params[o].grad.view(-1)[i].item())
            old = p[i].item()
            p[i] = old + h
            up = case_loss(net, sa, la, gst, sa_truth, la_truth).item()
            p[i] = old - h
            down = case_loss(net, sa, la, gst, sa_truth, la_truth).item()
            p[i] = old
            numeric.append((up - down) / (2 * h))
    a, n = np.array(analytic), np.array(numeric)
    assert np.linalg.norm(a - n) / max(np.linalg.norm(a), np.linalg.norm(n)) < 1e-4


def test_la_only_loss_reaches_pyramid():
    sa, la, gst, _, la_truth = mini_case()
    net = mini_net()
    out = run_case(net, sa, la, gst)
    loss = dice_loss(out.la_probability, la_truth) + focal_loss(out.la_probability, la_truth)
    loss.backward()
    before = [p.detach().clone() for p in net.pyramid.parameters()]
    with torch.no_grad():
        for p in net.pyramid.parameters():
            p -= 1e-2 * p.grad
    update = sum(float((p.detach() - b).norm() ** 2) for p, b in zip(net.pyramid.parameters(), before)) ** 0.5
    assert update > 0
    # LA loss also reaches the SA head through the GST channel
    assert net.sa_head.weight.grad.abs().sum() > 0


def test_lambda_la_zero_kills_la_head_gradient():
    sa, la, gst, sa_truth, la_truth = mini_case()
    net = mini_net()
    case_loss(net, sa, la, gst, sa_truth, la_truth, LossWeights(lambda_la=0.0)).backward()
    assert torch.count_nonzero(net.la_head.weight.grad) == 0
    assert torch.count_nonzero(net.la_conv2.weight.grad) == 0


def test_sa_perturbation_reaches_la_through_gst():
    sa, la, gst, *_ = mini_case()
    net = mini_net()
    base = run_case(net, sa, la, gst).la_probability
    # pick an SA voxel that carries weight into the LA plane
    used = np.unique(gst.ctx.indices[gst.ctx.weights > 0.1])
    r, c, s = np.unravel_index(used[len(used) // 2], sa.shape)
    v = np.array(sa.voxels)
    v[r, c, s] += 5.0
    out = run_case(net, sa.with_voxels(v), la, gst).la_probability
    assert (out - base).abs().max() > 0
    # same perturbation with the fusion channel cut cannot reach LA: the pyramid sees
    # SA and LA slices independently
    base_nf = run_case(net, sa, la, gst, fuse=False).la_probability
    out_nf = run_case(net, sa.with_voxels(v), la, gst, fuse=False).la_probability
    assert torch.equal(base_nf, out_nf)


def test_fusion_is_live_after_training():
    sa, la, gst, sa_truth, la_truth = mini_case()
    net = mini_net()
    opt = torch.optim.SGD(net.parameters(), lr=1e-3)
    for _ in range(3):
        opt.zero_grad()
        case_loss(net, sa, la, gst, sa_truth, la_truth).backward()
        opt.step()
    with torch.no_grad():
        fused = run_case(net, sa, la, gst).la_probability
        cut = run_case(net, sa, la, gst, fuse=False).la_probability
    assert (fused - cut).abs().max() > 1e-6


def test_predict_thresholds():
    sa, la, gst, *_ = mini_case()
    net = mini_net()
    sa0, la0 = predict(net, sa, la, gst, threshold=0.0)
    assert sa0.labels.all() and la0.labels.all()
    assert sa0.geometry.mismatch(sa.geometry) is None
    sa2, la2 = predict(net, sa, la, gst, threshold=1.01)
    assert not sa2.labels.any() and not la2.labels.any()
    prev = None
    for t in np.linspace(0, 1, 11):
        m, _ = predict(net, sa, la, gst, threshold=float(t))
        if prev is not None:
            assert np.all(m.labels <= prev)
        prev = m.labels


def test_zero_probability_head_gives_empty_masks():
    sa, la, gst, *_ = mini_case()
    net = mini_net()
    with torch.no_grad():
        for head in (net.sa_head, net.la_head):
            head.weight.zero_()
            head.bias.fill_(-1e4)
    sa_m, la_m = predict(net, sa, la, gst)
    assert not sa_m.labels.any() and not la_m.labels.any()


def test_pyramid_storage_shared_between_views():
    net = mini_net()
    ids = {id(p) for p in net.pyramid.parameters()}
    all_ids = [id(p) for p in net.parameters()]
    assert len(all_ids) == len(set(all_ids))
    assert ids <= set(all_ids)
