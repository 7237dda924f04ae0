import numpy as np
import pytest
import torch
from torch import nn

from fwibench import engine
from fwibench.engine import (CenterCrop, GlobalAvgPool, Graph, ShapeError, adam_step, batchnorm2d,
                             conv2d, conv_transpose2d, layer_gradient_check, leaky_relu, linear,
                             make_adam, maxpool2x2, read_checkpoint, save_checkpoint)

GRAD_TOL = 1e-4


def conv_dims(n, k, s, p):
    return (n + 2 * p - k) // s + 1


def test_conv_output_dims_for_column_kernel():
    layer = conv2d(6, 8, (7, 1), (2, 1), (3, 0))
    out = layer(torch.zeros(1, 6, 1000, 32))
    assert tuple(out.shape[2:]) == (conv_dims(1000, 7, 2, 3), conv_dims(32, 1, 1, 0)) == (500, 32)


def test_transposed_conv_output_dims():
    layer = conv_transpose2d(3, 2, 6, 2, 0)
    # (in - 1) * s - 2p + k
    assert tuple(layer(torch.zeros(1, 3, 4, 4)).shape) == (1, 2, 12, 12)


@pytest.mark.parametrize("make", [conv2d, conv_transpose2d])
def test_unit_kernel_is_identity(make):
    layer = make(3, 3, 1)
    with torch.no_grad():
        layer.weight.zero_()
        for c in range(3):
            layer.weight[c, c, 0, 0] = 1.0
        layer.bias.zero_()
    x = torch.randn(2, 3, 5, 7)
    assert torch.equal(layer(x), x)


def random_conv_pair(rng):
    c_in, c_out = (int(v) for v in rng.integers(1, 5, 2))
    kh, kw = (int(v) for v in rng.integers(1, 5, 2))
    sh, sw = (int(v) for v in rng.integers(1, 4, 2))
    ph, pw = int(rng.integers(0, kh)), int(rng.integers(0, kw))
    h, w = int(rng.integers(kh + 2, 14)), int(rng.integers(kw + 2, 14))
    return c_in, c_out, (kh, kw), (sh, sw), (ph, pw), (h, w)


def adjoint_discrepancy(seed: int) -> float:
    rng = np.random.default_rng(seed)
    c_in, c_out, k, s, p, (h, w) = random_conv_pair(rng)
    gen = torch.Generator().manual_seed(seed)
    weight = torch.randn(c_out, c_in, *k, generator=gen, dtype=torch.float64)
    x = torch.randn(2, c_in, h, w, generator=gen, dtype=torch.float64)
    fwd = nn.Conv2d(c_in, c_out, k, s, p, bias=False).double()
    adj = nn.ConvTranspose2d(c_out, c_in, k, s, p, bias=False).double()
    with torch.no_grad():
        fwd.weight.copy_(weight)
        adj.weight.copy_(weight)  # the transpose layer stores (c_in_of_conv_out, ...) the same way
        ax = fwd(x)
        y = torch.randn(ax.shape, generator=gen, dtype=torch.float64)
        aty = adj(y)
        # output_size aligns shapes when the forward stride dropped trailing pixels
        if aty.shape != x.shape:
            aty = adj(y, output_size=x.shape[2:])
    lhs, rhs = float((ax * y).sum()), float((x * aty).sum())
    return abs(lhs - rhs) / max(abs(lhs), abs(rhs), 1e-300)


def test_conv_transpose_is_adjoint_of_conv():
    worst = max(adjoint_discrepancy(s) for s in range(20))
    assert worst < 1e-5


LAYERS = {
    "conv2d": (lambda: conv2d(2, 3, (3, 2), (2, 1), (1, 1)), (2, 2, 5, 5)),
    "conv_transpose2d": (lambda: conv_transpose2d(2, 3, 3, 2, 1), (2, 2, 4, 4)),
    "batchnorm2d": (lambda: batchnorm2d(3), (4, 3, 3, 3)),
    "leaky_relu": (leaky_relu, (2, 2, 4, 4)),
    "tanh": (nn.Tanh, (2, 2, 4, 4)),
    "maxpool2x2": (maxpool2x2, (2, 2, 6, 6)),
    "global_avg_pool": (GlobalAvgPool, (2, 3, 4, 5)),
    "linear": (lambda: linear(5, 3), (2, 1, 1, 5)),
    "center_crop": (lambda: CenterCrop((3, 2)), (2, 2, 6, 5)),
}


@pytest.mark.parametrize("name", sorted(LAYERS))
def test_layer_gradients_match_finite_differences(name):
    make, shape = LAYERS[name]
    torch.manual_seed(0)
    layer = make()
    assert layer_gradient_check(layer, shape, eps=1e-3, seed=1) < GRAD_TOL


def test_maxpool_gradient_only_at_argmax():
    x = torch.tensor([[[[1.0, 5.0], [2.0, 3.0]]]], requires_grad=True)
    maxpool2x2()(x).sum().backward()
    assert x.grad.tolist() == [[[[0.0, 1.0], [0.0, 0.0]]]]


def test_batchnorm_training_statistics():
    bn = batchnorm2d(4)
    x = 3 + 2 * torch.randn(8, 4, 5, 5)
    y = bn(x)
    assert torch.allclose(y.mean(dim=(0, 2, 3)), torch.zeros(4), atol=1e-4)
    assert torch.allclose(y.var(dim=(0, 2, 3), unbiased=False), torch.ones(4), atol=1e-4)
    assert bn.momentum == 0.1 and bn.eps == 1e-5


def test_batchnorm_eval_identity_and_single_sample_error():
    bn = batchnorm2d(2)
    x = torch.randn(1, 2, 3, 3)
    with pytest.raises(ValueError):
        bn(x)
    bn.eval()
    assert torch.allclose(bn(x), x / np.sqrt(1 + 1e-5))


def test_tanh_range():
    y = nn.Tanh()(torch.randn(3, 1, 8, 8) * 20)
    assert torch.all(y.abs() <= 1.0)


def test_center_crop_margins():
    x = torch.arange(104 * 104, dtype=torch.float32).reshape(1, 1, 104, 104)
    y = CenterCrop((100, 100))(x)
    assert torch.equal(y, x[..., 2:102, 2:102])
    odd = CenterCrop((2, 2))(torch.arange(9.0).reshape(1, 1, 3, 3))
    assert odd.flatten().tolist() == [0.0, 1.0, 3.0, 4.0]
    with pytest.raises(ShapeError):
        CenterCrop((5, 5))(torch.zeros(1, 1, 4, 4))


def test_adam_zero_gradient_keeps_parameters():
    w = torch.nn.Parameter(torch.randn(5))
    before = w.detach().clone()
    opt = make_adam([w], 1e-2)
    w.grad = torch.zeros(5)
    adam_step(opt)
    assert torch.equal(w.detach(), before)


def test_adam_first_step_is_lr_times_sign():
    w = torch.nn.Parameter(torch.zeros(6))
    opt = make_adam([w], 1e-3)
    g = torch.tensor([3.0, -2.0, 0.5, -0.1, 7.0, -9.0])
    w.grad = g.clone()
    adam_step(opt)
    assert torch.allclose(w.detach(), -1e-3 * torch.sign(g), rtol=1e-4)
    assert torch.all(w.grad == 0)


def test_adam_quadratic_bowl():
    w = torch.nn.Parameter(torch.ones(10))
    opt = make_adam([w], 1e-2)
    for _ in range(500):
        (w ** 2).sum().backward()
        adam_step(opt)
    assert w.detach().norm() < 1e-3


def small_graph(seed=0):
    layers = [("conv", conv2d(2, 4, 3, 1, 1)), ("bn", batchnorm2d(4)), ("act", leaky_relu()),
              ("pool", maxpool2x2()), ("gap", GlobalAvgPool()), ("fc", linear(4, 1))]
    return Graph(layers, (2, 8, 8), seed=seed)


def test_graph_records_shapes_and_rejects_bad_chains():
    g = small_graph()
    assert g.shapes["pool"] == (4, 4, 4)
    assert g.output_shape == (1,)
    with pytest.raises(ShapeError, match="conv2"):
        Graph([("conv1", conv2d(2, 4, 3)), ("conv2", conv2d(5, 1, 3))], (2, 8, 8))
    with pytest.raises(ShapeError):
        g(torch.zeros(2, 3, 8, 8))


def test_same_seed_same_forward():
    x = torch.randn(3, 2, 8, 8)
    assert torch.equal(small_graph(5)(x), small_graph(5)(x))
    assert not torch.equal(small_graph(5)(x), small_graph(6)(x))


def test_eval_forward_mutates_nothing():
    g = small_graph()
    g.eval()
    before = {k: v.clone() for k, v in g.state_dict().items()}
    g(torch.randn(4, 2, 8, 8))
    after = g.state_dict()
    assert all(torch.equal(before[k], after[k]) for k in before)


def test_checkpoint_round_trip(tmp_path):
    g = small_graph(3)
    opt = make_adam(g.parameters(), 1e-3)
    g(torch.randn(4, 2, 8, 8)).sum().backward()
    adam_step(opt)
    path = tmp_path / "c.nnc"
    save_checkpoint(path, {"G": g}, {"G": opt}, meta={"note": "x"})
    meta, entries = read_checkpoint(path)
    assert meta == {"note": "x"}
    assert path.read_bytes()[:4] == b"NNC1"
    h = small_graph(9)
    engine.load_into(h, "G", entries)
    for k, v in g.state_dict().items():
        assert torch.equal(h.state_dict()[k].float(), v.float())
    opt2 = make_adam(h.parameters(), 1e-3)
    engine.load_adam(opt2, "G", entries)
    s1, s2 = opt.state_dict()["state"], opt2.state_dict()["state"]
    assert s1.keys() == s2.keys()
    for pid in s1:
        assert torch.equal(s1[pid]["exp_avg"], s2[pid]["exp_avg"])
