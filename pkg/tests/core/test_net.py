import math

import numpy as np
import pytest
import torch

from activeda.error import InvalidInputError
from activeda.nn import (
    NetDims,
    OptimState,
    backward,
    clip_gradients,
    dump_checkpoint,
    forward_classifier,
    forward_discriminator,
    forward_features,
    global_norm,
    load_checkpoint,
    make_net,
    predict_numpy,
    sgd_step,
)
from activeda.nn.grad import grad_reverse
from activeda.nn.net import DTYPE

DIMS = NetDims(in_dim=3, n_classes=4, hidden=5, embed=4, disc_hidden=6)


def blocks(net):
    return {k: v.detach().numpy().copy() for k, v in net.state_dict().items()}


def relu(x):
    return np.maximum(x, 0.0)


def dense(x, p, name):
    # naive row-by-row matrix multiply
    w, b = p[f"{name}.weight"], p[f"{name}.bias"]
    out = np.zeros((x.shape[0], w.shape[0]))
    for n in range(x.shape[0]):
        for o in range(w.shape[0]):
            out[n, o] = sum(w[o, i] * x[n, i] for i in range(w.shape[1])) + b[o]
    return out


def reference(p, x):
    z = dense(relu(dense(x, p, "feature.0")), p, "feature.2")
    logits = dense(z, p, "classifier")
    e = np.exp(logits - logits.max(axis=1, keepdims=True))
    d = dense(relu(dense(relu(dense(z, p, "discriminator.0")), p, "discriminator.2")), p, "discriminator.4")
    return z, e / e.sum(axis=1, keepdims=True), 1 / (1 + np.exp(-d[:, 0]))


def zero_(module):
    with torch.no_grad():
        for p in module.parameters():
            p.zero_()


def test_forward_matches_reference():
    net = make_net(DIMS, seed=7)
    x = np.random.default_rng(0).normal(size=(6, 3))
    z, probs, disc = reference(blocks(net), x)
    assert np.abs(forward_features(net, x).detach().numpy() - z).max() <= 1e-12
    assert np.abs(forward_classifier(net, x).detach().numpy() - probs).max() <= 1e-12
    assert np.abs(forward_discriminator(net, x).detach().numpy() - disc).max() <= 1e-12


def test_zero_network_outputs():
    net = make_net(DIMS, seed=0)
    zero_(net)
    x = np.ones((2, 3))
    assert np.all(forward_features(net, x).detach().numpy() == 0)
    assert np.allclose(forward_classifier(net, x).detach().numpy(), 0.25)
    assert np.allclose(forward_discriminator(net, x).detach().numpy(), 0.5)


def test_rectifier_layer():
    net = make_net(NetDims(2, 2, hidden=2, embed=2), seed=0)
    with torch.no_grad():
        net.feature[0].weight.copy_(torch.eye(2, dtype=DTYPE))
        net.feature[0].bias.zero_()
        net.feature[2].weight.copy_(torch.eye(2, dtype=DTYPE))
        net.feature[2].bias.zero_()
    assert forward_features(net, [1.0, -1.0]).tolist() == [1.0, 0.0]


def test_softmax_shift_invariance():
    net = make_net(DIMS, seed=3)
    x = np.random.default_rng(1).normal(size=(5, 3))
    before = forward_classifier(net, x).detach().numpy()
    with torch.no_grad():
        net.classifier.bias.add_(3.7)
    after = forward_classifier(net, x).detach().numpy()
    assert np.abs(before - after).max() <= 1e-12


def test_discriminator_open_interval():
    net = make_net(DIMS, seed=4)
    x = np.random.default_rng(2).normal(scale=3.0, size=(100, 3))
    d = forward_discriminator(net, x).detach().numpy()
    assert np.all((d > 0) & (d < 1))


def test_dimension_mismatch():
    net = make_net(DIMS, seed=0)
    with pytest.raises(InvalidInputError):
        forward_features(net, np.ones((2, 4)))
    with pytest.raises(InvalidInputError):
        forward_classifier(net, np.ones((1, 2, 3)))


def test_forward_deterministic():
    x = np.random.default_rng(5).normal(size=(8, 3))
    a = predict_numpy(make_net(DIMS, seed=11), x)
    b = predict_numpy(make_net(DIMS, seed=11), x)
    for k in a:
        assert np.array_equal(a[k], b[k])


def test_glorot_init():
    net = make_net(DIMS, seed=0)
    for name, p in net.named_parameters():
        if name.endswith("bias"):
            assert torch.all(p == 0)
        else:
            fan_out, fan_in = p.shape
            assert p.abs().max() <= math.sqrt(6.0 / (fan_in + fan_out))


def test_backward_constant_loss():
    net = make_net(DIMS, seed=0)
    g = backward(net, torch.tensor(3.0, dtype=DTYPE))
    assert set(g) == {n for n, _ in net.named_parameters()}
    assert all(torch.all(v == 0) for v in g.values())


def test_backward_linear_in_scale():
    net = make_net(DIMS, seed=1)
    x = torch.randn((4, 3), dtype=DTYPE, generator=torch.Generator().manual_seed(0))
    g1 = backward(net, net.class_logits(x).pow(2).sum())
    g2 = backward(net, 2 * net.class_logits(x).pow(2).sum())
    for k in g1:
        assert torch.allclose(g2[k], 2 * g1[k], rtol=1e-9, atol=0)


def test_checkpoint_roundtrip(tmp_path):
    net = make_net(DIMS, seed=9)
    path = tmp_path / "checkpoint.json"
    dump_checkpoint(net, path)
    loaded = load_checkpoint(path)
    assert loaded.dims == net.dims
    for k, v in blocks(net).items():
        assert np.array_equal(blocks(loaded)[k], v)


def grads_with_norm(norm):
    g = {"a": torch.tensor([3.0, 4.0], dtype=DTYPE), "b": torch.zeros(2, dtype=DTYPE)}
    return {k: v * (norm / 5.0) for k, v in g.items()}


def test_clip_under_threshold():
    g = grads_with_norm(0.5)
    clipped, pre = clip_gradients(g)
    assert pre == pytest.approx(0.5)
    assert all(torch.equal(clipped[k], g[k]) for k in g)


def test_clip_scaling():
    g = grads_with_norm(4.0)
    clipped, pre = clip_gradients(g)
    assert pre == pytest.approx(4.0)
    assert global_norm(clipped) == pytest.approx(1.0, abs=1e-9)
    assert torch.allclose(clipped["a"] * 4.0, g["a"])


def test_clip_zero():
    g = grads_with_norm(0.0)
    clipped, _ = clip_gradients(g)
    assert all(torch.all(v == 0) for v in clipped.values())


def test_sgd_hand_step():
    net = make_net(NetDims(1, 2, hidden=1, embed=1, disc_hidden=1), seed=0)
    with torch.no_grad():
        for p in net.parameters():
            p.fill_(1.0)
    opt = OptimState.create(net, lr=0.01, momentum=0.9, weight_decay=0.0)
    grads = {n: torch.ones_like(p) for n, p in net.named_parameters()}
    sgd_step(net, grads, opt)
    for _, p in net.named_parameters():
        assert torch.allclose(p, torch.full_like(p, 0.99))
        assert torch.allclose(opt.momentum_buffer(p), torch.ones_like(p))


def test_sgd_zero_gradient_no_decay():
    net = make_net(DIMS, seed=2)
    before = blocks(net)
    opt = OptimState.create(net, lr=0.01, momentum=0.0, weight_decay=0.0)
    sgd_step(net, {n: torch.zeros_like(p) for n, p in net.named_parameters()}, opt)
    for k, v in blocks(net).items():
        assert np.array_equal(v, before[k])


def test_sgd_uniform_learning_rate():
    net = make_net(DIMS, seed=3)
    before = blocks(net)
    opt = OptimState.create(net, lr=0.05, momentum=0.0, weight_decay=0.0)
    grads = {n: torch.full_like(p, 0.3) for n, p in net.named_parameters()}
    sgd_step(net, grads, opt)
    after = blocks(net)
    ratios = {k: (before[k] - after[k]) / 0.3 for k in before}
    for r in ratios.values():
        assert np.allclose(r, 0.05, rtol=1e-9)


def test_grad_reverse():
    x = torch.tensor([1.0, 2.0], dtype=DTYPE, requires_grad=True)
    y = grad_reverse(x, 0.25)
    assert torch.equal(y, x)
    (g,) = torch.autograd.grad(y.sum(), x)
    assert torch.allclose(g, torch.full_like(x, -0.25))
