import inspect
from decimal import Decimal, getcontext

import numpy as np
import pytest

from topodiff.diffusion import (
    DenoiserNet,
    NoiseSchedule,
    ancestral_sample,
    ddpm_loss,
    denormalize,
    linear_schedule,
    normalize,
    q_sample,
    timestep_embedding,
    train_base,
)
from topodiff.errors import ConfigError, NumericError, ShapeError
from topodiff.tensor_nn import checksum


def to_float64(net):
    for _, layer in net._layers():
        layer.weight = layer.weight.astype(np.float64)
        layer.bias = layer.bias.astype(np.float64)
    return net


def test_single_step_schedule():
    s = linear_schedule(1, 0.01, 0.01)
    assert s.T == 1
    np.testing.assert_array_equal(s.betas, [0.01])
    assert s.alpha_bars[0] == 1 - 0.01


def test_constant_schedule():
    b = 0.03
    s = linear_schedule(10, b, b)
    np.testing.assert_allclose(s.alpha_bars, (1 - b) ** np.arange(1, 11), rtol=1e-13)


def test_default_schedule_against_decimal_product():
    s = linear_schedule()
    getcontext().prec = 50
    start, end, T = Decimal("1e-4"), Decimal("0.02"), 400
    prod = Decimal(1)
    for i in range(T):
        beta = start + (end - start) * Decimal(i) / Decimal(T - 1)
        prod *= 1 - beta
    assert s.alpha_bars[-1] == pytest.approx(float(prod), rel=1e-12)
    assert s.betas[0] == pytest.approx(1e-4) and s.betas[-1] == pytest.approx(0.02)


def test_schedule_invariants():
    s = linear_schedule()
    assert np.all(np.diff(s.betas) >= 0)
    assert np.all(np.diff(s.alpha_bars) < 0)
    np.testing.assert_allclose(np.sqrt(s.alpha_bars) ** 2 + (1 - s.alpha_bars), 1.0, atol=1e-15)


@pytest.mark.parametrize("args", [(0, 1e-4, 0.02), (10, 0.0, 0.02), (10, 0.03, 0.02), (10, 1e-4, 1.0)])
def test_invalid_schedule(args):
    with pytest.raises(ConfigError):
        linear_schedule(*args)


def test_q_sample_identities():
    rng = np.random.default_rng(0)
    x0 = rng.standard_normal((4, 4))
    eps = rng.standard_normal((4, 4))
    flat = NoiseSchedule(betas=np.zeros(3), alphas=np.ones(3), alpha_bars=np.ones(3))
    np.testing.assert_array_equal(q_sample(x0, 2, eps, flat), x0)
    s = linear_schedule()
    np.testing.assert_allclose(q_sample(np.zeros((4, 4)), 100, eps, s), np.sqrt(1 - s.alpha_bars[99]) * eps)


def test_q_sample_out_of_range():
    s = linear_schedule(10)
    with pytest.raises(IndexError):
        q_sample(np.zeros(2), 0, np.zeros(2), s)
    with pytest.raises(IndexError):
        q_sample(np.zeros(2), 11, np.zeros(2), s)


def test_q_sample_statistics_small():
    s = linear_schedule()
    rng = np.random.default_rng(1)
    x0 = 0.7
    n = 20000
    for t in (1, 200, 400):
        xt = q_sample(np.full(n, x0), t, rng.standard_normal(n), s)
        ab = s.alpha_bars[t - 1]
        se = np.sqrt((1 - ab) / n)
        assert abs(xt.mean() - np.sqrt(ab) * x0) < 3 * se + 1e-12
        assert abs(xt.var() - (1 - ab)) < 3 * (1 - ab) * np.sqrt(2 / n)


def test_normalize_round_trip():
    img = np.linspace(0, 1, 16).reshape(4, 4)
    x = normalize(img)
    assert x.min() == -1 and x.max() == 1
    np.testing.assert_allclose(denormalize(x), img, atol=1e-7)


def test_timestep_embedding_shape_and_distinct():
    e = timestep_embedding(np.array([1, 2, 400]), 16)
    assert e.shape == (3, 16)
    assert not np.allclose(e[0], e[1])


def test_net_output_shape_and_controls():
    net = DenoiserNet((4, 8, 8), temb_dim=8)
    x = np.random.default_rng(2).standard_normal((2, 1, 8, 8)).astype(np.float32)
    assert net(x, 3).shape == x.shape
    assert net.level_shapes(8, 8) == [(4, 8, 8), (8, 4, 4), (8, 2, 2)]
    with pytest.raises(ShapeError):
        net(x, 3, [np.zeros((2, 4, 8, 8))] * 2)
    with pytest.raises(ShapeError):
        net(x, 3, [np.zeros((2, 4, 8, 8)), np.zeros((2, 8, 4, 4)), np.zeros((2, 8, 4, 4))])


def test_ddpm_loss_oracle_nets():
    s = linear_schedule()
    rng = np.random.default_rng(3)
    x0 = rng.standard_normal((2, 1, 8, 8))
    eps = rng.standard_normal((2, 1, 8, 8))
    loss, grads, _ = ddpm_loss(lambda xt, t, c: eps, x0, 5, eps, s)
    assert loss == 0.0 and grads is None
    loss, _, _ = ddpm_loss(lambda xt, t, c: np.zeros_like(xt), x0, 5, eps, s)
    assert loss == pytest.approx(np.mean(eps ** 2))
    with pytest.raises(NumericError):
        ddpm_loss(lambda xt, t, c: np.full_like(xt, np.nan), x0, 5, eps, s)


def test_ddpm_loss_weight_gradient():
    s = linear_schedule(20)
    net = to_float64(DenoiserNet((4, 8, 8), temb_dim=8, seed=1))
    rng = np.random.default_rng(4)
    x0 = rng.standard_normal((2, 1, 8, 8))
    eps = rng.standard_normal((2, 1, 8, 8))
    t = np.array([3, 17])
    _, grads, _ = ddpm_loss(net, x0, t, eps, s)
    params = net.parameters()
    h = 1e-3
    for name in ("enc0.a.weight", "enc2.b.weight", "dec1.weight", "out.bias", "t_dense.weight"):
        p = params[name].reshape(-1)
        i = int(np.argmax(np.abs(grads[name].reshape(-1))))
        old = p[i]
        p[i] = old + h
        lp, _, _ = ddpm_loss(net, x0, t, eps, s)
        p[i] = old - h
        lm, _, _ = ddpm_loss(net, x0, t, eps, s)
        p[i] = old
        fd = (lp - lm) / (2 * h)
        assert grads[name].reshape(-1)[i] == pytest.approx(fd, rel=1e-3, abs=1e-9), name


def test_control_gradients_match_finite_differences():
    s = linear_schedule(20)
    net = to_float64(DenoiserNet((4, 8, 8), temb_dim=8, seed=2))
    rng = np.random.default_rng(5)
    x0 = rng.standard_normal((1, 1, 8, 8))
    eps = rng.standard_normal((1, 1, 8, 8))
    controls = [rng.standard_normal((1,) + shp) * 0.1 for shp in net.level_shapes(8, 8)]
    xt = q_sample(x0, 7, eps, s)
    pred = net(xt, 7, controls)
    g_out = 2 * (pred - eps) / pred.size
    cgrads = net.backward(g_out, need_param_grads=False)
    h = 1e-4
    for lvl in range(3):
        c = controls[lvl].reshape(-1)
        for i in rng.choice(c.size, 3, replace=False):
            old = c[i]
            c[i] = old + h
            lp = np.mean((net(xt, 7, controls) - eps) ** 2)
            c[i] = old - h
            lm = np.mean((net(xt, 7, controls) - eps) ** 2)
            c[i] = old
            assert cgrads[lvl].reshape(-1)[i] == pytest.approx((lp - lm) / (2 * h), rel=1e-4, abs=1e-10)


def test_sampler_one_step_closed_form():
    s = linear_schedule(1, 0.01, 0.01)
    xT = np.random.default_rng(6).standard_normal((1, 1, 4, 4)).astype(np.float32)
    out = ancestral_sample(lambda x, t, c: np.zeros_like(x), s, seed=0, shape=(4, 4), x_T=xT)
    np.testing.assert_allclose(out, xT / np.sqrt(0.99), rtol=1e-6)


def test_sampler_oracle_recovers_x0():
    s = linear_schedule(2, 0.1, 0.3)
    rng = np.random.default_rng(7)
    x0 = rng.uniform(-1, 1, (1, 1, 4, 4))
    eps = rng.standard_normal(x0.shape)
    x2 = np.sqrt(s.alpha_bars[1]) * x0 + np.sqrt(1 - s.alpha_bars[1]) * eps

    def oracle(x, t, c):
        ab = s.alpha_bars[t[0] - 1]
        return (x - np.sqrt(ab) * x0) / np.sqrt(1 - ab)

    out = ancestral_sample(oracle, s, seed=1, shape=(4, 4), x_T=x2)
    np.testing.assert_allclose(out, x0, atol=1e-5)


def test_sampler_deterministic_and_zero_controls():
    s = linear_schedule(5)
    net = DenoiserNet((4, 8, 8), temb_dim=8)
    a = ancestral_sample(net, s, seed=3, shape=(8, 8), n=2)
    b = ancestral_sample(net, s, seed=3, shape=(8, 8), n=2)
    zeros = [np.zeros((2,) + shp, dtype=np.float32) for shp in net.level_shapes(8, 8)]
    c = ancestral_sample(net, s, seed=3, shape=(8, 8), n=2, controls=zeros)
    np.testing.assert_array_equal(a, b)
    np.testing.assert_array_equal(a, c)


@pytest.fixture(scope="module")
def tiny_images():
    rng = np.random.default_rng(8)
    return rng.uniform(0, 1, (4, 8, 8)).astype(np.float32)


def test_train_base_smoke(tiny_images, tmp_path):
    s = linear_schedule(50)
    net, losses = train_base(tiny_images[:1], s, epochs=51, lr=1e-3, batch=2, seed=0, widths=(4, 8, 8),
                             log_path=tmp_path / "loss.csv", checkpoint_path=tmp_path / "b.ckpt")
    assert len(losses) == 51
    assert min(losses[1:51]) < losses[0]
    assert (tmp_path / "loss.csv").read_text().startswith("step,loss")
    assert (tmp_path / "b.ckpt").exists()


def test_train_base_lr_zero_and_reproducible(tiny_images):
    s = linear_schedule(50)
    net = DenoiserNet((4, 8, 8))
    before = checksum(net.parameters().values())
    train_base(tiny_images, s, epochs=2, lr=0.0, net=net)
    assert checksum(net.parameters().values()) == before
    _, l1 = train_base(tiny_images, s, epochs=2, lr=1e-3, seed=4, widths=(4, 8, 8))
    _, l2 = train_base(tiny_images, s, epochs=2, lr=1e-3, seed=4, widths=(4, 8, 8))
    assert l1 == l2


def test_train_base_rejects_empty():
    with pytest.raises(ConfigError):
        train_base(np.zeros((0, 8, 8)), linear_schedule(10))


def test_train_base_default_batch_is_two():
    assert inspect.signature(train_base).parameters["batch"].default == 2
