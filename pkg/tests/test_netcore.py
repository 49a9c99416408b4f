import io

import numpy as np
import pytest

from wipelab import netcore
from wipelab.netcore import FC, LSTM, LayerSpec


def central_diff(f, x, h=1e-5):
    g = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        e = np.zeros_like(x)
        e[i] = h
        g[i] = (f(x + e) - f(x - e)) / (2 * h)
    return g


def rel_err(a, b):
    return np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-12)


def _random_state(specs, rng, batch):
    return [(rng.normal(size=(batch, s.out_dim)), rng.normal(size=(batch, s.out_dim)))
            for s in specs if s.kind == LSTM]


LAYER_CASES = {
    "fc_tanh": [LayerSpec(FC, 4, 5)],
    "fc_linear": [LayerSpec(FC, 4, 3, "linear")],
    "lstm": [LayerSpec(LSTM, 3, 4)],
}


def fd_check(specs, seed, T=3, B=2):
    rng = np.random.default_rng(seed)
    w = netcore.init_weights(specs, rng)
    x = rng.normal(size=(T, B, specs[0].in_dim))
    g = rng.normal(size=(T, B, specs[-1].out_dim))
    s0 = _random_state(specs, rng, B)
    sg = _random_state(specs, rng, B)

    def loss(w_, x_):
        y, s, _ = netcore.forward(specs, w_, x_, s0)
        return (y * g).sum() + sum((h * a).sum() + (c * b).sum() for (h, c), (a, b) in zip(s, sg))

    _, _, tape = netcore.forward(specs, w, x, s0)
    dw, dx, _ = netcore.backward(tape, g, sg)
    return (rel_err(dw, central_diff(lambda v: loss(v, x), w)),
            rel_err(dx, central_diff(lambda v: loss(w, v), x)))


@pytest.mark.parametrize("case", sorted(LAYER_CASES))
@pytest.mark.parametrize("seed", range(20))
def test_layer_gradients_match_central_differences(case, seed):
    ew, ex = fd_check(LAYER_CASES[case], seed)
    assert ew <= 1e-4 and ex <= 1e-4


def test_initial_state_gradient():
    specs = [LayerSpec(LSTM, 2, 3), LayerSpec(FC, 3, 2)]
    rng = np.random.default_rng(3)
    w = netcore.init_weights(specs, rng)
    x = rng.normal(size=(4, 1, 2))
    g = rng.normal(size=(4, 1, 2))
    h0, c0 = rng.normal(size=(1, 3)), rng.normal(size=(1, 3))

    def loss(h, c):
        y, _, _ = netcore.forward(specs, w, x, [(h, c)])
        return (y * g).sum()

    _, _, tape = netcore.forward(specs, w, x, [(h0, c0)])
    _, _, ds = netcore.backward(tape, g)
    assert rel_err(ds[0][0], central_diff(lambda h: loss(h, c0), h0)) < 1e-6
    assert rel_err(ds[0][1], central_diff(lambda c: loss(h0, c), c0)) < 1e-6


def test_zero_weights_zero_input_gives_zero_output():
    specs = [LayerSpec(FC, 3, 4), LayerSpec(LSTM, 4, 4), LayerSpec(FC, 4, 2)]
    w = np.zeros(netcore.param_count(specs))
    y, _, _ = netcore.forward(specs, w, np.zeros(3))
    assert np.array_equal(y, np.zeros(2))


def test_single_fc_identity_is_tanh():
    specs = [LayerSpec(FC, 3, 3)]
    w = np.zeros(netcore.param_count(specs))
    netcore.unpack(specs, w)[0][0][...] = np.eye(3)
    x = np.array([-2.0, 0.1, 0.7])
    y, _, _ = netcore.forward(specs, w, x)
    np.testing.assert_allclose(y, np.tanh(x), rtol=0, atol=1e-15)


def test_forward_is_pure():
    specs = [LayerSpec(FC, 3, 4), LayerSpec(LSTM, 4, 4), LayerSpec(FC, 4, 2)]
    rng = np.random.default_rng(0)
    w = netcore.init_weights(specs, rng)
    x = rng.normal(size=(2, 3))
    s = _random_state(specs, rng, 2)
    y1, s1, _ = netcore.forward(specs, w, x, s)
    y2, s2, _ = netcore.forward(specs, w, x, s)
    assert np.array_equal(y1, y2)
    assert all(np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1]) for a, b in zip(s1, s2))


def test_linear_layer_input_gradient_is_transpose_product():
    specs = [LayerSpec(FC, 3, 2, "linear")]
    w = np.zeros(netcore.param_count(specs))
    W = netcore.unpack(specs, w)[0][0]
    W[...] = [[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]]
    _, _, tape = netcore.forward(specs, w, np.array([0.3, -0.2, 0.5]))
    g = np.array([1.0, -1.0])
    _, dx, _ = netcore.backward(tape, g)
    np.testing.assert_allclose(dx, W @ g)


def test_zero_output_grad_gives_zero_grads():
    specs = [LayerSpec(FC, 3, 4), LayerSpec(LSTM, 4, 4), LayerSpec(FC, 4, 2)]
    rng = np.random.default_rng(1)
    w = netcore.init_weights(specs, rng)
    _, _, tape = netcore.forward(specs, w, rng.normal(size=(5, 2, 3)))
    dw, dx, ds = netcore.backward(tape, np.zeros((5, 2, 2)))
    assert not dw.any() and not dx.any()
    assert all(not h.any() and not c.any() for h, c in ds)


def test_dimension_mismatch():
    specs = [LayerSpec(FC, 3, 4)]
    w = np.zeros(netcore.param_count(specs))
    with pytest.raises(netcore.DimensionMismatch):
        netcore.forward(specs, w, np.zeros(5))
    with pytest.raises(netcore.DimensionMismatch):
        netcore.check_specs([LayerSpec(FC, 3, 4), LayerSpec(FC, 5, 2)])


def test_param_count_depends_only_on_specs():
    specs = [LayerSpec(FC, 80, 300), LayerSpec(LSTM, 100, 100)]
    assert netcore.param_count(specs) == 80 * 300 + 300 + 100 * 400 + 100 * 400 + 400
    assert netcore.param_count(list(specs)) == netcore.param_count(specs)


def test_forget_gate_bias_init():
    specs = [LayerSpec(LSTM, 3, 4)]
    w = netcore.init_weights(specs, np.random.default_rng(0))
    b = netcore.unpack(specs, w)[0][2]
    assert np.array_equal(b[4:8], np.ones(4))
    assert not b[:4].any() and not b[8:].any()


def test_tape_composes_across_splits():
    widths = [6, 7, 5, 5, 4, 4, 5, 6, 5, 3]
    specs = [LayerSpec(FC, 5, 6)]
    specs += [LayerSpec(LSTM if k in (4, 5) else FC, a, b) for k, (a, b) in enumerate(zip(widths[:-1], widths[1:]), 1)]
    assert len(specs) == 10
    rng = np.random.default_rng(7)
    w = netcore.init_weights(specs, rng)
    x = rng.normal(size=(4, 2, 5))
    g = rng.normal(size=(4, 2, 3))
    _, _, tape = netcore.forward(specs, w, x)
    dw_full, dx_full, _ = netcore.backward(tape, g)
    views = netcore.unpack(specs, w)
    for split in rng.choice(np.arange(1, 10), size=3, replace=False):
        a, b = specs[:split], specs[split:]
        n_a = netcore.param_count(a)
        ya, _, ta = netcore.forward(a, w[:n_a], x)
        _, _, tb = netcore.forward(b, w[n_a:], ya)
        dwb, dmid, _ = netcore.backward(tb, g)
        dwa, dxa, _ = netcore.backward(ta, dmid)
        np.testing.assert_allclose(np.concatenate([dwa, dwb]), dw_full, rtol=1e-12, atol=1e-14)
        np.testing.assert_allclose(dxa, dx_full, rtol=1e-12, atol=1e-14)
    assert len(views) == 10


def test_adam_zero_grad_leaves_params():
    p = np.array([1.0, -2.0])
    netcore.Adam(1e-3).step(p, np.zeros(2))
    assert np.array_equal(p, [1.0, -2.0])


def test_adam_first_step_is_lr_times_sign():
    g = np.array([0.3, -4.0, 1e-3])
    p = np.zeros(3)
    netcore.Adam(lr=0.01).step(p, g)
    # bias-corrected first step: lr * g / (|g| + eps)
    np.testing.assert_allclose(p, -0.01 * g / (np.abs(g) + 1e-8), rtol=1e-12)
    assert np.allclose(np.abs(p), 0.01, rtol=1e-4)
    assert np.array_equal(np.sign(p), -np.sign(g))


def test_momentum_two_steps():
    g = np.array([0.5, -1.0])
    p = np.zeros(2)
    opt = netcore.MomentumSGD(lr=0.1, momentum=0.9)
    opt.step(p, g)
    opt.step(p, g)
    np.testing.assert_allclose(p, -0.1 * g * (1 + 1.9), rtol=1e-12)


def test_momentum_zero_grad():
    p = np.array([0.2])
    netcore.MomentumSGD().step(p, np.zeros(1))
    assert p[0] == 0.2


def test_optim_config_validation():
    with pytest.raises(ValueError):
        netcore.OptimConfig(lr=0.0)
    assert isinstance(netcore.OptimConfig("momentum", lr=0.01).build(), netcore.MomentumSGD)


def test_segment_roundtrip():
    specs = [LayerSpec(FC, 3, 4), LayerSpec(LSTM, 4, 2), LayerSpec(FC, 2, 1, "linear")]
    w = netcore.init_weights(specs, np.random.default_rng(2))
    buf = io.BytesIO()
    netcore.write_segment(buf, specs, w)
    buf.seek(0)
    specs2, w2 = netcore.read_segment(buf)
    assert specs2 == specs
    assert np.array_equal(w, w2)


def test_segment_rejects_garbage():
    with pytest.raises(netcore.CheckpointError):
        netcore.read_segment(io.BytesIO(b"junkjunk"))
