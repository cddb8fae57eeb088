import numpy as np
import pytest

from ntkdip import numerics as nx
from ntkdip.generators import (
    AdamState, ConvGenerator, Gradient, LinearNet, ShapeError, TwoLayerDecoder, adam_step, circulant,
    decoder_last_layer, init_weights, load_checkpoint, save_checkpoint,
)


def fd_check(net, x, g, h=1e-6):
    """Max relative error of weight and input gradients vs central differences."""
    w = net.weights
    grad = net.backward(x, g, input_grad=True)
    num_w = np.array([(g @ net.forward(x, w + h * e) - g @ net.forward(x, w - h * e)) / (2 * h)
                      for e in np.eye(w.size)])
    num_x = np.array([(g @ net.forward(x + h * e) - g @ net.forward(x - h * e)) / (2 * h)
                      for e in np.eye(x.size)])
    ew = np.abs(num_w - grad.weights).max() / max(np.abs(num_w).max(), 1e-12)
    ex = np.abs(num_x - grad.input).max() / max(np.abs(num_x).max(), 1e-12)
    return max(ew, ex)


# --- decoder -----------------------------------------------------------------


def test_decoder_last_layer_signs():
    v = decoder_last_layer(8)
    assert np.sum(v > 0) == 4 and np.sum(v < 0) == 4
    np.testing.assert_allclose(np.abs(v), 1 / np.sqrt(8))
    with pytest.raises(ShapeError):
        decoder_last_layer(5)


def test_decoder_zero_weights_zero_output():
    net = TwoLayerDecoder(8, 8, rng=nx.RngStream(0))
    assert np.all(net.forward(net.identity_input()) == 0)


def test_decoder_positive_homogeneity():
    net = init_weights(TwoLayerDecoder(8, 8, rng=nx.RngStream(1)), 1.0, nx.RngStream(2))
    z = nx.RngStream(3).normal(size=net.in_size)
    np.testing.assert_allclose(net.forward(2.5 * z), 2.5 * net.forward(z), atol=1e-12)


def test_decoder_u_is_circulant():
    net = TwoLayerDecoder(8, 4, rng=nx.RngStream(4))
    for i in range(8):
        np.testing.assert_array_equal(net.u[i], np.roll(net.u[0], i))
    np.testing.assert_allclose(np.linalg.norm(net.u, axis=1), 1.0)
    np.testing.assert_array_equal(circulant([1, 2, 3])[:, 0], [1, 2, 3])


def test_decoder_fd_n8_k8():
    net = init_weights(TwoLayerDecoder(8, 8, rng=nx.RngStream(5)), 1.0, nx.RngStream(6))
    x = nx.RngStream(7).normal(size=net.in_size)
    g = nx.RngStream(8).normal(size=net.out_size)
    assert fd_check(net, x, g, h=1e-5) <= 1e-6


# --- conv generator --------------------------------------------------------


def straight_line_conv_forward(net, x):
    """Loop-based re-derivation of the conv generator forward pass."""
    w = net.weights
    pos = 0

    def take(n):
        nonlocal pos
        out = w[pos:pos + n]
        pos += n
        return out

    c_in, length = net.in_channels, net.in_len
    h = [[x[c * length + i] for i in range(length)] for c in range(c_in)]
    ks = net.kernel_size
    for layer, up in enumerate(net.upsample):
        c_out = net.channels
        kern = take(c_out * c_in * ks).reshape(c_out, c_in, ks)
        bias = take(c_out)
        h = [[row[i // up] for i in range(len(row) * up)] for row in h]
        length = len(h[0])
        fan_in = c_in * ks
        scale = np.sqrt(2.0 / fan_in)
        new = []
        for o in range(c_out):
            row = []
            for i in range(length):
                acc = 0.0
                for c in range(c_in):
                    for k in range(ks):
                        j = i + k - ks // 2
                        if 0 <= j < length:
                            acc += kern[o, c, k] * h[c][j]
                row.append(max(scale * acc + bias[o], 0.0))
            new.append(row)
        h, c_in = new, c_out
    head = take(net.out_channels * c_in).reshape(net.out_channels, c_in)
    head_bias = take(net.out_channels)
    out = []
    for o in range(net.out_channels):
        for i in range(length):
            out.append(np.sqrt(1.0 / c_in) * sum(head[o, c] * h[c][i] for c in range(c_in)) + head_bias[o])
    return np.array(out)


def test_conv_forward_matches_straight_line_oracle():
    net = init_weights(ConvGenerator(8, in_channels=1, channels=4), 1.0, nx.RngStream(7))
    x = np.ones(8)
    out = net.forward(x)
    assert out.shape == (2 * 64,)
    np.testing.assert_allclose(out, straight_line_conv_forward(net, x), rtol=1e-12, atol=1e-12)


def test_conv_image_to_image_shapes():
    net = ConvGenerator(16, in_channels=2, channels=4, upsample=(1, 1, 1))
    assert net.in_size == 32 and net.out_size == 32


def test_shape_errors():
    net = ConvGenerator(8, channels=4)
    with pytest.raises(ShapeError):
        net.forward(np.ones(3))
    with pytest.raises(ShapeError):
        net.backward(np.ones(net.in_size), np.ones(5))
    with pytest.raises(ShapeError):
        net.forward(np.ones(net.in_size), np.ones(2))


@pytest.mark.parametrize("arch", ["decoder", "conv", "conv-image"])
def test_zero_cotangent_zero_gradient(arch):
    net = {"decoder": TwoLayerDecoder(8, 4), "conv": ConvGenerator(4, channels=3),
           "conv-image": ConvGenerator(8, channels=3, upsample=(1, 1, 1))}[arch]
    net = init_weights(net, 1.0, nx.RngStream(9))
    gr = net.backward(np.ones(net.in_size), np.zeros(net.out_size), input_grad=True)
    assert np.all(gr.weights == 0) and np.all(gr.input == 0)


def test_linear_regime_gradient_is_outer_product():
    # a positive decoder: U, C, Z all non-negative so every ReLU is active
    net = TwoLayerDecoder(4, 4, u=np.eye(4) + 0.1)
    c = np.abs(nx.RngStream(10).normal(size=net.n_params)) + 0.1
    z = net.identity_input()
    g = nx.RngStream(11).normal(size=4)
    expected = np.outer(net.u.T @ g, net.v)  # d/dC of g^T U C v
    np.testing.assert_allclose(net.backward(z, g, c).weights, expected.ravel(), atol=1e-12)


@pytest.mark.parametrize("trial", range(20))
def test_gradient_check_both_architectures(trial):
    rng = nx.RngStream(100, trial)
    dec = init_weights(TwoLayerDecoder(8, 6, rng=rng.spawn(1)), 1.0, rng.spawn(2))
    conv = init_weights(ConvGenerator(4, in_channels=2, channels=3, upsample=(2, 2, 1)), 1.0, rng.spawn(3))
    for net in (dec, conv):
        x = rng.spawn(4).normal(size=net.in_size)
        g = rng.spawn(5).normal(size=net.out_size)
        assert fd_check(net, x, g) <= 1e-5


def test_complex_cotangent_maps_to_channels():
    net = init_weights(ConvGenerator(4, channels=3), 1.0, nx.RngStream(12))
    g = nx.RngStream(13).normal(size=net.out_len) + 1j * nx.RngStream(14).normal(size=net.out_len)
    x = np.ones(net.in_size)
    a = net.backward(x, g).weights
    b = net.backward(x, np.concatenate([g.real, g.imag])).weights
    np.testing.assert_array_equal(a, b)


def test_forward_backward_deterministic():
    net = init_weights(ConvGenerator(4, channels=3), 1.0, nx.RngStream(15))
    x = np.linspace(-1, 1, net.in_size)
    g = np.linspace(1, 2, net.out_size)
    assert np.array_equal(net.forward(x), net.forward(x))
    assert np.array_equal(net.backward(x, g).weights, net.backward(x, g).weights)


# --- linear net ----------------------------------------------------------------


def test_linear_net_gradient():
    net = init_weights(LinearNet(3, 2), 1.0, nx.RngStream(16))
    x = np.array([1.0, 2.0, -1.0])
    g = np.array([0.5, -1.0])
    gr = net.backward(x, g, input_grad=True)
    np.testing.assert_allclose(gr.weights, np.outer(g, x).ravel())
    np.testing.assert_allclose(gr.input, net.weights.reshape(2, 3).T @ g)
    ident = LinearNet(3, 3).identity_weights()
    np.testing.assert_array_equal(LinearNet(3, 3).forward(x, ident), x)


# --- init ----------------------------------------------------------------------


def test_init_tiny_variance():
    net = init_weights(TwoLayerDecoder(8, 8), 1e-30, nx.RngStream(17))
    assert np.abs(net.forward(net.identity_input())).max() < 1e-13


def test_init_deterministic_and_v_untouched():
    base = TwoLayerDecoder(8, 8)
    a = init_weights(base, 1.0, nx.RngStream(18))
    b = init_weights(base, 1.0, nx.RngStream(18))
    np.testing.assert_array_equal(a.weights, b.weights)
    np.testing.assert_array_equal(a.v, decoder_last_layer(8))
    assert np.all(base.weights == 0)


def test_init_variance():
    net = init_weights(TwoLayerDecoder(100, 100), 1.0, nx.RngStream(19))
    assert 0.94 <= np.var(net.weights) <= 1.06
    with pytest.raises(ValueError):
        init_weights(net, 0.0, nx.RngStream(0))


# --- Adam ----------------------------------------------------------------------


def test_adam_zero_grad():
    st = AdamState(lr=0.1)
    p = np.array([1.0, -2.0])
    np.testing.assert_array_equal(adam_step(st, p, np.zeros(2)), p)


def test_adam_first_step_is_sign():
    for g in (3.0, -0.02):
        st = AdamState(lr=0.1)
        p = adam_step(st, np.array([0.0]), Gradient(np.array([g])))
        ghat = abs(g)
        assert p[0] == pytest.approx(-0.1 * np.sign(g) / (1 + 1e-8 / ghat), rel=1e-12)


def test_adam_matches_reference_oracle():
    def oracle(p, steps, lr, b1=0.9, b2=0.999, eps=1e-8):
        m = v = 0.0
        for t in range(1, steps + 1):
            g = 2 * p
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            p = p - lr * (m / (1 - b1 ** t)) / (np.sqrt(v / (1 - b2 ** t)) + eps)
        return p

    st = AdamState(lr=0.1)
    p = np.array([1.0])
    for _ in range(10):
        p = adam_step(st, p, 2 * p)
    assert abs(p[0] - oracle(1.0, 10, 0.1)) <= 1e-12
    assert st.step == 10


def test_adam_shape_mismatch():
    with pytest.raises(ShapeError):
        adam_step(AdamState(), np.zeros(3), np.zeros(2))


# --- checkpoints -------------------------------------------------------------


@pytest.mark.parametrize("make", [
    lambda: TwoLayerDecoder(8, 4, rng=nx.RngStream(20)),
    lambda: ConvGenerator(4, channels=3),
    lambda: LinearNet(3, 2, out_channels=2),
])
def test_checkpoint_round_trip(tmp_path, make):
    net = init_weights(make(), 1.0, nx.RngStream(21))
    save_checkpoint(tmp_path / "w.bin", net)
    back = load_checkpoint(tmp_path / "w.bin")
    np.testing.assert_array_equal(back.weights, net.weights)
    x = np.ones(net.in_size)
    np.testing.assert_array_equal(back.forward(x), net.forward(x))


def test_checkpoint_truncated(tmp_path):
    net = init_weights(ConvGenerator(4, channels=3), 1.0, nx.RngStream(22))
    save_checkpoint(tmp_path / "w.bin", net)
    raw = (tmp_path / "w.bin").read_bytes()
    (tmp_path / "bad.bin").write_bytes(raw[:-8])
    with pytest.raises(ShapeError):
        load_checkpoint(tmp_path / "bad.bin")
