import numpy as np
import pytest

from otrom.neuralnet import (
    LayerSpec,
    NetworkParams,
    backward,
    build_conv_autoencoder,
    build_ff_autoencoder,
    forward,
    forward_with_latent,
    init_weights,
    parameter_count,
)


def single_layer_net(spec, seed=0, input_shape=None):
    layers = (spec,)
    return NetworkParams(
        layers=layers,
        weights=init_weights(layers, seed),
        rng_seed=seed,
        input_shape=input_shape,
    )


def loss_through(net, X, R, weights=None):
    out, _ = forward(net, X, weights=weights)
    return float(np.sum(out * R))


def check_input_grad(net, X, rtol, n_probes, rng):
    out, caches = forward(net, X)
    R = rng.normal(size=out.shape)
    gX, _ = backward(net, caches, R)
    h = 1e-6
    flat = X.ravel()
    for idx in rng.choice(flat.size, size=min(n_probes, flat.size), replace=False):
        xp = X.copy().ravel(); xp[idx] += h
        xm = X.copy().ravel(); xm[idx] -= h
        fd = (loss_through(net, xp.reshape(X.shape), R)
              - loss_through(net, xm.reshape(X.shape), R)) / (2 * h)
        ana = gX.ravel()[idx]
        assert abs(ana - fd) <= rtol * max(1.0, abs(fd)), (idx, ana, fd)


def check_weight_grad(net, X, rtol, n_probes, rng):
    out, caches = forward(net, X)
    R = rng.normal(size=out.shape)
    _, grads = backward(net, caches, R)
    h = 1e-6
    for li, lw in enumerate(net.weights):
        for ai, a in enumerate(lw):
            flat = a.ravel()
            take = min(max(n_probes // max(flat.size // 10, 1), 3), flat.size)
            for idx in rng.choice(flat.size, size=take, replace=False):
                w_mut = net.mutable_weights()
                w_mut[li][ai].ravel()[idx] += h
                fp = loss_through(net, X, R, weights=w_mut)
                w_mut[li][ai].ravel()[idx] -= 2 * h
                fm = loss_through(net, X, R, weights=w_mut)
                fd = (fp - fm) / (2 * h)
                ana = grads[li][ai].ravel()[idx]
                assert abs(ana - fd) <= rtol * max(1.0, abs(fd)), (li, ai, idx, ana, fd)


class TestLayerGradients:
    def test_dense_backward_matches_fd(self):
        rng = np.random.default_rng(0)
        net = single_layer_net(LayerSpec(kind="dense", in_size=7, out_size=5),
                               input_shape=(7,))
        X = rng.normal(size=(4, 7))
        check_input_grad(net, X, 1e-6, 60, rng)
        check_weight_grad(net, X, 1e-6, 60, rng)

    def test_activation_backward_matches_fd(self):
        rng = np.random.default_rng(1)
        net = single_layer_net(LayerSpec(kind="activation", activation="elu"),
                               input_shape=(9,))
        X = rng.normal(size=(5, 9))
        check_input_grad(net, X, 1e-5, 45, rng)

    def test_conv_backward_matches_fd(self):
        rng = np.random.default_rng(2)
        spec = LayerSpec(kind="conv", in_channels=2, out_channels=3, filter_size=4,
                         stride=2, padding=1, height=8, width=8)
        net = single_layer_net(spec, input_shape=(2, 8, 8))
        X = rng.normal(size=(3, 2, 8, 8))
        check_input_grad(net, X, 1e-5, 60, rng)
        check_weight_grad(net, X, 1e-5, 60, rng)

    def test_conv_transpose_backward_matches_fd(self):
        rng = np.random.default_rng(3)
        spec = LayerSpec(kind="conv_transpose", in_channels=3, out_channels=2,
                         filter_size=4, stride=2, padding=1, height=4, width=4)
        net = single_layer_net(spec, input_shape=(3, 4, 4))
        X = rng.normal(size=(2, 3, 4, 4))
        check_input_grad(net, X, 1e-5, 60, rng)
        check_weight_grad(net, X, 1e-5, 60, rng)

    def test_stacked_network_backward_matches_fd(self):
        rng = np.random.default_rng(4)
        net = build_ff_autoencoder(12, 2, seed=5)
        # dropout layers are identity in eval mode, exercised by forward here
        X = rng.normal(size=(3, 12))
        check_input_grad(net, X, 1e-5, 40, rng)

    def test_conv_adjoint_identity(self):
        rng = np.random.default_rng(5)
        conv = LayerSpec(kind="conv", in_channels=2, out_channels=4, filter_size=3,
                         stride=2, padding=1, height=9, width=9)
        convT = LayerSpec(kind="conv_transpose", in_channels=4, out_channels=2,
                          filter_size=3, stride=2, padding=1, height=5, width=5)
        K = rng.normal(size=(4, 2, 3, 3))
        net_c = NetworkParams(layers=(conv,), weights=((K, np.zeros(4)),),
                              rng_seed=0, input_shape=(2, 9, 9))
        net_t = NetworkParams(layers=(convT,), weights=((K, np.zeros(2)),),
                              rng_seed=0, input_shape=(4, 5, 5))
        x = rng.normal(size=(1, 2, 9, 9))
        y = rng.normal(size=(1, 4, 5, 5))
        cx, _ = forward(net_c, x)
        ty, _ = forward(net_t, y)
        assert float(np.sum(cx * y)) == pytest.approx(float(np.sum(x * ty)),
                                                      rel=1e-10)

    def test_conv_against_nested_loop_oracle(self):
        rng = np.random.default_rng(6)
        spec = LayerSpec(kind="conv", in_channels=1, out_channels=2, filter_size=3,
                         stride=1, padding=1, height=5, width=5)
        net = single_layer_net(spec, seed=7, input_shape=(1, 5, 5))
        X = rng.normal(size=(1, 1, 5, 5))
        out, _ = forward(net, X)
        K, b = net.weights[0]
        Xp = np.pad(X, ((0, 0), (0, 0), (1, 1), (1, 1)))
        ref = np.zeros_like(out)
        for co in range(2):
            for oy in range(5):
                for ox in range(5):
                    acc = 0.0
                    for fy in range(3):
                        for fx in range(3):
                            acc += K[co, 0, fy, fx] * Xp[0, 0, oy + fy, ox + fx]
                    ref[0, co, oy, ox] = acc + b[co]
        np.testing.assert_allclose(out, ref, atol=1e-12)


class TestDropoutAndDeterminism:
    def test_eval_mode_dropout_is_identity(self):
        net = single_layer_net(LayerSpec(kind="dropout", keep_prob=0.5),
                               input_shape=(6,))
        X = np.random.default_rng(8).normal(size=(4, 6))
        out, _ = forward(net, X, train_mode=False)
        assert np.array_equal(out, X)

    def test_keep_prob_one_matches_eval(self):
        net = single_layer_net(LayerSpec(kind="dropout", keep_prob=1.0),
                               input_shape=(6,))
        X = np.random.default_rng(9).normal(size=(4, 6))
        out_train, _ = forward(net, X, train_mode=True,
                               rng=np.random.default_rng(0))
        out_eval, _ = forward(net, X, train_mode=False)
        assert np.array_equal(out_train, out_eval)

    def test_train_mode_masks_are_seeded(self):
        net = single_layer_net(LayerSpec(kind="dropout", keep_prob=0.7),
                               input_shape=(50,))
        X = np.ones((2, 50))
        a, _ = forward(net, X, train_mode=True, rng=np.random.default_rng(3))
        b, _ = forward(net, X, train_mode=True, rng=np.random.default_rng(3))
        assert np.array_equal(a, b)


class TestBuilders:
    def test_ff_widths_follow_table(self):
        net = build_ff_autoencoder(1024, 5)
        dense = [l for l in net.layers if l.kind == "dense"]
        enc = [(d.in_size, d.out_size) for d in dense[:7]]
        assert enc == [(1024, 64), (64, 128), (128, 256), (256, 256),
                       (256, 128), (128, 64), (64, 5)]
        dec = [(d.in_size, d.out_size) for d in dense[7:]]
        assert dec == [(5, 64), (64, 128), (128, 256), (256, 256),
                       (256, 128), (128, 64), (64, 1024)]

    def test_ff_parameter_count_matches_hand_sum(self):
        net = build_ff_autoencoder(1024, 5)
        widths_enc = [1024, 64, 128, 256, 256, 128, 64, 5]
        widths_dec = [5, 64, 128, 256, 256, 128, 64, 1024]
        expected = sum((i + 1) * o for i, o in zip(widths_enc[:-1], widths_enc[1:]))
        expected += sum((i + 1) * o for i, o in zip(widths_dec[:-1], widths_dec[1:]))
        assert parameter_count(net) == expected

    def test_ff_dropout_in_encoder_only(self):
        net = build_ff_autoencoder(100, 3)
        drop_positions = [i for i, l in enumerate(net.layers) if l.kind == "dropout"]
        assert len(drop_positions) == 5
        assert all(i < net.bottleneck_index for i in drop_positions)

    def test_zero_initialized_ff_maps_zero_to_zero(self):
        net = build_ff_autoencoder(20, 2)
        zero_w = tuple(tuple(np.zeros_like(a) for a in lw) for lw in net.weights)
        net0 = net.with_weights([list(lw) for lw in zero_w])
        out, _ = forward(net0, np.zeros((1, 20)))
        np.testing.assert_allclose(out, 0.0)

    def test_cae_spatial_chain(self):
        net = build_conv_autoencoder(32, 32, 5)
        convs = [l for l in net.layers if l.kind == "conv" and l.out_channels != 1]
        sizes = [c.height for c in convs]
        assert sizes == [32, 16, 8, 4]
        flat_dense = [l for l in net.layers if l.kind == "dense"][0]
        assert flat_dense.in_size == 64 * 2 * 2 == 256

    def test_cae_round_trip_shape(self):
        net = build_conv_autoencoder(32, 32, 5)
        X = np.random.default_rng(10).normal(size=(2, 1, 32, 32))
        out, _ = forward(net, X)
        assert out.shape == (2, 1, 32, 32)

    def test_cae_zero_weights_output_bias_image(self):
        net = build_conv_autoencoder(32, 32, 3)
        w = net.mutable_weights()
        for lw in w:
            for a in lw:
                a[...] = 0.0
        w[-1][1][...] = 1.5  # final conv bias
        net0 = net.with_weights(w)
        out, _ = forward(net0, np.random.default_rng(11).normal(size=(1, 1, 32, 32)))
        np.testing.assert_allclose(out, 1.5)

    def test_cae_latent_shape_and_decoder_split(self):
        net = build_conv_autoencoder(32, 32, 4)
        X = np.random.default_rng(12).normal(size=(2, 1, 32, 32))
        out, latent, _ = forward_with_latent(net, X)
        assert latent.shape == (2, 4)
        dec = net.decoder()
        out_dec, _ = forward(dec, latent)
        np.testing.assert_allclose(out_dec, out, atol=1e-12)

    def test_cae_rejects_bad_sizes(self):
        with pytest.raises(ValueError):
            build_conv_autoencoder(30, 30, 5)

    def test_identity_dense_layer_passthrough(self):
        spec = LayerSpec(kind="dense", in_size=4, out_size=4)
        net = NetworkParams(layers=(spec,), weights=((np.eye(4), np.zeros(4)),),
                            rng_seed=0, input_shape=(4,))
        X = np.random.default_rng(13).normal(size=(3, 4))
        out, _ = forward(net, X)
        np.testing.assert_allclose(out, X)
