"""Network forward/backward, training loop, and checkpoint round trips."""

import numpy as np
import numpy.testing as npt
import pytest

import oracles
from conftest import (
    blob_splits,
    conv_net,
    dense_net,
    dense_specs,
    image_batch,
    trained_dense_net,
)
from nullspace_unlearn import data, nn

# ---------------------------------------------------------------------------
# construction and initialization
# ---------------------------------------------------------------------------


def test_init_is_deterministic_and_bounded():
    a = dense_net(seed=7)
    b = dense_net(seed=7)
    c = dense_net(seed=8)
    for wa, wb in zip(a.weights, b.weights):
        npt.assert_array_equal(wa, wb)
    assert any((wa != wc).any() for wa, wc in zip(a.weights, c.weights))
    for spec, w in zip(a.specs, a.weights):
        rows, cols = spec.weight_shape()
        limit = np.sqrt(6.0 / (rows + cols))
        assert np.abs(w).max() <= limit


def test_network_shape_validation():
    specs = dense_specs()
    with pytest.raises(ValueError, match="final layer"):
        nn.Network(
            specs=(nn.LayerSpec(kind="dense", activation="relu", in_features=4, out_features=3),),
            weights=[np.zeros((3, 5))],
            input_shape=(4,),
        )
    with pytest.raises(ValueError, match="weight shape"):
        nn.Network(specs=specs, weights=[np.zeros((8, 5)), np.zeros((3, 8))], input_shape=(4,))
    with pytest.raises(ValueError, match="input features"):
        nn.Network(specs=specs, weights=[np.zeros((8, 5)), np.zeros((3, 9))], input_shape=(6,))
    with pytest.raises(ValueError, match="image input"):
        nn.init_network(
            (
                nn.LayerSpec(kind="conv", activation="relu", in_channels=1, out_channels=2, kernel_size=2),
                nn.LayerSpec(kind="dense", activation="identity", in_features=18, out_features=3),
            ),
            input_shape=(16,),
            seed=0,
        )


def test_layer_spec_validation():
    with pytest.raises(ValueError):
        nn.LayerSpec(kind="dense", activation="tanh", in_features=2, out_features=2)
    with pytest.raises(ValueError):
        nn.LayerSpec(kind="conv", activation="relu", in_channels=1, out_channels=2, kernel_size=0)


# ---------------------------------------------------------------------------
# forward pass
# ---------------------------------------------------------------------------


def test_forward_shapes_and_trace():
    net = dense_net(seed=1)
    x = np.random.default_rng(0).standard_normal((5, 4))
    logits, trace = nn.forward(net, x, record=True)
    assert logits.shape == (3, 5)
    assert len(trace.per_layer) == 2
    assert trace.per_layer[0].shape == (5, 5)  # 4 features + bias row, 5 samples
    assert trace.per_layer[1].shape == (9, 5)
    npt.assert_array_equal(trace.per_layer[0][-1], np.ones(5))
    npt.assert_array_equal(trace.per_layer[0][:-1], x.T)
    # Second layer's inputs are the first layer's relu outputs.
    assert (trace.per_layer[1][:-1] >= 0.0).all()


def test_forward_without_record_returns_none_trace():
    net = dense_net(seed=1)
    logits, trace = nn.forward(net, np.zeros((2, 4)))
    assert trace is None
    assert logits.shape == (3, 2)


def test_forward_rejects_wrong_width():
    net = dense_net(seed=1)
    with pytest.raises(ValueError):
        nn.forward(net, np.zeros((2, 5)))


def test_dense_forward_matches_manual_computation():
    net = dense_net(seed=3)
    x = np.array([[0.5, -1.0, 2.0, 0.25]])
    w0, w1 = net.weights
    h = np.maximum(w0 @ np.append(x[0], 1.0), 0.0)
    expect = w1 @ np.append(h, 1.0)
    logits, _ = nn.forward(net, x)
    npt.assert_allclose(logits[:, 0], expect, rtol=1e-15)


def test_conv_forward_matches_naive_oracle():
    net = conv_net(seed=5)
    x = image_batch(seed=6, n=4)
    maps = x.reshape(4, 1, 4, 4)
    ref_maps = oracles.naive_conv_forward(maps, net.weights[0], kernel_size=2, stride=1)
    hidden = np.maximum(ref_maps, 0.0).reshape(4, -1)
    expect = (net.weights[1] @ np.vstack([hidden.T, np.ones((1, 4))]))
    logits, _ = nn.forward(net, x)
    npt.assert_allclose(logits, expect, atol=1e-12)


def test_conv_forward_with_stride_matches_naive_oracle():
    specs = (
        nn.LayerSpec(kind="conv", activation="identity", in_channels=2, out_channels=3, kernel_size=2, stride=2),
        nn.LayerSpec(kind="dense", activation="identity", in_features=3 * 3 * 3, out_features=2),
    )
    net = nn.init_network(specs, input_shape=(2, 6, 6), seed=9)
    x = np.random.default_rng(10).standard_normal((3, 2 * 6 * 6))
    ref = oracles.naive_conv_forward(x.reshape(3, 2, 6, 6), net.weights[0], kernel_size=2, stride=2)
    flat = ref.reshape(3, -1)
    expect = net.weights[1] @ np.vstack([flat.T, np.ones((1, 3))])
    logits, _ = nn.forward(net, x)
    npt.assert_allclose(logits, expect, atol=1e-12)


def test_extract_patches_identity_kernel():
    maps = np.arange(2 * 3 * 3, dtype=np.float64).reshape(1, 2, 3, 3)
    cols = nn.extract_patches(maps, kernel_size=1, stride=1)
    # 1x1 kernel at stride 1 rearranges pixels channel-major per position.
    assert cols.shape == (2, 9)
    npt.assert_array_equal(cols[0], maps[0, 0].ravel())
    npt.assert_array_equal(cols[1], maps[0, 1].ravel())


def test_extract_patches_validation():
    with pytest.raises(ValueError):
        nn.extract_patches(np.zeros((1, 2, 2)), kernel_size=3)
    with pytest.raises(ValueError):
        nn.extract_patches(np.zeros((2, 2)), kernel_size=1)


def test_softmax_columns_sum_to_one():
    logits = np.random.default_rng(2).standard_normal((4, 7)) * 30.0
    p = nn.softmax(logits)
    npt.assert_allclose(p.sum(axis=0), np.ones(7), atol=1e-12)
    assert (p >= 0.0).all()


# ---------------------------------------------------------------------------
# gradients
# ---------------------------------------------------------------------------


def loss_closure(net, x, y):
    def fn(_weights):
        return nn.mean_loss(net, x, y)

    return fn


def test_dense_gradients_match_finite_differences():
    net = dense_net(seed=11)
    rng = np.random.default_rng(12)
    x = rng.standard_normal((6, 4))
    y = rng.integers(0, 3, size=6)
    loss, grads = nn.loss_and_grads(net, x, y)
    assert np.isfinite(loss)
    for li, i, j, fd in oracles.finite_difference_grads(loss_closure(net, x, y), net.weights, seed=13):
        npt.assert_allclose(grads.per_layer[li][i, j], fd, rtol=1e-6, atol=1e-8)


def test_conv_gradients_match_finite_differences():
    net = conv_net(seed=14)
    rng = np.random.default_rng(15)
    x = rng.uniform(0.0, 1.0, size=(5, 16))
    y = rng.integers(0, 3, size=5)
    _, grads = nn.loss_and_grads(net, x, y)
    for li, i, j, fd in oracles.finite_difference_grads(loss_closure(net, x, y), net.weights, seed=16):
        npt.assert_allclose(grads.per_layer[li][i, j], fd, rtol=1e-6, atol=1e-8)


def test_gradient_rows_lie_in_activation_span():
    # Each dense layer's gradient is a combination of that layer's input
    # columns; the least-squares residual against the recorded trace is zero.
    net = dense_net(seed=17)
    rng = np.random.default_rng(18)
    x = rng.standard_normal((6, 4))
    y = rng.integers(0, 3, size=6)
    _, trace = nn.forward(net, x, record=True)
    _, grads = nn.loss_and_grads(net, x, y)
    for g, r in zip(grads.per_layer, trace.per_layer):
        assert oracles.row_span_residual(g, r) <= 1e-8


def test_loss_and_grads_validation():
    net = dense_net(seed=1)
    with pytest.raises(ValueError):
        nn.loss_and_grads(net, np.zeros((0, 4)), np.zeros(0, dtype=int))
    with pytest.raises(ValueError):
        nn.loss_and_grads(net, np.zeros((2, 4)), [0])
    with pytest.raises(ValueError):
        nn.loss_and_grads(net, np.zeros((2, 4)), [0, 3])


def test_gradient_step_reduces_loss():
    net = dense_net(seed=19)
    rng = np.random.default_rng(20)
    x = rng.standard_normal((16, 4))
    y = rng.integers(0, 3, size=16)
    before, grads = nn.loss_and_grads(net, x, y)
    for w, g in zip(net.weights, grads.per_layer):
        w -= 0.05 * g
    after = nn.mean_loss(net, x, y)
    assert after < before


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------


def test_train_zero_epochs_is_identity():
    net = dense_net(seed=21)
    sp = blob_splits(seed=21)
    out = nn.train(net, sp.train, sp.val, nn.TrainSchedule(lr=0.1, epochs=0, batch_size=8))
    for w0, w1 in zip(net.weights, out.weights):
        npt.assert_array_equal(w0, w1)
    assert out.metadata["epochs_run"] == 0
    assert out is not net


def test_train_fits_the_blobs():
    net, sp = trained_dense_net(seed=22)
    assert nn.accuracy(net, sp.test.features, sp.test.labels) >= 0.9


def test_train_is_bit_deterministic():
    a, _ = trained_dense_net(seed=23, epochs=20)
    b, _ = trained_dense_net(seed=23, epochs=20)
    for wa, wb in zip(a.weights, b.weights):
        npt.assert_array_equal(wa, wb)


def test_train_milestones_decay_learning_rate():
    net = dense_net(seed=24)
    sp = blob_splits(seed=24)
    schedule = nn.TrainSchedule(
        lr=0.1, epochs=3, batch_size=16, milestones=(2,), gamma=0.5, patience=None, seed=0
    )
    out = nn.train(net, sp.train, sp.val, schedule)
    assert out.metadata["final_lr"] == pytest.approx(0.05)
    assert out.metadata["epochs_run"] == 3


def test_train_keeps_best_epoch_and_patience_stops():
    # Start from a fitted network, then "train" on deliberately shuffled labels
    # with a destructive step size: every epoch is strictly worse, so patience
    # triggers immediately and the returned weights are the untouched best.
    net, sp = trained_dense_net(seed=25)
    wrecked = data.Dataset(
        features=sp.train.features,
        labels=(sp.train.labels + 1) % 3,
        n_classes=3,
        provenance={},
    )
    schedule = nn.TrainSchedule(lr=5.0, epochs=40, batch_size=8, patience=2, seed=1)
    out = nn.train(net, wrecked, sp.val, schedule)
    assert out.metadata["epochs_run"] < 40
    assert out.metadata["best_epoch"] == 0
    for w0, w1 in zip(net.weights, out.weights):
        npt.assert_array_equal(w0, w1)


def test_train_ties_keep_later_epoch():
    # lr=0 never changes the weights, so validation accuracy ties every epoch
    # and the recorded best epoch is the last one.
    net = dense_net(seed=26)
    sp = blob_splits(seed=26)
    out = nn.train(net, sp.train, sp.val, nn.TrainSchedule(lr=0.0, epochs=4, batch_size=8, patience=2))
    assert out.metadata["best_epoch"] == 4
    assert out.metadata["epochs_run"] == 4
    for w0, w1 in zip(net.weights, out.weights):
        npt.assert_array_equal(w0, w1)


def test_train_schedule_validation():
    with pytest.raises(ValueError):
        nn.TrainSchedule(lr=-0.1, epochs=1, batch_size=1)
    with pytest.raises(ValueError):
        nn.TrainSchedule(lr=0.1, epochs=-1, batch_size=1)
    with pytest.raises(ValueError):
        nn.TrainSchedule(lr=0.1, epochs=1, batch_size=0)
    with pytest.raises(ValueError):
        nn.TrainSchedule(lr=0.1, epochs=1, batch_size=1, patience=0)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def test_checkpoint_round_trip_is_bit_exact(tmp_path):
    net, _ = trained_dense_net(seed=27, epochs=5)
    net.metadata["note"] = "round-trip"
    path = tmp_path / "net.json"
    nn.save_checkpoint(net, path)
    back = nn.load_checkpoint(path)
    assert back.specs == net.specs
    assert back.input_shape == net.input_shape
    assert back.seed == net.seed
    assert back.metadata == net.metadata
    for w0, w1 in zip(net.weights, back.weights):
        npt.assert_array_equal(w0, w1)
    # Saving the loaded network reproduces the file byte for byte.
    path2 = tmp_path / "net2.json"
    nn.save_checkpoint(back, path2)
    assert path.read_bytes() == path2.read_bytes()


def test_checkpoint_rejects_unknown_version(tmp_path):
    net = dense_net(seed=28)
    path = tmp_path / "net.json"
    nn.save_checkpoint(net, path)
    doc = path.read_text().replace('"format_version": 1', '"format_version": 99')
    path.write_text(doc)
    with pytest.raises(ValueError, match="format_version"):
        nn.load_checkpoint(path)


def test_conv_checkpoint_round_trip(tmp_path):
    net = conv_net(seed=29)
    path = tmp_path / "conv.json"
    nn.save_checkpoint(net, path)
    back = nn.load_checkpoint(path)
    assert back.specs == net.specs
    x = image_batch(seed=30, n=3)
    la, _ = nn.forward(net, x)
    lb, _ = nn.forward(back, x)
    npt.assert_array_equal(la, lb)
