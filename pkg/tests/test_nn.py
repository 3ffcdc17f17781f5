import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from handbio.nn import (SGD, AvgPool1d, Conv2d, DataError, DepthConcat, Dropout, Flatten,
                        Linear, LoadError, MaxPool2d, ParameterError, ReLU, ShapeError,
                        SoftmaxCrossEntropy, StateError, TrainHyper, build_two_stream,
                        desk_config, forward_features, learning_rates, load_model,
                        luma_init_conv1, paper_config, predict_gender, save_model, to_nchw,
                        train_joint, train_stage1, train_two_stage)

import oracles


# -- finite differences ----------------------------------------------------------------

def _rel_err(a, b):
    return np.linalg.norm(a - b) / max(np.linalg.norm(a) + np.linalg.norm(b), 1e-12)


def _numeric_grad(f, x, h=1e-6):
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        old = x[idx]
        x[idx] = old + h
        up = f()
        x[idx] = old - h
        down = f()
        x[idx] = old
        g[idx] = (up - down) / (2 * h)
    return g


def _check_layer(layer, x, train=False, reseed=None):
    """Analytic gradients of ``sum(R * layer(x))`` against central differences."""
    def run():
        if reseed is not None:
            reseed()
        return layer.forward(x, train)

    R = np.random.default_rng(99).standard_normal(run().shape)

    def loss():
        return float(np.sum(R * run()))

    run()
    dx = layer.backward(R)
    grads = {k: v.copy() for k, v in layer.grads.items()}
    assert _rel_err(dx, _numeric_grad(loss, x)) < 1e-4
    for k, p in layer.params.items():
        assert _rel_err(grads[k], _numeric_grad(loss, p)) < 1e-4, k


def _away_from_zero(rng, shape):
    x = rng.uniform(0.1, 1.0, shape)
    return x * rng.choice([-1.0, 1.0], shape)


@pytest.mark.parametrize("stride,pad", [(1, 0), (2, 1), (1, 2)])
def test_conv_gradients(stride, pad):
    rng = np.random.default_rng(0)
    layer = Conv2d(2, 3, 3, stride, pad, rng=rng)
    layer.params["b"][:] = rng.standard_normal(3)
    _check_layer(layer, rng.standard_normal((2, 2, 6, 5)))


def test_relu_gradients():
    rng = np.random.default_rng(1)
    _check_layer(ReLU(), _away_from_zero(rng, (3, 7)))


def test_maxpool_gradients():
    rng = np.random.default_rng(2)
    _check_layer(MaxPool2d(3, 2), rng.standard_normal((2, 2, 7, 7)))


def test_linear_gradients():
    rng = np.random.default_rng(3)
    layer = Linear(5, 4, rng=rng)
    layer.params["b"][:] = rng.standard_normal(4)
    _check_layer(layer, rng.standard_normal((3, 5)))


def test_dropout_gradients_use_forward_mask():
    rng = np.random.default_rng(4)
    layer = Dropout(0.4)

    def reseed():
        layer.rng = np.random.default_rng(7)
    _check_layer(layer, rng.standard_normal((4, 6)), train=True, reseed=reseed)


def test_avgpool_and_flatten_gradients():
    rng = np.random.default_rng(5)
    _check_layer(AvgPool1d(2, 2), rng.standard_normal((3, 9)))
    _check_layer(Flatten(), rng.standard_normal((2, 3, 2, 2)))


def test_depth_concat_gradients():
    rng = np.random.default_rng(6)
    a, b = rng.standard_normal((2, 3)), rng.standard_normal((2, 4))
    layer = DepthConcat()
    R = rng.standard_normal((2, 7))
    layer.forward([a, b])
    da, db = layer.backward(R)

    def loss():
        return float(np.sum(R * layer.forward([a, b])))
    assert _rel_err(da, _numeric_grad(loss, a)) < 1e-4
    assert _rel_err(db, _numeric_grad(loss, b)) < 1e-4


def test_softmax_xent_gradients():
    rng = np.random.default_rng(7)
    x = rng.standard_normal((4, 3))
    labels = np.array([0, 2, 1, 2])
    layer = SoftmaxCrossEntropy()

    def loss():
        layer.forward(x)
        return layer.loss(labels)
    loss()
    assert _rel_err(layer.backward(), _numeric_grad(loss, x)) < 1e-4


def test_whole_model_gradients():
    cfg = desk_config()
    model = build_two_stream(cfg, seed=3)
    rng = np.random.default_rng(8)
    low, high = rng.random((2, 3, 32, 32)), rng.random((2, 1, 32, 32))
    labels = np.array([0, 1])

    def loss():
        model.forward(low, high)
        return model.loss(labels)
    loss()
    model.backward()
    for key in ("s1.conv1.b", "s2.fc10.W", "fusion.b", "head.W"):
        p = model.named_params()[key]
        g = model.named_grads()[key].copy()
        # a handful of coordinates keeps the check fast
        flat = p.reshape(-1)
        idx = np.random.default_rng(9).choice(flat.size, min(6, flat.size), replace=False)
        for i in idx:
            old = flat[i]
            flat[i] = old + 1e-6
            up = loss()
            flat[i] = old - 1e-6
            down = loss()
            flat[i] = old
            num = (up - down) / 2e-6
            assert abs(g.reshape(-1)[i] - num) <= 1e-4 * max(abs(num), 1e-3), key


# -- forward semantics ----------------------------------------------------------------------

def test_fc_scalar():
    layer = Linear(1, 1)
    layer.params["W"][:] = 3.0
    layer.params["b"][:] = -1.0
    assert layer.forward(np.array([[2.0]]))[0, 0] == 5.0


def test_fc_weight_gradient_is_outer_product():
    layer = Linear(3, 2)
    x, g = np.array([[1.0, 2.0, 3.0]]), np.array([[0.5, -1.0]])
    layer.forward(x)
    layer.backward(g)
    assert np.array_equal(layer.grads["W"], np.outer(x[0], g[0]))


def test_relu_values_and_flat_gradient():
    layer = ReLU()
    assert np.array_equal(layer.forward(np.array([[-1.0, 2.0]])), [[0.0, 2.0]])
    assert np.array_equal(layer.backward(np.array([[5.0, 5.0]])), [[0.0, 5.0]])


def test_conv_hand_example():
    x = np.arange(9.0).reshape(1, 1, 3, 3)
    layer = Conv2d(1, 1, 2)
    layer.params["W"][:] = np.array([[1.0, 2.0], [3.0, 4.0]])
    layer.params["b"][:] = 0.5
    want = np.array([[0 + 2 + 9 + 16, 1 + 4 + 12 + 20], [3 + 8 + 18 + 28, 4 + 10 + 21 + 32]]) + 0.5
    assert np.array_equal(layer.forward(x)[0, 0], want)


@pytest.mark.parametrize("stride,pad", [(1, 0), (2, 1), (3, 2)])
def test_conv_matches_loop_oracle(stride, pad):
    rng = np.random.default_rng(10)
    layer = Conv2d(3, 4, 3, stride, pad, rng=rng)
    layer.params["b"][:] = rng.standard_normal(4)
    x = rng.standard_normal((2, 3, 8, 7))
    want = oracles.conv2d_loop(x, layer.params["W"], layer.params["b"], stride, pad)
    assert np.max(np.abs(layer.forward(x) - want)) < 1e-12


def test_dropout_modes():
    x = np.ones((200, 50))
    layer = Dropout(0.5)
    assert np.array_equal(layer.forward(x, train=False), x)
    y = layer.forward(x, train=True)
    assert set(np.unique(y)) <= {0.0, 2.0}
    assert 0.4 < np.mean(y == 0) < 0.6
    with pytest.raises(ParameterError):
        Dropout(1.0)


def test_avgpool_halves_length():
    out = AvgPool1d(2, 2).forward(np.array([[1.0, 3.0, 5.0, 9.0]]))
    assert np.array_equal(out, [[2.0, 7.0]])


def test_backward_without_forward():
    with pytest.raises(StateError):
        Dropout(0.5).backward(np.ones(3))
    with pytest.raises(StateError):
        Linear(2, 2).backward(np.ones((1, 2)))


def test_shape_errors():
    with pytest.raises(ShapeError):
        Linear(3, 2).forward(np.ones((1, 4)))
    with pytest.raises(ShapeError):
        Conv2d(3, 2, 3).forward(np.ones((1, 1, 5, 5)))


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=2, max_size=6))
def test_softmax_is_simplex_point(logits):
    p = SoftmaxCrossEntropy().forward(np.array([logits]))
    assert np.all(p >= 0) and abs(p.sum() - 1) < 1e-6


# -- luma initialization ----------------------------------------------------------------------

def test_luma_equal_channels():
    w = np.full((11, 11, 3, 96), 2.0)
    assert np.allclose(luma_init_conv1(w), 2.0 * 0.9999, atol=1e-12)
    assert luma_init_conv1(w).shape == (11, 11, 1, 96)


def test_luma_single_red_tap():
    w = np.zeros((11, 11, 3, 96))
    w[4, 5, 0, 7] = 1.0
    out = luma_init_conv1(w)
    assert out[4, 5, 0, 7] == 0.2989 and np.count_nonzero(out) == 1


def test_luma_matches_matrix_vector_loop():
    w = np.random.default_rng(11).standard_normal((121, 3))
    out = luma_init_conv1(w, axis=1)[:, 0]
    want = np.array([0.2989 * r + 0.5870 * g + 0.1140 * b for r, g, b in w])
    assert np.array_equal(out, want)


def test_luma_rejects_wrong_channel_axis():
    with pytest.raises(ShapeError):
        luma_init_conv1(np.zeros((11, 11, 4, 96)))


@settings(max_examples=20, deadline=None)
@given(st.permutations(list(range(8))))
def test_luma_commutes_with_filter_permutation(perm):
    w = np.random.default_rng(12).standard_normal((3, 3, 3, 8))
    assert np.array_equal(luma_init_conv1(w[..., perm]), luma_init_conv1(w)[..., perm])


# -- architecture -----------------------------------------------------------------------------

@pytest.fixture(scope="module")
def paper_model():
    return build_two_stream(paper_config(), seed=0)


def test_paper_dims(paper_model):
    cfg = paper_config()
    assert cfg.stream1.backbone_fc == (4096, 4096) and cfg.stream1.new_fc == (2048, 531)
    assert cfg.stream2.new_fc == (2048, 2048, 531)
    assert cfg.fusion_in == 1062 and cfg.stream2.in_channels == 1
    p = paper_model.named_params()
    assert p["s1.fc8.W"].shape == (4096, 2048) and p["s1.fc9.W"].shape == (2048, 531)
    assert p["s2.fc10.W"].shape == (2048, 531) and p["fusion.W"].shape == (1062, 1062)
    assert p["head.W"].shape == (531, 2)


def test_paper_forward_probabilities(paper_model):
    rng = np.random.default_rng(13)
    paper_model.trained = True
    try:
        cls, probs = predict_gender(paper_model, rng.random((224, 224, 3)), rng.random((224, 224, 1)))
        taps = forward_features(paper_model, rng.random((224, 224, 3)), rng.random((224, 224, 1)))
    finally:
        paper_model.trained = False
    assert probs.shape == (2,) and abs(probs.sum() - 1) < 1e-6
    assert cls == ("male", "female")[int(np.argmax(probs))]
    assert [len(taps[k]) for k in ("fc9_s1", "fc10_s2", "fusion")] == [531, 531, 1062]
    assert len(taps["concat"]) == 531 + 531 + 1062


def test_paper_learning_rate_map(paper_model):
    lrs = learning_rates(paper_model.param_layers(), TrainHyper())
    for name, lr in lrs.items():
        leaf = name.split(".")[-1]
        if leaf.startswith("conv") or leaf in ("fc6", "fc7"):
            assert lr == 1e-4, name
        else:
            assert lr == 0.002, name
    assert lrs["s2.fc10"] == 0.002 and lrs["fusion"] == 0.002 and lrs["s1.conv1"] == 1e-4


def test_last_fc_has_no_activation_or_dropout():
    model = build_two_stream(desk_config())
    for stream in (model.stream1, model.stream2):
        assert isinstance(stream.layers[-1], Linear)
        assert stream.tap_name == stream.layers[-1].name


def test_reduction_layer_cannot_widen():
    from handbio.nn import ConvSpec, StreamSpec, TwoStreamConfig
    s = StreamSpec(1, (ConvSpec(2, 3),), (), (64,))
    with pytest.raises(ShapeError):
        build_two_stream(TwoStreamConfig(6, s, s))


def test_untrained_model_rejected():
    model = build_two_stream(desk_config())
    with pytest.raises(StateError):
        forward_features(model, np.zeros((32, 32, 3)), np.zeros((32, 32, 1)))
    with pytest.raises(StateError):
        predict_gender(model, np.zeros((32, 32, 3)), np.zeros((32, 32, 1)))


# -- persistence ------------------------------------------------------------------------------

def test_save_load_bit_identical(tmp_path):
    model = build_two_stream(desk_config(), seed=5)
    model.trained = True
    rng = np.random.default_rng(14)
    low, high = rng.random((3, 32, 32, 3)), rng.random((3, 32, 32, 1))
    save_model(model, tmp_path / "m.hbw")
    back = load_model(tmp_path / "m.hbw")
    a, b = forward_features(model, low, high), forward_features(back, low, high)
    assert all(np.array_equal(a[k], b[k]) for k in a)
    assert np.array_equal(predict_gender(model, low, high)[1], predict_gender(back, low, high)[1])


def test_load_shape_mismatch_names_layer(tmp_path):
    model = build_two_stream(desk_config())
    with pytest.raises(LoadError, match="s1.fc8.W"):
        model.set_params({"s1.fc8.W": np.zeros((3, 3))})


def test_build_from_weights_file(tmp_path):
    model = build_two_stream(desk_config(), seed=1)
    save_model(model, tmp_path / "m.hbw")
    again = build_two_stream(desk_config(), seed=2, weights=tmp_path / "m.hbw")
    assert all(np.array_equal(v, again.named_params()[k]) for k, v in model.named_params().items())


# -- training ---------------------------------------------------------------------------------

def test_momentum_zero_is_plain_gradient_step():
    layer = Linear(3, 2, rng=np.random.default_rng(15))
    layer.grads = {"W": np.ones((3, 2)), "b": np.full(2, 2.0)}
    before = {k: v.copy() for k, v in layer.params.items()}
    SGD([layer], {layer.name: 0.1}, momentum=0.0).step()
    assert np.array_equal(layer.params["W"], before["W"] - 0.1 * np.ones((3, 2)))
    assert np.array_equal(layer.params["b"], before["b"] - 0.1 * np.full(2, 2.0))


def test_hyper_validation():
    with pytest.raises(ValueError):
        TrainHyper(lr_new=0)
    with pytest.raises(ValueError):
        TrainHyper(momentum=1.0)


def _separable(n=48, seed=0):
    """Dark images for class 0, bright ones for class 1, with texture noise."""
    rng = np.random.default_rng(seed)
    labels = np.arange(n) % 2
    base = np.where(labels == 1, 0.7, 0.3)[:, None, None, None]
    low = np.clip(base + 0.1 * rng.standard_normal((n, 3, 32, 32)), 0, 1)
    high = np.clip(base + 0.1 * rng.standard_normal((n, 1, 32, 32)), 0, 1)
    return low, high, labels


def test_stage1_reaches_perfect_train_accuracy():
    low, high, labels = _separable(128)
    for stream, images in ((1, low), (2, high)):
        log = []
        train_stage1(build_two_stream(desk_config(), seed=0), stream, images, labels,
                     TrainHyper.desk(), log)
        epochs = [row for row in log if row[2] == "train"]
        assert len(epochs) <= 20
        assert log[-1][2] == "eval" and log[-1][4] == 1.0


def test_joint_no_worse_than_best_single_stream():
    low, high, labels = _separable(128, seed=2)
    # weaken the color stream so the two streams differ
    low = np.clip(0.5 + 0.2 * (low - 0.5) + 0.15 * np.random.default_rng(3).standard_normal(low.shape), 0, 1)
    log = []
    train_two_stage(build_two_stream(desk_config(), seed=6), low, high, labels, TrainHyper.desk(), log)
    final = {row[0]: row[4] for row in log if row[2] == "eval"}
    assert final["joint"] >= max(final["stage1-s1"], final["stage1-s2"]) - 0.02


def test_stage1_rejects_bad_data():
    model = build_two_stream(desk_config())
    with pytest.raises(DataError):
        train_stage1(model, 1, np.zeros((0, 3, 32, 32)), np.zeros(0, int), TrainHyper.desk())
    with pytest.raises(DataError):
        train_stage1(model, 1, np.zeros((2, 3, 32, 32)), np.array([0, 2]), TrainHyper.desk())


def test_joint_training_deterministic_and_finite():
    low, high, labels = _separable(24, seed=1)
    hyper = TrainHyper.desk(epochs_stage1=(2, 2), epochs_joint=(2, 2))
    runs = []
    for _ in range(2):
        log = []
        model = train_two_stage(build_two_stream(desk_config(), seed=4), low, high, labels,
                                hyper, log)
        assert all(np.isfinite(row[3]) for row in log)
        runs.append(model.named_params())
    assert all(np.array_equal(runs[0][k], runs[1][k]) for k in runs[0])


def test_joint_requires_matching_inputs():
    low, high, labels = _separable(8)
    with pytest.raises(DataError):
        train_joint(build_two_stream(desk_config()), low, high[:4], labels, TrainHyper.desk())


def test_nchw_layout():
    imgs = np.random.default_rng(16).random((2, 5, 4, 3))
    out = to_nchw(imgs)
    assert out.shape == (2, 3, 5, 4) and out[1, 2, 3, 1] == imgs[1, 3, 1, 2]
