"""Engine correctness: forward oracles, gradients, training, persistence."""

import numpy as np
import pytest

from advlab import nn


def _tiny_model(seed=0):
    # 8x8 input keeps full finite differencing affordable
    return nn.build_model(input_shape=(8, 8, 3), conv_channels=(3, 2),
                          head_dims=(6, 2), seed=seed)


def _loss(model, image, label):
    probs, _ = model.predict(image)
    return -np.log(max(probs[label], 1e-12))


def fd_gradient(model, image, label, h=1e-4):
    g = np.zeros_like(image)
    flat = g.reshape(-1)
    x = image.reshape(-1)
    for k in range(x.size):
        orig = x[k]
        x[k] = orig + h
        up = _loss(model, image, label)
        x[k] = orig - h
        dn = _loss(model, image, label)
        x[k] = orig
        flat[k] = (up - dn) / (2 * h)
    return g


# ---------------------------------------------------------------------------
# forward oracles

def test_conv_matches_bruteforce_same_padding():
    rng = np.random.default_rng(0)
    x = rng.random((1, 6, 6, 2))
    layer = nn.ConvLayer(rng.normal(size=(3, 3, 2, 4)), rng.normal(size=4))
    got = nn.conv_forward(x, layer)

    xp = np.pad(x[0], ((1, 1), (1, 1), (0, 0)))
    want = np.zeros((6, 6, 4))
    for i in range(6):
        for j in range(6):
            patch = xp[i:i + 3, j:j + 3, :]
            for o in range(4):
                want[i, j, o] = (patch * layer.kernel[:, :, :, o]).sum() \
                    + layer.bias[o]
    assert np.max(np.abs(got[0] - want)) < 1e-12


def test_maxpool_first_max_tie_break():
    # all-equal window: gradient must land on the first (top-left) slot
    x = np.ones((1, 2, 2, 1))
    out, idx = nn.maxpool_forward(x)
    assert out.shape == (1, 1, 1, 1) and out[0, 0, 0, 0] == 1.0
    back = nn.maxpool_backward(np.ones((1, 1, 1, 1)), idx, (1, 2, 2, 1))
    assert back[0, 0, 0, 0] == 1.0
    assert back.sum() == 1.0


def test_maxpool_selects_maximum():
    x = np.arange(16, dtype=np.float64).reshape(1, 4, 4, 1)
    out, _ = nn.maxpool_forward(x)
    assert np.array_equal(out[0, :, :, 0], [[5.0, 7.0], [13.0, 15.0]])


def test_softmax_overflow_safe():
    layer = nn.DenseLayer(np.array([[1000.0], [-1000.0]]), np.zeros(2),
                          "softmax")
    head = nn.DenseHead([layer])
    probs, _ = head.forward(np.array([1.0]))
    assert np.isfinite(probs).all()
    assert abs(probs.sum() - 1.0) < 1e-12


def test_dense_layer_shape_validation():
    with pytest.raises(nn.ConfigurationError):
        nn.DenseLayer(np.zeros((3, 2)), np.zeros(4), "relu")
    with pytest.raises(nn.ConfigurationError):
        nn.DenseLayer(np.zeros((3, 2)), np.zeros(3), "swish")


def test_batch_and_single_extractor_agree():
    model = _tiny_model()
    rng = np.random.default_rng(1)
    batch = rng.random((5, 8, 8, 3))
    feats, _ = model.extractor.forward_cached(batch)
    for i in range(5):
        single = model.extractor.forward(batch[i])
        assert np.max(np.abs(single - feats[i])) < 1e-12


# ---------------------------------------------------------------------------
# gradients

def test_input_gradient_matches_finite_differences():
    rng = np.random.default_rng(2)
    model = _tiny_model(seed=3)
    image = rng.random((8, 8, 3))
    analytic = model.input_gradient(image, 1)
    numeric = fd_gradient(model, image, 1)
    denom = max(np.linalg.norm(numeric), 1e-12)
    assert np.linalg.norm(analytic - numeric) / denom < 1e-4


def test_head_gradient_matches_finite_differences():
    rng = np.random.default_rng(4)
    head = nn.DenseHead([
        nn.DenseLayer(rng.normal(size=(5, 4)), rng.normal(size=5), "relu"),
        nn.DenseLayer(rng.normal(size=(2, 5)), rng.normal(size=2), "softmax"),
    ])
    feats = rng.random(4) + 0.1
    analytic = nn.head_input_gradient(head, feats, 0)

    def loss(f):
        probs, _ = head.forward(f)
        return -np.log(probs[0])

    h = 1e-6
    numeric = np.zeros(4)
    for k in range(4):
        e = np.zeros(4)
        e[k] = h
        numeric[k] = (loss(feats + e) - loss(feats - e)) / (2 * h)
    assert np.max(np.abs(analytic - numeric)) < 1e-6


# ---------------------------------------------------------------------------
# training

def test_zero_epoch_training_returns_identical_head(small_model):
    head = small_model.head
    out = nn.train_head(head, np.zeros((4, head.input_dim)),
                        np.zeros(4, dtype=np.int64),
                        nn.TrainConfig(epochs=0))
    assert out is not head
    for a, b in zip(head.layers, out.layers):
        assert np.array_equal(a.weights, b.weights)
        assert np.array_equal(a.bias, b.bias)


def test_training_divergence_raises(small_model):
    # features large enough to overflow the first matmul into non-finite
    feats = np.full((8, small_model.head.input_dim), 1e300)
    with pytest.raises(nn.TrainingDivergedError):
        nn.train_head(small_model.head, feats, np.zeros(8, dtype=np.int64),
                      nn.TrainConfig(epochs=2, learning_rate=10.0))


def test_training_is_seeded(small_ds):
    kw = dict(config=nn.TrainConfig(epochs=1, learning_rate=0.01, seed=5),
              seed=5)
    a = nn.train_model(small_ds.train_images[:48], small_ds.train_labels[:48],
                       **kw)
    b = nn.train_model(small_ds.train_images[:48], small_ds.train_labels[:48],
                       **kw)
    assert a.fingerprint() == b.fingerprint()


def test_trained_extractor_is_frozen(small_model):
    assert small_model.extractor.frozen
    assert not small_model.extractor.conv1.kernel.flags.writeable
    with pytest.raises(ValueError):
        small_model.extractor.conv1.kernel[0, 0, 0, 0] = 0.0


def test_accuracy_exact_fraction():
    class Stub:
        def predict(self, image):
            return np.array([0.9, 0.1]), None

    images = np.zeros((3, 2, 2, 3))
    assert nn.accuracy(Stub(), images, [0, 1, 0]) == 2 / 3
    with pytest.raises(ValueError):
        nn.accuracy(Stub(), np.zeros((0, 2, 2, 3)), [])


def test_cross_entropy_clips_zero_probability():
    val = nn.cross_entropy(np.array([[0.0, 1.0]]), np.array([0]))
    assert np.isfinite(val)


# ---------------------------------------------------------------------------
# persistence

def test_model_round_trip_bit_exact(tmp_path, small_model):
    path = tmp_path / "model.json"
    nn.save_model(small_model, path)
    loaded = nn.load_model(path)
    assert loaded.fingerprint() == small_model.fingerprint()
    assert loaded.extractor.frozen == small_model.extractor.frozen
    rng = np.random.default_rng(9)
    img = rng.random(small_model.extractor.input_shape)
    pa, _ = small_model.predict(img)
    pb, _ = loaded.predict(img)
    assert np.array_equal(pa, pb)


def test_model_format_version_checked(tmp_path, small_model):
    path = tmp_path / "model.json"
    nn.save_model(small_model, path)
    doc = path.read_text().replace('"format_version": 1', '"format_version": 99')
    path.write_text(doc)
    with pytest.raises(nn.ConfigurationError):
        nn.load_model(path)


def test_fingerprint_tracks_weights():
    a = _tiny_model(seed=1)
    b = _tiny_model(seed=1)
    c = _tiny_model(seed=2)
    assert a.fingerprint() == b.fingerprint()
    assert a.fingerprint() != c.fingerprint()
    b.head.layers[0].weights[0, 0] += 1e-9
    assert a.fingerprint() != b.fingerprint()
