"""Minimal feedforward neural-network engine.

A model is a frozen convolutional feature extractor followed by a small
retrainable dense head (two-class softmax output).  Everything runs on
float64 numpy arrays; forward passes can record all pre/post activations
(the raw material for behavior graphs) and exact gradients are available
both for the weights (training) and for the input pixels (attacks).

Single predictions always go through the batch code with N=1 so that a
prediction is bit-identical no matter which component requested it.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass

import numpy as np

logger = logging.getLogger(__name__)

ACTIVATIONS = ("relu", "identity", "softmax")

MODEL_FORMAT_VERSION = 1


class ConfigurationError(ValueError):
    """Model and input are structurally incompatible (shape mismatch etc.)."""


class TrainingDivergedError(RuntimeError):
    """Training produced a non-finite loss or non-finite weights."""


# ---------------------------------------------------------------------------
# activations

def relu(x):
    return np.maximum(x, 0.0)


def softmax(z):
    """Row-wise stable softmax for (N, K) input."""
    shifted = z - z.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def _apply_activation(z, kind):
    if kind == "relu":
        return relu(z)
    if kind == "identity":
        return z
    if kind == "softmax":
        return softmax(z)
    raise ConfigurationError(f"unknown activation {kind!r}")


# ---------------------------------------------------------------------------
# dense layers

@dataclass
class DenseLayer:
    """One fully connected layer: weights (out, in), bias (out,)."""

    weights: np.ndarray
    bias: np.ndarray
    activation: str

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.weights.ndim != 2 or self.bias.shape != (self.weights.shape[0],):
            raise ConfigurationError(
                f"inconsistent layer shapes: weights {self.weights.shape}, "
                f"bias {self.bias.shape}"
            )
        if self.activation not in ACTIVATIONS:
            raise ConfigurationError(f"unknown activation {self.activation!r}")

    @property
    def out_dim(self):
        return self.weights.shape[0]

    @property
    def in_dim(self):
        return self.weights.shape[1]

    def copy(self) -> "DenseLayer":
        return DenseLayer(self.weights.copy(), self.bias.copy(), self.activation)


@dataclass
class ActivationTrace:
    """All intermediate values of one forward pass through a dense stack."""

    features: np.ndarray          # the vector entering the first dense layer
    pre: list[np.ndarray]         # per layer, before the activation
    post: list[np.ndarray]        # per layer, after the activation


def dense_forward(layers, x):
    """Run a dense stack on a batch x of shape (N, in_dim).

    Returns (output, pres, posts) where pres/posts hold the per-layer
    (N, out_dim) pre- and post-activation values.
    """
    if x.ndim != 2 or x.shape[1] != layers[0].in_dim:
        raise ConfigurationError(
            f"input of shape {x.shape} does not match layer input "
            f"dimension {layers[0].in_dim}"
        )
    pres, posts = [], []
    a = x
    for layer in layers:
        z = a @ layer.weights.T + layer.bias
        a = _apply_activation(z, layer.activation)
        pres.append(z)
        posts.append(a)
    return a, pres, posts


def _activation_backward(layer, pre, post, dpost):
    if layer.activation == "relu":
        return dpost * (pre > 0.0)
    if layer.activation == "identity":
        return dpost
    # softmax jacobian: dz_i = s_i * (dpost_i - sum_j dpost_j s_j)
    s = post
    return s * (dpost - (dpost * s).sum(axis=-1, keepdims=True))


def dense_backward(layers, x, pres, posts, dout, want_param_grads=False):
    """Backpropagate dL/d(final post) through a dense stack.

    Returns (dx, param_grads); param_grads is a per-layer [(dW, db)] list
    when requested, else None.  Gradients are summed over the batch.
    """
    grad = dout
    param_grads = [None] * len(layers) if want_param_grads else None
    for i in range(len(layers) - 1, -1, -1):
        layer = layers[i]
        dz = _activation_backward(layer, pres[i], posts[i], grad)
        if want_param_grads:
            a_in = posts[i - 1] if i > 0 else x
            param_grads[i] = (dz.T @ a_in, dz.sum(axis=0))
        grad = dz @ layer.weights
    return grad, param_grads


class DenseHead:
    """Ordered dense layers; evaluation records a full activation trace."""

    def __init__(self, layers):
        if not layers:
            raise ConfigurationError("a head needs at least one layer")
        for a, b in zip(layers, layers[1:]):
            if b.in_dim != a.out_dim:
                raise ConfigurationError(
                    f"layer dimensions do not chain: {a.out_dim} -> {b.in_dim}"
                )
        self.layers = list(layers)

    @property
    def input_dim(self):
        return self.layers[0].in_dim

    @property
    def output_dim(self):
        return self.layers[-1].out_dim

    @property
    def neuron_count(self):
        """Input neurons plus every layer's output neurons."""
        return self.input_dim + sum(l.out_dim for l in self.layers)

    def copy(self) -> "DenseHead":
        return DenseHead([l.copy() for l in self.layers])

    def forward(self, features):
        """Single feature vector -> (output vector, ActivationTrace)."""
        features = np.asarray(features, dtype=np.float64)
        out, pres, posts = dense_forward(self.layers, features[None, :])
        trace = ActivationTrace(
            features=features,
            pre=[p[0] for p in pres],
            post=[p[0] for p in posts],
        )
        return out[0], trace


def head_input_gradient(head, features, label):
    """Gradient of the softmax cross-entropy loss w.r.t. the head input."""
    if head.layers[-1].activation != "softmax":
        raise ConfigurationError("cross-entropy gradient needs a softmax output")
    features = np.asarray(features, dtype=np.float64)
    probs, pres, posts = dense_forward(head.layers, features[None, :])
    dz = probs.copy()
    dz[0, label] -= 1.0
    # the softmax+cross-entropy shortcut replaces the last layer's dz
    grad = dz @ head.layers[-1].weights
    if len(head.layers) > 1:
        grad, _ = dense_backward(
            head.layers[:-1], features[None, :], pres[:-1], posts[:-1], grad
        )
    return grad[0]


# ---------------------------------------------------------------------------
# convolutional feature extractor

@dataclass
class ConvLayer:
    """3x3 'same' convolution, stride 1: kernel (kh, kw, c_in, c_out)."""

    kernel: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        self.kernel = np.asarray(self.kernel, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)


def _conv_patches(x, kh, kw):
    """im2col: (N, H, W, C) -> (N, H, W, kh*kw*C) with 'same' zero padding."""
    n, h, w, c = x.shape
    xp = np.pad(x, ((0, 0), (kh // 2, kh // 2), (kw // 2, kw // 2), (0, 0)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(1, 2))
    return win.transpose(0, 1, 2, 4, 5, 3).reshape(n, h, w, kh * kw * c)


def conv_forward(x, layer):
    kh, kw, c_in, c_out = layer.kernel.shape
    if x.shape[3] != c_in:
        raise ConfigurationError(
            f"input has {x.shape[3]} channels, kernel expects {c_in}"
        )
    patches = _conv_patches(x, kh, kw)
    out = patches @ layer.kernel.reshape(kh * kw * c_in, c_out) + layer.bias
    return out


def conv_backward_input(dout, layer, input_shape):
    n, h, w, c = input_shape
    kh, kw, c_in, c_out = layer.kernel.shape
    kmat = layer.kernel.reshape(kh * kw * c_in, c_out)
    dpatch = dout @ kmat.T                     # (N, H, W, kh*kw*C)
    dpatch = dpatch.reshape(n, h, w, kh, kw, c_in)
    dxp = np.zeros((n, h + kh - 1, w + kw - 1, c_in))
    for i in range(kh):
        for j in range(kw):
            dxp[:, i:i + h, j:j + w, :] += dpatch[:, :, :, i, j, :]
    ph, pw = kh // 2, kw // 2
    return dxp[:, ph:ph + h, pw:pw + w, :]


def conv_backward_params(dout, layer, x):
    kh, kw, c_in, c_out = layer.kernel.shape
    patches = _conv_patches(x, kh, kw)
    dk = patches.reshape(-1, kh * kw * c_in).T @ dout.reshape(-1, c_out)
    return dk.reshape(kh, kw, c_in, c_out), dout.sum(axis=(0, 1, 2))


def maxpool_forward(x):
    """2x2 max pooling, stride 2.  Ties resolve to the first maximum."""
    n, h, w, c = x.shape
    xw = (
        x.reshape(n, h // 2, 2, w // 2, 2, c)
        .transpose(0, 1, 3, 5, 2, 4)
        .reshape(n, h // 2, w // 2, c, 4)
    )
    idx = xw.argmax(axis=-1)
    out = np.take_along_axis(xw, idx[..., None], axis=-1)[..., 0]
    return out, idx


def maxpool_backward(dout, idx, input_shape):
    n, h, w, c = input_shape
    dxw = np.zeros((n, h // 2, w // 2, c, 4))
    np.put_along_axis(dxw, idx[..., None], dout[..., None], axis=-1)
    return (
        dxw.reshape(n, h // 2, w // 2, c, 2, 2)
        .transpose(0, 1, 4, 2, 5, 3)
        .reshape(n, h, w, c)
    )


class FeatureExtractor:
    """Two conv->relu->maxpool blocks flattened into a feature vector.

    After ``freeze()`` the weight arrays are marked read-only; a frozen
    extractor maps a fixed image to a bit-identical feature vector forever.
    """

    def __init__(self, conv1: ConvLayer, conv2: ConvLayer, input_shape):
        self.conv1 = conv1
        self.conv2 = conv2
        self.input_shape = tuple(int(s) for s in input_shape)  # (H, W, C)
        h, w, c = self.input_shape
        if h % 4 or w % 4:
            raise ConfigurationError("input height/width must be divisible by 4")
        self.frozen = False

    @property
    def feature_dim(self):
        h, w, _ = self.input_shape
        return (h // 4) * (w // 4) * self.conv2.kernel.shape[3]

    def freeze(self):
        for arr in (self.conv1.kernel, self.conv1.bias,
                    self.conv2.kernel, self.conv2.bias):
            arr.flags.writeable = False
        self.frozen = True

    def _check_input(self, x):
        if x.shape[1:] != self.input_shape:
            raise ConfigurationError(
                f"image shape {x.shape[1:]} does not match extractor input "
                f"shape {self.input_shape}"
            )

    def forward_cached(self, x):
        """Batch forward; the cache carries what the backward passes need."""
        x = np.asarray(x, dtype=np.float64)
        self._check_input(x)
        pre1 = conv_forward(x, self.conv1)
        post1 = relu(pre1)
        pool1, idx1 = maxpool_forward(post1)
        pre2 = conv_forward(pool1, self.conv2)
        post2 = relu(pre2)
        pool2, idx2 = maxpool_forward(post2)
        feats = pool2.reshape(x.shape[0], -1)
        cache = {
            "x": x, "pre1": pre1, "post1": post1, "pool1": pool1, "idx1": idx1,
            "pre2": pre2, "post2": post2, "pool2": pool2, "idx2": idx2,
        }
        return feats, cache

    def forward(self, image):
        """Single image (H, W, C) -> feature vector (feature_dim,)."""
        feats, _ = self.forward_cached(np.asarray(image, dtype=np.float64)[None])
        return feats[0]

    def backward_input(self, cache, dfeats):
        """Gradient w.r.t. the input images, (N, feature_dim) -> (N, H, W, C)."""
        d = dfeats.reshape(cache["pool2"].shape)
        d = maxpool_backward(d, cache["idx2"], cache["post2"].shape)
        d = d * (cache["pre2"] > 0.0)
        d = conv_backward_input(d, self.conv2, cache["pool1"].shape)
        d = maxpool_backward(d, cache["idx1"], cache["post1"].shape)
        d = d * (cache["pre1"] > 0.0)
        return conv_backward_input(d, self.conv1, cache["x"].shape)

    def backward_params(self, cache, dfeats):
        """Gradients w.r.t. both conv layers' kernels and biases."""
        d = dfeats.reshape(cache["pool2"].shape)
        d = maxpool_backward(d, cache["idx2"], cache["post2"].shape)
        d = d * (cache["pre2"] > 0.0)
        dk2, db2 = conv_backward_params(d, self.conv2, cache["pool1"])
        d = conv_backward_input(d, self.conv2, cache["pool1"].shape)
        d = maxpool_backward(d, cache["idx1"], cache["post1"].shape)
        d = d * (cache["pre1"] > 0.0)
        dk1, db1 = conv_backward_params(d, self.conv1, cache["x"])
        return (dk1, db1), (dk2, db2)


# ---------------------------------------------------------------------------
# the model bundle

class ModelBundle:
    """Frozen feature extractor + dense head: the system under study."""

    def __init__(self, extractor: FeatureExtractor, head: DenseHead):
        if head.input_dim != extractor.feature_dim:
            raise ConfigurationError(
                f"head expects {head.input_dim} features, extractor "
                f"produces {extractor.feature_dim}"
            )
        self.extractor = extractor
        self.head = head
        self.seed = None

    @property
    def class_count(self):
        return self.head.output_dim

    def dense_trace(self, image):
        """(probabilities, trace through the dense head) for one image."""
        feats = self.extractor.forward(image)
        return self.head.forward(feats)

    def predict(self, image):
        return self.dense_trace(image)

    def input_gradient(self, image, label):
        """Gradient of the cross-entropy loss w.r.t. the image pixels."""
        image = np.asarray(image, dtype=np.float64)
        feats, cache = self.extractor.forward_cached(image[None])
        dfeat = head_input_gradient(self.head, feats[0], label)
        return self.extractor.backward_input(cache, dfeat[None])[0]

    def fingerprint(self) -> str:
        """Stable hex digest of all weights; identifies the model."""
        h = hashlib.sha256()
        for arr in (self.extractor.conv1.kernel, self.extractor.conv1.bias,
                    self.extractor.conv2.kernel, self.extractor.conv2.bias):
            h.update(np.ascontiguousarray(arr).tobytes())
        for layer in self.head.layers:
            h.update(np.ascontiguousarray(layer.weights).tobytes())
            h.update(np.ascontiguousarray(layer.bias).tobytes())
        return h.hexdigest()


def build_model(input_shape=(32, 32, 3), conv_channels=(16, 8),
                head_dims=(256, 2), seed=0):
    """Seeded He-initialized extractor + head (not yet trained or frozen)."""
    rng = np.random.default_rng(seed)
    h, w, c = input_shape
    c1, c2 = conv_channels

    def he(shape, fan_in):
        return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)

    conv1 = ConvLayer(he((3, 3, c, c1), 9 * c), np.zeros(c1))
    conv2 = ConvLayer(he((3, 3, c1, c2), 9 * c1), np.zeros(c2))
    extractor = FeatureExtractor(conv1, conv2, input_shape)

    dims = [extractor.feature_dim] + list(head_dims)
    layers = []
    for i in range(len(dims) - 1):
        last = i == len(dims) - 2
        act = "softmax" if last else "relu"
        w_init = rng.normal(0.0, np.sqrt((1.0 if last else 2.0) / dims[i]),
                            size=(dims[i + 1], dims[i]))
        layers.append(DenseLayer(w_init, np.zeros(dims[i + 1]), act))
    model = ModelBundle(extractor, DenseHead(layers))
    model.seed = seed
    return model


# ---------------------------------------------------------------------------
# training

@dataclass
class TrainConfig:
    epochs: int = 50
    learning_rate: float = 0.01
    batch_size: int = 32
    seed: int = 0


def cross_entropy(probs, labels):
    """Mean negative log-likelihood of the true classes."""
    p = probs[np.arange(len(labels)), labels]
    return float(-np.mean(np.log(np.maximum(p, 1e-300))))


def _check_finite_state(layers, loss, config):
    if not np.isfinite(loss) or any(
        not (np.all(np.isfinite(l.weights)) and np.all(np.isfinite(l.bias)))
        for l in layers
    ):
        raise TrainingDivergedError(
            f"training diverged (loss={loss}); config: {config}"
        )


def train_head(head, features, labels, config: TrainConfig) -> DenseHead:
    """SGD with seeded shuffling on softmax cross-entropy; returns a new head.

    The input head is untouched.  Zero epochs return an identical copy.
    """
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if len(features) == 0:
        raise ValueError("cannot train on an empty dataset")
    if features.ndim != 2 or features.shape[1] != head.input_dim:
        raise ConfigurationError(
            f"feature dimension {features.shape} does not match head "
            f"input {head.input_dim}"
        )

    new = head.copy()
    rng = np.random.default_rng(config.seed)
    n = len(features)
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        epoch_loss = 0.0
        for start in range(0, n, config.batch_size):
            sel = order[start:start + config.batch_size]
            xb, yb = features[sel], labels[sel]
            probs, pres, posts = dense_forward(new.layers, xb)
            epoch_loss += cross_entropy(probs, yb) * len(sel)

            dz = probs.copy()
            dz[np.arange(len(yb)), yb] -= 1.0
            dz /= len(yb)
            _apply_sgd_step(new.layers, xb, pres, posts, dz, config.learning_rate)
        epoch_loss /= n
        _check_finite_state(new.layers, epoch_loss, config)
        logger.debug("train_head epoch %d loss %.6f", epoch, epoch_loss)
    return new


def _apply_sgd_step(layers, xb, pres, posts, dz_last, lr):
    """One SGD step given the last layer's pre-activation gradient."""
    grad = dz_last
    for i in range(len(layers) - 1, -1, -1):
        layer = layers[i]
        if i == len(layers) - 1:
            dz = grad  # softmax+cross-entropy shortcut
        else:
            dz = _activation_backward(layer, pres[i], posts[i], grad)
        a_in = posts[i - 1] if i > 0 else xb
        dw = dz.T @ a_in
        db = dz.sum(axis=0)
        grad = dz @ layer.weights
        layer.weights -= lr * dw
        layer.bias -= lr * db


def train_model(images, labels, input_shape=(32, 32, 3), conv_channels=(16, 8),
                head_dims=(256, 2), config: TrainConfig | None = None,
                seed=0) -> ModelBundle:
    """Train extractor and head jointly on clean data, then freeze the extractor.

    This is the one-time training that produces the original model; every
    later defense leaves the extractor weights untouched.
    """
    config = config or TrainConfig()
    images = np.asarray(images, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if len(images) == 0:
        raise ValueError("cannot train on an empty dataset")

    model = build_model(input_shape, conv_channels, head_dims, seed=seed)
    ext, head = model.extractor, model.head
    rng = np.random.default_rng(config.seed)
    n = len(images)
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        epoch_loss = 0.0
        for start in range(0, n, config.batch_size):
            sel = order[start:start + config.batch_size]
            xb, yb = images[sel], labels[sel]
            feats, cache = ext.forward_cached(xb)
            probs, pres, posts = dense_forward(head.layers, feats)
            epoch_loss += cross_entropy(probs, yb) * len(sel)

            dz = probs.copy()
            dz[np.arange(len(yb)), yb] -= 1.0
            dz /= len(yb)
            # feature gradient must use the pre-update head weights
            dfeat = dz @ head.layers[-1].weights
            if len(head.layers) > 1:
                dfeat, _ = dense_backward(
                    head.layers[:-1], feats, pres[:-1], posts[:-1], dfeat
                )
            _apply_sgd_step(head.layers, feats, pres, posts, dz,
                            config.learning_rate)
            (dk1, db1), (dk2, db2) = ext.backward_params(cache, dfeat)
            ext.conv1.kernel -= config.learning_rate * dk1
            ext.conv1.bias -= config.learning_rate * db1
            ext.conv2.kernel -= config.learning_rate * dk2
            ext.conv2.bias -= config.learning_rate * db2
        epoch_loss /= n
        _check_finite_state(head.layers, epoch_loss, config)
        logger.info("train_model epoch %d loss %.6f", epoch, epoch_loss)

    ext.freeze()
    return model


def accuracy(model, images, labels) -> float:
    """Exact fraction of argmax-correct predictions on a non-empty set."""
    if len(images) == 0:
        raise ValueError("accuracy of an empty dataset is undefined")
    correct = 0
    for img, lab in zip(images, labels):
        probs, _ = model.predict(img)
        correct += int(np.argmax(probs)) == int(lab)
    return correct / len(images)


# ---------------------------------------------------------------------------
# persistence (versioned JSON, bit-exact float64 round trip)

def _layer_to_json(layer: DenseLayer):
    return {
        "weights": layer.weights.tolist(),
        "bias": layer.bias.tolist(),
        "activation": layer.activation,
    }


def _layer_from_json(doc):
    return DenseLayer(np.array(doc["weights"], dtype=np.float64),
                      np.array(doc["bias"], dtype=np.float64),
                      doc["activation"])


def save_model(model: ModelBundle, path):
    doc = {
        "format_version": MODEL_FORMAT_VERSION,
        "architecture": {
            "input_shape": list(model.extractor.input_shape),
            "conv_channels": [model.extractor.conv1.kernel.shape[3],
                              model.extractor.conv2.kernel.shape[3]],
            "head_dims": [l.out_dim for l in model.head.layers],
        },
        "seed": model.seed,
        "extractor": {
            "frozen": model.extractor.frozen,
            "conv1": {"kernel": model.extractor.conv1.kernel.tolist(),
                      "bias": model.extractor.conv1.bias.tolist()},
            "conv2": {"kernel": model.extractor.conv2.kernel.tolist(),
                      "bias": model.extractor.conv2.bias.tolist()},
        },
        "head": {"layers": [_layer_to_json(l) for l in model.head.layers]},
    }
    with open(path, "w") as fh:
        json.dump(doc, fh)


def load_model(path) -> ModelBundle:
    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("format_version") != MODEL_FORMAT_VERSION:
        raise ConfigurationError(
            f"unsupported model format version {doc.get('format_version')!r}"
        )
    ext_doc = doc["extractor"]
    conv1 = ConvLayer(np.array(ext_doc["conv1"]["kernel"], dtype=np.float64),
                      np.array(ext_doc["conv1"]["bias"], dtype=np.float64))
    conv2 = ConvLayer(np.array(ext_doc["conv2"]["kernel"], dtype=np.float64),
                      np.array(ext_doc["conv2"]["bias"], dtype=np.float64))
    extractor = FeatureExtractor(conv1, conv2, doc["architecture"]["input_shape"])
    head = DenseHead([_layer_from_json(l) for l in doc["head"]["layers"]])
    model = ModelBundle(extractor, head)
    model.seed = doc.get("seed")
    if ext_doc.get("frozen"):
        extractor.freeze()
    return model
