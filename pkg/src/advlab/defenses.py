"""Three defenses for a frozen-extractor image classifier.

* Adversarial training: retrain only the dense head on clean data plus
  correctly-labeled known adversarial examples.
* Dimensionality-reduction autoencoders: a dense bottleneck that
  reconstructs either the extractor's features (middle placement) or the
  raw image (initial placement); the original extractor and head keep
  their weights bit for bit.
* Prediction-similarity detector: an external guard that logs every
  query per user, counts near-duplicate submissions (the signature of an
  iterative adversarial search), and once the count passes a threshold
  answers with a flipped class, a refusal, or a secondary model.  While
  no query is flagged, returned predictions are bit-identical to the
  undefended model's.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import similarity
from .attacks import AdversarialSet
from .nn import (
    DenseHead,
    DenseLayer,
    ModelBundle,
    TrainConfig,
    TrainingDivergedError,
    _layer_from_json,
    _layer_to_json,
    dense_backward,
    dense_forward,
    head_input_gradient,
    train_head,
)

logger = logging.getLogger(__name__)

DEFENSE_KINDS = ("adversarial_training", "middle_autoencoder",
                 "initial_autoencoder", "prediction_similarity")

DETECTOR_ACTIONS = ("flip_class", "block", "secondary_model")


# ---------------------------------------------------------------------------
# autoencoders

@dataclass
class Autoencoder:
    """Dense encoder/decoder pair; decoder restores the encoder input size."""

    encoder: list[DenseLayer]
    decoder: list[DenseLayer]
    input_shape: tuple | None = None     # set when trained on images
    holdout_mse: float | None = None

    def __post_init__(self):
        if self.decoder[-1].out_dim != self.encoder[0].in_dim:
            raise ValueError(
                f"decoder restores {self.decoder[-1].out_dim} values but the "
                f"encoder consumes {self.encoder[0].in_dim}"
            )

    @property
    def layers(self):
        return self.encoder + self.decoder

    @property
    def input_dim(self):
        return self.encoder[0].in_dim

    @property
    def latent_dim(self):
        return self.encoder[-1].out_dim

    def reconstruct_batch(self, x):
        """(N, input_dim) -> (N, input_dim)."""
        out, _, _ = dense_forward(self.layers, np.asarray(x, dtype=np.float64))
        return out

    def reconstruct(self, x):
        """One vector or image; images are flattened and reshaped back."""
        x = np.asarray(x, dtype=np.float64)
        flat = x.reshape(1, -1)
        out = self.reconstruct_batch(flat)[0]
        return out.reshape(x.shape)

    def backward_input(self, x, dout):
        """Gradient of some loss w.r.t. the flat input, given d/d(output)."""
        x = np.asarray(x, dtype=np.float64).reshape(1, -1)
        _, pres, posts = dense_forward(self.layers, x)
        grad, _ = dense_backward(self.layers, x, pres, posts,
                                 dout.reshape(1, -1))
        return grad[0]


def build_autoencoder(input_dim, latent_dim, seed=0, input_shape=None,
                      bottleneck_activation="relu"):
    """Seeded bottleneck autoencoder with an identity reconstruction layer.

    A relu bottleneck suits non-negative feature vectors; identity (a
    linear, PCA-like bottleneck) trains more robustly on raw pixels,
    where relu units can die wholesale.
    """
    rng = np.random.default_rng(seed)
    enc = DenseLayer(
        rng.normal(0.0, np.sqrt(2.0 / input_dim), (latent_dim, input_dim)),
        np.zeros(latent_dim), bottleneck_activation)
    dec = DenseLayer(
        rng.normal(0.0, np.sqrt(1.0 / latent_dim), (input_dim, latent_dim)),
        np.zeros(input_dim), "identity")
    return Autoencoder([enc], [dec], input_shape=input_shape)


def identity_autoencoder(input_dim, input_shape=None):
    """Exact pass-through: reconstruct(x) == x for every x."""
    eye = np.eye(input_dim)
    enc = DenseLayer(eye.copy(), np.zeros(input_dim), "identity")
    dec = DenseLayer(eye.copy(), np.zeros(input_dim), "identity")
    return Autoencoder([enc], [dec], input_shape=input_shape)


@dataclass
class AutoencoderTrainConfig:
    epochs: int = 30
    learning_rate: float = 0.05
    batch_size: int = 32
    seed: int = 0
    holdout_fraction: float = 0.1


def train_autoencoder(data, latent_dim, config: AutoencoderTrainConfig | None = None,
                      autoencoder: Autoencoder | None = None,
                      bottleneck_activation="relu") -> Autoencoder:
    """Fit a reconstruction bottleneck on vectors or images.

    Images (anything with more than one trailing axis) are flattened;
    the result remembers the shape.  A held-out slice's reconstruction
    MSE lands in the returned autoencoder's holdout_mse field.
    """
    config = config or AutoencoderTrainConfig()
    data = np.asarray(data, dtype=np.float64)
    if data.size == 0:
        raise ValueError("cannot train an autoencoder on an empty dataset")
    input_shape = data.shape[1:] if data.ndim > 2 else None
    flat = data.reshape(len(data), -1)

    ae = autoencoder or build_autoencoder(
        flat.shape[1], latent_dim, seed=config.seed,
        input_shape=input_shape,
        bottleneck_activation=bottleneck_activation)
    rng = np.random.default_rng(config.seed)
    perm = rng.permutation(len(flat))
    n_hold = int(len(flat) * config.holdout_fraction)
    hold, train = flat[perm[:n_hold]], flat[perm[n_hold:]]
    if len(train) == 0:
        train, hold = flat[perm], flat[perm[:0]]

    layers = ae.layers
    n, dim = train.shape
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        epoch_loss = 0.0
        for start in range(0, n, config.batch_size):
            xb = train[order[start:start + config.batch_size]]
            recon, pres, posts = dense_forward(layers, xb)
            err = recon - xb
            epoch_loss += float(np.sum(err * err)) / dim
            dout = 2.0 * err / (len(xb) * dim)
            _, grads = dense_backward(layers, xb, pres, posts, dout,
                                      want_param_grads=True)
            for layer, (dw, db) in zip(layers, grads):
                layer.weights -= config.learning_rate * dw
                layer.bias -= config.learning_rate * db
        epoch_loss /= n
        if not np.isfinite(epoch_loss) or any(
            not np.all(np.isfinite(l.weights)) for l in layers
        ):
            raise TrainingDivergedError(
                f"autoencoder training diverged (loss={epoch_loss}); "
                f"config: {config}"
            )
        logger.debug("autoencoder epoch %d mse %.6f", epoch, epoch_loss)

    if len(hold):
        recon = ae.reconstruct_batch(hold)
        ae.holdout_mse = float(np.mean((recon - hold) ** 2))
        logger.info("autoencoder holdout mse %.6f (latent %d)",
                    ae.holdout_mse, ae.latent_dim)
    return ae


# ---------------------------------------------------------------------------
# defended model variants

@dataclass
class DefendedModel:
    """The base model wrapped by one defense; predicts like a ModelBundle."""

    base: ModelBundle
    kind: str
    head_override: DenseHead | None = None
    autoencoder: Autoencoder | None = None
    detector: "DetectorConfig | None" = None

    def __post_init__(self):
        if self.kind not in DEFENSE_KINDS:
            raise ValueError(f"unknown defense kind {self.kind!r}")
        if self.kind == "middle_autoencoder":
            if self.autoencoder.input_dim != self.base.extractor.feature_dim:
                raise ValueError(
                    f"middle autoencoder handles {self.autoencoder.input_dim} "
                    f"values, extractor emits {self.base.extractor.feature_dim}"
                )
        if self.kind == "initial_autoencoder":
            expect = int(np.prod(self.base.extractor.input_shape))
            if self.autoencoder.input_dim != expect:
                raise ValueError(
                    f"initial autoencoder handles {self.autoencoder.input_dim} "
                    f"values, images carry {expect}"
                )

    @property
    def head(self):
        return self.head_override if self.head_override is not None \
            else self.base.head

    @property
    def class_count(self):
        return self.head.output_dim

    def _head_features(self, image):
        if self.kind == "initial_autoencoder":
            image = self.autoencoder.reconstruct(image)
        feats = self.base.extractor.forward(image)
        if self.kind == "middle_autoencoder":
            feats = self.autoencoder.reconstruct(feats)
        return feats

    def dense_trace(self, image):
        return self.head.forward(self._head_features(image))

    def predict(self, image):
        return self.dense_trace(image)

    def input_gradient(self, image, label):
        """Loss gradient w.r.t. pixels through the full defended path."""
        image = np.asarray(image, dtype=np.float64)
        ext = self.base.extractor
        ext_in = image
        if self.kind == "initial_autoencoder":
            ext_in = self.autoencoder.reconstruct(image)
        feats, cache = ext.forward_cached(ext_in[None])
        head_in = feats[0]
        if self.kind == "middle_autoencoder":
            head_in = self.autoencoder.reconstruct(feats[0])
        dhead_in = head_input_gradient(self.head, head_in, label)
        if self.kind == "middle_autoencoder":
            dhead_in = self.autoencoder.backward_input(feats[0], dhead_in)
        dimage = ext.backward_input(cache, dhead_in[None])[0]
        if self.kind == "initial_autoencoder":
            dimage = self.autoencoder.backward_input(
                image, dimage.ravel()).reshape(image.shape)
        return dimage

    def fingerprint(self) -> str:
        h = hashlib.sha256(self.base.fingerprint().encode())
        h.update(self.kind.encode())
        extra = []
        if self.head_override is not None:
            extra += self.head_override.layers
        if self.autoencoder is not None:
            extra += self.autoencoder.layers
        for layer in extra:
            h.update(np.ascontiguousarray(layer.weights).tobytes())
            h.update(np.ascontiguousarray(layer.bias).tobytes())
        return h.hexdigest()


def extract_features(model, images, batch_size=256):
    """Frozen-extractor features for many images, batched for speed."""
    images = np.asarray(images, dtype=np.float64)
    out = []
    for start in range(0, len(images), batch_size):
        feats, _ = model.extractor.forward_cached(images[start:start + batch_size])
        out.append(feats)
    return np.concatenate(out)


def adversarial_train(model: ModelBundle, clean_images, clean_labels,
                      known: AdversarialSet,
                      config: TrainConfig | None = None) -> DefendedModel:
    """Retrain the dense head on clean data plus known adversarials.

    Adversarial images enter the training set under their true labels.
    The extractor is frozen, so only head weights move.  An empty known
    set is only legal for a zero-epoch run (which returns the head
    unchanged).
    """
    config = config or TrainConfig()
    if known.provenance != "known":
        raise ValueError(
            f"adversarial training needs a 'known' set, got provenance "
            f"{known.provenance!r}"
        )
    if known.model_fingerprint and known.model_fingerprint != model.fingerprint():
        raise ValueError("known set was generated against a different model")
    if not known.records and config.epochs > 0:
        raise ValueError("cannot adversarially train on an empty known set")

    clean_feats = extract_features(model, clean_images)
    parts_x = [clean_feats]
    parts_y = [np.asarray(clean_labels, dtype=np.int64)]
    if known.records:
        adv_images = np.stack([r.adversarial for r in known.records])
        parts_x.append(extract_features(model, adv_images))
        parts_y.append(np.array([r.true_label for r in known.records],
                                dtype=np.int64))
    new_head = train_head(model.head, np.concatenate(parts_x),
                          np.concatenate(parts_y), config)
    return DefendedModel(model, "adversarial_training", head_override=new_head)


def apply_middle_autoencoder(model: ModelBundle, ae: Autoencoder) -> DefendedModel:
    """Insert a feature-space reconstruction between extractor and head."""
    return DefendedModel(model, "middle_autoencoder", autoencoder=ae)


def apply_initial_autoencoder(model: ModelBundle, ae: Autoencoder) -> DefendedModel:
    """Insert an image-space reconstruction before the extractor."""
    return DefendedModel(model, "initial_autoencoder", autoencoder=ae)


# ---------------------------------------------------------------------------
# prediction-similarity detector

@dataclass(frozen=True)
class DetectorConfig:
    """Query-stream detector knobs.

    A query counts as a near-duplicate of a prior one when their distance
    falls below tau_d; alarm_threshold near-duplicates flag the query.
    """

    metric: str = "ssim"
    tau_d: float = 0.05
    alarm_threshold: int = 10
    action: str = "flip_class"
    max_images_per_user: int = 10_000
    secondary: object = None

    def __post_init__(self):
        if self.metric not in ("ssim", "mse", "psnr"):
            raise ValueError(f"unknown metric {self.metric!r}")
        if not self.tau_d > 0:
            raise ValueError(f"tau_d must be positive, got {self.tau_d}")
        if self.alarm_threshold < 1:
            raise ValueError(
                f"alarm_threshold must be >= 1, got {self.alarm_threshold}"
            )
        if self.action not in DETECTOR_ACTIONS:
            raise ValueError(f"unknown action {self.action!r}")
        if self.action == "secondary_model" and self.secondary is None:
            raise ValueError("secondary_model action needs a secondary model")


@dataclass
class PredictionRecord:
    """One logged query: what was asked, answered, and how alarming it was."""

    sequence: int
    user: str
    predicted: int
    probability: float
    min_distance: float
    distance_alarm: int
    prediction_alarm: int
    flagged: bool


@dataclass
class RiskAssessment:
    flagged: bool
    distance_alarm: int
    prediction_alarm: int
    triggering: list[int] = field(default_factory=list)


@dataclass
class GuardedPrediction:
    """What the caller of a guarded model sees."""

    probabilities: np.ndarray | None
    predicted: int | None
    refused: bool = False
    action: str | None = None


class HistoryStore:
    """Append-only per-user query log with retained images.

    Per user, mutations happen one at a time in arrival order; separate
    users are fully independent.  Old images beyond the retention bound
    are dropped (their records stay) and each eviction is logged, since
    it blinds the detector to the evicted queries.
    """

    def __init__(self, config: DetectorConfig | None = None):
        self.config = config
        self._records: dict[str, list[PredictionRecord]] = {}
        self._images: dict[str, list] = {}     # None where evicted

    def users(self):
        return sorted(self._records)

    def has_user(self, user) -> bool:
        return user in self._records

    def history(self, user):
        if user not in self._records:
            raise KeyError(f"unknown user {user!r}")
        return list(self._records[user])

    def retained(self, user):
        """(record, image) pairs for images still held, oldest first."""
        if user not in self._records:
            return []
        return [(rec, img) for rec, img in
                zip(self._records[user], self._images[user])
                if img is not None]

    def next_sequence(self, user) -> int:
        return len(self._records.get(user, ()))

    def append(self, user, image, record: PredictionRecord):
        records = self._records.setdefault(user, [])
        images = self._images.setdefault(user, [])
        if record.sequence != len(records):
            raise ValueError(
                f"sequence {record.sequence} does not extend history of "
                f"length {len(records)}"
            )
        records.append(record)
        images.append(np.asarray(image, dtype=np.float64))
        bound = (self.config.max_images_per_user
                 if self.config is not None else 10_000)
        held = sum(img is not None for img in images)
        if held > bound:
            for i, img in enumerate(images):
                if img is not None:
                    images[i] = None
                    logger.warning(
                        "history for user %s exceeded %d images; evicted "
                        "sequence %d (detection weakened)", user, bound, i)
                    break

    # -- persistence: CSV log plus exact float64 image files

    def save(self, directory):
        directory = Path(directory)
        img_dir = directory / "images"
        img_dir.mkdir(parents=True, exist_ok=True)
        user_ids = {user: i for i, user in enumerate(self.users())}
        with open(directory / "history.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["sequence", "user", "image_file", "class",
                             "probability", "min_distance",
                             "prediction_alarm", "distance_alarm", "flagged"])
            for user in self.users():
                udir = img_dir / f"u{user_ids[user]:04d}"
                udir.mkdir(exist_ok=True)
                for rec, img in zip(self._records[user], self._images[user]):
                    ref = ""
                    if img is not None:
                        ref = f"images/u{user_ids[user]:04d}/{rec.sequence:06d}.npy"
                        np.save(directory / ref, img)
                    writer.writerow([rec.sequence, user, ref, rec.predicted,
                                     repr(rec.probability),
                                     repr(rec.min_distance),
                                     rec.prediction_alarm, rec.distance_alarm,
                                     int(rec.flagged)])
        meta = {"config": None}
        if self.config is not None:
            if self.config.action == "secondary_model":
                logger.warning("secondary model is not serialized; the "
                               "loaded store falls back to flip_class")
            meta["config"] = {
                "metric": self.config.metric,
                "tau_d": self.config.tau_d,
                "alarm_threshold": self.config.alarm_threshold,
                "action": (self.config.action
                           if self.config.action != "secondary_model"
                           else "flip_class"),
                "max_images_per_user": self.config.max_images_per_user,
            }
        with open(directory / "store.json", "w") as fh:
            json.dump(meta, fh, indent=2)

    @classmethod
    def load(cls, directory) -> "HistoryStore":
        directory = Path(directory)
        with open(directory / "store.json") as fh:
            meta = json.load(fh)
        config = DetectorConfig(**meta["config"]) if meta["config"] else None
        store = cls(config)
        with open(directory / "history.csv", newline="") as fh:
            for row in csv.DictReader(fh):
                user = row["user"]
                rec = PredictionRecord(
                    sequence=int(row["sequence"]), user=user,
                    predicted=int(row["class"]),
                    probability=float(row["probability"]),
                    min_distance=float(row["min_distance"]),
                    distance_alarm=int(row["distance_alarm"]),
                    prediction_alarm=int(row["prediction_alarm"]),
                    flagged=bool(int(row["flagged"])),
                )
                image = None
                if row["image_file"]:
                    image = np.load(directory / row["image_file"])
                store._records.setdefault(user, []).append(rec)
                store._images.setdefault(user, []).append(image)
        return store


def _assess(store: HistoryStore, config: DetectorConfig, user, image,
            predicted, probability):
    """Distances against the user's retained history -> alarms."""
    min_distance = math.inf
    distance_alarm = 0
    prediction_alarm = 0
    triggering = []
    for rec, prior in store.retained(user):
        d = similarity.distance(image, prior, metric=config.metric)
        if d < min_distance:
            min_distance = d
        if d < config.tau_d:
            distance_alarm += 1
            triggering.append(rec.sequence)
            if rec.predicted == predicted and rec.probability > probability:
                prediction_alarm += 1
    flagged = distance_alarm >= config.alarm_threshold
    return RiskAssessment(flagged, distance_alarm, prediction_alarm,
                          triggering), min_distance


def guarded_predict(store: HistoryStore, config: DetectorConfig, model,
                    user, image):
    """Predict through the detector.  Returns (GuardedPrediction, RiskAssessment).

    The true base prediction is always what enters the log; the action
    only shapes the answer handed back.  Unflagged queries return the
    base prediction bit for bit.
    """
    if store.config is None:
        store.config = config
    elif store.config != config:
        raise ValueError("store was built with a different detector config")

    image = np.asarray(image, dtype=np.float64)
    probs, _ = model.predict(image)
    predicted = int(np.argmax(probs))
    probability = float(probs[predicted])

    assessment, min_distance = _assess(store, config, user, image,
                                       predicted, probability)
    record = PredictionRecord(
        sequence=store.next_sequence(user), user=user, predicted=predicted,
        probability=probability, min_distance=min_distance,
        distance_alarm=assessment.distance_alarm,
        prediction_alarm=assessment.prediction_alarm,
        flagged=assessment.flagged,
    )
    store.append(user, image, record)

    if not assessment.flagged:
        return GuardedPrediction(probs, predicted), assessment
    if config.action == "flip_class":
        flipped = probs[::-1].copy()
        return GuardedPrediction(flipped, int(np.argmax(flipped)),
                                 action="flip_class"), assessment
    if config.action == "block":
        return GuardedPrediction(None, None, refused=True,
                                 action="block"), assessment
    sprobs, _ = config.secondary.predict(image)
    return GuardedPrediction(sprobs, int(np.argmax(sprobs)),
                             action="secondary_model"), assessment


def replay_history(store: HistoryStore, user):
    """Recompute every assessment for a user from the stored log.

    With no evictions this reproduces the live flag sequence exactly.
    """
    if not store.has_user(user):
        raise KeyError(f"unknown user {user!r}")
    if store.config is None:
        raise ValueError("store has no detector config to replay with")
    config = store.config
    records = store.history(user)
    images = store._images[user]
    out = []
    for k, rec in enumerate(records):
        if images[k] is None:
            raise ValueError(
                f"image for sequence {k} was evicted; replay impossible"
            )
        prior_pairs = [(records[i], images[i]) for i in range(k)
                       if images[i] is not None]
        min_distance = math.inf
        distance_alarm = 0
        prediction_alarm = 0
        triggering = []
        for prec, pimg in prior_pairs:
            d = similarity.distance(images[k], pimg, metric=config.metric)
            if d < min_distance:
                min_distance = d
            if d < config.tau_d:
                distance_alarm += 1
                triggering.append(prec.sequence)
                if (prec.predicted == rec.predicted
                        and prec.probability > rec.probability):
                    prediction_alarm += 1
        out.append(RiskAssessment(distance_alarm >= config.alarm_threshold,
                                  distance_alarm, prediction_alarm,
                                  triggering))
    return out


def calibrate_tau(images, metric="ssim", percentile=1.0) -> float:
    """Distance below which only `percentile`% of benign pairs fall.

    The threshold separates the tight clusters an iterative attack
    produces from ordinary dataset diversity."""
    images = [np.asarray(im, dtype=np.float64) for im in images]
    if len(images) < 2:
        raise ValueError("tau calibration needs at least two images")
    dists = []
    for i in range(len(images)):
        for j in range(i + 1, len(images)):
            dists.append(similarity.distance(images[i], images[j],
                                             metric=metric))
    return float(np.percentile(dists, percentile))


# ---------------------------------------------------------------------------
# serialization

DEFENSE_FORMAT_VERSION = 1


def _ae_to_json(ae: Autoencoder):
    return {
        "encoder": [_layer_to_json(l) for l in ae.encoder],
        "decoder": [_layer_to_json(l) for l in ae.decoder],
        "input_shape": list(ae.input_shape) if ae.input_shape else None,
        "holdout_mse": ae.holdout_mse,
    }


def _ae_from_json(doc) -> Autoencoder:
    shape = tuple(doc["input_shape"]) if doc["input_shape"] else None
    return Autoencoder([_layer_from_json(l) for l in doc["encoder"]],
                       [_layer_from_json(l) for l in doc["decoder"]],
                       input_shape=shape, holdout_mse=doc["holdout_mse"])


def save_autoencoder(ae: Autoencoder, path):
    doc = {"format_version": DEFENSE_FORMAT_VERSION}
    doc.update(_ae_to_json(ae))
    with open(path, "w") as fh:
        json.dump(doc, fh)


def load_autoencoder(path) -> Autoencoder:
    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("format_version") != DEFENSE_FORMAT_VERSION:
        raise ValueError(
            f"unsupported defense format version {doc.get('format_version')!r}")
    return _ae_from_json(doc)


def save_defense(defended: DefendedModel, path):
    """Persist a defense's own weights; the base model is saved separately.

    The detector defense keeps its state in a HistoryStore, which has its
    own save method, so only the model-wrapping kinds are accepted here.
    """
    doc = {
        "format_version": DEFENSE_FORMAT_VERSION,
        "kind": defended.kind,
        "base_fingerprint": defended.base.fingerprint(),
    }
    if defended.kind == "adversarial_training":
        doc["head"] = [_layer_to_json(l) for l in defended.head_override.layers]
    elif defended.kind in ("middle_autoencoder", "initial_autoencoder"):
        doc["autoencoder"] = _ae_to_json(defended.autoencoder)
    else:
        raise ValueError(
            f"defense kind {defended.kind!r} does not serialize this way")
    with open(path, "w") as fh:
        json.dump(doc, fh)


def load_defense(path, base: ModelBundle) -> DefendedModel:
    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("format_version") != DEFENSE_FORMAT_VERSION:
        raise ValueError(
            f"unsupported defense format version {doc.get('format_version')!r}")
    if doc["base_fingerprint"] != base.fingerprint():
        raise ValueError("defense was built for a different base model")
    kind = doc["kind"]
    if kind == "adversarial_training":
        head = DenseHead([_layer_from_json(l) for l in doc["head"]])
        return DefendedModel(base, kind, head_override=head)
    return DefendedModel(base, kind, autoencoder=_ae_from_json(doc["autoencoder"]))
