"""Gradient-sign evasion attacks and adversarial-example bookkeeping.

Three untargeted attacks on a two-class image classifier, all bounded by
an L-infinity ball of radius epsilon around the original image and by the
pixel range [0, 1]:

* fgsm: one signed-gradient step of size epsilon.
* bim:  iterated signed-gradient steps of size alpha, each projected back
        onto the ball, stopping early once the model is fooled.
* pgd:  bim started from a uniformly random point inside the ball.

The three are one family: with one iteration and alpha = epsilon, bim
reproduces fgsm bit for bit; with the random start disabled, pgd
reproduces bim bit for bit.  Every attack records the full query trace
(the original image at step 0, then each iterate with its prediction),
which is what the query-pattern detector inspects.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from PIL import Image

logger = logging.getLogger(__name__)

ATTACK_NAMES = ("fgsm", "bim", "pgd")

EPSILON_CANDIDATES = (0.01, 0.02, 0.03, 0.05, 0.1)


@dataclass(frozen=True)
class AttackConfig:
    """Shared knobs for all attacks.

    alpha defaults to epsilon / 10.  random_start only affects pgd;
    run_to_completion disables the early stop on misclassification.
    epsilon = 0 is legal and must leave the image untouched.
    """

    epsilon: float = 0.03
    alpha: float | None = None
    iterations: int = 100
    random_start: bool = True
    run_to_completion: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.epsilon < 0:
            raise ValueError(f"epsilon must be >= 0, got {self.epsilon}")
        if self.alpha is not None and self.alpha < 0:
            raise ValueError(f"alpha must be >= 0, got {self.alpha}")
        if self.iterations < 1:
            raise ValueError(f"iterations must be >= 1, got {self.iterations}")

    @property
    def step_size(self) -> float:
        return self.epsilon / 10.0 if self.alpha is None else self.alpha


@dataclass
class QueryStep:
    """One model query made during an attack."""

    index: int
    image: np.ndarray
    probabilities: np.ndarray
    predicted: int


@dataclass
class QueryTrace:
    """Chronological query stream of one attack run."""

    steps: list[QueryStep] = field(default_factory=list)

    def images(self):
        return [s.image for s in self.steps]

    def __len__(self):
        return len(self.steps)


@dataclass
class AdversarialRecord:
    """One attacked image with its outcome."""

    original: np.ndarray
    adversarial: np.ndarray
    true_label: int
    original_prediction: int
    adversarial_prediction: int
    attack: str
    epsilon: float
    success: bool
    queries: int
    trace: QueryTrace | None = None
    alpha: float | None = None
    iterations: int = 0
    seed: int = 0


@dataclass
class AdversarialSet:
    """Adversarial examples plus where they came from.

    provenance is "known" for examples handed to a defense as training
    material and "new" for examples generated to evaluate a defense.
    """

    records: list[AdversarialRecord]
    provenance: str
    attack: str
    config: AttackConfig
    model_fingerprint: str = ""

    def __post_init__(self):
        if self.provenance not in ("known", "new"):
            raise ValueError(f"provenance must be 'known' or 'new', "
                             f"got {self.provenance!r}")

    def successful(self):
        return [r for r in self.records if r.success]


def _query(model, image):
    probs, _ = model.predict(image)
    return probs, int(np.argmax(probs))


def _iterate(model, image, label, epsilon, alpha, iterations,
             random_start, run_to_completion, rng):
    """Shared attack loop; fgsm/bim/pgd differ only in the arguments."""
    orig = np.asarray(image, dtype=np.float64)
    lo = np.maximum(orig - epsilon, 0.0)
    hi = np.minimum(orig + epsilon, 1.0)

    trace = QueryTrace()
    probs, pred = _query(model, orig)
    trace.steps.append(QueryStep(0, orig, probs, pred))

    x = orig
    if random_start:
        x = np.clip(orig + rng.uniform(-epsilon, epsilon, size=orig.shape),
                    lo, hi)
        probs, pred = _query(model, x)
        trace.steps.append(QueryStep(len(trace.steps), x, probs, pred))
        if pred != label and not run_to_completion:
            return x, trace

    for _ in range(iterations):
        grad = model.input_gradient(x, label)
        x = np.clip(x + alpha * np.sign(grad), lo, hi)
        probs, pred = _query(model, x)
        trace.steps.append(QueryStep(len(trace.steps), x, probs, pred))
        if pred != label and not run_to_completion:
            break
    return x, trace


def fgsm(model, image, label, config: AttackConfig):
    """One signed-gradient step of size epsilon.  Returns (image, trace)."""
    return _iterate(model, image, label, config.epsilon, config.epsilon,
                    iterations=1, random_start=False,
                    run_to_completion=config.run_to_completion, rng=None)


def bim(model, image, label, config: AttackConfig):
    """Iterated signed-gradient steps projected onto the epsilon ball."""
    return _iterate(model, image, label, config.epsilon, config.step_size,
                    config.iterations, random_start=False,
                    run_to_completion=config.run_to_completion, rng=None)


def pgd(model, image, label, config: AttackConfig):
    """bim from a seeded uniform random start inside the epsilon ball."""
    rng = np.random.default_rng(config.seed)
    return _iterate(model, image, label, config.epsilon, config.step_size,
                    config.iterations, random_start=config.random_start,
                    run_to_completion=config.run_to_completion, rng=rng)


ATTACKS = {"fgsm": fgsm, "bim": bim, "pgd": pgd}


def run_attack(name, model, image, label, config: AttackConfig):
    if name not in ATTACKS:
        raise ValueError(f"unknown attack {name!r}, expected one of "
                         f"{ATTACK_NAMES}")
    return ATTACKS[name](model, image, label, config)


def attack_record(model, image, label, name, config, keep_trace=False):
    """Run one attack and package the outcome."""
    _, orig_pred = _query(model, image)
    adv, trace = run_attack(name, model, image, label, config)
    final_pred = trace.steps[-1].predicted
    return AdversarialRecord(
        original=np.asarray(image, dtype=np.float64),
        adversarial=adv,
        true_label=int(label),
        original_prediction=orig_pred,
        adversarial_prediction=final_pred,
        attack=name,
        epsilon=config.epsilon,
        success=final_pred != int(label),
        queries=len(trace),
        trace=trace if keep_trace else None,
        alpha=config.step_size,
        iterations=config.iterations,
        seed=config.seed,
    )


def generate_adversarial_set(model, images, labels, name, config,
                             provenance, skip_misclassified=True,
                             keep_traces=False,
                             fingerprint="") -> AdversarialSet:
    """Attack a batch of images; per-seed variation comes from the index.

    Images the model already misclassifies are skipped by default,
    matching how attack success is normally scored.
    """
    records = []
    for i, (img, lab) in enumerate(zip(images, labels)):
        if skip_misclassified:
            _, pred = _query(model, img)
            if pred != int(lab):
                continue
        cfg = replace(config, seed=config.seed + i)
        records.append(attack_record(model, img, lab, name, cfg,
                                     keep_trace=keep_traces))
    logger.info("generated %d/%d adversarial records (%s, eps=%g)",
                sum(r.success for r in records), len(records),
                name, config.epsilon)
    return AdversarialSet(records, provenance, name, config,
                          model_fingerprint=fingerprint)


def attack_success_rate(model, aset: AdversarialSet) -> float:
    """Fraction of the set's adversarial images the model misclassifies.

    Evaluating a defended model here gives 1 - block rate."""
    if not aset.records:
        raise ValueError("success rate of an empty adversarial set is undefined")
    wrong = 0
    for rec in aset.records:
        _, pred = _query(model, rec.adversarial)
        wrong += pred != rec.true_label
    return wrong / len(aset.records)


def block_rate(model, aset: AdversarialSet) -> float:
    """Fraction of the set's adversarial images the model gets right."""
    return 1.0 - attack_success_rate(model, aset)


def generation_success_rate(aset: AdversarialSet) -> float:
    """Fraction of records that fooled the model they were generated on."""
    if not aset.records:
        raise ValueError("success rate of an empty adversarial set is undefined")
    return sum(r.success for r in aset.records) / len(aset.records)


def calibrate_epsilon(model, images, labels, config=None,
                      candidates=EPSILON_CANDIDATES, target=0.8):
    """Smallest candidate epsilon whose pgd success rate reaches the target.

    Returns (epsilon, {epsilon: rate}).  Falls back to the largest
    candidate (with a warning) if none reaches the target.
    """
    config = config or AttackConfig()
    rates = {}
    for eps in candidates:
        aset = generate_adversarial_set(
            model, images, labels, "pgd", replace(config, epsilon=eps),
            provenance="new")
        rates[eps] = generation_success_rate(aset)
        logger.info("epsilon calibration: eps=%g -> success %.3f",
                    eps, rates[eps])
        if rates[eps] >= target:
            return eps, rates
    worst = max(candidates)
    logger.warning("no candidate epsilon reached %.0f%% success; "
                   "falling back to %g", 100 * target, worst)
    return worst, rates


# ---------------------------------------------------------------------------
# persistence: 8-bit PNG images plus a CSV index and a JSON sidecar.
# PNG quantizes pixels to 1/255 steps, so a reloaded set is an 8-bit
# approximation of the float64 originals (fine for inspection and for
# reuse as training material, not for bit-exact replay).

def _to_png(image, path):
    arr = np.rint(np.asarray(image) * 255.0).astype(np.uint8)
    Image.fromarray(arr).save(path)


def _from_png(path):
    return np.asarray(Image.open(path), dtype=np.float64) / 255.0


def save_adversarial_set(aset: AdversarialSet, directory):
    directory = Path(directory)
    (directory / "originals").mkdir(parents=True, exist_ok=True)
    (directory / "adversarials").mkdir(parents=True, exist_ok=True)

    with open(directory / "index.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["index", "attack", "epsilon", "alpha", "iterations",
                         "seed", "true_label", "original_prediction",
                         "adversarial_prediction", "success", "queries",
                         "original_path", "adversarial_path"])
        for i, rec in enumerate(aset.records):
            opath = f"originals/{i:04d}.png"
            apath = f"adversarials/{i:04d}.png"
            _to_png(rec.original, directory / opath)
            _to_png(rec.adversarial, directory / apath)
            writer.writerow([i, rec.attack, repr(rec.epsilon),
                             repr(rec.alpha), rec.iterations, rec.seed,
                             rec.true_label, rec.original_prediction,
                             rec.adversarial_prediction,
                             int(rec.success), rec.queries, opath, apath])

    meta = {
        "provenance": aset.provenance,
        "attack": aset.attack,
        "model_fingerprint": aset.model_fingerprint,
        "config": {
            "epsilon": aset.config.epsilon,
            "alpha": aset.config.alpha,
            "iterations": aset.config.iterations,
            "random_start": aset.config.random_start,
            "run_to_completion": aset.config.run_to_completion,
            "seed": aset.config.seed,
        },
    }
    with open(directory / "set.json", "w") as fh:
        json.dump(meta, fh, indent=2)


def load_adversarial_set(directory) -> AdversarialSet:
    directory = Path(directory)
    with open(directory / "set.json") as fh:
        meta = json.load(fh)
    config = AttackConfig(**meta["config"])

    records = []
    with open(directory / "index.csv", newline="") as fh:
        for row in csv.DictReader(fh):
            records.append(AdversarialRecord(
                original=_from_png(directory / row["original_path"]),
                adversarial=_from_png(directory / row["adversarial_path"]),
                true_label=int(row["true_label"]),
                original_prediction=int(row["original_prediction"]),
                adversarial_prediction=int(row["adversarial_prediction"]),
                attack=row["attack"],
                epsilon=float(row["epsilon"]),
                success=bool(int(row["success"])),
                queries=int(row["queries"]),
                alpha=float(row["alpha"]),
                iterations=int(row["iterations"]),
                seed=int(row["seed"]),
            ))
    return AdversarialSet(records, meta["provenance"], meta["attack"],
                          config, meta.get("model_fingerprint", ""))


def perturbation_size(record: AdversarialRecord) -> float:
    """L-infinity distance between original and adversarial image."""
    return float(np.max(np.abs(record.adversarial - record.original)))


def within_ball(trace_or_record, epsilon, atol=1e-12) -> bool:
    """Every iterate inside the epsilon ball and the pixel range.

    atol absorbs the half-ulp a rounded (original + epsilon) bound can
    exceed epsilon by."""
    if isinstance(trace_or_record, AdversarialRecord):
        rec = trace_or_record
        imgs = [rec.adversarial]
        origin = rec.original
        if rec.trace is not None:
            imgs = rec.trace.images()
            origin = rec.trace.steps[0].image
    else:
        imgs = trace_or_record.images()
        origin = trace_or_record.steps[0].image
    bound = epsilon + atol
    for img in imgs:
        if np.max(np.abs(img - origin)) > bound:
            return False
        if img.min() < -atol or img.max() > 1.0 + atol:
            return False
    return True


def trace_is_valid(trace: QueryTrace, original, epsilon) -> bool:
    """Step 0 is the original bit for bit, indices strictly increase,
    and every image obeys the ball and range bounds."""
    if not trace.steps:
        return False
    if not np.array_equal(trace.steps[0].image, np.asarray(original)):
        return False
    indices = [s.index for s in trace.steps]
    if any(b <= a for a, b in zip(indices, indices[1:])) or indices[0] != 0:
        return False
    return within_ball(trace, epsilon)


def mean_queries(aset: AdversarialSet) -> float:
    if not aset.records:
        raise ValueError("mean queries of an empty set is undefined")
    return float(np.mean([r.queries for r in aset.records]))
