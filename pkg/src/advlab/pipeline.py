"""End-to-end experiment harness.

One call runs the whole study on a two-class image dataset: train the
frozen-extractor model, calibrate and run the three gradient attacks,
fit the three model-side defenses, exercise the query-stream detector
against slow iterative attacks and benign traffic, build the
behavior-graph analytics (per-layer diffs, activation frequencies, a
modified-connection correlation, impact trajectories), and write every
table and artifact under one output directory with a SHA-256 manifest.
Reruns with the same config are byte-identical, so the manifest doubles
as a reproducibility check.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import statistics
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import data as data_mod
from . import similarity
from .attacks import (
    AdversarialSet,
    AttackConfig,
    attack_record,
    block_rate,
    calibrate_epsilon,
    generate_adversarial_set,
    generation_success_rate,
    mean_queries,
    perturbation_size,
    save_adversarial_set,
)
from .defenses import (
    DEFENSE_KINDS,
    AutoencoderTrainConfig,
    DetectorConfig,
    HistoryStore,
    adversarial_train,
    apply_initial_autoencoder,
    apply_middle_autoencoder,
    calibrate_tau,
    extract_features,
    guarded_predict,
    save_defense,
    train_autoencoder,
)
from .graphs import (
    build_graph,
    diff_graphs,
    export_graph,
    frequency_table,
    pearson_correlation,
    trajectory,
)
from .nn import TrainConfig, accuracy, save_model, train_model

logger = logging.getLogger(__name__)

MODEL_DEFENSES = ("adversarial_training", "middle_autoencoder",
                  "initial_autoencoder")

STAGES = ("dataset", "train", "attacks", "defenses", "evaluation",
          "detector", "frequency", "graphs", "correlation",
          "trajectories", "report")


class StageError(RuntimeError):
    """A pipeline stage failed; partial outputs stay on disk."""

    def __init__(self, stage, cause):
        super().__init__(f"pipeline failed at stage {stage!r}: {cause}")
        self.stage = stage
        self.cause = cause


# ---------------------------------------------------------------------------
# configuration

@dataclass(frozen=True)
class ExperimentConfig:
    """Every knob of one experiment run; JSON round-trips exactly.

    The output directory is deliberately not part of the config, so the
    same config written into two directories produces byte-identical
    artifacts.
    """

    dataset: dict = field(default_factory=lambda: {
        "kind": "synthetic", "count": 2000, "seed": 0})
    split_ratio: float = 0.8
    split_seed: int = 0

    conv_channels: tuple = (16, 8)
    head_dims: tuple = (256, 2)
    model_seed: int = 0
    epochs: int = 15
    learning_rate: float = 0.02
    batch_size: int = 32

    attack: str = "pgd"
    epsilon: float | None = None        # None picks the calibrated value
    attack_iterations: int = 50
    attack_seed: int = 0
    calibration_count: int = 50         # test images for epsilon calibration
    known_count: int = 200              # train images attacked for the known set
    eval_count: int = 100               # test images per evaluation attack set

    defenses: tuple = DEFENSE_KINDS
    adv_epochs: int = 20
    adv_learning_rate: float = 0.01
    adv_seed: int = 1
    middle_latent: int = 256
    middle_epochs: int = 40
    middle_learning_rate: float = 0.05
    middle_seed: int = 2
    initial_latent: int = 128
    initial_epochs: int = 30
    initial_learning_rate: float = 0.1
    initial_seed: int = 3

    detector_metric: str = "ssim"
    tau_percentile: float = 0.25
    tau_sample: int = 100               # train images used to calibrate tau
    alarm_threshold: int = 10
    detector_action: str = "flip_class"
    detect_attack_runs: int = 100
    detect_benign_runs: int = 100
    benign_stream_length: int = 80
    slow_alpha_divisor: float = 50.0    # slow attack step = epsilon / divisor
    slow_iterations: int = 150
    lone_submissions: int = 100
    detect_seed: int = 0

    trajectory_runs: int = 20
    trajectory_alpha_divisor: float = 20.0
    trajectory_iterations: int = 100
    watched_count: int = 10

    def __post_init__(self):
        for name in self.defenses:
            if name not in DEFENSE_KINDS:
                raise ValueError(f"unknown defense {name!r} in config")
        if self.eval_count < 1 or self.known_count < 1:
            raise ValueError("eval_count and known_count must be positive")

    def to_json(self) -> str:
        doc = dataclasses.asdict(self)
        return json.dumps(doc, indent=1, sort_keys=True)

    @classmethod
    def from_json(cls, text_or_path) -> "ExperimentConfig":
        text = str(text_or_path)
        if not text.lstrip().startswith("{"):
            text = Path(text).read_text()
        doc = json.loads(text)
        known = {f.name for f in dataclasses.fields(cls)}
        extra = sorted(set(doc) - known)
        if extra:
            raise ValueError(f"unknown config keys: {', '.join(extra)}")
        for key in ("conv_channels", "head_dims", "defenses"):
            if key in doc:
                doc[key] = tuple(doc[key])
        return cls(**doc)


def impact_tier(drop_points: float) -> str:
    """Qualitative label for a clean-accuracy drop in percentage points."""
    if drop_points <= 0:
        return "No impact"
    if drop_points <= 1:
        return "Very low"
    if drop_points <= 5:
        return "Low"
    return "Medium"


# ---------------------------------------------------------------------------
# results

@dataclass
class ReportBundle:
    """Everything the report stage writes, kept in memory for callers."""

    epsilon: float = 0.0
    epsilon_rates: dict = field(default_factory=dict)
    dataset_summary: dict = field(default_factory=dict)
    clean_accuracy: dict = field(default_factory=dict)
    drop_points: dict = field(default_factory=dict)
    impact_tier: dict = field(default_factory=dict)
    undefended_attacks: dict = field(default_factory=dict)
    known_generation: dict = field(default_factory=dict)
    known_block_rate: dict = field(default_factory=dict)
    new_attacks: dict = field(default_factory=dict)
    detector: dict = field(default_factory=dict)
    similarity_summary: dict = field(default_factory=dict)
    top_polarized: list = field(default_factory=list)
    graph_summary: dict = field(default_factory=dict)
    correlation: dict = field(default_factory=dict)
    trajectory: dict = field(default_factory=dict)
    stages_completed: list = field(default_factory=list)
    files: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), indent=1, sort_keys=True)


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(65536), b""):
            h.update(chunk)
    return h.hexdigest()


class _Workspace:
    """Tracks every file written under the output directory."""

    def __init__(self, out_dir):
        self.root = Path(out_dir)
        self.root.mkdir(parents=True, exist_ok=True)
        self.files = {}

    def path(self, rel) -> Path:
        p = self.root / rel
        p.parent.mkdir(parents=True, exist_ok=True)
        return p

    def track(self, rel):
        self.files[str(rel)] = _sha256(self.root / rel)

    def track_tree(self, rel):
        base = self.root / rel
        for p in sorted(base.rglob("*")):
            if p.is_file():
                self.track(p.relative_to(self.root))

    def write_text(self, rel, text):
        self.path(rel).write_text(text)
        self.track(rel)

    def manifest(self, stages_completed, failed_stage=None):
        doc = {
            "failed_stage": failed_stage,
            "stages_completed": list(stages_completed),
            "files": dict(sorted(self.files.items())),
        }
        # the manifest hashes everything else, so it is written last
        # and is not listed in itself
        self.path("manifest.json").write_text(
            json.dumps(doc, indent=1, sort_keys=True))


# ---------------------------------------------------------------------------
# detector experiment

def detect_sim_experiment(model, images, labels, detector_config,
                          attack_config, attack_name="bim",
                          attack_runs=100, benign_runs=100,
                          stream_length=80, lone_images=None,
                          seed=0, exemplar_dir=None):
    """Measure the query-stream detector against attacks and benign use.

    Every attack run replays one iterative attack trace (generated
    against the undefended model) through the guard under a fresh user;
    every benign run streams a seeded shuffle of distinct images.  Lone
    images, if given, are each submitted once under their own user to
    confirm that an isolated adversarial with no history never flags.

    Returns a dict of rates plus one row per run; `detected` means the
    first flagged query came no later than the first successful
    adversarial query.
    """
    if attack_runs < 1 or benign_runs < 1:
        raise ValueError("the detector experiment needs at least one "
                         "attack run and one benign run")
    if stream_length > len(images):
        raise ValueError(f"benign streams draw {stream_length} distinct "
                         f"images but only {len(images)} exist")

    images = np.asarray(images, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    runs = []

    # --- iterative attacks, one fresh user each
    attacked = 0
    candidates = iter(range(len(images)))
    while attacked < attack_runs:
        try:
            idx = next(candidates)
        except StopIteration:
            raise ValueError(
                f"only {attacked} correctly-classified images available "
                f"for {attack_runs} attack runs") from None
        probs, _ = model.predict(images[idx])
        if int(np.argmax(probs)) != int(labels[idx]):
            continue
        cfg = replace(attack_config, seed=seed + attacked)
        rec = attack_record(model, images[idx], int(labels[idx]),
                            attack_name, cfg, keep_trace=True)
        store = HistoryStore(detector_config)
        user = f"attack{attacked:04d}"
        first_flag = None
        success_step = None
        for step in rec.trace.steps:
            guarded_predict(store, detector_config, model, user, step.image)
            seqs = store.history(user)
            if first_flag is None and seqs[-1].flagged:
                first_flag = seqs[-1].sequence
            if success_step is None and step.index > 0 \
                    and step.predicted != rec.true_label:
                success_step = seqs[-1].sequence
        detected = first_flag is not None and (
            success_step is None or first_flag <= success_step)
        runs.append({"kind": "attack", "run": attacked, "image": idx,
                     "queries": len(rec.trace), "first_flag": first_flag,
                     "success_step": success_step, "detected": detected})
        if exemplar_dir is not None and attacked == 0:
            store.save(Path(exemplar_dir) / "attack_run0")
        attacked += 1

    # --- benign streams, distinct images per user
    for b in range(benign_runs):
        rng = np.random.default_rng((seed, b))
        order = rng.choice(len(images), size=stream_length, replace=False)
        store = HistoryStore(detector_config)
        user = f"benign{b:04d}"
        first_flag = None
        for idx in order:
            guarded_predict(store, detector_config, model, user, images[idx])
            last = store.history(user)[-1]
            if first_flag is None and last.flagged:
                first_flag = last.sequence
        runs.append({"kind": "benign", "run": b, "image": None,
                     "queries": stream_length, "first_flag": first_flag,
                     "success_step": None, "detected": first_flag is not None})
        if exemplar_dir is not None and b == 0:
            store.save(Path(exemplar_dir) / "benign_run0")

    # --- lone submissions with empty history
    lone_flagged = None
    if lone_images is not None:
        lone_flagged = 0
        store = HistoryStore(detector_config)
        for i, img in enumerate(lone_images):
            user = f"lone{i:04d}"
            guarded_predict(store, detector_config, model, user, img)
            lone_flagged += store.history(user)[-1].flagged

    attack_rows = [r for r in runs if r["kind"] == "attack"]
    benign_rows = [r for r in runs if r["kind"] == "benign"]
    flag_steps = [r["first_flag"] for r in attack_rows
                  if r["first_flag"] is not None]
    result = {
        "attack_runs": attack_runs,
        "benign_runs": benign_runs,
        "detection_rate": sum(r["detected"] for r in attack_rows) / attack_runs,
        "median_detection_step": (float(statistics.median(flag_steps))
                                  if flag_steps else None),
        "false_positive_rate": sum(r["detected"] for r in benign_rows)
                               / benign_runs,
        "lone_submissions": None if lone_images is None else len(lone_images),
        "lone_flagged": lone_flagged,
        "runs": runs,
    }
    logger.info("detector experiment: detection %.3f (median step %s), "
                "benign fp %.3f, lone flags %s",
                result["detection_rate"], result["median_detection_step"],
                result["false_positive_rate"], lone_flagged)
    return result


# ---------------------------------------------------------------------------
# pipeline

def _successful_subset(aset: AdversarialSet) -> AdversarialSet:
    return AdversarialSet([r for r in aset.records if r.success],
                          aset.provenance, aset.attack, aset.config,
                          model_fingerprint=aset.model_fingerprint)


def _runs_csv(rows):
    lines = ["kind,run,image,queries,first_flag,success_step,detected"]
    for r in rows:
        lines.append(",".join("" if r[k] is None else str(r[k]) for k in
                              ("kind", "run", "image", "queries",
                               "first_flag", "success_step", "detected")))
    return "\n".join(lines) + "\n"


def _guarded_stream_accuracy(model, detector_config, images, labels):
    """Accuracy of guarded answers over one benign pass, plus flag count."""
    store = HistoryStore(detector_config)
    right = 0
    flags = 0
    for img, lab in zip(images, labels):
        guard, risk = guarded_predict(store, detector_config, model,
                                      "audit", img)
        right += (not guard.refused) and guard.predicted == int(lab)
        flags += risk.flagged
    return right / len(images), flags


def run_pipeline(config: ExperimentConfig, out_dir,
                 bundle_cls=ReportBundle) -> ReportBundle:
    """Run every stage and write the full artifact tree under out_dir.

    Raises StageError on the first failing stage; whatever was already
    written stays on disk, and the manifest records the failure point.
    """
    ws = _Workspace(out_dir)
    report = bundle_cls()
    done = report.stages_completed
    stage = STAGES[0]
    try:
        # ------------------------------------------------ dataset
        ws.write_text("config.json", config.to_json())
        ds = data_mod.ingest(config.dataset, split_ratio=config.split_ratio,
                             split_seed=config.split_seed)
        report.dataset_summary = {
            "source": ds.source,
            "class_names": list(ds.class_names),
            "train_count": len(ds.train_images),
            "test_count": len(ds.test_images),
        }
        done.append(stage)

        # ------------------------------------------------ train
        stage = "train"
        model = train_model(
            ds.train_images, ds.train_labels,
            input_shape=ds.train_images.shape[1:],
            conv_channels=config.conv_channels, head_dims=config.head_dims,
            config=TrainConfig(epochs=config.epochs,
                               learning_rate=config.learning_rate,
                               batch_size=config.batch_size,
                               seed=config.model_seed),
            seed=config.model_seed)
        save_model(model, ws.path("model.json"))
        ws.track("model.json")
        base_acc = accuracy(model, ds.test_images, ds.test_labels)
        report.clean_accuracy["original"] = base_acc
        logger.info("trained model: clean test accuracy %.4f", base_acc)
        done.append(stage)

        # ------------------------------------------------ attacks
        stage = "attacks"
        n_cal = config.calibration_count
        if config.epsilon is None:
            eps, rates = calibrate_epsilon(
                model, ds.test_images[:n_cal], ds.test_labels[:n_cal],
                config=AttackConfig(epsilon=0.01,
                                    iterations=config.attack_iterations,
                                    seed=config.attack_seed))
            report.epsilon_rates = {str(k): v for k, v in rates.items()}
        else:
            eps = config.epsilon
        report.epsilon = eps

        fp = model.fingerprint()
        known_all = generate_adversarial_set(
            model, ds.train_images[:config.known_count],
            ds.train_labels[:config.known_count], config.attack,
            AttackConfig(epsilon=eps, iterations=config.attack_iterations,
                         seed=config.attack_seed),
            provenance="known", fingerprint=fp)
        save_adversarial_set(known_all, ws.path("known_set"))
        ws.track_tree("known_set")
        known = _successful_subset(known_all)
        report.known_generation = {
            "attempted": len(known_all.records),
            "successful": len(known.records),
            "rate": generation_success_rate(known_all),
        }

        n_eval = config.eval_count
        eval_sets = {}
        for name in ("fgsm", "bim", "pgd"):
            aset = generate_adversarial_set(
                model, ds.test_images[:n_eval], ds.test_labels[:n_eval],
                name, AttackConfig(epsilon=eps,
                                   iterations=config.attack_iterations,
                                   seed=config.attack_seed),
                provenance="new", fingerprint=fp)
            eval_sets[name] = aset
            save_adversarial_set(aset, ws.path(f"eval_sets/{name}"))
            ws.track_tree(f"eval_sets/{name}")
            ok = [perturbation_size(r) for r in aset.records if r.success]
            report.undefended_attacks[name] = {
                "success_rate": generation_success_rate(aset),
                "mean_queries": mean_queries(aset),
                "mean_linf_successful": float(np.mean(ok)) if ok else None,
            }
        done.append(stage)

        # ------------------------------------------------ defenses
        stage = "defenses"
        variants = {}
        if "adversarial_training" in config.defenses:
            variants["adversarial_training"] = adversarial_train(
                model, ds.train_images, ds.train_labels, known,
                TrainConfig(epochs=config.adv_epochs,
                            learning_rate=config.adv_learning_rate,
                            batch_size=config.batch_size,
                            seed=config.adv_seed))
        if "middle_autoencoder" in config.defenses:
            feats = extract_features(model, ds.train_images)
            ae = train_autoencoder(
                feats, config.middle_latent,
                AutoencoderTrainConfig(epochs=config.middle_epochs,
                                       learning_rate=config.middle_learning_rate,
                                       batch_size=config.batch_size,
                                       seed=config.middle_seed))
            variants["middle_autoencoder"] = apply_middle_autoencoder(model, ae)
        if "initial_autoencoder" in config.defenses:
            ae = train_autoencoder(
                ds.train_images, config.initial_latent,
                AutoencoderTrainConfig(epochs=config.initial_epochs,
                                       learning_rate=config.initial_learning_rate,
                                       batch_size=config.batch_size,
                                       seed=config.initial_seed),
                bottleneck_activation="identity")
            variants["initial_autoencoder"] = apply_initial_autoencoder(model, ae)
        for name, variant in variants.items():
            save_defense(variant, ws.path(f"defended/{name}.json"))
            ws.track(f"defended/{name}.json")

        detector_config = None
        if "prediction_similarity" in config.defenses:
            tau = calibrate_tau(ds.train_images[:config.tau_sample],
                                metric=config.detector_metric,
                                percentile=config.tau_percentile)
            detector_config = DetectorConfig(
                metric=config.detector_metric, tau_d=tau,
                alarm_threshold=config.alarm_threshold,
                action=config.detector_action)
            ws.write_text("defended/detector.json", json.dumps(
                {"tau_d": tau, "tau_percentile": config.tau_percentile,
                 "tau_sample": config.tau_sample,
                 "metric": config.detector_metric,
                 "alarm_threshold": config.alarm_threshold,
                 "action": config.detector_action},
                indent=1, sort_keys=True))
            logger.info("detector threshold tau_d=%.4f (p%.2f of benign "
                        "pairwise distances)", tau, config.tau_percentile)
        done.append(stage)

        # ------------------------------------------------ evaluation
        stage = "evaluation"
        for name, variant in variants.items():
            report.clean_accuracy[name] = accuracy(variant, ds.test_images,
                                                   ds.test_labels)
            report.known_block_rate[name] = block_rate(variant, known)
        undefended_linf = report.undefended_attacks[config.attack][
            "mean_linf_successful"]
        report.new_attacks["original"] = {
            "success_rate": report.undefended_attacks[config.attack][
                "success_rate"],
            "mean_linf_successful": undefended_linf,
        }
        for name, variant in variants.items():
            aset = generate_adversarial_set(
                variant, ds.test_images[:n_eval], ds.test_labels[:n_eval],
                config.attack,
                AttackConfig(epsilon=eps, iterations=config.attack_iterations,
                             seed=config.attack_seed + 500),
                provenance="new", fingerprint=variant.fingerprint())
            save_adversarial_set(aset, ws.path(f"new_sets/{name}"))
            ws.track_tree(f"new_sets/{name}")
            ok = [perturbation_size(r) for r in aset.records if r.success]
            report.new_attacks[name] = {
                "success_rate": generation_success_rate(aset),
                "mean_linf_successful": float(np.mean(ok)) if ok else None,
            }
        done.append(stage)

        # ------------------------------------------------ detector
        stage = "detector"
        if detector_config is not None:
            slow = AttackConfig(
                epsilon=eps, alpha=eps / config.slow_alpha_divisor,
                iterations=config.slow_iterations, random_start=False)
            lone = [r.adversarial for r in
                    known.records[:config.lone_submissions]]
            outcome = detect_sim_experiment(
                model, ds.test_images, ds.test_labels, detector_config,
                slow, attack_name="bim",
                attack_runs=config.detect_attack_runs,
                benign_runs=config.detect_benign_runs,
                stream_length=config.benign_stream_length,
                lone_images=lone, seed=config.detect_seed,
                exemplar_dir=ws.path("detector"))
            ws.track_tree("detector")
            ws.write_text("detector/detect_runs.csv",
                          _runs_csv(outcome.pop("runs")))
            guard_acc, guard_flags = _guarded_stream_accuracy(
                model, detector_config, ds.test_images, ds.test_labels)
            outcome["guarded_clean_accuracy"] = guard_acc
            outcome["guarded_stream_flags"] = guard_flags
            report.detector = outcome
            report.clean_accuracy["prediction_similarity"] = guard_acc
            report.known_block_rate["prediction_similarity"] = (
                0.0 if outcome["lone_flagged"] is None
                else outcome["lone_flagged"] / max(1, len(lone)))

            # attacks resubmit near-identical images; benign queries do not
            trace_rec = attack_record(
                model, ds.test_images[0], int(ds.test_labels[0]), "bim",
                replace(slow, seed=config.detect_seed), keep_trace=True)
            steps = trace_rec.trace.images()
            consec = [similarity.ssim(steps[i], steps[i + 1])
                      for i in range(len(steps) - 1)]
            sample = ds.train_images[:40]
            benign = [similarity.ssim(sample[i], sample[j])
                      for i in range(len(sample))
                      for j in range(i + 1, len(sample))]
            report.similarity_summary = {
                "attack_step_ssim_mean": float(np.mean(consec)),
                "benign_pair_ssim_mean": float(np.mean(benign)),
            }
        done.append(stage)

        # ------------------------------------------------ frequency
        stage = "frequency"
        freq = frequency_table(model, ds.test_images, ds.test_labels)
        freq.to_csv(ws.path("report/table3_frequency.csv"))
        ws.track("report/table3_frequency.csv")
        watched = freq.top_polarized(config.watched_count)
        report.top_polarized = watched
        done.append(stage)

        # ------------------------------------------------ graphs
        stage = "graphs"
        show = next((r for r in eval_sets[config.attack].records if r.success),
                    eval_sets[config.attack].records[0])
        g_clean = build_graph(model, show.original, sample_id="showcase")
        g_adv = build_graph(model, show.adversarial, sample_id="showcase")
        for fmt in ("json", "svg", "dot"):
            export_graph(g_clean, fmt, ws.path(f"graphs/original.{fmt}"))
            ws.track(f"graphs/original.{fmt}")
            export_graph(g_adv, fmt, ws.path(f"graphs/adversarial.{fmt}"))
            ws.track(f"graphs/adversarial.{fmt}")
        d_attack = diff_graphs(g_clean, g_adv)
        export_graph(d_attack, "svg", ws.path("graphs/diff_attack.svg"),
                     highlight=watched)
        ws.track("graphs/diff_attack.svg")
        report.graph_summary["attack_diff"] = {
            "mean_abs_impact_delta_per_layer":
                d_attack.mean_abs_impact_delta(),
            "modified_final_edges": d_attack.modified_final_edges,
        }
        if "adversarial_training" in variants:
            g_re = build_graph(variants["adversarial_training"],
                               show.original, sample_id="showcase")
            d_re = diff_graphs(g_clean, g_re)
            export_graph(d_re, "svg", ws.path("graphs/diff_retrained.svg"),
                         highlight=watched)
            ws.track("graphs/diff_retrained.svg")
            report.graph_summary["retrain_diff"] = {
                "mean_abs_impact_delta_per_layer":
                    d_re.mean_abs_impact_delta(),
                "modified_final_edges": d_re.modified_final_edges,
            }
        done.append(stage)

        # ------------------------------------------------ correlation
        stage = "correlation"
        if "adversarial_training" in variants and len(known.records) >= 2:
            adv_variant = variants["adversarial_training"]
            xs, ys = [], []
            lines = ["record,modified_final_edges,true_class_confidence"]
            for i, rec in enumerate(known.records):
                sid = f"known{i:04d}"
                d = diff_graphs(build_graph(model, rec.adversarial, sid),
                                build_graph(adv_variant, rec.adversarial, sid))
                probs, _ = adv_variant.predict(rec.adversarial)
                xs.append(float(d.modified_final_edges))
                ys.append(float(probs[rec.true_label]))
                lines.append(f"{i},{int(xs[-1])},{ys[-1]!r}")
            ws.write_text("report/correlation.csv", "\n".join(lines) + "\n")
            try:
                r = pearson_correlation(xs, ys)
                note = ""
            except ValueError as exc:
                r = None
                note = str(exc)
            report.correlation = {"r": r, "n": len(xs), "note": note,
                                  "x": "modified_final_edges",
                                  "y": "retrained_true_class_confidence"}
            logger.info("modified-connection correlation: r=%s over %d "
                        "known adversarials", r, len(xs))
        done.append(stage)

        # ------------------------------------------------ trajectories
        stage = "trajectories"
        watched0 = freq.class_leaning(0, config.watched_count)
        traj_cfg = AttackConfig(
            epsilon=eps, alpha=eps / config.trajectory_alpha_divisor,
            iterations=config.trajectory_iterations, random_start=False)
        rows = ["run,image,steps,start_mean_abs,end_mean_abs,decreased"]
        decreased = 0
        ran = 0
        idx = 0
        first = None
        while ran < config.trajectory_runs and idx < len(ds.test_images):
            img, lab = ds.test_images[idx], int(ds.test_labels[idx])
            idx += 1
            if lab != 0:
                continue
            probs, _ = model.predict(img)
            if int(np.argmax(probs)) != 0:
                continue
            rec = attack_record(model, img, lab, "bim",
                                replace(traj_cfg, seed=config.attack_seed + ran),
                                keep_trace=True)
            traj = trajectory(model, rec.trace, watched0)
            present = traj.present_impacts
            start = float(np.mean(np.abs(present[0])))
            end = float(np.mean(np.abs(present[-1])))
            down = end < start
            decreased += down
            rows.append(f"{ran},{idx - 1},{len(rec.trace)},{start!r},"
                        f"{end!r},{down}")
            if first is None:
                first = traj
            ran += 1
        if ran:
            ws.write_text("report/trajectories.csv", "\n".join(rows) + "\n")
            header = "step," + ",".join(f"n{n}" for n in first.neuron_ids)
            body = [header]
            shown = first.present_impacts
            for s in range(len(first.step_indices)):
                vals = ",".join(repr(float(v)) for v in shown[s])
                body.append(f"{first.step_indices[s]},{vals}")
            ws.write_text("report/trajectory_run0.csv", "\n".join(body) + "\n")
            report.trajectory = {
                "runs": ran,
                "decreased": decreased,
                "majority": decreased / ran,
                "watched_class0": [int(n) for n in watched0],
            }
            logger.info("impact trajectories: %d/%d runs decreased",
                        decreased, ran)
        done.append(stage)

        # ------------------------------------------------ report
        stage = "report"
        base = report.clean_accuracy["original"]
        for name, acc in report.clean_accuracy.items():
            drop = (base - acc) * 100.0
            report.drop_points[name] = drop
            report.impact_tier[name] = impact_tier(drop)
        t1 = ["variant,clean_accuracy,drop_points,impact_tier"]
        for name in ("original",) + tuple(k for k in DEFENSE_KINDS
                                          if k in report.clean_accuracy):
            t1.append(f"{name},{report.clean_accuracy[name]!r},"
                      f"{report.drop_points[name]!r},"
                      f"{report.impact_tier[name]}")
        ws.write_text("report/table1_impact.csv", "\n".join(t1) + "\n")

        t2 = ["defense,known_block_rate,new_attack_success,"
              "new_mean_linf_successful,detection_rate"]
        for name in DEFENSE_KINDS:
            if name not in report.known_block_rate:
                continue
            block = report.known_block_rate[name]
            new = report.new_attacks.get(name, {})
            det = (report.detector.get("detection_rate", "")
                   if name == "prediction_similarity" else "")
            linf = new.get("mean_linf_successful")
            t2.append(f"{name},{block!r},"
                      f"{'' if not new else repr(new['success_rate'])},"
                      f"{'' if linf is None else repr(linf)},"
                      f"{'' if det == '' else repr(det)}")
        ws.write_text("report/table2_defenses.csv", "\n".join(t2) + "\n")

        done.append(stage)
        ws.write_text("report/metrics.json", report.to_json())
        report.files = dict(ws.files)
        ws.manifest(done)
        logger.info("pipeline complete: %d artifacts under %s",
                    len(ws.files), ws.root)
        return report
    except Exception as exc:
        ws.manifest(done, failed_stage=stage)
        raise StageError(stage, exc) from exc
