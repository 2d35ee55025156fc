"""Adversarial-example laboratory for small image classifiers.

The package covers the full loop: train a frozen-extractor model,
attack it with FGSM/BIM/PGD, defend it (head retraining, autoencoder
reconstruction, query-stream detection), measure image similarity, and
explain what changed through per-sample behavior graphs.
"""

from .attacks import (
    ATTACKS,
    AdversarialRecord,
    AdversarialSet,
    AttackConfig,
    QueryStep,
    QueryTrace,
    attack_record,
    attack_success_rate,
    bim,
    block_rate,
    calibrate_epsilon,
    fgsm,
    generate_adversarial_set,
    generation_success_rate,
    load_adversarial_set,
    mean_queries,
    perturbation_size,
    pgd,
    run_attack,
    save_adversarial_set,
    trace_is_valid,
    within_ball,
)
from .data import Dataset, ingest, load_image_folder, split, synthetic_images
from .defenses import (
    Autoencoder,
    AutoencoderTrainConfig,
    DefendedModel,
    DetectorConfig,
    GuardedPrediction,
    HistoryStore,
    PredictionRecord,
    RiskAssessment,
    adversarial_train,
    apply_initial_autoencoder,
    apply_middle_autoencoder,
    build_autoencoder,
    calibrate_tau,
    extract_features,
    guarded_predict,
    identity_autoencoder,
    load_autoencoder,
    load_defense,
    replay_history,
    save_autoencoder,
    save_defense,
    train_autoencoder,
)
from .graphs import (
    BehaviorGraph,
    FrequencyTable,
    GraphDiff,
    Trajectory,
    build_graph,
    diff_graphs,
    export_graph,
    frequency_table,
    graph_from_json,
    graph_to_dot,
    graph_to_json,
    graph_to_svg,
    participation,
    participation_counts,
    pearson_correlation,
    trajectory,
)
from .nn import (
    ConfigurationError,
    DenseHead,
    DenseLayer,
    FeatureExtractor,
    ModelBundle,
    TrainConfig,
    TrainingDivergedError,
    accuracy,
    build_model,
    load_model,
    save_model,
    train_head,
    train_model,
)
from .pipeline import (
    ExperimentConfig,
    ReportBundle,
    StageError,
    detect_sim_experiment,
    impact_tier,
    run_pipeline,
)
from .similarity import SsimConfig, distance, mse, psnr, ssim

__version__ = "0.1.0"
