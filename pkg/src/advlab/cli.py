"""Command-line front end.

Thin wrappers over the library: each subcommand loads what it needs,
calls one or two library functions, and writes or prints the result.
Exit code 0 on success; failures print the reason (for pipeline runs,
including the failing stage) and exit nonzero.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import data as data_mod
from .attacks import (
    AttackConfig,
    attack_success_rate,
    block_rate,
    generate_adversarial_set,
    generation_success_rate,
    load_adversarial_set,
    mean_queries,
    save_adversarial_set,
)
from .defenses import (
    AutoencoderTrainConfig,
    DetectorConfig,
    adversarial_train,
    apply_initial_autoencoder,
    apply_middle_autoencoder,
    calibrate_tau,
    extract_features,
    load_defense,
    save_defense,
    train_autoencoder,
)
from .graphs import (
    build_graph,
    diff_graphs,
    export_graph,
    frequency_table,
    graph_from_json,
)
from .nn import TrainConfig, accuracy, load_model, save_model, train_model
from .pipeline import (
    ExperimentConfig,
    StageError,
    detect_sim_experiment,
    run_pipeline,
)


def _dataset(spec_text, split_ratio=0.8, split_seed=0):
    spec = json.loads(spec_text) if spec_text.lstrip().startswith("{") \
        else spec_text
    return data_mod.ingest(spec, split_ratio=split_ratio,
                           split_seed=split_seed)


def _split(ds, which):
    if which == "train":
        return ds.train_images, ds.train_labels
    return ds.test_images, ds.test_labels


def _variant(args):
    model = load_model(args.model)
    if getattr(args, "defense_file", None):
        return model, load_defense(args.defense_file, model)
    return model, model


# ---------------------------------------------------------------------------
# subcommands

def cmd_train(args):
    ds = _dataset(args.dataset)
    model = train_model(
        ds.train_images, ds.train_labels,
        input_shape=ds.train_images.shape[1:],
        config=TrainConfig(epochs=args.epochs,
                           learning_rate=args.learning_rate,
                           seed=args.seed),
        seed=args.seed)
    save_model(model, args.out)
    acc = accuracy(model, ds.test_images, ds.test_labels)
    print(f"saved {args.out}; clean test accuracy {acc:.4f}")
    return 0


def cmd_attack(args):
    ds = _dataset(args.dataset)
    images, labels = _split(ds, args.split)
    model, variant = _variant(args)
    cfg = AttackConfig(epsilon=args.epsilon, iterations=args.iterations,
                       seed=args.seed)
    aset = generate_adversarial_set(
        variant, images[:args.count], labels[:args.count], args.attack, cfg,
        provenance=args.provenance, fingerprint=variant.fingerprint())
    save_adversarial_set(aset, args.out)
    print(f"saved {len(aset.records)} records to {args.out}; "
          f"success {generation_success_rate(aset):.3f}, "
          f"mean queries {mean_queries(aset):.1f}")
    return 0


def cmd_defend(args):
    ds = _dataset(args.dataset)
    model = load_model(args.model)
    if args.defense == "adversarial_training":
        known = load_adversarial_set(args.known)
        defended = adversarial_train(
            model, ds.train_images, ds.train_labels, known,
            TrainConfig(epochs=args.epochs, learning_rate=args.learning_rate,
                        seed=args.seed))
    elif args.defense == "middle_autoencoder":
        feats = extract_features(model, ds.train_images)
        ae = train_autoencoder(
            feats, args.latent,
            AutoencoderTrainConfig(epochs=args.epochs,
                                   learning_rate=args.learning_rate,
                                   seed=args.seed))
        defended = apply_middle_autoencoder(model, ae)
    elif args.defense == "initial_autoencoder":
        ae = train_autoencoder(
            ds.train_images, args.latent,
            AutoencoderTrainConfig(epochs=args.epochs,
                                   learning_rate=args.learning_rate,
                                   seed=args.seed),
            bottleneck_activation="identity")
        defended = apply_initial_autoencoder(model, ae)
    else:
        tau = calibrate_tau(ds.train_images[:args.tau_sample],
                            percentile=args.tau_percentile)
        Path(args.out).write_text(json.dumps(
            {"tau_d": tau, "tau_percentile": args.tau_percentile,
             "alarm_threshold": args.alarm_threshold,
             "metric": "ssim", "action": args.action},
            indent=1, sort_keys=True))
        print(f"saved {args.out}; tau_d {tau!r}")
        return 0
    save_defense(defended, args.out)
    print(f"saved {args.out}")
    return 0


def cmd_evaluate(args):
    ds = _dataset(args.dataset)
    images, labels = _split(ds, args.split)
    model, variant = _variant(args)
    out = {"clean_accuracy": accuracy(variant, images, labels)}
    if args.adversarial_set:
        aset = load_adversarial_set(args.adversarial_set)
        out["attack_success_rate"] = attack_success_rate(variant, aset)
        out["block_rate"] = block_rate(variant, aset)
    if args.format == "json":
        print(json.dumps(out, indent=1, sort_keys=True))
    else:
        for key, val in out.items():
            print(f"{key}: {val:.4f}")
    return 0


def cmd_graph(args):
    ds = _dataset(args.dataset)
    images, _ = _split(ds, args.split)
    model, variant = _variant(args)
    g = build_graph(variant, images[args.index],
                    sample_id=f"{args.split}{args.index:04d}")
    export_graph(g, args.format, args.out)
    print(f"saved {args.out} ({g.node_count} nodes, "
          f"predicted class {g.predicted})")
    return 0


def cmd_diff(args):
    d = diff_graphs(graph_from_json(args.graph_a),
                    graph_from_json(args.graph_b))
    if args.format == "svg":
        export_graph(d, "svg", args.out)
    else:
        Path(args.out).write_text(json.dumps(
            {"modified_final_edges": d.modified_final_edges,
             "mean_abs_impact_delta": d.mean_abs_impact_delta()},
            indent=1, sort_keys=True))
    print(f"saved {args.out}; modified final edges {d.modified_final_edges}")
    return 0


def cmd_freq(args):
    ds = _dataset(args.dataset)
    images, labels = _split(ds, args.split)
    model, variant = _variant(args)
    table = frequency_table(variant, images, labels)
    table.to_csv(args.out)
    print(f"saved {args.out}; top polarized {table.top_polarized(5)}")
    return 0


def cmd_detect_sim(args):
    ds = _dataset(args.dataset)
    model, variant = _variant(args)
    tau = calibrate_tau(ds.train_images[:args.tau_sample],
                        percentile=args.tau_percentile)
    det = DetectorConfig(tau_d=tau, alarm_threshold=args.alarm_threshold)
    slow = AttackConfig(epsilon=args.epsilon,
                        alpha=args.epsilon / args.alpha_divisor,
                        iterations=args.iterations, random_start=False)
    result = detect_sim_experiment(
        variant, ds.test_images, ds.test_labels, det, slow,
        attack_runs=args.attack_runs, benign_runs=args.benign_runs,
        stream_length=args.stream_length, seed=args.seed)
    result.pop("runs")
    result["tau_d"] = tau
    print(json.dumps(result, indent=1, sort_keys=True))
    return 0


def cmd_report(args):
    metrics = json.loads((Path(args.run) / "report" / "metrics.json")
                         .read_text())
    if args.format == "json":
        print(json.dumps(metrics, indent=1, sort_keys=True))
        return 0
    for rel in ("report/table1_impact.csv", "report/table2_defenses.csv"):
        p = Path(args.run) / rel
        if p.exists():
            print(f"--- {rel}")
            print(p.read_text().rstrip())
    det = metrics.get("detector") or {}
    if det:
        print("--- detector")
        print(f"detection_rate: {det['detection_rate']}")
        print(f"median_detection_step: {det['median_detection_step']}")
        print(f"false_positive_rate: {det['false_positive_rate']}")
    if metrics.get("correlation"):
        c = metrics["correlation"]
        print(f"--- correlation: r={c['r']} over n={c['n']}")
    if metrics.get("trajectory"):
        t = metrics["trajectory"]
        print(f"--- trajectories: {t['decreased']}/{t['runs']} decreased")
    return 0


def cmd_pipeline(args):
    config = ExperimentConfig.from_json(args.config) if args.config \
        else ExperimentConfig()
    run_pipeline(config, args.out)
    print(f"pipeline complete; artifacts under {args.out}")
    return 0


# ---------------------------------------------------------------------------
# parser

def _add_dataset(p):
    p.add_argument("--dataset", required=True,
                   help="JSON dataset spec or a class-folder path")
    p.add_argument("--split", choices=("train", "test"), default="test")


def _add_model(p, defense=True):
    p.add_argument("--model", required=True, help="model JSON path")
    if defense:
        p.add_argument("--defense-file", default=None,
                       help="optional defense JSON wrapping the model")


def build_parser():
    parser = argparse.ArgumentParser(
        prog="advlab",
        description="adversarial attacks, defenses and behavior graphs "
                    "for small image classifiers")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model on a dataset")
    _add_dataset(p)
    p.add_argument("--epochs", type=int, default=15)
    p.add_argument("--learning-rate", type=float, default=0.02)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("attack", help="generate an adversarial set")
    _add_dataset(p)
    _add_model(p)
    p.add_argument("--attack", choices=("fgsm", "bim", "pgd"), default="pgd")
    p.add_argument("--epsilon", type=float, default=0.03)
    p.add_argument("--iterations", type=int, default=50)
    p.add_argument("--count", type=int, default=100)
    p.add_argument("--provenance", choices=("known", "new"), default="new")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_attack)

    p = sub.add_parser("defend", help="fit one defense for a model")
    _add_dataset(p)
    _add_model(p, defense=False)
    p.add_argument("--defense", required=True,
                   choices=("adversarial_training", "middle_autoencoder",
                            "initial_autoencoder", "prediction_similarity"))
    p.add_argument("--known", help="known adversarial set directory")
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--learning-rate", type=float, default=0.01)
    p.add_argument("--latent", type=int, default=256)
    p.add_argument("--tau-sample", type=int, default=100)
    p.add_argument("--tau-percentile", type=float, default=0.25)
    p.add_argument("--alarm-threshold", type=int, default=10)
    p.add_argument("--action", default="flip_class",
                   choices=("flip_class", "block", "secondary_model"))
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_defend)

    p = sub.add_parser("evaluate",
                       help="accuracy and block rates for a variant")
    _add_dataset(p)
    _add_model(p)
    p.add_argument("--adversarial-set", default=None)
    p.add_argument("--format", choices=("text", "json"), default="text")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("graph", help="export one sample's behavior graph")
    _add_dataset(p)
    _add_model(p)
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--format", choices=("json", "dot", "svg"),
                   default="json")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_graph)

    p = sub.add_parser("diff", help="diff two exported behavior graphs")
    p.add_argument("--graph-a", required=True)
    p.add_argument("--graph-b", required=True)
    p.add_argument("--format", choices=("json", "svg"), default="json")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_diff)

    p = sub.add_parser("freq",
                       help="per-class activation frequency table (CSV)")
    _add_dataset(p)
    _add_model(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_freq)

    p = sub.add_parser("detect-sim",
                       help="run the query-stream detector experiment")
    _add_dataset(p)
    _add_model(p)
    p.add_argument("--epsilon", type=float, default=0.03)
    p.add_argument("--alpha-divisor", type=float, default=50.0)
    p.add_argument("--iterations", type=int, default=150)
    p.add_argument("--attack-runs", type=int, default=10)
    p.add_argument("--benign-runs", type=int, default=10)
    p.add_argument("--stream-length", type=int, default=60)
    p.add_argument("--tau-sample", type=int, default=100)
    p.add_argument("--tau-percentile", type=float, default=0.25)
    p.add_argument("--alarm-threshold", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_detect_sim)

    p = sub.add_parser("report", help="print the tables of a finished run")
    p.add_argument("--run", required=True, help="pipeline output directory")
    p.add_argument("--format", choices=("text", "json"), default="text")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("pipeline", help="run the full experiment")
    p.add_argument("--config", default=None,
                   help="experiment config JSON (defaults when omitted)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_pipeline)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except StageError as exc:
        print(str(exc), file=sys.stderr)
        return 2
    except (ValueError, OSError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
