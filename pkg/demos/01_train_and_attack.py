"""Train a small two-class conv net and break it with gradient attacks.

Walks the core loop end to end: synthetic dataset in, frozen-extractor
model trained, then fgsm / bim / pgd each attack the same test images
and report success rate, query cost, and perturbation size.  Everything
is seeded, so reruns print the same numbers.
"""

import numpy as np

from advlab import data, nn
from advlab.attacks import (
    AttackConfig,
    generate_adversarial_set,
    generation_success_rate,
    mean_queries,
    perturbation_size,
)


def main():
    ds = data.ingest({"kind": "synthetic", "count": 1200, "seed": 0})
    print(f"dataset: {len(ds.train_images)} train / {len(ds.test_images)} "
          f"test images, classes {ds.class_names}")

    model = nn.train_model(ds.train_images, ds.train_labels,
                           config=nn.TrainConfig(epochs=15, learning_rate=0.02, seed=0), seed=0)
    acc = nn.accuracy(model, ds.test_images, ds.test_labels)
    print(f"clean test accuracy: {acc:.3f}\n")

    epsilon = 0.03
    print(f"attacking the first 40 test images at epsilon {epsilon} "
          f"(max per-pixel change, pixels in [0, 1])")
    for name in ("fgsm", "bim", "pgd"):
        cfg = AttackConfig(epsilon=epsilon, iterations=50)
        aset = generate_adversarial_set(
            model, ds.test_images[:40], ds.test_labels[:40], name, cfg,
            provenance="new", fingerprint=model.fingerprint())
        linf = np.mean([perturbation_size(r) for r in aset.records])
        print(f"  {name:>4}: success {generation_success_rate(aset):.2f}  "
              f"mean queries {mean_queries(aset):5.1f}  "
              f"mean Linf {linf:.4f}")

    # one concrete example: what the winning attack actually changed
    cfg = AttackConfig(epsilon=epsilon, iterations=50)
    aset = generate_adversarial_set(
        model, ds.test_images[:40], ds.test_labels[:40], "pgd", cfg,
        provenance="new")
    rec = next(r for r in aset.records if r.success)
    delta = rec.adversarial - rec.original
    print(f"\nexample: true class {rec.true_label} -> predicted "
          f"{rec.adversarial_prediction} after {rec.queries} queries; "
          f"max |delta| {np.max(np.abs(delta)):.4f}, "
          f"mean |delta| {np.mean(np.abs(delta)):.5f}")


if __name__ == "__main__":
    main()
