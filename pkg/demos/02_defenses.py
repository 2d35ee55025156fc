"""Fit the three model-side defenses and score them on one known set.

The known set is built from training images (the defender is assumed to
have collected adversarials against its own model).  Each defense then
reports two numbers: how many known adversarials it blocks, and what it
costs in clean accuracy.
"""

from advlab import data, nn
from advlab.attacks import AttackConfig, block_rate, generate_adversarial_set
from advlab.defenses import (
    AutoencoderTrainConfig,
    adversarial_train,
    apply_initial_autoencoder,
    apply_middle_autoencoder,
    extract_features,
    train_autoencoder,
)


def main():
    ds = data.ingest({"kind": "synthetic", "count": 1200, "seed": 0})
    model = nn.train_model(ds.train_images, ds.train_labels,
                           config=nn.TrainConfig(epochs=15, learning_rate=0.02, seed=0), seed=0)
    base_acc = nn.accuracy(model, ds.test_images, ds.test_labels)
    print(f"clean test accuracy (undefended): {base_acc:.3f}")

    known = generate_adversarial_set(
        model, ds.train_images[:60], ds.train_labels[:60], "pgd",
        AttackConfig(epsilon=0.03, iterations=50),
        provenance="known", fingerprint=model.fingerprint())
    known.records = [r for r in known.records if r.success]
    print(f"known set: {len(known.records)} successful adversarials "
          f"from training images\n")

    variants = {}
    variants["adversarial_training"] = adversarial_train(
        model, ds.train_images, ds.train_labels, known,
        nn.TrainConfig(epochs=20, learning_rate=0.01, seed=1))

    feats = extract_features(model, ds.train_images)
    mid_ae = train_autoencoder(
        feats, 256, AutoencoderTrainConfig(epochs=40, seed=2))
    variants["middle_autoencoder"] = apply_middle_autoencoder(model, mid_ae)

    # pixel-space bottleneck: linear, since relu units die on raw images
    init_ae = train_autoencoder(
        ds.train_images, 128,
        AutoencoderTrainConfig(epochs=30, learning_rate=0.1, seed=3),
        bottleneck_activation="identity")
    variants["initial_autoencoder"] = apply_initial_autoencoder(model, init_ae)

    print(f"{'defense':<24} {'blocks known':>12} {'clean acc':>10} "
          f"{'drop (pts)':>10}")
    for name, variant in variants.items():
        acc = nn.accuracy(variant, ds.test_images, ds.test_labels)
        print(f"{name:<24} {block_rate(variant, known):>12.3f} "
              f"{acc:>10.3f} {100 * (base_acc - acc):>10.1f}")
    print("\na blocked adversarial is one the defended model no longer "
          "misclassifies")


if __name__ == "__main__":
    main()
