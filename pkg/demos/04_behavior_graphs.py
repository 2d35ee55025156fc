"""Look inside the dense head: behavior graphs, diffs, and trajectories.

A behavior graph snapshots one prediction: per-node activations, the
contribution carried by each edge, and each node's impact (what it adds
beyond its inputs).  Diffing the graphs of a clean image and its
adversarial twin shows where the attack rewired the decision; watching
impacts across the attack's own query trace shows the drift step by
step.  SVG snapshots land in demos/out/.
"""

from pathlib import Path

import numpy as np

from advlab import data, nn
from advlab.attacks import AttackConfig, attack_record
from advlab.graphs import (
    build_graph,
    diff_graphs,
    export_graph,
    frequency_table,
    trajectory,
)

OUT = Path(__file__).parent / "out"


def main():
    ds = data.ingest({"kind": "synthetic", "count": 1200, "seed": 0})
    model = nn.train_model(ds.train_images, ds.train_labels,
                           config=nn.TrainConfig(epochs=15, learning_rate=0.02, seed=0), seed=0)

    # pick a test image the model gets right, then break it
    idx = next(i for i in range(len(ds.test_images))
               if int(np.argmax(model.predict(ds.test_images[i])[0]))
               == int(ds.test_labels[i]))
    image, label = ds.test_images[idx], int(ds.test_labels[idx])
    rec = attack_record(model, image, label, "pgd",
                        AttackConfig(epsilon=0.03, iterations=50),
                        keep_trace=True)

    g_clean = build_graph(model, image, sample_id=f"test{idx:04d}")
    g_adv = build_graph(model, rec.adversarial, sample_id=f"test{idx:04d}")
    print(f"graph: {g_clean.node_count} nodes in layers "
          f"{g_clean.layer_sizes} ({' -> '.join(g_clean.layer_kinds)})")
    print(f"clean prediction {g_clean.predicted}, adversarial "
          f"{g_adv.predicted} (true {label})")

    d = diff_graphs(g_clean, g_adv)
    per_layer = [float(m) for m in d.mean_abs_impact_delta()]
    print(f"diff: {d.modified_final_edges} modified final-layer "
          f"connections; mean |impact delta| per layer "
          f"{[round(m, 4) for m in per_layer]}\n")

    # which neurons lean toward which class, over the test set
    table = frequency_table(model, ds.test_images, ds.test_labels)
    print("most polarized nodes (activation frequency per class):")
    for nid in table.top_polarized(5):
        f0 = table.frequency_class0[nid]
        f1 = table.frequency_class1[nid]
        print(f"  node {nid:4d}: class0 {f0:.4f}  class1 {f1:.4f}  "
              f"|diff| {abs(f0 - f1):.4f}")

    # impact drift along the attack's own queries, class-0-leaning nodes
    watched = table.class_leaning(0, 5)
    traj = trajectory(model, rec.trace, watched)
    start = float(np.mean(np.abs(traj.present_impacts[0])))
    end = float(np.mean(np.abs(traj.present_impacts[-1])))
    print(f"\ntrajectory over {len(rec.trace)} attack queries, watching "
          f"{len(watched)} class-0-leaning nodes:")
    print(f"  mean |impact| while present: {start:.4f} (clean) -> "
          f"{end:.4f} (adversarial)")

    OUT.mkdir(exist_ok=True)
    export_graph(g_clean, "svg", OUT / "clean.svg")
    export_graph(g_adv, "svg", OUT / "adversarial.svg")
    export_graph(d, "svg", OUT / "diff.svg", highlight=watched)
    print(f"\nwrote clean.svg, adversarial.svg, diff.svg under {OUT}")


if __name__ == "__main__":
    main()
