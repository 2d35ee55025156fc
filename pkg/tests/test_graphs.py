"""Graph oracles: hand-computed impacts, diffs, frequencies, exports."""

import math

import numpy as np
import pytest

from advlab import graphs
from advlab.attacks import QueryStep, QueryTrace
from advlab.nn import DenseHead, DenseLayer


class HeadOnly:
    """Minimal variant: the 'image' is already the feature vector."""

    def __init__(self, head):
        self.head = head

    def dense_trace(self, features):
        return self.head.forward(np.asarray(features, dtype=np.float64))


def toy_head():
    w1 = np.array([[1.0, -1.0], [0.5, 0.25]])
    b1 = np.array([0.1, -0.2])
    w2 = np.array([[1.0, 2.0], [-1.0, 0.5]])
    b2 = np.array([0.0, 0.3])
    return DenseHead([DenseLayer(w1, b1, "relu"),
                      DenseLayer(w2, b2, "softmax")])


def test_toy_graph_hand_computed():
    """Every number in a 2-2-2 graph checked against explicit arithmetic."""
    variant = HeadOnly(toy_head())
    f = np.array([0.6, 0.2])
    g = graphs.build_graph(variant, f, sample_id="toy")

    assert g.layer_sizes == [2, 2, 2]
    assert g.node_count == 6
    assert np.array_equal(g.activations[0], f)
    assert np.array_equal(g.impacts[0], f)

    pre1 = np.array([0.6 - 0.2 + 0.1, 0.3 + 0.05 - 0.2])
    assert np.allclose(g.activations[1], pre1, atol=1e-15)  # both relus live
    assert np.array_equal(g.contributions[0],
                          np.array([[0.6, -0.2], [0.3, 0.05]]))
    # active relu: impact collapses to the bias, exactly
    assert np.array_equal(g.impacts[1], np.array([0.1, -0.2]))

    pre2 = np.array([pre1[0] + 2 * pre1[1] + 0.0,
                     -pre1[0] + 0.5 * pre1[1] + 0.3])
    e = np.exp(pre2 - pre2.max())
    probs = e / e.sum()
    assert np.allclose(g.probabilities, probs, atol=1e-15)
    assert np.array_equal(
        g.contributions[1],
        np.array([[pre1[0], 2 * pre1[1]], [-pre1[0], 0.5 * pre1[1]]]))
    assert np.allclose(g.impacts[2], (probs - pre2) + np.array([0.0, 0.3]),
                       atol=1e-15)
    assert g.predicted == int(np.argmax(probs))


def test_impact_equals_activation_minus_contributions():
    rng = np.random.default_rng(0)
    for trial in range(50):
        head = DenseHead([
            DenseLayer(rng.normal(size=(6, 4)), rng.normal(size=6), "relu"),
            DenseLayer(rng.normal(size=(3, 6)), rng.normal(size=3), "softmax"),
        ])
        g = graphs.build_graph(HeadOnly(head), rng.normal(size=4))
        for layer in range(1, len(g.layer_sizes)):
            resid = g.activations[layer] - g.contributions[layer - 1].sum(axis=1)
            assert np.max(np.abs(g.impacts[layer] - resid)) < 1e-9


def test_identity_layer_impact_is_bias_exactly():
    rng = np.random.default_rng(1)
    head = DenseHead([
        DenseLayer(rng.normal(size=(5, 3)), rng.normal(size=5), "identity"),
        DenseLayer(rng.normal(size=(2, 5)), rng.normal(size=2), "softmax"),
    ])
    g = graphs.build_graph(HeadOnly(head), rng.normal(size=3))
    assert np.array_equal(g.impacts[1], head.layers[0].bias)


def test_dead_relu_impact_carries_residual():
    # one hidden neuron driven hard negative: impact = bias - pre
    head = DenseHead([DenseLayer(np.array([[1.0], [-1.0]]),
                                 np.array([0.5, 0.5]), "relu"),
                      DenseLayer(np.ones((2, 2)), np.zeros(2), "softmax")])
    g = graphs.build_graph(HeadOnly(head), np.array([2.0]))
    # neuron 0: pre 2.5, active, impact = bias; neuron 1: pre -1.5, dead
    assert g.impacts[1][0] == 0.5
    assert g.impacts[1][1] == 0.5 - (-1.5)
    assert g.activations[1][1] == 0.0


def test_participation_is_exact_nonzero():
    head = DenseHead([DenseLayer(np.array([[1.0], [-1.0]]),
                                 np.zeros(2), "relu"),
                      DenseLayer(np.ones((2, 2)), np.zeros(2), "softmax")])
    g = graphs.build_graph(HeadOnly(head), np.array([3.0]))
    part = graphs.participation(g)
    assert (0, 0) in part            # input feature 3.0
    assert (1, 0) in part            # live relu
    assert (1, 1) not in part        # dead relu outputs exactly 0
    assert (2, 0) in part and (2, 1) in part

    g0 = graphs.build_graph(HeadOnly(head), np.array([0.0]))
    assert (0, 0) not in graphs.participation(g0)


def test_global_ids_round_trip():
    g = graphs.build_graph(HeadOnly(toy_head()), np.array([0.6, 0.2]))
    offs = g.layer_offsets()
    assert offs == [0, 2, 4]
    for gid in range(g.node_count):
        layer, idx = g.node_location(gid)
        assert offs[layer] + idx == gid
    flat = g.global_impacts()
    assert flat.shape == (6,)
    assert np.array_equal(flat[:2], g.impacts[0])


# ---------------------------------------------------------------------------
# diffs

def _toy_pair():
    variant = HeadOnly(toy_head())
    a = graphs.build_graph(variant, np.array([0.6, 0.2]), sample_id="s")
    b = graphs.build_graph(variant, np.array([0.5, 0.1]), sample_id="s")
    return a, b


def test_diff_self_is_zero():
    a, _ = _toy_pair()
    d = graphs.diff_graphs(a, a)
    assert all(np.all(x == 0.0) for x in d.impact_delta)
    assert all(np.all(x == 0.0) for x in d.contribution_delta)
    assert d.modified_final_edges == 0


def test_diff_antisymmetry():
    a, b = _toy_pair()
    ab = graphs.diff_graphs(a, b)
    ba = graphs.diff_graphs(b, a)
    for x, y in zip(ab.impact_delta, ba.impact_delta):
        assert np.array_equal(x, -y)
    for x, y in zip(ab.contribution_delta, ba.contribution_delta):
        assert np.array_equal(x, -y)
    assert ab.modified_final_edges == ba.modified_final_edges


def test_diff_rejects_mismatches():
    a, b = _toy_pair()
    other = graphs.build_graph(HeadOnly(DenseHead([
        DenseLayer(np.ones((3, 2)), np.zeros(3), "relu"),
        DenseLayer(np.ones((2, 3)), np.zeros(2), "softmax")])),
        np.array([0.6, 0.2]), sample_id="s")
    with pytest.raises(ValueError):
        graphs.diff_graphs(a, other)
    c = graphs.build_graph(HeadOnly(toy_head()), np.array([0.6, 0.2]),
                           sample_id="different")
    with pytest.raises(ValueError):
        graphs.diff_graphs(a, c)
    assert graphs.diff_graphs(a, b).modified_final_edges > 0


def test_modified_final_edges_counts_changed_nonzero():
    # only hidden neuron 0 changes: exactly its two outgoing edges move
    head = DenseHead([DenseLayer(np.array([[1.0, 0.0], [0.0, 1.0]]),
                                 np.zeros(2), "relu"),
                      DenseLayer(np.array([[1.0, 2.0], [3.0, 4.0]]),
                                 np.zeros(2), "softmax")])
    variant = HeadOnly(head)
    a = graphs.build_graph(variant, np.array([1.0, 1.0]), sample_id="s")
    b = graphs.build_graph(variant, np.array([2.0, 1.0]), sample_id="s")
    assert graphs.diff_graphs(a, b).modified_final_edges == 2


# ---------------------------------------------------------------------------
# frequencies and correlation

def test_frequency_table_matches_bruteforce():
    rng = np.random.default_rng(2)
    head = DenseHead([
        DenseLayer(rng.normal(size=(4, 3)), rng.normal(size=4), "relu"),
        DenseLayer(rng.normal(size=(2, 4)), rng.normal(size=2), "softmax"),
    ])
    variant = HeadOnly(head)
    images = rng.normal(size=(20, 3))
    labels = np.array([i % 2 for i in range(20)])
    table = graphs.frequency_table(variant, images, labels)

    n_nodes = 3 + 4 + 2
    counts = {0: np.zeros(n_nodes), 1: np.zeros(n_nodes)}
    totals = {0: 0, 1: 0}
    for img, lab in zip(images, labels):
        g = graphs.build_graph(variant, img)
        acts = g.global_activations()
        counts[int(lab)] += (acts != 0.0)
        totals[int(lab)] += 1
    assert np.array_equal(table.frequency_class0, counts[0] / totals[0])
    assert np.array_equal(table.frequency_class1, counts[1] / totals[1])
    assert table.count_class0 == totals[0]
    assert table.count_class1 == totals[1]
    assert np.array_equal(table.difference,
                          np.abs(table.frequency_class0
                                 - table.frequency_class1))


def test_frequency_requires_both_classes():
    variant = HeadOnly(toy_head())
    imgs = np.ones((4, 2))
    with pytest.raises(ValueError):
        graphs.frequency_table(variant, imgs, np.zeros(4, dtype=int))


def test_top_polarized_orders_and_breaks_ties_by_id():
    table = graphs.FrequencyTable(
        frequency_class0=np.array([1.0, 0.2, 0.9, 0.5]),
        frequency_class1=np.array([0.0, 0.2, 0.1, 0.0]),
        count_class0=10, count_class1=10, layer_sizes=[2, 2])
    # differences: 1.0, 0.0, 0.8, 0.5
    assert table.top_polarized(3) == [0, 2, 3]
    tie = graphs.FrequencyTable(
        frequency_class0=np.array([0.6, 0.6]),
        frequency_class1=np.array([0.1, 0.1]),
        count_class0=4, count_class1=4, layer_sizes=[2])
    assert tie.top_polarized(2) == [0, 1]


def test_class_leaning_direction():
    table = graphs.FrequencyTable(
        frequency_class0=np.array([0.9, 0.1, 0.5]),
        frequency_class1=np.array([0.1, 0.9, 0.5]),
        count_class0=5, count_class1=5, layer_sizes=[3])
    assert table.class_leaning(0, 1) == [0]
    assert table.class_leaning(1, 1) == [1]


def test_frequency_csv_round_trip(tmp_path):
    table = graphs.FrequencyTable(
        frequency_class0=np.array([0.7279, 0.25]),
        frequency_class1=np.array([0.1958, 0.25]),
        count_class0=8, count_class1=8, layer_sizes=[2])
    path = tmp_path / "freq.csv"
    table.to_csv(path)
    lines = path.read_text().strip().splitlines()
    assert lines[0] == "neuron,f0,f1,difference"
    cells = lines[1].split(",")
    assert float(cells[1]) == 0.7279
    assert float(cells[3]) == abs(0.7279 - 0.1958)


def test_pearson_closed_form():
    # r((1,2,3),(1,2,4)) = 3 / sqrt(2 * 14/3) = sqrt(27/28)
    r = graphs.pearson_correlation([1.0, 2.0, 3.0], [1.0, 2.0, 4.0])
    assert abs(r - math.sqrt(27.0 / 28.0)) < 1e-12
    assert graphs.pearson_correlation([1, 2, 3], [2, 4, 6]) == 1.0
    assert graphs.pearson_correlation([1, 2, 3], [-2, -4, -6]) == -1.0


def test_pearson_rejects_degenerate_inputs():
    with pytest.raises(ValueError):
        graphs.pearson_correlation([1.0], [2.0])
    with pytest.raises(ValueError):
        graphs.pearson_correlation([1.0, 2.0], [1.0])
    with pytest.raises(ValueError):
        graphs.pearson_correlation([1.0, 1.0], [1.0, 2.0])


# ---------------------------------------------------------------------------
# trajectories

def _trace(points):
    steps = [QueryStep(i, np.asarray(p, dtype=np.float64),
                       np.array([0.5, 0.5]), 0)
             for i, p in enumerate(points)]
    return QueryTrace(steps)


def test_trajectory_follows_watched_neurons():
    variant = HeadOnly(toy_head())
    trace = _trace([[0.6, 0.2], [0.5, 0.1], [0.4, 0.0]])
    traj = graphs.trajectory(variant, trace, [0, 1, 2])
    assert traj.impacts.shape == (3, 3)
    assert traj.step_indices == [0, 1, 2]
    # input-node impact is the feature itself
    assert np.array_equal(traj.impacts[:, 0], [0.6, 0.5, 0.4])
    assert np.array_equal(traj.diffs[0], np.zeros(3))


def test_trajectory_present_impacts_mask_dead_nodes():
    head = DenseHead([DenseLayer(np.array([[1.0], [-1.0]]),
                                 np.zeros(2), "relu"),
                      DenseLayer(np.ones((2, 2)), np.zeros(2), "softmax")])
    variant = HeadOnly(head)
    traj = graphs.trajectory(variant, _trace([[1.0], [-1.0]]), [1, 2])
    # step 0: node 1 live, node 2 dead; step 1: roles swap
    assert traj.present_impacts[0, 1] == 0.0
    assert traj.present_impacts[1, 0] == 0.0
    assert traj.activations.shape == (2, 2)


def test_trajectory_validates_inputs():
    variant = HeadOnly(toy_head())
    with pytest.raises(ValueError):
        graphs.trajectory(variant, QueryTrace([]), [0])
    with pytest.raises(ValueError):
        graphs.trajectory(variant, _trace([[0.6, 0.2]]), [99])


# ---------------------------------------------------------------------------
# export formats

def test_graph_json_round_trip(tmp_path):
    g = graphs.build_graph(HeadOnly(toy_head()), np.array([0.6, 0.2]),
                           sample_id="rt")
    text = graphs.graph_to_json(g)
    back = graphs.graph_from_json(text)
    assert back.sample_id == "rt"
    assert back.layer_sizes == g.layer_sizes
    assert back.layer_kinds == g.layer_kinds
    for a, b in zip(g.impacts, back.impacts):
        assert np.array_equal(a, b)
    for a, b in zip(g.contributions, back.contributions):
        assert np.array_equal(a, b)
    assert np.array_equal(g.probabilities, back.probabilities)

    path = tmp_path / "g.json"
    path.write_text(text)
    assert graphs.graph_from_json(path).predicted == g.predicted


def test_dot_export_shape():
    g = graphs.build_graph(HeadOnly(toy_head()), np.array([0.6, 0.2]))
    dot = graphs.graph_to_dot(g)
    assert dot.startswith("digraph")
    assert dot.count("->") == 8  # 2*2 + 2*2 edges
    assert "np.float64" not in dot


def test_svg_export_and_highlight():
    g = graphs.build_graph(HeadOnly(toy_head()), np.array([0.6, 0.2]),
                           sample_id="svg")
    plain = graphs.graph_to_svg(g)
    assert plain.lstrip().startswith("<svg")
    marked = graphs.graph_to_svg(g, highlight=[2])
    assert len(marked) > len(plain)
    d = graphs.diff_graphs(g, g)
    assert graphs.diff_to_svg(d).lstrip().startswith("<svg")


def test_export_graph_dispatch(tmp_path):
    g = graphs.build_graph(HeadOnly(toy_head()), np.array([0.6, 0.2]))
    for fmt in ("json", "dot", "svg"):
        p = graphs.export_graph(g, fmt, tmp_path / f"g.{fmt}")
        assert p.exists() and p.stat().st_size > 0
    with pytest.raises(ValueError):
        graphs.export_graph(g, "png", tmp_path / "g.png")


def test_impact_color_endpoints():
    assert graphs.impact_color(0.0, 0.0, 1.0) == "#ff0000"
    assert graphs.impact_color(1.0, 0.0, 1.0) == "#0000ff"
    assert graphs.impact_color(0.5, 0.0, 1.0) == "#00ff00"
    assert graphs.impact_color(3.0, 3.0, 3.0) == "#00ff00"


def test_layout_positions_cover_all_nodes():
    pos = graphs.layout_positions([3, 4, 2])
    assert [len(p) for p in pos] == [3, 4, 2]
    # output column sits strictly to the right of the rings
    assert pos[2][:, 0].min() > max(pos[0][:, 0].max(), pos[1][:, 0].max())
    # middle layer forms a ring outside the input disc
    radii = np.linalg.norm(pos[1], axis=1)
    assert np.allclose(radii, radii[0])
    assert radii[0] > np.linalg.norm(pos[0], axis=1).max()
