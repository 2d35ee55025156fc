"""Per-sample behavior graphs over a model's dense head.

A behavior graph snapshots one prediction: every dense-head neuron is a
node holding its activation and its impact, every connection is an edge
holding its weight and its contribution (source activation x weight).
The impact of a neuron is its output minus the sum of its weighted
inputs, so for an identity activation it equals the bias and for a dead
relu it measures how far the pre-activation fell below zero.

Graphs from the same head architecture can be diffed node by node and
edge by edge; participation (activation exactly nonzero) aggregates into
per-class frequency tables; impact trajectories follow chosen neurons
through an attack's query trace.

Node numbering is global and stable: input-layer neurons first, then
each dense layer in order (the default head gives 512 + 256 + 2 = 770).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

EDGE_CHANGE_TOLERANCE = 1e-9

GOLDEN_ANGLE = math.pi * (3.0 - math.sqrt(5.0))


@dataclass
class BehaviorGraph:
    """One prediction rendered as node/edge values.

    activations[0] is the feature vector entering the head; for l >= 1,
    activations[l], impacts[l] describe dense layer l-1's outputs and
    contributions[l-1] its (out, in) edge contribution matrix.
    """

    activations: list[np.ndarray]
    impacts: list[np.ndarray]
    contributions: list[np.ndarray]
    weights: list[np.ndarray]
    layer_kinds: list[str]            # "input", then each layer's activation
    probabilities: np.ndarray
    predicted: int
    model_id: str = ""
    sample_id: str = ""

    @property
    def layer_sizes(self):
        return [len(a) for a in self.activations]

    @property
    def node_count(self):
        return sum(self.layer_sizes)

    def layer_offsets(self):
        """Global node id of each layer's first neuron."""
        offs, total = [], 0
        for size in self.layer_sizes:
            offs.append(total)
            total += size
        return offs

    def global_impacts(self):
        return np.concatenate(self.impacts)

    def global_activations(self):
        return np.concatenate(self.activations)

    def node_location(self, global_id):
        """Global node id -> (layer, index within layer)."""
        if not 0 <= global_id < self.node_count:
            raise IndexError(f"node {global_id} out of range")
        for layer, (off, size) in enumerate(zip(self.layer_offsets(),
                                                self.layer_sizes)):
            if global_id < off + size:
                return layer, global_id - off
        raise AssertionError("unreachable")

    def same_structure(self, other) -> bool:
        return self.layer_sizes == other.layer_sizes


def build_graph(variant, image, sample_id="") -> BehaviorGraph:
    """Snapshot the variant's dense head on one image.

    Works for any variant exposing dense_trace(image) -> (probs, trace)
    and a .head whose layers produced that trace.  Impact of a neuron is
    its post-activation output minus the sum of its incoming
    contributions; input-layer nodes have no incoming edges, so their
    impact is their activation.
    """
    probs, trace = variant.dense_trace(image)
    layers = variant.head.layers

    activations = [trace.features]
    impacts = [trace.features.copy()]
    contributions = []
    weights = []
    kinds = ["input"]
    prev = trace.features
    for layer, pre, post in zip(layers, trace.pre, trace.post):
        contrib = layer.weights * prev[None, :]
        contributions.append(contrib)
        weights.append(layer.weights)
        activations.append(post)
        # output minus summed weighted inputs; written via the
        # pre-activation so an identity neuron's impact is its bias
        # bit for bit (the materialized edge sum agrees within 1e-9)
        impacts.append((post - pre) + layer.bias)
        kinds.append(layer.activation)
        prev = post

    model_id = ""
    fingerprint = getattr(variant, "fingerprint", None)
    if callable(fingerprint):
        model_id = fingerprint()
    return BehaviorGraph(activations, impacts, contributions, weights,
                         kinds, probabilities=probs,
                         predicted=int(np.argmax(probs)),
                         model_id=model_id, sample_id=sample_id)


# ---------------------------------------------------------------------------
# diffing

@dataclass
class GraphDiff:
    """Node and edge deltas between two same-architecture graphs (b - a)."""

    impact_delta: list[np.ndarray]
    contribution_delta: list[np.ndarray]
    modified_final_edges: int
    sample_id: str = ""
    model_id_a: str = ""
    model_id_b: str = ""

    @property
    def layer_sizes(self):
        return [len(d) for d in self.impact_delta]

    def mean_abs_impact_delta(self):
        """Per-layer mean |impact delta|, input layer first."""
        return [float(np.mean(np.abs(d))) for d in self.impact_delta]


def diff_graphs(g_a: BehaviorGraph, g_b: BehaviorGraph) -> GraphDiff:
    """Element-wise deltas b - a plus the modified final-edge count.

    An edge into the output layer counts as modified when its
    contribution moved by more than 1e-9 and is nonzero in at least one
    of the graphs.
    """
    if not g_a.same_structure(g_b):
        raise ValueError(
            f"graphs have different structure: {g_a.layer_sizes} "
            f"vs {g_b.layer_sizes}"
        )
    if g_a.sample_id != g_b.sample_id:
        raise ValueError(
            f"graphs describe different samples: {g_a.sample_id!r} "
            f"vs {g_b.sample_id!r}"
        )
    impact_delta = [b - a for a, b in zip(g_a.impacts, g_b.impacts)]
    contribution_delta = [b - a for a, b in
                          zip(g_a.contributions, g_b.contributions)]

    ca, cb = g_a.contributions[-1], g_b.contributions[-1]
    changed = np.abs(cb - ca) > EDGE_CHANGE_TOLERANCE
    nonzero = (ca != 0.0) | (cb != 0.0)
    modified = int(np.count_nonzero(changed & nonzero))
    return GraphDiff(impact_delta, contribution_delta, modified,
                     sample_id=g_a.sample_id,
                     model_id_a=g_a.model_id, model_id_b=g_b.model_id)


# ---------------------------------------------------------------------------
# participation and frequencies

def participation_mask(source):
    """Per-layer boolean arrays: activation exactly nonzero.

    source is a BehaviorGraph or an activation trace (anything with
    .features and .post)."""
    if isinstance(source, BehaviorGraph):
        acts = source.activations
    else:
        acts = [source.features] + list(source.post)
    return [a != 0.0 for a in acts]


def participation(source):
    """Set of participating (layer, neuron) pairs; layer 0 is the input."""
    return {
        (layer, int(i))
        for layer, mask in enumerate(participation_mask(source))
        for i in np.flatnonzero(mask)
    }


def participation_counts(source):
    """Participating-neuron count per layer, input layer first."""
    return [int(mask.sum()) for mask in participation_mask(source)]


@dataclass
class FrequencyTable:
    """Per-neuron participation frequency by class (two classes)."""

    frequency_class0: np.ndarray      # (node_count,)
    frequency_class1: np.ndarray
    count_class0: int
    count_class1: int
    layer_sizes: list[int] = field(default_factory=list)

    @property
    def difference(self):
        return np.abs(self.frequency_class0 - self.frequency_class1)

    def top_polarized(self, k=10):
        """Global node ids with the largest |f0 - f1|, ties by node id."""
        diff = self.difference
        order = np.lexsort((np.arange(len(diff)), -diff))
        return [int(i) for i in order[:k]]

    def class_leaning(self, cls, k=10):
        """Top-k node ids whose frequency favors the given class."""
        signed = self.frequency_class0 - self.frequency_class1
        if cls == 1:
            signed = -signed
        order = np.lexsort((np.arange(len(signed)), -signed))
        return [int(i) for i in order[:k]]

    def to_csv(self, path):
        with open(path, "w") as fh:
            fh.write("neuron,f0,f1,difference\n")
            diff = self.difference
            for i in range(len(self.frequency_class0)):
                fh.write(f"{i},{float(self.frequency_class0[i])!r},"
                         f"{float(self.frequency_class1[i])!r},"
                         f"{float(diff[i])!r}\n")


def frequency_table(variant, images, labels) -> FrequencyTable:
    """Class-conditional participation frequency of every head neuron."""
    labels = np.asarray(labels, dtype=np.int64)
    counts = [int(np.sum(labels == c)) for c in (0, 1)]
    if min(counts) == 0:
        raise ValueError(f"both classes must be present, got counts {counts}")

    sums = None
    layer_sizes = None
    for img, lab in zip(images, labels):
        _, trace = variant.dense_trace(img)
        mask = np.concatenate(participation_mask(trace))
        if sums is None:
            sums = np.zeros((2, len(mask)))
            layer_sizes = [len(trace.features)] + [len(p) for p in trace.post]
        sums[int(lab)] += mask
    return FrequencyTable(sums[0] / counts[0], sums[1] / counts[1],
                          counts[0], counts[1], layer_sizes)


def pearson_correlation(xs, ys) -> float:
    """Plain Pearson r; raises on length < 2, mismatch, or zero variance."""
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    if xs.shape != ys.shape or xs.ndim != 1:
        raise ValueError(f"inputs must be equal-length 1-d sequences, "
                         f"got {xs.shape} and {ys.shape}")
    if len(xs) < 2:
        raise ValueError("correlation needs at least two points")
    dx = xs - xs.mean()
    dy = ys - ys.mean()
    vx = float(np.dot(dx, dx))
    vy = float(np.dot(dy, dy))
    if vx == 0.0 or vy == 0.0:
        raise ValueError("correlation is undefined for zero-variance input")
    r = float(np.dot(dx, dy) / math.sqrt(vx * vy))
    return max(-1.0, min(1.0, r))


# ---------------------------------------------------------------------------
# trajectories

@dataclass
class Trajectory:
    """Impact of watched neurons at every step of a query trace."""

    step_indices: list[int]
    neuron_ids: list[int]
    impacts: np.ndarray               # (n_steps, n_neurons)
    activations: np.ndarray           # (n_steps, n_neurons)

    @property
    def diffs(self):
        """Impact minus its step-0 value, per neuron."""
        return self.impacts - self.impacts[0]

    @property
    def present_impacts(self):
        """Impact while the neuron participates in the graph, else zero.

        A node with zero activation has dropped out of the behavior
        graph, so following its raw impact would track a ghost."""
        return np.where(self.activations != 0.0, self.impacts, 0.0)


def trajectory(variant, trace, watched_neurons) -> Trajectory:
    """Follow the watched neurons' impacts through an attack trace.

    watched_neurons are global node ids; step indices mirror the trace.
    """
    if not trace.steps:
        raise ValueError("cannot compute a trajectory of an empty trace")
    watched = [int(n) for n in watched_neurons]
    rows = []
    acts = []
    for step in trace.steps:
        g = build_graph(variant, step.image)
        flat = g.global_impacts()
        if rows == [] and watched and max(watched) >= len(flat):
            raise ValueError(
                f"watched neuron {max(watched)} exceeds node count {len(flat)}"
            )
        rows.append(flat[watched])
        acts.append(g.global_activations()[watched])
    return Trajectory([s.index for s in trace.steps], watched,
                      np.array(rows), np.array(acts))


# ---------------------------------------------------------------------------
# layout, colors and export

def impact_color(value, lo, hi):
    """Red -> green -> blue over [lo, hi]; degenerate range maps to green."""
    if hi <= lo:
        t = 0.5
    else:
        t = (value - lo) / (hi - lo)
    if t <= 0.5:
        r, g, b = 1.0 - 2.0 * t, 2.0 * t, 0.0
    else:
        r, g, b = 0.0, 2.0 - 2.0 * t, 2.0 * t - 1.0
    return "#{:02x}{:02x}{:02x}".format(
        round(255 * r), round(255 * g), round(255 * b))


def layout_positions(layer_sizes):
    """Deterministic node positions, one array (size, 2) per layer.

    Input layer: a sunflower-packed disc at the center.  Middle layers:
    concentric rings around it.  Final layer: a short column at the right.
    """
    positions = []
    n_layers = len(layer_sizes)
    disc_radius = 1.0
    ring_gap = 0.6

    n0 = layer_sizes[0]
    pts = np.zeros((n0, 2))
    for k in range(n0):
        r = disc_radius * math.sqrt((k + 0.5) / n0)
        a = k * GOLDEN_ANGLE
        pts[k] = (r * math.cos(a), r * math.sin(a))
    positions.append(pts)

    ring_radius = disc_radius
    for layer in range(1, n_layers - 1):
        size = layer_sizes[layer]
        ring_radius += ring_gap
        pts = np.zeros((size, 2))
        for k in range(size):
            a = 2.0 * math.pi * k / size
            pts[k] = (ring_radius * math.cos(a), ring_radius * math.sin(a))
        positions.append(pts)

    size = layer_sizes[-1]
    x = ring_radius + 2.0 * ring_gap
    ys = np.linspace(-0.5 * (size - 1), 0.5 * (size - 1), size) * ring_gap
    positions.append(np.column_stack([np.full(size, x), ys]))
    return positions


def _graph_to_dict(graph: BehaviorGraph):
    offsets = graph.layer_offsets()
    nodes = []
    for layer, (acts, imps) in enumerate(zip(graph.activations,
                                             graph.impacts)):
        for i in range(len(acts)):
            nodes.append({
                "id": offsets[layer] + i,
                "layer": layer,
                "index": i,
                "activation": float(acts[i]),
                "impact": float(imps[i]),
            })
    edges = []
    for l, contrib in enumerate(graph.contributions):
        w = graph.weights[l]
        src_off, dst_off = offsets[l], offsets[l + 1]
        out_dim, in_dim = contrib.shape
        for j in range(out_dim):
            for i in range(in_dim):
                edges.append({
                    "source": src_off + i,
                    "target": dst_off + j,
                    "weight": float(w[j, i]),
                    "contribution": float(contrib[j, i]),
                })
    return {
        "nodes": nodes,
        "edges": edges,
        "metadata": {
            "layer_sizes": graph.layer_sizes,
            "layer_kinds": graph.layer_kinds,
            "predicted": graph.predicted,
            "probabilities": [float(p) for p in graph.probabilities],
            "model_id": graph.model_id,
            "sample_id": graph.sample_id,
        },
    }


def graph_to_json(graph: BehaviorGraph) -> str:
    return json.dumps(_graph_to_dict(graph), indent=1)


def graph_from_json(text_or_path) -> BehaviorGraph:
    """Rebuild a graph from its JSON export (values are exact)."""
    if isinstance(text_or_path, Path) or not str(text_or_path).lstrip().startswith("{"):
        doc = json.loads(Path(text_or_path).read_text())
    else:
        doc = json.loads(text_or_path)
    meta = doc["metadata"]
    sizes = meta["layer_sizes"]
    activations = [np.zeros(s) for s in sizes]
    impacts = [np.zeros(s) for s in sizes]
    for node in doc["nodes"]:
        activations[node["layer"]][node["index"]] = node["activation"]
        impacts[node["layer"]][node["index"]] = node["impact"]
    offsets, total = [], 0
    for s in sizes:
        offsets.append(total)
        total += s
    contributions = [np.zeros((sizes[l + 1], sizes[l]))
                     for l in range(len(sizes) - 1)]
    weights = [np.zeros_like(c) for c in contributions]
    bounds = offsets[1:] + [total]
    for edge in doc["edges"]:
        src, dst = edge["source"], edge["target"]
        layer = next(l for l in range(len(sizes) - 1)
                     if offsets[l] <= src < bounds[l])
        contributions[layer][dst - offsets[layer + 1],
                             src - offsets[layer]] = edge["contribution"]
        weights[layer][dst - offsets[layer + 1],
                       src - offsets[layer]] = edge["weight"]
    return BehaviorGraph(activations, impacts, contributions, weights,
                         meta["layer_kinds"],
                         probabilities=np.array(meta["probabilities"]),
                         predicted=meta["predicted"],
                         model_id=meta["model_id"],
                         sample_id=meta["sample_id"])


def graph_to_dot(graph: BehaviorGraph) -> str:
    offsets = graph.layer_offsets()
    lo = float(min(i.min() for i in graph.impacts))
    hi = float(max(i.max() for i in graph.impacts))
    lines = ["digraph behavior {"]
    for layer, (acts, imps) in enumerate(zip(graph.activations,
                                             graph.impacts)):
        for i in range(len(acts)):
            gid = offsets[layer] + i
            color = impact_color(imps[i], lo, hi)
            lines.append(
                f'  n{gid} [layer="{layer}" activation="{float(acts[i])!r}" '
                f'impact="{float(imps[i])!r}" color="{color}"];'
            )
    for l, contrib in enumerate(graph.contributions):
        w = graph.weights[l]
        src_off, dst_off = offsets[l], offsets[l + 1]
        out_dim, in_dim = contrib.shape
        for j in range(out_dim):
            for i in range(in_dim):
                lines.append(
                    f'  n{src_off + i} -> n{dst_off + j} '
                    f'[weight="{float(w[j, i])!r}" '
                    f'contribution="{float(contrib[j, i])!r}"];'
                )
    lines.append("}")
    return "\n".join(lines) + "\n"


def _svg_for(layer_sizes, node_values, edge_values, edge_weights=None,
             highlight=(), title=""):
    """Shared SVG body for graphs (impacts) and diffs (impact deltas)."""
    positions = layout_positions(layer_sizes)
    allpos = np.concatenate(positions)
    span = float(np.abs(allpos).max()) + 0.5
    scale = 300.0 / span
    width = 720
    height = 640

    def sx(p):
        return round(320.0 + scale * p[0], 2)

    def sy(p):
        return round(320.0 - scale * p[1], 2)

    flat = np.concatenate(node_values)
    lo, hi = float(flat.min()), float(flat.max())
    offsets, total = [], 0
    for s in layer_sizes:
        offsets.append(total)
        total += s
    highlight = set(int(h) for h in highlight)

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" '
        f'height="{height}" viewBox="0 0 {width} {height}">',
        f'<title>{title}</title>',
        '<rect width="100%" height="100%" fill="white"/>',
    ]
    for l, contrib in enumerate(edge_values):
        src_pts, dst_pts = positions[l], positions[l + 1]
        out_dim, in_dim = contrib.shape
        for j in range(out_dim):
            for i in range(in_dim):
                if contrib[j, i] == 0.0:
                    continue  # dead edges only clutter the drawing
                parts.append(
                    f'<line x1="{sx(src_pts[i])}" y1="{sy(src_pts[i])}" '
                    f'x2="{sx(dst_pts[j])}" y2="{sy(dst_pts[j])}" '
                    f'stroke="#cccccc" stroke-width="0.3"/>'
                )
    for layer, pts in enumerate(positions):
        vals = node_values[layer]
        for i in range(len(pts)):
            gid = offsets[layer] + i
            r = 7.0 if gid in highlight else 3.0
            parts.append(
                f'<circle cx="{sx(pts[i])}" cy="{sy(pts[i])}" r="{r}" '
                f'fill="{impact_color(float(vals[i]), lo, hi)}" '
                f'stroke="#333333" stroke-width="0.4"/>'
            )
            if gid in highlight:
                parts.append(
                    f'<text x="{sx(pts[i]) + 8}" y="{sy(pts[i]) - 8}" '
                    f'font-size="12" font-family="sans-serif">{gid}</text>'
                )
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def graph_to_svg(graph: BehaviorGraph, highlight=()) -> str:
    title = f"behavior graph {graph.sample_id}".strip()
    return _svg_for(graph.layer_sizes, graph.impacts, graph.contributions,
                    highlight=highlight, title=title)


def diff_to_svg(diff: GraphDiff, highlight=()) -> str:
    title = f"behavior diff {diff.sample_id}".strip()
    return _svg_for(diff.layer_sizes, diff.impact_delta,
                    diff.contribution_delta, highlight=highlight,
                    title=title)


def export_graph(graph, fmt, path, highlight=()):
    """Write a graph (or, for svg, also a diff) to dot, json or svg."""
    path = Path(path)
    if fmt == "json":
        text = graph_to_json(graph)
    elif fmt == "dot":
        text = graph_to_dot(graph)
    elif fmt == "svg":
        if isinstance(graph, GraphDiff):
            text = diff_to_svg(graph, highlight=highlight)
        else:
            text = graph_to_svg(graph, highlight=highlight)
    else:
        raise ValueError(f"unknown export format {fmt!r}")
    path.write_text(text)
    return path
