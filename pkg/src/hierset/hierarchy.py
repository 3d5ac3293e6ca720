"""Per-sample feature ordering, shared-prefix sets, and explanation graphs.

Each class's assigned features are ordered by activation (or by a fixed
train-average order), and classes are compared to the predicted class by the
depth of their shared feature prefix.  Predicting at depth d returns every
class whose first d ordered features match the predicted class's, which
nests monotonically from coarse to singleton.

Explanation graphs merge the activated-feature chains of the classes into a
trie rooted at a virtual node; class nodes attach where their chain ends.
Graphs export deterministically as DOT or JSON.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .exceptions import ValidationError
from .transform import predict_logits
from .validation import as_float_matrix, as_labels, require

__all__ = [
    "ClassOrder",
    "FeatureNode",
    "ClassNode",
    "ExplanationGraph",
    "order_class_features",
    "static_order_from_train",
    "class_feature_sets",
    "indicator",
    "fixed_level_set",
    "build_explanation_graph",
    "graph_to_dot",
    "graph_to_json",
    "graph_from_json",
    "export_graph",
]

_STRATEGIES = ("dynamic", "static")
_MODES = ("restricted", "full")


@dataclass
class ClassOrder:
    """Per-class feature order: row c lists class c's assigned features
    (as indices into the selected feature space) from most to least salient."""

    per_class: np.ndarray
    strategy: str

    def __post_init__(self):
        self.per_class = np.asarray(self.per_class, dtype=np.int64)
        require(self.per_class.ndim == 2, "per_class must be C x n")
        require(self.strategy in _STRATEGIES, f"unknown strategy {self.strategy!r}")

    @property
    def n_classes(self):
        return self.per_class.shape[0]

    @property
    def depth(self):
        return self.per_class.shape[1]


@dataclass(frozen=True)
class FeatureNode:
    """One trie node: a feature reached through a specific chain prefix."""

    node_id: str
    feature: int
    activation: float
    radius: float
    parent: str


@dataclass(frozen=True)
class ClassNode:
    class_index: int
    attach_id: str
    depth: int


@dataclass
class ExplanationGraph:
    feature_nodes: tuple
    class_nodes: tuple
    predicted: frozenset
    mode: str

    def __post_init__(self):
        require(self.mode in _MODES, f"unknown graph mode {self.mode!r}")
        self.feature_nodes = tuple(self.feature_nodes)
        self.class_nodes = tuple(self.class_nodes)
        self.predicted = frozenset(int(c) for c in self.predicted)

    def edges(self):
        """(parent, child) pairs: trie edges then class attachments."""
        out = [(fn.parent, fn.node_id) for fn in self.feature_nodes]
        out.extend(
            (cn.attach_id, f"class{cn.class_index}") for cn in self.class_nodes
        )
        return out


def class_feature_sets(head):
    """Row c: class c's assigned feature indices, ascending, in the selected
    feature space."""
    c, k = head.assignment.shape
    out = np.empty((c, head.n_per_class), dtype=np.int64)
    for i in range(c):
        out[i] = np.flatnonzero(head.assignment[i])
    return out


def order_class_features(f_star, head, strategy="dynamic", static_order=None):
    """Order each class's assigned features for one sample.

    dynamic: descending activation, ties by ascending feature index.
    static: the provided fixed order is returned verbatim.
    """
    require(strategy in _STRATEGIES, f"unknown strategy {strategy!r}")
    feats = class_feature_sets(head)
    if strategy == "static":
        if static_order is None:
            raise ValidationError("static strategy requires static_order")
        order = (
            static_order.per_class
            if isinstance(static_order, ClassOrder)
            else np.asarray(static_order, dtype=np.int64)
        )
        require(order.shape == feats.shape, "static_order has the wrong shape")
        for c in range(feats.shape[0]):
            if sorted(order[c]) != sorted(feats[c]):
                raise ValidationError(
                    f"static_order row {c} is not a permutation of class "
                    f"{c}'s assigned features"
                )
        return ClassOrder(per_class=order.copy(), strategy="static")
    arr = np.asarray(f_star, dtype=np.float64)
    require(
        arr.shape == (head.k_features,),
        f"f_star must have length {head.k_features}",
    )
    acts = arr[feats]
    idx = np.argsort(-acts, axis=1, kind="stable")
    return ClassOrder(
        per_class=np.take_along_axis(feats, idx, axis=1), strategy="dynamic"
    )


def static_order_from_train(train_f_star, labels, head):
    """Fixed per-class order: ascending mean rank over the class's train
    samples (rank = position in that sample's dynamic order), ties by index."""
    values = (
        train_f_star.values
        if hasattr(train_f_star, "values")
        else as_float_matrix(train_f_star, "train_f_star")
    )
    c_count = head.n_classes
    labels = as_labels(labels, c_count)
    require(labels.shape[0] == values.shape[0], "labels must align with samples")
    feats = class_feature_sets(head)
    n = head.n_per_class
    out = np.empty_like(feats)
    for c in range(c_count):
        mask = labels == c
        if not mask.any():
            raise ValidationError(f"class {c} has no training samples")
        acts = values[np.ix_(np.flatnonzero(mask), feats[c])]
        order_idx = np.argsort(-acts, axis=1, kind="stable")
        ranks = np.empty_like(order_idx)
        rows = np.arange(acts.shape[0])[:, None]
        ranks[rows, order_idx] = np.arange(n)[None, :]
        mean_rank = ranks.mean(axis=0)
        by = np.lexsort((feats[c], mean_rank))
        out[c] = feats[c][by]
    return ClassOrder(per_class=out, strategy="static")


def indicator(order, c, c_hat, depth):
    """1 iff class c's first ``depth`` ordered features all equal the
    predicted class's."""
    require(1 <= depth <= order.depth, f"depth must be in [1, {order.depth}]")
    a = order.per_class[c, :depth]
    b = order.per_class[c_hat, :depth]
    return int(np.array_equal(a, b))


def fixed_level_set(f_star, head, order, depth):
    """Y^depth: all classes sharing the top-``depth`` prefix with the argmax
    class.  Always contains the argmax class; at full depth it is exactly
    {c_hat} because rows are distinct."""
    _, c_hat = predict_logits(np.asarray(f_star, dtype=np.float64), head)
    prefix = order.per_class[:, :depth]
    match = np.all(prefix == prefix[c_hat][None, :], axis=1)
    return set(int(c) for c in np.flatnonzero(match))


def build_explanation_graph(f_star, head, order, predicted_set=(), mode="full"):
    """Merge activated-feature chains into a trie and attach class nodes.

    Each class contributes the prefix of its ordered features with strictly
    positive activation; chains sharing a prefix share nodes.  In restricted
    mode only classes whose top ordered feature equals the predicted class's
    are included.  Node radii are activations as a fraction of the sample
    maximum.  Feature ids in the result are raw feature indices.
    """
    require(mode in _MODES, f"unknown graph mode {mode!r}")
    arr = np.asarray(f_star, dtype=np.float64)
    _, c_hat = predict_logits(arr, head)
    raw_ids = head.selected_indices
    max_act = float(arr.max()) if arr.size else 0.0

    classes = range(order.n_classes)
    if mode == "restricted":
        top = order.per_class[:, 0]
        classes = [c for c in classes if top[c] == top[c_hat]]

    nodes = {}
    class_nodes = []
    for c in classes:
        path = ()
        for local in order.per_class[c]:
            local = int(local)
            if arr[local] <= 0.0:
                break
            path = path + (local,)
            if path not in nodes:
                parent = (
                    "root"
                    if len(path) == 1
                    else _node_id(path[:-1], raw_ids)
                )
                nodes[path] = FeatureNode(
                    node_id=_node_id(path, raw_ids),
                    feature=int(raw_ids[local]),
                    activation=float(arr[local]),
                    radius=float(arr[local]) / max_act,
                    parent=parent,
                )
        class_nodes.append(
            ClassNode(
                class_index=int(c),
                attach_id="root" if not path else _node_id(path, raw_ids),
                depth=len(path),
            )
        )

    feature_nodes = tuple(nodes[p] for p in sorted(nodes))
    class_nodes.sort(key=lambda cn: cn.class_index)
    included = {cn.class_index for cn in class_nodes}
    predicted = frozenset(int(c) for c in predicted_set) & included
    return ExplanationGraph(
        feature_nodes=feature_nodes,
        class_nodes=tuple(class_nodes),
        predicted=predicted,
        mode=mode,
    )


def _node_id(path, raw_ids):
    return "n" + "-".join(str(int(raw_ids[p])) for p in path)


def graph_to_json(graph):
    payload = {
        "mode": graph.mode,
        "predicted": sorted(graph.predicted),
        "feature_nodes": [
            {
                "id": fn.node_id,
                "feature": fn.feature,
                "activation": fn.activation,
                "radius": fn.radius,
                "parent": fn.parent,
            }
            for fn in graph.feature_nodes
        ],
        "class_nodes": [
            {
                "class_index": cn.class_index,
                "attach_id": cn.attach_id,
                "depth": cn.depth,
            }
            for cn in graph.class_nodes
        ],
        "edges": [list(e) for e in graph.edges()],
    }
    return json.dumps(payload, indent=2, sort_keys=True) + "\n"


def graph_from_json(text):
    payload = json.loads(text)
    feature_nodes = tuple(
        FeatureNode(
            node_id=d["id"],
            feature=int(d["feature"]),
            activation=float(d["activation"]),
            radius=float(d["radius"]),
            parent=d["parent"],
        )
        for d in payload["feature_nodes"]
    )
    class_nodes = tuple(
        ClassNode(
            class_index=int(d["class_index"]),
            attach_id=d["attach_id"],
            depth=int(d["depth"]),
        )
        for d in payload["class_nodes"]
    )
    return ExplanationGraph(
        feature_nodes=feature_nodes,
        class_nodes=class_nodes,
        predicted=frozenset(payload["predicted"]),
        mode=payload["mode"],
    )


def graph_to_dot(graph):
    """Deterministic DOT text.  Feature nodes are circles sized by radius;
    classes attached to the same node collapse into one label ("class a" or
    "class a, + x"); predicted classes render bold with green edges."""
    lines = [
        "digraph explanation {",
        "  rankdir=TB;",
        '  root [shape=point, label=""];',
    ]
    for fn in graph.feature_nodes:
        width = 0.3 + 0.9 * fn.radius
        lines.append(
            f'  "{fn.node_id}" [shape=circle, label="f{fn.feature}\\n'
            f'{fn.activation:.3g}", width={width:.3f}, fixedsize=true];'
        )
    groups = {}
    for cn in graph.class_nodes:
        flag = cn.class_index in graph.predicted
        groups.setdefault((cn.attach_id, flag), []).append(cn.class_index)
    for (attach, flag), members in sorted(
        groups.items(), key=lambda kv: (kv[0][0], kv[0][1])
    ):
        members.sort()
        gid = f"class{members[0]}"
        label = f"class {members[0]}"
        if len(members) > 1:
            label += f", + {len(members) - 1}"
        style = ", style=bold, color=green" if flag else ""
        lines.append(f'  "{gid}" [shape=box, label="{label}"{style}];')
    for fn in graph.feature_nodes:
        lines.append(f'  "{fn.parent}" -> "{fn.node_id}";')
    for (attach, flag), members in sorted(
        groups.items(), key=lambda kv: (kv[0][0], kv[0][1])
    ):
        gid = f"class{min(members)}"
        attr = " [color=green, penwidth=2]" if flag else ""
        lines.append(f'  "{attach}" -> "{gid}"{attr};')
    lines.append("}")
    return "\n".join(lines) + "\n"


def export_graph(graph, fmt):
    """Render a graph as text; fmt is 'dot' or 'json'."""
    if fmt == "dot":
        return graph_to_dot(graph)
    if fmt == "json":
        return graph_to_json(graph)
    raise ValidationError(f"unknown export format {fmt!r}")
