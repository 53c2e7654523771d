import logging
import math
from collections import deque
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, List, Tuple

import numpy as np
from scipy.spatial.distance import cdist

from .report_features import DENSE_CELLS

logger = logging.getLogger(__name__)

NOISE = -1
NORMAL_FRACTION = 0.15
MIN_CLUSTER_FRACTION = 0.01
# zero-distance merges get a finite lambda of 1 / MIN_DISTANCE
MIN_DISTANCE = 1e-12
DEFAULT_EPSILON = {30: 1.0, 40: 0.7, 50: 1.0, 60: 0.7, 70: 0.3, 80: 0.3}


class ClusteringConfigException(Exception):
    pass


class Verdict(Enum):
    NORMAL = "normal"
    ABNORMAL = "abnormal"


@dataclass
class HdbscanConfig:
    min_cluster_size: int
    min_samples: int = 5
    cluster_selection_epsilon: float = 0.0

    def validate(self):
        if self.min_cluster_size < 2:
            raise ClusteringConfigException("min_cluster_size must be at least 2")
        if self.min_samples < 1:
            raise ClusteringConfigException("min_samples must be at least 1")
        if self.cluster_selection_epsilon < 0:
            raise ClusteringConfigException("cluster_selection_epsilon must be nonnegative")

    @classmethod
    def for_bracket(cls, bracket, population, min_samples=5, epsilon_table=None):
        epsilon_table = DEFAULT_EPSILON if epsilon_table is None else epsilon_table
        return cls(
            min_cluster_size=max(2, math.ceil(MIN_CLUSTER_FRACTION * population)),
            min_samples=min_samples,
            cluster_selection_epsilon=float(epsilon_table.get(bracket, 0.0)),
        )


@dataclass
class ClusterLabeling:
    labels: np.ndarray
    fractions: Dict[int, float] = field(default_factory=dict)
    verdicts: Dict[int, Verdict] = field(default_factory=dict)
    summaries: Dict[int, str] = field(default_factory=dict)

    @property
    def cluster_ids(self):
        return sorted(int(label) for label in np.unique(self.labels) if label != NOISE)

    def verdict_of(self, point):
        label = int(self.labels[point])
        return self.verdicts.get(label, Verdict.ABNORMAL) if label != NOISE else Verdict.ABNORMAL

    @property
    def point_verdicts(self):
        return [self.verdict_of(point) for point in range(len(self.labels))]


def core_distances(points, min_samples) -> np.ndarray:
    points = np.asarray(points, dtype=np.float64)
    if points.shape[0] <= min_samples:
        raise ClusteringConfigException(
            "Need more than {} points for min_samples={}, got {}".format(min_samples, min_samples, points.shape[0])
        )

    # column 0 of each sorted row is the point itself (or an equally distant duplicate)
    return np.sort(cdist(points, points), axis=1)[:, min_samples]


def mutual_reachability(points, core) -> np.ndarray:
    distances = cdist(points, points)
    return np.maximum(np.maximum(core[:, None], core[None, :]), distances)


def mst_mutual_reachability(points, core) -> List[Tuple[int, int, float]]:
    """Prim's algorithm on the dense mutual reachability matrix."""
    mreach = mutual_reachability(np.asarray(points, dtype=np.float64), np.asarray(core, dtype=np.float64))
    n = mreach.shape[0]
    if n == 0:
        return []

    in_tree = np.zeros(n, dtype=bool)
    in_tree[0] = True
    best = mreach[0].copy()
    parent = np.zeros(n, dtype=np.int64)
    edges = []

    for _ in range(n - 1):
        candidates = np.where(in_tree, np.inf, best)
        node = int(np.argmin(candidates))
        edges.append((int(parent[node]), node, float(best[node])))
        in_tree[node] = True

        closer = (mreach[node] < best) & ~in_tree
        best[closer] = mreach[node][closer]
        parent[closer] = node

    return edges


class _UnionFind:
    def __init__(self, size):
        self.parent = list(range(size))

    def find(self, node):
        while self.parent[node] != node:
            self.parent[node] = self.parent[self.parent[node]]
            node = self.parent[node]
        return node


def single_linkage(mst, n) -> np.ndarray:
    """Linkage matrix (scipy layout: left, right, height, size) from MST edges."""
    edges = sorted(mst, key=lambda edge: edge[2])
    union = _UnionFind(2 * n - 1)
    sizes = [1] * n + [0] * (n - 1)
    linkage = np.zeros((n - 1, 4))

    for step, (a, b, weight) in enumerate(edges):
        left, right = union.find(a), union.find(b)
        node = n + step
        union.parent[left] = node
        union.parent[right] = node
        sizes[node] = sizes[left] + sizes[right]
        linkage[step] = (left, right, weight, sizes[node])

    return linkage


def _descendants(linkage, node, n):
    queue = deque([node])
    while queue:
        current = queue.popleft()
        yield current
        if current >= n:
            left, right = linkage[current - n][:2]
            queue.extend((int(left), int(right)))


@dataclass
class CondensedTree:
    parent: np.ndarray
    child: np.ndarray
    lambda_val: np.ndarray
    child_size: np.ndarray
    n_points: int

    @property
    def root(self):
        return self.n_points

    def cluster_rows(self):
        return self.child_size > 1

    def birth_lambda(self, cluster):
        if cluster == self.root:
            return 0.0
        return float(self.lambda_val[self.child == cluster][0])

    def parent_of(self, cluster):
        return int(self.parent[self.child == cluster][0])


def condense_tree(linkage, min_cluster_size) -> CondensedTree:
    n = linkage.shape[0] + 1
    root = 2 * n - 2
    relabel = {root: n}
    next_label = n + 1
    ignore = set()
    rows = []

    def fall_out(subtree_root, parent_label, lambda_value):
        for sub in _descendants(linkage, subtree_root, n):
            if sub < n:
                rows.append((parent_label, sub, lambda_value, 1))
            ignore.add(sub)

    for node in _descendants(linkage, root, n):
        if node in ignore or node < n:
            continue

        left, right, distance, _ = linkage[node - n]
        left, right = int(left), int(right)
        lambda_value = 1.0 / distance if distance > MIN_DISTANCE else 1.0 / MIN_DISTANCE
        left_count = int(linkage[left - n][3]) if left >= n else 1
        right_count = int(linkage[right - n][3]) if right >= n else 1

        if left_count >= min_cluster_size and right_count >= min_cluster_size:
            relabel[left] = next_label
            rows.append((relabel[node], next_label, lambda_value, left_count))
            relabel[right] = next_label + 1
            rows.append((relabel[node], next_label + 1, lambda_value, right_count))
            next_label += 2
        elif left_count < min_cluster_size and right_count < min_cluster_size:
            fall_out(left, relabel[node], lambda_value)
            fall_out(right, relabel[node], lambda_value)
        elif left_count < min_cluster_size:
            relabel[right] = relabel[node]
            fall_out(left, relabel[node], lambda_value)
        else:
            relabel[left] = relabel[node]
            fall_out(right, relabel[node], lambda_value)

    if not rows:
        rows = [(n, point, 1.0 / MIN_DISTANCE, 1) for point in range(n)]

    parent, child, lambda_val, child_size = (np.array(column) for column in zip(*rows))
    return CondensedTree(parent.astype(np.int64), child.astype(np.int64), lambda_val.astype(np.float64),
                         child_size.astype(np.int64), n)


def compute_stability(tree: CondensedTree) -> Dict[int, float]:
    clusters = sorted(set(tree.parent.tolist()) | set(tree.child[tree.cluster_rows()].tolist()))
    births = {cluster: tree.birth_lambda(cluster) for cluster in clusters}
    stability = {cluster: 0.0 for cluster in clusters}

    for parent, lambda_value, size in zip(tree.parent, tree.lambda_val, tree.child_size):
        stability[int(parent)] += (lambda_value - births[int(parent)]) * size

    return stability


def _cluster_children(tree, cluster):
    mask = (tree.parent == cluster) & tree.cluster_rows()
    return tree.child[mask].tolist()


def _cluster_descendants(tree, cluster):
    queue = deque(_cluster_children(tree, cluster))
    while queue:
        current = queue.popleft()
        yield current
        queue.extend(_cluster_children(tree, current))


def select_clusters(tree: CondensedTree, epsilon=0.0):
    """Excess-of-mass selection below the root, then epsilon merging upwards."""
    stability = compute_stability(tree)
    candidates = sorted((cluster for cluster in stability if cluster != tree.root), reverse=True)
    is_cluster = {cluster: True for cluster in candidates}

    for node in candidates:
        child_selection = sum(stability[child] for child in _cluster_children(tree, node))
        if child_selection > stability[node]:
            is_cluster[node] = False
            stability[node] = child_selection
        else:
            for sub in _cluster_descendants(tree, node):
                is_cluster[sub] = False

    selected = {cluster for cluster, chosen in is_cluster.items() if chosen}

    if epsilon > 0.0 and selected:
        merged = set()
        for cluster in selected:
            # merge while the split that created this cluster sits below epsilon
            while cluster != tree.root and 1.0 / tree.birth_lambda(cluster) < epsilon:
                cluster = tree.parent_of(cluster)
            merged.add(cluster)
        selected = {cluster for cluster in merged
                    if not any(ancestor in merged for ancestor in _ancestors(tree, cluster))}

    return sorted(selected)


def _ancestors(tree, cluster):
    while cluster != tree.root:
        cluster = tree.parent_of(cluster)
        yield cluster


def label_points(tree: CondensedTree, selected, epsilon=0.0) -> np.ndarray:
    labels = np.full(tree.n_points, NOISE, dtype=np.int64)
    cluster_label = {cluster: position for position, cluster in enumerate(selected)}
    point_rows = tree.child_size == 1

    for parent, point, lambda_value in zip(tree.parent[point_rows], tree.child[point_rows], tree.lambda_val[point_rows]):
        cluster = int(parent)
        if cluster == tree.root and cluster in cluster_label:
            # points leaving the root directly only join it within epsilon
            if lambda_value > 0 and 1.0 / lambda_value <= epsilon:
                labels[point] = cluster_label[cluster]
            continue

        while True:
            if cluster in cluster_label:
                labels[point] = cluster_label[cluster]
                break
            if cluster == tree.root:
                break
            cluster = tree.parent_of(cluster)

    return labels


def condense_and_select(mst, config: HdbscanConfig, n=None) -> ClusterLabeling:
    config.validate()
    n = len(mst) + 1 if n is None else n
    if n < 2:
        return ClusterLabeling(labels=np.full(n, NOISE, dtype=np.int64))

    tree = condense_tree(single_linkage(mst, n), config.min_cluster_size)
    selected = select_clusters(tree, config.cluster_selection_epsilon)
    labels = label_points(tree, selected, config.cluster_selection_epsilon)

    if np.all(labels == NOISE):
        logger.warning("All %d points were labelled noise", n)

    return ClusterLabeling(labels=labels)


def hdbscan(points, config: HdbscanConfig) -> ClusterLabeling:
    config.validate()
    core = core_distances(points, config.min_samples)
    return condense_and_select(mst_mutual_reachability(points, core), config, n=len(points))


def assign_normality(labeling: ClusterLabeling, bracket_population) -> ClusterLabeling:
    if bracket_population <= 0:
        raise ClusteringConfigException("Bracket population must be positive")

    labeling.fractions = {}
    labeling.verdicts = {}
    for cluster in labeling.cluster_ids:
        fraction = float(np.sum(labeling.labels == cluster)) / float(bracket_population)
        labeling.fractions[cluster] = fraction
        labeling.verdicts[cluster] = Verdict.NORMAL if fraction > NORMAL_FRACTION else Verdict.ABNORMAL

    return labeling


def summarize_clusters(labeling: ClusterLabeling, dense_matrix, top=3) -> ClusterLabeling:
    """Fill in the top (region, kind, severity) cells by mean count per cluster."""
    dense_matrix = np.asarray(dense_matrix, dtype=np.float64)[:, :len(DENSE_CELLS)]

    for cluster in labeling.cluster_ids:
        means = dense_matrix[labeling.labels == cluster].mean(axis=0)
        order = np.argsort(-means, kind='stable')[:top]
        parts = [
            "{} {} {} ({:.2f})".format(severity.value, DENSE_CELLS[index][0].value, kind.value, means[index])
            for index in order if means[index] > 0
            for _, kind, severity in [DENSE_CELLS[index]]
        ]
        labeling.summaries[cluster] = "; ".join(parts) if parts else "no degenerative findings"

    return labeling


def summary_text(bracket, labeling: ClusterLabeling):
    lines = ["bracket {}".format(bracket)]
    for cluster in labeling.cluster_ids:
        lines.append("  cluster {}: fraction={:.4f} verdict={} dominant={}".format(
            cluster, labeling.fractions.get(cluster, 0.0),
            labeling.verdicts.get(cluster, Verdict.ABNORMAL).value,
            labeling.summaries.get(cluster, "")))
    lines.append("  noise: {}".format(int(np.sum(labeling.labels == NOISE))))
    return "\n".join(lines) + "\n"
