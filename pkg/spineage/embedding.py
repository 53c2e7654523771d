import logging
from dataclasses import dataclass, field

import numba
import numpy as np
import scipy.sparse
from scipy.optimize import curve_fit

from .report_features import feature_matrix, pairwise_canberra

logger = logging.getLogger(__name__)

SMOOTH_K_TOLERANCE = 1e-6
BISECTION_ITERATIONS = 64
MIN_DIST_FLOOR = 1e-3
INIT_RANGE = 10.0
GRADIENT_CLIP = 4.0
INT32_MIN = np.iinfo(np.int32).min + 1
INT32_MAX = np.iinfo(np.int32).max - 1


class EmbeddingConfigException(Exception):
    pass


@dataclass
class UmapConfig:
    n_neighbors: int = 15
    min_dist: float = 0.0
    n_epochs: int = 500
    negative_sample_rate: int = 5
    learning_rate: float = 1.0
    repulsion_strength: float = 1.0
    spread: float = 1.0
    seed: int = 0

    def validate(self):
        if self.n_neighbors < 2:
            raise EmbeddingConfigException("n_neighbors must be at least 2")
        if self.min_dist < 0:
            raise EmbeddingConfigException("min_dist must be nonnegative")
        if self.n_epochs < 1:
            raise EmbeddingConfigException("n_epochs must be at least 1")
        if self.negative_sample_rate < 0 or self.learning_rate <= 0:
            raise EmbeddingConfigException("negative_sample_rate and learning_rate must be positive")


@dataclass
class KnnGraph:
    indices: np.ndarray
    distances: np.ndarray

    @property
    def n_neighbors(self):
        return self.indices.shape[1]


@dataclass
class FuzzyGraph:
    graph: scipy.sparse.csr_matrix
    rho: np.ndarray
    sigma: np.ndarray
    directed: scipy.sparse.csr_matrix = field(repr=False, default=None)


@dataclass
class Embedding2D:
    coordinates: np.ndarray
    config: UmapConfig
    seed: int


def knn_graph(points, k) -> KnnGraph:
    matrix = points if isinstance(points, np.ndarray) else feature_matrix(points)
    n = matrix.shape[0]
    if n <= k:
        raise EmbeddingConfigException("Need more than {} points for {} neighbors, got {}".format(k, k, n))

    distances = pairwise_canberra(matrix)
    np.fill_diagonal(distances, np.inf)
    # stable sort keeps lower indices first among equal distances
    indices = np.argsort(distances, axis=1, kind='stable')[:, :k]

    return KnnGraph(indices=indices, distances=np.take_along_axis(distances, indices, axis=1))


def smooth_knn_dist(distances, k):
    target = np.log2(k)
    n = distances.shape[0]
    rho = distances[:, 0].copy()
    sigma = np.zeros(n)
    mean_distance = float(np.mean(distances))
    fallbacks = 0

    for i in range(n):
        lo = 0.0
        hi = np.inf
        mid = 1.0
        shifted = np.maximum(distances[i] - rho[i], 0.0)
        converged = False

        for _ in range(BISECTION_ITERATIONS):
            psum = np.exp(-shifted / mid).sum()

            if abs(psum - target) < SMOOTH_K_TOLERANCE:
                converged = True
                break

            if psum > target:
                hi = mid
                mid = (lo + hi) / 2.0
            else:
                lo = mid
                mid = mid * 2 if hi == np.inf else (lo + hi) / 2.0

        if not converged:
            mid = float(np.mean(distances[i])) or mean_distance or 1.0
            fallbacks += 1

        sigma[i] = mid

    if fallbacks:
        logger.warning("Bandwidth search did not converge for %d of %d points; using their mean neighbour distance",
                       fallbacks, n)
    return sigma, rho


def fuzzy_simplicial_set(knn: KnnGraph) -> FuzzyGraph:
    n, k = knn.indices.shape
    sigma, rho = smooth_knn_dist(knn.distances, k)

    memberships = np.exp(-np.maximum(knn.distances - rho[:, None], 0.0) / sigma[:, None])
    rows = np.repeat(np.arange(n), k)
    directed = scipy.sparse.coo_matrix((memberships.ravel(), (rows, knn.indices.ravel())), shape=(n, n)).tocsr()
    directed.eliminate_zeros()

    transpose = directed.transpose().tocsr()
    product = directed.multiply(transpose)
    graph = (directed + transpose - product).tocsr()
    graph.eliminate_zeros()
    graph.sort_indices()

    assert abs(graph - graph.T).max() < 1e-12 if graph.nnz else True, "fuzzy graph is not symmetric"
    assert graph.nnz == 0 or (graph.data.min() > 0 and graph.data.max() <= 1.0), "membership out of (0, 1]"

    return FuzzyGraph(graph=graph, rho=rho, sigma=sigma, directed=directed)


def find_ab_params(spread, min_dist):
    """Fit a, b for 1 / (1 + a x^(2b)) against the offset exponential decay."""
    min_dist = max(min_dist, MIN_DIST_FLOOR)

    def curve(x, a, b):
        return 1.0 / (1.0 + a * x ** (2 * b))

    xv = np.linspace(0, spread * 3, 300)
    yv = np.zeros(xv.shape)
    yv[xv < min_dist] = 1.0
    yv[xv >= min_dist] = np.exp(-(xv[xv >= min_dist] - min_dist) / spread)
    params, _ = curve_fit(curve, xv, yv)

    return float(params[0]), float(params[1])


def make_epochs_per_sample(weights, n_epochs):
    result = -1.0 * np.ones(weights.shape[0], dtype=np.float64)
    n_samples = n_epochs * (weights / weights.max())
    result[n_samples > 0] = float(n_epochs) / n_samples[n_samples > 0]
    return result


def initial_coordinates(n, seed):
    return np.random.default_rng(seed).uniform(-INIT_RANGE, INIT_RANGE, size=(n, 2))


@numba.njit()
def tau_rand_int(state):
    state[0] = (((state[0] & 4294967294) << 12) & 0xFFFFFFFF) ^ ((((state[0] << 13) & 0xFFFFFFFF) ^ state[0]) >> 19)
    state[1] = (((state[1] & 4294967288) << 4) & 0xFFFFFFFF) ^ ((((state[1] << 2) & 0xFFFFFFFF) ^ state[1]) >> 25)
    state[2] = (((state[2] & 4294967280) << 17) & 0xFFFFFFFF) ^ ((((state[2] << 3) & 0xFFFFFFFF) ^ state[2]) >> 11)

    return state[0] ^ state[1] ^ state[2]


@numba.njit()
def clip(value):
    if value > GRADIENT_CLIP:
        return GRADIENT_CLIP
    if value < -GRADIENT_CLIP:
        return -GRADIENT_CLIP
    return value


@numba.njit()
def optimize_epochs(embedding, head, tail, epochs_per_sample, a, b, rng_state, gamma,
                    initial_alpha, negative_sample_rate, n_epochs):
    n_vertices = embedding.shape[0]
    dim = embedding.shape[1]
    epochs_per_negative_sample = epochs_per_sample / negative_sample_rate
    epoch_of_next_negative_sample = epochs_per_negative_sample.copy()
    epoch_of_next_sample = epochs_per_sample.copy()
    alpha = initial_alpha

    for n in range(n_epochs):
        for i in range(epochs_per_sample.shape[0]):
            if epoch_of_next_sample[i] > n:
                continue

            j = head[i]
            k = tail[i]
            dist_squared = 0.0
            for d in range(dim):
                dist_squared += (embedding[j, d] - embedding[k, d]) ** 2

            grad_coeff = 0.0
            if dist_squared > 0.0:
                grad_coeff = -2.0 * a * b * dist_squared ** (b - 1.0)
                grad_coeff /= a * dist_squared ** b + 1.0

            for d in range(dim):
                grad_d = clip(grad_coeff * (embedding[j, d] - embedding[k, d]))
                embedding[j, d] += grad_d * alpha
                embedding[k, d] -= grad_d * alpha

            epoch_of_next_sample[i] += epochs_per_sample[i]

            n_neg_samples = int((n - epoch_of_next_negative_sample[i]) / epochs_per_negative_sample[i])
            for _ in range(n_neg_samples):
                k = tau_rand_int(rng_state) % n_vertices
                if j == k:
                    continue

                dist_squared = 0.0
                for d in range(dim):
                    dist_squared += (embedding[j, d] - embedding[k, d]) ** 2

                grad_coeff = 0.0
                if dist_squared > 0.0:
                    grad_coeff = 2.0 * gamma * b
                    grad_coeff /= (0.001 + dist_squared) * (a * dist_squared ** b + 1.0)

                for d in range(dim):
                    if grad_coeff > 0.0:
                        grad_d = clip(grad_coeff * (embedding[j, d] - embedding[k, d]))
                    else:
                        grad_d = GRADIENT_CLIP
                    embedding[j, d] += grad_d * alpha

            epoch_of_next_negative_sample[i] += n_neg_samples * epochs_per_negative_sample[i]

        alpha = initial_alpha * (1.0 - float(n + 1) / float(n_epochs))

    return embedding


def optimize_layout(graph: FuzzyGraph, config: UmapConfig) -> Embedding2D:
    config.validate()
    matrix = graph.graph.tocoo()
    n = matrix.shape[0]
    if n == 0 or matrix.nnz == 0:
        raise EmbeddingConfigException("Cannot lay out an empty graph")

    weights = matrix.data.copy()
    keep = weights >= weights.max() / float(config.n_epochs)
    head = matrix.row[keep].astype(np.int64)
    tail = matrix.col[keep].astype(np.int64)
    epochs_per_sample = make_epochs_per_sample(weights[keep], config.n_epochs)

    a, b = find_ab_params(config.spread, config.min_dist)
    embedding = initial_coordinates(n, config.seed)
    rng_state = np.random.default_rng(config.seed).integers(INT32_MIN, INT32_MAX, 3).astype(np.int64)

    logger.debug("Laying out %d points over %d edges (a=%.4f, b=%.4f)", n, head.shape[0], a, b)
    embedding = optimize_epochs(
        embedding, head, tail, epochs_per_sample, a, b, rng_state,
        config.repulsion_strength, config.learning_rate, config.negative_sample_rate, config.n_epochs,
    )

    if not np.all(np.isfinite(embedding)):
        raise EmbeddingConfigException("Layout diverged to non-finite coordinates")

    return Embedding2D(coordinates=embedding, config=config, seed=config.seed)


def embed(points, config: UmapConfig) -> Embedding2D:
    """knn_graph -> fuzzy_simplicial_set -> optimize_layout with one config."""
    config.validate()
    return optimize_layout(fuzzy_simplicial_set(knn_graph(points, config.n_neighbors)), config)
