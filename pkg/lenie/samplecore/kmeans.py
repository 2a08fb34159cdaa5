import logging
from typing import List

import numpy as np

from lenie.embedcore.matrix import EmbeddingMatrix

logger = logging.getLogger(__name__)

DEFAULT_MAX_ITERS = 100
DEFAULT_TOL = 1e-6


class ClusterResult:
    """
    Fitted k-means model
    """

    def __init__(self, centers: np.ndarray,
                 assignments: np.ndarray,
                 inertia: float,
                 inertia_trace: List[float],
                 iterations: int):
        """
        :param centers: (k, dim) cluster centers
        :param assignments: nearest center index per point
        :param inertia: sum of squared distances to assigned centers
        :param inertia_trace: inertia after every assignment step
        :param iterations: Lloyd iterations performed
        """
        self.centers = centers
        self.assignments = assignments
        self.inertia = inertia
        self.inertia_trace = inertia_trace
        self.iterations = iterations

    @property
    def k(self) -> int:
        return self.centers.shape[0]

    def __eq__(self, other):
        return isinstance(other, ClusterResult) and \
            np.array_equal(self.centers, other.centers) and \
            np.array_equal(self.assignments, other.assignments) and \
            self.inertia_trace == other.inertia_trace

    def __repr__(self):
        return f"ClusterResult(k={self.k}, inertia={self.inertia}, iterations={self.iterations})"


def squared_distances(points: np.ndarray, centers: np.ndarray) -> np.ndarray:
    """
    :return: (rows, k) matrix of squared Euclidean distances
    """
    diff = points[:, np.newaxis, :] - centers[np.newaxis, :, :]
    return np.einsum("ijk,ijk->ij", diff, diff)


def kmeans_plus_plus(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """
    D^2-weighted seeding. When every remaining distance is zero the next center is drawn uniformly
    """
    rows = points.shape[0]
    chosen = [int(rng.integers(rows))]
    closest = squared_distances(points, points[chosen]).min(axis=1)
    while len(chosen) < k:
        total = closest.sum()
        if total > 0:
            index = int(rng.choice(rows, p=closest / total))
        else:
            index = int(rng.integers(rows))
        chosen.append(index)
        closest = np.minimum(closest, squared_distances(points, points[[index]])[:, 0])
    return points[chosen].copy()


def kmeans_fit(points: EmbeddingMatrix, k: int, seed: int,
               max_iters: int = DEFAULT_MAX_ITERS,
               tol: float = DEFAULT_TOL) -> ClusterResult:
    """
    Lloyd's algorithm with seeded k-means++ initialization over squared Euclidean distance
    :param points: points to cluster, one per row
    :param k: cluster count, 1 <= k <= rows
    :param seed: generator seed
    :param max_iters: iteration cap
    :param tol: stop once max center movement falls below it
    :raises SamplerConfigError, KMeansNumericError
    """
    data = np.asarray(points.data, dtype=np.float64)
    rows = data.shape[0]
    if rows < 1:
        raise SamplerConfigError("Cannot cluster empty point set")
    if k < 1 or k > rows:
        raise SamplerConfigError(f"Incorrect cluster count '{k}'. Should be between 1 and {rows}")
    if max_iters < 1 or not tol > 0:
        raise SamplerConfigError(f"Incorrect k-means limits max_iters='{max_iters}', tol='{tol}'")
    if not np.all(np.isfinite(data)):
        raise KMeansNumericError("Points for clustering contain non-finite values")

    rng = np.random.default_rng(seed)
    centers = kmeans_plus_plus(data, k, rng)
    inertia_trace = []
    iterations = 0
    for iterations in range(1, max_iters + 1):
        distances = squared_distances(data, centers)
        assignments = np.argmin(distances, axis=1)
        nearest = distances[np.arange(rows), assignments]
        inertia_trace.append(float(nearest.sum()))

        updated = np.empty_like(centers)
        reseeded = set()
        for cluster in range(k):
            members = assignments == cluster
            if np.any(members):
                updated[cluster] = data[members].mean(axis=0)
                continue
            order = np.argsort(-nearest, kind="stable")
            candidate = next(int(index) for index in order if int(index) not in reseeded)
            reseeded.add(candidate)
            updated[cluster] = data[candidate]
            logger.debug(f"Reseeded empty cluster {cluster} with point {candidate}")
        movement = float(np.max(np.linalg.norm(updated - centers, axis=1)))
        centers = updated
        logger.debug(f"k-means iteration {iterations}: inertia {inertia_trace[-1]}, movement {movement}")
        if movement < tol:
            break

    distances = squared_distances(data, centers)
    assignments = np.argmin(distances, axis=1)
    inertia = float(distances[np.arange(rows), assignments].sum())
    inertia_trace.append(inertia)
    if not np.isfinite(inertia):
        raise KMeansNumericError(f"Non-finite inertia after {iterations} iterations")
    return ClusterResult(centers, assignments, inertia, inertia_trace, iterations)


class SamplerError(Exception):
    pass


class SamplerConfigError(SamplerError):
    pass


class KMeansNumericError(SamplerError):
    pass
