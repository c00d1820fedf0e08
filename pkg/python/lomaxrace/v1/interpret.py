"""Interpreting fitted sub-risks: weights, representatives and an Isomap embedding.

The weight of atom (j, k) for subject i is E[lambda_ijk / sum lambda_i] under
lambda_ijk ~ Gamma(r_jk, e^{x_i'beta_jk}); an atom's representative is the
weight-averaged covariate vector of the uncensored subjects. Subjects and
representatives are then embedded together in 2-D with Isomap (k-NN graph,
Floyd-Warshall geodesics, classical MDS).
"""

import dataclasses
import logging

import numpy as np
import pandas as pd
from scipy import special
from scipy import sparse
from scipy import spatial
from scipy.sparse import csgraph

from lomaxrace.v1 import distributions
from lomaxrace.v1.datasets import Dataset
from lomaxrace.v1.errors import ParameterError, UndefinedMetricError

DEFAULT_NEIGHBORS = 5
ASSIGN_THRESHOLD = 0.5
_MIN_EDGE = 1e-12


@dataclasses.dataclass(frozen=True)
class SubriskWeights:
    """Per-subject atom weights.

    Attributes:
        weights: (n, A) array; rows sum to 1. Columns follow params' atoms.
        risk, subrisk: (A,) atom labels.
        X: (n, P) covariates of the weighted subjects.
        event: (n,) 0-based event type, -1 when missing.
        subjects: (n,) indices of the subjects in the source dataset.
        num_subrisks: K.
        n_mc: gamma draws behind each weight.
    """

    weights: np.ndarray
    risk: np.ndarray
    subrisk: np.ndarray
    X: np.ndarray
    event: np.ndarray
    subjects: np.ndarray
    num_subrisks: int
    n_mc: int

    def grid(self):
        """(n, J, K) weights; atoms absent from params are zero."""
        J = int(self.risk.max()) + 1 if self.risk.size else 0
        out = np.zeros((self.weights.shape[0], J, self.num_subrisks))
        out[:, self.risk, self.subrisk] = self.weights
        return out


def subrisk_weights(data, params, n_mc, rng):
    """Monte-Carlo weights for every uncensored subject.

    Raises:
        UndefinedMetricError: if data holds no uncensored subject.
    """
    if not isinstance(data, Dataset):
        data = Dataset(data)
    subjects = np.array([i for i, rec in enumerate(data) if not rec.is_censored], dtype=int)
    if subjects.size == 0:
        raise UndefinedMetricError("no uncensored subjects to weight")
    if n_mc < 1:
        raise ParameterError("n_mc must be >= 1, got {!r}".format(n_mc))
    a = data.arrays()
    X = a.X[subjects]
    eta = params.linear_predictor(X)
    shape = (X.shape[0], int(n_mc), params.num_atoms)
    log_lam = distributions.sample_log_gamma(np.broadcast_to(params.r, shape), rng) + eta[:, None, :]
    share = np.exp(log_lam - special.logsumexp(log_lam, axis=2, keepdims=True)).mean(axis=1)
    share /= share.sum(axis=1, keepdims=True)
    return SubriskWeights(share, np.asarray(params.risk), np.asarray(params.subrisk), X, a.event[subjects],
                          subjects, params.num_subrisks, int(n_mc))


@dataclasses.dataclass(frozen=True)
class Representatives:
    """Weighted covariate centroids, intercept dropped.

    Atoms whose weights sum to zero have a NaN row and defined=False.
    """

    vectors: np.ndarray
    risk: np.ndarray
    subrisk: np.ndarray
    defined: np.ndarray


def representatives(weights):
    """sum_i w_ia x_i / sum_i w_ia for every atom a."""
    total = weights.weights.sum(axis=0)
    defined = total > 0
    with np.errstate(invalid='ignore', divide='ignore'):
        vectors = (weights.weights.T @ weights.X[:, 1:]) / total[:, None]
    vectors[~defined] = np.nan
    if not np.all(defined):
        logging.warning("atoms %s carry no weight; their representatives are undefined",
                        [(int(j) + 1, int(k) + 1) for j, k in zip(weights.risk[~defined], weights.subrisk[~defined])])
    return Representatives(vectors, weights.risk, weights.subrisk, defined)


def assign_subrisks(weights, threshold=ASSIGN_THRESHOLD):
    """Atom index of each subject whose weight, renormalized within its risk, exceeds threshold.

    The risk is the subject's event type, or its heaviest risk when the type
    is missing. Unassigned subjects get -1.
    """
    w = weights.weights
    J = int(weights.risk.max()) + 1
    onehot = np.zeros((weights.risk.size, J))
    onehot[np.arange(weights.risk.size), weights.risk] = 1.0
    by_risk = w @ onehot
    risk = np.where(weights.event >= 0, weights.event, np.argmax(by_risk, axis=1))
    own = weights.risk[None, :] == risk[:, None]
    denom = by_risk[np.arange(w.shape[0]), risk]
    with np.errstate(invalid='ignore', divide='ignore'):
        within = np.where(own, w, 0.0) / denom[:, None]
    best = np.argmax(np.nan_to_num(within), axis=1)
    ok = np.nan_to_num(within[np.arange(w.shape[0]), best]) > threshold
    return np.where(ok, best, -1)


def floyd_warshall(graph):
    """All-pairs shortest paths of an undirected graph.

    graph is a scipy sparse matrix of edge lengths or a dense array where
    np.inf (or 0 off the diagonal) marks a missing edge.
    """
    if not sparse.issparse(graph):
        graph = np.asarray(graph, dtype=float)
    if graph.ndim != 2 or graph.shape[0] != graph.shape[1]:
        raise ParameterError("distance matrix must be square, got shape {}".format(graph.shape))
    return csgraph.floyd_warshall(graph, directed=False)


def knn_graph(points, k_neighbors):
    """Symmetric k-NN graph as a CSR matrix: an edge joins i and j if either lists the other.

    Coincident points get an edge of length _MIN_EDGE, since csgraph reads a
    stored zero as a missing edge.
    """
    points = np.asarray(points, dtype=float)
    n = points.shape[0]
    dist, idx = spatial.cKDTree(points).query(points, k=k_neighbors + 1)
    own = idx == np.arange(n)[:, None]
    # Duplicates can push a point out of its own neighbor list.
    own[~own.any(axis=1), -1] = True
    rows = np.repeat(np.arange(n), k_neighbors)
    graph = sparse.csr_matrix((np.maximum(dist[~own], _MIN_EDGE), (rows, idx[~own])), shape=(n, n))
    return graph.maximum(graph.T).tocsr()


def classical_mds(geodesic, n_components=2):
    """Top eigenpairs of the double-centered squared distances; negative eigenvalues clamp to 0."""
    n = geodesic.shape[0]
    center = np.eye(n) - np.full((n, n), 1.0 / n)
    b = -0.5 * center @ (geodesic ** 2) @ center
    vals, vecs = np.linalg.eigh(b)
    order = np.argsort(vals)[::-1][:n_components]
    coords = vecs[:, order] * np.sqrt(np.maximum(vals[order], 0.0))
    if coords.shape[1] < n_components:
        coords = np.hstack([coords, np.zeros((n, n_components - coords.shape[1]))])
    return coords - coords.mean(axis=0)


@dataclasses.dataclass(frozen=True)
class Embedding:
    """2-D coordinates of the points in the largest connected component.

    Attributes:
        coords: (m, 2) centered coordinates.
        included: (m,) indices of embedded input points.
        excluded: indices of points outside the largest component.
        k_neighbors: graph degree used.
    """

    coords: np.ndarray
    included: np.ndarray
    excluded: np.ndarray
    k_neighbors: int

    @property
    def connected(self):
        return self.excluded.size == 0


def isomap_embed(points, k_neighbors=DEFAULT_NEIGHBORS, n_components=2):
    """Isomap embedding of points (n, d).

    Raises:
        ParameterError: with fewer than 3 points or fewer than k_neighbors + 1.
    """
    points = np.asarray(points, dtype=float)
    if points.ndim != 2:
        raise ParameterError("points must be a 2-D array, got shape {}".format(points.shape))
    n = points.shape[0]
    if n < 3 or n < k_neighbors + 1:
        raise ParameterError("need at least max(3, k_neighbors + 1) = {} points, got {}".format(
            max(3, k_neighbors + 1), n))
    if not np.all(np.isfinite(points)):
        raise ParameterError("points must be finite")
    graph = knn_graph(points, k_neighbors)
    _, labels = csgraph.connected_components(graph, directed=False)
    largest = np.argmax(np.bincount(labels))
    included = np.flatnonzero(labels == largest)
    excluded = np.flatnonzero(labels != largest)
    if excluded.size:
        logging.warning("k-NN graph is disconnected; embedding %d of %d points", included.size, n)
    geodesic = floyd_warshall(graph[included][:, included])
    return Embedding(classical_mds(geodesic, n_components), included, excluded, k_neighbors)


def embed_model(data, params, n_mc, rng, k_neighbors=DEFAULT_NEIGHBORS):
    """Weights, representatives and a joint embedding of subjects and representatives.

    Representatives are appended to the subjects before the k-NN graph is
    built, so they receive geodesic coordinates like any subject.

    Returns:
        (Embedding, SubriskWeights, Representatives, assignments).
    """
    weights = subrisk_weights(data, params, n_mc, rng)
    reps = representatives(weights)
    points = np.vstack([weights.X[:, 1:], reps.vectors[reps.defined]])
    emb = isomap_embed(points, k_neighbors)
    return emb, weights, reps, assign_subrisks(weights)


def embedding_frame(embedding, weights, reps, assignments):
    """Rows of (id, is_representative, risk, subrisk, coord_x, coord_y).

    Subject ids are 1-based rows of the source dataset; representative ids
    are R<risk>.<subrisk>. Risk and sub-risk labels are 1-based; an
    unassigned subject has an empty sub-risk.
    """
    n = weights.X.shape[0]
    rep_atoms = np.flatnonzero(reps.defined)
    rows = []
    for pos, idx in enumerate(embedding.included):
        x, y = embedding.coords[pos, 0], embedding.coords[pos, 1]
        if idx < n:
            atom = assignments[idx]
            risk = weights.event[idx] if weights.event[idx] >= 0 else (weights.risk[atom] if atom >= 0 else -1)
            rows.append({
                'id': str(int(weights.subjects[idx]) + 1),
                'is_representative': False,
                'risk': int(risk) + 1 if risk >= 0 else None,
                'subrisk': int(weights.subrisk[atom]) + 1 if atom >= 0 else None,
                'coord_x': x, 'coord_y': y,
            })
        else:
            a = rep_atoms[idx - n]
            j, k = int(reps.risk[a]) + 1, int(reps.subrisk[a]) + 1
            rows.append({
                'id': 'R{}.{}'.format(j, k), 'is_representative': True,
                'risk': j, 'subrisk': k, 'coord_x': x, 'coord_y': y,
            })
    frame = pd.DataFrame(rows, columns=['id', 'is_representative', 'risk', 'subrisk', 'coord_x', 'coord_y'])
    return frame.astype({'risk': 'Int64', 'subrisk': 'Int64'})
