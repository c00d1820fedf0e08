import numpy as np
import numpy.testing as npt
import pytest
from scipy import sparse
from scipy.sparse import csgraph
from scipy.spatial import distance

from lomaxrace.v1 import interpret
from lomaxrace.v1.errors import ParameterError, UndefinedMetricError
from lomaxrace.v1.datasets import Dataset, ObservationRecord
from lomaxrace.v1.model import LdrParams


def handmade_weights(w, event, X=None):
    w = np.asarray(w, dtype=float)
    n = w.shape[0]
    if X is None:
        X = np.column_stack([np.ones(n), np.arange(n, dtype=float), np.zeros(n)])
    return interpret.SubriskWeights(w, np.array([0, 0, 1])[:w.shape[1]], np.array([0, 1, 0])[:w.shape[1]],
                                    np.asarray(X, dtype=float), np.asarray(event), np.arange(n), 2, 1)


def params():
    beta = [[0.0, 1.0, 0.0, 0.0], [0.0, -1.0, 0.5, 0.0], [0.2, 0.0, 0.0, 1.0]]
    return LdrParams([1.0, 1.5, 2.0], beta, [0, 0, 1], 2, 2)


class TestWeights:

    def test_rows_sum_to_one(self, small_data1, rng):
        w = interpret.subrisk_weights(small_data1, params(), 50, rng)
        uncensored = sum(not rec.is_censored for rec in small_data1)
        assert w.weights.shape == (uncensored, 3)
        npt.assert_allclose(w.weights.sum(axis=1), 1.0)
        assert w.grid().shape == (uncensored, 2, 2)
        assert all(not small_data1[int(i)].is_censored for i in w.subjects)

    def test_all_censored(self, rng):
        data = Dataset([ObservationRecord.censored((1.0, 0.0, 0.0, 0.0), 1.0)], risk_labels=['a', 'b'])
        with pytest.raises(UndefinedMetricError):
            interpret.subrisk_weights(data, params(), 10, rng)

    def test_representatives(self):
        X = [[1.0, 0.0, 0.0], [1.0, 2.0, 2.0], [1.0, 4.0, 0.0]]
        reps = interpret.representatives(handmade_weights([[1.0, 0.0], [0.0, 1.0], [0.5, 0.5]], [0, 0, 0], X))
        npt.assert_allclose(reps.vectors, [[4.0 / 3.0, 0.0], [8.0 / 3.0, 4.0 / 3.0]])
        assert reps.defined.all()

    def test_weightless_atom(self, caplog):
        reps = interpret.representatives(handmade_weights([[1.0, 0.0], [1.0, 0.0]], [0, 0]))
        npt.assert_array_equal(reps.defined, [True, False])
        assert np.all(np.isnan(reps.vectors[1]))
        assert 'no weight' in caplog.text

    def test_assign(self):
        w = handmade_weights([[0.6, 0.2, 0.2], [0.3, 0.3, 0.4], [0.1, 0.1, 0.8]], [0, 0, -1])
        npt.assert_array_equal(interpret.assign_subrisks(w), [0, -1, 2])


class TestIsomapParts:

    def test_floyd_warshall_on_a_path(self):
        # Growing gaps chain each point to its left neighbor; geodesics are |x_i - x_j|.
        x = np.array([0.0, 1.0, 3.0, 6.0, 10.0, 15.0])
        geodesic = interpret.floyd_warshall(interpret.knn_graph(np.column_stack([x, np.zeros(6)]), 1))
        npt.assert_allclose(geodesic, np.abs(np.subtract.outer(x, x)))

    def test_floyd_warshall_dense_input(self, rng):
        d = rng.uniform(1.0, 5.0, size=(6, 6))
        d[rng.random((6, 6)) < 0.4] = np.inf
        d = np.minimum(d, d.T)
        expected = csgraph.shortest_path(np.where(np.isfinite(d), d, 0.0), directed=False)
        npt.assert_allclose(interpret.floyd_warshall(d), expected)

    def test_floyd_warshall_shape(self):
        with pytest.raises(ParameterError):
            interpret.floyd_warshall(np.zeros((2, 3)))

    def test_knn_graph_matches_brute_force(self, rng):
        points = rng.standard_normal((30, 2))
        g = interpret.knn_graph(points, 3)
        assert sparse.issparse(g)
        dense = g.toarray()
        npt.assert_array_equal(dense, dense.T)
        npt.assert_array_equal(np.diag(dense), 0.0)
        d = distance.cdist(points, points)
        np.fill_diagonal(d, np.inf)
        nearest = np.argsort(d, axis=1)[:, :3]
        rows = np.repeat(np.arange(30), 3)
        npt.assert_allclose(dense[rows, nearest.ravel()], d[rows, nearest.ravel()])
        assert np.all((dense > 0).sum(axis=1) >= 3)

    def test_knn_graph_duplicate_points(self):
        points = np.array([[0.0, 0.0], [0.0, 0.0], [2.0, 0.0], [3.0, 0.0]])
        g = interpret.knn_graph(points, 1)
        dense = g.toarray()
        assert 0.0 < dense[0, 1] < 1e-9
        n_components, _ = csgraph.connected_components(g, directed=False)
        assert n_components == 2

    def test_mds_recovers_planar_layout(self, rng):

        points = rng.standard_normal((10, 2))
        coords = interpret.classical_mds(distance.cdist(points, points))
        npt.assert_allclose(distance.pdist(coords), distance.pdist(points), atol=1e-8)
        npt.assert_allclose(coords.mean(axis=0), 0.0, atol=1e-12)


class TestIsomap:

    def test_curve_is_unrolled(self):
        s = np.linspace(0.0, 3.0, 40)
        points = np.column_stack([np.cos(s), np.sin(s), 0.1 * s])
        emb = interpret.isomap_embed(points, 4)
        assert emb.connected
        assert emb.coords.shape == (40, 2)
        # Geodesic order along the curve survives on the first axis.
        first = emb.coords[:, 0]
        assert abs(np.corrcoef(first, s)[0, 1]) > 0.99

    def test_disconnected(self, caplog):
        line = np.column_stack([np.arange(13, dtype=float), np.zeros(13)])
        points = np.vstack([line[:8], 1000.0 + line[8:]])
        emb = interpret.isomap_embed(points, 2)
        assert not emb.connected
        npt.assert_array_equal(emb.included, np.arange(8))
        npt.assert_array_equal(emb.excluded, np.arange(8, 13))
        assert 'disconnected' in caplog.text

    @pytest.mark.parametrize('n,k', [(2, 1), (5, 5)])
    def test_too_few_points(self, n, k):
        with pytest.raises(ParameterError):
            interpret.isomap_embed(np.zeros((n, 2)) + np.arange(n)[:, None], k)

    def test_non_finite(self):
        points = np.ones((6, 2))
        points[0, 0] = np.nan
        with pytest.raises(ParameterError):
            interpret.isomap_embed(points, 2)


class TestEmbedModel:

    def test_frame(self, small_data1, rng):
        emb, weights, reps, assignments = interpret.embed_model(small_data1, params(), 50, rng, 6)
        frame = interpret.embedding_frame(emb, weights, reps, assignments)
        assert list(frame.columns) == ['id', 'is_representative', 'risk', 'subrisk', 'coord_x', 'coord_y']
        assert len(frame) == emb.included.size
        assert str(frame['risk'].dtype) == 'Int64'
        reps_rows = frame[frame['is_representative']]
        assert set(reps_rows['id']) <= {'R1.1', 'R1.2', 'R2.1'}
        subjects = frame[~frame['is_representative']]
        assert subjects['risk'].dropna().isin([1, 2]).all()
        assert assignments.shape == (weights.weights.shape[0],)
