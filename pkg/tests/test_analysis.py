import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from kgssl.analysis import (
    ExperimentReport,
    corr,
    distance_matrices,
    embedding_char_correlation,
    group_report,
    metric_table,
    pairwise_distances,
    rmse,
    seriate,
    table_means,
)

finite = st.floats(-100, 100, allow_nan=False)


class TestRmse:
    def test_examples(self):
        assert rmse([1, 2, 3], [1, 2, 3]) == 0.0
        assert rmse([1.5, 2.5], [1, 2]) == 0.5
        assert rmse([0, 0], [3, 4]) == pytest.approx(math.sqrt(12.5), abs=1e-12)
        assert rmse([0, 0], [3, 4]) == pytest.approx(3.5355, abs=1e-4)

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            rmse([1, 2], [1])


class TestCorr:
    def test_examples(self):
        v = np.array([0.3, -1.0, 2.0, 5.0])
        assert corr(v, v) == pytest.approx(1.0, abs=1e-15)
        assert corr(v, -v) == pytest.approx(-1.0, abs=1e-15)

    @given(hnp.arrays(float, 6, elements=finite), st.floats(0.01, 50), st.floats(-50, 50))
    @settings(max_examples=50, deadline=None)
    def test_affine(self, v, a, b):
        if np.ptp(v) < 1e-3:
            return
        assert corr(v, a * v + b) == pytest.approx(1.0, abs=1e-9)
        assert -1.0 <= corr(v, np.roll(v, 1)) <= 1.0

    def test_constant(self):
        with pytest.raises(ValueError):
            corr([1, 1, 1], [1, 2, 3])


class TestTables:
    def test_metric_table_marks_constant(self):
        est = np.array([[1.0, 5.0], [2.0, 5.0], [3.0, 5.0]])
        truth = np.array([[1.0, 1.0], [2.0, 2.0], [3.0, 4.0]])
        rows = metric_table(est, truth, ["a", "b"])
        assert rows[0] == {"characteristic": "a", "rmse": 0.0, "corr": pytest.approx(1.0)}
        assert math.isnan(rows[1]["corr"])
        assert table_means(rows)["corr"] == pytest.approx(1.0)

    def test_group_fixture(self):
        # columns built so that per-column correlations are +1, -1, +1, +1
        t = np.array([[0.0, 1, 2, 3], [1, 0, 4, 1], [2, 5, 1, 0], [3, 2, 0, 2]])
        est = np.column_stack([t[:, 0], -t[:, 1], 2 * t[:, 2] + 1, t[:, 3]])
        names = ["c1", "s1", "s2", "g1"]
        groups = {"c1": "C", "s1": "S", "s2": "S", "g1": "G"}
        rep = group_report(est, t, names, groups)
        assert rep["groups"] == pytest.approx({"C": 1.0, "G": 1.0, "S": 0.0})
        assert rep["mean_of_groups"] == pytest.approx(2 / 3)
        assert rep["mean_all"] == pytest.approx(0.5)

    def test_group_perfect_and_uncovered(self):
        t = np.random.default_rng(0).normal(size=(10, 3))
        rep = group_report(t, t, ["a", "b", "c"], {"a": "C", "b": "S", "c": "G"})
        assert all(v == pytest.approx(1.0) for v in rep["groups"].values())
        with pytest.raises(ValueError, match="c"):
            group_report(t, t, ["a", "b", "c"], {"a": "C", "b": "S"})


class TestDistances:
    def test_three_points(self):
        pts = np.array([[0.0, 0.0], [3.0, 4.0], [1.0, 1.0]])
        d = pairwise_distances(pts)
        assert d[0, 1] == pytest.approx(5.0) and d[0, 2] == pytest.approx(math.sqrt(2))
        assert d[1, 2] == pytest.approx(math.sqrt(13))

    @given(hnp.arrays(float, (6, 3), elements=finite))
    @settings(max_examples=40, deadline=None)
    def test_metric_properties(self, m):
        d = pairwise_distances(m)
        assert np.all(np.diag(d) == 0) and np.array_equal(d, d.T) and np.all(d >= 0)
        for i in range(6):
            for j in range(6):
                assert np.all(d[i, j] <= d[i, :] + d[:, j] + 1e-9)

    def test_duplicates_and_ordering(self):
        z = np.array([[0.0], [10.0], [0.0], [5.0]])
        h = np.random.default_rng(1).normal(size=(4, 2))
        dz, dh, order = distance_matrices(z, h)
        assert sorted(order.tolist()) == [0, 1, 2, 3]
        assert np.allclose(dz, pairwise_distances(z)[np.ix_(order, order)])
        assert np.allclose(dh, pairwise_distances(h)[np.ix_(order, order)])
        assert pairwise_distances(z)[0, 2] == 0.0

    def test_seriation_chain(self):
        # medoid is 2.0 (index 4); its neighbours 1.0 and 3.0 tie, lower index (3.0) wins
        x = np.array([[3.0], [0.0], [4.0], [1.0], [2.0]])
        assert seriate(pairwise_distances(x)).tolist() == [4, 0, 2, 3, 1]

    def test_too_few(self):
        with pytest.raises(ValueError):
            distance_matrices(np.zeros((1, 2)), np.zeros((1, 3)))


class TestEmbeddingCorrelation:
    def test_duplicated_column(self):
        rng = np.random.default_rng(3)
        z = rng.normal(size=(50, 2))
        h = np.column_stack([rng.normal(size=50), z[:, 1], rng.normal(size=50)])
        c, ranking = embedding_char_correlation(h, z)
        assert c.shape == (2, 3) and c[1, 1] == pytest.approx(1.0, abs=1e-12)
        assert ranking[0] == 1 and sorted(ranking.tolist()) == [0, 1, 2]

    def test_independent_columns(self):
        rng = np.random.default_rng(4)
        c, _ = embedding_char_correlation(rng.normal(size=(10_000, 8)), rng.normal(size=(10_000, 3)))
        assert np.mean(np.abs(c)) < 0.05

    def test_constant_column_marked(self):
        rng = np.random.default_rng(5)
        h = np.column_stack([np.ones(20), rng.normal(size=20)])
        c, ranking = embedding_char_correlation(h, rng.normal(size=(20, 2)))
        assert np.all(np.isnan(c[:, 0])) and ranking.tolist() == [1, 0]


def test_report_write(tmp_path):
    rng = np.random.default_rng(0)
    z, est, h = rng.normal(size=(5, 2)), rng.normal(size=(5, 2)), rng.normal(size=(5, 3))
    dz, dh, order = distance_matrices(z, h)
    c, rank = embedding_char_correlation(h, z)
    rep = ExperimentReport(
        metrics=metric_table(est, z, ["a", "b"]), distance_z=dz, distance_h=dh, ordering=[f"e{i}" for i in order],
        embedding_corr=c, embedding_ranking=rank, char_names=("a", "b"), provenance={"seed": 0}, extra={"x": float("nan")},
    )
    rep.write(tmp_path)
    data = json.loads((tmp_path / "report.json").read_text())
    assert data["x"] is None and data["metric_means"]["rmse"] == pytest.approx(table_means(rep.metrics)["rmse"])
    lines = (tmp_path / "embedding_correlation.csv").read_text().splitlines()
    assert lines[0] == "," + ",".join(f"dim_{k}" for k in rank)
    for name in ("metrics.csv", "distance_characteristics.csv", "distance_embeddings.csv"):
        assert (tmp_path / name).exists()
