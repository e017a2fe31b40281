import itertools
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from dgan.anchors import (
    AnchorSet,
    _kmeans_pp,
    kmeans_anchors,
    kmeans_objective,
    lloyd,
    nearest_anchor,
    normalize_future,
    traj_distance,
    uniform_sample_anchors,
)
from dgan.errors import InsufficientData, ParseError, ShapeError
from dgan.scene import AgentClass, Track, agent_frame_at

from helpers import rigid

V, C = AgentClass.VEHICLE, AgentClass.CYCLIST


def partition_optimum(x):
    """Brute force over every 2-partition of the rows of ``x``."""
    best = math.inf
    for bits in itertools.product([False, True], repeat=len(x)):
        m = np.array(bits)
        if m.all() or not m.any():
            continue
        cost = ((x[m] - x[m].mean(0)) ** 2).sum() + ((x[~m] - x[~m].mean(0)) ** 2).sum()
        best = min(best, cost)
    return best


class TestNormalizeFuture:
    def test_straight_along_heading(self):
        tr = Track.from_points("a", [(t, 0.0, float(t)) for t in range(1, 8)], V)
        y = normalize_future(tr, agent_frame_at(tr, 3), 3, 4)
        assert np.allclose(y, [(1, 0), (2, 0), (3, 0), (4, 0)], atol=1e-12)

    def test_stationary(self):
        tr = Track.from_points("a", [(1, 0.0, 0.0), (2, 1.0, 0.0)] + [(t, 1.0, 0.0) for t in range(3, 6)], V)
        assert not normalize_future(tr, agent_frame_at(tr, 2), 2, 3).any()

    def test_wrong_length(self):
        tr = Track.from_points("a", [(1, 0.0, 0.0), (2, 1.0, 0.0), (3, 2.0, 0.0)], V)
        with pytest.raises(ShapeError):
            normalize_future(tr, agent_frame_at(tr, 2), 2, 3)

    def test_rigid_invariance(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            xy = np.cumsum(rng.normal(0.5, 1.0, (9, 2)), axis=0)
            f = rigid(rng.uniform(-math.pi, math.pi), *rng.uniform(-100, 100, 2))
            a = Track("a", np.arange(1, 10), xy, V)
            b = Track("a", np.arange(1, 10), f(xy), V)
            ya = normalize_future(a, agent_frame_at(a, 4), 4, 5)
            yb = normalize_future(b, agent_frame_at(b, 4), 4, 5)
            assert np.abs(ya - yb).max() <= 1e-9


class TestDistance:
    def test_examples(self):
        y = np.random.default_rng(0).normal(size=(5, 2))
        assert traj_distance(y, y) == 0.0
        assert traj_distance([(0, 0)], [(3, 4)]) == 25.0
        assert traj_distance([(1, 0), (2, 0)], [(0, 0), (0, 0)]) == 5.0

    def test_length_mismatch(self):
        with pytest.raises(ShapeError):
            traj_distance(np.zeros((2, 2)), np.zeros((3, 2)))

    # coordinates on a 1e-6 grid: squared gaps of ~1e-260 underflow to zero in float64
    coord = st.floats(-50, 50).map(lambda v: round(v, 6))
    traj = st.lists(st.tuples(coord, coord), min_size=3, max_size=3)

    @given(traj, traj, traj)
    def test_properties(self, x, y, z):
        assert traj_distance(x, y) == traj_distance(y, x) >= 0
        assert (traj_distance(x, y) == 0) == (np.asarray(x) == np.asarray(y)).all()
        assert traj_distance(x, z) <= 2 * (traj_distance(x, y) + traj_distance(y, z)) + 1e-9


class TestKMeans:
    def test_four_point_example(self):
        fut = np.array([[(0, 0)], [(0, 0.1)], [(10, 0)], [(10, 0.1)]], dtype=float)
        a = kmeans_anchors({V: fut}, 2, seed=0).anchors[V][:, 0]
        got = sorted(map(tuple, np.round(a, 12)))
        assert got == [(0.0, 0.05), (10.0, 0.05)]

    def test_exhaustive_partition_oracle(self):
        rng = np.random.default_rng(11)
        for trial in range(300):
            n = int(rng.integers(2, 9))
            t = int(rng.integers(1, 4))
            fut = rng.normal(size=(n, t, 2)) * rng.choice([1.0, 5.0])
            a = kmeans_anchors({V: fut}, 2, seed=trial).anchors[V].reshape(2, -1)
            x = fut.reshape(n, -1)
            obj = ((x[:, None] - a[None]) ** 2).sum(-1).min(axis=1).sum()
            assert obj <= partition_optimum(x) * (1 + 1e-9) + 1e-12, trial

    def test_k_equals_distinct_count(self):
        base = np.random.default_rng(2).normal(size=(4, 3, 2))
        fut = np.concatenate([base, base[:2]])
        a = kmeans_anchors({C: fut}, 4).anchors[C]
        assert sorted(map(lambda r: tuple(r.ravel()), a)) == sorted(map(lambda r: tuple(r.ravel()), base))

    def test_lloyd_monotone(self):
        rng = np.random.default_rng(3)
        for _ in range(20):
            x = rng.normal(size=(60, 6))
            _, _, trace = lloyd(x, _kmeans_pp(x, 5, rng))
            assert all(b <= a + 1e-9 for a, b in zip(trace, trace[1:]))

    def test_deterministic_and_valid(self):
        fut = np.cumsum(np.random.default_rng(4).normal(size=(80, 5, 2)), axis=1)
        a = kmeans_anchors({V: fut}, 6, seed=9)
        b = kmeans_anchors({V: fut}, 6, seed=9)
        assert np.array_equal(a.anchors[V], b.anchors[V])
        assert sum(a.metadata["populations"]["Vehicle"]) == 80
        x = fut.reshape(80, -1)
        centers = a.anchors[V].reshape(6, -1)
        labels = ((x[:, None] - centers[None]) ** 2).sum(-1).argmin(1)
        assert np.allclose(centers, [x[labels == j].mean(0) for j in range(6)])
        assert kmeans_objective(x, centers, labels) > 0

    def test_insufficient(self):
        with pytest.raises(InsufficientData):
            kmeans_anchors({V: np.zeros((3, 2, 2)) + np.arange(3)[:, None, None]}, 4)
        with pytest.raises(InsufficientData):
            kmeans_anchors({V: np.zeros((5, 2, 2))}, 2)


class TestUniform:
    def fut(self):
        return np.random.default_rng(5).normal(size=(12, 3, 2))

    def test_whole_population(self):
        fut = self.fut()
        assert np.array_equal(uniform_sample_anchors({V: fut}, 12).anchors[V], fut)

    def test_same_seed_same_subset(self):
        fut = self.fut()
        a = uniform_sample_anchors({V: fut}, 5, seed=3).anchors[V]
        assert np.array_equal(a, uniform_sample_anchors({V: fut}, 5, seed=3).anchors[V])
        rows = {tuple(r.ravel()) for r in fut}
        assert all(tuple(r.ravel()) in rows for r in a) and len({tuple(r.ravel()) for r in a}) == 5

    def test_insufficient(self):
        with pytest.raises(InsufficientData):
            uniform_sample_anchors({V: self.fut()}, 13)


class TestNearest:
    def anchors(self, k=20, t=4, seed=0):
        return AnchorSet({V: np.random.default_rng(seed).normal(size=(k, t, 2))})

    def test_exact_match(self):
        a = self.anchors()
        assert nearest_anchor(a, V, a.anchors[V][3]) == 3

    def test_tie_lowest(self):
        a = AnchorSet({V: np.array([[(1.0, 0.0)], [(-1.0, 0.0)], [(0.0, 1.0)]])})
        assert nearest_anchor(a, V, [(0.0, 0.0)]) == 0

    def test_exhaustive_scan(self):
        rng = np.random.default_rng(1)
        for trial in range(1000):
            a = self.anchors(seed=trial)
            y = rng.normal(size=(4, 2))
            dists = [traj_distance(y, anchor) for anchor in a.anchors[V]]
            assert nearest_anchor(a, V, y) == dists.index(min(dists))

    def test_shift_invariance(self):
        rng = np.random.default_rng(2)
        for trial in range(100):
            a = self.anchors(seed=trial)
            y = rng.normal(size=(4, 2))
            shift = rng.normal(0, 10, 2)
            moved = AnchorSet({V: a.anchors[V] + shift})
            assert nearest_anchor(a, V, y) == nearest_anchor(moved, V, y + shift)

    def test_missing_class(self):
        with pytest.raises(InsufficientData):
            nearest_anchor(self.anchors(), C, np.zeros((4, 2)))


def test_json_round_trip(tmp_path):
    a = AnchorSet({V: np.random.default_rng(0).normal(size=(3, 2, 2)), C: np.ones((1, 2, 2))}, {"method": "kmeans"})
    a.save(tmp_path / "a.json")
    b = AnchorSet.load(tmp_path / "a.json")
    assert b.classes == [V, C] and b.metadata == {"method": "kmeans"}
    assert all(np.array_equal(a.anchors[c], b.anchors[c]) for c in a.classes)
    (tmp_path / "bad.json").write_text('{"anchors": {"Horse": [[[0, 0]]]}}')
    with pytest.raises(ParseError):
        AnchorSet.load(tmp_path / "bad.json")


def test_mismatched_horizons():
    with pytest.raises(ShapeError):
        AnchorSet({V: np.zeros((1, 2, 2)), C: np.zeros((1, 3, 2))})
