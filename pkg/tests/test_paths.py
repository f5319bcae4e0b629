import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from fsdemc.paths import GridError, Path, Segment, SegmentRing, TimeGrid, eval_segment, segment_at, steps_for

finite = st.floats(-100, 100, allow_nan=False)


def index_path(n, dt=1.0, t0=0.0, d=1):
    vals = np.repeat(np.arange(n + 1, dtype=float)[:, None], d, axis=1)
    return Path(TimeGrid(t0, dt, n), vals)


class TestTimeGrid:
    @given(finite, st.floats(1e-4, 10), st.integers(0, 10_000))
    def test_node_is_direct_product(self, t0, dt, k):
        g = TimeGrid(t0, dt, max(k, 1))
        assert g.node(k) == t0 + k * dt
        assert g.nodes()[min(k, g.n_steps)] == t0 + min(k, g.n_steps) * dt

    def test_no_accumulated_rounding(self):
        g = TimeGrid(0.0, 0.1, 1000)
        acc = 0.0
        for _ in range(1000):
            acc += 0.1
        assert acc != 100.0 and g.t_end == 1000 * 0.1

    @pytest.mark.parametrize("dt,n", [(0.0, 3), (-1.0, 3), (0.1, -1)])
    def test_invalid(self, dt, n):
        with pytest.raises(GridError):
            TimeGrid(0.0, dt, n)

    def test_index_of(self):
        g = TimeGrid(0.0, 0.01, 200)
        assert g.index_of(1.0) == 100
        with pytest.raises(GridError):
            g.index_of(1.005)
        with pytest.raises(GridError):
            g.index_of(2.01)


def test_steps_for():
    assert steps_for(1.0, 0.01) == 100
    assert steps_for(0.0, 0.3) == 0
    with pytest.raises(GridError):
        steps_for(1.0, 0.3)


def test_path_length_checked():
    with pytest.raises(ValueError):
        Path(TimeGrid(0, 1, 3), np.zeros(3))
    p = Path(TimeGrid(0, 1, 3), np.zeros((4, 2)))
    assert p.dim == 2 and not p.values.flags.writeable


class TestSegment:
    def test_length(self):
        s = Segment(1.0, 0.25, np.zeros(5))
        assert s.lag == 4 and s.values.shape == (5, 1)
        np.testing.assert_allclose(s.thetas(), [-1, -0.75, -0.5, -0.25, 0])

    def test_misaligned_tau(self):
        with pytest.raises(GridError):
            Segment(1.0, 0.3, np.zeros(4))

    def test_wrong_count(self):
        with pytest.raises(ValueError):
            Segment(1.0, 0.5, np.zeros(4))

    def test_tau_zero_is_single_state(self):
        s = Segment(0.0, 0.1, [[1.0, 2.0]])
        assert s.lag == 0 and s.dim == 2
        np.testing.assert_array_equal(s.at(0.0), [1.0, 2.0])


class TestSegmentAt:
    def test_constant_path(self):
        p = Path(TimeGrid(0, 0.5, 10), np.full((11, 2), 3.0))
        s = segment_at(p, 4.0, 2.0)
        np.testing.assert_array_equal(s.values, 3.0)

    def test_tau_zero(self):
        p = index_path(10)
        s = segment_at(p, 7.0, 0.0)
        assert s.values.shape == (1, 1) and s.values[0, 0] == 7.0

    def test_index_bookkeeping(self):
        s = segment_at(index_path(10), 5.0, 2.0)
        np.testing.assert_array_equal(s.values[:, 0], [3, 4, 5])

    def test_window_out_of_range(self):
        with pytest.raises(GridError):
            segment_at(index_path(10), 1.0, 2.0)

    def test_misaligned(self):
        with pytest.raises(GridError):
            segment_at(index_path(10), 5.5, 2.0)
        with pytest.raises(GridError):
            segment_at(index_path(10, dt=0.5), 5.0, 1.25)

    @given(st.integers(6, 40), st.integers(0, 5), st.data())
    def test_ring_shift_property(self, n, lag, data):
        vals = data.draw(st.lists(finite, min_size=n + 1, max_size=n + 1))
        p = Path(TimeGrid(0.0, 0.1, n), np.array(vals))
        k = data.draw(st.integers(lag, n - 1))
        s = segment_at(p, 0.1 * k, 0.1 * lag)
        s2 = segment_at(p, 0.1 * (k + 1), 0.1 * lag)
        np.testing.assert_array_equal(s.values[1:], s2.values[:-1])
        assert s2.values[-1, 0] == vals[k + 1]


class TestEvalSegment:
    def test_nodes(self):
        s = Segment(2.0, 1.0, [[1.0], [5.0], [7.0]])
        assert eval_segment(s, 0.0)[0] == 7.0
        assert eval_segment(s, -2.0)[0] == 1.0

    def test_midpoint(self):
        assert eval_segment(Segment(1.0, 1.0, [[0.0], [2.0]]), -0.5)[0] == 1.0

    def test_out_of_range(self):
        s = Segment(1.0, 0.5, np.zeros(3))
        for th in (0.1, -1.5):
            with pytest.raises(GridError):
                eval_segment(s, th)

    @given(st.integers(1, 20), st.data())
    def test_exact_at_nodes_and_linear_between(self, lag, data):
        dt = 0.25
        vals = np.array(data.draw(st.lists(finite, min_size=lag + 1, max_size=lag + 1)))
        s = Segment(lag * dt, dt, vals)
        for i, th in enumerate(s.thetas()):
            assert eval_segment(s, th)[0] == vals[i]
        i = data.draw(st.integers(0, lag - 1))
        u = data.draw(st.floats(0, 1))
        th = -lag * dt + (i + u) * dt
        want = (1 - u) * vals[i] + u * vals[i + 1]
        assert eval_segment(s, min(th, 0.0))[0] == pytest.approx(want, abs=1e-9 * (1 + np.abs(vals).max()))


class TestSegmentRing:
    @given(st.integers(1, 6), st.integers(1, 30), st.integers(0, 2**31))
    def test_matches_sliding_window(self, L, steps, seed):
        g = np.random.default_rng(seed)
        init = g.normal(size=(3, L, 2))
        ring = SegmentRing(init)
        hist = list(init.transpose(1, 0, 2))
        for _ in range(steps):
            x = g.normal(size=(3, 2))
            ring.push(x)
            hist.append(x)
            np.testing.assert_array_equal(ring.window(), np.stack(hist[-L:], axis=1))
            np.testing.assert_array_equal(ring.newest(), x)

    def test_reorder(self):
        init = np.arange(6, dtype=float).reshape(3, 2, 1)
        ring = SegmentRing(init)
        ring.push(np.array([[10.0], [11.0], [12.0]]))
        ring.reorder(np.array([2, 2, 0]))
        np.testing.assert_array_equal(ring.window()[:, :, 0], [[5, 12], [5, 12], [1, 10]])
