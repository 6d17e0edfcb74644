import numpy as np
from scipy import stats

from gwspeed import rng


def test_units_are_pure_functions_of_key_and_counter():
    k = rng.stream_key(42, 0, rng.WALK)
    a = np.empty(1000)
    rng.fill_units(k, 0, a)
    b = np.array([rng.unit(k, i) for i in range(1000)])
    assert np.array_equal(a, b)
    assert np.all((a >= 0) & (a < 1))
    c = np.empty(10)
    rng.fill_units(k, 500, c)
    assert np.array_equal(c, a[500:510])


def test_streams_look_uniform_and_unrelated():
    k1 = rng.stream_key(1, 0, rng.TREE)
    k2 = rng.stream_key(1, 1, rng.TREE)
    k3 = rng.stream_key(1, 0, rng.WALK)
    assert len({int(k1), int(k2), int(k3)}) == 3
    x, y = np.empty(20000), np.empty(20000)
    rng.fill_units(k1, 0, x)
    rng.fill_units(k2, 0, y)
    assert stats.kstest(x, "uniform").pvalue > 1e-3
    assert abs(np.corrcoef(x, y)[0, 1]) < 0.03


def test_stream_cursor_and_numpy_generator_are_reproducible():
    s = rng.Stream.from_seed(7, 3)
    u = s.uniforms(5)
    assert s.counter == 5
    assert np.array_equal(u, rng.Stream.from_seed(7, 3).uniforms(5))
    g1 = rng.Stream.from_seed(7).numpy_generator().integers(0, 100, 10)
    g2 = rng.Stream.from_seed(7).numpy_generator().integers(0, 100, 10)
    assert np.array_equal(g1, g2)
