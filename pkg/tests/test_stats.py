import numpy as np

from foliated_paths.stats import RunningStats, map_chunks, merge_all, reduce_chunks, resolve_threads


def test_merged_moments_match_numpy():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((1000, 3)) * [1, 5, 0.1] + [0, 2, -1]
    parts = [RunningStats.of(x[a:b]) for a, b in [(0, 10), (10, 511), (511, 1000)]]
    st = merge_all(parts)
    np.testing.assert_allclose(st.mean, x.mean(0), rtol=1e-13)
    np.testing.assert_allclose(st.stderr, x.std(0, ddof=1) / np.sqrt(1000), rtol=1e-12)


def test_chunked_reduction_is_thread_independent():
    def kernel(start, count):
        rng = np.random.Generator(np.random.Philox(key=[3, start]))
        return {"x": RunningStats.of(rng.standard_normal(count))}

    ref = reduce_chunks(map_chunks(kernel, 5000, 256, threads=1))["x"]
    for t in (2, 4, 8):
        other = reduce_chunks(map_chunks(kernel, 5000, 256, threads=t))["x"]
        assert other.mean.tobytes() == ref.mean.tobytes()
        assert other.stderr.tobytes() == ref.stderr.tobytes()


def test_thread_resolution(monkeypatch):
    monkeypatch.setenv("FOLIATED_PATHS_THREADS", "3")
    assert resolve_threads() == 3
    assert resolve_threads(2) == 2
