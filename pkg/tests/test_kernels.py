"""Numba kernels and their numpy fallbacks must agree."""
import numpy as np
import pytest

from toothseg import _accel
from toothseg.geometry import delaunay
from toothseg.kernels import gaussian_fill, locate_points, rasterize_tets, tet_barycentric_operators

pytestmark = pytest.mark.skipif(not _accel.HAVE_NUMBA, reason="numba not installed")


@pytest.fixture
def both_paths():
    prev = _accel.numba_enabled()

    def run(fn):
        _accel.use_numba(True)
        a = fn()
        _accel.use_numba(False)
        b = fn()
        _accel.use_numba(prev)
        return a, b

    yield run
    _accel.use_numba(prev)


@pytest.mark.parametrize("squared", [True, False])
def test_gaussian_fill_paths_agree(both_paths, squared):
    def fill():
        out = np.zeros((20, 17, 9), dtype=np.float32)
        gaussian_fill(out, (3.3, 15.9, 4.5), (3, 16, 4), 1.7, 6 * 1.7, squared)
        gaussian_fill(out, (18.0, 0.2, 8.9), (18, 0, 8), 0.6, 3.6, squared)
        return out

    a, b = both_paths(fill)
    np.testing.assert_allclose(a, b, rtol=1e-6, atol=1e-12)
    assert (a > 0).sum() == (b > 0).sum()


def test_locate_paths_agree(both_paths):
    rng = np.random.default_rng(0)
    pts = rng.normal(size=(20, 3))
    tri = delaunay(pts)
    inv, anchor = tet_barycentric_operators(tri.vertices, tri.tetrahedra)
    q = rng.normal(size=(5000, 3))
    a, b = both_paths(lambda: locate_points(q, inv, anchor, 1e-9))
    assert np.array_equal(a, b)
    assert (a >= 0).any() and (a < 0).any()


def test_rasterize_paths_agree(both_paths):
    rng = np.random.default_rng(1)
    pts = rng.uniform(-2, 18, size=(15, 3))
    tri = delaunay(pts)
    a, b = both_paths(lambda: rasterize_tets((16, 14, 12), tri.vertices, tri.tetrahedra, 1e-9))
    assert np.array_equal(a, b)
    assert a.any()


def test_env_flag_parsing(monkeypatch):
    import importlib

    monkeypatch.setenv("TOOTHSEG_USE_NUMBA", "0")
    mod = importlib.reload(_accel)
    try:
        assert not mod.numba_enabled()
    finally:
        monkeypatch.delenv("TOOTHSEG_USE_NUMBA")
        importlib.reload(_accel)
