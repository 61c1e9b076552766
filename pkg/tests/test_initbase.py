import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mild.hsidata import AbundanceStack, EndmemberSet, SequenceCube, lmm_reconstruct, validate_abundance
from mild.initbase import ConvergenceError, RankDeficientError, _nnls_gram, fcls_pixel, fcls_stack, vca


def simplex_grid(p, res):
    m = int(round(1 / res))
    if p != 3:
        raise ValueError("grid oracle is written for P = 3")
    i, j = np.meshgrid(np.arange(m + 1), np.arange(m + 1), indexing="ij")
    keep = i + j <= m
    return np.stack([i[keep], j[keep], m - i[keep] - j[keep]], axis=1) / m


def grid_search(Y, E, res=1e-3, chunk=50):
    """Minimum of ||y - a E||^2 over a simplex grid, per pixel."""
    pts = simplex_grid(E.shape[0], res)
    G = E @ E.T
    quad = np.sum((pts @ G) * pts, axis=1)
    best_val = np.empty(len(Y))
    best_pt = np.empty((len(Y), E.shape[0]))
    for s in range(0, len(Y), chunk):
        H = Y[s:s + chunk] @ E.T
        obj = quad[:, None] - 2 * pts @ H.T + np.sum(Y[s:s + chunk] ** 2, axis=1)[None]
        k = np.argmin(obj, axis=0)
        best_val[s:s + chunk] = obj[k, np.arange(obj.shape[1])]
        best_pt[s:s + chunk] = pts[k]
    return best_val, best_pt


def random_mixtures(rng, n, p, l, face_fraction=0.3):
    E = rng.uniform(0.05, 1.0, (p, l))
    A = rng.dirichlet(np.ones(p), n)
    faces = rng.uniform(size=n) < face_fraction
    A[faces, rng.integers(0, p, faces.sum())] = 0.0
    A /= A.sum(axis=1, keepdims=True)
    return E, A


def objective(Y, A, E):
    return np.sum((Y - A @ E) ** 2, axis=1)


def test_fcls_noiseless_recovery_1000_pixels():
    rng = np.random.default_rng(11)
    E, A = random_mixtures(rng, 1000, 3, 25)
    cube = SequenceCube.from_pixels((A @ E)[None], 1, 1000)
    est = fcls_stack(cube, EndmemberSet(E))
    assert np.max(np.abs(est.values[0] - A)) < 1e-5


def test_fcls_matches_grid_oracle_objective():
    rng = np.random.default_rng(5)
    E, A = random_mixtures(rng, 300, 3, 12)
    Y = A @ E + rng.normal(0, 0.05, (300, 12))  # noisy: optimum often on a face
    est = fcls_stack(SequenceCube.from_pixels(Y[None], 1, 300), EndmemberSet(E)).values[0]
    f = objective(Y, est, E)
    g, _ = grid_search(Y, E, 1e-3)
    lam = np.linalg.eigvalsh(E @ E.T).max()
    assert np.all(f <= g + 1e-9)
    assert np.all(g - f <= lam * 3 * 1e-6 + 1e-9)


def test_fcls_pixel_examples():
    E = np.eye(3)
    assert np.allclose(fcls_pixel(np.array([0.2, 0.3, 0.5]), E), [0.2, 0.3, 0.5])
    # outside the simplex: clipped to the nearest face
    a = fcls_pixel(np.array([1.0, 1.0, -1.0]), E)
    assert np.allclose(a, [0.5, 0.5, 0.0], atol=1e-6)
    with pytest.raises(ValueError):
        fcls_pixel(np.ones(3), np.array([[1.0, 0, 0], [2.0, 0, 0], [0, 0, 1.0]]))


@given(st.integers(0, 10**6), st.integers(2, 5))
@settings(max_examples=40, deadline=None)
def test_fcls_output_on_simplex(seed, p):
    rng = np.random.default_rng(seed)
    E = rng.uniform(0, 1, (p, 3 * p))
    Y = rng.uniform(-0.5, 1.5, (2, 7, 3 * p))
    a = fcls_stack(SequenceCube.from_pixels(Y, 1, 7), EndmemberSet(E))
    assert validate_abundance(a).ok
    assert np.all(a.values >= 0)


def test_fcls_workers_identical():
    rng = np.random.default_rng(0)
    E, A = random_mixtures(rng, 40, 3, 10)
    Y = np.stack([A @ E + rng.normal(0, 0.02, (40, 10)) for _ in range(3)])
    cube = SequenceCube.from_pixels(Y, 5, 8)
    e = EndmemberSet.constant(E, 3)
    assert np.array_equal(fcls_stack(cube, e, workers=1).values, fcls_stack(cube, e, workers=3).values)


def test_fcls_dimension_errors():
    cube = SequenceCube(np.ones((2, 1, 2, 4)))
    with pytest.raises(ValueError):
        fcls_stack(cube, EndmemberSet.constant(np.eye(4)[:2], 3))
    with pytest.raises(ValueError):
        fcls_stack(cube, EndmemberSet(np.ones((2, 4))))  # rank deficient


def test_nnls_iteration_cap():
    G = np.array([[1.0, 0.9], [0.9, 1.0]])
    with pytest.raises(ConvergenceError):
        _nnls_gram(G, np.array([1.0, 1.0]), max_iter=0)


# --------------------------------------------------------------------------
# VCA


def pure_pixel_cube(seed, p=3, l=20, n=60, t=2):
    rng = np.random.default_rng(seed)
    E = rng.uniform(0.1, 1.0, (p, l))
    A = rng.dirichlet(np.ones(p) * 2, (t, n))
    A[0, :p] = np.eye(p)  # each endmember appears once pure
    return E, SequenceCube.from_pixels(A @ E, 1, n)


@given(st.integers(0, 10**6))
@settings(max_examples=25, deadline=None)
def test_vca_finds_pure_pixels(seed):
    E, cube = pure_pixel_cube(seed)
    res = vca(cube, 3, seed)
    assert sorted(res.selected) == [(0, 0), (0, 1), (0, 2)]
    for row, (t, n) in zip(res.endmembers, res.selected):
        assert np.array_equal(row, cube.pixels[t, n])


def test_vca_deterministic():
    _, cube = pure_pixel_cube(3)
    a, b = vca(cube, 3, 9), vca(cube, 3, 9)
    assert a.selected == b.selected


def test_vca_rank_deficient():
    y = np.tile(np.linspace(0.1, 1, 10), (2, 1, 5, 1))  # every pixel identical
    with pytest.raises(RankDeficientError):
        vca(SequenceCube(y), 3)
    with pytest.raises(ValueError):
        vca(SequenceCube(y), 20)


def test_vca_fcls_on_exact_mixture():
    E, cube = pure_pixel_cube(4)
    res = vca(cube, 3, 0)
    a = fcls_stack(cube, EndmemberSet(res.endmembers))
    y = lmm_reconstruct(a, EndmemberSet.constant(res.endmembers, cube.t_count))
    assert np.allclose(y.pixels, cube.pixels, atol=1e-8)
