import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mild.hsidata import AbundanceStack, EndmemberSet, SequenceCube, lmm_reconstruct, spectral_angle
from mild.metrics import (
    EvalReport,
    align_endmembers,
    evaluate,
    export_maps,
    nrmse_a,
    nrmse_y,
    quantize,
    read_pgm,
)


def brute_nrmse_a(truth, est):
    T, N, P = truth.shape
    total = 0.0
    for t in range(T):
        frame = 0.0
        for n in range(N):
            for p in range(P):
                frame += truth[t, n, p] ** 2
        for n in range(N):
            d = 0.0
            for p in range(P):
                d += (truth[t, n, p] - est[t, n, p]) ** 2
            total += d / frame
    return math.sqrt(total / T)


def brute_nrmse_y(y, a, e):
    T, N, L = y.shape
    P = a.shape[2]
    total = 0.0
    for t in range(T):
        for n in range(N):
            num = den = 0.0
            for l in range(L):
                rec = 0.0
                for p in range(P):
                    rec += a[t, n, p] * e[t][p, l]
                num += (y[t, n, l] - rec) ** 2
                den += y[t, n, l] ** 2
            total += num / den
    return math.sqrt(total / T)


def random_instance(rng):
    T, N, P, L = (int(v) for v in rng.integers(1, 5, 4))
    P = max(P, 2)
    truth = rng.dirichlet(np.ones(P), (T, N))
    est = rng.dirichlet(np.ones(P), (T, N))
    e = [rng.uniform(0, 1, (P, L)) for _ in range(T)]
    y = rng.uniform(0.1, 1, (T, N, L))
    return truth, est, e, y


def test_metric_oracles_100_instances():
    rng = np.random.default_rng(2024)
    for _ in range(100):
        truth, est, e, y = random_instance(rng)
        T, N, _ = truth.shape
        A, B = AbundanceStack(truth), AbundanceStack(est)
        assert abs(nrmse_a(A, B) - brute_nrmse_a(truth, est)) <= 1e-12
        cube = SequenceCube.from_pixels(y, 1, N)
        es = EndmemberSet(e[0], tuple(e))
        assert abs(nrmse_y(cube, B, es) - brute_nrmse_y(y, est, e)) <= 1e-12


def test_nrmse_a_examples():
    a = AbundanceStack(np.array([[[1.0, 0.0]]]))
    b = AbundanceStack(np.array([[[0.0, 1.0]]]))
    assert nrmse_a(a, a) == 0.0
    assert math.isclose(nrmse_a(a, b), math.sqrt(2.0), rel_tol=1e-15)
    with pytest.raises(ZeroDivisionError):
        nrmse_a(AbundanceStack(np.zeros((1, 1, 2))), a)
    with pytest.raises(ValueError):
        nrmse_a(a, AbundanceStack(np.ones((1, 2, 2))))


def test_nrmse_y_examples():
    cube = SequenceCube(np.array([[[[1.0, 0.0]]]]))
    a = AbundanceStack(np.array([[[0.5, 0.5]]]))
    zero_e = EndmemberSet(np.zeros((2, 2)))
    assert nrmse_y(cube, a, zero_e) == 1.0
    with pytest.raises(ZeroDivisionError):
        nrmse_y(SequenceCube(np.zeros((1, 1, 1, 2))), a, zero_e)


def test_nrmse_y_exact_factors():
    rng = np.random.default_rng(0)
    a = AbundanceStack(rng.dirichlet(np.ones(3), (2, 12)), 3, 4)
    e = EndmemberSet(rng.uniform(0.1, 1, (3, 9)), tuple(rng.uniform(0.1, 1, (3, 9)) for _ in range(2)))
    assert nrmse_y(lmm_reconstruct(a, e), a, e) < 1e-10


def test_align_identity_and_swap():
    rng = np.random.default_rng(1)
    e = rng.uniform(0.1, 1, (4, 20))
    assert align_endmembers(e, e) == (0, 1, 2, 3)
    assert align_endmembers(e, e[[1, 0, 2, 3]]) == (1, 0, 2, 3)
    with pytest.raises(ValueError):
        align_endmembers(rng.uniform(size=(11, 5)), rng.uniform(size=(11, 5)))
    with pytest.raises(ValueError):
        align_endmembers(e, e[:3])


def test_align_ties_take_lexicographic_minimum():
    e = np.array([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
    assert align_endmembers(e, e) == (0, 1, 2)


@given(st.integers(0, 10**6))
@settings(max_examples=40, deadline=None)
def test_align_matches_exhaustive_oracle_p3(seed):
    rng = np.random.default_rng(seed)
    truth = rng.uniform(0.1, 1, (3, 15))
    est = truth[rng.permutation(3)] + rng.normal(0, 0.1, (3, 15))
    costs = {perm: sum(spectral_angle(truth[i], est[perm[i]]) for i in range(3))
             for perm in itertools.permutations(range(3))}
    best = min(costs.values())
    perm = align_endmembers(truth, est)
    assert costs[perm] == best
    assert perm == min(p for p, c in costs.items() if c == best)


def test_hungarian_branch_agrees_with_search():
    rng = np.random.default_rng(7)
    truth = rng.uniform(0.1, 1, (8, 30))
    perm = rng.permutation(8)
    est = truth[perm] + rng.normal(0, 0.01, (8, 30))
    got = align_endmembers(truth, est)
    assert [int(perm[i]) for i in got] == list(range(8))


@given(st.integers(0, 10**6))
@settings(max_examples=25, deadline=None)
def test_aligned_score_is_minimal_p3(seed):
    # with well-separated endmembers, the angle alignment is also the NRMSE-optimal relabelling
    rng = np.random.default_rng(seed)
    truth_e = np.eye(3).repeat(4, axis=1) + 0.05
    perm = tuple(int(i) for i in rng.permutation(3))
    truth = AbundanceStack(rng.dirichlet(np.ones(3), (2, 10)))
    noisy = np.clip(truth.values + rng.normal(0, 0.02, truth.values.shape), 0, None)
    est = AbundanceStack(noisy[:, :, np.argsort(perm)])
    found = align_endmembers(truth_e, truth_e[list(np.argsort(perm))])
    aligned = nrmse_a(truth, est.permuted(found))
    for p in itertools.permutations(range(3)):
        assert aligned <= nrmse_a(truth, est.permuted(p)) + 1e-15


def test_evaluate_report():
    rng = np.random.default_rng(3)
    e = rng.uniform(0.1, 1, (3, 10))
    a = AbundanceStack(rng.dirichlet(np.ones(3), (2, 6)))
    cube = lmm_reconstruct(a, EndmemberSet.constant(e, 2))
    perm = [2, 0, 1]
    rep = evaluate(a, a.permuted(np.argsort(perm)), cube, EndmemberSet.constant(e[np.argsort(perm)], 2),
                   truth_e=EndmemberSet(e))
    assert rep.nrmse_a < 1e-12 and rep.nrmse_y < 1e-10
    assert len(rep.per_time_a) == 2 and len(rep.per_time_y) == 2
    with pytest.raises(ValueError):
        EvalReport(float("nan"), 0.0, (), (), ())
    with pytest.raises(ValueError):
        evaluate(a, a, cube, EndmemberSet.constant(e, 2))


def test_export_maps(tmp_path):
    vals = np.zeros((2, 6, 2))
    vals[:, :, 0] = 1.0
    vals[1, 3] = [0.5, 0.5]
    files = export_maps(AbundanceStack(vals), 2, 3, tmp_path)
    assert len(files) == 4
    assert np.all(read_pgm(tmp_path / "abund_t0_e0.pgm") == 255)
    assert np.all(read_pgm(tmp_path / "abund_t0_e1.pgm") == 0)
    img = read_pgm(tmp_path / "abund_t1_e1.pgm")
    assert img.shape == (2, 3) and img[1, 0] == 128
    with pytest.raises(ValueError):
        export_maps(AbundanceStack(vals), 4, 4, tmp_path)


@given(st.integers(0, 10**6))
@settings(max_examples=10, deadline=None)
def test_map_round_trip_recovers_quantized(seed):
    import tempfile
    from pathlib import Path

    rng = np.random.default_rng(seed)
    a = AbundanceStack(rng.dirichlet(np.ones(2), (1, 20)))
    with tempfile.TemporaryDirectory() as d:
        export_maps(a, 4, 5, d)
        for p in range(2):
            img = read_pgm(Path(d) / f"abund_t0_e{p}.pgm")
            assert np.array_equal(img.ravel(), quantize(a.values[0, :, p]))
