"""Classical baselines: vertex component analysis and fully constrained least squares."""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .hsidata import AbundanceStack, EndmemberSet, SequenceCube
from .rng import Stream

FCLS_DELTA = 1e3


class RankDeficientError(ValueError):
    pass


class ConvergenceError(RuntimeError):
    pass


@dataclass(frozen=True)
class VcaResult:
    endmembers: np.ndarray  # (P, L), rows are actual input pixels
    selected: tuple  # (t, n) per endmember


def _fix_signs(u: np.ndarray) -> np.ndarray:
    # make each singular vector's largest-magnitude entry positive
    idx = np.argmax(np.abs(u), axis=0)
    return u * np.sign(u[idx, np.arange(u.shape[1])])


def vca(cube: SequenceCube, p: int, seed: int = 0) -> VcaResult:
    """Vertex component analysis over all frames pooled into one pixel cloud.

    Affine mode: pixels are projected onto the leading ``p - 1`` principal
    directions of the mean-removed data, lifted by a constant coordinate, and
    ``p`` extreme pixels are picked by maximising ``|f . y|`` for random
    directions ``f`` orthogonal to the pixels already chosen.
    """
    t_count, n, l = cube.pixels.shape
    if p < 2:
        raise ValueError("vca needs p >= 2")
    if p > l:
        raise ValueError(f"p={p} exceeds band count {l}")
    if t_count * n < p:
        raise ValueError(f"{t_count * n} pixels cannot yield {p} endmembers")
    Y = cube.pixels.reshape(-1, l)
    mean = Y.mean(axis=0)
    Yc = Y - mean
    cov = Yc.T @ Yc / Y.shape[0]
    u, s, _ = np.linalg.svd(cov)
    d = p - 1
    tol = 1e-12 * max(s[0], np.finfo(float).tiny)
    if s[0] <= np.finfo(float).tiny or s[d - 1] <= tol:
        raise RankDeficientError(f"data span fewer than {d} affine dimensions; cannot extract {p} endmembers")
    ud = _fix_signs(u[:, :d])
    x = Yc @ ud
    c = np.sqrt((x ** 2).sum(axis=1).max())
    y = np.hstack([x, np.full((x.shape[0], 1), c)])

    A = np.zeros((p, p))
    A[-1, 0] = 1.0
    stream = Stream(seed, "vca")
    picked = []
    for i in range(p):
        w = stream.normal(p, offset=i * p)
        f = w - A @ (np.linalg.pinv(A) @ w)
        f /= np.linalg.norm(f)
        v = np.abs(y @ f)
        k = int(np.argmax(v))  # first index wins ties
        picked.append(k)
        A[:, i] = y[k]
    selected = tuple(divmod(k, n) for k in picked)
    return VcaResult(Y[picked].copy(), selected)


# --------------------------------------------------------------------------
# FCLS


def _nnls_gram(G: np.ndarray, h: np.ndarray, max_iter: int) -> np.ndarray:
    """Lawson-Hanson active set on the normal equations ``G x = h``, ``x >= 0``."""
    p = G.shape[0]
    x = np.zeros(p)
    passive = np.zeros(p, dtype=bool)
    w = h.copy()
    tol = 1e-12 * max(np.abs(h).max(), 1.0)
    it = 0
    while (~passive).any() and (w[~passive] > tol).any():
        it += 1
        if it > max_iter:
            raise ConvergenceError(f"active set did not converge in {max_iter} iterations")
        cand = np.where(~passive, w, -np.inf)
        passive[int(np.argmax(cand))] = True
        while True:
            idx = np.flatnonzero(passive)
            z = np.zeros(p)
            z[idx] = np.linalg.solve(G[np.ix_(idx, idx)], h[idx])
            if (z[idx] > 0).all():
                x = z
                break
            it += 1
            if it > max_iter:
                raise ConvergenceError(f"active set did not converge in {max_iter} iterations")
            neg = passive & (z <= 0)
            alpha = np.min(x[neg] / (x[neg] - z[neg]))
            x = x + alpha * (z - x)
            passive &= x > tol * 1e-3
            x[~passive] = 0.0
        w = h - G @ x
    return x


def _fcls_system(e: np.ndarray, delta: float) -> np.ndarray:
    p = e.shape[0]
    M = np.vstack([e.T, np.full((1, p), delta)])
    return M.T @ M


def _fcls_rows(Y: np.ndarray, e: np.ndarray, delta: float) -> np.ndarray:
    p = e.shape[0]
    G = _fcls_system(e, delta)
    H = Y @ e.T + delta * delta
    # interior optimum: the unconstrained solution is already nonnegative
    X = np.linalg.solve(G, H.T).T
    out = np.empty_like(X)
    for i in range(X.shape[0]):
        if (X[i] > 0).all():
            out[i] = X[i]
        else:
            try:
                out[i] = _nnls_gram(G, H[i], 10 * p)
            except ConvergenceError as exc:
                raise ConvergenceError(f"pixel {i}: {exc}") from None
    s = out.sum(axis=1, keepdims=True)
    return out / s


def fcls_pixel(y: np.ndarray, e: np.ndarray, delta: float = FCLS_DELTA) -> np.ndarray:
    """Simplex-constrained least squares abundances of one pixel.

    Sum-to-one enters as an extra row weighted by ``delta``; the nonnegative
    solution is then renormalised exactly.
    """
    e = np.asarray(e, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if np.linalg.matrix_rank(e) < e.shape[0]:
        raise ValueError("endmember matrix is not of full row rank")
    return _fcls_rows(y[None], e, delta)[0]


def fcls_stack(cube: SequenceCube, endmembers: EndmemberSet, workers: int = 1,
               delta: float = FCLS_DELTA) -> AbundanceStack:
    """Apply FCLS to every pixel of every frame with that frame's ``E_t``."""
    if endmembers.t_count != cube.t_count:
        endmembers = EndmemberSet.constant(endmembers.reference, cube.t_count) \
            if endmembers.t_count == 1 else endmembers
    if endmembers.t_count != cube.t_count or endmembers.bands != cube.bands:
        raise ValueError("endmembers do not match the cube dimensions")

    def frame(t):
        e = endmembers.per_time[t]
        if np.linalg.matrix_rank(e) < e.shape[0]:
            raise ValueError(f"frame {t}: endmember matrix is not of full row rank")
        try:
            return _fcls_rows(cube.pixels[t], e, delta)
        except ConvergenceError as exc:
            raise ConvergenceError(f"frame {t}: {exc}") from exc

    if workers > 1:
        with ThreadPoolExecutor(workers) as ex:
            frames = list(ex.map(frame, range(cube.t_count)))
    else:
        frames = [frame(t) for t in range(cube.t_count)]
    return AbundanceStack(np.stack(frames), cube.height, cube.width)
