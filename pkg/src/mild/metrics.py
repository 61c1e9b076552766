"""Abundance / reconstruction NRMSE, endmember alignment and map export."""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.optimize import linear_sum_assignment

from .hsidata import AbundanceStack, EndmemberSet, SequenceCube, spectral_angle

EXHAUSTIVE_MAX_P = 6
ALIGN_MAX_P = 10


@dataclass(frozen=True)
class EvalReport:
    nrmse_a: float
    nrmse_y: float
    per_time_a: tuple
    per_time_y: tuple
    permutation: tuple

    def __post_init__(self):
        for v in (self.nrmse_a, self.nrmse_y):
            if not (math.isfinite(v) and v >= 0):
                raise ValueError(f"invalid NRMSE value {v}")


def _per_time_a(truth: AbundanceStack, est: AbundanceStack) -> np.ndarray:
    if truth.values.shape != est.values.shape:
        raise ValueError(f"abundance shapes differ: {truth.values.shape} vs {est.values.shape}")
    norms = np.sum(truth.values ** 2, axis=(1, 2))
    if np.any(norms == 0):
        raise ZeroDivisionError(f"truth frame {int(np.argmin(norms))} has zero norm")
    return np.sum((truth.values - est.values) ** 2, axis=(1, 2)) / norms


def nrmse_a(truth: AbundanceStack, est: AbundanceStack) -> float:
    """sqrt( (1/T) sum_t sum_n ||a_nt - est_nt||^2 / ||a_t||_F^2 ).

    ``est`` columns must already be aligned with ``truth``.
    """
    return math.sqrt(float(np.mean(_per_time_a(truth, est))))


def _per_time_y(cube: SequenceCube, a: AbundanceStack, e: EndmemberSet) -> np.ndarray:
    if a.t_count != cube.t_count or a.pixel_count != cube.pixel_count:
        raise ValueError("abundances do not match the cube")
    if e.t_count != cube.t_count or e.bands != cube.bands or e.endmember_count != a.endmember_count:
        raise ValueError("endmembers do not match the cube/abundances")
    out = np.empty(cube.t_count)
    for t in range(cube.t_count):
        y = cube.pixels[t]
        norms = np.sum(y ** 2, axis=1)
        if np.any(norms == 0):
            raise ZeroDivisionError(f"frame {t}, pixel {int(np.argmin(norms))} has zero norm")
        out[t] = np.sum(np.sum((y - a.values[t] @ e.per_time[t]) ** 2, axis=1) / norms)
    return out


def nrmse_y(cube: SequenceCube, a: AbundanceStack, e: EndmemberSet) -> float:
    """sqrt( (1/T) sum_t sum_n ||y_nt - a_nt E_t||^2 / ||y_nt||^2 )."""
    return math.sqrt(float(np.mean(_per_time_y(cube, a, e))))


def _angle_cost(truth_ref: np.ndarray, est_ref: np.ndarray) -> np.ndarray:
    p = truth_ref.shape[0]
    return np.array([[spectral_angle(truth_ref[i], est_ref[j]) for j in range(p)] for i in range(p)])


def align_endmembers(truth_e: EndmemberSet | np.ndarray, est_e: EndmemberSet | np.ndarray) -> tuple:
    """Permutation ``perm`` so that ``est[perm[i]]`` matches ``truth[i]``.

    Minimises the total spectral angle between reference endmembers:
    exhaustively (first lexicographic minimiser wins) for P <= 6, by
    Hungarian assignment up to P = 10.
    """
    tr = truth_e.reference if isinstance(truth_e, EndmemberSet) else np.asarray(truth_e, float)
    es = est_e.reference if isinstance(est_e, EndmemberSet) else np.asarray(est_e, float)
    if tr.shape != es.shape:
        raise ValueError(f"endmember shapes differ: {tr.shape} vs {es.shape}")
    p = tr.shape[0]
    if p > ALIGN_MAX_P:
        raise ValueError(f"alignment supports at most {ALIGN_MAX_P} endmembers, got {p}")
    cost = _angle_cost(tr, es)
    if p <= EXHAUSTIVE_MAX_P:
        best, best_cost = None, math.inf
        rows = np.arange(p)
        for perm in itertools.permutations(range(p)):
            c = float(np.sum(cost[rows, perm]))
            if c < best_cost:
                best, best_cost = perm, c
        return tuple(int(i) for i in best)
    _, cols = linear_sum_assignment(cost)
    return tuple(int(i) for i in cols)


def evaluate(truth: AbundanceStack, est: AbundanceStack, cube: SequenceCube, est_e: EndmemberSet,
             perm=None, truth_e: EndmemberSet | None = None) -> EvalReport:
    """Align (unless ``perm`` is given) and score an estimate.

    NRMSE_Y is invariant to the alignment; NRMSE_A uses the permuted columns.
    """
    if perm is None:
        if truth_e is None:
            raise ValueError("need either a permutation or truth endmembers")
        perm = align_endmembers(truth_e, est_e)
    perm = tuple(int(i) for i in perm)
    pa = _per_time_a(truth, est.permuted(perm))
    py = _per_time_y(cube, est, est_e)
    return EvalReport(math.sqrt(float(np.mean(pa))), math.sqrt(float(np.mean(py))),
                      tuple(float(v) for v in np.sqrt(pa)), tuple(float(v) for v in np.sqrt(py)), perm)


# --------------------------------------------------------------------------
# maps


def quantize(values: np.ndarray) -> np.ndarray:
    """[0, 1] -> uint8 by rounding ``255 v``; out-of-range values are clipped."""
    return np.round(np.clip(values, 0.0, 1.0) * 255.0).astype(np.uint8)


def write_pgm(path, image: np.ndarray) -> None:
    image = np.asarray(image, dtype=np.uint8)
    h, w = image.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + image.tobytes())


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    fields, pos = [], 0
    while len(fields) < 4:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        end = pos
        while end < len(raw) and not raw[end:end + 1].isspace():
            end += 1
        fields.append(raw[pos:end])
        pos = end
    if fields[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    w, h, maxval = (int(f) for f in fields[1:])
    if maxval != 255:
        raise ValueError(f"{path}: only 8-bit maps are supported")
    data = raw[pos + 1:]
    if len(data) != w * h:
        raise ValueError(f"{path}: expected {w * h} pixels, found {len(data)}")
    return np.frombuffer(data, dtype=np.uint8).reshape(h, w).copy()


def export_maps(a: AbundanceStack, h: int, w: int, path, prefix: str = "abund") -> list[Path]:
    """Write one 8-bit PGM per (frame, endmember): ``{prefix}_t{t}_e{p}.pgm``."""
    if h * w != a.pixel_count:
        raise ValueError(f"{h}x{w} does not match {a.pixel_count} pixels")
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    q = quantize(a.values)
    files = []
    for t in range(a.t_count):
        for p in range(a.endmember_count):
            f = out / f"{prefix}_t{t}_e{p}.pgm"
            write_pgm(f, q[t, :, p].reshape(h, w))
            files.append(f)
    return files
