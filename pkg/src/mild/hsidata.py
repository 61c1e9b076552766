"""Core data containers, simplex constraints, linear mixing and binary file I/O.

Pixels are stored flattened (``N = H * W``, row-major) wherever the math is
per-pixel; the spatial shape only travels along for map export.

File formats (all little-endian):

* cube ``.hsc``: ``b"HSC1"``, u32 T, H, W, L, then T*H*W*L float32 values
  in (t, h, w, l) order.
* abundances ``.hsa``: ``b"HSA1"``, u32 T, N, P, then T*N*P float32 values.
* endmembers ``.csv``: one row per endmember, L columns, no header.
"""
from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np

EPS_SIMPLEX = 1e-6

CUBE_MAGIC = b"HSC1"
ABUNDANCE_MAGIC = b"HSA1"
# Refuse headers that would allocate more than 2**34 values (64 GiB of float32).
MAX_VALUES = 2 ** 34


class FormatError(ValueError):
    """Malformed cube or abundance file."""


class BadMagicError(FormatError):
    pass


class TruncatedError(FormatError):
    pass


class DimensionOverflowError(FormatError):
    pass


def _frozen(a, dtype=np.float64) -> np.ndarray:
    arr = np.array(a, dtype=dtype, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class SequenceCube:
    """Observed image stack, ``values`` shaped (T, H, W, L)."""

    values: np.ndarray

    def __post_init__(self):
        v = _frozen(self.values)
        if v.ndim != 4 or min(v.shape) < 1:
            raise ValueError(f"cube must be T x H x W x L with every dim >= 1, got {v.shape}")
        if not np.all(np.isfinite(v)):
            raise ValueError("cube contains non-finite values")
        object.__setattr__(self, "values", v)

    @classmethod
    def from_pixels(cls, pixels: np.ndarray, height: int, width: int) -> "SequenceCube":
        pixels = np.asarray(pixels, dtype=np.float64)
        t, n, l = pixels.shape
        if n != height * width:
            raise ValueError(f"{n} pixels cannot fill a {height}x{width} grid")
        return cls(pixels.reshape(t, height, width, l))

    @property
    def t_count(self) -> int:
        return self.values.shape[0]

    @property
    def height(self) -> int:
        return self.values.shape[1]

    @property
    def width(self) -> int:
        return self.values.shape[2]

    @property
    def bands(self) -> int:
        return self.values.shape[3]

    @property
    def pixel_count(self) -> int:
        return self.height * self.width

    @property
    def pixels(self) -> np.ndarray:
        """Read-only (T, N, L) view."""
        return self.values.reshape(self.t_count, self.pixel_count, self.bands)


@dataclass(frozen=True)
class AbundanceStack:
    """Per-time per-pixel fractions, ``values`` shaped (T, N, P).

    Construction only checks shape and finiteness; simplex membership is
    reported by :func:`validate_abundance` instead of being enforced, so that
    unconstrained estimates can be held and inspected too.
    """

    values: np.ndarray
    height: int | None = None
    width: int | None = None

    def __post_init__(self):
        v = _frozen(self.values)
        if v.ndim != 3 or min(v.shape) < 1:
            raise ValueError(f"abundances must be T x N x P, got {v.shape}")
        if not np.all(np.isfinite(v)):
            raise ValueError("abundances contain non-finite values")
        if (self.height is None) != (self.width is None):
            raise ValueError("height and width must be given together")
        if self.height is not None and self.height * self.width != v.shape[1]:
            raise ValueError(f"{self.height}x{self.width} grid does not hold {v.shape[1]} pixels")
        object.__setattr__(self, "values", v)

    @property
    def t_count(self) -> int:
        return self.values.shape[0]

    @property
    def pixel_count(self) -> int:
        return self.values.shape[1]

    @property
    def endmember_count(self) -> int:
        return self.values.shape[2]

    def permuted(self, perm: Sequence[int]) -> "AbundanceStack":
        """Reorder endmember columns: column ``i`` of the result is column ``perm[i]``."""
        return AbundanceStack(self.values[:, :, list(perm)], self.height, self.width)


@dataclass(frozen=True)
class EndmemberSet:
    """Reference endmembers ``E`` (P x L) and per-time ``E_t = E + dE_t``."""

    reference: np.ndarray
    per_time: tuple = field(default=())

    def __post_init__(self):
        ref = _frozen(self.reference)
        if ref.ndim != 2 or ref.shape[0] < 2 or ref.shape[1] < 1:
            raise ValueError(f"reference endmembers must be P x L with P >= 2, got {ref.shape}")
        per_time = tuple(_frozen(e) for e in self.per_time) or (ref,)
        for e in per_time:
            if e.shape != ref.shape:
                raise ValueError(f"per-time endmembers {e.shape} do not match reference {ref.shape}")
        if not all(np.all(np.isfinite(e)) for e in (ref, *per_time)):
            raise ValueError("endmembers contain non-finite values")
        object.__setattr__(self, "reference", ref)
        object.__setattr__(self, "per_time", per_time)

    @classmethod
    def constant(cls, reference: np.ndarray, t_count: int) -> "EndmemberSet":
        ref = np.asarray(reference, dtype=np.float64)
        return cls(ref, tuple(ref for _ in range(t_count)))

    @property
    def endmember_count(self) -> int:
        return self.reference.shape[0]

    @property
    def bands(self) -> int:
        return self.reference.shape[1]

    @property
    def t_count(self) -> int:
        return len(self.per_time)

    @property
    def perturbations(self) -> list[np.ndarray]:
        return [e - self.reference for e in self.per_time]

    def perturbation_norms(self) -> np.ndarray:
        return np.array([np.linalg.norm(d) for d in self.perturbations])

    def stacked(self) -> np.ndarray:
        """(T, P, L) array of the per-time endmembers."""
        return np.stack(self.per_time)

    def permuted(self, perm: Sequence[int]) -> "EndmemberSet":
        perm = list(perm)
        return EndmemberSet(self.reference[perm], tuple(e[perm] for e in self.per_time))


class Violation(NamedTuple):
    t: int
    pixel: int
    kind: str  # "negativity" or "sum"
    magnitude: float


@dataclass(frozen=True)
class ValidationReport:
    violations: tuple = ()

    @property
    def ok(self) -> bool:
        return not self.violations


def validate_abundance(a: AbundanceStack, eps: float = EPS_SIMPLEX) -> ValidationReport:
    """Report every row breaking nonnegativity or sum-to-one beyond ``eps``."""
    v = a.values
    most_negative = -v.min(axis=2)
    sum_err = np.abs(v.sum(axis=2) - 1.0)
    violations = []
    for t, n in zip(*np.nonzero(most_negative > eps)):
        violations.append(Violation(int(t), int(n), "negativity", float(most_negative[t, n])))
    for t, n in zip(*np.nonzero(sum_err > eps)):
        violations.append(Violation(int(t), int(n), "sum", float(sum_err[t, n])))
    violations.sort(key=lambda x: (x.t, x.pixel, x.kind))
    return ValidationReport(tuple(violations))


def lmm_reconstruct(a: AbundanceStack, e: EndmemberSet) -> SequenceCube:
    """Noiseless linear mixing: pixel ``(t, n)`` is ``a[t, n] @ E_t``."""
    if a.endmember_count != e.endmember_count:
        raise ValueError(f"abundances have P={a.endmember_count}, endmembers P={e.endmember_count}")
    if a.t_count != e.t_count:
        raise ValueError(f"abundances have T={a.t_count}, endmembers T={e.t_count}")
    pixels = np.matmul(a.values, e.stacked())
    h, w = (a.height, a.width) if a.height is not None else (1, a.pixel_count)
    return SequenceCube.from_pixels(pixels, h, w)


def simplex_project_rows(v: np.ndarray) -> np.ndarray:
    """Euclidean projection of every row of ``v`` onto the probability simplex.

    Sorted-threshold algorithm. Rows already feasible to within floating
    rounding are returned untouched, and projected rows are renormalised,
    which makes the map exactly idempotent.
    """
    v = np.asarray(v, dtype=np.float64)
    if not np.all(np.isfinite(v)):
        raise ValueError("simplex projection of non-finite input")
    squeeze = v.ndim == 1
    x = np.atleast_2d(v)
    p = x.shape[-1]
    flat = x.reshape(-1, p)

    u = -np.sort(-flat, axis=1)
    css = np.cumsum(u, axis=1) - 1.0
    ks = np.arange(1, p + 1)
    cond = u - css / ks > 0
    rho = p - 1 - np.argmax(cond[:, ::-1], axis=1)
    theta = css[np.arange(flat.shape[0]), rho] / (rho + 1)
    w = np.maximum(flat - theta[:, None], 0.0)
    w /= w.sum(axis=1, keepdims=True)

    feasible = (flat.min(axis=1) >= 0) & (np.abs(flat.sum(axis=1) - 1.0) <= 4 * p * np.finfo(float).eps)
    w[feasible] = flat[feasible]
    out = w.reshape(x.shape)
    return out[0] if squeeze else out


def simplex_project(v) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    if v.ndim != 1:
        raise ValueError("simplex_project expects a vector; use simplex_project_rows for stacks")
    return simplex_project_rows(v)


def spectral_angle(a: np.ndarray, b: np.ndarray) -> float:
    cos = float(np.dot(a, b) / (np.linalg.norm(a) * np.linalg.norm(b)))
    return float(np.arccos(np.clip(cos, -1.0, 1.0)))


# --------------------------------------------------------------------------
# file I/O


def _atomic_write(path: Path, payload: bytes) -> None:
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(payload)
    os.replace(tmp, path)


def _read_header(raw: bytes, magic: bytes, ndims: int, what: str) -> tuple[int, ...]:
    head = 4 + 4 * ndims
    if raw[:4] != magic:
        raise BadMagicError(f"bad magic in {what} file: expected {magic!r}, found {raw[:4]!r}")
    if len(raw) < head:
        raise TruncatedError(f"truncated {what} header ({len(raw)} bytes)")
    dims = struct.unpack(f"<{ndims}I", raw[4:head])
    if min(dims) < 1:
        raise FormatError(f"{what} header declares a zero dimension {dims}")
    count = int(np.prod(dims, dtype=object))
    if count > MAX_VALUES:
        raise DimensionOverflowError(f"{what} header declares {count} values, limit is {MAX_VALUES}")
    need = head + 4 * count
    if len(raw) < need:
        raise TruncatedError(f"truncated {what} payload: header needs {need} bytes, file has {len(raw)}")
    if len(raw) > need:
        raise FormatError(f"{len(raw) - need} trailing bytes after {what} payload")
    return dims


def _payload(values: np.ndarray) -> bytes:
    return np.ascontiguousarray(values, dtype="<f4").tobytes()


def write_cube(path, cube: SequenceCube) -> None:
    header = CUBE_MAGIC + struct.pack("<4I", *cube.values.shape)
    _atomic_write(Path(path), header + _payload(cube.values))


def read_cube(path) -> SequenceCube:
    raw = Path(path).read_bytes()
    dims = _read_header(raw, CUBE_MAGIC, 4, "cube")
    vals = np.frombuffer(raw, dtype="<f4", offset=20).reshape(dims)
    return SequenceCube(vals.astype(np.float64))


def write_abundances(path, a: AbundanceStack) -> None:
    header = ABUNDANCE_MAGIC + struct.pack("<3I", *a.values.shape)
    _atomic_write(Path(path), header + _payload(a.values))


def read_abundances(path, height: int | None = None, width: int | None = None) -> AbundanceStack:
    raw = Path(path).read_bytes()
    dims = _read_header(raw, ABUNDANCE_MAGIC, 3, "abundance")
    vals = np.frombuffer(raw, dtype="<f4", offset=16).reshape(dims)
    return AbundanceStack(vals.astype(np.float64), height, width)


def write_endmembers_csv(path, rows: np.ndarray) -> None:
    rows = np.atleast_2d(np.asarray(rows, dtype=np.float64))
    text = "\n".join(",".join(repr(float(x)) for x in row) for row in rows) + "\n"
    _atomic_write(Path(path), text.encode("ascii"))


def read_endmembers_csv(path) -> np.ndarray:
    rows = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        try:
            rows.append([float(x) for x in line.split(",")])
        except ValueError as exc:
            raise FormatError(f"{path}:{lineno}: {exc}") from None
    if not rows or len({len(r) for r in rows}) != 1:
        raise FormatError(f"{path}: endmember rows are empty or ragged")
    return np.array(rows)
