"""Deterministic synthetic multitemporal datasets.

Two presets mirror the usual benchmark protocols:

``synth1``
    T=6, 50x50, L=224, P=3. Smooth abundance fields projected onto the
    simplex, per-pixel endmembers scaled by a piecewise-linear factor in
    [0.85, 1.15], one-hot disc mutations at t = 2..5, 30 dB noise.
``synth2``
    T=15, 50x50, L=198, P=4. Softmax-normalised Gaussian random fields,
    per-pixel endmembers drawn from a pool of 10 perturbed variants of each
    reference, persistent compact changes at 3 random times, 30 dB noise.

All randomness comes from :class:`mild.rng.Stream` keyed by
``(seed, purpose, t)`` with per-pixel counters.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .hsidata import (
    AbundanceStack,
    EndmemberSet,
    SequenceCube,
    simplex_project_rows,
    spectral_angle,
)
from .rng import Stream, derive_key

KNOTS = 4
MIN_LIBRARY_ANGLE = 0.15


@dataclass(frozen=True)
class SynthSpec:
    preset: str = "custom"
    t_count: int = 6
    height: int = 50
    width: int = 50
    bands: int = 224
    endmember_count: int = 3
    snr_db: float = 30.0
    scale_range: tuple = (0.85, 1.15)
    mutation_times: tuple = ()  # 1-based time indices
    seed: int = 0
    abundance_mode: str = "project"  # "project" or "softmax"
    field_gain: float = 0.5
    length_scale: float = 8.0
    variant_pool: int = 0  # 0: fresh scaling per pixel; >0: pick from a pool
    persistent_changes: bool = False

    def __post_init__(self):
        lo, hi = self.scale_range
        if lo > hi:
            raise ValueError(f"scale_range low {lo} exceeds high {hi}")
        if not (self.snr_db > 0):
            raise ValueError("snr_db must be positive or inf")
        if any(not 1 <= t <= self.t_count for t in self.mutation_times):
            raise ValueError(f"mutation times {self.mutation_times} outside [1, {self.t_count}]")
        if self.abundance_mode not in ("project", "softmax"):
            raise ValueError(f"unknown abundance_mode {self.abundance_mode!r}")
        object.__setattr__(self, "scale_range", (float(lo), float(hi)))
        object.__setattr__(self, "mutation_times", tuple(sorted(int(t) for t in self.mutation_times)))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["scale_range"] = list(self.scale_range)
        d["mutation_times"] = list(self.mutation_times)
        if math.isinf(self.snr_db):
            d["snr_db"] = "inf"
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SynthSpec":
        d = dict(d)
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown spec keys: {sorted(unknown)}")
        if "snr_db" in d:
            d["snr_db"] = float(d["snr_db"])
        if "scale_range" in d:
            d["scale_range"] = tuple(d["scale_range"])
        if "mutation_times" in d:
            d["mutation_times"] = tuple(d["mutation_times"])
        return cls(**d)


def synth1_spec(seed: int) -> SynthSpec:
    return SynthSpec(preset="synth1", t_count=6, height=50, width=50, bands=224,
                     endmember_count=3, snr_db=30.0, mutation_times=(2, 3, 4, 5), seed=seed)


def synth2_spec(seed: int) -> SynthSpec:
    t_count = 15
    order = Stream(seed, "change-times").permutation(t_count - 1)
    times = tuple(sorted(int(i) + 2 for i in order[:3]))
    return SynthSpec(preset="synth2", t_count=t_count, height=50, width=50, bands=198,
                     endmember_count=4, snr_db=30.0, mutation_times=times, seed=seed,
                     abundance_mode="softmax", field_gain=2.5, variant_pool=10,
                     persistent_changes=True)


PRESETS = {"synth1": synth1_spec, "synth2": synth2_spec}


def scale_profile(knots: np.ndarray, bands: int) -> np.ndarray:
    """Expand knot values (..., KNOTS) into a piecewise-linear (..., bands) factor.

    Knots sit at evenly spaced band positions, first and last band included.
    """
    k = knots.shape[-1]
    pos = np.linspace(0.0, bands - 1, k)
    x = np.arange(bands, dtype=np.float64)
    seg = np.minimum(np.searchsorted(pos, x, side="right") - 1, k - 2)
    w = (x - pos[seg]) / (pos[seg + 1] - pos[seg])
    return knots[..., seg] * (1.0 - w) + knots[..., seg + 1] * w


@dataclass(frozen=True)
class GroundTruth:
    """Noiseless factors behind a synthetic cube.

    Endmembers vary per pixel: pixel ``n`` at time ``t`` uses
    ``reference * scale_profile(knots[t, n])``. ``endmembers.per_time`` holds
    the pixel-averaged ``E_t``.
    """

    abundances: AbundanceStack
    endmembers: EndmemberSet
    clean_cube: SequenceCube
    knots: np.ndarray = field(repr=False)

    def pixel_endmembers(self, t: int) -> np.ndarray:
        """(N, P, L) endmembers of frame ``t`` (0-based)."""
        ref = self.endmembers.reference
        return ref[None] * scale_profile(self.knots[t], ref.shape[1])


def gen_library_spectra(p: int, l: int, seed: int) -> np.ndarray:
    """``p`` smooth nonnegative spectra in [0, 1], pairwise angle >= 0.15 rad.

    Each spectrum is a sum of 3-6 Gaussian bumps at distinct band centres,
    rescaled to a random peak height.
    """
    if p < 2:
        raise ValueError(f"need at least 2 spectra, got p={p}")
    if l < 8:
        raise ValueError(f"need at least 8 bands, got l={l}")
    x = np.arange(l, dtype=np.float64)
    for attempt in range(100):
        spectra = np.empty((p, l))
        for i in range(p):
            s = Stream(seed, "library", attempt, i)
            u = s.uniform(4)
            n_bumps = 3 + min(int(u[0] * 4), 3)
            centres = s.permutation(l)[:n_bumps].astype(np.float64)
            widths = s.uniform(n_bumps, l / 40.0, l / 8.0, offset=l)
            amps = s.uniform(n_bumps, 0.3, 1.0, offset=l + 16)
            spec = (amps[:, None] * np.exp(-0.5 * ((x[None] - centres[:, None]) / widths[:, None]) ** 2)).sum(0)
            spectra[i] = spec * (0.5 + 0.35 * u[1]) / spec.max() + 0.02 * u[2]
        angles = [spectral_angle(spectra[i], spectra[j]) for i in range(p) for j in range(i + 1, p)]
        if min(angles) >= MIN_LIBRARY_ANGLE:
            return spectra
    raise RuntimeError(f"could not draw {p} spectra separated by {MIN_LIBRARY_ANGLE} rad in 100 attempts")


def _grf_factor(n: int, length_scale: float) -> np.ndarray:
    i = np.arange(n, dtype=np.float64)
    cov = np.exp(-0.5 * ((i[:, None] - i[None]) / length_scale) ** 2)
    lam, vec = np.linalg.eigh(cov)
    return vec * np.sqrt(np.clip(lam, 0.0, None))


def gaussian_random_field(stream: Stream, height: int, width: int, length_scale: float) -> np.ndarray:
    """Unit-variance field with separable squared-exponential covariance."""
    white = stream.normal((height, width))
    return _grf_factor(height, length_scale) @ white @ _grf_factor(width, length_scale).T


def _disc(height: int, width: int, cy: int, cx: int, r: int) -> np.ndarray:
    yy, xx = np.mgrid[0:height, 0:width]
    return ((yy - cy) ** 2 + (xx - cx) ** 2 <= r * r).ravel()


def _abundance_fields(spec: SynthSpec) -> np.ndarray:
    t_count, n, p = spec.t_count, spec.height * spec.width, spec.endmember_count
    base = np.empty((2, p, n))
    for k in range(2):
        for i in range(p):
            s = Stream(spec.seed, "field", k, i)
            base[k, i] = gaussian_random_field(s, spec.height, spec.width, spec.length_scale).ravel()
    out = np.empty((t_count, n, p))
    for t in range(t_count):
        theta = 0.4 * math.pi * t / max(t_count - 1, 1)
        f = spec.field_gain * (math.cos(theta) * base[0] + math.sin(theta) * base[1]).T
        if spec.abundance_mode == "softmax":
            f = np.exp(f - f.max(axis=1, keepdims=True))
            out[t] = f / f.sum(axis=1, keepdims=True)
        else:
            out[t] = simplex_project_rows(1.0 / p + f)

    # one-hot compact changes; persistent ones stay from their time onward
    for t1 in spec.mutation_times:
        s = Stream(spec.seed, "mutation", t1)
        cy = int(s.integers(0, spec.height, 1)[0])
        cx = int(s.integers(0, spec.width, 1, offset=2)[0])
        r = int(s.integers(3, 7, 1, offset=3)[0])
        k = int(s.integers(0, p, 1, offset=4)[0])
        mask = _disc(spec.height, spec.width, cy, cx, r)
        last = t_count if spec.persistent_changes else t1
        for t in range(t1 - 1, last):
            out[t, mask] = 0.0
            out[t, mask, k] = 1.0
    return out


def _knots(spec: SynthSpec) -> np.ndarray:
    lo, hi = spec.scale_range
    n, p = spec.height * spec.width, spec.endmember_count
    if spec.variant_pool > 0:
        pool = Stream(spec.seed, "variant-pool").uniform((p, spec.variant_pool, KNOTS), lo, hi)
        out = np.empty((spec.t_count, n, p, KNOTS))
        for t in range(spec.t_count):
            pick = Stream(spec.seed, "variant-pick", t).integers(0, spec.variant_pool, (n, p))
            out[t] = pool[np.arange(p)[None, :], pick]
        return out
    return np.stack([Stream(spec.seed, "scale", t).uniform((n, p, KNOTS), lo, hi)
                     for t in range(spec.t_count)])


def add_awgn(cube: SequenceCube, snr_db: float, seed: int) -> SequenceCube:
    """Add white Gaussian noise at exactly ``snr_db`` over the whole cube."""
    if math.isinf(snr_db):
        return cube
    if not snr_db > 0:
        raise ValueError("snr_db must be positive")
    px = cube.pixels
    noise = np.stack([Stream(seed, "awgn", t).normal(px.shape[1:]) for t in range(cube.t_count)])
    target = np.mean(px ** 2) / 10.0 ** (snr_db / 10.0)
    noise *= math.sqrt(target / np.mean(noise ** 2))
    return SequenceCube.from_pixels(px + noise, cube.height, cube.width)


def measured_snr_db(clean: SequenceCube, noisy: SequenceCube) -> float:
    noise = noisy.values - clean.values
    return 10.0 * math.log10(np.sum(clean.values ** 2) / np.sum(noise ** 2))


def generate(spec: SynthSpec) -> tuple[SequenceCube, GroundTruth]:
    """Observed cube (float32-representable values) and its ground truth."""
    ref = gen_library_spectra(spec.endmember_count, spec.bands, derive_key(spec.seed, "library"))
    abund = _abundance_fields(spec)
    knots = _knots(spec)
    clean = np.empty((spec.t_count, spec.height * spec.width, spec.bands))
    for t in range(spec.t_count):
        pix_e = ref[None] * scale_profile(knots[t], spec.bands)
        clean[t] = np.einsum("np,npl->nl", abund[t], pix_e)
    per_time = tuple(ref * scale_profile(knots[t].mean(axis=0), spec.bands) for t in range(spec.t_count))

    a = AbundanceStack(abund, spec.height, spec.width)
    clean_cube = SequenceCube.from_pixels(clean, spec.height, spec.width)
    truth = GroundTruth(a, EndmemberSet(ref, per_time), clean_cube, knots)
    noisy = add_awgn(clean_cube, spec.snr_db, spec.seed)
    observed = SequenceCube(noisy.values.astype(np.float32).astype(np.float64))
    return observed, truth


def gen_synth1(seed: int) -> tuple[SequenceCube, GroundTruth]:
    return generate(synth1_spec(seed))


def gen_synth2(seed: int) -> tuple[SequenceCube, GroundTruth]:
    return generate(synth2_spec(seed))
