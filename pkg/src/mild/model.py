"""Multitemporal latent-dynamics unmixing model.

Pipeline per pixel:

1. ``z_t = Encoder_t(y_t)``: time-specific MLP (L -> 64 -> P, softmax head)
   giving pseudo-abundances.
2. ``A_t = z_t + sum_{j in S(t)} F_j(z_j) / (2K)``: fusion over K neighbour
   frames on each side, where ``F_j`` is a per-time MLP (P -> 32 -> P,
   linear head). Near the sequence ends the short side keeps the m < K
   frames it has and the other side supplies the 2K - m nearest frames.
3. ``A_t`` is projected onto the simplex; ``Y_t ~ A_t (E + dE_t)``.

Time indices in this module are 0-based.
"""
from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .diffkit import (
    AdamState,
    ModelParams,
    NetSpec,
    NonFiniteError,
    Tape,
    backward,
    init_params,
    load_params,
    mlp,
    opt_step,
    save_params,
)
from .hsidata import AbundanceStack, EndmemberSet, SequenceCube, simplex_project_rows
from .initbase import vca
from .rng import Stream

log = logging.getLogger(__name__)

ENCODER_HIDDEN = 64
FUSION_HIDDEN = 32


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 200
    lr: float = 5e-3
    alpha: float = 1.0
    beta: float = 0.1
    k_steps: int = 2
    delta: float = 1.0
    seed: int = 0
    batch_pixels: int = 0  # 0 means the full image every step
    endmember_count: int = 3
    # E and dE step at lr * decoder_lr_scale: VCA already puts E close, and a
    # full-rate decoder drifts before the encoder has fitted the abundances
    decoder_lr_scale: float = 0.01

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("loss weights must be nonnegative")
        if not self.delta > 0:
            raise ValueError("delta must be positive")
        if self.k_steps < 1:
            raise ValueError("k_steps must be >= 1")
        if self.batch_pixels < 0:
            raise ValueError("batch_pixels must be >= 0")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)


def fusion_neighbors(t: int, t_count: int, k: int) -> list[int]:
    """Frames whose fusion terms feed ``A_t``, in ascending order."""
    if 2 * k > t_count - 1:
        raise ValueError(f"K={k} needs at least {2 * k + 1} frames, have {t_count}")
    left = min(k, t)
    right = min(k, t_count - 1 - t)
    if left < k:
        right = 2 * k - left
    elif right < k:
        left = 2 * k - right
    return list(range(t - left, t)) + list(range(t + 1, t + right + 1))


@dataclass
class MildModel:
    params: ModelParams
    t_count: int
    bands: int
    endmember_count: int
    k_steps: int = 2
    delta: float = 1.0

    def __post_init__(self):
        if self.k_steps < 1:
            raise ValueError("K must be >= 1")
        if 2 * self.k_steps > self.t_count - 1:
            raise ValueError(f"K={self.k_steps} needs T >= {2 * self.k_steps + 1}, got T={self.t_count}")

    @classmethod
    def create(cls, t_count: int, bands: int, endmember_count: int, k_steps: int = 2,
               seed: int = 0, reference: np.ndarray | None = None, delta: float = 1.0) -> "MildModel":
        p = endmember_count
        specs = [NetSpec((bands, ENCODER_HIDDEN, p), "softmax", f"encoder{t}") for t in range(t_count)]
        specs += [NetSpec((p, FUSION_HIDDEN, p), "linear", f"fusion{t}") for t in range(t_count)]
        tensors = [("E", (p, bands)), ("dE", (t_count, p, bands))]
        model = cls(init_params(specs, seed, tensors), t_count, bands, p, k_steps, delta)
        if reference is not None:
            model.params.tensor("E")[...] = reference
        return model

    def copy(self) -> "MildModel":
        return replace(self, params=self.params.copy())

    def with_params(self, params: ModelParams) -> "MildModel":
        return replace(self, params=params)

    def zero_fusion(self) -> "MildModel":
        """Copy with every fusion network's weights and biases set to zero."""
        m = self.copy()
        for t in range(self.t_count):
            for W, b in m.params.layers(f"fusion{t}"):
                W[...] = 0.0
                b[...] = 0.0
        return m

    def permute_endmembers(self, perm) -> "MildModel":
        """Relabel endmembers: new index ``i`` is old index ``perm[i]``.

        Encoder output units, fusion inputs/outputs and decoder rows are all
        permuted, so the relabelled model computes the same abundances with
        columns reordered.
        """
        perm = list(perm)
        m = self.copy()
        for t in range(self.t_count):
            (_, _), (W2, b2) = m.params.layers(f"encoder{t}")
            W2[...] = W2[:, perm]
            b2[...] = b2[perm]
            (V1, _), (V2, c2) = m.params.layers(f"fusion{t}")
            V1[...] = V1[perm, :]
            V2[...] = V2[:, perm]
            c2[...] = c2[perm]
        E = m.params.tensor("E")
        E[...] = E[perm]
        dE = m.params.tensor("dE")
        dE[...] = dE[:, perm]
        return m


def _check_cube(model: MildModel, cube: SequenceCube) -> None:
    if cube.t_count != model.t_count or cube.bands != model.bands:
        raise ValueError(f"cube is T={cube.t_count}, L={cube.bands}; model expects "
                         f"T={model.t_count}, L={model.bands}")


# --------------------------------------------------------------------------
# graph construction


@dataclass
class _Graph:
    z: list
    pre: list
    A: list
    loss_re: object = None
    loss_e: object = None
    loss: object = None


def _fused(tape: Tape, model: MildModel, z: list, fz: list, t: int):
    terms = [fz[j] for j in fusion_neighbors(t, model.t_count, model.k_steps)]
    return tape.add(tape.scale(tape.add_n(terms), 1.0 / (2 * model.k_steps)), z[t])


def _build(tape: Tape, theta, model: MildModel, Y: np.ndarray, alpha: float = 1.0,
           beta: float = 0.1, with_loss: bool = True) -> _Graph:
    params = model.params
    z = [mlp(tape, theta, params, f"encoder{t}", tape.constant(Y[t])) for t in range(model.t_count)]
    fz = [mlp(tape, theta, params, f"fusion{t}", z[t]) for t in range(model.t_count)]
    pre = [_fused(tape, model, z, fz, t) for t in range(model.t_count)]
    A = [tape.simplex_project(x) for x in pre]
    g = _Graph(z, pre, A)
    if not with_loss:
        return g
    bE = params.blocks["E"]
    bdE = params.blocks["dE"]
    shape = (model.endmember_count, model.bands)
    size = shape[0] * shape[1]
    E = tape.slice(theta, bE.offset, bE.offset + size, shape)
    sq = []
    for t in range(model.t_count):
        off = bdE.offset + t * size
        Et = tape.add(E, tape.slice(theta, off, off + size, shape))
        sq.append(tape.sumsq(tape.sub(tape.constant(Y[t]), tape.matmul(A[t], Et))))
    g.loss_re = tape.sqrt(tape.scale(tape.add_n(sq), 1.0 / model.t_count))
    dE = tape.slice(theta, bdE.offset, bdE.offset + model.t_count * size, (model.t_count,) + shape)
    g.loss_e = tape.scale(tape.sumsq(dE), 0.5)
    g.loss = tape.add(tape.scale(g.loss_re, alpha), tape.scale(g.loss_e, beta))
    return g


def _forward(model: MildModel, Y: np.ndarray) -> _Graph:
    tape = Tape()
    return _build(tape, tape.variable(model.params.values), model, Y, with_loss=False)


# --------------------------------------------------------------------------
# public operations


def encode_all(model: MildModel, cube: SequenceCube) -> AbundanceStack:
    """Pseudo-abundances ``z`` for every frame."""
    _check_cube(model, cube)
    tape = Tape()
    theta = tape.variable(model.params.values)
    z = [mlp(tape, theta, model.params, f"encoder{t}", tape.constant(cube.pixels[t])).value
         for t in range(model.t_count)]
    return AbundanceStack(np.stack(z), cube.height, cube.width)


def fusion_term(model: MildModel, t: int, z_t) -> np.ndarray:
    """``F_t(z_t)`` for a vector or for the rows of a matrix; unconstrained."""
    if not 0 <= t < model.t_count:
        raise IndexError(f"time index {t} outside [0, {model.t_count})")
    tape = Tape()
    theta = tape.variable(model.params.values)
    x = np.asarray(z_t, dtype=np.float64)
    out = mlp(tape, theta, model.params, f"fusion{t}", tape.constant(np.atleast_2d(x))).value
    return out[0] if x.ndim == 1 else out


def latent_fusion(model: MildModel, z: AbundanceStack | np.ndarray, t: int) -> np.ndarray:
    """Pre-projection abundances ``A_t`` (N x P) from pseudo-abundances ``z``."""
    zv = z.values if isinstance(z, AbundanceStack) else np.asarray(z, dtype=np.float64)
    if zv.shape[0] != model.t_count or zv.shape[-1] != model.endmember_count:
        raise ValueError(f"z has shape {zv.shape}, model is T={model.t_count}, P={model.endmember_count}")
    tape = Tape()
    theta = tape.variable(model.params.values)
    zn = [tape.constant(zv[j]) for j in range(model.t_count)]
    nb = fusion_neighbors(t, model.t_count, model.k_steps)
    fz = {j: mlp(tape, theta, model.params, f"fusion{j}", zn[j]) for j in nb}
    return _fused(tape, model, zn, fz, t).value


def infer_abundance(model: MildModel, cube: SequenceCube) -> AbundanceStack:
    """Encode, fuse and project onto the simplex."""
    _check_cube(model, cube)
    g = _forward(model, cube.pixels)
    return AbundanceStack(np.stack([a.value for a in g.A]), cube.height, cube.width)


def endmembers(model: MildModel, clamp: bool = True) -> EndmemberSet:
    """``E_t = E + dE_t``; clamped to be nonnegative unless ``clamp=False``."""
    E = model.params.tensor("E").copy()
    per_time = [E + d for d in model.params.tensor("dE")]
    if clamp:
        E = np.maximum(E, 0.0)
        per_time = [np.maximum(e, 0.0) for e in per_time]
    return EndmemberSet(E, tuple(per_time))


def loss_endmember(model: MildModel) -> float:
    """Half the summed squared Frobenius distance between each ``E_t`` and ``E``."""
    dE = model.params.tensor("dE")
    return 0.5 * float(np.sum(dE * dE))


def loss_reconstruction(cube: SequenceCube, a: AbundanceStack, e: EndmemberSet) -> float:
    """Root of the time-averaged squared Frobenius residual."""
    if a.t_count != cube.t_count or e.t_count != cube.t_count or e.bands != cube.bands:
        raise ValueError("cube, abundances and endmembers disagree on T or L")
    sq = [np.sum((cube.pixels[t] - a.values[t] @ e.per_time[t]) ** 2) for t in range(cube.t_count)]
    return math.sqrt(sum(sq) / cube.t_count)


def loss_total(cube: SequenceCube, model: MildModel, alpha: float = 1.0, beta: float = 0.1) -> float:
    _check_cube(model, cube)
    a = infer_abundance(model, cube)
    return alpha * loss_reconstruction(cube, a, endmembers(model, clamp=False)) + beta * loss_endmember(model)


def loss_and_grad(cube_or_pixels, model: MildModel, alpha: float = 1.0,
                  beta: float = 0.1) -> tuple[float, np.ndarray]:
    """Total loss and its gradient with respect to every model parameter."""
    Y = cube_or_pixels.pixels if isinstance(cube_or_pixels, SequenceCube) else cube_or_pixels
    return backward(model.params, lambda tape, theta: _build(tape, theta, model, Y, alpha, beta).loss)


# --------------------------------------------------------------------------
# training


@dataclass
class TrainLog:
    losses: list = field(default_factory=list)  # loss before each epoch's update(s)
    final_loss: float = float("nan")
    seconds: float = 0.0


def train(cube: SequenceCube, config: TrainConfig, init_reference: np.ndarray | None = None
          ) -> tuple[MildModel, TrainLog]:
    """Fit a model to ``cube``.

    ``E`` starts from pooled VCA endmembers (or ``init_reference``), every
    ``dE_t`` from zero, and the networks from :func:`init_params`.
    """
    t0 = time.perf_counter()
    p = config.endmember_count
    if init_reference is None:
        init_reference = vca(cube, p, config.seed).endmembers
    model = MildModel.create(cube.t_count, cube.bands, p, config.k_steps, config.seed,
                             init_reference, config.delta)
    state = AdamState.zeros(model.params.size)
    lr = np.full(model.params.size, config.lr)
    for name in ("E", "dE"):
        b = model.params.blocks[name]
        lr[b.offset:b.offset + b.size] *= config.decoder_lr_scale
    Y = cube.pixels
    n = cube.pixel_count
    batch = config.batch_pixels if 0 < config.batch_pixels < n else n
    out = TrainLog()
    for epoch in range(config.epochs):
        order = np.arange(n) if batch == n else Stream(config.seed, "batches", epoch).permutation(n)
        epoch_loss = None
        for start in range(0, n, batch):
            idx = order[start:start + batch]
            Yb = Y if batch == n else Y[:, idx]
            try:
                loss, grad = loss_and_grad(Yb, model, config.alpha, config.beta)
            except NonFiniteError as exc:
                raise NonFiniteError(f"epoch {epoch}: {exc}") from exc
            if not math.isfinite(loss):
                raise NonFiniteError(f"epoch {epoch}: loss is {loss}")
            if epoch_loss is None:
                epoch_loss = loss
            params, state = opt_step(model.params, grad, state, lr)
            model = model.with_params(params)
        out.losses.append(epoch_loss)
        log.debug("epoch %d loss %.6g", epoch, epoch_loss)
    out.final_loss = loss_total(cube, model, config.alpha, config.beta)
    out.seconds = time.perf_counter() - t0
    return model, out


# --------------------------------------------------------------------------
# checkpoint


def save_model(path, model: MildModel, config: TrainConfig | None = None) -> None:
    """Write ``path`` (MLDP parameters) and ``path.json`` (dims and config)."""
    path = Path(path)
    save_params(path, model.params)
    meta = {
        "t_count": model.t_count,
        "bands": model.bands,
        "endmember_count": model.endmember_count,
        "k_steps": model.k_steps,
        "delta": model.delta,
        "config": asdict(config) if config else None,
    }
    side = path.with_name(path.name + ".json")
    tmp = side.with_name(side.name + ".tmp")
    tmp.write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    tmp.replace(side)


def load_model(path) -> tuple[MildModel, TrainConfig | None]:
    path = Path(path)
    params = load_params(path)
    meta = json.loads(path.with_name(path.name + ".json").read_text())
    model = MildModel(params, meta["t_count"], meta["bands"], meta["endmember_count"],
                      meta["k_steps"], meta.get("delta", 1.0))
    expected = MildModel.create(model.t_count, model.bands, model.endmember_count, model.k_steps)
    if params.blocks != expected.params.blocks:
        raise ValueError(f"{path}: parameter layout does not match the sidecar dimensions")
    cfg = meta.get("config")
    return model, (TrainConfig.from_dict(cfg) if cfg else None)
