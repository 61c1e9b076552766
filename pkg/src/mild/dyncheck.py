"""Numerical checks of the discretisation's consistency, convergence and stability.

The latent ODE is ``dA/dt = G1(t) + G2(A)``. Three properties of its
trapezoidal discretisation are checked on small analytic problems:

* local truncation error of the explicit update
  ``A_new - z_new = A - z + (D/2) [2 G2(A) + D dG2(A)/dt]`` is O(D^2) per unit
  step (one-step error divided by D);
* the gap ``|A_t - z_t|`` between the z-recursion and the implicit
  A-recursion shrinks linearly in D;
* fused abundances move by at most ``(L2 D + 1)`` times a perturbation of the
  pseudo-abundances, with ``L2`` estimated from sampled Jacobians of the
  fusion networks.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy.linalg import expm

from .diffkit import LEAK
from .hsidata import SequenceCube
from .model import MildModel, encode_all, latent_fusion
from .rng import Stream

DEFAULT_STEPS = (0.1, 0.05, 0.025, 0.0125)
GAP_STEPS = 5
POWER_ITERATIONS = 20
STABILITY_PIXELS = 64
LIPSCHITZ_SAMPLES = 100
STABILITY_TOL = 1e-6


@dataclass(frozen=True)
class TestDynamics:
    """``dA/dt = g1(t) + g2(A)`` with a known Lipschitz constant for ``g2``."""

    __test__ = False  # not a pytest class

    name: str
    a0: np.ndarray
    g1: Callable[[float], np.ndarray]
    g2: Callable[[np.ndarray], np.ndarray]
    g2_jac: Callable[[np.ndarray], np.ndarray]
    lipschitz: float
    exact: Optional[Callable[[float], np.ndarray]] = None

    @property
    def g2_zero(self) -> bool:
        return self.lipschitz == 0.0

    def rhs(self, t: float, a: np.ndarray) -> np.ndarray:
        return self.g1(t) + self.g2(a)


@dataclass(frozen=True)
class OrderReport:
    steps: tuple
    errors: tuple
    slope: object  # float, or the string "exact" when every error is zero

    def __post_init__(self):
        if len(self.steps) < 4:
            raise ValueError("need at least 4 step sizes")

    @property
    def exact(self) -> bool:
        return self.slope == "exact"


def _zero(dim):
    return lambda *_: np.zeros(dim)


def zero_dynamics() -> TestDynamics:
    a0 = np.array([0.2, 0.3, 0.5])
    return TestDynamics("zero", a0, _zero(3), _zero(3), lambda a: np.zeros((3, 3)), 0.0,
                        lambda t: a0.copy())


def constant_dynamics() -> TestDynamics:
    # power-of-two rates and a zero start keep the arithmetic exact
    c = np.array([1.0, 0.5, 0.25])
    return TestDynamics("constant", np.zeros(3), lambda t: c.copy(), _zero(3),
                        lambda a: np.zeros((3, 3)), 0.0, lambda t: c * t)


def linear_decay() -> TestDynamics:
    return TestDynamics("linear_decay", np.array([1.0]), _zero(1), lambda a: -a,
                        lambda a: -np.eye(1), 1.0, lambda t: np.array([math.exp(-t)]))


def logistic() -> TestDynamics:
    a0 = 0.2

    def exact(t):
        e = math.exp(t)
        return np.array([a0 * e / (1.0 - a0 + a0 * e)])

    # |d/dA A(1-A)| = |1 - 2A| <= 1 on [0, 1]
    return TestDynamics("logistic", np.array([a0]), _zero(1), lambda a: a * (1.0 - a),
                        lambda a: np.diag(1.0 - 2.0 * a), 1.0, exact)


def rotation() -> TestDynamics:
    w = np.array([0.3, -0.5, 0.8])
    omega = np.array([[0.0, -w[2], w[1]], [w[2], 0.0, -w[0]], [-w[1], w[0], 0.0]])
    a0 = np.array([0.6, 0.3, 0.1])
    return TestDynamics("rotation", a0, _zero(3), lambda a: omega @ a, lambda a: omega,
                        float(np.linalg.norm(w)), lambda t: expm(omega * t) @ a0)


def suite() -> list[TestDynamics]:
    """The fixed test-problem suite."""
    return [constant_dynamics(), linear_decay(), logistic(), rotation()]


# --------------------------------------------------------------------------
# consistency


def explicit_step(dyn: TestDynamics, t: float, a: np.ndarray, step: float) -> np.ndarray:
    """One step of the explicit update from state ``a`` at time ``t``.

    The exogenous part advances by the trapezoidal z-increment; the G2 part
    uses ``2 G2(A) + D * dG2(A)/dt`` with ``dG2/dt = J_G2(A) dA/dt``.
    """
    dz = 0.5 * step * (dyn.g1(t) + dyn.g1(t + step))
    g2 = dyn.g2(a)
    dg2 = dyn.g2_jac(a) @ dyn.rhs(t, a)
    return a + dz + 0.5 * step * (2.0 * g2 + step * dg2)


def truncation_order(dyn: TestDynamics, steps=DEFAULT_STEPS, horizon: float = 1.0) -> OrderReport:
    """Max local truncation error ``|one-step error| / D`` for each step size.

    Errors are maximised over start times ``0, D, 2D, ...`` in ``[0, horizon)``
    and a least-squares slope of ``log(error)`` against ``log(D)`` is fitted.
    """
    if dyn.exact is None:
        raise ValueError(f"{dyn.name}: truncation order needs an analytic solution")
    steps = tuple(float(s) for s in steps)
    if len(steps) < 4:
        raise ValueError("need at least 4 step sizes")
    ratios = [steps[i] / steps[i + 1] for i in range(len(steps) - 1)]
    if any(s <= 0 for s in steps) or not np.allclose(ratios, ratios[0], rtol=1e-9):
        raise ValueError(f"step sizes {steps} are not a decreasing geometric sequence")
    errors = []
    for d in steps:
        worst = 0.0
        for k in range(int(math.floor(horizon / d + 1e-9))):
            t = k * d
            a_new = explicit_step(dyn, t, dyn.exact(t), d)
            worst = max(worst, float(np.max(np.abs(a_new - dyn.exact(t + d)))) / d)
        errors.append(worst)
    if all(e == 0.0 for e in errors):
        return OrderReport(steps, tuple(errors), "exact")
    if any(e == 0.0 for e in errors):
        raise ValueError(f"{dyn.name}: some but not all truncation errors are zero: {errors}")
    slope = float(np.polyfit(np.log(steps), np.log(errors), 1)[0])
    return OrderReport(steps, tuple(errors), slope)


# --------------------------------------------------------------------------
# convergence


def _solve_gap(dyn, z_t, d_prev, g2_prev, step, tol=1e-14, max_iter=50):
    # Newton on r(D) = D - d_prev - step/2 (G2(z_t + D) + g2_prev)
    dgap = d_prev.copy()
    eye = np.eye(len(dgap))
    for _ in range(max_iter):
        r = dgap - d_prev - 0.5 * step * (dyn.g2(z_t + dgap) + g2_prev)
        if np.max(np.abs(r)) <= tol:
            break
        dgap = dgap - np.linalg.solve(eye - 0.5 * step * dyn.g2_jac(z_t + dgap), r)
    return dgap


def trajectories(dyn: TestDynamics, step: float, n_steps: int = GAP_STEPS):
    """Integrate the z- and A-recursions from a shared start for ``n_steps``.

    The A-recursion is carried as the gap ``D_t = A_t - z_t``, so that it
    stays exactly zero when ``G2`` vanishes.
    """
    z = [dyn.a0.astype(np.float64).copy()]
    gap = [np.zeros_like(z[0])]
    for k in range(1, n_steps + 1):
        t0, t1 = (k - 1) * step, k * step
        z.append(z[-1] + 0.5 * step * (dyn.g1(t0) + dyn.g1(t1)))
        a_prev = z[-2] + gap[-1]
        gap.append(_solve_gap(dyn, z[-1], gap[-1], dyn.g2(a_prev), step))
    z = np.stack(z)
    a = z + np.stack(gap)
    return z, a


def convergence_gap(dyn: TestDynamics, step: float, n_steps: int = GAP_STEPS) -> float:
    """``max_t |A_t - z_t|`` over ``n_steps`` steps of size ``step``."""
    z, a = trajectories(dyn, step, n_steps)
    return float(np.max(np.abs(a - z)))


# --------------------------------------------------------------------------
# stability


def mlp_jacobian(layers, x: np.ndarray) -> np.ndarray:
    """Jacobian of a leaky-ReLU MLP with linear head at input ``x`` (out x in)."""
    J = np.eye(len(x))
    h = x
    for li, (W, b) in enumerate(layers):
        pre = h @ W + b
        J = W.T @ J
        if li < len(layers) - 1:
            slope = np.where(pre > 0, 1.0, LEAK)
            J = slope[:, None] * J
            h = np.where(pre > 0, pre, LEAK * pre)
    return J


def spectral_norm(J: np.ndarray, iterations: int = POWER_ITERATIONS) -> float:
    """Power-iteration estimate of the largest singular value."""
    v = np.ones(J.shape[1]) / math.sqrt(J.shape[1])
    s = 0.0
    for _ in range(iterations):
        w = J.T @ (J @ v)
        nw = np.linalg.norm(w)
        if nw == 0.0:
            return 0.0
        v = w / nw
        s = math.sqrt(nw)
    return float(np.linalg.norm(J @ v)) if s else 0.0


@dataclass(frozen=True)
class StabilityReport:
    ratio: float
    lipschitz: float  # estimated L2
    bound: float  # L2 * delta + 1
    per_time: tuple = field(default=())

    @property
    def ok(self) -> bool:
        return self.ratio <= self.bound + STABILITY_TOL


def _sample_pixels(n: int, seed: int, limit: int) -> np.ndarray:
    if n <= limit:
        return np.arange(n)
    return np.sort(Stream(seed, "stability-pixels").permutation(n)[:limit])


def estimate_lipschitz(model: MildModel, points: list, seed: int = 0,
                       n_random: int = LIPSCHITZ_SAMPLES) -> float:
    """Estimated L2: the largest sampled ``||J_F||`` over all frames, divided by delta.

    ``points[t]`` holds extra rows at which ``F_t`` is probed in addition to
    ``n_random`` random simplex points.
    """
    p = model.endmember_count
    rand = Stream(seed, "lipschitz").uniform((n_random, p))
    rand = -np.log(np.maximum(rand, 1e-300))
    rand /= rand.sum(axis=1, keepdims=True)  # uniform on the simplex
    worst = 0.0
    for t in range(model.t_count):
        layers = model.params.layers(f"fusion{t}")
        rows = np.vstack([rand, points[t]]) if len(points[t]) else rand
        for x in rows:
            worst = max(worst, spectral_norm(mlp_jacobian(layers, x)))
    return worst / model.delta


def stability_ratio(model: MildModel, cube: SequenceCube, eps: float, seed: int = 0,
                    max_pixels: int = STABILITY_PIXELS) -> StabilityReport:
    """Amplification of a pseudo-abundance perturbation through the fusion layer.

    A random direction of Frobenius norm ``eps`` is added to ``z_t`` of the
    sampled pixels at every frame (the perturbation is carried unchanged
    through the z-recursion). The ratio is
    ``max_t ||A1_t - A2_t|| / ||z1_t - z2_t||`` on the pre-projection fused
    abundances.
    """
    if not eps > 0:
        raise ValueError("perturbation size must be positive")
    idx = _sample_pixels(cube.pixel_count, seed, max_pixels)
    z1 = encode_all(model, cube).values[:, idx]
    delta = Stream(seed, "stability").normal(z1.shape[1:])
    delta *= eps / np.linalg.norm(delta)
    z2 = z1 + delta[None]
    ratios = []
    for t in range(model.t_count):
        dz = np.linalg.norm(z1[t] - z2[t])
        da = np.linalg.norm(latent_fusion(model, z1, t) - latent_fusion(model, z2, t))
        ratios.append(float(da / dz))
    # probe Jacobians on both trajectories and along the segments between them
    points = [np.vstack([z1[t], z2[t], 0.5 * (z1[t] + z2[t])]) for t in range(model.t_count)]
    l2 = estimate_lipschitz(model, points, seed)
    return StabilityReport(max(ratios), l2, l2 * model.delta + 1.0, tuple(ratios))


# --------------------------------------------------------------------------
# full suite


def run_suite(models=(), eps: float = 1e-3, seed: int = 0) -> dict:
    """All checks as a JSON-ready dict with an overall ``passed`` flag.

    ``models`` holds ``(label, model, cube)`` triples for the stability check.
    """
    report = {"truncation": [], "convergence": [], "stability": []}
    passed = True
    for dyn in suite():
        order = truncation_order(dyn)
        if order.exact:
            ok = True
        elif dyn.name in ("linear_decay", "logistic"):
            ok = 1.8 <= order.slope <= 2.2
        else:
            ok = order.slope >= 1.8
        report["truncation"].append({"problem": dyn.name, "steps": list(order.steps),
                                     "errors": list(order.errors), "slope": order.slope, "passed": ok})
        passed &= ok

        gaps = [convergence_gap(dyn, d) for d in DEFAULT_STEPS]
        small, large = convergence_gap(dyn, 1e-4), convergence_gap(dyn, 1e-1)
        if dyn.g2_zero:
            ok = all(g == 0.0 for g in gaps) and small == 0.0 and large == 0.0
            shrink = []
        else:
            shrink = [gaps[i] / gaps[i + 1] for i in range(len(gaps) - 1)]
            ok = all(s > 1.0 for s in shrink) and small < large
            if dyn.name == "linear_decay":
                ok &= all(1.7 <= s <= 2.3 for s in shrink)
        report["convergence"].append({"problem": dyn.name, "steps": list(DEFAULT_STEPS), "gaps": gaps,
                                      "shrink": shrink, "passed": bool(ok)})
        passed &= bool(ok)

    for label, model, cube in models:
        rep = stability_ratio(model, cube, eps, seed)
        report["stability"].append({"model": label, "ratio": rep.ratio, "lipschitz": rep.lipschitz,
                                    "bound": rep.bound, "passed": rep.ok})
        passed &= rep.ok
    report["passed"] = bool(passed)
    return report
