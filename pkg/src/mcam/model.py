"""Regime-switching surplus model: constants, drift, diffusion and reward.

The surplus follows

    dX = b(X, i, u) dt + sigma(X, i, u) dW,

with claims collapsed to their first two moments. Investment and dividends act
only on the part of the surplus above the regulatory threshold ``K``.

All coefficient functions come in two flavours: a scalar API taking
:class:`State` / :class:`Control` objects, and :func:`coefficients`, which is
vectorised over numpy arrays and is what the lattice and solver use.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple, Optional, Sequence

import numpy as np

_BOUND_TOL = 1e-12


class AdmissibilityError(ValueError):
    """Raised when a control lies outside the admissible control set."""


@dataclass(frozen=True)
class RegimeParams:
    """Market parameters of a single regime."""

    lam: float  # claim intensity
    r1: float  # risky return rate
    sigma_S: float  # risky-asset volatility


@dataclass(frozen=True, eq=False)
class ModelParams:
    """All market and regulatory constants plus the regime generator.

    ``constant_reward`` replaces the running reward by a constant when set. It
    exists so that every gain estimator can be checked against a known answer.
    """

    regimes: tuple[RegimeParams, ...]
    Q: np.ndarray
    EY: float
    EY2: float
    rho: float
    beta: float
    r2: float
    K: float
    B: float
    Ma: float
    Ms: float
    Ml: float
    constant_reward: Optional[float] = field(default=None)

    def __post_init__(self):
        object.__setattr__(self, "regimes", tuple(self.regimes))
        Q = np.array(self.Q, dtype=float)
        Q.setflags(write=False)
        object.__setattr__(self, "Q", Q)
        errors = model_errors(self)
        if errors:
            raise ValueError("invalid model parameters:\n  " + "\n  ".join(errors))

    @property
    def m0(self) -> int:
        return len(self.regimes)

    @property
    def lam(self) -> np.ndarray:
        return np.array([r.lam for r in self.regimes])

    @property
    def r1(self) -> np.ndarray:
        return np.array([r.r1 for r in self.regimes])

    @property
    def sigma_S(self) -> np.ndarray:
        return np.array([r.sigma_S for r in self.regimes])

    @property
    def mu_C(self) -> np.ndarray:
        return self.lam * self.EY

    @property
    def sigma_C2(self) -> np.ndarray:
        return self.lam * self.EY2

    def replace(self, **changes) -> "ModelParams":
        kwargs = {name: getattr(self, name) for name in self.__dataclass_fields__}
        kwargs.update(changes)
        return ModelParams(**kwargs)


def model_errors(p: ModelParams, prefix: str = "") -> list[str]:
    """Return every violated parameter invariant as ``"<field>: <rule>"``."""
    errs = []
    m0 = len(p.regimes)
    if m0 < 1:
        errs.append(f"{prefix}regimes: need at least one regime")
    for k, reg in enumerate(p.regimes):
        if not reg.lam > 0:
            errs.append(f"{prefix}regimes[{k}].lambda: must be > 0")
        if not reg.sigma_S > 0:
            errs.append(f"{prefix}regimes[{k}].sigma_S: must be > 0")
        if not p.r2 <= reg.r1:
            errs.append(f"{prefix}regimes[{k}].r1: rule r2 <= r1 violated ({p.r2} > {reg.r1})")
    Q = np.asarray(p.Q, dtype=float)
    if Q.shape != (m0, m0):
        errs.append(f"{prefix}Q: shape {Q.shape} does not match {m0} regimes")
    else:
        off = Q[~np.eye(m0, dtype=bool)]
        if np.any(off < 0):
            errs.append(f"{prefix}Q: off-diagonal entries must be >= 0")
        if np.any(np.abs(Q.sum(axis=1)) > 1e-12):
            errs.append(f"{prefix}Q: rows must sum to 0")
        if m0 > 1 and np.any(np.diag(Q) >= 0):
            errs.append(f"{prefix}Q: diagonal entries must be < 0")
    if not p.rho > 0:
        errs.append(f"{prefix}rho: must be > 0")
    if not p.beta > p.rho:
        errs.append(f"{prefix}beta: rule beta > rho violated ({p.beta} <= {p.rho})")
    if not 0 < p.K < p.B:
        errs.append(f"{prefix}K: rule 0 < K < B violated")
    if not 0 < p.Ma <= 1:
        errs.append(f"{prefix}Ma: must lie in (0, 1]")
    if not 0 <= p.Ms <= 1:
        errs.append(f"{prefix}Ms: must lie in [0, 1]")
    if not 0 <= p.Ml <= 1:
        errs.append(f"{prefix}Ml: must lie in [0, 1]")
    if not p.EY > 0:
        errs.append(f"{prefix}EY: must be > 0")
    if not p.EY2 >= p.EY**2:
        errs.append(f"{prefix}EY2: rule EY2 >= EY^2 violated")
    return errs


def table1_params(**overrides) -> ModelParams:
    """Two-regime parameter set used in the numerical example."""
    kwargs = dict(
        regimes=(RegimeParams(0.13, 0.08, 0.2), RegimeParams(0.28, 0.05, 0.4)),
        Q=np.array([[-0.05, 0.05], [0.1, -0.1]]),
        EY=1.0,
        EY2=1.0,
        rho=0.15,
        beta=0.25,
        r2=0.02,
        K=2.0,
        B=10.0,
        Ma=0.4,
        Ms=0.3,
        Ml=0.062,
    )
    kwargs.update(overrides)
    return ModelParams(**kwargs)


@dataclass(frozen=True)
class Control:
    a: float  # retention fraction
    s: float  # risky fraction
    l: float  # dividend fraction

    def astuple(self) -> tuple[float, float, float]:
        return (self.a, self.s, self.l)


@dataclass(frozen=True)
class State:
    x: float
    regime: int


class Coefficients(NamedTuple):
    drift: np.ndarray
    diffusion_sq: np.ndarray
    reward: np.ndarray


def _check_regime(params: ModelParams, regime: int) -> None:
    if not 0 <= regime < params.m0:
        raise IndexError(f"regime {regime} out of range for {params.m0} regimes")


def claim_moments(params: ModelParams, regime: int) -> tuple[float, float]:
    """Mean and variance rate of the aggregate claim process in ``regime``."""
    _check_regime(params, regime)
    lam = params.regimes[regime].lam
    return lam * params.EY, lam * params.EY2


def premium(params: ModelParams, regime: int) -> float:
    mu, _ = claim_moments(params, regime)
    return (1.0 + params.rho) * mu


def reinsurance_premium(params: ModelParams, regime: int, a: float) -> float:
    if not 0.0 <= a <= 1.0:
        raise AdmissibilityError(f"retention a={a} outside [0, 1]")
    mu, _ = claim_moments(params, regime)
    return (1.0 + params.beta) * (1.0 - a) * mu


def in_control_set(params: ModelParams, a, s, l) -> np.ndarray:
    """Bounds check of the admissible control set, ignoring the state."""
    a, s, l = np.asarray(a), np.asarray(s), np.asarray(l)
    tol = _BOUND_TOL
    ok_a = (a >= params.Ma - tol) & (a <= 1 + tol)
    ok_s = (s >= -tol) & (s <= params.Ms + tol)
    ok_l = (l == 0) | ((l >= params.Ml - tol) & (l <= 1 + tol))
    return ok_a & ok_s & ok_l & (s + l <= 1 + tol)


def is_admissible(params: ModelParams, state: State, u: Control) -> bool:
    """Whether ``u`` may be used at ``state``.

    Below or at the threshold K neither risky investment nor dividends are
    allowed, so s and l must be exactly zero there.
    """
    if not bool(in_control_set(params, u.a, u.s, u.l)):
        return False
    if state.x <= params.K and (u.s != 0 or u.l != 0):
        return False
    return True


def coefficients(params: ModelParams, x, regime, a, s, l) -> Coefficients:
    """Vectorised drift, squared diffusion and running reward.

    Arguments broadcast against each other; ``regime`` is an integer array.
    No admissibility check is made here.
    """
    x = np.asarray(x, dtype=float)
    regime = np.asarray(regime, dtype=int)
    a, s, l = (np.asarray(v, dtype=float) for v in (a, s, l))
    mu = params.mu_C[regime]
    sC2 = params.sigma_C2[regime]
    r1 = params.r1[regime]
    sS = params.sigma_S[regime]
    y = np.maximum(x - params.K, 0.0)
    base = (1 + params.rho) * mu - (1 + params.beta) * (1 - a) * mu - a * mu
    invest = (s * r1 + (1 - s - l) * params.r2) * y
    f = base + invest
    b = f - l * y
    sig2 = a * a * sC2 + (s * sS * y) ** 2
    if params.constant_reward is not None:
        f = np.full(np.broadcast(f, b).shape, float(params.constant_reward))
    return Coefficients(b, sig2, f)


def coefficient_derivatives(params: ModelParams, x, regime, a, s):
    """Partial derivatives of (drift, diffusion_sq, reward) w.r.t. (a, s, l).

    Returns three arrays of shape ``broadcast_shape + (3,)``. The model is
    affine in the controls except for the quadratic diffusion term.
    """
    x = np.asarray(x, dtype=float)
    regime = np.asarray(regime, dtype=int)
    a, s = np.asarray(a, dtype=float), np.asarray(s, dtype=float)
    shape = np.broadcast(x, regime, a, s).shape
    mu = params.mu_C[regime]
    y = np.maximum(x - params.K, 0.0)
    r1 = params.r1[regime]
    sS = params.sigma_S[regime]
    r2 = params.r2
    db = np.empty(shape + (3,))
    db[..., 0] = params.beta * mu
    db[..., 1] = (r1 - r2) * y
    db[..., 2] = -(1 + r2) * y
    dsig2 = np.empty(shape + (3,))
    dsig2[..., 0] = 2 * a * params.sigma_C2[regime]
    dsig2[..., 1] = 2 * s * (sS * y) ** 2
    dsig2[..., 2] = 0.0
    df = np.empty(shape + (3,))
    df[..., 0] = params.beta * mu
    df[..., 1] = (r1 - r2) * y
    df[..., 2] = -r2 * y
    if params.constant_reward is not None:
        df[...] = 0.0
    return db, dsig2, df


def _checked(params: ModelParams, state: State, u: Control) -> Coefficients:
    _check_regime(params, state.regime)
    if not bool(in_control_set(params, u.a, u.s, u.l)):
        raise AdmissibilityError(f"control {u} outside the admissible set")
    return coefficients(params, state.x, state.regime, u.a, u.s, u.l)


def drift(params: ModelParams, state: State, u: Control) -> float:
    return float(_checked(params, state, u).drift)


def diffusion_sq(params: ModelParams, state: State, u: Control) -> float:
    return float(_checked(params, state, u).diffusion_sq)


def reward(params: ModelParams, state: State, u: Control) -> float:
    return float(_checked(params, state, u).reward)


def linear_growth_constant(params: ModelParams) -> float:
    """A constant C with |b| + |sigma| <= C (1 + |x|) over all admissible controls."""
    mu = params.mu_C
    const = (1 + params.rho) * mu + (1 + params.beta) * mu + mu + np.sqrt(params.sigma_C2)
    slope = np.maximum(params.r1, params.r2) + params.r2 + 1 + params.sigma_S
    return float(np.max(const + slope * (1 + params.K)))


def regime_stationary(params: ModelParams) -> np.ndarray:
    """Stationary law of the regime chain alone: pi Q = 0, sum(pi) = 1."""
    m0 = params.m0
    A = np.vstack([params.Q.T, np.ones(m0)])
    rhs = np.zeros(m0 + 1)
    rhs[-1] = 1.0
    pi, *_ = np.linalg.lstsq(A, rhs, rcond=None)
    return pi


def controls_as_arrays(controls: Sequence[Control]) -> np.ndarray:
    return np.array([c.astuple() for c in controls], dtype=float).reshape(-1, 3)
