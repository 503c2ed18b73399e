"""Locally consistent Markov chain on the surplus lattice.

Interior rows use the upwind construction

    D       = sigma^2 + h |b| - h^2 q_ii
    p_up    = (sigma^2 / 2 + h b^+) / D
    p_down  = (sigma^2 / 2 + h b^-) / D
    p_ij    = q_ij h^2 / D                 (regime switch, j != i)
    dt      = h^2 / D

The two outermost nodes -(B+h) and B+h reflect instantaneously (dt = 0) back
onto -B and B without changing regime.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from mcam.model import Control, ModelParams, State, coefficient_derivatives, coefficients

_ALIGN_TOL = 1e-9


class AlignmentError(ValueError):
    """Raised when B or K is not an integer multiple of the grid step."""


class BoundaryFlag(enum.Enum):
    INTERIOR = "interior"
    LEFT_REFLECT = "left_reflect"
    RIGHT_REFLECT = "right_reflect"


def _steps(value: float, h: float, what: str) -> int:
    ratio = value / h
    k = int(round(ratio))
    if abs(ratio - k) > _ALIGN_TOL * max(1.0, abs(ratio)):
        raise AlignmentError(f"{what}={value} is not an integer multiple of h={h}")
    return k


@dataclass(frozen=True, eq=False)
class Grid:
    """Uniform lattice -(B+h), -B, ..., B, B+h with K on a node."""

    h: float
    B: float
    K: float
    nodes: np.ndarray
    K_index: int

    @property
    def n(self) -> int:
        return len(self.nodes)

    @property
    def interior(self) -> slice:
        return slice(1, self.n - 1)

    @property
    def interior_nodes(self) -> np.ndarray:
        return self.nodes[1:-1]

    def index_of(self, x: float) -> int:
        k = _steps(x + self.B + self.h, self.h, "x")
        if not 0 <= k < self.n:
            raise IndexError(f"x={x} is outside the grid")
        return k

    def boundary_flag(self, index: int) -> BoundaryFlag:
        if index == 0:
            return BoundaryFlag.LEFT_REFLECT
        if index == self.n - 1:
            return BoundaryFlag.RIGHT_REFLECT
        return BoundaryFlag.INTERIOR

    def subgrid_indices(self, coarse: "Grid") -> np.ndarray:
        """Indices of this grid's nodes that coincide with the interior of ``coarse``."""
        ratio = _steps(coarse.h, self.h, "coarse h")
        if ratio < 1 or coarse.B != self.B:
            raise AlignmentError("coarse grid is not a sub-lattice of this grid")
        offset = self.index_of(coarse.interior_nodes[0])
        return offset + ratio * np.arange(coarse.n - 2)


def build_grid(B: float, h: float, K: float) -> Grid:
    if h <= 0:
        raise ValueError("h must be positive")
    nB = _steps(B, h, "B")
    nK = _steps(K, h, "K")
    ks = np.arange(-(nB + 1), nB + 2)
    nodes = ks * h
    K_index = nK + nB + 1
    nodes[K_index] = K
    nodes[nB + 1] = 0.0
    nodes[1], nodes[-2] = -B, B
    nodes.setflags(write=False)
    return Grid(h=h, B=B, K=K, nodes=nodes, K_index=K_index)


@dataclass(frozen=True)
class TransitionRow:
    """One row of the chain. ``p_switch[j]`` is zero for the current regime."""

    p_up: float
    p_down: float
    p_switch: np.ndarray
    dt: float
    boundary_flag: BoundaryFlag
    D: float = float("nan")

    def total(self) -> float:
        return self.p_up + self.p_down + float(np.sum(self.p_switch))


class TransitionArrays(NamedTuple):
    p_up: np.ndarray
    p_down: np.ndarray
    p_switch: np.ndarray  # trailing axis over target regimes
    dt: np.ndarray
    D: np.ndarray
    drift: np.ndarray
    diffusion_sq: np.ndarray
    reward: np.ndarray


def transition_arrays(params: ModelParams, h: float, x, regime, a, s, l) -> TransitionArrays:
    """Vectorised interior transition probabilities and interpolation intervals."""
    regime = np.asarray(regime, dtype=int)
    b, sig2, f = coefficients(params, x, regime, a, s, l)
    qii = params.Q[regime, regime]
    D = sig2 + h * np.abs(b) - h * h * qii
    assert np.all(D > 0), "non-positive normaliser in transition probabilities"
    p_up = (0.5 * sig2 + h * np.maximum(b, 0.0)) / D
    p_down = (0.5 * sig2 + h * np.maximum(-b, 0.0)) / D
    qrow = params.Q[regime].copy()  # (..., m0)
    np.put_along_axis(qrow, regime[..., None], 0.0, axis=-1)
    p_switch = qrow * (h * h / D)[..., None]
    dt = h * h / D
    return TransitionArrays(p_up, p_down, p_switch, dt, D, b, sig2, f)


def transitions(params: ModelParams, grid: Grid, state: State, u: Control) -> TransitionRow:
    idx = grid.index_of(state.x)
    flag = grid.boundary_flag(idx)
    zeros = np.zeros(params.m0)
    if flag is BoundaryFlag.LEFT_REFLECT:
        return TransitionRow(1.0, 0.0, zeros, 0.0, flag)
    if flag is BoundaryFlag.RIGHT_REFLECT:
        return TransitionRow(0.0, 1.0, zeros, 0.0, flag)
    t = transition_arrays(params, grid.h, state.x, state.regime, u.a, u.s, u.l)
    return TransitionRow(
        float(t.p_up), float(t.p_down), np.asarray(t.p_switch, dtype=float), float(t.dt), flag, float(t.D)
    )


def chain_step_moments(row: TransitionRow, h: float) -> tuple[float, float]:
    """Conditional mean and variance of the surplus increment over one step."""
    mean = h * (row.p_up - row.p_down)
    var = h * h * (row.p_up + row.p_down) - mean * mean
    return mean, var


def backup_and_gradient(
    params: ModelParams,
    h: float,
    x,
    regime,
    a,
    s,
    l,
    v_up,
    v_down,
    v_switch,
    gain: float = 0.0,
    with_grad: bool = True,
):
    """One-step backup and its derivative with respect to (a, s, l).

    S = p_up v_up + p_down v_down + sum_j p_ij v_j + (f - gain) dt, with
    ``v_switch`` carrying the value in every regime along its last axis.
    Writing S = N / D, the derivative is dS = (dN - S dD) / D. At b = 0 the
    upwind split uses the one-sided convention d(b^+) = 1{b>0} db.
    """
    regime = np.asarray(regime, dtype=int)
    t = transition_arrays(params, h, x, regime, a, s, l)
    sw = np.sum(t.p_switch * v_switch, axis=-1)
    S = t.p_up * v_up + t.p_down * v_down + sw + (t.reward - gain) * t.dt
    if not with_grad:
        return S, None
    db, dsig2, df = coefficient_derivatives(params, x, regime, a, s)
    b = t.drift[..., None]
    vu, vd = np.asarray(v_up)[..., None], np.asarray(v_down)[..., None]
    pos = (b > 0).astype(float)
    neg = (b < 0).astype(float)
    dN = 0.5 * dsig2 * (vu + vd) + h * db * (pos * vu - neg * vd) + h * h * df
    dD = dsig2 + h * np.sign(b) * db
    grad = (dN - S[..., None] * dD) / t.D[..., None]
    return S, grad
