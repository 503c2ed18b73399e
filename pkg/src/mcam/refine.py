"""Continuous-state policy refinement on the fine lattice.

The coarse RVI policy is first imitated by a :class:`PolicyNet` (least
squares), then the network parameters are moved uphill on the global
objective

    G(theta) = mean over fine (node, regime) of S(x, i, V, N(x, i | theta)),

where S is the one-step backup of the lattice chain. Gradients of S with
respect to the controls are closed-form (see
:func:`mcam.lattice.backup_and_gradient`) and are pushed through the network
by hand-written backpropagation.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from mcam.lattice import Grid, backup_and_gradient
from mcam.model import ModelParams
from mcam.network import Adam, PolicyNet
from mcam.solver import (
    SEMI_MDP_RELAXATION,
    GainEstimate,
    RVIState,
    TabularPolicy,
    ValueTable,
    apply_boundary,
    build_action_table,
    gain_of_policy,
    policy_values,
    reference_state,
    rvi_solve,
)

logger = logging.getLogger(__name__)


class DivergenceError(FloatingPointError):
    """A loss or gradient became non-finite during training."""


@dataclass
class TrainConfig:
    h1: float = 1e-3  # ascent learning rate
    fit_lr: float = 1e-2
    epsilon3: float = 1e-6
    epsilon4: float = 1e-7
    fit_epochs: int = 5000
    ascend_epochs: int = 2000
    window: int = 100  # accepted steps over which a tolerance is measured
    width: int = 64
    seed: int = 0
    optimizer: str = "adam"  # or "sgd"

    def __post_init__(self):
        if min(self.h1, self.fit_lr, self.epsilon3, self.epsilon4) <= 0:
            raise ValueError("learning rates and tolerances must be positive")
        if self.window < 1:
            raise ValueError("window must be at least 1")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")


@dataclass
class TrainLog:
    values: list = field(default_factory=list)  # accepted objective values
    rejected: int = 0
    epochs: int = 0
    stop_reason: str = ""
    max_abs_deviation: float = float("nan")


def tabulate(net: PolicyNet, params: ModelParams, grid: Grid) -> TabularPolicy:
    """The network's controls at every node of ``grid``."""
    m0, n = params.m0, grid.n
    x = np.broadcast_to(grid.nodes[None, :], (m0, n))
    r = np.broadcast_to(np.arange(m0)[:, None], (m0, n))
    a, s, l = net.controls(x, r)
    return TabularPolicy(grid, a.reshape(m0, n), s.reshape(m0, n), l.reshape(m0, n))


# --------------------------------------------------------------------------
# generic accept/reject optimiser


def _optimise(theta, objective, config: TrainConfig, lr: float, max_epochs: int, tol: float, maximise: bool):
    """Gradient steps on ``objective`` that never accept a worse value.

    A step that fails to improve is rejected and the rate halved. Stops when
    the last ``config.window`` accepted steps together changed the objective
    by less than ``tol``, when the rate underflows, or after ``max_epochs``
    proposals. Single Adam steps are far smaller than the remaining progress,
    so a one-step test stops long before the fit is usable.
    """
    sign = 1.0 if maximise else -1.0
    value, grad = objective(theta)
    if not np.isfinite(value) or not np.all(np.isfinite(grad)):
        raise DivergenceError("non-finite objective at the starting point")
    log = TrainLog(values=[value])
    adam = Adam(theta.size)
    rate = lr
    for epoch in range(1, max_epochs + 1):
        log.epochs = epoch
        if config.optimizer == "adam":
            direction, state = adam.direction(grad)
        else:
            direction, state = grad, None
        candidate = theta + sign * rate * direction
        new_value, new_grad = objective(candidate)
        if not np.isfinite(new_value) or not np.all(np.isfinite(new_grad)):
            raise DivergenceError("non-finite objective or gradient; try a smaller learning rate")
        if sign * (new_value - value) > 0:
            if state is not None:
                adam.commit(state)
            theta, value, grad = candidate, new_value, new_grad
            log.values.append(value)
            w = config.window
            if len(log.values) > w and abs(value - log.values[-1 - w]) < tol:
                log.stop_reason = "tolerance"
                return theta, log
        else:
            log.rejected += 1
            rate *= 0.5
            adam = Adam(theta.size)  # stale momentum need not point downhill
            if rate < 1e-12:
                log.stop_reason = "step underflow"
                return theta, log
    log.stop_reason = "max epochs"
    return theta, log


# --------------------------------------------------------------------------
# least-squares fit to the coarse policy


def _fit_data(policy: TabularPolicy, params: ModelParams, grid: Grid):
    m0 = params.m0
    xs = grid.interior_nodes
    x = np.tile(xs, m0)
    r = np.repeat(np.arange(m0), len(xs))
    sl = grid.interior
    target = np.stack([policy.a[:, sl].ravel(), policy.s[:, sl].ravel(), policy.l[:, sl].ravel()], axis=1)
    return x, r, target


def fit_loss(net: PolicyNet, x, r, target, theta=None):
    """Mean squared control error and its parameter gradient."""
    if theta is not None:
        net.set_flat(theta)
    (a, s, l), cache = net.forward(x, r)
    err = np.stack([a, s, l], axis=1) - target
    loss = float(np.mean(err**2))
    grad = net.backward(cache, 2.0 * err / err.size)
    return loss, grad


def fit_to_tabular(
    net: PolicyNet, policy: TabularPolicy, grid: Grid, params: ModelParams, config: TrainConfig = None
) -> TrainLog:
    """Fit ``net`` in place to a tabular policy on the interior of ``grid``."""
    config = config or TrainConfig()
    if not policy.admissible(params)[:, grid.interior].all():
        raise ValueError("target policy is not admissible everywhere")
    x, r, target = _fit_data(policy, params, grid)
    theta, log = _optimise(
        net.get_flat(),
        lambda th: fit_loss(net, x, r, target, th),
        config,
        config.fit_lr,
        config.fit_epochs,
        config.epsilon3,
        maximise=False,
    )
    net.set_flat(theta)
    (a, s, l), _ = net.forward(x, r)
    log.max_abs_deviation = float(np.max(np.abs(np.stack([a, s, l], axis=1) - target)))
    logger.info(
        "fit: mse %.3e, max deviation %.4f after %d epochs (%s)",
        log.values[-1], log.max_abs_deviation, log.epochs, log.stop_reason,
    )
    return log


# --------------------------------------------------------------------------
# global objective


def _objective_terms(net: PolicyNet, values: np.ndarray, grid: Grid, params: ModelParams, gain: float, with_grad: bool):
    m0 = params.m0
    xs = grid.interior_nodes
    x = np.broadcast_to(xs[None, :], (m0, len(xs)))
    r = np.broadcast_to(np.arange(m0)[:, None], (m0, len(xs)))
    (a, s, l), cache = net.forward(x, r)
    shape = x.shape
    a, s, l = a.reshape(shape), s.reshape(shape), l.reshape(shape)
    v_up = values[:, 2:]
    v_down = values[:, :-2]
    v_sw = np.broadcast_to(values[:, 1:-1].T[None, :, :], shape + (m0,))
    S, dS = backup_and_gradient(params, grid.h, x, r, a, s, l, v_up, v_down, v_sw, gain, with_grad)
    return S, dS, cache


def global_objective(
    net: PolicyNet, values: np.ndarray, grid: Grid, params: ModelParams, gain: float = 0.0
) -> float:
    """Mean one-step backup over all interior (node, regime) pairs.

    ``values`` is the (m0, n) table on ``grid`` with its outer columns already
    holding the boundary values.
    """
    S, _, _ = _objective_terms(net, values, grid, params, gain, with_grad=False)
    return float(np.mean(S))


def objective_and_gradient(net, values, grid, params, gain=0.0, theta=None):
    if theta is not None:
        net.set_flat(theta)
    S, dS, cache = _objective_terms(net, values, grid, params, gain, with_grad=True)
    grad = net.backward(cache, dS.reshape(-1, 3) / S.size)
    return float(np.mean(S)), grad


def ascend(
    net: PolicyNet,
    values: np.ndarray,
    grid: Grid,
    params: ModelParams,
    config: TrainConfig = None,
    gain: float = 0.0,
) -> TrainLog:
    """Gradient ascent of G in place; accepted G values never decrease."""
    config = config or TrainConfig()
    theta, log = _optimise(
        net.get_flat(),
        lambda th: objective_and_gradient(net, values, grid, params, gain, th),
        config,
        config.h1,
        config.ascend_epochs,
        config.epsilon4,
        maximise=True,
    )
    net.set_flat(theta)
    logger.info("ascend: G %.6f -> %.6f in %d epochs (%s)", log.values[0], log.values[-1], log.epochs, log.stop_reason)
    return log


# --------------------------------------------------------------------------
# outer loop


@dataclass
class RefineResult:
    net: PolicyNet
    values: ValueTable
    gain: GainEstimate
    converged: bool
    rounds: int
    history: list = field(default_factory=list)
    coarse_policy: Optional[TabularPolicy] = None
    coarse_gain: Optional[GainEstimate] = None
    ascent_logs: list = field(default_factory=list)
    fit_logs: list = field(default_factory=list)


def _coarse_update(policy: TabularPolicy, state: RVIState, grid: Grid, params: ModelParams, variant, centering, ref, boundary):
    """One backup of the coarse values under the network's coarse-node controls."""
    U = state.values
    y0, r = ref
    if variant == "semi_mdp":
        Ut = U
        gain = state.gain
    else:
        Ut = U - (U[:, y0 : y0 + 1] if centering == "per_regime" else U[r, y0])
        gain = 0.0
    m0 = params.m0
    sl = grid.interior
    xs = np.broadcast_to(grid.interior_nodes[None, :], (m0, grid.n - 2))
    reg = np.broadcast_to(np.arange(m0)[:, None], xs.shape)
    v_sw = np.broadcast_to(Ut[:, 1:-1].T[None], xs.shape + (m0,))
    S, _ = backup_and_gradient(
        params, grid.h, xs, reg, policy.a[:, sl], policy.s[:, sl], policy.l[:, sl],
        Ut[:, 2:], Ut[:, :-2], v_sw, gain, with_grad=False,
    )
    new = np.empty_like(U)
    new[:, 1:-1] = S
    if variant == "semi_mdp":
        new[:, 1:-1] = (1.0 - SEMI_MDP_RELAXATION) * U[:, 1:-1] + SEMI_MDP_RELAXATION * S
        new[:, 1:-1] -= new[r, y0]
    apply_boundary(new, boundary)
    return RVIState(new, state.gain, state.sweeps, state.residual)


def global_iterate(
    params: ModelParams,
    coarse: Grid,
    fine: Grid,
    config: TrainConfig = None,
    epsilon1: float = 1e-4,
    w1: int = 20,
    *,
    epsilon2: float = 1e-6,
    max_sweeps: int = 100_000,
    resolution: Sequence[int] = (11, 11, 11),
    variant: str = "semi_mdp",
    centering: str = "per_regime",
    boundary: str = "reflect",
    action_fn=None,
) -> RefineResult:
    """Coarse RVI, network fit, fine-grid ascent and value update, repeated.

    Round k: RVI on ``coarse`` (warm-started from the previous coarse values),
    fit the network to the coarse policy, ascend G with the fine relative
    values V^{k-1}, then set V^k to the relative values of the refined policy
    on ``fine`` and apply one coarse backup under the network's controls.
    Stops once sum |V^k - V^{k-1}| < epsilon1, or after ``w1`` rounds, in
    which case the best round (by gain) is returned with ``converged=False``.
    """
    config = config or TrainConfig()
    fine.subgrid_indices(coarse)  # alignment check
    ref_c = reference_state(coarse)
    ref_f = reference_state(fine)
    table = build_action_table(params, coarse, resolution, action_fn)

    rvi_state: Optional[RVIState] = None
    fitted_theta = None
    last_target = None
    V = None
    V_gain = 0.0
    best = None
    result = RefineResult(None, None, None, False, 0)

    for k in range(1, w1 + 1):
        policy_c, _, est_c = rvi_solve(
            params, coarse, resolution, epsilon2, max_sweeps, variant,
            centering=centering, reference=ref_c, boundary=boundary, initial=rvi_state, table=table,
        )
        rvi_state = est_c.diagnostics["rvi_state"]
        result.coarse_policy, result.coarse_gain = policy_c, est_c

        target = np.stack([policy_c.a, policy_c.s, policy_c.l])
        net = PolicyNet.for_model(params, fine.h, config.width, config.seed)
        if last_target is not None and np.array_equal(target, last_target):
            net.set_flat(fitted_theta)
        else:
            result.fit_logs.append(fit_to_tabular(net, policy_c, coarse, params, config))
            fitted_theta, last_target = net.get_flat(), target

        if V is None:
            V, V_gain = policy_values(tabulate(net, params, fine), fine, params, variant, centering, ref_f, boundary)
        step_gain = V_gain if variant == "semi_mdp" else 0.0
        Vc = V if variant == "semi_mdp" else _centered(V, centering, ref_f)
        result.ascent_logs.append(ascend(net, Vc, fine, params, config, gain=step_gain))

        refined = tabulate(net, params, fine)
        V_new, V_gain = policy_values(refined, fine, params, variant, centering, ref_f, boundary)
        coarse_ctrl = tabulate(net, params, coarse)
        rvi_state = _coarse_update(coarse_ctrl, rvi_state, coarse, params, variant, centering, ref_c, boundary)

        change = float(np.sum(np.abs(V_new[:, 1:-1] - V[:, 1:-1])))
        V = V_new
        est = gain_of_policy(refined, fine, params)
        steps = np.diff(result.ascent_logs[-1].values)
        result.history.append({
            "round": k,
            "gain": est.gamma,
            "value_change": change,
            "coarse_gain": est_c.gamma,
            "fit_max_abs_deviation": result.fit_logs[-1].max_abs_deviation,
            "ascent_steps": len(steps),
            "ascent_min_increment": float(steps.min()) if len(steps) else 0.0,
        })
        logger.info("round %d: gain %.6f, sum|dV| %.3e", k, est.gamma, change)
        current = (net, ValueTable(V.copy(), ref_f), est)
        if best is None or est.gamma > best[2].gamma:
            best = current
        result.rounds = k
        if change < epsilon1:
            result.net, result.values, result.gain = current
            result.converged = True
            return result

    logger.warning("global iteration stopped after w1=%d rounds without meeting epsilon1", w1)
    result.net, result.values, result.gain = best
    return result


def _centered(V: np.ndarray, centering: str, ref) -> np.ndarray:
    y0, r = ref
    if centering == "per_regime":
        return V - V[:, y0 : y0 + 1]
    return V - V[r, y0]
