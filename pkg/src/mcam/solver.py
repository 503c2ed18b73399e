"""Average-reward dynamic programming on the lattice chain.

Two relative value iteration variants are provided:

``paper``
    U_{t+1} = max_u [ sum p(u) (U_t - U_t(y0, .)) + f(u) dt(u) ].
    Its fixed point maximises reward *per chain step*; with a state- and
    control-dependent dt that is not the per-time gain.

``semi_mdp`` (default)
    U_{t+1} = (1 - k) U_t + k max_u [ (f(u) - g_t) dt(u) + sum p(u) U_t ],
    renormalised so that U(y0, ref) = 0, with the gain estimate g updated
    from the change at the reference state. Its fixed point is the
    semi-Markov optimality equation, so the argmax policy maximises the
    long-run time average. The lattice chain has period 2 (every move flips
    the parity of node index plus regime), and plain iteration can then
    cycle forever between two policies; the relaxation k < 1 adds a
    self-loop that removes the cycle without changing any argmax.

Whatever variant is used, the reported gain comes from the invariant measure
of the returned policy, not from the iteration itself.
"""

from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
import scipy.linalg
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from mcam.lattice import Grid, transition_arrays, transitions
from mcam.model import Control, ModelParams, State, in_control_set

logger = logging.getLogger(__name__)

VARIANTS = ("paper", "semi_mdp")
CENTERINGS = ("per_regime", "scalar")
BOUNDARIES = ("reflect", "extrapolate")
SEMI_MDP_RELAXATION = 0.9


class ConvergenceError(RuntimeError):
    """Iteration budget exhausted before the tolerance was met."""

    def __init__(self, message: str, residual: float):
        super().__init__(f"{message} (last residual {residual:.3e})")
        self.residual = residual


class ReducibleChainError(np.linalg.LinAlgError):
    """The chain has no unique stationary distribution."""


@dataclass
class GainEstimate:
    gamma: float
    method: str
    residual: float
    se: float = 0.0
    diagnostics: dict = field(default_factory=dict)


@dataclass(eq=False)
class TabularPolicy:
    """Controls indexed by (regime, node); arrays have shape (m0, n)."""

    grid: Grid
    a: np.ndarray
    s: np.ndarray
    l: np.ndarray

    def control(self, state: State) -> Control:
        k = self.grid.index_of(state.x)
        i = state.regime
        return Control(float(self.a[i, k]), float(self.s[i, k]), float(self.l[i, k]))

    @classmethod
    def constant(cls, params: ModelParams, grid: Grid, u: Control) -> "TabularPolicy":
        """The same control everywhere, with s = l = 0 at or below K."""
        shape = (params.m0, grid.n)
        above = grid.nodes > params.K
        a = np.full(shape, u.a)
        s = np.where(above, u.s, 0.0) * np.ones(shape)
        l = np.where(above, u.l, 0.0) * np.ones(shape)
        return cls(grid, a, s, l)

    def admissible(self, params: ModelParams) -> np.ndarray:
        x = self.grid.nodes[None, :]
        ok = in_control_set(params, self.a, self.s, self.l)
        below = x <= params.K
        return ok & ~(below & ((self.s != 0) | (self.l != 0)))


@dataclass(eq=False)
class ValueTable:
    values: np.ndarray  # (m0, n)
    reference: tuple[int, int]  # (node index, regime)


# --------------------------------------------------------------------------
# actions and single backups


def action_grid(params: ModelParams, state: State, resolution: Sequence[int] = (11, 11, 11)) -> list[Control]:
    """Finite admissible action set at ``state``, sorted lexicographically.

    Dividend values are {0} plus ``resolution[2]`` points spanning [Ml, 1].
    """
    ra, rs, rl = resolution
    if min(ra, rs, rl) < 2:
        raise ValueError("need at least 2 points per control dimension")
    a_vals = np.linspace(params.Ma, 1.0, ra)
    if state.x <= params.K:
        return [Control(float(a), 0.0, 0.0) for a in np.unique(a_vals)]
    s_vals = np.unique(np.linspace(0.0, params.Ms, rs))
    l_vals = np.unique(np.concatenate([[0.0], np.linspace(params.Ml, 1.0, rl)]))
    out = []
    for a, s, l in itertools.product(np.unique(a_vals), s_vals, l_vals):
        if s + l <= 1.0 + 1e-12:
            out.append(Control(float(a), float(s), float(l)))
    return out


def bellman_backup(
    state: State,
    values: np.ndarray,
    u: Control,
    grid: Grid,
    params: ModelParams,
    gain: float = 0.0,
) -> float:
    """S = p_up U(x+h) + p_down U(x-h) + sum_j p_j U(x, j) + (f - gain) dt.

    ``values`` is the (already centred) table of shape (m0, n) on ``grid``,
    with its two outer columns holding the boundary values.
    """
    k = grid.index_of(state.x)
    if not 0 < k < grid.n - 1:
        raise ValueError("bellman_backup needs an interior state")
    row = transitions(params, grid, state, u)
    f = params.constant_reward
    if f is None:
        from mcam.model import reward

        f = reward(params, state, u)
    i = state.regime
    return (
        row.p_up * values[i, k + 1]
        + row.p_down * values[i, k - 1]
        + float(np.dot(row.p_switch, values[:, k]))
        + (f - gain) * row.dt
    )


def boundary_extrapolate(values: np.ndarray) -> tuple:
    """Linear ghost values one step beyond both ends of the last axis."""
    v = np.asarray(values, dtype=float)
    if v.shape[-1] < 3:
        raise ValueError("need at least 3 nodes to extrapolate")
    left = 2.0 * v[..., 0] - v[..., 1]
    right = 2.0 * v[..., -1] - v[..., -2]
    return left, right


def apply_boundary(values: np.ndarray, mode: str = "reflect") -> np.ndarray:
    """Fill the two outer columns of a (m0, n) table in place."""
    if mode == "reflect":
        values[:, 0] = values[:, 1]
        values[:, -1] = values[:, -2]
    elif mode == "extrapolate":
        left, right = boundary_extrapolate(values[:, 1:-1])
        values[:, 0] = left
        values[:, -1] = right
    else:
        raise ValueError(f"unknown boundary mode {mode!r}")
    return values


# --------------------------------------------------------------------------
# relative value iteration


@dataclass(eq=False)
class ActionTable:
    """Dense transition data over (regime, interior node, action)."""

    controls: np.ndarray  # (m0, n_int, A, 3)
    valid: np.ndarray  # (m0, n_int, A)
    p_up: np.ndarray
    p_down: np.ndarray
    p_switch: np.ndarray  # (m0, n_int, A, m0)
    dt: np.ndarray
    fdt: np.ndarray

    @property
    def base(self) -> np.ndarray:
        """f dt on valid actions, -inf on padding."""
        if "_base" not in self.__dict__:
            self.__dict__["_base"] = np.where(self.valid, self.fdt, -np.inf)
        return self.__dict__["_base"]


def build_action_table(
    params: ModelParams,
    grid: Grid,
    resolution: Sequence[int] = (11, 11, 11),
    action_fn: Optional[Callable[[State], Sequence[Control]]] = None,
) -> ActionTable:
    if action_fn is None:
        action_fn = lambda st: action_grid(params, st, resolution)  # noqa: E731
    xs = grid.interior_nodes
    m0, n_int = params.m0, len(xs)
    per_node = [[action_fn(State(float(x), i)) for x in xs] for i in range(m0)]
    A = max(len(acts) for row in per_node for acts in row)
    controls = np.zeros((m0, n_int, A, 3))
    valid = np.zeros((m0, n_int, A), dtype=bool)
    for i in range(m0):
        for k, acts in enumerate(per_node[i]):
            arr = np.array([c.astuple() for c in acts], dtype=float)
            controls[i, k, : len(arr)] = arr
            controls[i, k, len(arr) :] = arr[0]
            valid[i, k, : len(arr)] = True
    x = xs[None, :, None]
    regime = np.arange(m0)[:, None, None]
    t = transition_arrays(params, grid.h, x, regime, controls[..., 0], controls[..., 1], controls[..., 2])
    return ActionTable(controls, valid, t.p_up, t.p_down, t.p_switch, t.dt, t.reward * t.dt)


def _center(U: np.ndarray, variant: str, centering: str, ref: tuple[int, int]) -> np.ndarray:
    if variant == "semi_mdp":
        return U
    y0, r = ref
    if centering == "per_regime":
        return U - U[:, y0 : y0 + 1]
    return U - U[r, y0]


def _sweep(table: ActionTable, Ut: np.ndarray, gain: float):
    """All backups of one Jacobi sweep; returns (best values, argmax index)."""
    S = table.p_up * Ut[:, 2:, None]
    S += table.p_down * Ut[:, :-2, None]
    for jr in range(Ut.shape[0]):
        S += table.p_switch[..., jr] * Ut[jr, 1:-1][None, :, None]
    S += table.base
    if gain:
        S -= gain * table.dt
    j = np.argmax(S, axis=-1)
    best = np.take_along_axis(S, j[..., None], axis=-1)[..., 0]
    return best, j


def _policy_from_argmax(grid: Grid, table: ActionTable, j: np.ndarray) -> TabularPolicy:
    ctrl = np.take_along_axis(table.controls, j[..., None, None], axis=2)[:, :, 0, :]
    m0 = ctrl.shape[0]
    full = np.empty((m0, grid.n, 3))
    full[:, 1:-1] = ctrl
    full[:, 0] = ctrl[:, 0]
    full[:, -1] = ctrl[:, -1]
    return TabularPolicy(grid, full[..., 0].copy(), full[..., 1].copy(), full[..., 2].copy())


def reference_state(grid: Grid, x0: float = 0.0, regime: int = 0) -> tuple[int, int]:
    return grid.index_of(x0), regime


@dataclass
class RVIState:
    """Raw iterate and gain estimate, for warm-starting a later call."""

    values: np.ndarray
    gain: float
    sweeps: int
    residual: float


def relative_value_iteration(
    table: ActionTable,
    grid: Grid,
    epsilon2: float = 1e-6,
    max_sweeps: int = 100_000,
    variant: str = "semi_mdp",
    centering: str = "per_regime",
    reference: tuple[int, int] = None,
    boundary: str = "reflect",
    initial: Optional[RVIState] = None,
    relaxation: Optional[float] = None,
) -> tuple[np.ndarray, RVIState]:
    """Run RVI on a prepared action table; returns (argmax indices, final state).

    ``relaxation`` defaults to :data:`SEMI_MDP_RELAXATION` for ``semi_mdp``
    and to 1 (the plain recursion) for ``paper``.
    """
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}")
    if centering not in CENTERINGS:
        raise ValueError(f"unknown centering {centering!r}")
    if epsilon2 <= 0:
        raise ValueError("epsilon2 must be positive")
    if relaxation is None:
        relaxation = SEMI_MDP_RELAXATION if variant == "semi_mdp" else 1.0
    kappa = float(relaxation)
    if not 0.0 < kappa <= 1.0:
        raise ValueError("relaxation must lie in (0, 1]")
    ref = reference if reference is not None else reference_state(grid)
    y0, r = ref
    m0 = table.p_up.shape[0]
    U = np.zeros((m0, grid.n)) if initial is None else initial.values.copy()
    gain = 0.0 if initial is None else initial.gain
    apply_boundary(U, boundary)
    residual = np.inf
    for t in range(1, max_sweeps + 1):
        Ut = _center(U, variant, centering, ref)
        best, j = _sweep(table, Ut, gain if variant == "semi_mdp" else 0.0)
        new = np.empty_like(U)
        new[:, 1:-1] = best if kappa == 1.0 else (1.0 - kappa) * U[:, 1:-1] + kappa * best
        if variant == "semi_mdp":
            k = y0 - 1
            dt_ref = table.dt[r, k, j[r, k]]
            gain = gain + (new[r, y0] - U[r, y0]) / (kappa * dt_ref)
            new[:, 1:-1] -= new[r, y0]
        apply_boundary(new, boundary)
        residual = float(np.max(np.abs(new[:, 1:-1] - U[:, 1:-1])))
        U = new
        if not np.isfinite(residual):
            raise ConvergenceError("relative value iteration diverged", residual)
        if residual < epsilon2:
            logger.debug("RVI (%s) converged after %d sweeps", variant, t)
            return j, RVIState(U, gain, t, residual)
    raise ConvergenceError(f"RVI did not converge in {max_sweeps} sweeps", residual)


def rvi_solve(
    params: ModelParams,
    grid: Grid,
    resolution: Sequence[int] = (11, 11, 11),
    epsilon2: float = 1e-6,
    max_sweeps: int = 100_000,
    variant: str = "semi_mdp",
    *,
    centering: str = "per_regime",
    reference: tuple[int, int] = None,
    boundary: str = "reflect",
    initial: Optional[RVIState] = None,
    action_fn: Optional[Callable[[State], Sequence[Control]]] = None,
    table: Optional[ActionTable] = None,
    relaxation: Optional[float] = None,
) -> tuple[TabularPolicy, ValueTable, GainEstimate]:
    """Optimal tabular policy on ``grid`` by relative value iteration.

    Raises:
        ConvergenceError: if ``max_sweeps`` is reached first.
    """
    if table is None:
        table = build_action_table(params, grid, resolution, action_fn)
    ref = reference if reference is not None else reference_state(grid)
    j, state = relative_value_iteration(
        table, grid, epsilon2, max_sweeps, variant, centering, ref, boundary, initial, relaxation
    )
    policy = _policy_from_argmax(grid, table, j)
    est = gain_of_policy(policy, grid, params)
    est.residual = state.residual
    est.diagnostics.update(
        sweeps=state.sweeps, iteration_gain=state.gain if variant == "semi_mdp" else None, variant=variant
    )
    est.diagnostics["rvi_state"] = state
    return policy, ValueTable(state.values, ref), est


# --------------------------------------------------------------------------
# policy evaluation


def policy_chain(policy: TabularPolicy, grid: Grid, params: ModelParams):
    """Sparse transition matrix plus per-state dt and reward.

    States are ordered regime-major: index = regime * n + node.
    """
    n, m0 = grid.n, params.m0
    x = grid.interior_nodes[None, :]
    regime = np.arange(m0)[:, None]
    sl = grid.interior
    t = transition_arrays(params, grid.h, x, regime, policy.a[:, sl], policy.s[:, sl], policy.l[:, sl])
    idx = np.arange(m0 * n).reshape(m0, n)
    src = idx[:, 1:-1]
    rows = [src, src]
    cols = [idx[:, 2:], idx[:, :-2]]
    vals = [t.p_up, t.p_down]
    for j in range(m0):
        rows.append(src)
        cols.append(np.broadcast_to(idx[j, 1:-1], src.shape))
        vals.append(t.p_switch[..., j])
    rows += [idx[:, 0], idx[:, -1]]
    cols += [idx[:, 1], idx[:, -2]]
    vals += [np.ones(m0), np.ones(m0)]
    P = sp.csr_matrix(
        (np.concatenate([v.ravel() for v in vals]), (np.concatenate([r.ravel() for r in rows]), np.concatenate([c.ravel() for c in cols]))),
        shape=(m0 * n, m0 * n),
    )
    dt = np.zeros((m0, n))
    f = np.zeros((m0, n))
    dt[:, 1:-1] = t.dt
    f[:, 1:-1] = t.reward
    return P, dt.ravel(), f.ravel()


def stationary_vector(P, method: str = "linear_solve", tol: float = 1e-14, max_iter: int = 200) -> np.ndarray:
    """Stationary distribution nu = nu P of a row-stochastic matrix.

    ``power_iteration`` iterates the lazy chain (I + P) / 2, which has the same
    stationary law and is aperiodic; the lattice chain itself has period 2.
    Successive squaring is used so each round doubles the number of steps.
    """
    N = P.shape[0]
    if method == "linear_solve":
        A = sp.csc_matrix(P).T - sp.identity(N, format="csc")
        A = A.tolil()
        A[0, :] = np.ones(N)
        rhs = np.zeros(N)
        rhs[0] = 1.0
        try:
            nu = spla.splu(A.tocsc()).solve(rhs)
        except RuntimeError as exc:
            raise ReducibleChainError(f"singular stationary system: {exc}") from exc
    elif method == "power_iteration":
        M = 0.5 * (np.eye(N) + (P.toarray() if sp.issparse(P) else np.asarray(P)))
        nu = np.full(N, 1.0 / N)
        for _ in range(max_iter):
            nxt = nu @ M
            nxt /= nxt.sum()
            change = np.abs(nxt - nu).sum()
            nu = nxt
            if change < tol:
                break
            M = M @ M
            M /= M.sum(axis=1, keepdims=True)
        else:
            raise ReducibleChainError("power iteration did not settle")
    else:
        raise ValueError(f"unknown method {method!r}")
    if not np.all(np.isfinite(nu)) or np.any(nu < -1e-10):
        raise ReducibleChainError("stationary solve produced an invalid distribution")
    nu = np.clip(nu, 0.0, None)
    nu /= nu.sum()
    res = np.abs(P.T @ nu - nu).max() if sp.issparse(P) else np.abs(nu @ P - nu).max()
    if res > 1e-9:
        raise ReducibleChainError(f"stationary residual {res:.2e} too large; chain may be reducible")
    return nu


def stationary_distribution(
    policy: TabularPolicy, grid: Grid, params: ModelParams, method: str = "linear_solve"
) -> np.ndarray:
    P, _, _ = policy_chain(policy, grid, params)
    return stationary_vector(P, method).reshape(params.m0, grid.n)


def gain_of_policy(
    policy: TabularPolicy, grid: Grid, params: ModelParams, method: str = "linear_solve"
) -> GainEstimate:
    """Long-run average reward of a fixed policy from its invariant measure.

    The ratio sum(f dt nu) / sum(dt nu) and the occupation-time weighted sum
    sum(f omega) are both computed; their difference is the residual.
    """
    P, dt, f = policy_chain(policy, grid, params)
    nu = stationary_vector(P, method)
    w = dt * nu
    ratio = float(np.dot(f, w) / w.sum())
    omega = w / w.sum()
    weighted = float(np.dot(f, omega))
    m0, n = params.m0, grid.n
    return GainEstimate(
        gamma=ratio,
        method="invariant_measure",
        residual=abs(ratio - weighted),
        diagnostics={"nu": nu.reshape(m0, n), "omega": omega.reshape(m0, n), "omega_gain": weighted},
    )


def policy_values(
    policy: TabularPolicy,
    grid: Grid,
    params: ModelParams,
    variant: str = "semi_mdp",
    centering: str = "per_regime",
    reference: tuple[int, int] = None,
    boundary: str = "reflect",
) -> tuple[np.ndarray, float]:
    """Fixed point of the centred backup for a fixed policy, by a direct solve.

    For ``semi_mdp`` this solves V = P V + (f - g) dt with V(y0, ref) = 0 and
    returns (V, g). For ``paper`` it solves V = P (V - C V) + f dt, with C the
    centering operator, and returns (V, V(y0, ref)).
    """
    ref = reference if reference is not None else reference_state(grid)
    y0, r = ref
    m0, n = params.m0, grid.n
    N = m0 * n
    P, dt, f = policy_chain(policy, grid, params)
    P = P.tolil()
    idx = np.arange(N).reshape(m0, n)
    for i in range(m0):
        for k, nb in ((0, 1), (n - 1, n - 2)):
            P[idx[i, k], :] = 0
            if boundary == "extrapolate":
                P[idx[i, k], idx[i, nb]] = 2.0
                P[idx[i, k], idx[i, 2 * nb - k]] = -1.0
            else:
                P[idx[i, k], idx[i, nb]] = 1.0
    P = P.tocsr()
    I = sp.identity(N, format="csr")
    if variant == "semi_mdp":
        A = sp.bmat([[I - P, sp.csr_matrix(dt[:, None])], [sp.csr_matrix(([1.0], ([0], [idx[r, y0]])), shape=(1, N)), None]])
        rhs = np.concatenate([f * dt, [0.0]])
        sol = spla.spsolve(A.tocsc(), rhs)
        return sol[:N].reshape(m0, n), float(sol[N])
    C = sp.lil_matrix((N, N))
    for i in range(m0):
        col = idx[i, y0] if centering == "per_regime" else idx[r, y0]
        C[idx[i], col] = 1.0
    interior = np.zeros(N)
    interior[idx[:, 1:-1].ravel()] = 1.0
    A = I - P + sp.diags(interior) @ P @ C.tocsr()
    V = spla.spsolve(A.tocsc(), f * dt).reshape(m0, n)
    return V, float(V[r, y0])


def brute_force_gain(P: np.ndarray, dt: np.ndarray, f: np.ndarray) -> float:
    """Independent dense oracle: left null vector of P - I via an SVD."""
    P = np.asarray(P.toarray() if sp.issparse(P) else P, dtype=float)
    ns = scipy.linalg.null_space((P - np.eye(len(P))).T)
    if ns.shape[1] != 1:
        raise ReducibleChainError(f"null space has dimension {ns.shape[1]}")
    nu = ns[:, 0] / ns[:, 0].sum()
    return float(np.dot(f * dt, nu) / np.dot(dt, nu))
