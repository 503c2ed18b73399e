"""Monte-Carlo validation of a feedback policy.

Two dynamics are available:

* ``"sde"``: Euler-Maruyama on the controlled surplus diffusion with
  first-order regime switching (probability q_ij dt per step) and reflection
  at +-B.
* ``"chain"``: the interpolated lattice chain itself, jumping between nodes
  with the transition probabilities and holding each state for dt^h. Its time
  average converges to exactly the gain the solver computes, which makes it
  the sharp oracle for the invariant-measure code; the SDE run in addition
  carries the O(h) lattice bias.

Paths are independent. Each draws from its own stream seeded through
``numpy.random.SeedSequence``, so results do not depend on the thread count.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Union

import numba
import numpy as np

from mcam.lattice import Grid, build_grid, transition_arrays
from mcam.model import Control, ModelParams, State, coefficients
from mcam.network import PolicyNet
from mcam.solver import TabularPolicy, gain_of_policy

logger = logging.getLogger(__name__)

# Prefer OpenMP so numba does not probe (and warn about) an old TBB.
numba.config.THREADING_LAYER_PRIORITY = ["omp", "workqueue", "tbb"]

_SWITCH_LIMIT = 0.1
_MIRROR, _CLAMP = 0, 1


class SimConfigError(ValueError):
    """Invalid simulation settings."""


@dataclass(frozen=True)
class SimConfig:
    dt: float = 0.01
    T: float = 2e5
    burn_in: float = 1e4
    n_paths: int = 16
    seed: int = 0
    reflection: str = "mirror"  # or "clamp"
    dynamics: str = "sde"  # or "chain"
    x0: float = 0.0
    regime0: int = 0
    lookup_h: float = 0.01  # lattice a network policy is tabulated on
    trace_every: float = 1000.0  # time between running-average checkpoints

    def __post_init__(self):
        errs = []
        if not 0 < self.dt < 1:
            errs.append("dt: must lie in (0, 1)")
        if not 0 <= self.burn_in < self.T:
            errs.append("burn_in: rule 0 <= burn_in < T violated")
        if self.n_paths < 1:
            errs.append("n_paths: must be >= 1")
        if self.reflection not in ("mirror", "clamp"):
            errs.append(f"reflection: unknown mode {self.reflection!r}")
        if self.dynamics not in ("sde", "chain"):
            errs.append(f"dynamics: unknown mode {self.dynamics!r}")
        if not self.lookup_h > 0 or not self.trace_every > 0:
            errs.append("lookup_h, trace_every: must be > 0")
        if errs:
            raise SimConfigError("invalid simulation config:\n  " + "\n  ".join(errs))

    def replace(self, **changes) -> "SimConfig":
        kwargs = {name: getattr(self, name) for name in self.__dataclass_fields__}
        kwargs.update(changes)
        return SimConfig(**kwargs)


@dataclass
class PathStats:
    time_avg_reward: float
    se: float
    occupation: np.ndarray  # (m0, n_bins), time fractions, sums to 1
    bin_centers: np.ndarray
    regime_fractions: np.ndarray
    regime_fractions_se: np.ndarray
    per_path: np.ndarray
    x_range: tuple[float, float]
    trace_times: np.ndarray = field(default_factory=lambda: np.zeros(0))
    traces: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))  # (paths, checkpoints)


def _check_switch_rate(params: ModelParams, dt: float) -> None:
    rate = float(np.max(np.abs(np.diag(params.Q))))
    if dt * rate >= _SWITCH_LIMIT:
        raise SimConfigError(f"dt * max|q_jj| = {dt * rate:.3g} must be below {_SWITCH_LIMIT}")


def _reflect(x: float, B: float, mode: int) -> float:
    if mode == _CLAMP:
        return min(max(x, -B), B)
    # fold onto [-B, B]; one reflection in practice, any number in principle
    y = (x + B) % (4.0 * B)
    if y > 2.0 * B:
        y = 4.0 * B - y
    return y - B


_reflect_nb = numba.njit(cache=True)(_reflect)


def step(
    params: ModelParams,
    state: State,
    u: Control,
    dt: float,
    rng: np.random.Generator,
    *,
    z: Optional[float] = None,
    noise_scale: float = 1.0,
    reflection: str = "mirror",
) -> State:
    """One Euler-Maruyama step followed by a possible regime switch.

    ``z`` replaces the Gaussian draw and ``noise_scale`` multiplies the
    diffusion; both exist for deterministic tests.
    """
    _check_switch_rate(params, dt)
    if reflection not in ("mirror", "clamp"):
        raise SimConfigError(f"reflection: unknown mode {reflection!r}")
    b, sig2, _ = coefficients(params, state.x, state.regime, u.a, u.s, u.l)
    if z is None:
        z = rng.standard_normal()
    x = state.x + float(b) * dt + noise_scale * np.sqrt(float(sig2)) * np.sqrt(dt) * z
    x = _reflect(x, params.B, _MIRROR if reflection == "mirror" else _CLAMP)
    regime = state.regime
    rates = params.Q[regime] * dt
    u_sw = rng.random()
    acc = 0.0
    for j in range(params.m0):
        if j == regime:
            continue
        acc += rates[j]
        if u_sw < acc:
            regime = j
            break
    return State(x, regime)


# --------------------------------------------------------------------------
# compiled kernels


@numba.njit(cache=True)
def _kahan(total, comp, value):
    y = value - comp
    t = total + y
    return t, (t - total) - y


@numba.njit(parallel=True, cache=True)
def _sde_paths(
    pol, x_lo, h, n_bins, B, K, base_a, base_c, mu, sC2, r1, r2, sS, Q, const_reward, use_const,
    dt, n_steps, n_burn, trace_stride, seeds, x0, i0, mode,
):
    P = seeds.shape[0]
    m0 = Q.shape[0]
    n_trace = (n_steps - n_burn) // trace_stride
    avg = np.zeros(P)
    occ = np.zeros((P, m0, n_bins))
    xmin = np.full(P, np.inf)
    xmax = np.full(P, -np.inf)
    traces = np.zeros((P, n_trace))
    sqdt = np.sqrt(dt)
    for p in numba.prange(P):
        np.random.seed(seeds[p])
        x = x0
        i = i0
        total = 0.0
        comp = 0.0
        for n in range(n_steps):
            k = int(np.floor((x - x_lo) / h + 0.5))
            k = min(max(k, 0), n_bins - 1)
            a = pol[i, k, 0]
            s = pol[i, k, 1]
            l = pol[i, k, 2]
            y = max(x - K, 0.0)
            f = base_c[i] + base_a[i] * a + (s * r1[i] + (1.0 - s - l) * r2) * y
            b = f - l * y
            sig = np.sqrt(a * a * sC2[i] + (s * sS[i] * y) ** 2)
            if use_const:
                f = const_reward
            if n >= n_burn:
                total, comp = _kahan(total, comp, f)
                occ[p, i, k] += 1.0
                done = n - n_burn + 1
                if done % trace_stride == 0:
                    traces[p, done // trace_stride - 1] = total / done
            x = _reflect_nb(x + b * dt + sig * sqdt * np.random.standard_normal(), B, mode)
            xmin[p] = min(xmin[p], x)
            xmax[p] = max(xmax[p], x)
            v = np.random.random()
            acc = 0.0
            for j in range(m0):
                if j != i:
                    acc += Q[i, j] * dt
                    if v < acc:
                        i = j
                        break
        kept = n_steps - n_burn
        avg[p] = total / kept
        for r in range(m0):
            for kk in range(n_bins):
                occ[p, r, kk] /= kept
    return avg, occ, xmin, xmax, traces


@numba.njit(parallel=True, cache=True)
def _chain_paths(p_up, p_down, p_sw, tau, fr, x_nodes, T, burn, trace_dt, n_trace, seeds, k0, i0):
    P = seeds.shape[0]
    m0, n = tau.shape
    avg = np.zeros(P)
    occ = np.zeros((P, m0, n))
    xmin = np.full(P, np.inf)
    xmax = np.full(P, -np.inf)
    traces = np.zeros((P, n_trace))
    for p in numba.prange(P):
        np.random.seed(seeds[p])
        k = k0
        i = i0
        t = 0.0
        num = 0.0
        num_c = 0.0
        den = 0.0
        den_c = 0.0
        next_trace = 0
        while t < T:
            if k == 0:
                k = 1
                continue
            if k == n - 1:
                k = n - 2
                continue
            d = tau[i, k]
            # occupation weight is the part of [t, t + d) after the burn-in
            w = min(t + d, T) - max(t, burn)
            if w > 0:
                num, num_c = _kahan(num, num_c, fr[i, k] * w)
                den, den_c = _kahan(den, den_c, w)
                occ[p, i, k] += w
            t += d
            while next_trace < n_trace and t - burn >= (next_trace + 1) * trace_dt:
                traces[p, next_trace] = num / den
                next_trace += 1
            xmin[p] = min(xmin[p], x_nodes[k])
            xmax[p] = max(xmax[p], x_nodes[k])
            v = np.random.random()
            if v < p_up[i, k]:
                k += 1
            elif v < p_up[i, k] + p_down[i, k]:
                k -= 1
            else:
                acc = p_up[i, k] + p_down[i, k]
                for j in range(m0):
                    acc += p_sw[i, k, j]
                    if v < acc:
                        i = j
                        break
        avg[p] = num / den
        for r in range(m0):
            for kk in range(n):
                occ[p, r, kk] /= den
    return avg, occ, xmin, xmax, traces


# --------------------------------------------------------------------------
# driver


def path_seeds(seed: int, n_paths: int) -> np.ndarray:
    children = np.random.SeedSequence(seed).spawn(n_paths)
    return np.array([c.generate_state(1)[0] for c in children], dtype=np.int64)


def as_tabular(policy: Union[TabularPolicy, PolicyNet], params: ModelParams, lookup_h: float) -> TabularPolicy:
    """Tabular policies pass through; a network is tabulated on a fine lookup lattice."""
    if isinstance(policy, TabularPolicy):
        return policy
    if isinstance(policy, PolicyNet):
        from mcam.refine import tabulate

        return tabulate(policy, params, build_grid(params.B, lookup_h, params.K))
    raise TypeError(f"cannot simulate a policy of type {type(policy).__name__}")


def set_threads(n: Optional[int]) -> int:
    if n is not None:
        numba.set_num_threads(max(1, min(int(n), numba.config.NUMBA_NUM_THREADS)))
    return numba.get_num_threads()


def _summarise(avg, occ, xmin, xmax, traces, centers, trace_times) -> PathStats:
    P = len(avg)
    se = float(np.std(avg, ddof=1) / np.sqrt(P)) if P > 1 else float("nan")
    if P > 1 and np.all(avg == avg[0]):
        se = 0.0
    occupation = occ.mean(axis=0)
    reg = occ.sum(axis=2)
    reg_se = reg.std(axis=0, ddof=1) / np.sqrt(P) if P > 1 else np.full(reg.shape[1], np.nan)
    return PathStats(
        time_avg_reward=float(avg.mean()),
        se=se,
        occupation=occupation,
        bin_centers=centers,
        regime_fractions=reg.mean(axis=0),
        regime_fractions_se=reg_se,
        per_path=avg,
        x_range=(float(xmin.min()), float(xmax.max())),
        trace_times=trace_times,
        traces=traces,
    )


def simulate(
    params: ModelParams,
    policy: Union[TabularPolicy, PolicyNet],
    config: SimConfig = SimConfig(),
) -> PathStats:
    """Long-run time-average reward and occupation measure over independent paths.

    SDE runs look controls up at the nearest node of the policy's grid and
    bin occupation on that grid. Chain runs need a tabular policy.
    """
    seeds = path_seeds(config.seed, config.n_paths)
    if not 0 <= config.regime0 < params.m0:
        raise SimConfigError(f"regime0: {config.regime0} out of range")
    if config.dynamics == "chain":
        if not isinstance(policy, TabularPolicy):
            raise TypeError("chain dynamics need a tabular policy")
        return _simulate_chain(params, policy, config, seeds)

    _check_switch_rate(params, config.dt)
    tab = as_tabular(policy, params, config.lookup_h)
    grid = tab.grid
    if grid.B != params.B:
        raise ValueError("policy grid does not cover [-B, B]")
    pol = np.stack([tab.a, tab.s, tab.l], axis=-1)
    mu, sC2 = params.mu_C, params.sigma_C2
    base_c = (1 + params.rho) * mu - (1 + params.beta) * mu  # terms free of a
    base_a = params.beta * mu  # coefficient of a
    n_steps = int(round(config.T / config.dt))
    n_burn = int(round(config.burn_in / config.dt))
    stride = max(1, int(round(config.trace_every / config.dt)))
    use_const = params.constant_reward is not None
    const = float(params.constant_reward) if use_const else 0.0
    avg, occ, xmin, xmax, traces = _sde_paths(
        pol, float(grid.nodes[0]), grid.h, grid.n, params.B, params.K, base_a, base_c, mu, sC2,
        params.r1, params.r2, params.sigma_S, np.ascontiguousarray(params.Q), const, use_const,
        config.dt, n_steps, n_burn, stride, seeds, float(config.x0), int(config.regime0),
        _MIRROR if config.reflection == "mirror" else _CLAMP,
    )
    times = config.dt * stride * np.arange(1, traces.shape[1] + 1)
    stats = _summarise(avg, occ, xmin, xmax, traces, grid.nodes.copy(), times)
    logger.info("simulate (sde): gamma %.6f +- %.6f over %d paths", stats.time_avg_reward, stats.se, config.n_paths)
    return stats


def _simulate_chain(params: ModelParams, policy: TabularPolicy, config: SimConfig, seeds) -> PathStats:
    grid = policy.grid
    m0, n = params.m0, grid.n
    x = np.broadcast_to(grid.nodes[None, :], (m0, n))
    r = np.broadcast_to(np.arange(m0)[:, None], (m0, n))
    sl = grid.interior
    t = transition_arrays(params, grid.h, x[:, sl], r[:, sl], policy.a[:, sl], policy.s[:, sl], policy.l[:, sl])
    p_up, p_down, tau, fr = (np.zeros((m0, n)) for _ in range(4))
    p_sw = np.zeros((m0, n, m0))
    p_up[:, sl], p_down[:, sl], tau[:, sl], fr[:, sl] = t.p_up, t.p_down, t.dt, t.reward
    p_sw[:, sl] = t.p_switch
    k0 = grid.index_of(float(np.clip(round(config.x0 / grid.h) * grid.h, -grid.B, grid.B)))
    n_trace = int((config.T - config.burn_in) // config.trace_every)
    avg, occ, xmin, xmax, traces = _chain_paths(
        p_up, p_down, p_sw, tau, fr, grid.nodes.copy(), float(config.T), float(config.burn_in),
        float(config.trace_every), n_trace, seeds, k0, int(config.regime0),
    )
    times = config.trace_every * np.arange(1, n_trace + 1)
    stats = _summarise(avg, occ, xmin, xmax, traces, grid.nodes.copy(), times)
    logger.info("simulate (chain): gamma %.6f +- %.6f over %d paths", stats.time_avg_reward, stats.se, config.n_paths)
    return stats


def occupation_vs_stationary(
    params: ModelParams, policy: TabularPolicy, config: SimConfig, grid: Optional[Grid] = None
) -> np.ndarray:
    """Per regime, the largest gap between empirical occupation and omega^h over nodes."""
    if not isinstance(policy, TabularPolicy):
        raise TypeError("occupation comparison needs a tabular policy")
    grid = grid or policy.grid
    if grid is not policy.grid and not np.array_equal(grid.nodes, policy.grid.nodes):
        raise ValueError("policy is not defined on the comparison grid")
    omega = gain_of_policy(policy, grid, params).diagnostics["omega"]
    stats = simulate(params, policy, config)
    return np.max(np.abs(stats.occupation - omega), axis=1)


# --------------------------------------------------------------------------
# CSV output


def write_occupation_csv(stats: PathStats, path: Union[str, Path]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["regime", "x", "occupation"])
        for i in range(stats.occupation.shape[0]):
            for x, o in zip(stats.bin_centers, stats.occupation[i]):
                w.writerow([i, repr(float(x)), repr(float(o))])


def write_trace_csv(stats: PathStats, path: Union[str, Path]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["path", "t", "running_mean_reward"])
        for p, row in enumerate(stats.traces):
            for t, v in zip(stats.trace_times, row):
                w.writerow([p, repr(float(t)), repr(float(v))])
