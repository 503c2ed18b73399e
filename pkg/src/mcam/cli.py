"""Command-line driver: ``mcam --config FILE --mode MODE --out DIR``.

Modes
  rvi          coarse-grid relative value iteration
  refine       coarse RVI + network refinement on the fine grid
  simulate     Monte-Carlo run of a stored policy (``--policy``)
  eval-policy  invariant-measure gain of a stored tabular policy
  full         refine, then simulate the refined policy

Exit status is 0 on success, 1 on any error and 2 when the outer refinement
loop hit its round cap without meeting epsilon1 (results are still written).
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from mcam.config import ConfigError, RunConfig, config_to_dict, parse_config, shipped_config
from mcam.lattice import Grid, build_grid
from mcam.model import ModelParams
from mcam.network import PolicyNet
from mcam.refine import global_iterate, tabulate
from mcam.sim import PathStats, set_threads, simulate, write_occupation_csv, write_trace_csv
from mcam.solver import GainEstimate, TabularPolicy, gain_of_policy, policy_values, rvi_solve

logger = logging.getLogger("mcam")

EXIT_OK, EXIT_ERROR, EXIT_NOT_CONVERGED = 0, 1, 2


# --------------------------------------------------------------------------
# table I/O


def write_policy_csv(policy: TabularPolicy, path) -> None:
    """One row per (regime, node); floats use repr so that re-reading is lossless."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["regime", "x", "a", "s", "l"])
        for i in range(policy.a.shape[0]):
            for k, x in enumerate(policy.grid.nodes):
                w.writerow([i, repr(float(x)), repr(float(policy.a[i, k])), repr(float(policy.s[i, k])),
                            repr(float(policy.l[i, k]))])


def read_policy_csv(path, params: ModelParams) -> TabularPolicy:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows or set(rows[0]) != {"regime", "x", "a", "s", "l"}:
        raise ValueError(f"{path}: expected columns regime,x,a,s,l")
    regimes = sorted({int(r["regime"]) for r in rows})
    if regimes != list(range(params.m0)):
        raise ValueError(f"{path}: regimes {regimes} do not match the model's {params.m0}")
    by_regime = {i: sorted((float(r["x"]), r) for r in rows if int(r["regime"]) == i) for i in regimes}
    xs = np.array([x for x, _ in by_regime[0]])
    if len(xs) < 4:
        raise ValueError(f"{path}: too few nodes")
    h = (xs[-1] - xs[0]) / (len(xs) - 1)
    grid = build_grid(params.B, round(h, 12), params.K)
    if grid.n != len(xs) or not np.allclose(grid.nodes, xs, atol=1e-9):
        raise ValueError(f"{path}: nodes do not form the lattice on [-(B+h), B+h]")
    tab = np.empty((3, params.m0, grid.n))
    for i in regimes:
        if [x for x, _ in by_regime[i]] != list(xs):
            raise ValueError(f"{path}: regime {i} uses different nodes")
        for k, (_, r) in enumerate(by_regime[i]):
            tab[:, i, k] = float(r["a"]), float(r["s"]), float(r["l"])
    policy = TabularPolicy(grid, tab[0], tab[1], tab[2])
    bad = ~policy.admissible(params)
    if bad.any():
        i, k = np.argwhere(bad)[0]
        raise ValueError(f"{path}: inadmissible control at regime {i}, x={grid.nodes[k]}")
    return policy


def load_policy(path, params: ModelParams):
    """A tabular policy from CSV or a network checkpoint from JSON."""
    path = Path(path)
    if path.suffix == ".json":
        return PolicyNet.load(path)
    return read_policy_csv(path, params)


def write_values_csv(grid: Grid, V: np.ndarray, U: Optional[np.ndarray], path, U_grid: Optional[Grid] = None) -> None:
    """V on ``grid``; U on ``U_grid`` (defaults to ``grid``), blank where it has no node."""
    U_grid = U_grid or grid
    lookup = {}
    if U is not None:
        for k, x in enumerate(U_grid.nodes):
            lookup[round(float(x) / grid.h)] = k
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["regime", "x", "V", "U"])
        for i in range(V.shape[0]):
            for k, x in enumerate(grid.nodes):
                j = lookup.get(round(float(x) / grid.h))
                u = repr(float(U[i, j])) if U is not None and j is not None else ""
                w.writerow([i, repr(float(x)), repr(float(V[i, k])), u])


def _gain_doc(est: GainEstimate, **extra) -> dict:
    doc = {"gamma": est.gamma, "method": est.method, "residual": est.residual, "SE": est.se}
    doc.update(extra)
    return doc


def _mc_doc(stats: PathStats, dynamics: str) -> dict:
    return {
        "gamma": stats.time_avg_reward,
        "method": f"monte_carlo_{dynamics}",
        "residual": None,
        "SE": stats.se,
        "regime_fractions": stats.regime_fractions.tolist(),
        "regime_fractions_SE": stats.regime_fractions_se.tolist(),
        "n_paths": len(stats.per_path),
    }


def _write_json(doc: dict, path) -> None:
    Path(path).write_text(json.dumps(doc, indent=2) + "\n")


def _write_history(history: list, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        cols = ["round", "gain", "value_change", "coarse_gain", "fit_max_abs_deviation", "ascent_steps",
                "ascent_min_increment"]
        w.writerow(cols)
        for h in history:
            w.writerow([repr(h[c]) for c in cols])


# --------------------------------------------------------------------------
# modes


def run_rvi(cfg: RunConfig, out: Path) -> int:
    p, s = cfg.model, cfg.solver
    grid = cfg.coarse_grid
    policy, U, _ = rvi_solve(
        p, grid, s.resolution, cfg.tolerances.epsilon2, s.max_sweeps, s.variant,
        centering=s.centering, boundary=s.boundary,
    )
    est = gain_of_policy(policy, grid, p)
    V, _ = policy_values(policy, grid, p, s.variant, s.centering, boundary=s.boundary)
    write_policy_csv(policy, out / "policy.csv")
    write_values_csv(grid, V, U.values, out / "values.csv")
    _write_json(_gain_doc(est, grid_h=grid.h), out / "gain.json")
    logger.info("rvi: gamma = %.10f", est.gamma)
    return EXIT_OK


def _run_refine(cfg: RunConfig, out: Path):
    p, s, t = cfg.model, cfg.solver, cfg.tolerances
    coarse, fine = cfg.coarse_grid, cfg.fine_grid
    res = global_iterate(
        p, coarse, fine, cfg.train, t.epsilon1, t.w1,
        epsilon2=t.epsilon2, max_sweeps=s.max_sweeps, resolution=s.resolution,
        variant=s.variant, centering=s.centering, boundary=s.boundary,
    )
    write_policy_csv(tabulate(res.net, p, fine), out / "policy.csv")
    res.net.save(out / "net.json")
    U = res.coarse_gain.diagnostics["rvi_state"].values
    write_values_csv(fine, res.values.values, U, out / "values.csv", U_grid=coarse)
    _write_history(res.history, out / "history.csv")
    return res


def run_refine(cfg: RunConfig, out: Path) -> int:
    res = _run_refine(cfg, out)
    _write_json(_gain_doc(res.gain, converged=res.converged, rounds=res.rounds, grid_h=cfg.dx), out / "gain.json")
    return EXIT_OK if res.converged else EXIT_NOT_CONVERGED


def _simulate_to(cfg: RunConfig, policy, out: Path) -> PathStats:
    stats = simulate(cfg.model, policy, cfg.sim)
    write_occupation_csv(stats, out / "occupation.csv")
    write_trace_csv(stats, out / "trace.csv")
    return stats


def run_full(cfg: RunConfig, out: Path) -> int:
    res = _run_refine(cfg, out)
    stats = _simulate_to(cfg, res.net, out)
    mc = _mc_doc(stats, cfg.sim.dynamics)
    mc["z"] = (stats.time_avg_reward - res.gain.gamma) / stats.se if stats.se > 0 else 0.0
    doc = _gain_doc(res.gain, converged=res.converged, rounds=res.rounds, grid_h=cfg.dx, monte_carlo=mc)
    _write_json(doc, out / "gain.json")
    logger.info("full: gamma %.6f (invariant measure), %.6f +- %.6f (Monte Carlo)",
                res.gain.gamma, stats.time_avg_reward, stats.se)
    return EXIT_OK if res.converged else EXIT_NOT_CONVERGED


def run_simulate(cfg: RunConfig, out: Path, policy_path) -> int:
    if policy_path is None:
        raise ValueError("simulate mode needs --policy")
    stats = _simulate_to(cfg, load_policy(policy_path, cfg.model), out)
    _write_json(_mc_doc(stats, cfg.sim.dynamics), out / "gain.json")
    return EXIT_OK


def run_eval_policy(cfg: RunConfig, out: Path, policy_path) -> int:
    if policy_path is None:
        raise ValueError("eval-policy mode needs --policy")
    policy = load_policy(policy_path, cfg.model)
    if isinstance(policy, PolicyNet):
        policy = tabulate(policy, cfg.model, cfg.fine_grid)
    s = cfg.solver
    est = gain_of_policy(policy, policy.grid, cfg.model)
    V, _ = policy_values(policy, policy.grid, cfg.model, s.variant, s.centering, boundary=s.boundary)
    write_values_csv(policy.grid, V, None, out / "values.csv")
    _write_json(_gain_doc(est, grid_h=policy.grid.h), out / "gain.json")
    return EXIT_OK


# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="mcam", description=__doc__.split("\n")[0])
    ap.add_argument("--config", default=None, help="JSON run configuration (default: shipped table1.cfg)")
    ap.add_argument("--mode", choices=["rvi", "refine", "simulate", "eval-policy", "full"], default=None,
                    help="overrides the config's mode")
    ap.add_argument("--out", default="out", help="output directory")
    ap.add_argument("--seed", type=int, default=None, help="overrides training and simulation seeds")
    ap.add_argument("--threads", type=int, default=None, help="worker threads (fallback: MCAM_THREADS)")
    ap.add_argument("--rvi-variant", choices=["paper", "semi-mdp"], default=None)
    ap.add_argument("--policy", default=None, help="policy.csv or net.json for simulate / eval-policy")
    ap.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    return ap


def _apply_overrides(cfg: RunConfig, args) -> RunConfig:
    if args.mode:
        cfg = replace(cfg, mode=args.mode)
    if args.seed is not None:
        cfg = replace(cfg, train=replace(cfg.train, seed=args.seed), sim=cfg.sim.replace(seed=args.seed))
    if args.rvi_variant:
        cfg = replace(cfg, solver=replace(cfg.solver, variant=args.rvi_variant.replace("-", "_")))
    return cfg


def _threads(args) -> Optional[int]:
    if args.threads is not None:
        return args.threads
    env = os.environ.get("MCAM_THREADS")
    if env:
        try:
            return int(env)
        except ValueError:
            raise ValueError(f"MCAM_THREADS must be an integer, got {env!r}") from None
    return None


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.WARNING,
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
    )
    logging.getLogger("mcam").setLevel(logging.DEBUG if args.verbose else logging.INFO)
    try:
        cfg = _apply_overrides(parse_config(args.config or shipped_config()), args)
        n = set_threads(_threads(args))
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        _write_json(config_to_dict(cfg), out / "config_used.json")
        logger.info("mode %s, %d thread(s), output in %s", cfg.mode, n, out)
        if cfg.mode == "rvi":
            return run_rvi(cfg, out)
        if cfg.mode == "refine":
            return run_refine(cfg, out)
        if cfg.mode == "full":
            return run_full(cfg, out)
        if cfg.mode == "simulate":
            return run_simulate(cfg, out, args.policy)
        return run_eval_policy(cfg, out, args.policy)
    except ConfigError as exc:
        print(f"mcam: {exc}", file=sys.stderr)
        return EXIT_ERROR
    except Exception as exc:  # noqa: BLE001 - every failure maps to exit status 1
        logger.debug("failure", exc_info=True)
        print(f"mcam: error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
