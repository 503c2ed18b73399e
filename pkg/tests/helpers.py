import numpy as np

from mcam.lattice import Grid
from mcam.model import ModelParams
from mcam.solver import TabularPolicy


def random_policy(params: ModelParams, grid: Grid, rng: np.random.Generator) -> TabularPolicy:
    """Admissible tabular policy with independent random controls per node."""
    shape = (params.m0, grid.n)
    a = rng.uniform(params.Ma, 1.0, shape)
    s = rng.uniform(0.0, params.Ms, shape)
    l = np.where(rng.random(shape) < 0.5, 0.0, rng.uniform(params.Ml, 1.0, shape))
    l = np.minimum(l, 1.0 - s)
    l = np.where(l < params.Ml, 0.0, l)
    below = grid.nodes[None, :] <= params.K
    s = np.where(below, 0.0, s)
    l = np.where(below, 0.0, l)
    return TabularPolicy(grid, a, s, l)
