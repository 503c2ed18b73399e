"""Independent reference implementations used only by the tests.

Everything here is written from the model formulas with plain loops and
dense linear algebra, sharing no code with the package beyond the parameter
container.
"""

import itertools

import numpy as np


def coeffs(p, x, i, a, s, l):
    """(drift, diffusion^2, reward) straight from the model formulas."""
    lam = p.regimes[i].lam
    mu, var = lam * p.EY, lam * p.EY2
    c = (1 + p.rho) * mu
    psi = (1 + p.beta) * (1 - a) * mu
    y = max(x - p.K, 0.0)
    r1, sS = p.regimes[i].r1, p.regimes[i].sigma_S
    f = c - psi - a * mu + (s * r1 + (1 - s - l) * p.r2) * y
    b = c - psi - a * mu + (s * r1 + (1 - s - l) * p.r2 - l) * y
    sig2 = a * a * var + (s * sS * y) ** 2
    if p.constant_reward is not None:
        f = p.constant_reward
    return b, sig2, f


def dense_chain(p, h, B, control):
    """Dense transition matrix, holding times and rewards.

    States are ordered regime-major over the nodes -(B+h), ..., B+h.
    ``control(x, i)`` returns (a, s, l).
    """
    nB = int(round(B / h))
    xs = [k * h for k in range(-(nB + 1), nB + 2)]
    n, m0 = len(xs), p.m0
    P = np.zeros((m0 * n, m0 * n))
    dt = np.zeros(m0 * n)
    f = np.zeros(m0 * n)
    for i in range(m0):
        for k, x in enumerate(xs):
            row = i * n + k
            if k == 0:
                P[row, row + 1] = 1.0
                continue
            if k == n - 1:
                P[row, row - 1] = 1.0
                continue
            b, sig2, fr = coeffs(p, x, i, *control(x, i))
            D = sig2 + h * abs(b) - h * h * p.Q[i, i]
            P[row, row + 1] = (sig2 / 2 + h * max(b, 0)) / D
            P[row, row - 1] = (sig2 / 2 + h * max(-b, 0)) / D
            for j in range(m0):
                if j != i:
                    P[row, j * n + k] = p.Q[i, j] * h * h / D
            dt[row] = h * h / D
            f[row] = fr
    return P, dt, f, np.array(xs)


def stationary_eig(P):
    """Left eigenvector of P for eigenvalue 1, normalised to a distribution."""
    w, v = np.linalg.eig(P.T)
    k = int(np.argmin(np.abs(w - 1.0)))
    nu = np.real(v[:, k])
    return nu / nu.sum()


def gain(P, dt, f):
    nu = stationary_eig(P)
    return float(np.dot(f * dt, nu) / np.dot(dt, nu))


def best_gain_by_enumeration(p, h, B, actions):
    """Maximum gain over every deterministic stationary policy.

    ``actions(x, i)`` lists the candidate controls at a node; the product over
    interior nodes must be small.
    """
    nB = int(round(B / h))
    interior = [(i, k * h) for i in range(p.m0) for k in range(-nB, nB + 1)]
    choices = [actions(x, i) for i, x in interior]
    best = -np.inf
    for combo in itertools.product(*choices):
        table = {(i, round(x / h)): u for (i, x), u in zip(interior, combo)}

        def control(x, i):
            return table.get((i, round(x / h)), (1.0, 0.0, 0.0))

        best = max(best, gain(*dense_chain(p, h, B, control)[:3]))
    return best
