"""Shared-trunk perceptron mapping (surplus, regime) to an admissible control.

Input is (x / x_scale, one-hot regime). Two tanh layers feed three affine
heads whose raw outputs are squashed into the control bounds:

    a = Ma + (1 - Ma) sigmoid(raw_a)
    s = Ms sigmoid(raw_s)
    l = sigmoid(raw_l) if that is >= Ml, else 0
    if s + l > 1:  l = 1 - s
    if x <= K:     s = l = 0

The dead zone on l lets the network switch dividends off entirely, which the
admissible set {0} U [Ml, 1] allows.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Union

import numpy as np

from mcam.model import ModelParams

_LAYERS = ("W1", "b1", "W2", "b2", "W3", "b3")


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


@dataclass
class ForwardCache:
    inputs: np.ndarray
    h1: np.ndarray
    h2: np.ndarray
    raw: np.ndarray
    jac: np.ndarray  # (N, 3, 3): d(a, s, l) / d(raw_a, raw_s, raw_l)


class PolicyNet:
    def __init__(
        self,
        m0: int,
        bounds: tuple[float, float, float],
        K: float,
        x_scale: float,
        width: int = 64,
        seed: int = 0,
    ):
        self.m0 = m0
        self.Ma, self.Ms, self.Ml = (float(b) for b in bounds)
        self.K = float(K)
        self.x_scale = float(x_scale)
        self.width = width
        rng = np.random.default_rng(seed)
        d_in = 1 + m0

        def glorot(n_out, n_in):
            lim = np.sqrt(6.0 / (n_in + n_out))
            return rng.uniform(-lim, lim, size=(n_out, n_in))

        self.params = {
            "W1": glorot(width, d_in),
            "b1": np.zeros(width),
            "W2": glorot(width, width),
            "b2": np.zeros(width),
            "W3": glorot(3, width),
            "b3": np.zeros(3),
        }

    @classmethod
    def for_model(cls, params: ModelParams, h: float, width: int = 64, seed: int = 0) -> "PolicyNet":
        return cls(params.m0, (params.Ma, params.Ms, params.Ml), params.K, params.B + h, width, seed)

    # -- parameter vector -------------------------------------------------

    @property
    def n_params(self) -> int:
        return sum(self.params[k].size for k in _LAYERS)

    def get_flat(self) -> np.ndarray:
        return np.concatenate([self.params[k].ravel() for k in _LAYERS])

    def set_flat(self, theta: np.ndarray) -> None:
        theta = np.asarray(theta, dtype=float)
        if theta.size != self.n_params:
            raise ValueError("parameter vector has the wrong length")
        pos = 0
        for k in _LAYERS:
            size = self.params[k].size
            self.params[k] = theta[pos : pos + size].reshape(self.params[k].shape).copy()
            pos += size

    def copy(self) -> "PolicyNet":
        other = PolicyNet(self.m0, (self.Ma, self.Ms, self.Ml), self.K, self.x_scale, self.width)
        other.set_flat(self.get_flat())
        return other

    # -- forward / backward ----------------------------------------------

    def _inputs(self, x, regime) -> np.ndarray:
        x, regime = np.broadcast_arrays(np.asarray(x, dtype=float), np.asarray(regime, dtype=int))
        z = np.zeros((x.size, 1 + self.m0))
        z[:, 0] = x.ravel() / self.x_scale
        z[np.arange(x.size), 1 + regime.ravel()] = 1.0
        return z

    def raw_outputs(self, x, regime) -> np.ndarray:
        p = self.params
        z = self._inputs(x, regime)
        h1 = np.tanh(z @ p["W1"].T + p["b1"])
        h2 = np.tanh(h1 @ p["W2"].T + p["b2"])
        return h2 @ p["W3"].T + p["b3"]

    def forward(self, x, regime):
        """Controls (a, s, l) as flat arrays plus the cache for backprop."""
        p = self.params
        z = self._inputs(x, regime)
        h1 = np.tanh(z @ p["W1"].T + p["b1"])
        h2 = np.tanh(h1 @ p["W2"].T + p["b2"])
        raw = h2 @ p["W3"].T + p["b3"]
        sig = _sigmoid(raw)
        dsig = sig * (1.0 - sig)
        a = self.Ma + (1.0 - self.Ma) * sig[:, 0]
        s = self.Ms * sig[:, 1]
        on = sig[:, 2] >= self.Ml
        l = np.where(on, sig[:, 2], 0.0)
        proj = s + l > 1.0
        l = np.where(proj, 1.0 - s, l)
        below = z[:, 0] * self.x_scale <= self.K
        s = np.where(below, 0.0, s)
        l = np.where(below, 0.0, l)

        jac = np.zeros((len(raw), 3, 3))
        jac[:, 0, 0] = (1.0 - self.Ma) * dsig[:, 0]
        ds = np.where(below, 0.0, self.Ms * dsig[:, 1])
        jac[:, 1, 1] = ds
        jac[:, 2, 1] = np.where(proj, -ds, 0.0)
        jac[:, 2, 2] = np.where(on & ~proj & ~below, dsig[:, 2], 0.0)
        return (a, s, l), ForwardCache(z, h1, h2, raw, jac)

    def controls(self, x, regime):
        (a, s, l), _ = self.forward(x, regime)
        return a, s, l

    def backward(self, cache: ForwardCache, d_controls: np.ndarray) -> np.ndarray:
        """Flat parameter gradient given dL/d(a, s, l) per sample, shape (N, 3)."""
        p = self.params
        d_raw = np.einsum("nc,ncr->nr", d_controls, cache.jac)
        g = {}
        g["W3"] = d_raw.T @ cache.h2
        g["b3"] = d_raw.sum(axis=0)
        d_h2 = (d_raw @ p["W3"]) * (1.0 - cache.h2**2)
        g["W2"] = d_h2.T @ cache.h1
        g["b2"] = d_h2.sum(axis=0)
        d_h1 = (d_h2 @ p["W2"]) * (1.0 - cache.h1**2)
        g["W1"] = d_h1.T @ cache.inputs
        g["b1"] = d_h1.sum(axis=0)
        return np.concatenate([g[k].ravel() for k in _LAYERS])

    # -- serialisation ----------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "format": "mcam-policynet",
            "version": 1,
            "m0": self.m0,
            "width": self.width,
            "bounds": {"Ma": self.Ma, "Ms": self.Ms, "Ml": self.Ml},
            "K": self.K,
            "x_scale": self.x_scale,
            "layers": [
                {"name": k, "shape": list(self.params[k].shape), "data": self.params[k].ravel().tolist()}
                for k in _LAYERS
            ],
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "PolicyNet":
        if doc.get("format") != "mcam-policynet":
            raise ValueError("not a policy network checkpoint")
        b = doc["bounds"]
        net = cls(doc["m0"], (b["Ma"], b["Ms"], b["Ml"]), doc["K"], doc["x_scale"], doc["width"])
        for layer in doc["layers"]:
            arr = np.array(layer["data"], dtype=float).reshape(layer["shape"])
            if arr.shape != net.params[layer["name"]].shape:
                raise ValueError(f"layer {layer['name']} has shape {arr.shape}")
            net.params[layer["name"]] = arr
        return net

    def save(self, path: Union[str, Path]) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path: Union[str, Path]) -> "PolicyNet":
        return cls.from_dict(json.loads(Path(path).read_text()))


class Adam:
    """Adam step directions with the ability to undo a rejected update."""

    def __init__(self, size: int, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.m = np.zeros(size)
        self.v = np.zeros(size)
        self.t = 0
        self.beta1, self.beta2, self.eps = beta1, beta2, eps

    def direction(self, grad: np.ndarray):
        """Return (direction, new_state); commit the state only if the step is kept."""
        t = self.t + 1
        m = self.beta1 * self.m + (1 - self.beta1) * grad
        v = self.beta2 * self.v + (1 - self.beta2) * grad * grad
        mhat = m / (1 - self.beta1**t)
        vhat = v / (1 - self.beta2**t)
        return mhat / (np.sqrt(vhat) + self.eps), (m, v, t)

    def commit(self, state) -> None:
        self.m, self.v, self.t = state
