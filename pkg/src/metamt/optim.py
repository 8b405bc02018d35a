"""SGD and Adam over :class:`~metamt.numerics.Parameter` collections.

State is keyed by parameter path so it can be checkpointed and restored onto
a freshly built model.
"""

from __future__ import annotations

from typing import Iterable

import numpy as np

from .numerics import NonFiniteError, Parameter


def _check_grads(params: list[Parameter]) -> None:
    for p in params:
        if not np.all(np.isfinite(p.grad)):
            raise NonFiniteError(f"non-finite gradient for {p.path}")


class SGD:
    kind = "sgd"

    def __init__(self, lr: float = 0.1):
        self.lr = lr

    def step(self, params: Iterable[Parameter]) -> None:
        params = [p for p in params if p.trainable]
        _check_grads(params)
        for p in params:
            p.data -= p.data.dtype.type(self.lr) * p.grad

    def state_dict(self) -> dict:
        return {"kind": self.kind, "lr": self.lr, "arrays": {}}

    def load_state_dict(self, state: dict) -> None:
        self.lr = state["lr"]


class Adam:
    kind = "adam"

    def __init__(self, lr: float = 3e-4, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: Iterable[Parameter]) -> None:
        params = [p for p in params if p.trainable]
        _check_grads(params)
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for p in params:
            g = p.grad
            dt = p.data.dtype.type
            if p.path not in self.m:
                self.m[p.path] = np.zeros_like(p.data)
                self.v[p.path] = np.zeros_like(p.data)
            m, v = self.m[p.path], self.v[p.path]
            m *= dt(self.beta1)
            m += dt(1.0 - self.beta1) * g
            v *= dt(self.beta2)
            v += dt(1.0 - self.beta2) * (g * g)
            denom = np.sqrt(v / dt(bc2)) + dt(self.eps)
            p.data -= dt(self.lr / bc1) * m / denom

    def state_dict(self) -> dict:
        arrays = {}
        for path in sorted(self.m):
            arrays[f"m:{path}"] = self.m[path]
            arrays[f"v:{path}"] = self.v[path]
        return {"kind": self.kind, "lr": self.lr, "beta1": self.beta1, "beta2": self.beta2,
                "eps": self.eps, "t": self.t, "arrays": arrays}

    def load_state_dict(self, state: dict) -> None:
        self.lr, self.beta1, self.beta2 = state["lr"], state["beta1"], state["beta2"]
        self.eps, self.t = state["eps"], state["t"]
        self.m, self.v = {}, {}
        for key, arr in state["arrays"].items():
            which, path = key.split(":", 1)
            (self.m if which == "m" else self.v)[path] = np.array(arr, copy=True)


def make_optimizer(kind: str, **hyper):
    if kind == "sgd":
        return SGD(**hyper)
    if kind == "adam":
        return Adam(**hyper)
    raise ValueError(f"unknown optimizer {kind!r}")


def optimizer_step(params: Iterable[Parameter], optimizer) -> None:
    optimizer.step(params)
