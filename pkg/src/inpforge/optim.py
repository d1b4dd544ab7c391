"""StableAdamW: AdamW with per-tensor RMS update clipping."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import StepRejected


@dataclass
class OptimizerState:
    lr: float = 1e-3
    weight_decay: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip_threshold: float = 1.0
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def hyper(self) -> dict:
        return {k: getattr(self, k) for k in ("lr", "weight_decay", "beta1", "beta2", "eps", "clip_threshold", "t")}


def stable_adamw_step(params, grads: dict, state: OptimizerState) -> dict[str, float]:
    """Update ``params`` (name -> Tensor) in place; returns the effective lr per tensor.

    A missing gradient counts as zero. Non-finite gradients reject the whole
    step before anything is modified.
    """
    bad = [n for n, g in grads.items() if g is not None and not np.isfinite(g).all()]
    if bad:
        raise StepRejected(bad)
    state.t += 1
    t = state.t
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    effective = {}
    for name, p in params.items():
        theta = p.data
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(theta)
        dt = theta.dtype.type
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(theta)
            v = np.zeros_like(theta)
        m = dt(b1) * m + dt(1 - b1) * g
        v = dt(b2) * v + dt(1 - b2) * (g * g)
        state.m[name], state.v[name] = m, v
        u = (m / dt(c1)) / (np.sqrt(v / dt(c2)) + dt(state.eps))
        rms = float(np.sqrt(np.mean(np.square(u, dtype=np.float64))))
        eta = state.lr / max(1.0, rms / state.clip_threshold)
        effective[name] = eta
        p.data = theta - dt(eta) * u - dt(state.lr * state.weight_decay) * theta
    return effective
