"""Adam with bias correction over named parameter sets."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from mcinpaint.autodiff import ShapeError, Tensor4


@dataclass
class AdamState:
    """Optimizer state; moment buffers are keyed by parameter name."""

    lr: float = 1e-4
    beta1: float = 0.5
    beta2: float = 0.9
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict, grads: dict, state: AdamState):
    """One Adam update, applied in place to ``params`` (name -> Tensor4).

    ``grads`` maps the same names to gradient arrays.  Parameters are
    visited in sorted-name order so updates are deterministic; exactly one
    caller may drive a given state at a time.
    """
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for name in sorted(params):
        p = params[name]
        g = np.asarray(grads[name], dtype=p.dtype)
        if g.shape != p.dims:
            raise ShapeError(f"gradient shape {g.shape} does not match "
                             f"parameter {name} shape {p.dims}")
        m = state.m.get(name)
        if m is None:
            m = np.zeros(p.dims, dtype=p.dtype)
            state.v[name] = np.zeros(p.dims, dtype=p.dtype)
        v = state.v[name]
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * (g * g)
        state.m[name] = m
        state.v[name] = v
        m_hat = m / c1
        v_hat = v / c2
        p.data = p.data - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return params, state


def state_arrays(state: AdamState, prefix: str) -> dict:
    """Flatten optimizer state into named arrays for checkpointing."""
    out = {f"{prefix}.step": np.full((1, 1, 1, 1), float(state.step), dtype=np.float32)}
    for name in sorted(state.m):
        out[f"{prefix}.m.{name}"] = state.m[name]
        out[f"{prefix}.v.{name}"] = state.v[name]
    return out


def state_from_arrays(arrays: dict, prefix: str, lr: float, beta1: float,
                      beta2: float, eps: float = 1e-8) -> AdamState:
    state = AdamState(lr=lr, beta1=beta1, beta2=beta2, eps=eps)
    step_key = f"{prefix}.step"
    if step_key in arrays:
        state.step = int(round(float(arrays[step_key].reshape(-1)[0])))
    m_prefix = f"{prefix}.m."
    v_prefix = f"{prefix}.v."
    for key, arr in arrays.items():
        if key.startswith(m_prefix):
            state.m[key[len(m_prefix):]] = arr
        elif key.startswith(v_prefix):
            state.v[key[len(v_prefix):]] = arr
    return state
