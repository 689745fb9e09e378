"""Adam updates and a finite-difference gradient checker."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import AutodiffError, Tape, Tensor, backward


class NonDeterministicLossError(AutodiffError):
    """grad_check was handed a loss function that changes between calls."""


@dataclass
class AdamState:
    """Per-parameter first/second moment accumulators plus the step counter.

    Accumulators are keyed by parameter name and created lazily on the
    first update, matching each parameter's shape exactly.
    """

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def _named(params) -> list[tuple[str, Tensor]]:
    if hasattr(params, "learnables"):
        return list(params.learnables())
    out = []
    for i, entry in enumerate(params):
        if isinstance(entry, Tensor):
            out.append((entry.name or f"param{i}", entry))
        else:
            out.append(entry)
    return out


def adam_step(params, state: AdamState) -> None:
    """One bias-corrected Adam update from the accumulated grads; grads are
    zeroed afterwards so the next minibatch starts clean."""
    named = _named(params)
    state.step += 1
    bc1 = 1.0 - state.beta1 ** state.step
    bc2 = 1.0 - state.beta2 ** state.step
    for name, p in named:
        if p.grad is None:
            raise AutodiffError(f"adam_step: parameter {name!r} has no grad slot")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.values)
            state.v[name] = np.zeros_like(p.values)
        v = state.v[name]
        if m.shape != p.values.shape:
            raise AutodiffError(
                f"adam_step: state/param shape drift for {name!r}: {m.shape} vs {p.values.shape}")
        g = p.grad
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p.values -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.epsilon)
        p.grad[...] = 0.0


def grad_check(loss_fn, params, delta: float = 1e-4) -> float:
    """Compare taped gradients against central finite differences.

    ``loss_fn`` must rebuild the loss from the parameters' current values
    on every call and return a scalar Tensor; it is evaluated twice up
    front and rejected if the two values differ (stochastic pieces such as
    masks or rollouts must be frozen by the caller).

    Returns the max over all scalar parameters of
    ``|analytic - numeric| / max(1e-8, |analytic| + |numeric|)``.
    """
    if delta <= 0:
        raise ValueError("delta must be positive")
    named = _named(params)

    v1 = loss_fn().item()
    v2 = loss_fn().item()
    if v1 != v2:
        raise NonDeterministicLossError(
            f"loss_fn returned {v1!r} then {v2!r}; freeze stochastic inputs before grad_check")

    for _, p in named:
        p.zero_grad()
    with Tape():
        loss = loss_fn()
    backward(loss)
    analytic = {name: p.grad.copy() for name, p in named}

    worst = 0.0
    for name, p in named:
        flat = p.values.reshape(-1)
        ga = analytic[name].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + delta
            f_plus = loss_fn().item()
            flat[i] = orig - delta
            f_minus = loss_fn().item()
            flat[i] = orig
            numeric = (f_plus - f_minus) / (2.0 * delta)
            rel = abs(ga[i] - numeric) / max(1e-8, abs(ga[i]) + abs(numeric))
            if rel > worst:
                worst = rel
    for _, p in named:
        p.zero_grad()
    return worst
