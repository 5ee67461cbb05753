"""Adam over named parameter tensors, updated in place."""

from dataclasses import dataclass, field
from typing import Dict, Tuple

import torch

from app.services.model_core import ModelParams

BETA1 = 0.9
BETA2 = 0.999
EPSILON = 1e-8


@dataclass
class OptimizerState:
    m: Dict[str, torch.Tensor] = field(default_factory=dict)
    v: Dict[str, torch.Tensor] = field(default_factory=dict)
    t: int = 0


def adam_step(
    params: ModelParams,
    grads: Dict[str, torch.Tensor],
    state: OptimizerState,
    lr: float,
    betas: Tuple[float, float] = (BETA1, BETA2),
    eps: float = EPSILON,
) -> Tuple[ModelParams, OptimizerState]:
    """One bias-corrected Adam step for every parameter named in `grads`.

    Parameters without a gradient entry are left untouched, as are their
    moment estimates.
    """
    beta1, beta2 = betas
    state.t += 1
    correction1 = 1.0 - beta1 ** state.t
    correction2 = 1.0 - beta2 ** state.t
    named = params.named()
    with torch.no_grad():
        for name, grad in grads.items():
            tensor = named[name]
            m = state.m.get(name)
            v = state.v.get(name)
            if m is None:
                m = torch.zeros_like(tensor)
                v = torch.zeros_like(tensor)
            m = beta1 * m + (1.0 - beta1) * grad
            v = beta2 * v + (1.0 - beta2) * grad * grad
            state.m[name] = m
            state.v[name] = v
            m_hat = m / correction1
            v_hat = v / correction2
            tensor.sub_(lr * m_hat / (v_hat.sqrt() + eps))
    return params, state
