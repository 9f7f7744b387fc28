"""First-order optimizers used by the fitting and trajectory stages."""
import logging
from dataclasses import dataclass, field

import numpy as np
import torch

from .errors import DivergenceError, ValidationError

logger = logging.getLogger(__name__)


@dataclass
class OptimResult:
    x: torch.Tensor
    trace: list = field(default_factory=list)
    iterations: int = 0
    converged: bool = False


def value_and_grad(fun, x):
    x = x.detach().requires_grad_(True)
    f = fun(x)
    (g,) = torch.autograd.grad(f, x)
    return f.detach(), g.detach()


def adaptive_descent(fun, x0, lr=1e-2, iterations=500, betas=(0.9, 0.999), eps=1e-8,
                     grow=1.2, shrink=0.5, min_step=1e-12, monotone=True,
                     divergence_factor=10.0, divergence_patience=50):
    """Momentum descent with per-parameter adaptive scaling (Adam direction).

    With ``monotone`` a step that raises the objective is rejected and the
    step size halved, so the returned trace never increases. Without it the
    run raises DivergenceError once the objective stays above
    ``divergence_factor`` times its initial value for ``divergence_patience``
    consecutive steps.

    Args:
        fun: callable mapping a parameter tensor to a scalar tensor.
        x0: initial parameter tensor.

    Returns:
        OptimResult with the final parameters and the accepted objective trace.
    """
    x = x0.detach().clone()
    f, g = value_and_grad(fun, x)
    if not torch.isfinite(f):
        raise ValidationError("objective is not finite at the initial point")
    f0 = float(f)
    trace = [f0]
    m = torch.zeros_like(x)
    v = torch.zeros_like(x)
    b1, b2 = betas
    step = lr
    t = 0
    above = 0
    it = 0
    fresh = True
    for it in range(1, iterations + 1):
        if fresh:
            t += 1
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
        direction = (m / (1 - b1 ** t)) / (torch.sqrt(v / (1 - b2 ** t)) + eps)
        if not bool(direction.abs().max() > 0):
            return OptimResult(x, trace, it, converged=True)
        candidate = x - step * direction
        with torch.no_grad():
            f_new = fun(candidate)
        if monotone:
            if torch.isfinite(f_new) and f_new <= f:
                x = candidate
                f, g = value_and_grad(fun, x)
                trace.append(float(f))
                step = min(step * grow, lr)
                fresh = True
            else:
                # drop the stale momentum so the next trial follows the preconditioned gradient
                m = g * (1 - b1 ** t)
                step *= shrink
                fresh = False
                if step < min_step:
                    return OptimResult(x, trace, it, converged=True)
        else:
            x = candidate
            f, g = value_and_grad(fun, x)
            trace.append(float(f))
            if not torch.isfinite(f):
                raise DivergenceError("objective became non-finite", trace)
            above = above + 1 if float(f) > divergence_factor * f0 else 0
            if above >= divergence_patience:
                raise DivergenceError(
                    f"objective above {divergence_factor}x its initial value for {above} steps", trace)
    return OptimResult(x, trace, it, converged=False)


def lbfgs(fun, x0, iterations=200, history=20, tolerance_grad=1e-12, tolerance_change=1e-15):
    """Quasi-Newton minimization with a strong-Wolfe line search (monotone accepted steps)."""
    x = x0.detach().clone().requires_grad_(True)
    opt = torch.optim.LBFGS([x], lr=1.0, max_iter=iterations, history_size=history,
                            tolerance_grad=tolerance_grad, tolerance_change=tolerance_change,
                            line_search_fn="strong_wolfe")
    trace = []

    def closure():
        opt.zero_grad()
        f = fun(x)
        f.backward()
        trace.append(float(f.detach()))
        return f

    with torch.no_grad():
        f0 = float(fun(x))
    if not np.isfinite(f0):
        raise ValidationError("objective is not finite at the initial point")
    opt.step(closure)
    with torch.no_grad():
        f_end = float(fun(x))
    if not np.isfinite(f_end):
        raise DivergenceError("objective became non-finite", trace)
    # closure evaluations include line-search probes; keep the running minimum
    accepted = list(np.minimum.accumulate([f0] + trace))
    return OptimResult(x.detach(), accepted, len(trace), converged=True)
