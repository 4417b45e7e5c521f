"""Entropic optimal transport between uniform marginals (log-domain Sinkhorn)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp


@dataclass
class TransportPlan:
    plan: np.ndarray
    iterations: int
    marginal_error: float
    cost_value: float  # <plan, cost> - epsilon * entropy(plan)
    converged: bool


def _log_plan(f, g, c, epsilon):
    return (f[:, None] + g[None, :] - c) / epsilon


def _dual_value(f, g, c, epsilon, log_a, log_b):
    return float(np.exp(log_a) * f.sum() + np.exp(log_b) * g.sum()
                 - epsilon * np.exp(_log_plan(f, g, c, epsilon)).sum())


def _newton_step(f, g, c, epsilon, log_a, log_b):
    """One damped Newton ascent step on the (concave) dual; exact-ish near the optimum."""
    n, m = c.shape
    plan = np.exp(_log_plan(f, g, c, epsilon))
    r, s = plan.sum(axis=1), plan.sum(axis=0)
    grad = np.concatenate([np.exp(log_a) - r, np.exp(log_b) - s])
    hess = np.block([[np.diag(r), plan], [plan.T, np.diag(s)]]) / epsilon
    # the dual is invariant to (f + t, g - t); pin that direction with a tiny ridge
    hess += 1e-12 * np.trace(hess) / (n + m) * np.eye(n + m)
    try:
        step = np.linalg.solve(hess, grad)
    except np.linalg.LinAlgError:
        return f, g
    base = _dual_value(f, g, c, epsilon, log_a, log_b)
    slope = float(grad @ step)
    t = 1.0
    for _ in range(30):
        nf, ng = f + t * step[:n], g + t * step[n:]
        if _dual_value(nf, ng, c, epsilon, log_a, log_b) >= base + 1e-4 * t * slope:
            return nf, ng
        t *= 0.5
    return f, g


# plain sweeps before Newton polishing kicks in; small problems only
_SWEEPS_BEFORE_NEWTON = 50
_NEWTON_MAX_SIZE = 512


def sinkhorn(cost, epsilon: float = 0.05, max_iters: int = 500, tol: float = 1e-8) -> TransportPlan:
    """Solve min_P <P, C> - eps * H(P) with row sums 1/n and column sums 1/m.

    Log-domain Sinkhorn sweeps; if the row marginals have not converged after
    a few dozen sweeps, each further iteration takes a Newton step on the dual
    potentials before the sweep, which removes the slow linear tail that
    near-degenerate costs cause at small epsilon. Stops when the row-marginal
    violation (columns are exact after each sweep) drops below ``tol`` or
    after ``max_iters`` iterations.
    """
    c = np.asarray(cost, dtype=np.float64)
    if c.ndim != 2 or 0 in c.shape:
        raise ValueError(f"cost must be a non-empty matrix, got shape {c.shape}")
    if not np.isfinite(c).all():
        raise ValueError("cost matrix has non-finite entries")
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    n, m = c.shape
    log_a, log_b = -np.log(n), -np.log(m)
    f = np.zeros(n)
    g = np.zeros(m)
    err = np.inf
    it = 0
    newton = n + m <= _NEWTON_MAX_SIZE
    for it in range(1, max_iters + 1):
        if newton and it > _SWEEPS_BEFORE_NEWTON:
            f, g = _newton_step(f, g, c, epsilon, log_a, log_b)
        f = epsilon * (log_a - logsumexp((g[None, :] - c) / epsilon, axis=1))
        g = epsilon * (log_b - logsumexp((f[:, None] - c) / epsilon, axis=0))
        err = float(np.max(np.abs(np.exp(logsumexp(_log_plan(f, g, c, epsilon), axis=1)) - 1.0 / n)))
        if err < tol:
            break
    plan = np.exp(_log_plan(f, g, c, epsilon))
    neg_entropy = float(np.sum(plan * np.log(np.where(plan > 0, plan, 1.0))))
    return TransportPlan(plan, it, err, float(np.sum(plan * c)) + epsilon * neg_entropy, err < tol)
