"""Variance-regularized robust design optimization.

Minimizes the N-sample estimator mean + lambda * variance of the rollout
cost with respect to the design parameters, under box bounds, using a
projected-gradient L-BFGS loop. Gradients are exact reverse-mode (the N
rollouts ride as lanes on one tape, split into memory-bounded chunks) or
3-point finite differences for the ablation study.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import stochastics as st
from .problem import SimulationDiverged, project

__all__ = [
    "OptimizerConfig",
    "OptResult",
    "mc_objective",
    "mc_objective_gradient",
    "fd_gradient",
    "optimize",
]


@dataclass
class OptimizerConfig:
    n_samples: int = 64
    lam: float = 0.1
    max_iterations: int = 500
    gradient_tolerance: float = 1e-6
    seed: int = 0
    sample_strategy: str = "fixed"  # or "resample"
    gradient_mode: str = "ad"  # or "fd3"
    fd_step: float = 1e-6
    ad_chunk: int = 64
    lbfgs_memory: int = 10

    def validate(self):
        if self.n_samples < 2:
            raise ValueError("n_samples must be >= 2 (variance estimator)")
        if self.lam < 0.0:
            raise ValueError("lambda must be nonnegative")
        if self.sample_strategy not in ("fixed", "resample"):
            raise ValueError(f"unknown sample_strategy {self.sample_strategy!r}")
        if self.gradient_mode not in ("ad", "fd3"):
            raise ValueError(f"unknown gradient_mode {self.gradient_mode!r}")
        if self.fd_step <= 0.0:
            raise ValueError("fd_step must be positive")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        return self


@dataclass
class OptResult:
    theta_opt: np.ndarray
    objective_history: list
    mean_cost: float
    cost_variance: float
    iterations: int
    converged: bool
    wall_time: float
    gradient_evaluations: int

    def to_dict(self):
        return {
            "theta_opt": [float(v) for v in self.theta_opt],
            "objective_history": [float(v) for v in self.objective_history],
            "mean_cost": self.mean_cost,
            "cost_variance": self.cost_variance,
            "iterations": self.iterations,
            "converged": self.converged,
            "gradient_evaluations": self.gradient_evaluations,
        }


def _lane_costs(problem, theta, phi_samples):
    """Rollout costs for all samples at once (lanes over samples).

    Non-finite lanes are expected, handled events (divergence is reported
    structurally), so numpy's elementwise warnings are silenced here.
    """
    phi = np.ascontiguousarray(phi_samples.T)
    with np.errstate(all="ignore"):
        trace = problem.simulate(theta, phi)
        return problem.cost(trace)


def mc_objective(problem, theta, phi_samples, lam=0.0):
    """Unbiased mean/variance estimator of the rollout cost over N samples.

    Returns (objective, mean, variance) with
    objective = mean + lam * variance. Differentiable in theta when theta
    holds tape duals.
    """
    phi_samples = np.atleast_2d(np.asarray(phi_samples, dtype=float))
    n = phi_samples.shape[0]
    if n < 2:
        raise ValueError("mc_objective requires at least two samples")
    costs = _lane_costs(problem, theta, phi_samples)
    vals = ad.value_of(costs)
    if not np.all(np.isfinite(vals)):
        raise SimulationDiverged(-1, " (non-finite rollout cost in batch)")
    s = ad.lane_sum(costs)
    s2 = ad.lane_sum(costs * costs)
    mean = s * (1.0 / n)
    variance = s2 * (1.0 / (n - 1)) - s * s * (1.0 / ((n - 1) * n))
    objective = mean + lam * variance
    return objective, mean, variance


def mc_objective_gradient(problem, theta, phi_samples, lam=0.0, chunk=64):
    """Objective value and its exact gradient with respect to theta.

    Two passes: a value pass gives the per-sample costs J_i, from which the
    estimator's exact sensitivity dObj/dJ_i follows; chunked reverse sweeps
    then accumulate sum_i (dObj/dJ_i) * dJ_i/dtheta without holding all N
    lanes on one tape.
    """
    theta = np.asarray(theta, dtype=float)
    phi_samples = np.atleast_2d(np.asarray(phi_samples, dtype=float))
    n = phi_samples.shape[0]
    objective, mean, variance = mc_objective(problem, theta, phi_samples, lam)
    costs = np.atleast_1d(np.asarray(_lane_costs(problem, list(theta), phi_samples)))
    total = costs.sum()
    weights = 1.0 / n + lam * (
        2.0 * costs / (n - 1) - 2.0 * total / ((n - 1) * n)
    )
    grad = np.zeros(theta.size)
    for a in range(0, n, chunk):
        b = min(a + chunk, n)
        w = weights[a:b]
        block = phi_samples[a:b]

        def weighted(th):
            c = _lane_costs(problem, th, block)
            return ad.lane_sum(c * w)

        _, g = ad.gradient(weighted, theta)
        grad += g
    return float(objective), float(mean), float(variance), grad


def fd_gradient(problem, theta, phi_samples, step, lam=0.0):
    """3-point central differences of mc_objective: 2n extra evaluations."""
    if step <= 0.0:
        raise ValueError("fd step must be positive")
    theta = np.asarray(theta, dtype=float)
    grad = np.zeros(theta.size)
    for i in range(theta.size):
        tp = theta.copy()
        tm = theta.copy()
        tp[i] += step
        tm[i] -= step
        fp, _, _ = mc_objective(problem, list(tp), phi_samples, lam)
        fm, _, _ = mc_objective(problem, list(tm), phi_samples, lam)
        grad[i] = (float(fp) - float(fm)) / (2.0 * step)
    return grad


def _two_loop(g, memory):
    q = g.copy()
    alphas = []
    for s, y, rho in reversed(memory):
        a = rho * float(s @ q)
        alphas.append(a)
        q -= a * y
    if memory:
        s, y, _ = memory[-1]
        q *= float(s @ y) / float(y @ y)
    for (s, y, rho), a in zip(memory, reversed(alphas)):
        b = rho * float(y @ q)
        q += (a - b) * s
    return q


def optimize(problem, theta0, config):
    """Projected L-BFGS minimization of the variance-regularized objective.

    With sample_strategy="fixed" the exogenous samples are drawn once from
    the seed and held fixed, making the objective deterministic and the
    accepted-objective history non-increasing.
    """
    config.validate()
    t_start = time.perf_counter()
    lo, hi = problem.bounds_lo, problem.bounds_hi
    x = project(np.asarray(theta0, dtype=float), lo, hi)

    key = st.key_from_seed(config.seed)
    iter_keys = None
    if config.sample_strategy == "resample":
        iter_keys = st.split(key, config.max_iterations + 1)
        phi = problem.exogenous.sample_batch(iter_keys[0], config.n_samples)
    else:
        phi = problem.exogenous.sample_batch(key, config.n_samples)

    grad_evals = 0

    def value_at(theta, samples):
        try:
            obj, _, _ = mc_objective(problem, list(theta), samples, config.lam)
        except SimulationDiverged:
            return np.inf
        obj = float(obj)
        return obj if np.isfinite(obj) else np.inf

    def value_and_grad(theta, samples):
        nonlocal grad_evals
        grad_evals += 1
        if config.gradient_mode == "ad":
            f, _, _, g = mc_objective_gradient(
                problem, theta, samples, config.lam, chunk=config.ad_chunk
            )
            return f, g
        f, _, _ = mc_objective(problem, list(theta), samples, config.lam)
        g = fd_gradient(problem, theta, samples, config.fd_step, config.lam)
        return float(f), g

    f, g = value_and_grad(x, phi)
    if not np.isfinite(f):
        raise SimulationDiverged(-1, " (objective non-finite at theta0)")
    history = [f]
    memory = []
    converged = False
    line_search_ok = True
    iterations = 0

    for it in range(config.max_iterations):
        pg = x - project(x - g, lo, hi)
        if np.abs(pg).max() < config.gradient_tolerance:
            converged = True
            break
        iterations = it + 1

        if config.sample_strategy == "resample" and it > 0:
            phi = problem.exogenous.sample_batch(
                iter_keys[it], config.n_samples
            )
            f, g = value_and_grad(x, phi)
            history.append(f)

        d = -_two_loop(g, memory)
        if float(d @ g) >= 0.0:
            d = -g  # stale curvature; steepest descent restart

        alpha = 1.0
        accepted = False
        for _ in range(40):
            xt = project(x + alpha * d, lo, hi)
            step_vec = xt - x
            if np.abs(step_vec).max() == 0.0:
                break
            ft = value_at(xt, phi)
            slope = float(g @ step_vec)
            armijo = f + 1e-4 * min(slope, 0.0)
            if ft <= armijo and ft < np.inf:
                accepted = True
                break
            alpha *= 0.5
        if not accepted:
            line_search_ok = False
            break

        f_new, g_new = value_and_grad(xt, phi)
        s = xt - x
        y = g_new - g
        sy = float(s @ y)
        if sy > 1e-10 * np.linalg.norm(s) * np.linalg.norm(y):
            memory.append((s, y, 1.0 / sy))
            if len(memory) > config.lbfgs_memory:
                memory.pop(0)
        x, f, g = xt, f_new, g_new
        history.append(f)

    _, mean, variance = mc_objective(problem, list(x), phi, config.lam)
    wall = time.perf_counter() - t_start
    return OptResult(
        theta_opt=x,
        objective_history=history,
        mean_cost=float(mean),
        cost_variance=float(variance),
        iterations=iterations,
        converged=converged and line_search_ok,
        wall_time=wall,
        gradient_evaluations=grad_evals,
    )
