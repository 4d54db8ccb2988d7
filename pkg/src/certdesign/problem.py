"""Glass-box design problem: parameter space, exogenous distribution,
deterministic simulator, cost, and constraints behind one interface.

Simulators are pure functions of (theta, phi). Theta arrives as a sequence of
scalar-like values (floats, lane arrays, or tape duals); phi is a flat vector
whose rows may themselves be lane arrays, so one simulator call can evaluate
a whole batch of exogenous samples. Randomness always enters through phi.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad

__all__ = [
    "SimulationDiverged",
    "Trace",
    "DesignProblem",
    "rollout_cost",
    "project",
    "check_feasible",
    "register_problem",
    "get_problem",
    "problem_names",
]


class SimulationDiverged(RuntimeError):
    """Non-finite state encountered while advancing the simulator."""

    def __init__(self, step, detail=""):
        self.step = step
        super().__init__(f"simulation diverged at step {step}{detail}")


@dataclass
class Trace:
    """Time-indexed state rows produced by one simulator call.

    Entries are scalar-like (float, lane array, or Dual); row count matches
    the declared horizon.
    """

    states: list
    dt: float
    labels: list

    def __len__(self):
        return len(self.states)

    def column(self, label):
        j = self.labels.index(label)
        return [row[j] for row in self.states]

    def to_array(self):
        """(T, state_dim) float array; only valid for scalar float traces."""
        return np.array(
            [[float(ad.value_of(v)) for v in row] for row in self.states]
        )

    def assert_finite(self):
        for t, row in enumerate(self.states):
            for v in row:
                x = ad.value_of(v)
                if isinstance(x, np.ndarray):
                    if not np.isfinite(x).all():
                        raise SimulationDiverged(t)
                elif not np.isfinite(x):
                    raise SimulationDiverged(t)
        return self


@dataclass
class DesignProblem:
    """Bundle of design space, exogenous model, simulator, cost, constraints."""

    name: str
    theta_dim: int
    bounds_lo: np.ndarray
    bounds_hi: np.ndarray
    exogenous: object  # stochastics.CompositeSpec
    simulate: object  # (theta, phi) -> Trace
    cost: object  # Trace -> scalar-like
    theta_init: np.ndarray
    constraints: list = field(default_factory=list)
    metrics: dict = field(default_factory=dict)
    horizon: int = 0
    dt: float = 0.0

    def __post_init__(self):
        self.bounds_lo = np.asarray(self.bounds_lo, dtype=float)
        self.bounds_hi = np.asarray(self.bounds_hi, dtype=float)
        self.theta_init = np.asarray(self.theta_init, dtype=float)
        if not (
            self.bounds_lo.shape
            == self.bounds_hi.shape
            == self.theta_init.shape
            == (self.theta_dim,)
        ):
            raise ValueError("bounds/theta_init shape mismatch")
        if "cost" not in self.metrics:
            self.metrics["cost"] = self.cost

    def metric(self, name):
        if name not in self.metrics:
            raise KeyError(
                f"problem {self.name!r} has no metric {name!r}; "
                f"available: {sorted(self.metrics)}"
            )
        return self.metrics[name]

    def nominal_phi(self):
        return self.exogenous.nominal()


def rollout_cost(problem, theta, phi, metric=None):
    """Evaluate metric(simulate(theta, phi)); defaults to the problem cost."""
    fn = problem.cost if metric is None else problem.metric(metric)
    trace = problem.simulate(theta, phi)
    return fn(trace)


def project(theta, bounds_lo, bounds_hi):
    """Elementwise clamp onto the box; idempotent."""
    return np.minimum(np.maximum(np.asarray(theta, dtype=float), bounds_lo), bounds_hi)


def check_feasible(problem, theta):
    """Evaluate every constraint; feasible iff value >= 0."""
    theta = np.asarray(theta, dtype=float)
    out = []
    for i, c in enumerate(problem.constraints):
        v = float(c(theta))
        out.append((i, v, v >= 0.0))
    return out


# registry -------------------------------------------------------------------

_REGISTRY = {}


def register_problem(name, factory):
    _REGISTRY[name] = factory


def get_problem(name, **config):
    if name not in _REGISTRY:
        raise KeyError(
            f"unknown problem {name!r}; registered: {sorted(_REGISTRY)}"
        )
    return _REGISTRY[name](**config)


def problem_names():
    return sorted(_REGISTRY)


# synthetic problems used by tests and CLI smoke runs ------------------------


def _make_quadratic(target=3.0, lo=-10.0, hi=10.0):
    """J = (theta - target)^2, no exogenous influence."""
    from . import stochastics as st

    exo = st.CompositeSpec([("noise", st.uniform([0.0], [1.0]))])

    def simulate(theta, phi):
        th = theta[0]
        val = (th - target) * (th - target) + 0.0 * phi[0]
        return Trace(states=[[val]], dt=1.0, labels=["value"])

    def cost(trace):
        return trace.states[0][0]

    return DesignProblem(
        name="quadratic",
        theta_dim=1,
        bounds_lo=np.array([lo]),
        bounds_hi=np.array([hi]),
        exogenous=exo,
        simulate=simulate,
        cost=cost,
        theta_init=np.array([0.0]),
        horizon=1,
        dt=1.0,
    )


def _make_scale_noise():
    """J = theta * phi with phi ~ N(0,1): zero mean, variance theta^2."""
    from . import stochastics as st

    exo = st.CompositeSpec([("noise", st.gaussian([0.0], [[1.0]]))])

    def simulate(theta, phi):
        return Trace(states=[[theta[0] * phi[0]]], dt=1.0, labels=["value"])

    def cost(trace):
        return trace.states[0][0]

    return DesignProblem(
        name="scale-noise",
        theta_dim=1,
        bounds_lo=np.array([-10.0]),
        bounds_hi=np.array([10.0]),
        exogenous=exo,
        simulate=simulate,
        cost=cost,
        theta_init=np.array([2.0]),
        horizon=1,
        dt=1.0,
    )


def _make_uniform_metric():
    """Metric equals the exogenous Uniform(0,1) draw; extremes known exactly."""
    from . import stochastics as st

    exo = st.CompositeSpec([("draw", st.uniform([0.0], [1.0]))])

    def simulate(theta, phi):
        val = phi[0] + 0.0 * theta[0]
        return Trace(states=[[val]], dt=1.0, labels=["value"])

    def cost(trace):
        return trace.states[0][0]

    return DesignProblem(
        name="uniform-metric",
        theta_dim=1,
        bounds_lo=np.array([-1.0]),
        bounds_hi=np.array([1.0]),
        exogenous=exo,
        simulate=simulate,
        cost=cost,
        theta_init=np.array([0.0]),
        horizon=1,
        dt=1.0,
    )


def _make_constant_metric(value=7.0):
    """Simulator ignores everything; cost is a constant."""
    from . import stochastics as st

    exo = st.CompositeSpec([("noise", st.uniform([0.0], [1.0]))])

    def simulate(theta, phi):
        return Trace(
            states=[[value + 0.0 * theta[0] + 0.0 * phi[0]]],
            dt=1.0,
            labels=["value"],
        )

    def cost(trace):
        return trace.states[0][0]

    return DesignProblem(
        name="constant",
        theta_dim=1,
        bounds_lo=np.array([-1.0]),
        bounds_hi=np.array([1.0]),
        exogenous=exo,
        simulate=simulate,
        cost=cost,
        theta_init=np.array([0.0]),
        horizon=1,
        dt=1.0,
    )


register_problem("quadratic", _make_quadratic)
register_problem("scale-noise", lambda **cfg: _make_scale_noise())
register_problem("uniform-metric", lambda **cfg: _make_uniform_metric())
register_problem("constant", _make_constant_metric)
