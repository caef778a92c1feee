# Copyright (c) evoctrl contributors.
#
# This source code is licensed under the MIT license found in the
# LICENSE file in the root directory of this source tree.

"""Mild solutions of ẋ = Ax + b(t, x, u) under piecewise-constant controls."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, TYPE_CHECKING

import torch
from tensordict import tensorclass

from evoctrl.statespace import pair_Astar, SpectralOperator
from evoctrl.utils import as_state, as_time, DTYPE

if TYPE_CHECKING:
    from evoctrl.problem import ControlProblem, Test1Fn, Test2Fn

__all__ = [
    "PiecewiseControl",
    "Trajectory",
    "chain_rule_residual",
    "cost",
    "integrate_mild",
    "running_cost_integral",
    "sample_feedback",
    "test2_residual",
]

_TIME_TOL = 1e-12


@dataclass(frozen=True, eq=False)
class PiecewiseControl:
    """u(s) = values[i] on [knots[i], knots[i+1]).

    Args:
        knots (tensor): strictly increasing times, shape ``[n + 1]``.
        values (tensor): control points, shape ``[..., n, d]``. Leading
            dimensions describe a batch of controls sharing the same knots.

    Examples:
        >>> u = PiecewiseControl.uniform(0.0, 1.0, torch.tensor([[-1.0], [1.0]]))
        >>> u(torch.tensor([0.25, 0.75]))
        tensor([[-1.],
                [ 1.]], dtype=torch.float64)
    """

    knots: torch.Tensor
    values: torch.Tensor

    def __post_init__(self) -> None:
        knots = torch.as_tensor(self.knots, dtype=DTYPE).reshape(-1)
        values = torch.as_tensor(self.values, dtype=DTYPE)
        if values.ndim == 1:
            values = values[:, None]
        if knots.numel() < 2 or not (knots.diff() > 0).all():
            raise ValueError(f"knots must be strictly increasing with at least two entries, got {knots.tolist()}")
        if values.shape[-2] != knots.numel() - 1:
            raise ValueError(
                f"expected {knots.numel() - 1} control values for {knots.numel()} knots, "
                f"got values of shape {tuple(values.shape)}"
            )
        if not torch.isfinite(values).all():
            raise ValueError("control values must be finite")
        object.__setattr__(self, "knots", knots)
        object.__setattr__(self, "values", values)

    @classmethod
    def constant(cls, value, t0: float, t1: float) -> PiecewiseControl:
        value = torch.as_tensor(value, dtype=DTYPE).reshape(-1)
        return cls(torch.tensor([t0, t1], dtype=DTYPE), value[None])

    @classmethod
    def uniform(cls, t0: float, t1: float, values: torch.Tensor) -> PiecewiseControl:
        """Pieces of equal length on [t0, t1]; ``values`` is ``[..., n, d]`` or ``[n]``."""
        values = torch.as_tensor(values, dtype=DTYPE)
        if values.ndim == 1:
            values = values[:, None]
        n = values.shape[-2]
        return cls(torch.linspace(t0, t1, n + 1, dtype=DTYPE), values)

    @property
    def n_pieces(self) -> int:
        return self.knots.numel() - 1

    @property
    def dim(self) -> int:
        return self.values.shape[-1]

    @property
    def batch_shape(self) -> torch.Size:
        return self.values.shape[:-2]

    @property
    def start(self) -> float:
        return self.knots[0].item()

    @property
    def end(self) -> float:
        return self.knots[-1].item()

    def piece_index(self, times: torch.Tensor) -> torch.Tensor:
        times = as_time(times)
        idx = torch.searchsorted(self.knots, times.contiguous(), right=True) - 1
        return idx.clamp(0, self.n_pieces - 1)

    def __call__(self, times: torch.Tensor | float) -> torch.Tensor:
        times = as_time(times)
        idx = self.piece_index(times.reshape(-1))
        out = self.values[..., idx, :]
        if times.ndim == 0:
            return out[..., 0, :]
        return out

    def extend(self, other: PiecewiseControl) -> PiecewiseControl:
        """Concatenates ``other``, which must start where this control ends."""
        if abs(other.start - self.end) > _TIME_TOL:
            raise ValueError(f"cannot extend a control ending at {self.end} by one starting at {other.start}")
        values = torch.cat(_align(self.values, other.values), dim=-2)
        return PiecewiseControl(torch.cat([self.knots, other.knots[1:]]), values)

    def table(self) -> dict[str, torch.Tensor]:
        """Columns for CSV export: piece start, piece end, value."""
        values = self.values.reshape(-1, self.n_pieces, self.dim)[0]
        return {"start": self.knots[:-1], "end": self.knots[1:], "value": values}


def _align(a: torch.Tensor, b: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    batch = torch.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    return a.expand(batch + a.shape[-2:]), b.expand(batch + b.shape[-2:])


@tensorclass
class Trajectory:
    """Samples of a mild solution.

    ``controls[..., j, :]`` is the control in force on ``[times[j], times[j+1])``
    (the last sample repeats the last interval's control) and ``dt[..., j]``
    the integrator step used on the interval ending at ``times[j]``.
    """

    times: torch.Tensor
    states: torch.Tensor
    controls: torch.Tensor
    dt: torch.Tensor

    def final_state(self) -> torch.Tensor:
        return self.states[..., -1, :]

    def table(self) -> dict[str, torch.Tensor]:
        """Columns for CSV export of a single (unbatched) trajectory."""
        return {"time": self.times, "coeff": self.states, "control": self.controls}


def _sample_grid(t0: float, t_end: float, n_samples: int, knots: torch.Tensor) -> torch.Tensor:
    if t_end - t0 <= _TIME_TOL:
        return torch.tensor([t0], dtype=DTYPE)
    grid = torch.linspace(t0, t_end, max(n_samples, 2), dtype=DTYPE)
    inner = knots[(knots > t0 + _TIME_TOL) & (knots < t_end - _TIME_TOL)]
    times = torch.cat([grid, inner]).sort().values
    keep = torch.cat([torch.tensor([True]), times.diff() > _TIME_TOL])
    times = times[keep]
    times[-1] = t_end
    return times


def _propagators(A: SpectralOperator, h: float, cache: dict) -> tuple[torch.Tensor, torch.Tensor]:
    key = round(h, 14)
    if key not in cache:
        cache[key] = (A.semigroup_matrix(h), A.semigroup_matrix(0.5 * h))
    return cache[key]


def _drift(problem: ControlProblem, t: float, x: torch.Tensor, u: torch.Tensor) -> torch.Tensor:
    k = problem.drift(t, x, u)
    if not torch.isfinite(k).all():
        bad = (~torch.isfinite(torch.broadcast_to(k, torch.broadcast_shapes(k.shape, x.shape)))).any(-1)
        row = bad.reshape(-1).nonzero()[0].item()
        xs = torch.broadcast_to(x, bad.shape + x.shape[-1:]).reshape(-1, x.shape[-1])
        us = torch.broadcast_to(u, bad.shape + u.shape[-1:]).reshape(-1, u.shape[-1])
        raise RuntimeError(
            f"non-finite drift at t={t:.9g}, x={xs[row].tolist()}, u={us[row].tolist()}"
        )
    return k


def _lawson_midpoint(
    problem: ControlProblem,
    t: float,
    x: torch.Tensor,
    u: torch.Tensor,
    h: float,
    E: torch.Tensor,
    E_half: torch.Tensor,
) -> torch.Tensor:
    # x_{j+1} = E_h x_j + h E_{h/2} b(t_j + h/2, x_pred); x_pred = E_{h/2}(x_j + h/2 b(t_j, x_j))
    k1 = _drift(problem, t, x, u)
    x_pred = (x + 0.5 * h * k1) @ E_half.T
    k2 = _drift(problem, t + 0.5 * h, x_pred, u)
    return x @ E.T + h * (k2 @ E_half.T)


def integrate_mild(
    problem: ControlProblem,
    t0: float,
    x0: torch.Tensor,
    u: PiecewiseControl,
    dt: float | None = None,
    n_samples: int = 512,
    t_end: float | None = None,
) -> Trajectory:
    """Integrates the state equation from (t0, x0) with an exponential midpoint rule.

    The semigroup part is applied exactly (block matrix exponentials), only the
    drift is quadratured. The output is sampled on a uniform grid of
    ``n_samples`` points merged with the control knots; every sample interval
    is split into ``ceil(length / dt)`` equal steps, so no step crosses a knot.

    Args:
        problem (ControlProblem): the problem.
        t0 (float): initial time.
        x0 (tensor): initial state, shape ``[N]`` or ``[..., N]``.
        u (PiecewiseControl): the control, defined on ``[t0, t_end]``.
        dt (float, optional): maximal integrator step. Defaults to ``1e-3 * T``.
        n_samples (int, optional): size of the uniform sample grid. Defaults to 512.
        t_end (float, optional): final time. Defaults to the horizon T.

    Returns:
        a :class:`Trajectory` with batch dimensions ``batch + [samples]``.

    Examples:
        >>> from evoctrl.problem import scalar_toy_problem
        >>> problem = scalar_toy_problem()
        >>> u = PiecewiseControl.constant([-1.0], 0.0, 1.0)
        >>> integrate_mild(problem, 0.0, torch.zeros(1), u).final_state()
        tensor([-1.], dtype=torch.float64)
    """
    T = problem.horizon
    t0 = float(t0)
    t_end = T if t_end is None else float(t_end)
    if not (0 <= t0 <= t_end <= T + _TIME_TOL):
        raise ValueError(f"integration interval [{t0}, {t_end}] is not inside [0, {T}]")
    dt = 1e-3 * T if dt is None else float(dt)
    if not dt > 0:
        raise ValueError(f"dt must be positive, got {dt}")
    x0 = as_state(x0)
    if x0.shape[-1] != problem.dim:
        raise ValueError(f"initial state has {x0.shape[-1]} coordinates, problem has {problem.dim}")
    if u.start > t0 + _TIME_TOL or u.end < t_end - _TIME_TOL:
        raise ValueError(f"control defined on [{u.start}, {u.end}] does not cover [{t0}, {t_end}]")
    if u.dim != problem.control_dim:
        raise ValueError(f"control has dimension {u.dim}, problem expects {problem.control_dim}")
    if not problem.controls.contains(u.values).all():
        raise ValueError("control values leave the control box")

    times = _sample_grid(t0, t_end, n_samples, u.knots)
    batch = torch.broadcast_shapes(x0.shape[:-1], u.batch_shape)
    x = x0.expand(batch + x0.shape[-1:]).clone()
    states = [x]
    controls = []
    steps = [0.0]
    cache: dict = {}
    for j in range(times.numel() - 1):
        a, b = times[j].item(), times[j + 1].item()
        n_steps = max(1, math.ceil((b - a) / dt - 1e-9))
        h = (b - a) / n_steps
        uj = u(0.5 * (a + b))
        E, E_half = _propagators(problem.A, h, cache)
        s = a
        for _ in range(n_steps):
            x = _lawson_midpoint(problem, s, x, uj, h, E, E_half)
            s += h
        states.append(x)
        controls.append(uj.expand(batch + uj.shape[-1:]))
        steps.append(h)
    if controls:
        controls.append(controls[-1])
    else:
        uj = u(t0)
        controls.append(uj.expand(batch + uj.shape[-1:]))

    S = times.numel()
    states = torch.stack(states, -2)
    return Trajectory(
        times=times.expand(batch + (S,)).clone(),
        states=states,
        controls=torch.stack(controls, -2),
        dt=torch.as_tensor(steps, dtype=DTYPE).expand(batch + (S,)).clone(),
        batch_size=batch + (S,),
    )


def _interval_controls(traj: Trajectory, u: PiecewiseControl | None) -> torch.Tensor:
    if u is None:
        return traj.controls[..., :-1, :]
    times = traj.times.reshape(-1, traj.times.shape[-1])[0]
    mid = 0.5 * (times[1:] + times[:-1])
    return torch.broadcast_to(u(mid), traj.controls[..., :-1, :].shape)


def running_cost_integral(
    problem: ControlProblem, traj: Trajectory, u: PiecewiseControl | None = None
) -> torch.Tensor:
    """∫ L(s, x(s), u(s)) ds over the trajectory span, midpoint rule per sample interval."""
    times = traj.times
    if times.shape[-1] < 2:
        return torch.zeros(times.shape[:-1], dtype=DTYPE)
    mid_t = 0.5 * (times[..., 1:] + times[..., :-1])
    mid_x = 0.5 * (traj.states[..., 1:, :] + traj.states[..., :-1, :])
    L = problem.running_cost(mid_t, mid_x, _interval_controls(traj, u))
    return (L * times.diff(dim=-1)).sum(-1)


def cost(
    problem: ControlProblem,
    t0: float,
    traj: Trajectory,
    u: PiecewiseControl | None = None,
) -> torch.Tensor:
    """J(t0, x0; u) = ∫ L ds + h(x(T)) along a trajectory spanning [t0, T]."""
    times = traj.times.reshape(-1, traj.times.shape[-1])[0]
    if abs(times[0].item() - t0) > _TIME_TOL or abs(times[-1].item() - problem.horizon) > 1e-9:
        raise ValueError(
            f"trajectory spans [{times[0].item()}, {times[-1].item()}], cost needs [{t0}, {problem.horizon}]"
        )
    return running_cost_integral(problem, traj, u) + problem.terminal_cost(traj.final_state())


def chain_rule_residual(
    problem: ControlProblem,
    phi: Test1Fn,
    traj: Trajectory,
    u: PiecewiseControl | None = None,
) -> torch.Tensor:
    """|φ(s, x(s)) − φ(t, x) − ∫ [φ_t + ⟨A*Dφ, x⟩ + ⟨Dφ, b⟩] dr| at the trajectory end.

    The integral uses the trapezoid rule on the sample grid with the control of
    each interval, so the residual is O(spacing²).
    """
    phi.validate(problem.A)
    times, states = traj.times, traj.states
    controls = _interval_controls(traj, u)

    def integrand(s, x, v):
        grad = phi.gradient(s, x)
        b = torch.broadcast_to(problem.drift(s, x, v), x.shape)
        return phi.time_derivative(s, x) + pair_Astar(problem.A, grad, x) + (grad * b).sum(-1)

    left = integrand(times[..., :-1], states[..., :-1, :], controls)
    right = integrand(times[..., 1:], states[..., 1:, :], controls)
    integral = (0.5 * (left + right) * times.diff(dim=-1)).sum(-1)
    increment = phi(times[..., -1], states[..., -1, :]) - phi(times[..., 0], states[..., 0, :])
    return (increment - integral).abs()


def test2_residual(
    problem: ControlProblem,
    g: Test2Fn,
    traj: Trajectory,
    u: PiecewiseControl | None = None,
) -> torch.Tensor:
    """Signed defect of the first-order expansion of g along the trajectory.

    Returns [g(s, x(s)) − g(t, x)] − [g_t(t, x)(s − t) + ∫ ⟨Dg(t, x), b(t, x, u(r))⟩ dr]
    with s the trajectory end; the expansion requires defect ≤ o(s − t).
    """
    times, states = traj.times, traj.states
    t0, x0 = times[..., 0], states[..., 0, :]
    grad = g.gradient(t0, x0)
    controls = _interval_controls(traj, u)
    frozen = problem.drift(t0[..., None], x0[..., None, :], controls)
    frozen = torch.broadcast_to(frozen, controls.shape[:-1] + x0.shape[-1:])
    integral = ((grad[..., None, :] * frozen).sum(-1) * times.diff(dim=-1)).sum(-1)
    span = times[..., -1] - t0
    increment = g(times[..., -1], states[..., -1, :]) - g(t0, x0)
    return increment - (g.time_derivative(t0, x0) * span + integral)


# keep pytest from collecting it when imported into a test module
test2_residual.__test__ = False  # type: ignore[attr-defined]


def sample_feedback(
    problem: ControlProblem,
    t0: float,
    x0: torch.Tensor,
    feedback: Callable[[float, torch.Tensor], torch.Tensor],
    n_pieces: int,
    t_end: float | None = None,
    dt: float | None = None,
) -> PiecewiseControl:
    """Turns a feedback map into a piecewise-constant control.

    On each of ``n_pieces`` equal pieces the control is the feedback evaluated
    at the piece start along the simulated trajectory.
    """
    if n_pieces < 1:
        raise ValueError(f"n_pieces must be positive, got {n_pieces}")
    t_end = problem.horizon if t_end is None else float(t_end)
    knots = torch.linspace(float(t0), t_end, n_pieces + 1, dtype=DTYPE)
    x = as_state(x0)
    values = []
    for i in range(n_pieces):
        a, b = knots[i].item(), knots[i + 1].item()
        value = torch.as_tensor(feedback(a, x), dtype=DTYPE).reshape(-1)
        value = torch.minimum(torch.maximum(value, problem.controls.lower), problem.controls.upper)
        values.append(value)
        piece = PiecewiseControl(knots[i : i + 2], value[None])
        x = integrate_mild(problem, a, x, piece, dt=dt, n_samples=2, t_end=b).final_state()
    return PiecewiseControl(knots, torch.stack(values))
