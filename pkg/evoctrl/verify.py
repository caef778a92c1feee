# Copyright (c) evoctrl contributors.
#
# This source code is licensed under the MIT license found in the
# LICENSE file in the root directory of this source tree.

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Iterator, Sequence

import torch
from tensordict import tensorclass, TensorDict

from evoctrl.dynamics import PiecewiseControl, Trajectory
from evoctrl.problem import ControlProblem
from evoctrl.statespace import pair_Astar
from evoctrl.utils import as_state, as_time, DTYPE, ProbeReport, sample_unit_vectors
from evoctrl.value import compute_G, ScalarField, vintage_value_field

logger = logging.getLogger(__name__)

__all__ = [
    "CertificateSelectors",
    "CondminResult",
    "check_condmin",
    "check_superdiff_membership",
    "remliyo_residual",
    "vintage_selectors",
]


@tensorclass
class CertificateSelectors:
    """Samples of the certificate (q, p1, p2) on a trajectory grid.

    ``q`` is ``[S]``, ``p1`` (the D(A*) part) and ``p2`` (the radial part)
    are ``[S, N]``.
    """

    q: torch.Tensor
    p1: torch.Tensor
    p2: torch.Tensor

    def validate(self) -> None:
        for name in ("q", "p1", "p2"):
            if not torch.isfinite(getattr(self, name)).all():
                raise ValueError(f"certificate component {name} has non-finite samples")


def vintage_selectors(
    problem: ControlProblem, traj: Trajectory, strict: bool = False
) -> CertificateSelectors:
    """The closed-form certificate q = ∂_tV, p1 = DV, p2 = 0 along ``traj``.

    ``strict`` assigns the hyperplane ⟨α,x⟩ = 0 to the positive side, matching
    the feedback variant with the same flag.
    """
    V = vintage_value_field(problem)
    times, states = traj.times, traj.states
    q = V.time_derivative(times, states)
    p1 = V.gradient(times, states)
    if strict:
        params = problem.params
        on_plane = (states * params.alpha).sum(-1) == 0
        G = compute_G(params.eigenvalue, times, params.horizon)
        p1 = torch.where(on_plane[..., None], -G[..., None] * params.alpha, p1)
    return CertificateSelectors(q=q, p1=p1, p2=torch.zeros_like(p1), batch_size=times.shape)


def check_superdiff_membership(
    problem: ControlProblem,
    w: ScalarField,
    t: float,
    x: torch.Tensor,
    q: float,
    p1: torch.Tensor,
    p2: torch.Tensor | None = None,
    radius: float = 1e-2,
    samples: int = 256,
    generator: torch.Generator | None = None,
    tolerance: float = 1e-6,
) -> ProbeReport:
    """Checks the superdifferential inequality
    w(s, y) ≤ w(t, x) + q(s − t) + ⟨p1 + p2, y − x⟩ + C(|s − t|² + ‖y − x‖²) near (t, x).

    Unit directions (σ, d) are scaled to ρ = r, r/2, r/4; the first-order
    excess [w(t + ρσ, x + ρd) − w(t, x) − ρ(qσ + ⟨p1 + p2, d⟩)]/ρ is
    extrapolated to ρ → 0 per direction and must stay below ``tolerance``.
    Directions leaving [0, T] are dropped. The details report the fitted
    second-order constant C, whether p1 is in the D(A*) budget and whether p2
    is radial-compatible (a non-negative multiple of x).
    """
    if radius <= 0:
        raise ValueError(f"radius must be positive, got {radius}")
    if samples < 1:
        raise ValueError(f"samples must be positive, got {samples}")
    x = as_state(x)
    p1 = as_state(p1)
    p2 = torch.zeros_like(p1) if p2 is None else as_state(p2)
    p = p1 + p2
    direction = sample_unit_vectors(samples, problem.dim + 1, generator)
    sigma, d = direction[:, 0], direction[:, 1:]
    keep = ((t + radius * sigma) >= 0) & ((t + radius * sigma) <= problem.horizon)
    sigma, d = sigma[keep], d[keep]
    if not sigma.numel():
        raise ValueError(f"no probe direction stays in [0, {problem.horizon}] at t={t}, radius={radius}")

    base = w(t, x)
    rho = radius * torch.tensor([1.0, 0.5, 0.25], dtype=DTYPE)
    s = t + rho[:, None] * sigma
    y = x + rho[:, None, None] * d
    linear = q * sigma + (d * p).sum(-1)
    excess = (w(s, y) - base) / rho[:, None] - linear
    extrapolated = (8 * excess[2] - 6 * excess[1] + excess[0]) / 3
    slope = ((excess[0] - extrapolated) / radius).clamp_min(0)
    violation = extrapolated.max().item()

    x_norm = x.norm()
    if p2.norm() == 0:
        radial = True
    elif x_norm == 0:
        radial = False
    else:
        kappa = (p2 * x).sum() / x_norm**2
        radial = bool(kappa >= 0 and torch.allclose(p2, kappa * x, atol=1e-10))
    return ProbeReport(
        name="superdiff_membership",
        passed=violation <= tolerance,
        statistic=violation,
        witnesses=TensorDict(
            {"sigma": sigma, "direction": d, "excess": extrapolated, "slope": slope},
            batch_size=[sigma.shape[0]],
        ),
        details={
            "C": slope.max().item(),
            "p1_in_domain": bool(problem.A.in_domain(p1)),
            "p2_radial_compatible": radial,
            "checked": "first-order superdifferential inequality",
        },
    )


@dataclass
class CondminResult:
    """Both sides of the integral certificate inequality lhs ≤ rhs.

    Unpacks as ``lhs, rhs, passed``. ``equality`` tells whether
    |lhs − rhs| ≤ ``equality_tolerance``; ``p2_pairing`` is ∫⟨p2, Ax⟩ ds.
    """

    lhs: float
    rhs: float
    passed: bool
    equality: bool
    tolerance: float
    integrands: TensorDict
    p2_pairing: float

    def __iter__(self) -> Iterator:
        return iter((self.lhs, self.rhs, self.passed))


def _trapezoid(values_left: torch.Tensor, values_right: torch.Tensor, times: torch.Tensor) -> torch.Tensor:
    return (0.5 * (values_left + values_right) * times.diff()).sum()


def check_condmin(
    problem: ControlProblem,
    traj: Trajectory,
    u: PiecewiseControl | None,
    sel: CertificateSelectors,
    tolerance: float | None = None,
    equality_tolerance: float = 1e-3,
) -> CondminResult:
    """Integral certificate along a single trajectory.

    lhs = ∫ [⟨p1 + p2, b(s, x, u)⟩ + q + ⟨A*p1, x⟩] ds and rhs = −∫ L(s, x, u) ds,
    both by the trapezoid rule on the trajectory grid with the control in
    force on each interval. Passes iff lhs ≤ rhs + tolerance, the tolerance
    defaulting to 10 times the largest integrator step.
    """
    if len(traj.batch_size) != 1:
        raise ValueError(f"check_condmin expects a single trajectory, got batch {tuple(traj.batch_size)}")
    if sel.batch_size != traj.batch_size:
        raise ValueError(f"selectors of batch {tuple(sel.batch_size)} do not match the trajectory {tuple(traj.batch_size)}")
    sel.validate()
    times, states = traj.times, traj.states
    if times.numel() < 2:
        raise ValueError("check_condmin needs at least two trajectory samples")
    if u is None:
        controls = traj.controls[:-1]
    else:
        controls = u(0.5 * (times[1:] + times[:-1]))
    tolerance = 10 * traj.dt.max().item() if tolerance is None else float(tolerance)

    def certificate(idx: slice) -> torch.Tensor:
        s, x = times[idx], states[idx]
        b = torch.broadcast_to(problem.drift(s, x, controls), x.shape)
        p = sel.p1[idx] + sel.p2[idx]
        return (p * b).sum(-1) + sel.q[idx] + pair_Astar(problem.A, sel.p1[idx], x)

    def cost(idx: slice) -> torch.Tensor:
        return -problem.running_cost(times[idx], states[idx], controls)

    left, right = slice(None, -1), slice(1, None)
    c_left, c_right = certificate(left), certificate(right)
    l_left, l_right = cost(left), cost(right)
    lhs = _trapezoid(c_left, c_right, times).item()
    rhs = _trapezoid(l_left, l_right, times).item()
    pairing = (sel.p2 * problem.A.apply(states)).sum(-1)
    p2_pairing = _trapezoid(pairing[:-1], pairing[1:], times).item()
    logger.debug("condmin lhs=%.9g rhs=%.9g", lhs, rhs)
    return CondminResult(
        lhs=lhs,
        rhs=rhs,
        passed=lhs <= rhs + tolerance,
        equality=abs(lhs - rhs) <= equality_tolerance,
        tolerance=tolerance,
        integrands=TensorDict(
            {
                "start": times[:-1],
                "end": times[1:],
                "certificate": 0.5 * (c_left + c_right),
                "minus_cost": 0.5 * (l_left + l_right),
            },
            batch_size=[times.numel() - 1],
        ),
        p2_pairing=p2_pairing,
    )


def _extrapolate(deltas: torch.Tensor, values: torch.Tensor) -> torch.Tensor:
    # Lagrange interpolation evaluated at 0
    result = torch.zeros((), dtype=DTYPE)
    for i in range(deltas.numel()):
        weight = torch.ones((), dtype=DTYPE)
        for j in range(deltas.numel()):
            if j != i:
                weight = weight * deltas[j] / (deltas[j] - deltas[i])
        result = result + weight * values[i]
    return result


def remliyo_residual(
    problem: ControlProblem,
    V: ScalarField,
    s: float,
    x_s: torch.Tensor,
    u: torch.Tensor,
    deltas: Sequence[float] = (1e-2, 5e-3, 2.5e-3),
) -> float:
    """Pointwise optimality defect of the control value ``u`` at (s, x_s).

    The difference quotient [V(s + δ, x_s + δ(Ax_s + b(s, x_s, u))) − V(s, x_s)]/δ
    plus L(s, x_s, u) is extrapolated to δ → 0 from the given ``deltas``. The
    result vanishes when u is optimal at (s, x_s). Deltas reaching beyond T
    are scaled down proportionally.

    Examples:
        >>> from evoctrl.problem import scalar_toy_problem
        >>> V = ScalarField(lambda t, x: x[..., 0] - (1 - t) / 2)
        >>> round(remliyo_residual(scalar_toy_problem(), V, 0.5, torch.zeros(1), torch.tensor([-1.0])), 9)
        0.0
    """
    d = torch.as_tensor(deltas, dtype=DTYPE)
    if d.ndim != 1 or d.numel() < 1 or (d <= 0).any() or (d.diff() >= 0).any():
        raise ValueError(f"deltas must be positive and decreasing, got {list(deltas)}")
    room = problem.horizon - float(s)
    if room <= 0:
        raise ValueError(f"s must be before T = {problem.horizon}, got {s}")
    if d[0] > room:
        d = d * (room / d[0].item())
    x_s = as_state(x_s)
    u = torch.as_tensor(u, dtype=DTYPE).reshape(-1)
    s_t = as_time(s)
    velocity = problem.A.apply(x_s) + torch.broadcast_to(problem.drift(s_t, x_s, u), x_s.shape)
    quotients = (V(s + d, x_s + d[:, None] * velocity) - V(s, x_s)) / d
    running = problem.running_cost(s_t, x_s, u)
    return (_extrapolate(d, quotients) + running).item()
