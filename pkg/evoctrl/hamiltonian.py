# Copyright (c) evoctrl contributors.
#
# This source code is licensed under the MIT license found in the
# LICENSE file in the root directory of this source tree.

from __future__ import annotations

import math

import torch
from tensordict import tensorclass

from evoctrl.problem import ControlProblem
from evoctrl.statespace import pair_Astar
from evoctrl.utils import as_state, as_time, DTYPE

__all__ = ["HamiltonianResult", "hamiltonian", "hjb_residual"]


@tensorclass
class HamiltonianResult:
    """H(t, x, p) together with its minimizer.

    ``interior`` tells whether the minimizer lies strictly inside the control box.
    """

    value: torch.Tensor
    argmin_u: torch.Tensor
    interior: torch.Tensor


def _objective(
    problem: ControlProblem,
    t: torch.Tensor,
    x: torch.Tensor,
    p: torch.Tensor,
    u: torch.Tensor,
) -> torch.Tensor:
    # ⟨p, b(t, x, u)⟩ + L(t, x, u)
    b = problem.drift(t, x, u)
    return (p * b).sum(-1) + problem.running_cost(t, x, u)


def _strides(sizes: tuple[int, ...]) -> list[int]:
    return [math.prod(sizes[k + 1 :]) for k in range(len(sizes))]


def _refine(
    problem: ControlProblem,
    t: torch.Tensor,
    x: torch.Tensor,
    p: torch.Tensor,
    f: torch.Tensor,
    idx: torch.Tensor,
    u: torch.Tensor,
    value: torch.Tensor,
) -> tuple[torch.Tensor, torch.Tensor]:
    controls = problem.controls
    sizes = controls.grid_size
    spacing = controls.spacing
    shift = torch.zeros_like(u)
    for k, (n, stride) in enumerate(zip(sizes, _strides(sizes))):
        if n < 3:
            continue
        position = (idx // stride) % n
        inside = (position > 0) & (position < n - 1)
        lo = (idx - stride).clamp(0, f.shape[-1] - 1)
        hi = (idx + stride).clamp(0, f.shape[-1] - 1)
        f_lo = f.gather(-1, lo[..., None])[..., 0]
        f_hi = f.gather(-1, hi[..., None])[..., 0]
        curvature = f_lo - 2 * value + f_hi
        ok = inside & (curvature > 0)
        step = 0.5 * spacing[k] * (f_lo - f_hi) / torch.where(ok, curvature, torch.ones_like(curvature))
        step = step.clamp(-spacing[k], spacing[k])
        shift[..., k] = torch.where(ok, step, torch.zeros_like(step))
    candidate = torch.minimum(torch.maximum(u + shift, controls.lower), controls.upper)
    f_candidate = _objective(problem, t, x, p, candidate[..., None, :])[..., 0]
    f_candidate = torch.broadcast_to(f_candidate, value.shape)
    better = f_candidate < value
    u = torch.where(better[..., None], candidate, u)
    return u, torch.where(better, f_candidate, value)


def hamiltonian(
    problem: ControlProblem,
    t: torch.Tensor | float,
    x: torch.Tensor,
    p: torch.Tensor,
    refine: bool = True,
) -> HamiltonianResult:
    """H(t, x, p) = inf over U of ⟨p, b(t, x, u)⟩ + L(t, x, u).

    The infimum is taken over the grid of the control set (ties resolve to the
    lexicographically smallest grid point), followed by one quadratic
    refinement per coordinate around the grid minimizer that is kept only if it
    lowers the value. Inputs may carry matching batch dimensions.

    Examples:
        >>> from evoctrl.problem import scalar_toy_problem
        >>> res = hamiltonian(scalar_toy_problem(), 0.0, torch.zeros(1), torch.ones(1))
        >>> res.value, res.argmin_u
        (tensor(-0.5000, dtype=torch.float64), tensor([-1.], dtype=torch.float64))
    """
    t = as_time(t)
    x = as_state(x)
    p = as_state(p)
    batch = torch.broadcast_shapes(t.shape, x.shape[:-1], p.shape[:-1])
    grid = problem.controls.grid
    t_, x_, p_ = t[..., None], x[..., None, :], p[..., None, :]
    f = torch.broadcast_to(_objective(problem, t_, x_, p_, grid), batch + (grid.shape[0],))
    value, idx = f.min(-1)
    u = grid[idx]
    if refine:
        u, value = _refine(problem, t_, x_, p_, f, idx, u, value)
    lower, upper = problem.controls.lower, problem.controls.upper
    interior = ((u > lower + 1e-12) & (u < upper - 1e-12)).all(-1)
    return HamiltonianResult(
        value=value.to(DTYPE),
        argmin_u=u,
        interior=interior,
        batch_size=batch,
    )


def hjb_residual(
    problem: ControlProblem,
    w_t: torch.Tensor | float,
    Dw: torch.Tensor,
    t: torch.Tensor | float,
    x: torch.Tensor,
) -> torch.Tensor:
    """w_t + ⟨A*Dw, x⟩ + H(t, x, Dw), zero where w is a classical solution."""
    Dw = as_state(Dw)
    return as_time(w_t) + pair_Astar(problem.A, Dw, x) + hamiltonian(problem, t, x, Dw).value
