# Copyright (c) evoctrl contributors.
#
# This source code is licensed under the MIT license found in the
# LICENSE file in the root directory of this source tree.

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from typing import Any, Callable, Sequence

import torch
from tensordict import TensorDict

from evoctrl.dynamics import integrate_mild, PiecewiseControl
from evoctrl.statespace import (
    FourierTruncation,
    fourier_smoothing,
    norm_gamma,
    rotation_generator,
    SmoothingOperator,
    SpectralOperator,
)
from evoctrl.utils import as_state, as_time, DTYPE, ProbeReport, sample_ball

__all__ = [
    "ControlProblem",
    "ControlSet",
    "PROBLEMS",
    "Test1Fn",
    "Test2Fn",
    "VintageParams",
    "make_problem",
    "probe_lipschitz",
    "probe_uniform_modulus",
    "scalar_nonlinear_problem",
    "scalar_toy_problem",
    "square_wave_coefficients",
    "vintage_problem",
]

Drift = Callable[[torch.Tensor, torch.Tensor, torch.Tensor], torch.Tensor]
RunningCost = Callable[[torch.Tensor, torch.Tensor, torch.Tensor], torch.Tensor]
TerminalCost = Callable[[torch.Tensor], torch.Tensor]


@dataclass(frozen=True, eq=False)
class ControlSet:
    """A compact box in R^d with a uniform evaluation grid.

    Args:
        lower (tensor): lower corner of the box, shape ``[d]``.
        upper (tensor): upper corner of the box, shape ``[d]``.
        grid_size (int or sequence of int): number of grid points per
            dimension. Defaults to 201.

    The grid is the cartesian product of the per-dimension axes, listed in
    lexicographic order (first coordinate varies slowest).
    """

    lower: torch.Tensor
    upper: torch.Tensor
    grid_size: int | Sequence[int] = 201

    def __post_init__(self) -> None:
        lower = torch.as_tensor(self.lower, dtype=DTYPE).reshape(-1)
        upper = torch.as_tensor(self.upper, dtype=DTYPE).reshape(-1)
        if lower.shape != upper.shape or lower.numel() == 0:
            raise ValueError(
                f"control box corners must be non-empty and of equal shape, got "
                f"{tuple(lower.shape)} and {tuple(upper.shape)}"
            )
        if (lower > upper).any():
            raise ValueError(f"empty control box: lower={lower.tolist()} upper={upper.tolist()}")
        sizes = self.grid_size
        if isinstance(sizes, int):
            sizes = [sizes] * lower.numel()
        sizes = tuple(int(n) for n in sizes)
        if len(sizes) != lower.numel() or min(sizes) < 1:
            raise ValueError(f"grid_size must hold one positive entry per dimension, got {sizes}")
        axes = tuple(torch.linspace(lo, hi, n, dtype=DTYPE) for lo, hi, n in zip(lower, upper, sizes))
        grid = torch.cartesian_prod(*axes) if len(axes) > 1 else axes[0][:, None]
        object.__setattr__(self, "lower", lower)
        object.__setattr__(self, "upper", upper)
        object.__setattr__(self, "grid_size", sizes)
        object.__setattr__(self, "axes", axes)
        object.__setattr__(self, "grid", grid.reshape(-1, lower.numel()))

    @classmethod
    def box(cls, bound: float, dim: int = 1, grid_size: int = 201) -> ControlSet:
        """The symmetric box [−bound, bound]^dim."""
        return cls(-bound * torch.ones(dim), bound * torch.ones(dim), grid_size)

    @property
    def dim(self) -> int:
        return self.lower.numel()

    @property
    def spacing(self) -> torch.Tensor:
        n = torch.as_tensor(self.grid_size, dtype=DTYPE)
        return (self.upper - self.lower) / (n - 1).clamp_min(1)

    def contains(self, u: torch.Tensor, tolerance: float = 1e-12) -> torch.Tensor:
        u = torch.as_tensor(u, dtype=DTYPE)
        inside = (u >= self.lower - tolerance) & (u <= self.upper + tolerance)
        return inside.all(-1)

    def with_grid_size(self, grid_size: int | Sequence[int]) -> ControlSet:
        return ControlSet(self.lower, self.upper, grid_size)


@dataclass(frozen=True, eq=False)
class ControlProblem:
    """Everything that defines a finite-horizon control problem.

    The callables follow a broadcasting contract: ``t`` carries the batch
    shape, ``x`` is ``[..., N]`` and ``u`` is ``[..., d]``. ``drift`` returns
    ``[..., N]``, ``running_cost`` and ``terminal_cost`` return ``[...]``.

    Args:
        name (str): registry name of the problem.
        A (SpectralOperator): the generator of the state semigroup.
        B (SmoothingOperator): the operator defining ‖·‖_{−1}.
        horizon (float): the final time T.
        controls (ControlSet): the control set U.
        drift (callable): b(t, x, u).
        running_cost (callable): L(t, x, u).
        terminal_cost (callable): h(x).
        K (float): ‖·‖_{−1}-Lipschitz constant of the drift.
        M (float): bound constant of the problem family.
        growth_k (float): polynomial growth exponent of the value function.
        params (any, optional): problem-family specific parameters.
    """

    name: str
    A: SpectralOperator
    B: SmoothingOperator
    horizon: float
    controls: ControlSet
    drift: Drift
    running_cost: RunningCost
    terminal_cost: TerminalCost
    K: float = 1.0
    M: float = 0.0
    growth_k: float = 1.0
    params: Any = None

    def __post_init__(self) -> None:
        if not self.horizon > 0:
            raise ValueError(f"horizon must be positive, got {self.horizon}")
        if self.A.dim != self.B.dim:
            raise ValueError(f"A acts on R^{self.A.dim} but B on R^{self.B.dim}")
        if not self.A.is_dissipative():
            raise ValueError("the generator A is not dissipative")
        if not self.K > 0:
            raise ValueError(f"K must be positive, got {self.K}")
        if self.M < 0 or self.growth_k < 0:
            raise ValueError(f"M and growth_k must be non-negative, got {self.M}, {self.growth_k}")

    @property
    def dim(self) -> int:
        return self.A.dim

    @property
    def control_dim(self) -> int:
        return self.controls.dim

    def fingerprint(self) -> str:
        """A stable hash of the problem data, used as oracle cache key."""
        digest = hashlib.sha1()
        digest.update(self.name.encode())
        digest.update(repr((float(self.horizon), self.K, self.M, self.growth_k)).encode())
        digest.update(self.A.matrix.numpy().tobytes())
        digest.update(self.B.diag.numpy().tobytes())
        digest.update(self.controls.grid.numpy().tobytes())
        if self.params is not None:
            digest.update(repr(self.params).encode())
        return digest.hexdigest()

    def with_controls(self, controls: ControlSet) -> ControlProblem:
        return ControlProblem(
            self.name,
            self.A,
            self.B,
            self.horizon,
            controls,
            self.drift,
            self.running_cost,
            self.terminal_cost,
            self.K,
            self.M,
            self.growth_k,
            self.params,
        )


def _ones(t: torch.Tensor) -> torch.Tensor:
    return torch.ones_like(as_time(t))


def _zeros(t: torch.Tensor) -> torch.Tensor:
    return torch.zeros_like(as_time(t))


@dataclass(frozen=True, eq=False)
class Test1Fn:
    """φ(t, x) = η(t)⟨a, x⟩ + ½⟨Qx, x⟩ + ψ(t).

    ``Q`` is optional (zero by default) and must be symmetric. ``eta_dot`` and
    ``psi_dot`` are the exact time derivatives of ``eta`` and ``psi``.
    """

    __test__ = False

    a: torch.Tensor
    eta: Callable = _ones
    eta_dot: Callable = _zeros
    psi: Callable = _zeros
    psi_dot: Callable = _zeros
    Q: torch.Tensor | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "a", as_state(self.a))
        if self.Q is not None:
            Q = as_state(self.Q)
            if Q.shape != (self.a.numel(), self.a.numel()) or not torch.allclose(Q, Q.T):
                raise ValueError("Q must be a symmetric N x N matrix")
            object.__setattr__(self, "Q", Q)

    def _quadratic(self, x: torch.Tensor) -> torch.Tensor:
        if self.Q is None:
            return torch.zeros(x.shape[:-1], dtype=DTYPE)
        return 0.5 * ((x @ self.Q) * x).sum(-1)

    def __call__(self, t: torch.Tensor, x: torch.Tensor) -> torch.Tensor:
        t = as_time(t)
        return self.eta(t) * (x * self.a).sum(-1) + self._quadratic(x) + self.psi(t)

    def time_derivative(self, t: torch.Tensor, x: torch.Tensor) -> torch.Tensor:
        t = as_time(t)
        return self.eta_dot(t) * (x * self.a).sum(-1) + self.psi_dot(t)

    def gradient(self, t: torch.Tensor, x: torch.Tensor) -> torch.Tensor:
        grad = as_time(self.eta(as_time(t)))[..., None] * self.a
        if self.Q is not None:
            grad = grad + x @ self.Q
        return grad

    def validate(self, A: SpectralOperator) -> None:
        """Checks that ``a`` lies in the D(A*) budget of ``A``."""
        A.check_domain(self.a)


def _square_profile(r: torch.Tensor) -> torch.Tensor:
    return r**2


def _square_profile_prime(r: torch.Tensor) -> torch.Tensor:
    return 2 * r


@dataclass(frozen=True, eq=False)
class Test2Fn:
    """g(t, x) = η(t)·g0(‖x‖) with η > 0 and a non-decreasing radial profile g0."""

    __test__ = False

    eta: Callable = _ones
    eta_dot: Callable = _zeros
    g0: Callable = _square_profile
    g0_prime: Callable = _square_profile_prime

    def __call__(self, t: torch.Tensor, x: torch.Tensor) -> torch.Tensor:
        return self.eta(as_time(t)) * self.g0(x.norm(dim=-1))

    def time_derivative(self, t: torch.Tensor, x: torch.Tensor) -> torch.Tensor:
        return self.eta_dot(as_time(t)) * self.g0(x.norm(dim=-1))

    def gradient(self, t: torch.Tensor, x: torch.Tensor) -> torch.Tensor:
        r = x.norm(dim=-1, keepdim=True)
        direction = torch.where(r > 0, x / r.clamp_min(1e-300), torch.zeros_like(x))
        return as_time(self.eta(as_time(t)))[..., None] * self.g0_prime(r) * direction

    def check(
        self,
        horizon: float,
        radius: float = 10.0,
        points: int = 257,
        tolerance: float = 1e-10,
    ) -> ProbeReport:
        """Samples η on (0, T) and g0' on [0, radius]."""
        t = torch.linspace(0, horizon, points + 2, dtype=DTYPE)[1:-1]
        r = torch.linspace(0, radius, points, dtype=DTYPE)
        eta = self.eta(t)
        slope = self.g0_prime(r)
        origin = abs(self.g0_prime(torch.zeros((), dtype=DTYPE)).item())
        passed = bool((eta > 0).all() and (slope >= -tolerance).all() and origin <= tolerance)
        return ProbeReport(
            name="test2",
            passed=passed,
            statistic=origin,
            witnesses=TensorDict({"t": t, "eta": eta, "r": r, "g0_prime": slope}, [points]),
            details={"min_eta": eta.min().item(), "min_g0_prime": slope.min().item()},
        )


@dataclass(frozen=True, eq=False)
class VintageParams:
    """Parameters of the rotation-semigroup example with cost −|⟨α,x⟩| + ½u²."""

    n_modes: int
    horizon: float
    coupling: float
    eigenvalue: float
    alpha: torch.Tensor = field(repr=False)
    beta: torch.Tensor = field(repr=False)


def square_wave_coefficients(n_modes: int) -> torch.Tensor:
    """Fourier coefficients of χ[0, ½) − χ[½, 1): 2√2/(πk) on odd sine modes."""
    coeffs = torch.zeros(2 * n_modes + 1, dtype=DTYPE)
    for k in range(1, n_modes + 1, 2):
        coeffs[2 * k] = 2 * math.sqrt(2) / (math.pi * k)
    return coeffs


def vintage_problem(
    n_modes: int = 4,
    horizon: float = 1.0,
    coupling: float = 0.0,
    damping: float = 0.0,
    grid_size: int = 201,
    control_bound: float | None = None,
    K: float = 1.0,
    name: str = "vintage",
) -> ControlProblem:
    """The rotation-semigroup example.

    The state lives in the Fourier truncation of L²(0, 1), A generates the
    periodic shift (optionally damped by ``damping``), α is the constant mode,
    β = ``coupling``·α + square wave, b = uβ, L = −|⟨α,x⟩| + ½u², h = 0.
    The control box defaults to [−M−1, M+1] with M = |coupling|·G(0).

    Examples:
        >>> problem = vintage_problem(coupling=1.0)
        >>> problem.controls.upper
        tensor([2.], dtype=torch.float64)
    """
    if n_modes < 0:
        raise ValueError(f"n_modes must be non-negative, got {n_modes}")
    basis = FourierTruncation(n_modes)
    A = rotation_generator(n_modes, damping=damping)
    B = fourier_smoothing(n_modes)
    alpha = basis.unit("const")
    beta = coupling * alpha + square_wave_coefficients(n_modes)
    eigenvalue = -float(damping)
    if abs(eigenvalue) < 1e-8:
        g_max = horizon
    else:
        g_max = math.expm1(eigenvalue * horizon) / eigenvalue
    M = abs(coupling) * g_max
    bound = M + 1.0 if control_bound is None else float(control_bound)
    if bound <= 0:
        raise ValueError(f"control_bound must be positive, got {bound}")
    params = VintageParams(n_modes, float(horizon), float(coupling), eigenvalue, alpha, beta)

    def drift(t, x, u):
        return u[..., :1] * beta

    def running_cost(t, x, u):
        return -(x * alpha).sum(-1).abs() + 0.5 * (u**2).sum(-1)

    def terminal_cost(x):
        return torch.zeros(x.shape[:-1], dtype=DTYPE)

    return ControlProblem(
        name=name,
        A=A,
        B=B,
        horizon=float(horizon),
        controls=ControlSet.box(bound, 1, grid_size),
        drift=drift,
        running_cost=running_cost,
        terminal_cost=terminal_cost,
        K=K,
        M=M,
        growth_k=1.0,
        params=params,
    )


def scalar_toy_problem(
    a: float = 0.0,
    horizon: float = 1.0,
    grid_size: int = 201,
    control_bound: float = 1.0,
) -> ControlProblem:
    """N = 1, A = [[a]], b = u, L = ½u², h(x) = x; its value is x − (T−t)/2 for a = 0."""

    def drift(t, x, u):
        return u

    def running_cost(t, x, u):
        return 0.5 * (u**2).sum(-1)

    def terminal_cost(x):
        return x[..., 0]

    return ControlProblem(
        name="scalar-toy",
        A=SpectralOperator(([[a]],)),
        B=SmoothingOperator(torch.ones(1)),
        horizon=float(horizon),
        controls=ControlSet.box(control_bound, 1, grid_size),
        drift=drift,
        running_cost=running_cost,
        terminal_cost=terminal_cost,
        K=1.0,
        M=float(control_bound),
        growth_k=1.0,
    )


def scalar_nonlinear_problem(
    horizon: float = 1.0, grid_size: int = 201, control_bound: float = 1.0
) -> ControlProblem:
    """N = 1, A = [[−1]], b = u − sin(x)cos(t), L = ½x² + ½u², h = 0."""

    def drift(t, x, u):
        return u - torch.sin(x) * torch.cos(as_time(t))[..., None]

    def running_cost(t, x, u):
        return 0.5 * (x**2).sum(-1) + 0.5 * (u**2).sum(-1)

    def terminal_cost(x):
        return torch.zeros(x.shape[:-1], dtype=DTYPE)

    return ControlProblem(
        name="scalar-nonlinear",
        A=SpectralOperator(([[-1.0]],)),
        B=SmoothingOperator(torch.ones(1)),
        horizon=float(horizon),
        controls=ControlSet.box(control_bound, 1, grid_size),
        drift=drift,
        running_cost=running_cost,
        terminal_cost=terminal_cost,
        K=1.0,
        M=float(control_bound) + 1.0,
        growth_k=2.0,
    )


def _vintage_nondegenerate(**kwargs) -> ControlProblem:
    kwargs.setdefault("coupling", 1.0)
    kwargs.setdefault("name", "vintage-nondegenerate")
    return vintage_problem(**kwargs)


PROBLEMS: dict[str, Callable[..., ControlProblem]] = {
    "vintage": vintage_problem,
    "vintage-nondegenerate": _vintage_nondegenerate,
    "scalar-toy": scalar_toy_problem,
    "scalar-nonlinear": scalar_nonlinear_problem,
}


def make_problem(name: str, **kwargs) -> ControlProblem:
    """Builds a registered problem by name."""
    if name not in PROBLEMS:
        raise KeyError(f"unknown problem '{name}', expected one of {sorted(PROBLEMS)}")
    return PROBLEMS[name](**kwargs)


def probe_lipschitz(
    problem: ControlProblem,
    samples: int,
    generator: torch.Generator | None = None,
    radius: float = 1.0,
    tolerance: float = 1e-9,
) -> ProbeReport:
    """Estimates the ‖·‖_{−1}-Lipschitz ratios of the drift and the running cost.

    Random pairs are complemented by one pair along each basis vector, which
    exposes the largest ratio ‖x−y‖/‖x−y‖_{−1} on the highest mode. The report
    passes when the configured ``K`` dominates the drift ratio.
    """
    if samples < 1:
        raise ValueError(f"samples must be positive, got {samples}")
    N = problem.dim
    x = sample_ball(samples, N, radius, generator)
    y = sample_ball(samples, N, radius, generator)
    x_axis = sample_ball(N, N, radius, generator)
    y_axis = x_axis + 0.1 * radius * torch.eye(N, dtype=DTYPE)
    x = torch.cat([x, x_axis])
    y = torch.cat([y, y_axis])
    n = x.shape[0]
    t = torch.rand(n, generator=generator, dtype=DTYPE) * problem.horizon
    grid = problem.controls.grid
    u = grid[torch.randint(grid.shape[0], (n,), generator=generator)]

    bx = torch.broadcast_to(problem.drift(t, x, u), x.shape)
    by = torch.broadcast_to(problem.drift(t, y, u), y.shape)
    dist = norm_gamma(problem.B, x - y, 1)
    b_ratio = (bx - by).norm(dim=-1) / dist
    l_ratio = (problem.running_cost(t, x, u) - problem.running_cost(t, y, u)).abs() / dist
    worst = int(b_ratio.argmax())
    statistic = b_ratio[worst].item()
    return ProbeReport(
        name="lipschitz",
        passed=statistic <= problem.K * (1 + tolerance),
        statistic=statistic,
        witnesses=TensorDict(
            {"t": t, "x": x, "y": y, "u": u, "b_ratio": b_ratio, "l_ratio": l_ratio},
            batch_size=[n],
        ),
        details={
            "K": problem.K,
            "worst_index": worst,
            "l_modulus": l_ratio.max().item(),
        },
    )


def probe_uniform_modulus(
    problem: ControlProblem,
    t: float,
    x: torch.Tensor,
    controls: Sequence[PiecewiseControl],
    deltas: Sequence[float] | None = None,
    n_samples: int = 129,
    dt: float | None = None,
    spread_tolerance: float = 0.1,
) -> ProbeReport:
    """Empirical modulus δ ↦ max ‖x(s₂) − x(s₁)‖ over |s₂ − s₁| ≤ δ, per control.

    The witnesses hold, for every δ, the envelope over controls, the smallest
    per-control modulus and the relative spread (max − min)/max. The report
    passes when the largest spread is below ``spread_tolerance``.
    """
    if not controls:
        raise ValueError("probe_uniform_modulus needs at least one control")
    x = as_state(x)
    if deltas is None:
        spacing = (problem.horizon - t) / (n_samples - 1)
        deltas = [spacing * 2**j for j in range(6)]
    deltas = torch.as_tensor(deltas, dtype=DTYPE)
    table = []
    for u in controls:
        traj = integrate_mild(problem, t, x, u, dt=dt, n_samples=n_samples)
        gap = (traj.times[:, None] - traj.times[None, :]).abs()
        dist = (traj.states[:, None, :] - traj.states[None, :, :]).norm(dim=-1)
        row = [dist.masked_fill(gap > d + 1e-12, 0.0).max() for d in deltas]
        table.append(torch.stack(row))
    modulus = torch.stack(table, -1)
    envelope = modulus.max(-1).values
    floor = modulus.min(-1).values
    spread = torch.where(envelope > 0, (envelope - floor) / envelope.clamp_min(1e-300), torch.zeros_like(envelope))
    statistic = spread.max().item()
    return ProbeReport(
        name="uniform_modulus",
        passed=statistic <= spread_tolerance,
        statistic=statistic,
        witnesses=TensorDict(
            {"delta": deltas, "envelope": envelope, "min": floor, "spread": spread, "modulus": modulus},
            batch_size=[deltas.numel()],
        ),
        details={"controls": len(controls), "spread_tolerance": spread_tolerance},
    )
