# Copyright (c) evoctrl contributors.
#
# This source code is licensed under the MIT license found in the
# LICENSE file in the root directory of this source tree.

"""Value functions: the generic field interface, the rotation-example closed
form and an exhaustive dynamic-programming oracle for tiny instances."""

from __future__ import annotations

import hashlib
import logging
import math
import multiprocessing as mp
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np
import torch

from evoctrl.dynamics import cost, integrate_mild, PiecewiseControl, sample_feedback
from evoctrl.problem import ControlProblem, VintageParams
from evoctrl.utils import _CloudpickleWrapper, as_state, as_time, CSV_FORMAT, DTYPE

logger = logging.getLogger(__name__)

__all__ = [
    "OracleCache",
    "ScalarField",
    "brute_force_value",
    "compute_G",
    "integral_G2",
    "oracle_key",
    "vintage_feedback",
    "vintage_feedback_control",
    "vintage_value",
    "vintage_value_field",
]

FieldFn = Callable[[torch.Tensor, torch.Tensor], torch.Tensor]


@dataclass(frozen=True)
class ScalarField:
    """A scalar function w(t, x) on [0, T] × R^N.

    Args:
        fn (callable): ``fn(t, x)`` with ``t`` of shape ``[...]`` and ``x`` of
            shape ``[..., N]``, returning ``[...]``.
        time_derivative (callable, optional): exact w_t where known.
        gradient (callable, optional): exact Dw where known, returning ``[..., N]``.
        lipschitz (float, optional): a known ‖·‖_{−1}-Lipschitz constant.
        name (str, optional): label used in reports.

    Examples:
        >>> w = ScalarField(lambda t, x: x.sum(-1))
        >>> w.shifted(offset=1.0)(0.0, torch.ones(2))
        tensor(3., dtype=torch.float64)
    """

    fn: FieldFn
    time_derivative: FieldFn | None = None
    gradient: FieldFn | None = None
    lipschitz: float | None = None
    name: str = "w"

    def __call__(self, t: torch.Tensor | float, x: torch.Tensor) -> torch.Tensor:
        return self.fn(as_time(t), as_state(x))

    @property
    def has_derivatives(self) -> bool:
        return self.time_derivative is not None and self.gradient is not None

    def shifted(self, offset: float = 0.0, rate: float = 0.0, horizon: float = 0.0) -> ScalarField:
        """w + offset + rate·(horizon − t); exact derivatives are carried over."""
        fn = self.fn

        def shifted_fn(t, x):
            return fn(t, x) + offset + rate * (horizon - t)

        w_t = None
        if self.time_derivative is not None:
            time_derivative = self.time_derivative

            def w_t(t, x):
                return time_derivative(t, x) - rate

        return ScalarField(
            shifted_fn,
            w_t,
            self.gradient,
            self.lipschitz,
            f"{self.name}+shift",
        )

    def derivative_mismatch(
        self, t: torch.Tensor | float, x: torch.Tensor, h: float = 1e-6
    ) -> float:
        """Worst relative gap between the exact derivatives and central differences."""
        if not self.has_derivatives:
            raise ValueError(f"field '{self.name}' has no exact derivatives")
        t = as_time(t)
        x = as_state(x)
        fd_t = (self(t + h, x) - self(t - h, x)) / (2 * h)
        eye = torch.eye(x.shape[-1], dtype=DTYPE)
        xp = x[..., None, :] + h * eye
        xm = x[..., None, :] - h * eye
        fd_x = (self(t[..., None], xp) - self(t[..., None], xm)) / (2 * h)
        exact_t = self.time_derivative(t, x)
        exact_x = self.gradient(t, x)
        scale_t = exact_t.abs().clamp_min(1.0)
        scale_x = exact_x.norm(dim=-1).clamp_min(1.0)
        err_t = ((fd_t - exact_t).abs() / scale_t).max()
        err_x = ((fd_x - exact_x).norm(dim=-1) / scale_x).max()
        return max(err_t.item(), err_x.item())


def compute_G(lam: float, t: torch.Tensor | float, T: float) -> torch.Tensor:
    """G(t) = ∫_t^T e^{λ(s−t)} ds, with the λ → 0 limit T − t for |λ| < 1e-8.

    Examples:
        >>> compute_G(0.0, 0.25, 1.0)
        tensor(0.7500, dtype=torch.float64)
    """
    span = T - as_time(t)
    if abs(lam) < 1e-8:
        return span
    return torch.expm1(lam * span) / lam


def integral_G2(lam: float, t: torch.Tensor | float, T: float) -> torch.Tensor:
    """∫_t^T G(s)² ds in closed form (series branch when |λ(T−t)| is small)."""
    D = T - as_time(t)
    series = D**3 / 3 + lam * D**4 / 4 + 7 * lam**2 * D**5 / 60
    if abs(lam) < 1e-8:
        return series
    z = lam * D
    exact = (torch.expm1(2 * z) / (2 * lam) - 2 * torch.expm1(z) / lam + D) / lam**2
    return torch.where(z.abs() < 1e-3, series, exact)


def _vintage_params(example: ControlProblem | VintageParams) -> VintageParams:
    params = example.params if isinstance(example, ControlProblem) else example
    if not isinstance(params, VintageParams):
        raise ValueError(f"expected a vintage-family problem, got params {params!r}")
    return params


def _alpha_coordinate(params: VintageParams, x: torch.Tensor) -> torch.Tensor:
    return (as_state(x) * params.alpha).sum(-1)


def vintage_value(
    example: ControlProblem | VintageParams, t: torch.Tensor | float, x: torch.Tensor
) -> torch.Tensor:
    """W(t, x) = −G(t)|⟨α,x⟩| − ½c²∫_t^T G² for the rotation example.

    Examples:
        >>> from evoctrl.problem import vintage_problem
        >>> vintage_value(vintage_problem(coupling=1.0), 0.0, -torch.eye(9)[0])
        tensor(-1.1667, dtype=torch.float64)
    """
    params = _vintage_params(example)
    T, lam, c = params.horizon, params.eigenvalue, params.coupling
    G = compute_G(lam, t, T)
    return -G * _alpha_coordinate(params, x).abs() - 0.5 * c**2 * integral_G2(lam, t, T)


def vintage_value_field(example: ControlProblem | VintageParams) -> ScalarField:
    """The closed form W as a :class:`ScalarField` with its exact derivatives.

    On the hyperplane ⟨α,x⟩ = 0 the gradient takes the ⟨α,x⟩ ≤ 0 branch.
    """
    params = _vintage_params(example)
    T, lam, c = params.horizon, params.eigenvalue, params.coupling

    def fn(t, x):
        return vintage_value(params, t, x)

    def time_derivative(t, x):
        G = compute_G(lam, t, T)
        decay = torch.exp(lam * (T - as_time(t)))
        return decay * _alpha_coordinate(params, x).abs() + 0.5 * c**2 * G**2

    def gradient(t, x):
        G = compute_G(lam, t, T)
        sign = 1.0 - 2.0 * (_alpha_coordinate(params, x) > 0).to(DTYPE)
        return (G * sign)[..., None] * params.alpha

    return ScalarField(fn, time_derivative, gradient, lipschitz=None, name="W")


def vintage_feedback(
    example: ControlProblem | VintageParams,
    t: torch.Tensor | float,
    x: torch.Tensor,
    strict: bool = False,
) -> torch.Tensor:
    """The optimal feedback: −c·G(t) where ⟨α,x⟩ ≤ 0, +c·G(t) elsewhere.

    With ``strict=True`` the hyperplane is assigned to the positive side
    (−c·G(t) only where ⟨α,x⟩ < 0). Returns a control point of shape ``[..., 1]``.
    """
    params = _vintage_params(example)
    G = compute_G(params.eigenvalue, t, params.horizon)
    y = _alpha_coordinate(params, x)
    negative = y < 0 if strict else y <= 0
    sign = 2.0 * negative.to(DTYPE) - 1.0
    return (-sign * params.coupling * G)[..., None]


def vintage_feedback_control(
    problem: ControlProblem,
    t0: float,
    x0: torch.Tensor,
    n_pieces: int,
    strict: bool = False,
    t_end: float | None = None,
    dt: float | None = None,
) -> PiecewiseControl:
    """:func:`vintage_feedback` sampled as a piecewise-constant control along its own trajectory."""
    return sample_feedback(
        problem,
        t0,
        x0,
        lambda s, x: vintage_feedback(problem, s, x, strict=strict),
        n_pieces,
        t_end=t_end,
        dt=dt,
    )


def oracle_key(
    problem: ControlProblem,
    t: float,
    x: torch.Tensor,
    n_steps: int,
    control_grid: torch.Tensor,
) -> str:
    x_hash = hashlib.sha1(as_state(x).numpy().tobytes()).hexdigest()[:16]
    grid_hash = hashlib.sha1(torch.as_tensor(control_grid, dtype=DTYPE).numpy().tobytes()).hexdigest()[:16]
    return f"{problem.fingerprint()}|{float(t)!r}|{x_hash}|{n_steps}|{grid_hash}"


class OracleCache:
    """CSV table of oracle results, one row per (problem, t, x, n_steps, grid) key.

    Rows hold the key, the value and the space-separated control values of the
    best control.
    """

    fields = ("key", "value", "control")

    def __init__(self, path: str | Path) -> None:
        self.path = Path(path)
        self._rows: dict[str, tuple[float, list[float]]] = {}
        if self.path.exists():
            table = np.loadtxt(self.path, dtype=str, delimiter=",", skiprows=1, ndmin=2)
            for key, value, control in table:
                self._rows[str(key)] = (float(value), [float(v) for v in control.split()])

    def __contains__(self, key: str) -> bool:
        return key in self._rows

    def __len__(self) -> int:
        return len(self._rows)

    def get(self, key: str) -> tuple[float, list[float]] | None:
        return self._rows.get(key)

    def put(self, key: str, value: float, control: torch.Tensor) -> None:
        values = [float(v) for v in control.reshape(-1)]
        self._rows[key] = (float(value), values)
        header = "" if self.path.exists() else ",".join(self.fields)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        row = [key, CSV_FORMAT % value, " ".join(CSV_FORMAT % v for v in values)]
        with self.path.open("a") as f:
            np.savetxt(f, [row], fmt="%s", delimiter=",", header=header, comments="")


def _enumerate(n_options: int, n_steps: int, start: int, stop: int) -> torch.Tensor:
    # lexicographic order: the first piece varies slowest
    ids = torch.arange(start, stop)
    powers = n_options ** torch.arange(n_steps - 1, -1, -1)
    return (ids[:, None] // powers) % n_options


def _evaluate_chunk(
    problem: ControlProblem | _CloudpickleWrapper,
    t: float,
    x: torch.Tensor,
    n_steps: int,
    grid: torch.Tensor,
    start: int,
    stop: int,
    dt: float | None,
    n_samples: int,
) -> tuple[float, int]:
    if isinstance(problem, _CloudpickleWrapper):
        problem = problem.obj
    values = grid[_enumerate(grid.shape[0], n_steps, start, stop)]
    u = PiecewiseControl.uniform(t, problem.horizon, values)
    traj = integrate_mild(problem, t, x, u, dt=dt, n_samples=n_samples)
    costs = cost(problem, t, traj)
    best = int(costs.argmin())
    return costs[best].item(), start + best


def brute_force_value(
    problem: ControlProblem,
    t: float,
    x: torch.Tensor,
    n_steps: int,
    control_grid: torch.Tensor,
    dt: float | None = None,
    n_samples: int | None = None,
    chunk_size: int = 2048,
    num_workers: int = 0,
    budget: int = 10**6,
    cache: OracleCache | None = None,
) -> tuple[float, PiecewiseControl]:
    """Minimal cost over every piecewise-constant control with values in ``control_grid``.

    The controls have ``n_steps`` equal pieces on [t, T]; each is integrated
    with :func:`~evoctrl.dynamics.integrate_mild`. Ties resolve to the first
    control in lexicographic order of grid indices.

    Args:
        problem (ControlProblem): the problem.
        t (float): initial time.
        x (tensor): initial state.
        n_steps (int): number of pieces.
        control_grid (tensor): candidate control points, ``[K]`` or ``[K, d]``.
        dt (float, optional): integrator step, see ``integrate_mild``.
        n_samples (int, optional): trajectory samples; defaults to
            ``8 * n_steps + 1``.
        chunk_size (int, optional): controls integrated per batch.
        num_workers (int, optional): worker processes; 0 runs in-process.
        budget (int, optional): maximal number of enumerated controls.
        cache (OracleCache, optional): result cache.

    Returns:
        the minimal cost and the minimizing control.

    Examples:
        >>> from evoctrl.problem import scalar_toy_problem
        >>> grid = torch.linspace(-1, 1, 5)
        >>> value, u = brute_force_value(scalar_toy_problem(), 0.0, torch.zeros(1), 4, grid)
        >>> round(value, 12), u.values[:, 0].tolist()
        (-0.5, [-1.0, -1.0, -1.0, -1.0])
    """
    if n_steps < 1:
        raise ValueError(f"n_steps must be positive, got {n_steps}")
    grid = torch.as_tensor(control_grid, dtype=DTYPE)
    if grid.ndim == 1:
        grid = grid[:, None]
    x = as_state(x)
    total = grid.shape[0] ** n_steps
    if total > budget:
        raise RuntimeError(
            f"enumeration budget exceeded: {grid.shape[0]}^{n_steps} = {total} controls > {budget}"
        )
    knots = torch.linspace(float(t), problem.horizon, n_steps + 1, dtype=DTYPE)
    key = oracle_key(problem, t, x, n_steps, grid)
    if cache is not None and key in cache:
        value, control = cache.get(key)
        logger.debug("oracle cache hit %s", key)
        return value, PiecewiseControl(knots, torch.tensor(control, dtype=DTYPE).reshape(n_steps, -1))

    n_samples = 8 * n_steps + 1 if n_samples is None else n_samples
    bounds = [(s, min(s + chunk_size, total)) for s in range(0, total, chunk_size)]
    logger.info("enumerating %d controls in %d chunks", total, len(bounds))
    if num_workers > 0:
        wrapped = _CloudpickleWrapper(problem)
        with ProcessPoolExecutor(num_workers, mp_context=mp.get_context("spawn")) as pool:
            futures = [
                pool.submit(_evaluate_chunk, wrapped, t, x, n_steps, grid, a, b, dt, n_samples)
                for a, b in bounds
            ]
            results = [f.result() for f in futures]
    else:
        results = [_evaluate_chunk(problem, t, x, n_steps, grid, a, b, dt, n_samples) for a, b in bounds]

    value, best = math.inf, 0
    for chunk_value, chunk_best in results:
        if chunk_value < value:
            value, best = chunk_value, chunk_best
    values = grid[_enumerate(grid.shape[0], n_steps, best, best + 1)[0]]
    control = PiecewiseControl(knots, values)
    if cache is not None:
        cache.put(key, value, values)
    return value, control
