# Copyright (c) evoctrl contributors.
#
# This source code is licensed under the MIT license found in the
# LICENSE file in the root directory of this source tree.

"""Piecewise-constant near-optimal controls from regularized supersolutions,
and the dynamic-programming inequalities that certify them."""

from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass, field
from typing import Sequence

import torch
from tensordict import TensorDict

from evoctrl.convolution import ConvolutionParams, EnvelopeSearch, inf_convolve
from evoctrl.dynamics import cost, integrate_mild, PiecewiseControl, running_cost_integral, Trajectory
from evoctrl.hamiltonian import hamiltonian
from evoctrl.problem import ControlProblem
from evoctrl.statespace import pair_Astar
from evoctrl.utils import as_state, DTYPE, ProbeReport
from evoctrl.value import ScalarField

logger = logging.getLogger(__name__)

__all__ = [
    "SynthesisConfig",
    "SynthesisResult",
    "random_controls",
    "suboptimality_check",
    "superoptimality_gap",
    "synthesize",
    "synthesize_with_schedule",
]


@dataclass(frozen=True)
class SynthesisConfig:
    """Settings of :func:`synthesize`.

    Args:
        window (float): length h of the synthesis window [t, t + h].
        n (int): number of control pieces on the window.
        params (ConvolutionParams): weights of the inf-convolution.
        nu (float, optional): target optimality gap ν. Defaults to 0.05.
        delta (float, optional): time margin δ; defaults to 0.05·T.
        gamma (float, optional): residual budget γ of the step selection.
            Defaults to 1e-2.
        dt (float, optional): integrator step, see ``integrate_mild``.
        n_samples (int, optional): samples of the re-simulated trajectory.
            Defaults to 512.
        search (EnvelopeSearch, optional): options of the envelope search.
    """

    window: float
    n: int
    params: ConvolutionParams = field(default_factory=ConvolutionParams)
    nu: float = 0.05
    delta: float | None = None
    gamma: float = 1e-2
    dt: float | None = None
    n_samples: int = 512
    search: EnvelopeSearch | None = None

    def __post_init__(self) -> None:
        if not self.window > 0:
            raise ValueError(f"window must be positive, got {self.window}")
        if int(self.n) != self.n or self.n < 1:
            raise ValueError(f"n must be a positive integer, got {self.n}")
        if not self.nu > 0:
            raise ValueError(f"nu must be positive, got {self.nu}")
        if self.delta is not None and self.delta < 0:
            raise ValueError(f"delta must be non-negative, got {self.delta}")
        if self.gamma < 0:
            raise ValueError(f"gamma must be non-negative, got {self.gamma}")

    def margin(self, problem: ControlProblem) -> float:
        return 0.05 * problem.horizon if self.delta is None else float(self.delta)


@dataclass
class SynthesisResult:
    """Output of :func:`synthesize`.

    ``control``/``trajectory``/``gap`` refer to the window [t, t + h];
    ``full_control`` completes the control up to T with the minimizer of the
    running cost and ``total_cost`` is its cost J(t, x; full_control).
    """

    control: PiecewiseControl
    trajectory: Trajectory
    gap: float
    per_step: TensorDict
    full_control: PiecewiseControl
    total_cost: float
    rounds: list[dict] = field(default_factory=list)

    @property
    def budget_violations(self) -> int:
        return int((~self.per_step["within_budget"]).sum())


def superoptimality_gap(
    problem: ControlProblem,
    w: ScalarField,
    t: float,
    x: torch.Tensor,
    window: float,
    u: PiecewiseControl,
    dt: float | None = None,
    n_samples: int = 512,
) -> torch.Tensor:
    """w(t, x) − ∫_t^{t+h} L ds − w(t + h, x(t + h)) along the control ``u``.

    Non-positive for every control when w is a subsolution; the synthesized
    control of a supersolution keeps it above −ν. Batched controls give a
    batch of gaps.

    Examples:
        >>> from evoctrl.problem import scalar_toy_problem
        >>> problem = scalar_toy_problem()
        >>> V = ScalarField(lambda t, x: x[..., 0] - (1 - t) / 2)
        >>> u = PiecewiseControl.constant([-1.0], 0.0, 0.5)
        >>> round(superoptimality_gap(problem, V, 0.0, torch.zeros(1), 0.5, u).item(), 9)
        0.0
    """
    x = as_state(x)
    batch = torch.broadcast_shapes(x.shape[:-1], u.batch_shape)
    if window == 0:
        return torch.zeros(batch, dtype=DTYPE)
    if window < 0:
        raise ValueError(f"window must be non-negative, got {window}")
    traj = integrate_mild(problem, t, x, u, dt=dt, n_samples=n_samples, t_end=t + window)
    running = running_cost_integral(problem, traj)
    return w(t, x) - running - w(t + window, traj.final_state())


def random_controls(
    problem: ControlProblem,
    t0: float,
    t1: float,
    n_controls: int,
    n_pieces: int,
    generator: torch.Generator | None = None,
) -> PiecewiseControl:
    """A batch of controls with pieces drawn uniformly in the control box."""
    lower, upper = problem.controls.lower, problem.controls.upper
    draw = torch.rand(n_controls, n_pieces, problem.control_dim, generator=generator, dtype=DTYPE)
    return PiecewiseControl.uniform(t0, t1, lower + (upper - lower) * draw)


def suboptimality_check(
    problem: ControlProblem,
    w: ScalarField,
    t: float,
    x: torch.Tensor,
    window: float,
    controls: PiecewiseControl | Sequence[PiecewiseControl],
    tolerance: float = 1e-3,
    dt: float | None = None,
    n_samples: int = 512,
) -> ProbeReport:
    """Evaluates the gap of every control; passes iff the largest gap is ≤ ``tolerance``."""
    if isinstance(controls, PiecewiseControl):
        gaps = superoptimality_gap(problem, w, t, x, window, controls, dt, n_samples).reshape(-1)
    else:
        if not controls:
            raise ValueError("suboptimality_check needs at least one control")
        gaps = torch.stack(
            [superoptimality_gap(problem, w, t, x, window, u, dt, n_samples).reshape(()) for u in controls]
        )
    worst = int(gaps.argmax())
    statistic = gaps[worst].item()
    return ProbeReport(
        name="suboptimality",
        passed=statistic <= tolerance,
        statistic=statistic,
        witnesses=TensorDict(
            {"control": torch.arange(gaps.numel(), dtype=DTYPE), "gap": gaps},
            batch_size=[gaps.numel()],
        ),
        details={"tolerance": tolerance, "window": window, "worst_index": worst},
    )


def _tail_control(problem: ControlProblem, t: float, x: torch.Tensor) -> torch.Tensor:
    # grid minimizer of the running cost, first occurrence on ties
    grid = problem.controls.grid
    values = torch.broadcast_to(problem.running_cost(torch.as_tensor(t, dtype=DTYPE), x, grid), grid.shape[:1])
    return grid[int(values.argmin())]


def synthesize(
    problem: ControlProblem,
    w: ScalarField,
    t: float,
    x: torch.Tensor,
    cfg: SynthesisConfig,
) -> SynthesisResult:
    """Builds the piecewise-constant control u^(n) on [t, t + h] from w.

    At each node t_i = t + i·h/n the envelope differential (a, p) of the
    inf-convolution of w is computed at the current state, the control u_i is
    the Hamiltonian minimizer at p, and the state is advanced over one piece.
    The step residual a + ⟨A*p, x⟩ + H(t_i, x, p) is recorded as ``slack``
    against the budget γ + 1/n².

    Raises:
        ValueError: if t + h does not leave the margin δ before T.
        RuntimeError: if the envelope search does not converge at a node.
    """
    T = problem.horizon
    delta = cfg.margin(problem)
    t = float(t)
    if not (0 <= t and t + cfg.window < T - delta):
        raise ValueError(f"window [{t}, {t + cfg.window}] must end before T - delta = {T - delta}")
    cfg.params.check_margin(delta)
    cfg.params.check_growth(problem)
    x0 = as_state(x)
    if x0.shape != (problem.dim,):
        raise ValueError(f"synthesize expects a single state of shape [{problem.dim}], got {tuple(x0.shape)}")

    n = int(cfg.n)
    knots = torch.linspace(t, t + cfg.window, n + 1, dtype=DTYPE)
    budget = cfg.gamma + 1.0 / n**2
    state = x0
    rows: dict[str, list[torch.Tensor]] = {k: [] for k in ("time", "a", "p", "p_norm", "control", "slack")}
    for i in range(n):
        ti = knots[i].item()
        point = inf_convolve(problem, w, cfg.params, ti, state, cfg.search)
        if not bool(point.converged):
            raise RuntimeError(
                f"envelope search did not converge at node {i} (t={ti:.6g}); "
                f"competing minimizers at s={point.minimizer_s.item():.6g} and s={point.alternative_s.item():.6g}"
            )
        H = hamiltonian(problem, ti, state, point.p)
        slack = point.a + pair_Astar(problem.A, point.p, state) + H.value
        for key, value in (
            ("time", knots[i]),
            ("a", point.a),
            ("p", point.p),
            ("p_norm", point.p.norm()),
            ("control", H.argmin_u),
            ("slack", slack),
        ):
            rows[key].append(value)
        piece = PiecewiseControl(knots[i : i + 2], H.argmin_u[None])
        state = integrate_mild(problem, ti, state, piece, dt=cfg.dt, n_samples=2, t_end=knots[i + 1].item()).final_state()
        logger.debug("node %d t=%.6g u=%s slack=%.3e", i, ti, H.argmin_u.tolist(), slack.item())

    per_step = TensorDict({k: torch.stack(v) for k, v in rows.items()}, batch_size=[n])
    per_step["within_budget"] = per_step["slack"] <= budget
    control = PiecewiseControl(knots, per_step["control"])
    t_end = t + cfg.window
    trajectory = integrate_mild(problem, t, x0, control, dt=cfg.dt, n_samples=cfg.n_samples, t_end=t_end)
    gap = superoptimality_gap(problem, w, t, x0, cfg.window, control, cfg.dt, cfg.n_samples).item()

    tail = PiecewiseControl.constant(_tail_control(problem, t_end, trajectory.final_state()), t_end, T)
    full_control = control.extend(tail)
    full = integrate_mild(problem, t, x0, full_control, dt=cfg.dt, n_samples=cfg.n_samples)
    total = cost(problem, t, full).item()
    logger.info(
        "synthesized %d pieces on [%.4g, %.4g]: gap=%.3e cost=%.6g budget violations=%d",
        n,
        t,
        t_end,
        gap,
        total,
        int((~per_step["within_budget"]).sum()),
    )
    return SynthesisResult(control, trajectory, gap, per_step, full_control, total)


def synthesize_with_schedule(
    problem: ControlProblem,
    w: ScalarField,
    t: float,
    x: torch.Tensor,
    cfg: SynthesisConfig,
    max_rounds: int = 8,
) -> SynthesisResult:
    """Repeats :func:`synthesize` until the gap reaches −ν.

    Between rounds the parameters are refined in a fixed cycle: β is divided
    by 10, then ε, then λ, then n is doubled. The result of the last round is
    returned with one entry per round in ``rounds``.
    """
    if max_rounds < 1:
        raise ValueError(f"max_rounds must be positive, got {max_rounds}")
    rounds = []
    result = None
    for k in range(max_rounds):
        result = synthesize(problem, w, t, x, cfg)
        params = cfg.params
        rounds.append(
            {
                "round": k,
                "lambda": params.lambda_,
                "epsilon": params.epsilon,
                "beta": params.beta,
                "n": cfg.n,
                "gap": result.gap,
                "cost": result.total_cost,
            }
        )
        logger.info("schedule round %d: %s", k, rounds[-1])
        if result.gap >= -cfg.nu:
            break
        stage = k % 4
        if stage == 0:
            cfg = _replace(cfg, params=params.replace(beta=params.beta / 10))
        elif stage == 1:
            cfg = _replace(cfg, params=params.replace(epsilon=params.epsilon / 10))
        elif stage == 2:
            cfg = _replace(cfg, params=params.replace(lambda_=params.lambda_ / 10))
        else:
            cfg = _replace(cfg, n=2 * cfg.n)
    else:
        logger.warning("schedule exhausted after %d rounds with gap %.3e", max_rounds, result.gap)
    result.rounds = rounds
    return result


def _replace(cfg: SynthesisConfig, **kwargs) -> SynthesisConfig:
    return dataclasses.replace(cfg, **kwargs)
