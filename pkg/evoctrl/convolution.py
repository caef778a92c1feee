# Copyright (c) evoctrl contributors.
#
# This source code is licensed under the MIT license found in the
# LICENSE file in the root directory of this source tree.

"""Inf- and sup-convolution regularizers in the ‖·‖_{−1} metric.

For a field w, the inf-convolution is

    w_{λ,ε,β}(t, x) = inf_{s, y} w(s, y) + ‖x − y‖²_{−1}/2ε + (t − s)²/2β + λe^{2mK(T−s)}‖y‖^m

and the sup-convolution its mirror image. Both are computed numerically by a
multistart compass search over (s, y), batched over query points.
"""

from __future__ import annotations

import dataclasses
import logging
import math
import warnings
from dataclasses import dataclass
from typing import Callable, Mapping

import torch
from tensordict import tensorclass, TensorDict

from evoctrl.hamiltonian import hamiltonian
from evoctrl.problem import ControlProblem
from evoctrl.statespace import norm_gamma, pair_Astar
from evoctrl.utils import as_state, as_time, DTYPE, ProbeReport, sample_ball, sample_unit_vectors
from evoctrl.value import ScalarField

logger = logging.getLogger(__name__)

__all__ = [
    "ConvolutionParams",
    "EnvelopePoint",
    "EnvelopeSearch",
    "convolution_objective",
    "envelope_gradient_check",
    "inf_convolve",
    "lipschitz_minus2_probe",
    "perturbed_hjb_residual",
    "semiconvexity_probe",
    "sup_convolve",
]


@dataclass(frozen=True)
class ConvolutionParams:
    """Weights of the regularizing convolutions.

    Args:
        lambda_ (float): weight λ of the growth penalty. Defaults to 1e-8.
        epsilon (float): spatial quadratic weight ε. Defaults to 1e-2.
        beta (float): temporal quadratic weight β. Defaults to 1e-3.
        m (float): exponent of the growth penalty, at least 2. Defaults to 2.
        K (float): rate in the factor e^{2mK(T−s)}. Defaults to 1.
    """

    lambda_: float = 1e-8
    epsilon: float = 1e-2
    beta: float = 1e-3
    m: float = 2.0
    K: float = 1.0

    def __post_init__(self) -> None:
        for name, value in (
            ("lambda", self.lambda_),
            ("epsilon", self.epsilon),
            ("beta", self.beta),
            ("K", self.K),
        ):
            if not (math.isfinite(value) and value > 0):
                raise ValueError(f"{name} must be positive, got {value}")
        if not self.m >= 2:
            raise ValueError(f"m must be at least 2, got {self.m}")

    @classmethod
    def from_dict(cls, cfg: Mapping[str, float]) -> ConvolutionParams:
        """Builds the parameters from a config mapping (key ``lambda`` for λ)."""
        known = {"lambda", "epsilon", "beta", "m", "K"}
        unknown = set(cfg) - known
        if unknown:
            raise KeyError(f"unknown convolution parameters {sorted(unknown)}")
        kwargs = {("lambda_" if k == "lambda" else k): float(v) for k, v in cfg.items()}
        return cls(**kwargs)

    def to_dict(self) -> dict:
        return {"lambda": self.lambda_, "epsilon": self.epsilon, "beta": self.beta, "m": self.m, "K": self.K}

    def replace(self, **kwargs) -> ConvolutionParams:
        return dataclasses.replace(self, **kwargs)

    def check_growth(self, problem: ControlProblem) -> None:
        if not self.m > problem.growth_k:
            raise ValueError(
                f"m must exceed the growth exponent of '{problem.name}' ({problem.growth_k}), got {self.m}"
            )

    def check_margin(self, delta: float) -> None:
        """Warns when β exceeds δ²/16, above which the δ-margin estimates are void."""
        beta_max = delta**2 / 16
        if self.beta > beta_max:
            warnings.warn(
                f"beta={self.beta:g} exceeds beta_max(delta={delta:g}) = {beta_max:g}",
                UserWarning,
                stacklevel=3,
            )


@dataclass(frozen=True)
class EnvelopeSearch:
    """Options of the inner multistart compass search.

    Args:
        n_times (int): coarse time grid size. Defaults to 17.
        n_offsets (int): coarse grid size per searched state coordinate. Defaults to 9.
        d_eff (int): number of state coordinates on the coarse grid. Defaults to 1.
        n_starts (int): best coarse points refined, besides the query point. Defaults to 4.
        tolerance (float): final mesh size, in units of √β and √(ε/b_k). Defaults to 1e-9.
        max_iter (int): iteration cap of the compass search. Defaults to 2000.
        location_tol (float): scaled distance above which two minimizers differ. Defaults to 1e-4.
        value_tol (float): value gap below which two minimizers compete. Defaults to 1e-8.
        radius (float, optional): the search ball ‖y‖ ≤ radius. Defaults to unbounded.
    """

    n_times: int = 17
    n_offsets: int = 9
    d_eff: int = 1
    n_starts: int = 4
    tolerance: float = 1e-9
    max_iter: int = 2000
    location_tol: float = 1e-4
    value_tol: float = 1e-8
    radius: float | None = None

    def __post_init__(self) -> None:
        if self.n_times < 1 or self.n_offsets < 1 or self.d_eff < 0 or self.n_starts < 1:
            raise ValueError(f"invalid coarse grid options {self}")
        if not (self.tolerance > 0 and self.max_iter > 0):
            raise ValueError(f"tolerance and max_iter must be positive, got {self.tolerance}, {self.max_iter}")


@tensorclass
class EnvelopePoint:
    """Value and minimizer of a convolution at a batch of query points.

    ``a`` and ``p = Bq`` are the envelope differentials read off the
    minimizer. When two starts reach competing minimizers the point is flagged
    ``ambiguous`` (and not ``converged``) and the runner-up is kept in
    ``alternative_s``/``alternative_y``.
    """

    value: torch.Tensor
    minimizer_s: torch.Tensor
    minimizer_y: torch.Tensor
    a: torch.Tensor
    p: torch.Tensor
    q: torch.Tensor
    converged: torch.Tensor
    ambiguous: torch.Tensor
    alternative_s: torch.Tensor
    alternative_y: torch.Tensor


def convolution_objective(
    problem: ControlProblem,
    w: ScalarField,
    params: ConvolutionParams,
    t: torch.Tensor | float,
    x: torch.Tensor,
    s: torch.Tensor | float,
    y: torch.Tensor,
    kind: str = "inf",
) -> torch.Tensor:
    """The penalized objective at (s, y), signed so that the convolution is its extremum.

    For ``kind="inf"`` it is w(s,y) + penalties (minimized); for ``kind="sup"``
    it is w(s,y) − penalties (maximized).
    """
    sign = _sign(kind)
    t, s = as_time(t), as_time(s)
    value = _penalized(problem, w, params, sign, t, as_state(x), s, as_state(y), None)
    return sign * value


def _sign(kind: str) -> float:
    if kind == "inf":
        return 1.0
    if kind == "sup":
        return -1.0
    raise ValueError(f"kind must be 'inf' or 'sup', got {kind!r}")


def _penalized(
    problem: ControlProblem,
    w: ScalarField,
    params: ConvolutionParams,
    sign: float,
    t: torch.Tensor,
    x: torch.Tensor,
    s: torch.Tensor,
    y: torch.Tensor,
    radius: float | None,
) -> torch.Tensor:
    # sign·w(s, y) + ‖x − y‖²_{−1}/2ε + (t − s)²/2β + λe^{2mK(T−s)}‖y‖^m, inf outside the domain
    T = problem.horizon
    spatial = (problem.B.diag * (x - y) ** 2).sum(-1) / (2 * params.epsilon)
    temporal = (t - s) ** 2 / (2 * params.beta)
    growth = params.lambda_ * torch.exp(2 * params.m * params.K * (T - s)) * y.norm(dim=-1) ** params.m
    inside = (s >= 0) & (s <= T)
    if radius is not None:
        inside = inside & (y.norm(dim=-1) <= radius)
    value = sign * w(s.clamp(0, T), y) + spatial + temporal + growth
    value = torch.broadcast_to(value, inside.shape)
    return torch.where(inside & ~value.isnan(), value, torch.full_like(value, math.inf))


def _scales(problem: ControlProblem, params: ConvolutionParams) -> torch.Tensor:
    return torch.cat(
        [
            torch.tensor([math.sqrt(params.beta)], dtype=DTYPE),
            (params.epsilon / problem.B.diag).sqrt(),
        ]
    )


def _sensitive_coordinates(
    problem: ControlProblem,
    w: ScalarField,
    scale: torch.Tensor,
    t: torch.Tensor,
    x: torch.Tensor,
    d_eff: int,
) -> torch.Tensor:
    # first plus second central difference of w along each state coordinate, summed over queries
    N = x.shape[-1]
    step = torch.diag(scale[1:])
    w0 = w(t, x)[:, None]
    wp = w(t[:, None], x[:, None, :] + step)
    wm = w(t[:, None], x[:, None, :] - step)
    score = ((wp - wm).abs() + (wp - 2 * w0 + wm).abs()).sum(0)
    score = torch.nan_to_num(score, nan=0.0, posinf=0.0)
    order = torch.sort(score, descending=True, stable=True).indices
    return order[: min(d_eff, N)]


def _coarse_starts(
    f: Callable[[torch.Tensor, torch.Tensor], torch.Tensor],
    T: float,
    scale: torch.Tensor,
    t: torch.Tensor,
    x: torch.Tensor,
    coords: torch.Tensor,
    search: EnvelopeSearch,
) -> torch.Tensor:
    n_queries, N = x.shape
    times = (t[:, None] + scale[0] * torch.linspace(-4, 4, search.n_times, dtype=DTYPE)).clamp(0, T)
    if coords.numel():
        offsets = torch.linspace(-4, 4, search.n_offsets, dtype=DTYPE)
        combos = torch.cartesian_prod(*[offsets] * coords.numel()).reshape(-1, coords.numel())
    else:
        combos = torch.zeros(1, 0, dtype=DTYPE)
    shift = torch.zeros(combos.shape[0], N, dtype=DTYPE)
    shift[:, coords] = combos * scale[1:][coords]
    ys = x[:, None, :] + shift
    # [Q, n_times, n_combos, 1 + N]
    grid = torch.cat(
        [
            times[:, :, None, None].expand(n_queries, times.shape[1], ys.shape[1], 1),
            ys[:, None, :, :].expand(n_queries, times.shape[1], ys.shape[1], N),
        ],
        -1,
    ).reshape(n_queries, -1, N + 1)
    values = f(torch.arange(n_queries), grid)
    k = min(search.n_starts, grid.shape[1])
    order = torch.sort(values, dim=-1, stable=True).indices[:, :k]
    best = grid.gather(1, order[..., None].expand(n_queries, k, N + 1))
    anchor = torch.cat([t[:, None], x], -1)[:, None, :]
    return torch.cat([anchor, best], 1)


def _compass_search(
    f: Callable[[torch.Tensor, torch.Tensor], torch.Tensor],
    rows: torch.Tensor,
    z: torch.Tensor,
    scale: torch.Tensor,
    tolerance: float,
    max_iter: int,
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Batched compass search; halves the mesh after every unsuccessful poll.

    ``rows[i]`` is the query index of the start ``z[i]``. Returns the final
    points, their values and the final mesh sizes.
    """
    D = z.shape[-1]
    eye = torch.eye(D, dtype=DTYPE) * scale
    directions = torch.cat([eye, -eye])
    z = z.clone()
    fz = f(rows, z[:, None, :])[:, 0]
    mesh = torch.ones(z.shape[0], dtype=DTYPE)
    n_iter = 0
    while n_iter < max_iter:
        active = (mesh > tolerance).nonzero().squeeze(-1)
        if not active.numel():
            break
        n_iter += 1
        za, fa, ma, ra = z[active], fz[active], mesh[active], rows[active]
        polls = za[:, None, :] + ma[:, None, None] * directions
        fp = f(ra, polls)
        best_val, best_idx = fp.min(-1)
        plus, minus = fp[:, :D], fp[:, D:]
        improving = torch.minimum(plus, minus) < fa[:, None]
        direction = (2.0 * (plus <= minus).to(DTYPE) - 1.0) * improving
        combined = za + ma[:, None] * direction * scale
        fc = f(ra, combined[:, None, :])[:, 0]
        use_combined = (improving.sum(-1) > 1) & (fc < best_val)
        use_poll = ~use_combined & (best_val < fa)
        polled = polls[torch.arange(active.numel()), best_idx]
        z[active] = torch.where(
            use_combined[:, None], combined, torch.where(use_poll[:, None], polled, za)
        )
        fz[active] = torch.where(use_combined, fc, torch.where(use_poll, best_val, fa))
        mesh[active] = torch.where(use_combined | use_poll, ma, 0.5 * ma)
    logger.debug(
        "compass search stopped after %d iterations, %d starts unconverged",
        n_iter,
        int((mesh > tolerance).sum()),
    )
    return z, fz, mesh


def _convolve(
    problem: ControlProblem,
    w: ScalarField,
    params: ConvolutionParams,
    t: torch.Tensor | float,
    x: torch.Tensor,
    search: EnvelopeSearch | None,
    sign: float,
) -> EnvelopePoint:
    search = EnvelopeSearch() if search is None else search
    x = as_state(x)
    if x.shape[-1] != problem.dim:
        raise ValueError(f"query state has {x.shape[-1]} coordinates, problem has {problem.dim}")
    t = as_time(t)
    batch = torch.broadcast_shapes(t.shape, x.shape[:-1])
    N = problem.dim
    T = problem.horizon
    tq = torch.broadcast_to(t, batch).reshape(-1)
    xq = torch.broadcast_to(x, batch + (N,)).reshape(-1, N)
    scale = _scales(problem, params)

    def f(rows: torch.Tensor, z: torch.Tensor) -> torch.Tensor:
        return _penalized(
            problem,
            w,
            params,
            sign,
            tq[rows][:, None],
            xq[rows][:, None, :],
            z[..., 0],
            z[..., 1:],
            search.radius,
        )

    coords = _sensitive_coordinates(problem, w, scale, tq, xq, search.d_eff)
    starts = _coarse_starts(f, T, scale, tq, xq, coords, search)
    n_queries, n_starts, D = starts.shape
    rows = torch.arange(n_queries).repeat_interleave(n_starts)
    z, fz, mesh = _compass_search(f, rows, starts.reshape(-1, D), scale, search.tolerance, search.max_iter)
    z = z.reshape(n_queries, n_starts, D)
    fz = fz.reshape(n_queries, n_starts)
    mesh = mesh.reshape(n_queries, n_starts)

    best_val, best = fz.min(-1)
    index = torch.arange(n_queries)
    z_best = z[index, best]
    # competing starts: comparable value, distinct location
    distance = ((z - z_best[:, None, :]) / scale).norm(dim=-1)
    close_value = fz <= best_val[:, None] + search.value_tol * (1 + best_val.abs()[:, None])
    competing = close_value & (distance > search.location_tol)
    ambiguous = competing.any(-1)
    runner_up = torch.where(competing, distance, torch.full_like(distance, -1.0)).argmax(-1)
    z_alt = torch.where(ambiguous[:, None], z[index, runner_up], z_best)
    converged = (mesh[index, best] <= search.tolerance) & torch.isfinite(best_val) & ~ambiguous

    s_star, y_star = z_best[:, 0], z_best[:, 1:]
    if sign > 0:
        a = (tq - s_star) / params.beta
        q = (xq - y_star) / params.epsilon
    else:
        a = (s_star - tq) / params.beta
        q = (y_star - xq) / params.epsilon
    n_bad = int((~converged).sum())
    if n_bad:
        logger.debug("%d of %d envelope points did not converge", n_bad, n_queries)
    return EnvelopePoint(
        value=(sign * best_val).reshape(batch),
        minimizer_s=s_star.reshape(batch),
        minimizer_y=y_star.reshape(batch + (N,)),
        a=a.reshape(batch),
        p=problem.B.apply(q).reshape(batch + (N,)),
        q=q.reshape(batch + (N,)),
        converged=converged.reshape(batch),
        ambiguous=ambiguous.reshape(batch),
        alternative_s=z_alt[:, 0].reshape(batch),
        alternative_y=z_alt[:, 1:].reshape(batch + (N,)),
        batch_size=batch,
    )


def inf_convolve(
    problem: ControlProblem,
    w: ScalarField,
    params: ConvolutionParams,
    t: torch.Tensor | float,
    x: torch.Tensor,
    search: EnvelopeSearch | None = None,
) -> EnvelopePoint:
    """The inf-convolution w_{λ,ε,β}(t, x) with its envelope superdifferential.

    The minimization over (s, y) ∈ [0, T] × R^N starts from the query point and
    the best points of a coarse grid (times t + √β·[−4, 4], offsets
    √(ε/b_k)·[−4, 4] along the state coordinates w is most sensitive to), each
    refined by a compass search. The envelope differentials are
    a = (t − s*)/β, q = (x − y*)/ε and p = Bq.

    Args:
        problem (ControlProblem): supplies T and B.
        w (ScalarField): the field to regularize.
        params (ConvolutionParams): λ, ε, β, m and K.
        t (float or tensor): query times, shape ``[...]``.
        x (tensor): query states, shape ``[..., N]``.
        search (EnvelopeSearch, optional): options of the inner search.

    Examples:
        >>> from evoctrl.problem import scalar_toy_problem
        >>> problem = scalar_toy_problem()
        >>> w = ScalarField(lambda t, x: x[..., 0])
        >>> params = ConvolutionParams(lambda_=1e-12)
        >>> point = inf_convolve(problem, w, params, 0.5, torch.zeros(1))
        >>> round(point.value.item(), 6), round(point.p.item(), 6)
        (-0.005, 1.0)
    """
    return _convolve(problem, w, params, t, x, search, 1.0)


def sup_convolve(
    problem: ControlProblem,
    w: ScalarField,
    params: ConvolutionParams,
    t: torch.Tensor | float,
    x: torch.Tensor,
    search: EnvelopeSearch | None = None,
) -> EnvelopePoint:
    """The sup-convolution w^{λ,ε,β}(t, x), with a = (s* − t)/β and q = (y* − x)/ε."""
    return _convolve(problem, w, params, t, x, search, -1.0)


def _margin(problem: ControlProblem, delta: float | None) -> float:
    delta = 0.05 * problem.horizon if delta is None else float(delta)
    if not 0 <= delta < problem.horizon / 2:
        raise ValueError(f"delta must lie in [0, T/2), got {delta}")
    return delta


def _sample_times(n: int, problem: ControlProblem, delta: float, generator: torch.Generator | None) -> torch.Tensor:
    u = torch.rand(n, generator=generator, dtype=DTYPE)
    return delta + (problem.horizon - 2 * delta) * u


def semiconvexity_probe(
    problem: ControlProblem,
    w: ScalarField,
    params: ConvolutionParams,
    triples: int,
    generator: torch.Generator | None = None,
    radius: float = 1.0,
    delta: float | None = None,
    tolerance: float = 1e-6,
    envelope: Callable[[torch.Tensor, torch.Tensor], torch.Tensor] | None = None,
    search: EnvelopeSearch | None = None,
) -> ProbeReport:
    """Midpoint concavity of v(t, x) − ‖x‖²_{−1}/2ε − t²/2β, v the inf-convolution.

    For random pairs of points the violation is ½(g₁ + g₂) − g(midpoint); the
    report passes when the worst violation is below ``tolerance``. ``envelope``
    replaces the computed inf-convolution by another function of (t, x).
    """
    if triples < 1:
        raise ValueError(f"triples must be positive, got {triples}")
    delta = _margin(problem, delta)
    N = problem.dim
    t1 = _sample_times(triples, problem, delta, generator)
    t2 = _sample_times(triples, problem, delta, generator)
    x1 = sample_ball(triples, N, radius, generator)
    x2 = sample_ball(triples, N, radius, generator)
    t = torch.cat([t1, t2, 0.5 * (t1 + t2)])
    x = torch.cat([x1, x2, 0.5 * (x1 + x2)])
    if envelope is None:
        v = inf_convolve(problem, w, params, t, x, search).value
    else:
        v = envelope(t, x)
    g = v - norm_gamma(problem.B, x, 1) ** 2 / (2 * params.epsilon) - t**2 / (2 * params.beta)
    g1, g2, g_mid = g.split(triples)
    violation = 0.5 * (g1 + g2) - g_mid
    statistic = violation.max().item()
    return ProbeReport(
        name="semiconvexity",
        passed=statistic <= tolerance,
        statistic=statistic,
        witnesses=TensorDict(
            {"t1": t1, "t2": t2, "x1": x1, "x2": x2, "violation": violation},
            batch_size=[triples],
        ),
        details={"tolerance": tolerance, "violations": int((violation > tolerance).sum())},
    )


def lipschitz_minus2_probe(
    problem: ControlProblem,
    w: ScalarField,
    params: ConvolutionParams,
    radius: float,
    samples: int,
    generator: torch.Generator | None = None,
    delta: float | None = None,
    regularize: bool = True,
    stability: float = 1.2,
    growth: float = 2.0,
    search: EnvelopeSearch | None = None,
) -> ProbeReport:
    """Empirical constant M = sup |v(t,x) − v(s,y)| / (|t − s| + ‖x − y‖_{−2}).

    Half of the ``samples`` pairs move a single coordinate (time or one state
    mode) by a step in [0.01, 0.1]·R; the other half are random pairs in the
    ball B_R. M is then re-estimated with ``samples`` more random pairs: the
    estimate is stable when it grows by less than the factor ``stability``.
    Per-mode ratios flag a constant growing with the mode index (the largest
    mode exceeding ``growth`` times the first). With ``regularize=False`` the
    raw field w is probed instead of its inf-convolution.
    """
    if samples < 2:
        raise ValueError(f"samples must be at least 2, got {samples}")
    delta = _margin(problem, delta)
    N = problem.dim
    n_axis = samples // 2
    n_random = samples - n_axis

    mode = torch.arange(n_axis) % (N + 1)
    t1 = _sample_times(n_axis, problem, delta, generator)
    x1 = sample_ball(n_axis, N, radius, generator)
    step = radius * (0.01 + 0.09 * torch.rand(n_axis, generator=generator, dtype=DTYPE))
    t2 = torch.where(mode == 0, (t1 + step * (problem.horizon - 2 * delta) / radius), t1)
    t2 = t2.clamp(delta, problem.horizon - delta)
    x2 = x1.clone()
    state_rows = (mode > 0).nonzero().squeeze(-1)
    x2[state_rows, mode[state_rows] - 1] += step[state_rows]

    s1 = _sample_times(2 * n_random, problem, delta, generator)
    s2 = _sample_times(2 * n_random, problem, delta, generator)
    y1 = sample_ball(2 * n_random, N, radius, generator)
    y2 = sample_ball(2 * n_random, N, radius, generator)

    ta, tb = torch.cat([t1, s1]), torch.cat([t2, s2])
    xa, xb = torch.cat([x1, y1]), torch.cat([x2, y2])
    t = torch.cat([ta, tb])
    x = torch.cat([xa, xb])
    if regularize:
        v = inf_convolve(problem, w, params, t, x, search).value
    else:
        v = w(t, x)
    va, vb = v.split(ta.shape[0])
    dist = (ta - tb).abs() + norm_gamma(problem.B, xa - xb, 2)
    ratio = torch.where(dist > 0, (va - vb).abs() / dist.clamp_min(1e-300), torch.zeros_like(dist))

    first = n_axis + n_random
    M_n = ratio[:first].max().item()
    M_2n = ratio.max().item()
    stable = M_2n <= stability * M_n if M_n > 0 else M_2n == 0
    axis_ratio = ratio[:n_axis]
    per_mode = torch.stack(
        [axis_ratio[mode == j].max() if (mode == j).any() else torch.zeros((), dtype=DTYPE) for j in range(N + 1)]
    )
    state_modes = per_mode[1:]
    growing = bool(state_modes[-1] > growth * state_modes[0])
    return ProbeReport(
        name="lipschitz_minus2",
        passed=bool(stable and not growing),
        statistic=M_2n,
        witnesses=TensorDict(
            {"t1": ta, "t2": tb, "x1": xa, "x2": xb, "ratio": ratio},
            batch_size=[ta.shape[0]],
        ),
        details={
            "M_n": M_n,
            "M_2n": M_2n,
            "stable": bool(stable),
            "growing": growing,
            "per_mode": per_mode.tolist(),
            "regularized": regularize,
        },
    )


def envelope_gradient_check(
    problem: ControlProblem,
    w: ScalarField,
    params: ConvolutionParams,
    t: torch.Tensor,
    x: torch.Tensor,
    generator: torch.Generator | None = None,
    h: float = 1e-5,
    tolerance: float = 1e-4,
    search: EnvelopeSearch | None = None,
) -> ProbeReport:
    """Compares the envelope differentials (a, p) with central differences.

    Along a random unit direction (σ, d) per point, the difference quotient
    (v(t + hσ, x + hd) − v(t − hσ, x − hd))/2h is compared with aσ + ⟨p, d⟩.
    """
    t = as_time(t).reshape(-1)
    x = as_state(x).reshape(-1, problem.dim)
    n = t.shape[0]
    direction = sample_unit_vectors(n, problem.dim + 1, generator)
    sigma, d = direction[:, 0], direction[:, 1:]
    points = inf_convolve(
        problem,
        w,
        params,
        torch.cat([t, t + h * sigma, t - h * sigma]),
        torch.cat([x, x + h * d, x - h * d]),
        search,
    )
    center, plus, minus = points[:n], points[n : 2 * n], points[2 * n :]
    fd = (plus.value - minus.value) / (2 * h)
    exact = center.a * sigma + (center.p * d).sum(-1)
    error = (fd - exact).abs()
    statistic = error.max().item()
    return ProbeReport(
        name="envelope_gradient",
        passed=statistic <= tolerance,
        statistic=statistic,
        witnesses=TensorDict({"t": t, "x": x, "fd": fd, "envelope": exact, "error": error}, batch_size=[n]),
        details={"h": h, "tolerance": tolerance, "converged": int(center.converged.sum())},
    )


def perturbed_hjb_residual(
    problem: ControlProblem,
    w: ScalarField,
    params: ConvolutionParams,
    t: torch.Tensor | float,
    x: torch.Tensor,
    side: str = "super",
    delta: float | None = None,
    search: EnvelopeSearch | None = None,
) -> torch.Tensor:
    """r = a + ⟨A*p, x⟩ + H(t, x, p) from the envelope differential of a convolution.

    ``side="super"`` regularizes a supersolution by inf-convolution, for which
    r ≤ γ; ``side="sub"`` regularizes a subsolution by sup-convolution, for
    which r ≥ −γ. The budget γ is left to the caller.

    Raises:
        ValueError: if a query time leaves (δ, T − δ).
        RuntimeError: if the convolution did not converge at some query.
    """
    if side not in ("super", "sub"):
        raise ValueError(f"side must be 'super' or 'sub', got {side!r}")
    delta = _margin(problem, delta)
    params.check_margin(delta)
    t = as_time(t)
    if ((t <= delta) | (t >= problem.horizon - delta)).any():
        raise ValueError(f"query times must lie in ({delta}, {problem.horizon - delta}), got {t}")
    convolve = inf_convolve if side == "super" else sup_convolve
    point = convolve(problem, w, params, t, x, search)
    if not point.converged.all():
        bad = (~point.converged).reshape(-1).nonzero()[0].item()
        raise RuntimeError(f"{convolve.__name__} did not converge at query {bad}")
    x = torch.broadcast_to(as_state(x), point.p.shape)
    return point.a + pair_Astar(problem.A, point.p, x) + hamiltonian(problem, t, x, point.p).value
