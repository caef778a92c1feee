# Copyright (c) evoctrl contributors.
#
# This source code is licensed under the MIT license found in the
# LICENSE file in the root directory of this source tree.

"""Experiment runner.

Usage::

    evoctrl <command> --config <path> [--seed k] [--out dir] [--verbose | --quiet]

Commands: simulate, synthesize, verify, convolve-probe, dp-check, oracle. The
exit status is 0 when the command's checks pass, 1 when they fail and 2 on a
configuration error.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path
from typing import Any, Callable, Mapping, NamedTuple, Sequence

import torch
import yaml
from tensordict import TensorDict

import evoctrl
from evoctrl.convolution import (
    ConvolutionParams,
    EnvelopeSearch,
    envelope_gradient_check,
    lipschitz_minus2_probe,
    perturbed_hjb_residual,
    semiconvexity_probe,
)
from evoctrl.dynamics import chain_rule_residual, cost, integrate_mild, PiecewiseControl
from evoctrl.problem import ControlProblem, make_problem, Test1Fn, VintageParams
from evoctrl.statespace import SmoothingOperator, SpectralOperator
from evoctrl.synthesis import (
    random_controls,
    suboptimality_check,
    synthesize,
    synthesize_with_schedule,
    SynthesisConfig,
)
from evoctrl.utils import as_state, DTYPE, make_generator, timeit, write_csv
from evoctrl.value import (
    brute_force_value,
    compute_G,
    OracleCache,
    ScalarField,
    vintage_feedback,
    vintage_feedback_control,
    vintage_value,
    vintage_value_field,
)
from evoctrl.verify import check_condmin, check_superdiff_membership, remliyo_residual, vintage_selectors

logger = logging.getLogger(__name__)

__all__ = ["COMMANDS", "build_problem", "build_state", "load_config", "main", "run"]


@dataclasses.dataclass
class Context:
    """What a command needs: the problem, the start point and its parsed ``settings``."""

    config: dict
    problem: ControlProblem
    t: float
    x: torch.Tensor
    seed: int
    out: Path
    settings: dict = dataclasses.field(default_factory=dict)

    @property
    def generator(self) -> torch.Generator:
        return make_generator(self.seed)

    def section(self, name: str) -> dict:
        section = self.config.get(name) or {}
        if not isinstance(section, Mapping):
            raise ValueError(f"config section '{name}' must be a mapping")
        return dict(section)


def load_config(path: str | Path) -> dict:
    with open(path) as f:
        cfg = yaml.safe_load(f)
    if not isinstance(cfg, Mapping):
        raise ValueError(f"config {path} must hold a mapping at top level")
    return dict(cfg)


def build_problem(cfg: Mapping[str, Any]) -> ControlProblem:
    """Builds the problem of the ``problem`` config section.

    ``operators`` may override A (``{blocks: [...]}``) and B (``{diag: [...]}``).
    """
    if "name" not in cfg:
        raise KeyError("problem config misses the 'name' field")
    problem = make_problem(cfg["name"], **dict(cfg.get("params") or {}))
    overrides = dict(cfg.get("operators") or {})
    if overrides:
        A = SpectralOperator.from_dict(overrides["A"]) if "A" in overrides else problem.A
        B = SmoothingOperator.from_dict(overrides["B"]) if "B" in overrides else problem.B
        problem = dataclasses.replace(problem, A=A, B=B)
    return problem


def build_state(problem: ControlProblem, state_cfg: Mapping[str, Any]) -> torch.Tensor:
    """Initial state from ``{coeffs: [...]}`` or ``{alpha: v, tail: amplitude}``.

    The tail puts amplitude/k^0.75 on the k-th sine mode, a square-summable
    sequence outside the H¹ core.
    """
    if "coeffs" in state_cfg:
        x = as_state(state_cfg["coeffs"])
        if x.shape != (problem.dim,):
            raise ValueError(f"state coeffs must have {problem.dim} entries, got {tuple(x.shape)}")
        return x
    unknown = set(state_cfg) - {"alpha", "tail"}
    if unknown:
        raise KeyError(f"unknown state fields {sorted(unknown)}")
    x = torch.zeros(problem.dim, dtype=DTYPE)
    x[0] = float(state_cfg.get("alpha", 0.0))
    amplitude = float(state_cfg.get("tail", 0.0))
    for k in range(1, (problem.dim - 1) // 2 + 1):
        x[2 * k] += amplitude / k**0.75
    return x


def _closed_form(problem: ControlProblem) -> ScalarField:
    if isinstance(problem.params, VintageParams):
        return vintage_value_field(problem)
    if problem.name == "scalar-toy" and problem.A.matrix.abs().max() == 0:
        T = problem.horizon
        return ScalarField(
            lambda t, x: x[..., 0] - (T - t) / 2,
            lambda t, x: torch.full(x.shape[:-1], 0.5, dtype=DTYPE),
            lambda t, x: torch.ones_like(x),
            name="V",
        )
    raise ValueError(f"no closed-form value function for problem '{problem.name}'")


def _require_vintage(problem: ControlProblem, what: str) -> None:
    if not isinstance(problem.params, VintageParams):
        raise ValueError(f"{what} needs a vintage-family problem, got '{problem.name}'")


def _params(section: Mapping[str, Any]) -> ConvolutionParams:
    return ConvolutionParams.from_dict(section.get("params") or {})


def _search(section: Mapping[str, Any]) -> EnvelopeSearch | None:
    opts = section.get("search")
    return None if opts is None else EnvelopeSearch(**opts)


def _count(section: Mapping[str, Any], name: str, default: int) -> int:
    value = section.get(name, default)
    if int(value) != value or value < 1:
        raise ValueError(f"{name} must be a positive integer, got {value}")
    return int(value)


def _positive(section: Mapping[str, Any], name: str, default: float | None) -> float | None:
    value = section.get(name, default)
    if value is None:
        return None
    if not float(value) > 0:
        raise ValueError(f"{name} must be positive, got {value}")
    return float(value)


def _reject_unknown(section: Mapping[str, Any], known: set[str], name: str) -> None:
    unknown = set(section) - known
    if unknown:
        raise KeyError(f"unknown {name} fields {sorted(unknown)}")


# Each command is split in a parse step, run before dispatch, and an execute
# step. Configuration errors must surface in the parse step.


def _parse_simulate(ctx: Context) -> dict:
    section = ctx.section("simulate")
    mode = section.get("mode", "feedback")
    if mode == "order":
        low, high = section.get("ratio_range", [3.5, 4.5])
        dt = _positive(section, "dt", 1e-2)
        return {
            "mode": mode,
            "control": [float(c) for c in section.get("control", [0.5])],
            "dt": dt,
            "dt_reference": _positive(section, "dt_reference", dt / 64),
            "ratio_range": (float(low), float(high)),
            "chain_rule_samples": [int(s) for s in section.get("chain_rule_samples", [17, 33])],
            "chain_rule_dt": _positive(section, "chain_rule_dt", 1e-4),
        }
    if mode == "feedback":
        _require_vintage(ctx.problem, "feedback simulation")
    elif mode != "constant":
        raise ValueError(f"unknown simulate mode '{mode}'")
    return {
        "mode": mode,
        "control": [float(c) for c in section.get("control", [0.0])],
        "dt": _positive(section, "dt", None),
        "n_samples": _count(section, "n_samples", 512),
        "n_pieces": _count(section, "n_pieces", 200),
        "strict": bool(section.get("strict", False)),
        "tolerance": _positive(section, "tolerance", 2e-3),
    }


def _simulate(ctx: Context) -> tuple[bool, dict]:
    opts = ctx.settings
    problem, t, x = ctx.problem, ctx.t, ctx.x
    if opts["mode"] == "order":
        return _integrator_order(ctx)
    if opts["mode"] == "feedback":
        u = vintage_feedback_control(problem, t, x, opts["n_pieces"], strict=opts["strict"], dt=opts["dt"])
    else:
        u = PiecewiseControl.constant(opts["control"], t, problem.horizon)
    traj = integrate_mild(problem, t, x, u, dt=opts["dt"], n_samples=opts["n_samples"])
    J = cost(problem, t, traj).item()
    write_csv(ctx.out / "trajectory.csv", traj.table())
    write_csv(ctx.out / "control.csv", u.table())
    results = {"cost": J}
    passed = True
    if isinstance(problem.params, VintageParams):
        value = vintage_value(problem, t, x).item()
        results.update(value=value, error=abs(J - value))
        if opts["mode"] == "feedback":
            passed = abs(J - value) <= opts["tolerance"]
    return passed, results


def _integrator_order(ctx: Context) -> tuple[bool, dict]:
    opts = ctx.settings
    problem, t, x = ctx.problem, ctx.t, ctx.x
    u = PiecewiseControl.constant(opts["control"], t, problem.horizon)
    dt = opts["dt"]
    low, high = opts["ratio_range"]

    def final(step: float) -> torch.Tensor:
        return integrate_mild(problem, t, x, u, dt=step, n_samples=2).final_state()

    reference = final(opts["dt_reference"])
    errors = [(final(h) - reference).norm().item() for h in (dt, dt / 2)]
    order_ratio = errors[0] / errors[1]

    phi = Test1Fn(torch.zeros(problem.dim), Q=2 * torch.eye(problem.dim, dtype=DTYPE))
    spacing = opts["chain_rule_samples"]
    chain = [
        chain_rule_residual(
            problem, phi, integrate_mild(problem, t, x, u, dt=opts["chain_rule_dt"], n_samples=n)
        ).item()
        for n in spacing
    ]
    chain_ratio = chain[0] / chain[1]
    table = TensorDict(
        {
            "dt": torch.tensor([dt, dt / 2], dtype=DTYPE),
            "error": torch.tensor(errors, dtype=DTYPE),
            "chain_samples": torch.tensor(spacing, dtype=DTYPE),
            "chain_residual": torch.tensor(chain, dtype=DTYPE),
        },
        batch_size=[2],
    )
    write_csv(ctx.out / "order.csv", table)
    passed = low <= order_ratio <= high and low <= chain_ratio <= high
    return passed, {"order_ratio": order_ratio, "chain_rule_ratio": chain_ratio}


def _parse_synthesize(ctx: Context) -> dict:
    section = ctx.section("synthesize")
    _reject_unknown(
        section, {"window", "n", "nu", "delta", "gamma", "dt", "n_samples", "params", "search", "rounds"}, "synthesize"
    )
    cfg = SynthesisConfig(
        window=float(section.get("window", 0.5)),
        n=int(section.get("n", 20)),
        params=_params(section),
        nu=float(section.get("nu", 0.05)),
        delta=section.get("delta"),
        gamma=float(section.get("gamma", 1e-2)),
        dt=_positive(section, "dt", None),
        n_samples=_count(section, "n_samples", 512),
        search=_search(section),
    )
    end = ctx.problem.horizon - cfg.margin(ctx.problem)
    if not (0 <= ctx.t and ctx.t + cfg.window < end):
        raise ValueError(f"window [{ctx.t}, {ctx.t + cfg.window}] must end before T - delta = {end}")
    return {"w": _closed_form(ctx.problem), "cfg": cfg, "rounds": _count(section, "rounds", 1)}


def _synthesize(ctx: Context) -> tuple[bool, dict]:
    problem, t, x = ctx.problem, ctx.t, ctx.x
    w, cfg, rounds = ctx.settings["w"], ctx.settings["cfg"], ctx.settings["rounds"]
    if rounds > 1:
        result = synthesize_with_schedule(problem, w, t, x, cfg, max_rounds=rounds)
        write_csv(
            ctx.out / "schedule.csv",
            {k: torch.tensor([r[k] for r in result.rounds], dtype=DTYPE) for k in result.rounds[0]},
        )
    else:
        result = synthesize(problem, w, t, x, cfg)
    value = w(t, x).item()
    write_csv(ctx.out / "control.csv", result.full_control.table())
    write_csv(ctx.out / "per_step.csv", result.per_step, ["time", "a", "p_norm", "control", "slack"])
    write_csv(ctx.out / "trajectory.csv", result.trajectory.table())
    passed = result.gap >= -cfg.nu and result.total_cost <= value + cfg.nu
    return passed, {
        "gap": result.gap,
        "cost": result.total_cost,
        "value": value,
        "budget_violations": result.budget_violations,
    }


def _parse_verify(ctx: Context) -> dict:
    section = ctx.section("verify")
    _require_vintage(ctx.problem, "verify")
    mode = section.get("mode", "condmin")
    if mode == "condmin":
        control = section.get("control", "feedback")
        if control not in ("feedback", "feedback_strict"):
            control = float(control)
        expect = section.get("expect", "equality")
        if expect not in ("equality", "fail"):
            raise ValueError(f"unknown condmin expectation '{expect}'")
        return {
            "mode": mode,
            "control": control,
            "expect": expect,
            "margin": float(section.get("margin", 0.05)),
            "n_samples": _count(section, "n_samples", 512),
            "n_pieces": _count(section, "n_pieces", 200),
        }
    if mode == "membership":
        return {
            "mode": mode,
            "inside": [float(g) for g in section.get("inside", [-1.0, -0.5, 0.0, 0.5, 1.0])],
            "outside": [float(g) for g in section.get("outside", [-1.5, 1.5])],
            "radius": _positive(section, "radius", 1e-2),
            "samples": _count(section, "samples", 256),
        }
    if mode == "remliyo":
        return {
            "mode": mode,
            "s": float(section.get("s", ctx.t)),
            "offsets": [float(o) for o in section.get("offsets", [0.0, 1.0])],
            "tolerance": _positive(section, "tolerance", 1e-3),
        }
    raise ValueError(f"unknown verify mode '{mode}'")


def _verify(ctx: Context) -> tuple[bool, dict]:
    opts = ctx.settings
    problem, t, x = ctx.problem, ctx.t, ctx.x
    V = vintage_value_field(problem)
    if opts["mode"] == "condmin":
        control = opts["control"]
        strict = control == "feedback_strict"
        if isinstance(control, str):
            u = vintage_feedback_control(problem, t, x, opts["n_pieces"], strict=strict)
        else:
            u = PiecewiseControl.constant([control], t, problem.horizon)
        traj = integrate_mild(problem, t, x, u, n_samples=opts["n_samples"])
        result = check_condmin(problem, traj, u, vintage_selectors(problem, traj, strict=strict))
        write_csv(ctx.out / "condmin.csv", result.integrands)
        if opts["expect"] == "equality":
            passed = result.passed and result.equality
        else:
            passed = result.lhs - result.rhs >= opts["margin"]
        return passed, {"lhs": result.lhs, "rhs": result.rhs, "gap": result.lhs - result.rhs}
    if opts["mode"] == "membership":
        params = problem.params
        G = compute_G(params.eigenvalue, t, params.horizon)
        q = V.time_derivative(t, x).item()
        inside, outside = opts["inside"], opts["outside"]
        rows = []
        for gamma in inside + outside:
            report = check_superdiff_membership(
                problem,
                V,
                t,
                x,
                q,
                gamma * G * params.alpha,
                radius=opts["radius"],
                samples=opts["samples"],
                generator=ctx.generator,
            )
            rows.append((gamma, report.statistic, report.passed))
        write_csv(
            ctx.out / "membership.csv",
            {
                "gamma": torch.tensor([r[0] for r in rows], dtype=DTYPE),
                "violation": torch.tensor([r[1] for r in rows], dtype=DTYPE),
                "passed": torch.tensor([float(r[2]) for r in rows], dtype=DTYPE),
            },
        )
        passed = all(r[2] for r in rows[: len(inside)]) and not any(r[2] for r in rows[len(inside) :])
        return passed, {"checked": len(rows)}
    s, offsets = opts["s"], opts["offsets"]
    residuals = [remliyo_residual(problem, V, s, x, vintage_feedback(problem, s, x) + offset) for offset in offsets]
    write_csv(
        ctx.out / "remliyo.csv",
        {"offset": torch.tensor(offsets, dtype=DTYPE), "residual": torch.tensor(residuals, dtype=DTYPE)},
    )
    expected = [0.5 * o**2 for o in offsets]
    passed = all(abs(r - e) <= opts["tolerance"] for r, e in zip(residuals, expected))
    return passed, {f"residual_{o:g}": r for o, r in zip(offsets, residuals)}


def _smooth_points(
    problem: ControlProblem, n: int, radius: float, margin: float, clearance: float, generator: torch.Generator
) -> tuple[torch.Tensor, torch.Tensor]:
    # points with |⟨α,x⟩| > clearance, times in (δ, T − δ)
    alpha = problem.params.alpha
    ts, xs = [], []
    while sum(len(v) for v in xs) < n:
        x = radius * (2 * torch.rand(4 * n, problem.dim, generator=generator, dtype=DTYPE) - 1) / problem.dim**0.5
        t = margin + (problem.horizon - 2 * margin) * torch.rand(4 * n, generator=generator, dtype=DTYPE)
        keep = (x * alpha).sum(-1).abs() > clearance
        ts.append(t[keep])
        xs.append(x[keep])
    return torch.cat(ts)[:n], torch.cat(xs)[:n]


_PROBES = ("semiconvexity", "lipschitz", "gradient", "residual")


def _parse_convolve_probe(ctx: Context) -> dict:
    section = ctx.section("convolve_probe")
    problem = ctx.problem
    probes = list(section.get("probes", ["semiconvexity", "lipschitz", "gradient"]))
    for probe in probes:
        if probe not in _PROBES:
            raise ValueError(f"unknown convolve_probe probe '{probe}'")
        if probe in ("gradient", "residual"):
            _require_vintage(problem, f"the {probe} probe")
    delta = section.get("delta")
    return {
        "w": _closed_form(problem),
        "params": _params(section),
        "search": _search(section),
        "probes": probes,
        "radius": _positive(section, "radius", 1.0),
        "delta": None if delta is None else float(delta),
        "margin": 0.05 * problem.horizon if delta is None else float(delta),
        "triples": _count(section, "triples", 500),
        "lipschitz_radius": _positive(section, "lipschitz_radius", 2.0),
        "samples": _count(section, "samples", 200),
        "gradient_points": _count(section, "points", 100),
        "residual_points": _count(section, "points", 50),
        "shift_rate": float(section.get("shift_rate", -10.0)),
        "floor": float(section.get("floor", -1e-3)),
        "shift_tolerance": _positive(section, "shift_tolerance", 1e-2),
    }


def _convolve_probe(ctx: Context) -> tuple[bool, dict]:
    opts = ctx.settings
    problem = ctx.problem
    w, params, search, delta = opts["w"], opts["params"], opts["search"], opts["delta"]
    generator = ctx.generator
    results: dict[str, Any] = {}
    verdicts = []
    for probe in opts["probes"]:
        if probe == "semiconvexity":
            report = semiconvexity_probe(
                problem, w, params, opts["triples"], generator, radius=opts["radius"], delta=delta, search=search
            )
        elif probe == "lipschitz":
            report = lipschitz_minus2_probe(
                problem, w, params, opts["lipschitz_radius"], opts["samples"], generator, delta=delta, search=search
            )
        elif probe == "gradient":
            t, x = _smooth_points(
                problem, opts["gradient_points"], opts["radius"], opts["margin"], 4 * params.epsilon, generator
            )
            report = envelope_gradient_check(problem, w, params, t, x, generator, search=search)
        else:
            t, x = _smooth_points(
                problem, opts["residual_points"], opts["radius"], opts["margin"], 4 * params.epsilon, generator
            )
            r = perturbed_hjb_residual(problem, w, params, t, x, "super", delta=delta, search=search)
            rate = opts["shift_rate"]
            shifted = w.shifted(rate=rate, horizon=problem.horizon)
            r_shift = perturbed_hjb_residual(problem, shifted, params, t, x, "super", delta=delta, search=search)
            shift_error = (r_shift - r + rate).abs().max().item()
            passed = r.min().item() >= opts["floor"] and shift_error <= opts["shift_tolerance"]
            write_csv(
                ctx.out / "residual.csv",
                TensorDict({"t": t, "x": x, "residual": r, "shifted": r_shift}, batch_size=[t.shape[0]]),
            )
            results.update(residual_min=r.min().item(), residual_max=r.max().item(), shift_error=shift_error)
            verdicts.append(passed)
            continue
        report.to_csv(ctx.out / f"{report.name}.csv")
        results[report.name] = report.statistic
        verdicts.append(report.passed)
    return all(verdicts), results


def _parse_dp_check(ctx: Context) -> dict:
    section = ctx.section("dp_check")
    w = _closed_form(ctx.problem)
    rate = float(section.get("shift_rate", 0.0))
    if rate:
        w = w.shifted(rate=rate, horizon=ctx.problem.horizon)
    return {
        "w": w,
        "window": _positive(section, "window", 0.5),
        "n_controls": _count(section, "n_controls", 50),
        "n_pieces": _count(section, "n_pieces", 10),
        "tolerance": float(section.get("tolerance", 1e-3)),
    }


def _dp_check(ctx: Context) -> tuple[bool, dict]:
    opts = ctx.settings
    problem, t, x = ctx.problem, ctx.t, ctx.x
    window = opts["window"]
    controls = random_controls(problem, t, t + window, opts["n_controls"], opts["n_pieces"], ctx.generator)
    report = suboptimality_check(problem, opts["w"], t, x, window, controls, tolerance=opts["tolerance"])
    report.to_csv(ctx.out / "dp_check.csv")
    return report.passed, {"max_gap": report.statistic, "controls": report.witnesses.shape[0]}


def _parse_oracle(ctx: Context) -> dict:
    section = ctx.section("oracle")
    grid = section.get("grid", {"lower": -1.0, "upper": 1.0, "size": 5})
    if isinstance(grid, Mapping):
        grid = torch.linspace(float(grid["lower"]), float(grid["upper"]), _count(grid, "size", 5), dtype=DTYPE)
    grid = torch.as_tensor(grid, dtype=DTYPE)
    if grid.ndim != 1 or grid.numel() == 0:
        raise ValueError(f"oracle grid must be a non-empty list of control values, got shape {tuple(grid.shape)}")
    cache = section.get("cache")
    workers = int(section.get("workers", 0))
    if workers < 0:
        raise ValueError(f"workers must be non-negative, got {workers}")
    return {
        "grid": grid,
        "n_steps": _count(section, "n_steps", 4),
        "dt": _positive(section, "dt", None),
        "workers": workers,
        "cache": None if cache is None else OracleCache(cache),
        "expected": None if "expected" not in section else float(section["expected"]),
        "tolerance": float(section.get("tolerance", 1e-9)),
    }


def _oracle(ctx: Context) -> tuple[bool, dict]:
    opts = ctx.settings
    value, control = brute_force_value(
        ctx.problem,
        ctx.t,
        ctx.x,
        opts["n_steps"],
        opts["grid"],
        dt=opts["dt"],
        num_workers=opts["workers"],
        cache=opts["cache"],
    )
    write_csv(ctx.out / "oracle.csv", control.table())
    results = {"value": value}
    passed = True
    if opts["expected"] is not None:
        results["expected"] = opts["expected"]
        passed = abs(value - opts["expected"]) <= opts["tolerance"]
    return passed, results


class Command(NamedTuple):
    parse: Callable[[Context], dict]
    execute: Callable[[Context], tuple[bool, dict]]


COMMANDS: dict[str, Command] = {
    "simulate": Command(_parse_simulate, _simulate),
    "synthesize": Command(_parse_synthesize, _synthesize),
    "verify": Command(_parse_verify, _verify),
    "convolve-probe": Command(_parse_convolve_probe, _convolve_probe),
    "dp-check": Command(_parse_dp_check, _dp_check),
    "oracle": Command(_parse_oracle, _oracle),
}


def _write_manifest(path: Path, command: str, config: dict, seed: int, wall: float, passed: bool, results: dict) -> None:
    lines = [
        f"evoctrl {evoctrl.__version__ or 'unknown'}",
        f"command: {command}",
        f"seed: {seed}",
        f"wall_time: {wall:.3f}",
        f"passed: {passed}",
        "results:",
    ]
    lines += [f"  {k}: {v:.17g}" if isinstance(v, float) else f"  {k}: {v}" for k, v in results.items()]
    lines += ["config:", yaml.safe_dump(config, sort_keys=False)]
    path.write_text("\n".join(lines))


def run(command: str, config: dict, seed: int = 0, out: str | Path = "out") -> int:
    """Runs ``command`` on a parsed config and returns the exit status.

    Everything the command reads from the config is parsed and validated
    before it starts; errors at that stage give 2. Once the command runs,
    any numerical failure counts as a failed check and gives 1.
    """
    timer = timeit(command)
    try:
        if command not in COMMANDS:
            raise KeyError(f"unknown command '{command}', expected one of {sorted(COMMANDS)}")
        problem = build_problem(config.get("problem") or {})
        start_cfg = dict(config.get("start") or {})
        t = float(start_cfg.get("t", 0.0))
        x = build_state(problem, start_cfg.get("state") or {"alpha": 0.0})
        out = Path(out)
        ctx = Context(config, problem, t, x, seed, out)
        ctx.settings = COMMANDS[command].parse(ctx)
    except (ValueError, KeyError, TypeError) as err:
        logger.error("configuration error: %s", err)
        return 2
    out.mkdir(parents=True, exist_ok=True)
    try:
        with timer:
            passed, results = COMMANDS[command].execute(ctx)
    except (ValueError, RuntimeError, ArithmeticError) as err:
        logger.error("%s failed: %s", command, err)
        return 1
    wall = timer.elapsed
    _write_manifest(out / "manifest.txt", command, config, seed, wall, passed, results)
    logger.info("%s %s in %.2fs: %s", command, "passed" if passed else "failed", wall, results)
    return 0 if passed else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="evoctrl", description="evoctrl experiment runner")
    parser.add_argument("command", help=f"one of {', '.join(COMMANDS)}")
    parser.add_argument("--config", required=True, help="path to the YAML experiment config")
    parser.add_argument("--seed", type=int, default=None, help="random seed (overrides the config)")
    parser.add_argument("--out", default=None, help="output directory (overrides the config)")
    verbosity = parser.add_mutually_exclusive_group()
    verbosity.add_argument("--verbose", action="store_true")
    verbosity.add_argument("--quiet", action="store_true")
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.DEBUG if args.verbose else logging.WARNING if args.quiet else logging.INFO
    logging.basicConfig(level=level, format="%(asctime)s %(name)s %(levelname)s: %(message)s")
    try:
        config = load_config(args.config)
    except (OSError, ValueError, yaml.YAMLError) as err:
        logger.error("cannot read config: %s", err)
        return 2
    seed = args.seed if args.seed is not None else int(config.get("seed", 0))
    out = args.out or config.get("out", "out")
    return run(args.command, config, seed, out)


if __name__ == "__main__":
    sys.exit(main())
