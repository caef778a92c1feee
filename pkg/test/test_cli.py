# Copyright (c) evoctrl contributors.
#
# This source code is licensed under the MIT license found in the
# LICENSE file in the root directory of this source tree.

import argparse
from pathlib import Path

import pytest
import torch
import yaml

from evoctrl.cli import build_problem, build_state, COMMANDS, Context, load_config, main, run
from evoctrl.problem import vintage_problem

CONFIG_DIR = Path(__file__).parent.parent / "configs"

CLEAN = {"lambda": 1e-12, "epsilon": 1e-2, "beta": 1e-4}


def manifest_results(out):
    lines = (out / "manifest.txt").read_text().split("results:\n")[1].split("config:")[0]
    results = {}
    for line in lines.splitlines():
        key, value = line.strip().split(": ")
        results[key] = float(value)
    return results


def vintage(alpha=-1.0, tail=0.0, t=0.0, **params):
    params.setdefault("coupling", 1.0)
    return {
        "problem": {"name": "vintage", "params": params},
        "start": {"t": t, "state": {"alpha": alpha, "tail": tail}},
    }


class TestBuilders:
    def test_problem_with_overrides(self):
        problem = build_problem(
            {
                "name": "vintage",
                "params": {"n_modes": 1},
                "operators": {"A": {"blocks": [[[-1.0]], [[-1.0, 0.0], [0.0, -1.0]]]}},
            }
        )
        assert problem.dim == 3
        torch.testing.assert_close(problem.A.matrix, -torch.eye(3, dtype=torch.float64))

    def test_problem_needs_name(self):
        with pytest.raises(KeyError, match="name"):
            build_problem({})

    def test_state(self):
        problem = vintage_problem(n_modes=2)
        x = build_state(problem, {"alpha": -1.0, "tail": 1.0})
        assert x.tolist() == pytest.approx([-1.0, 0.0, 1.0, 0.0, 2**-0.75])
        assert build_state(problem, {"coeffs": [1, 2, 3, 4, 5]}).tolist() == [1.0, 2.0, 3.0, 4.0, 5.0]
        with pytest.raises(ValueError, match="entries"):
            build_state(problem, {"coeffs": [1.0]})
        with pytest.raises(KeyError, match="unknown state fields"):
            build_state(problem, {"beta": 1.0})

    def test_load_config(self, tmp_path):
        path = tmp_path / "list.yaml"
        path.write_text("- 1\n- 2\n")
        with pytest.raises(ValueError, match="mapping"):
            load_config(path)


class TestCommands:
    def test_simulate_feedback(self, tmp_path):
        cfg = vintage()
        cfg["simulate"] = {"mode": "feedback", "n_pieces": 200, "dt": 1e-3}
        assert run("simulate", cfg, out=tmp_path) == 0
        manifest = (tmp_path / "manifest.txt").read_text()
        assert "command: simulate" in manifest
        assert "passed: True" in manifest
        assert (tmp_path / "trajectory.csv").exists()
        assert (tmp_path / "control.csv").read_text().startswith("start,end,value")

    def test_simulate_order(self, tmp_path):
        cfg = {
            "problem": {"name": "scalar-nonlinear"},
            "start": {"state": {"coeffs": [1.0]}},
            "simulate": {"mode": "order"},
        }
        assert run("simulate", cfg, out=tmp_path) == 0
        assert (tmp_path / "order.csv").exists()

    def test_oracle(self, tmp_path):
        cfg = {
            "problem": {"name": "scalar-toy"},
            "oracle": {"grid": {"lower": -1.0, "upper": 1.0, "size": 5}, "n_steps": 4, "expected": -0.5},
        }
        assert run("oracle", cfg, out=tmp_path) == 0
        cfg["oracle"]["expected"] = 0.0
        assert run("oracle", cfg, out=tmp_path / "wrong") == 1

    def test_oracle_cache(self, tmp_path):
        cache = tmp_path / "cache.csv"
        cfg = {"problem": {"name": "scalar-toy"}, "oracle": {"n_steps": 3, "cache": str(cache)}}
        assert run("oracle", cfg, out=tmp_path / "a") == 0
        assert run("oracle", cfg, out=tmp_path / "b") == 0
        assert len(cache.read_text().splitlines()) == 2

    @pytest.mark.parametrize("rate,status", [(0.0, 0), (2.0, 1)])
    def test_dp_check(self, tmp_path, rate, status):
        cfg = vintage(alpha=-0.4, tail=0.3)
        cfg["dp_check"] = {"window": 0.5, "n_controls": 50, "n_pieces": 10, "shift_rate": rate}
        assert run("dp-check", cfg, seed=7, out=tmp_path) == status
        assert len((tmp_path / "dp_check.csv").read_text().splitlines()) == 51

    def test_synthesize(self, tmp_path):
        cfg = vintage(n_modes=2)
        cfg["synthesize"] = {"window": 0.5, "n": 10, "params": CLEAN}
        assert run("synthesize", cfg, out=tmp_path) == 0
        header = (tmp_path / "per_step.csv").read_text().splitlines()[0]
        assert header == "time,a,p_norm,control,slack"

    @pytest.mark.slow
    def test_synthesize_shipped_config(self, tmp_path):
        cfg = load_config(CONFIG_DIR / "synthesize.yaml")
        assert run("synthesize", cfg, out=tmp_path) == 0
        results = manifest_results(tmp_path)
        nu = cfg["synthesize"]["nu"]
        assert results["value"] == pytest.approx(-7 / 6, abs=1e-12)
        assert results["gap"] >= -nu
        assert results["cost"] <= results["value"] + nu
        assert len((tmp_path / "schedule.csv").read_text().splitlines()) == 2

    @pytest.mark.slow
    def test_convolve_shipped_config(self, tmp_path):
        cfg = load_config(CONFIG_DIR / "convolve_probe.yaml")
        assert run("convolve-probe", cfg, out=tmp_path) == 0
        results = manifest_results(tmp_path)
        assert results["semiconvexity"] <= 1e-6
        assert results["envelope_gradient"] <= 1e-4
        assert len((tmp_path / "semiconvexity.csv").read_text().splitlines()) == 501
        assert len((tmp_path / "envelope_gradient.csv").read_text().splitlines()) == 101

    @pytest.mark.parametrize(
        "section",
        [
            {"mode": "condmin"},
            {"mode": "condmin", "control": 1.0, "expect": "fail"},
            {"mode": "remliyo"},
        ],
    )
    def test_verify(self, tmp_path, section):
        cfg = vintage(tail=0.5)
        cfg["verify"] = section
        assert run("verify", cfg, out=tmp_path) == 0

    def test_verify_membership(self, tmp_path):
        cfg = vintage(alpha=0.0, t=0.5)
        cfg["verify"] = {"mode": "membership"}
        assert run("verify", cfg, seed=3, out=tmp_path) == 0
        assert len((tmp_path / "membership.csv").read_text().splitlines()) == 8

    def test_convolve_probe(self, tmp_path):
        cfg = {
            "problem": {"name": "scalar-toy"},
            "convolve_probe": {
                "params": CLEAN,
                "probes": ["semiconvexity", "lipschitz"],
                "triples": 5,
                "samples": 10,
            },
        }
        assert run("convolve-probe", cfg, out=tmp_path) == 0
        assert (tmp_path / "semiconvexity.csv").exists()
        assert (tmp_path / "lipschitz_minus2.csv").exists()

    def test_residual_probe(self, tmp_path):
        cfg = vintage(n_modes=1)
        cfg["convolve_probe"] = {
            "params": {"lambda": 1e-10, "epsilon": 1e-4, "beta": 1e-4},
            "probes": ["residual"],
            "points": 4,
        }
        assert run("convolve-probe", cfg, out=tmp_path) == 0
        assert len((tmp_path / "residual.csv").read_text().splitlines()) == 5


class TestErrors:
    def test_unknown_command(self, tmp_path):
        assert run("fly", vintage(), out=tmp_path) == 2

    def test_unknown_problem(self, tmp_path):
        assert run("simulate", {"problem": {"name": "nope"}}, out=tmp_path) == 2

    def test_negative_epsilon(self, tmp_path):
        cfg = vintage()
        cfg["synthesize"] = {"window": 0.5, "n": 4, "params": {"epsilon": -1e-2}}
        assert run("synthesize", cfg, out=tmp_path) == 2
        assert not (tmp_path / "manifest.txt").exists()

    def test_unknown_field(self, tmp_path):
        cfg = vintage()
        cfg["synthesize"] = {"window": 0.5, "n": 4, "steps": 3}
        assert run("synthesize", cfg, out=tmp_path) == 2

    def test_runtime_failure(self, tmp_path):
        cfg = {"problem": {"name": "scalar-toy"}, "oracle": {"n_steps": 12}}
        assert run("oracle", cfg, out=tmp_path) == 1

    def test_failure_inside_command_is_a_failed_check(self, tmp_path):
        cfg = vintage()
        cfg["simulate"] = {"mode": "constant", "control": [5.0]}
        assert run("simulate", cfg, out=tmp_path) == 1
        assert not (tmp_path / "manifest.txt").exists()

    @pytest.mark.parametrize(
        "command,section",
        [
            ("synthesize", {"synthesize": {"window": 0.99, "n": 4}}),
            ("convolve-probe", {"convolve_probe": {"probes": ["curvature"]}}),
            ("convolve-probe", {"convolve_probe": {"triples": 0}}),
            ("dp-check", {"dp_check": {"window": -0.5}}),
            ("oracle", {"oracle": {"grid": []}}),
            ("verify", {"verify": {"mode": "condmin", "expect": "sometimes"}}),
            ("simulate", {"simulate": {"mode": "order", "dt": 0.0}}),
        ],
    )
    def test_settings_validated_before_dispatch(self, tmp_path, command, section):
        cfg = {**vintage(), **section}
        assert run(command, cfg, out=tmp_path / "run") == 2
        assert not (tmp_path / "run").exists()


class TestMain:
    def test_main(self, tmp_path):
        path = tmp_path / "oracle.yaml"
        cfg = {"problem": {"name": "scalar-toy"}, "oracle": {"n_steps": 2, "expected": -0.5}, "seed": 3}
        path.write_text(yaml.safe_dump(cfg))
        out = tmp_path / "out"
        assert main(["oracle", "--config", str(path), "--out", str(out), "--quiet"]) == 0
        assert "seed: 3" in (out / "manifest.txt").read_text()

    def test_missing_config(self, tmp_path):
        assert main(["oracle", "--config", str(tmp_path / "missing.yaml")]) == 2

    @pytest.mark.parametrize("name", sorted(p.name for p in CONFIG_DIR.glob("*.yaml")))
    def test_shipped_configs_parse(self, tmp_path, name):
        cfg = load_config(CONFIG_DIR / name)
        (section,) = set(cfg) - {"problem", "start", "seed", "out"}
        problem = build_problem(cfg["problem"])
        start = cfg.get("start") or {}
        x = build_state(problem, start.get("state") or {"alpha": 0.0})
        ctx = Context(cfg, problem, float(start.get("t", 0.0)), x, 0, tmp_path)
        parse = COMMANDS[section.replace("_", "-")].parse
        if name == "invalid_epsilon.yaml":
            with pytest.raises(ValueError, match="epsilon"):
                parse(ctx)
        else:
            assert parse(ctx)


if __name__ == "__main__":
    args, unknown = argparse.ArgumentParser().parse_known_args()
    pytest.main([__file__, "--capture", "no", "--exitfirst"] + unknown)
