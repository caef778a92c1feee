# Copyright (c) evoctrl contributors.
#
# This source code is licensed under the MIT license found in the
# LICENSE file in the root directory of this source tree.

import argparse
import dataclasses
import math

import pytest
import torch

from _utils_internal import diagonal_problem, scalar_problem, square_wave
from evoctrl.dynamics import PiecewiseControl
from evoctrl.problem import (
    ControlProblem,
    ControlSet,
    make_problem,
    probe_lipschitz,
    probe_uniform_modulus,
    PROBLEMS,
    scalar_nonlinear_problem,
    scalar_toy_problem,
    square_wave_coefficients,
    Test1Fn,
    Test2Fn,
    vintage_problem,
)
from evoctrl.statespace import FourierTruncation, fourier_smoothing, rotation_generator, SpectralOperator
from evoctrl.utils import DTYPE, make_generator, set_domain_check


class TestControlSet:
    def test_box_grid(self):
        U = ControlSet.box(2.0, 1, 5)
        torch.testing.assert_close(U.grid[:, 0], torch.tensor([-2.0, -1.0, 0.0, 1.0, 2.0], dtype=DTYPE))
        torch.testing.assert_close(U.spacing, torch.tensor([1.0], dtype=DTYPE))
        assert U.dim == 1

    def test_lexicographic_order(self):
        U = ControlSet(torch.tensor([0.0, 0.0]), torch.tensor([1.0, 2.0]), (2, 3))
        assert U.grid.tolist() == [[0, 0], [0, 1], [0, 2], [1, 0], [1, 1], [1, 2]]

    def test_contains(self):
        U = ControlSet.box(1.0, 2)
        inside = U.contains(torch.tensor([[0.5, -1.0], [1.5, 0.0]]))
        assert inside.tolist() == [True, False]

    @pytest.mark.parametrize(
        "lower,upper,size",
        [([1.0], [0.0], 3), ([0.0, 0.0], [1.0], 3), ([0.0], [1.0], 0), ([0.0, 0.0], [1.0, 1.0], (3,))],
    )
    def test_invalid(self, lower, upper, size):
        with pytest.raises(ValueError):
            ControlSet(torch.tensor(lower), torch.tensor(upper), size)

    def test_with_grid_size(self):
        U = ControlSet.box(1.0).with_grid_size(3)
        assert U.grid.shape == (3, 1)


class TestControlProblem:
    def test_validation(self):
        problem = scalar_toy_problem()
        with pytest.raises(ValueError, match="horizon"):
            dataclasses.replace(problem, horizon=0.0)
        with pytest.raises(ValueError, match="acts on"):
            dataclasses.replace(problem, A=rotation_generator(1))
        with pytest.raises(ValueError, match="dissipative"):
            dataclasses.replace(problem, A=SpectralOperator(([[0.5]],)))
        with pytest.raises(ValueError, match="K must be positive"):
            dataclasses.replace(problem, K=0.0)

    def test_fingerprint(self):
        a = vintage_problem(coupling=1.0)
        b = vintage_problem(coupling=1.0)
        c = vintage_problem(coupling=0.5)
        assert a.fingerprint() == b.fingerprint()
        assert a.fingerprint() != c.fingerprint()
        assert a.fingerprint() != a.with_controls(ControlSet.box(2.0, 1, 5)).fingerprint()

    def test_registry(self):
        assert set(PROBLEMS) == {"vintage", "vintage-nondegenerate", "scalar-toy", "scalar-nonlinear"}
        assert make_problem("vintage-nondegenerate").params.coupling == 1.0
        assert make_problem("scalar-toy", horizon=2.0).horizon == 2.0
        with pytest.raises(KeyError, match="unknown problem"):
            make_problem("pendulum")

    def test_scalar_nonlinear(self):
        problem = scalar_nonlinear_problem()
        t = torch.tensor([0.0, 0.5], dtype=DTYPE)
        x = torch.tensor([[1.0], [2.0]], dtype=DTYPE)
        u = torch.tensor([[0.5], [0.0]], dtype=DTYPE)
        expected = u - torch.sin(x) * torch.cos(t)[:, None]
        torch.testing.assert_close(problem.drift(t, x, u), expected)
        torch.testing.assert_close(problem.running_cost(t, x, u), torch.tensor([0.625, 2.0], dtype=DTYPE))


class TestVintage:
    def test_layout(self):
        problem = vintage_problem()
        params = problem.params
        assert problem.dim == 9
        assert problem.control_dim == 1
        assert params.coupling == 0.0
        assert (params.alpha * params.beta).sum().item() == 0.0
        assert problem.controls.upper.item() == 1.0

    def test_square_wave_coefficients(self):
        basis = FourierTruncation(4)
        projected = basis.project(square_wave, n_quad=8192)
        torch.testing.assert_close(projected, square_wave_coefficients(4), atol=1e-5, rtol=0)
        assert square_wave_coefficients(4)[2].item() == pytest.approx(2 * math.sqrt(2) / math.pi)

    def test_nondegenerate_control_box(self):
        problem = vintage_problem(coupling=1.0)
        assert (problem.params.alpha * problem.params.beta).sum().item() == 1.0
        assert problem.M == 1.0
        assert problem.controls.upper.item() == 2.0

    def test_damped_control_box(self):
        problem = vintage_problem(coupling=2.0, damping=1.0)
        G0 = 1 - math.exp(-1.0)
        assert problem.params.eigenvalue == -1.0
        assert problem.M == pytest.approx(2 * G0)
        assert problem.controls.upper.item() == pytest.approx(2 * G0 + 1)
        # α stays an eigenvector of A* with eigenvalue −μ
        alpha = problem.params.alpha
        torch.testing.assert_close(problem.A.adjoint_apply(alpha), -alpha)

    def test_costs(self):
        problem = vintage_problem(coupling=1.0)
        x = torch.zeros(2, 9, dtype=DTYPE)
        x[0, 0], x[1, 0] = -2.0, 3.0
        u = torch.tensor([[1.0], [-2.0]], dtype=DTYPE)
        torch.testing.assert_close(problem.running_cost(0.0, x, u), torch.tensor([-1.5, -1.0], dtype=DTYPE))
        torch.testing.assert_close(problem.drift(0.0, x, u)[1], -2 * problem.params.beta)
        assert problem.terminal_cost(x).tolist() == [0.0, 0.0]

    @pytest.mark.parametrize("kwargs", [{"n_modes": -1}, {"control_bound": -1.0}])
    def test_invalid(self, kwargs):
        with pytest.raises(ValueError):
            vintage_problem(**kwargs)


class TestTestFunctions:
    def test_test1_derivatives(self):
        a = torch.tensor([1.0, -2.0, 0.5], dtype=DTYPE)
        Q = torch.tensor([[2.0, 1.0, 0.0], [1.0, 3.0, 0.0], [0.0, 0.0, 1.0]], dtype=DTYPE)
        phi = Test1Fn(a, eta=lambda t: 1 - t, eta_dot=lambda t: -torch.ones_like(t), psi=lambda t: t**2, psi_dot=lambda t: 2 * t, Q=Q)
        t = torch.tensor(0.3, dtype=DTYPE)
        x = torch.tensor([0.2, -0.4, 1.0], dtype=DTYPE)
        h = 1e-6
        fd_t = (phi(t + h, x) - phi(t - h, x)) / (2 * h)
        fd_x = torch.stack([(phi(t, x + h * e) - phi(t, x - h * e)) / (2 * h) for e in torch.eye(3, dtype=DTYPE)])
        torch.testing.assert_close(phi.time_derivative(t, x), fd_t, atol=1e-8, rtol=0)
        torch.testing.assert_close(phi.gradient(t, x), fd_x, atol=1e-8, rtol=0)

    def test_test1_rejects_asymmetric_q(self):
        with pytest.raises(ValueError, match="symmetric"):
            Test1Fn(torch.zeros(2), Q=torch.tensor([[0.0, 1.0], [0.0, 0.0]]))

    def test_test1_domain(self):
        basis = FourierTruncation(4)
        A = rotation_generator(4, domain_budget=1.0)
        Test1Fn(basis.unit("const")).validate(A)
        with pytest.raises(ValueError, match="budget"):
            Test1Fn(basis.unit("sin", 4)).validate(A)
        with set_domain_check("ignore"):
            Test1Fn(basis.unit("sin", 4)).validate(A)

    def test_test2_default(self):
        g = Test2Fn()
        x = torch.tensor([3.0, 4.0], dtype=DTYPE)
        assert g(0.5, x).item() == 25.0
        torch.testing.assert_close(g.gradient(0.5, x), 2 * x)
        torch.testing.assert_close(g.gradient(0.5, torch.zeros(2, dtype=DTYPE)), torch.zeros(2, dtype=DTYPE))
        report = g.check(1.0)
        assert report.passed
        assert report.statistic == 0.0

    def test_test2_bad_profiles(self):
        kinked = Test2Fn(g0=lambda r: r, g0_prime=lambda r: torch.ones_like(r))
        assert not kinked.check(1.0).passed
        decreasing = Test2Fn(g0=lambda r: -(r**2), g0_prime=lambda r: -2 * r)
        assert not decreasing.check(1.0).passed
        negative_eta = Test2Fn(eta=lambda t: t - 0.5, eta_dot=lambda t: torch.ones_like(t))
        assert not negative_eta.check(1.0).passed


class TestProbeLipschitz:
    def test_state_independent_drift(self):
        report = probe_lipschitz(vintage_problem(coupling=1.0), 100, make_generator(0))
        assert report.passed
        assert report.statistic == 0.0
        assert report.witnesses.batch_size == torch.Size([109])

    def test_smoothing_drift(self):
        diag = fourier_smoothing(4).diag

        def drift(t, x, u):
            return u[..., :1] + x * diag

        problem = diagonal_problem(diag, drift, K=diag.max().sqrt().item())
        report = probe_lipschitz(problem, 200, make_generator(1))
        assert report.passed
        assert report.statistic <= problem.K * (1 + 1e-9)

    def test_identity_drift_fails_on_high_mode(self):
        diag = fourier_smoothing(4).diag
        problem = diagonal_problem(diag, lambda t, x, u: x + 0 * u[..., :1], K=1.0)
        report = probe_lipschitz(problem, 200, make_generator(2))
        assert not report.passed
        assert report.statistic == pytest.approx(diag.min().item() ** -0.5, rel=1e-9)
        worst = report.details["worst_index"]
        d = report.witnesses["x"][worst] - report.witnesses["y"][worst]
        frequency = FourierTruncation(4).frequencies()[d.abs().argmax()]
        assert frequency.item() == 4


class TestProbeUniformModulus:
    @staticmethod
    def _controls(problem, n, seed):
        generator = make_generator(seed)
        lower, upper = problem.controls.lower, problem.controls.upper
        return [
            PiecewiseControl.uniform(0.0, 1.0, lower + (upper - lower) * torch.rand(8, 1, generator=generator, dtype=DTYPE))
            for _ in range(n)
        ]

    def test_rotation_dominates(self):
        problem = vintage_problem()
        basis = FourierTruncation(4)
        x = -basis.unit("const") + 10 * basis.unit("sin", 1)
        report = probe_uniform_modulus(problem, 0.0, x, self._controls(problem, 10, 0))
        assert report.passed
        assert report.statistic < 0.1
        assert (report.witnesses["envelope"].diff() >= 0).all()

    def test_control_independent_dynamics(self):
        problem = dataclasses.replace(vintage_problem(), drift=lambda t, x, u: torch.zeros_like(x))
        basis = FourierTruncation(4)
        report = probe_uniform_modulus(problem, 0.0, basis.unit("cos", 2), self._controls(problem, 4, 1))
        assert report.statistic == 0.0

    def test_scalar_bound(self):
        problem = scalar_problem(lambda t, x, u: u, a=-1.0)
        x = torch.tensor([2.0], dtype=DTYPE)
        report = probe_uniform_modulus(problem, 0.0, x, self._controls(problem, 6, 2))
        delta = report.witnesses["delta"]
        assert (report.witnesses["envelope"] <= 3.0 * delta + 1e-9).all()

    def test_needs_controls(self):
        with pytest.raises(ValueError, match="at least one control"):
            probe_uniform_modulus(scalar_toy_problem(), 0.0, torch.zeros(1), [])


if __name__ == "__main__":
    args, unknown = argparse.ArgumentParser().parse_known_args()
    pytest.main([__file__, "--capture", "no", "--exitfirst"] + unknown)
