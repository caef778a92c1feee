# Copyright (c) evoctrl contributors.
#
# This source code is licensed under the MIT license found in the
# LICENSE file in the root directory of this source tree.

import argparse

import pytest
import torch
from hypothesis import given, settings, strategies as st

from _utils_internal import alpha_state, nondegenerate, scalar_problem
from evoctrl.hamiltonian import hamiltonian, HamiltonianResult, hjb_residual
from evoctrl.problem import ControlProblem, ControlSet, scalar_toy_problem, vintage_problem
from evoctrl.statespace import SmoothingOperator, SpectralOperator
from evoctrl.utils import DTYPE, make_generator


def beta_direction(problem, value):
    """A costate p with ⟨β,p⟩ = value."""
    beta = problem.params.beta
    return value * beta / (beta**2).sum()


def planar_problem(grid_size=11):
    def drift(t, x, u):
        return u

    def running_cost(t, x, u):
        return 0.5 * (u**2).sum(-1)

    def terminal_cost(x):
        return torch.zeros(x.shape[:-1], dtype=DTYPE)

    return ControlProblem(
        name="planar",
        A=SpectralOperator(([[0.0]], [[0.0]])),
        B=SmoothingOperator(torch.ones(2)),
        horizon=1.0,
        controls=ControlSet(-torch.ones(2), torch.ones(2), grid_size),
        drift=drift,
        running_cost=running_cost,
        terminal_cost=terminal_cost,
    )


class TestHamiltonian:
    def test_interior_minimum(self):
        problem = vintage_problem()
        res = hamiltonian(problem, 0.0, alpha_state(problem, -2.0), beta_direction(problem, 0.5))
        assert isinstance(res, HamiltonianResult)
        assert res.value.item() == pytest.approx(-2.125, abs=1e-12)
        assert res.argmin_u.item() == pytest.approx(-0.5, abs=1e-12)
        assert res.interior.item()

    def test_boundary_minimum(self):
        problem = vintage_problem()
        x = alpha_state(problem, 1.5)
        res = hamiltonian(problem, 0.0, x, beta_direction(problem, 3.0))
        assert res.argmin_u.item() == -1.0
        assert res.value.item() == pytest.approx(-1.5 - 2.5, abs=1e-12)
        assert not res.interior.item()

    def test_zero_costate(self):
        problem = vintage_problem()
        res = hamiltonian(problem, 0.0, torch.zeros(9), torch.zeros(9))
        assert res.value.item() == pytest.approx(0.0, abs=1e-12)
        assert res.argmin_u.item() == pytest.approx(0.0, abs=1e-12)

    def test_refinement_between_grid_points(self):
        problem = scalar_toy_problem(grid_size=5)
        p = torch.tensor([0.3], dtype=DTYPE)
        coarse = hamiltonian(problem, 0.0, torch.zeros(1), p, refine=False)
        assert coarse.argmin_u.item() == -0.5
        assert coarse.value.item() == pytest.approx(-0.025)
        fine = hamiltonian(problem, 0.0, torch.zeros(1), p)
        assert fine.argmin_u.item() == pytest.approx(-0.3, abs=1e-12)
        assert fine.value.item() == pytest.approx(-0.045, abs=1e-12)

    def test_multidimensional_controls(self):
        problem = planar_problem()
        p = torch.tensor([0.33, -0.47], dtype=DTYPE)
        res = hamiltonian(problem, 0.0, torch.zeros(2), p)
        torch.testing.assert_close(res.argmin_u, -p, atol=1e-12, rtol=0)
        assert res.value.item() == pytest.approx(-0.5 * (p**2).sum().item(), abs=1e-12)

    def test_ties_resolve_to_first_grid_point(self):
        problem = scalar_problem(lambda t, x, u: 0 * u, running_cost=lambda t, x, u: 0 * u.sum(-1))
        res = hamiltonian(problem, 0.0, torch.zeros(1), torch.ones(1))
        assert res.argmin_u.item() == -1.0
        assert not res.interior.item()

    def test_batched(self):
        problem = nondegenerate()
        generator = make_generator(0)
        x = torch.randn(5, 9, generator=generator, dtype=DTYPE)
        p = torch.randn(5, 9, generator=generator, dtype=DTYPE)
        t = torch.linspace(0, 1, 5, dtype=DTYPE)
        res = hamiltonian(problem, t, x, p)
        assert res.batch_size == torch.Size([5])
        assert res.argmin_u.shape == (5, 1)
        for i in range(5):
            single = hamiltonian(problem, t[i], x[i], p[i])
            torch.testing.assert_close(res.value[i], single.value)

    @pytest.mark.parametrize("refine,tolerance", [(False, 1e-12), (True, 1e-4)])
    def test_concave_in_costate(self, refine, tolerance):
        problem = nondegenerate()
        generator = make_generator(1)
        x = torch.randn(64, 9, generator=generator, dtype=DTYPE)
        p1 = 2 * torch.randn(64, 9, generator=generator, dtype=DTYPE)
        p2 = 2 * torch.randn(64, 9, generator=generator, dtype=DTYPE)
        theta = torch.rand(64, 1, generator=generator, dtype=DTYPE)
        mixed = hamiltonian(problem, 0.5, x, theta * p1 + (1 - theta) * p2, refine=refine).value
        ends = theta[:, 0] * hamiltonian(problem, 0.5, x, p1, refine=refine).value + (
            1 - theta[:, 0]
        ) * hamiltonian(problem, 0.5, x, p2, refine=refine).value
        assert (mixed >= ends - tolerance).all()

    @settings(deadline=None, max_examples=25)
    @given(
        a=st.floats(-3.0, 3.0),
        b=st.floats(-3.0, 3.0),
        theta=st.floats(0.0, 1.0),
        y=st.floats(-2.0, 2.0),
    )
    def test_concave_along_beta(self, a, b, theta, y):
        problem = vintage_problem()
        x = alpha_state(problem, y)
        H = [
            hamiltonian(problem, 0.0, x, beta_direction(problem, v), refine=False).value.item()
            for v in (a, b, theta * a + (1 - theta) * b)
        ]
        assert H[2] >= theta * H[0] + (1 - theta) * H[1] - 1e-12


class TestHJBResidual:
    @pytest.mark.parametrize("t", [0.0, 0.3, 0.75])
    def test_vintage_smooth_branch(self, t):
        problem = nondegenerate()
        x = alpha_state(problem, -0.8, tail=0.3)
        G = 1.0 - t
        alpha = problem.params.alpha
        w_t = 0.8 + 0.5 * G**2
        residual = hjb_residual(problem, w_t, G * alpha, t, x)
        assert abs(residual.item()) <= 1e-9

    def test_constant_field_on_hyperplane(self):
        problem = vintage_problem()
        residual = hjb_residual(problem, 0.0, torch.zeros(9), 0.4, alpha_state(problem, 0.0, tail=1.0))
        assert residual.item() == pytest.approx(0.0, abs=1e-12)

    def test_scalar_toy_value(self):
        problem = scalar_toy_problem()
        for t, x in ((0.0, 0.0), (0.5, -0.3), (0.9, 2.0)):
            residual = hjb_residual(problem, 0.5, torch.ones(1), t, torch.tensor([x], dtype=DTYPE))
            assert abs(residual.item()) <= 1e-12


if __name__ == "__main__":
    args, unknown = argparse.ArgumentParser().parse_known_args()
    pytest.main([__file__, "--capture", "no", "--exitfirst"] + unknown)
