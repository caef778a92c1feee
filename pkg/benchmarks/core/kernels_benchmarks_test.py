# Copyright (c) evoctrl contributors.
#
# This source code is licensed under the MIT license found in the
# LICENSE file in the root directory of this source tree.

import pytest
import torch

from evoctrl import (
    ConvolutionParams,
    hamiltonian,
    inf_convolve,
    integrate_mild,
    PiecewiseControl,
    synthesize,
    SynthesisConfig,
    vintage_problem,
    vintage_value_field,
)
from evoctrl.utils import DTYPE
from evoctrl.value import brute_force_value, vintage_feedback_control


@pytest.fixture
def problem():
    return vintage_problem(n_modes=4, coupling=1.0)


@pytest.fixture
def x0(problem):
    x = torch.zeros(problem.dim, dtype=DTYPE)
    x[0] = -1.0
    x[2] = 0.3
    return x


@pytest.fixture
def params():
    return ConvolutionParams(lambda_=1e-12, epsilon=1e-2, beta=1e-4)


@pytest.mark.parametrize("batch", [1, 64, 1024])
def test_hamiltonian(benchmark, problem, batch):
    x = torch.randn(batch, problem.dim, dtype=DTYPE)
    p = torch.randn(batch, problem.dim, dtype=DTYPE)
    benchmark.pedantic(hamiltonian, args=(problem, 0.3, x, p), iterations=10, rounds=10)


def test_integrate_constant(benchmark, problem, x0):
    u = PiecewiseControl.constant([0.5], 0.0, 1.0)
    benchmark.pedantic(integrate_mild, args=(problem, 0.0, x0, u), kwargs={"dt": 1e-3}, iterations=1, rounds=10)


def test_integrate_feedback(benchmark, problem, x0):
    u = vintage_feedback_control(problem, 0.0, x0, 200, dt=1e-3)
    benchmark.pedantic(integrate_mild, args=(problem, 0.0, x0, u), kwargs={"dt": 1e-3}, iterations=1, rounds=10)


def test_inf_convolve(benchmark, problem, x0, params):
    W = vintage_value_field(problem)
    benchmark.pedantic(inf_convolve, args=(problem, W, params, 0.3, x0), iterations=1, rounds=5)


def test_synthesize(benchmark, problem, x0, params):
    W = vintage_value_field(problem)
    config = SynthesisConfig(window=0.5, n=10, params=params)
    benchmark.pedantic(synthesize, args=(problem, W, 0.0, x0, config), iterations=1, rounds=3)


def test_brute_force(benchmark, problem, x0):
    grid = torch.tensor([-1.0, 0.0, 1.0], dtype=DTYPE)
    benchmark.pedantic(brute_force_value, args=(problem, 0.0, x0, 5, grid), iterations=1, rounds=3)
