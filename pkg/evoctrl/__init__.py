# Copyright (c) evoctrl contributors.
#
# This source code is licensed under the MIT license found in the
# LICENSE file in the root directory of this source tree.

from evoctrl.convolution import (
    ConvolutionParams,
    EnvelopePoint,
    EnvelopeSearch,
    inf_convolve,
    lipschitz_minus2_probe,
    perturbed_hjb_residual,
    semiconvexity_probe,
    sup_convolve,
)
from evoctrl.dynamics import (
    chain_rule_residual,
    cost,
    integrate_mild,
    PiecewiseControl,
    Trajectory,
)
from evoctrl.hamiltonian import hamiltonian, HamiltonianResult, hjb_residual
from evoctrl.problem import (
    ControlProblem,
    ControlSet,
    make_problem,
    scalar_nonlinear_problem,
    scalar_toy_problem,
    Test1Fn,
    Test2Fn,
    vintage_problem,
)
from evoctrl.statespace import (
    FourierTruncation,
    norm_gamma,
    pair_Astar,
    rotation_generator,
    SmoothingOperator,
    SpectralOperator,
)
from evoctrl.synthesis import (
    suboptimality_check,
    superoptimality_gap,
    synthesize,
    synthesize_with_schedule,
    SynthesisConfig,
    SynthesisResult,
)
from evoctrl.utils import make_generator, ProbeReport, set_domain_check
from evoctrl.value import (
    brute_force_value,
    compute_G,
    ScalarField,
    vintage_feedback,
    vintage_value,
    vintage_value_field,
)
from evoctrl.verify import (
    CertificateSelectors,
    check_condmin,
    check_superdiff_membership,
    remliyo_residual,
)

try:
    from evoctrl.version import __version__
except ImportError:
    __version__ = None
