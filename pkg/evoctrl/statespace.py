# Copyright (c) evoctrl contributors.
#
# This source code is licensed under the MIT license found in the
# LICENSE file in the root directory of this source tree.

"""Spectral truncation of the state space and the operators acting on it.

States are coefficient vectors with respect to the real Fourier basis
``[1, √2cos(2πs), √2sin(2πs), ..., √2cos(2πns), √2sin(2πns)]`` of L²(0, 1)
(or any other orthonormal basis in which the generator is block diagonal).
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Callable

import torch
from tensordict import TensorDict

from evoctrl.utils import (
    as_state,
    domain_check,
    DomainCheckMode,
    DTYPE,
    ProbeReport,
    sample_unit_vectors,
)

__all__ = [
    "FourierTruncation",
    "SmoothingOperator",
    "SpectralOperator",
    "apply_semigroup",
    "check_B_compatibility",
    "fourier_smoothing",
    "norm_gamma",
    "pair_Astar",
    "rotation_generator",
]


class FourierTruncation:
    """Real Fourier basis truncated to ``n_modes`` sine/cosine pairs.

    Args:
        n_modes (int): number of frequencies kept; the dimension is
            ``N = 2 * n_modes + 1``.

    Examples:
        >>> basis = FourierTruncation(4)
        >>> basis.N
        9
        >>> basis.index("sin", 1)
        2
    """

    def __init__(self, n_modes: int = 4) -> None:
        if n_modes < 0:
            raise ValueError(f"n_modes must be non-negative, got {n_modes}")
        self.n_modes = int(n_modes)

    @property
    def N(self) -> int:
        return 2 * self.n_modes + 1

    @property
    def labels(self) -> list[str]:
        labels = ["const"]
        for k in range(1, self.n_modes + 1):
            labels += [f"cos{k}", f"sin{k}"]
        return labels

    def index(self, kind: str, k: int = 0) -> int:
        if kind == "const":
            return 0
        if not 1 <= k <= self.n_modes:
            raise ValueError(f"frequency {k} outside 1..{self.n_modes}")
        if kind == "cos":
            return 2 * k - 1
        if kind == "sin":
            return 2 * k
        raise ValueError(f"unknown basis function kind {kind}")

    def unit(self, kind: str, k: int = 0) -> torch.Tensor:
        e = torch.zeros(self.N, dtype=DTYPE)
        e[self.index(kind, k)] = 1.0
        return e

    def frequencies(self) -> torch.Tensor:
        """Frequency of each coordinate (0 for the constant)."""
        k = torch.arange(1, self.n_modes + 1, dtype=DTYPE)
        return torch.cat([torch.zeros(1, dtype=DTYPE), k.repeat_interleave(2)])

    def basis_values(self, r: torch.Tensor) -> torch.Tensor:
        """Evaluates all basis functions at the points ``r`` (shape ``[..., N]``)."""
        r = torch.as_tensor(r, dtype=DTYPE)[..., None]
        k = torch.arange(1, self.n_modes + 1, dtype=DTYPE)
        angle = 2 * math.pi * k * r
        pairs = torch.stack([torch.cos(angle), torch.sin(angle)], -1) * math.sqrt(2)
        return torch.cat([torch.ones_like(r), pairs.flatten(-2, -1)], -1)

    def evaluate(self, coeffs: torch.Tensor, r: torch.Tensor) -> torch.Tensor:
        """Reconstructs the function with coefficients ``coeffs`` at points ``r``."""
        return (self.basis_values(r) * torch.as_tensor(coeffs, dtype=DTYPE)).sum(-1)

    def project(
        self, fn: Callable[[torch.Tensor], torch.Tensor], n_quad: int = 4096
    ) -> torch.Tensor:
        """Coefficients of a 1-periodic function by the midpoint rule on ``n_quad`` nodes."""
        r = (torch.arange(n_quad, dtype=DTYPE) + 0.5) / n_quad
        values = torch.as_tensor(fn(r), dtype=DTYPE)
        return (self.basis_values(r) * values[:, None]).mean(0)


@dataclass(frozen=True, eq=False)
class SpectralOperator:
    """A block-diagonal generator A with 1×1 and 2×2 blocks.

    Args:
        blocks (sequence of tensors): the diagonal blocks, in basis order.
        domain_budget (float, optional): bound on ‖A*p‖ above which ``p`` is
            treated as lying outside D(A*). ``None`` disables the check.
    """

    blocks: tuple
    domain_budget: float | None = None

    def __post_init__(self) -> None:
        blocks = tuple(torch.as_tensor(b, dtype=DTYPE).reshape(_square(b)) for b in self.blocks)
        for i, b in enumerate(blocks):
            if b.shape not in ((1, 1), (2, 2)):
                raise ValueError(f"block {i} has shape {tuple(b.shape)}, expected 1x1 or 2x2")
            if not torch.isfinite(b).all():
                raise ValueError(f"block {i} has non-finite entries")
        if self.domain_budget is not None and self.domain_budget <= 0:
            raise ValueError(f"domain_budget must be positive, got {self.domain_budget}")
        object.__setattr__(self, "blocks", blocks)
        object.__setattr__(self, "matrix", torch.block_diag(*blocks))

    @property
    def dim(self) -> int:
        return self.matrix.shape[0]

    @property
    def block_sizes(self) -> list[int]:
        return [b.shape[0] for b in self.blocks]

    @property
    def block_norms(self) -> torch.Tensor:
        """Spectral norm of each block, the decay profile used for D(A*) membership."""
        return torch.stack([torch.linalg.matrix_norm(b, ord=2) for b in self.blocks])

    def is_dissipative(self, tolerance: float = 1e-12) -> bool:
        for b in self.blocks:
            sym = 0.5 * (b + b.T)
            if torch.linalg.eigvalsh(sym).max() > tolerance:
                return False
        return True

    def apply(self, x: torch.Tensor) -> torch.Tensor:
        return x @ self.matrix.T

    def adjoint_apply(self, p: torch.Tensor) -> torch.Tensor:
        return p @ self.matrix

    def semigroup_matrix(self, s: float) -> torch.Tensor:
        """Dense matrix of e^{sA}, exponentiated block by block."""
        if s < 0:
            raise ValueError(f"semigroup time must be non-negative, got {s}")
        return torch.block_diag(*[torch.linalg.matrix_exp(b * s) for b in self.blocks])

    def in_domain(self, p: torch.Tensor) -> torch.Tensor:
        if self.domain_budget is None:
            return torch.ones(p.shape[:-1], dtype=torch.bool)
        return self.adjoint_apply(p).norm(dim=-1) <= self.domain_budget

    def check_domain(self, p: torch.Tensor) -> None:
        """Flags ``p`` outside the D(A*) budget according to :func:`~evoctrl.utils.domain_check`."""
        mode = domain_check()
        if self.domain_budget is None or mode is DomainCheckMode.IGNORE:
            return
        inside = self.in_domain(p)
        if inside.all():
            return
        worst = self.adjoint_apply(p).norm(dim=-1).max().item()
        msg = (
            f"vector outside the D(A*) budget: ||A*p|| = {worst:.6g} > "
            f"{self.domain_budget:.6g}"
        )
        if mode is DomainCheckMode.RAISE:
            raise ValueError(msg)
        warnings.warn(msg, category=UserWarning, stacklevel=3)

    def to_dict(self) -> dict:
        return {
            "blocks": [b.tolist() for b in self.blocks],
            "domain_budget": self.domain_budget,
        }

    @classmethod
    def from_dict(cls, cfg: dict) -> SpectralOperator:
        if "blocks" not in cfg:
            raise KeyError("operator config misses the 'blocks' field")
        return cls(tuple(cfg["blocks"]), domain_budget=cfg.get("domain_budget"))


def _square(b) -> tuple[int, int]:
    n = torch.as_tensor(b).numel()
    side = int(round(math.sqrt(n)))
    if side * side != n:
        raise ValueError(f"operator block with {n} entries is not square")
    return side, side


@dataclass(frozen=True, eq=False)
class SmoothingOperator:
    """A positive self-adjoint operator B, diagonal in the state basis.

    Args:
        diag (tensor): eigenvalues b_1..b_N, all positive.
        c0 (float): the non-positive constant of the compatibility condition
            ⟨(A*B + c0·B)x, x⟩ ≤ 0.
    """

    diag: torch.Tensor
    c0: float = 0.0

    def __post_init__(self) -> None:
        diag = torch.as_tensor(self.diag, dtype=DTYPE).reshape(-1)
        if not torch.isfinite(diag).all() or (diag <= 0).any():
            raise ValueError(f"smoothing operator needs positive finite eigenvalues, got {diag}")
        if self.c0 > 0:
            raise ValueError(f"c0 must be non-positive, got {self.c0}")
        object.__setattr__(self, "diag", diag)

    @property
    def dim(self) -> int:
        return self.diag.shape[0]

    @property
    def norm(self) -> float:
        return self.diag.max().item()

    @property
    def matrix(self) -> torch.Tensor:
        return torch.diag(self.diag)

    def apply(self, x: torch.Tensor) -> torch.Tensor:
        return x * self.diag

    def power_apply(self, x: torch.Tensor, gamma: float) -> torch.Tensor:
        return x * self.diag**gamma

    def to_dict(self) -> dict:
        return {"diag": self.diag.tolist(), "c0": self.c0}

    @classmethod
    def from_dict(cls, cfg: dict) -> SmoothingOperator:
        if "diag" not in cfg:
            raise KeyError("smoothing config misses the 'diag' field")
        return cls(torch.as_tensor(cfg["diag"], dtype=DTYPE), c0=float(cfg.get("c0", 0.0)))


def rotation_generator(
    n_modes: int = 4, damping: float = 0.0, domain_budget: float | None = None
) -> SpectralOperator:
    """The generator of the periodic shift ``e^{sA}f(r) = f(r + s)`` on L²(0, 1).

    With ``damping`` μ ≥ 0 every block is shifted by −μ·I, so the constant
    mode becomes an eigenvector of A* with eigenvalue −μ.

    Examples:
        >>> A = rotation_generator(1)
        >>> A.matrix
        tensor([[ 0.0000,  0.0000,  0.0000],
                [ 0.0000,  0.0000,  6.2832],
                [ 0.0000, -6.2832,  0.0000]], dtype=torch.float64)
    """
    if damping < 0:
        raise ValueError(f"damping must be non-negative, got {damping}")
    blocks = [torch.tensor([[-damping]], dtype=DTYPE)]
    for k in range(1, n_modes + 1):
        w = 2 * math.pi * k
        blocks.append(torch.tensor([[-damping, w], [-w, -damping]], dtype=DTYPE))
    return SpectralOperator(tuple(blocks), domain_budget=domain_budget)


def fourier_smoothing(n_modes: int = 4, c0: float = 0.0) -> SmoothingOperator:
    """B = (I − Δ)^{-1/2} in the real Fourier basis."""
    k = FourierTruncation(n_modes).frequencies()
    return SmoothingOperator((1 + 4 * math.pi**2 * k**2) ** -0.5, c0=c0)


def norm_gamma(B: SmoothingOperator, x: torch.Tensor, gamma: float) -> torch.Tensor:
    """The weighted norm ‖x‖_{−γ} = ‖B^{γ/2}x‖.

    Examples:
        >>> B = fourier_smoothing(1)
        >>> norm_gamma(B, torch.tensor([0.0, 1.0, 0.0]), 1)
        tensor(0.3965, dtype=torch.float64)
    """
    x = torch.as_tensor(x, dtype=DTYPE)
    return (B.diag**gamma * x**2).sum(-1).sqrt()


def apply_semigroup(A: SpectralOperator, s: float, x: torch.Tensor) -> torch.Tensor:
    """Returns e^{sA}x."""
    return as_state(x) @ A.semigroup_matrix(float(s)).T


def pair_Astar(A: SpectralOperator, p: torch.Tensor, x: torch.Tensor) -> torch.Tensor:
    """Returns ⟨A*p, x⟩ for ``p`` in the D(A*) budget of ``A``."""
    p = torch.as_tensor(p, dtype=DTYPE)
    x = torch.as_tensor(x, dtype=DTYPE)
    A.check_domain(p)
    return (A.adjoint_apply(p) * x).sum(-1)


def check_B_compatibility(
    A: SpectralOperator,
    B: SmoothingOperator,
    samples: int,
    generator: torch.Generator | None = None,
    tolerance: float = 1e-12,
) -> ProbeReport:
    """Samples the quadratic form ⟨(A*B + c0·B)x, x⟩ on random unit vectors.

    The report passes when the largest sampled value is below ``tolerance``.
    """
    if samples < 1:
        raise ValueError(f"samples must be positive, got {samples}")
    if A.dim != B.dim:
        raise ValueError(f"operator dimensions differ: A is {A.dim}, B is {B.dim}")
    form_matrix = A.matrix.T @ B.matrix + B.c0 * B.matrix
    x = sample_unit_vectors(samples, A.dim, generator)
    form = ((x @ form_matrix.T) * x).sum(-1)
    violation = max(form.max().item(), 0.0)
    return ProbeReport(
        name="B_compatibility",
        passed=violation <= tolerance,
        statistic=violation,
        witnesses=TensorDict({"x": x, "form": form}, batch_size=[samples]),
        details={"tolerance": tolerance, "c0": B.c0},
    )
