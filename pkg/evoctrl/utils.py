# Copyright (c) evoctrl contributors.
#
# This source code is licensed under the MIT license found in the
# LICENSE file in the root directory of this source tree.

from __future__ import annotations

import pickle
import time
from dataclasses import dataclass, field
from enum import Enum, auto
from functools import wraps
from pathlib import Path
from typing import Any, Callable, Mapping, Sequence, Union

import cloudpickle
import numpy as np
import torch
from tensordict import TensorDict

from evoctrl._contextlib import _DecoratorContextManager

__all__ = [
    "DTYPE",
    "CSV_FORMAT",
    "DomainCheckMode",
    "ProbeReport",
    "as_state",
    "as_time",
    "domain_check",
    "make_generator",
    "sample_ball",
    "sample_unit_vectors",
    "set_domain_check",
    "timeit",
    "write_csv",
]

DTYPE = torch.float64
CSV_FORMAT = "%.17g"

TensorLike = Union[torch.Tensor, float, int, Sequence[float]]


def as_state(x: TensorLike) -> torch.Tensor:
    """Casts ``x`` to a float64 tensor, checking that every entry is finite."""
    x = torch.as_tensor(x, dtype=DTYPE)
    if not torch.isfinite(x).all():
        raise ValueError(f"state contains non-finite entries: {x}")
    return x


def as_time(t: TensorLike) -> torch.Tensor:
    return torch.as_tensor(t, dtype=DTYPE)


def make_generator(seed: int) -> torch.Generator:
    """Returns a CPU generator seeded with ``seed``.

    Every sampling routine of the library draws from an explicit generator so
    that a config and its seed determine the outputs.
    """
    generator = torch.Generator()
    generator.manual_seed(int(seed))
    return generator


def sample_unit_vectors(
    n: int, dim: int, generator: torch.Generator | None = None
) -> torch.Tensor:
    """Draws ``n`` vectors uniformly on the unit sphere of R^dim."""
    z = torch.randn(n, dim, generator=generator, dtype=DTYPE)
    return z / z.norm(dim=-1, keepdim=True).clamp_min(1e-300)


def sample_ball(
    n: int, dim: int, radius: float, generator: torch.Generator | None = None
) -> torch.Tensor:
    """Draws ``n`` points uniformly in the centered ball of radius ``radius``."""
    direction = sample_unit_vectors(n, dim, generator)
    r = torch.rand(n, 1, generator=generator, dtype=DTYPE) ** (1.0 / dim)
    return radius * r * direction


class DomainCheckMode(Enum):
    RAISE = auto()
    WARN = auto()
    IGNORE = auto()

    @classmethod
    def from_str(cls, mode_str: str) -> DomainCheckMode:
        """Return the mode with name matched to the provided string (case insensitive)."""
        for member in cls:
            if member.name == mode_str.upper():
                return member
        raise ValueError(f"The provided domain check mode {mode_str} is unsupported!")


_DOMAIN_CHECK: DomainCheckMode = DomainCheckMode.RAISE


def domain_check() -> DomainCheckMode:
    """Returns what happens when a vector falls outside the D(A*) budget."""
    return _DOMAIN_CHECK


class set_domain_check(_DecoratorContextManager):
    """Sets how D(A*) budget violations are handled.

    Args:
        mode (str or DomainCheckMode): one of ``"raise"`` (default behaviour,
            a ``ValueError`` is raised), ``"warn"`` (a ``UserWarning`` is
            emitted and the pairing is computed anyway) or ``"ignore"``.

    Examples:
        >>> from evoctrl.statespace import pair_Astar, rotation_generator
        >>> A = rotation_generator(4, domain_budget=1.0)
        >>> p = torch.zeros(9, dtype=torch.float64); p[8] = 1.0
        >>> with set_domain_check("ignore"):
        ...     print(pair_Astar(A, p, torch.zeros(9)))
        tensor(0., dtype=torch.float64)
    """

    def __init__(self, mode: str | DomainCheckMode = DomainCheckMode.RAISE) -> None:
        super().__init__()
        if isinstance(mode, str):
            mode = DomainCheckMode.from_str(mode)
        self.mode = mode

    def clone(self) -> set_domain_check:
        return self.__class__(self.mode)

    def __enter__(self) -> None:
        global _DOMAIN_CHECK
        self.prev = _DOMAIN_CHECK
        _DOMAIN_CHECK = self.mode

    def __exit__(self, exc_type: Any, exc_value: Any, traceback: Any) -> None:
        global _DOMAIN_CHECK
        _DOMAIN_CHECK = self.prev


@dataclass
class ProbeReport:
    """Outcome of a numeric probe or check.

    Args:
        name (str): the probe that produced the report.
        passed (bool): verdict of the probe against its tolerance.
        statistic (float): the headline number (worst violation, empirical
            constant, ...).
        witnesses (TensorDict): per-sample data with ``batch_size=[samples]``.
        details (dict): free-form scalar details (tolerances, fitted constants).
    """

    name: str
    passed: bool
    statistic: float
    witnesses: TensorDict
    details: dict = field(default_factory=dict)

    def to_csv(self, path: str | Path) -> None:
        write_csv(path, self.witnesses)

    def __bool__(self) -> bool:
        return bool(self.passed)


def _columns(
    table: TensorDict | Mapping[str, torch.Tensor], keys: Sequence[str] | None
) -> tuple[list[str], np.ndarray]:
    if keys is None:
        keys = list(table.keys())
    names = []
    blocks = []
    rows = None
    for key in keys:
        value = torch.as_tensor(table[key])
        if rows is None:
            rows = value.shape[0] if value.ndim else 1
        value = value.reshape(rows, -1).to(DTYPE)
        if value.shape[-1] == 1:
            names.append(key)
        else:
            names.extend(f"{key}_{i + 1}" for i in range(value.shape[-1]))
        blocks.append(value.numpy())
    if not blocks:
        return names, np.zeros((0, 0))
    return names, np.concatenate(blocks, axis=-1)


def write_csv(
    path: str | Path,
    table: TensorDict | Mapping[str, torch.Tensor],
    keys: Sequence[str] | None = None,
) -> None:
    """Writes a table of equally long columns as CSV with 17 significant digits.

    Multi-dimensional entries are flattened into ``name_1 ... name_k`` columns.
    Column order follows ``keys`` (or the insertion order of ``table``).
    """
    names, data = _columns(table, keys)
    np.savetxt(
        str(path),
        data,
        delimiter=",",
        header=",".join(names),
        comments="",
        fmt=CSV_FORMAT,
    )


class _CloudpickleWrapper:
    """Ships closures (problem callables) to spawned worker processes."""

    def __init__(self, obj: Any) -> None:
        self.obj = obj

    def __getstate__(self) -> bytes:
        return cloudpickle.dumps(self.obj)

    def __setstate__(self, state: bytes) -> None:
        self.obj = pickle.loads(state)

    def __call__(self, *args: Any, **kwargs: Any) -> Any:
        return self.obj(*args, **kwargs)


class timeit:
    """A small decorator / context manager accumulating wall time per name."""

    _REG: dict[str, list] = {}

    def __init__(self, name: str) -> None:
        self.name = name

    def __call__(self, fn: Callable) -> Callable:
        @wraps(fn)
        def decorated_fn(*args, **kwargs):
            with self:
                return fn(*args, **kwargs)

        return decorated_fn

    def __enter__(self) -> timeit:
        self.t0 = time.perf_counter()
        return self

    def __exit__(self, exc_type, exc_val, exc_tb) -> None:
        self.elapsed = time.perf_counter() - self.t0
        val = self._REG.setdefault(self.name, [0.0, 0.0, 0])
        count = val[2]
        n = count + 1
        val[0] = val[0] * (count / n) + self.elapsed / n
        val[1] += self.elapsed
        val[2] = n

    @staticmethod
    def total(name: str) -> float:
        return timeit._REG.get(name, [0.0, 0.0, 0])[1]

    @staticmethod
    def erase() -> None:
        for k in timeit._REG:
            timeit._REG[k] = [0.0, 0.0, 0]
