"""Path-averaged Hessian state, Hutchinson diagonals, update policies.

Averages are maintained either as running means (uniform weights) or as
bias-corrected exponential moving averages (decaying weights); both
expose weights that are nonnegative and sum to one. Full-matrix state
supports a plain average (made positive definite on demand) and an
absolute-value average (each incoming matrix replaced by its spectral
absolute value, floored by a fixed shift when preconditioning). Diagonal
state averages ``|D|`` (p=1) or ``D^2`` (p=2), exposing the p-th root.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
from numpy.typing import NDArray

from .linalg import matrix_abs, pd_modify, spd_solve

__all__ = [
    "FullAverageState",
    "DiagAverageState",
    "HutchinsonConfig",
    "UpdateFrequencyPolicy",
    "decaying_step",
    "hutchinson_diag",
]


def decaying_step(prev_corrected: NDArray | float, d_new: NDArray | float, beta2: float, k: int):
    """One bias-corrected EMA step.

    Given the corrected average after ``k-1`` terms, returns the corrected
    average after folding in term ``k`` (1-based): with the raw recurrence
    ``S_k = beta2 S_{k-1} + (1 - beta2) D_k`` and ``S_0 = 0``, the
    corrected value is ``S_k / (1 - beta2^k)``. The implied weights on
    ``D_1..D_k`` are nonnegative and sum to one.
    """
    if not 0 < beta2 < 1:
        raise ValueError(f"beta2 must lie in (0, 1), got {beta2}")
    if k < 1:
        raise ValueError("k must be >= 1")
    if k == 1:
        s_prev = 0.0
    else:
        s_prev = np.asarray(prev_corrected) * (1.0 - beta2 ** (k - 1))
    s_new = beta2 * s_prev + (1.0 - beta2) * np.asarray(d_new)
    return s_new / (1.0 - beta2**k)


class _Accumulator:
    """Uniform running mean or raw EMA with lazy bias correction."""

    def __init__(self, decay: Optional[float]):
        if decay is not None and not 0 < decay < 1:
            raise ValueError(f"decay must lie in (0, 1), got {decay}")
        self.decay = decay
        self.count = 0
        self._acc: Optional[NDArray] = None

    def update(self, value: NDArray) -> None:
        value = np.asarray(value, dtype=float)
        if self._acc is None:
            self._acc = np.zeros_like(value)
        self.count += 1
        if self.decay is None:
            self._acc += (value - self._acc) / self.count
        else:
            self._acc = self.decay * self._acc + (1.0 - self.decay) * value

    def value(self) -> NDArray:
        if self._acc is None or self.count == 0:
            raise ValueError("accumulator has no updates yet")
        if self.decay is None:
            return self._acc
        return self._acc / (1.0 - self.decay**self.count)


class FullAverageState:
    """Running average of dense symmetric Hessian estimates.

    ``variant="plain"`` averages the matrices as given and makes the
    result positive definite via spectral modification at precondition
    time. ``variant="abs"`` averages spectral absolute values and adds a
    constant floor instead.
    """

    def __init__(self, dim: int, decay: Optional[float] = None, variant: str = "plain"):
        if variant not in ("plain", "abs"):
            raise ValueError(f"variant must be 'plain' or 'abs', got {variant!r}")
        self.dim = dim
        self.variant = variant
        self._acc = _Accumulator(decay)

    @property
    def count(self) -> int:
        return self._acc.count

    def update(self, h_new: NDArray) -> None:
        h_new = np.asarray(h_new, dtype=float)
        if h_new.shape != (self.dim, self.dim):
            raise ValueError(f"expected shape {(self.dim, self.dim)}, got {h_new.shape}")
        if self.variant == "abs":
            h_new = matrix_abs(h_new)
        self._acc.update(h_new)

    def matrix(self) -> NDArray:
        return self._acc.value()

    def modified(self, floor: float) -> tuple[NDArray, bool]:
        """The positive-definite matrix actually used for solves."""
        if self.variant == "abs":
            return self.matrix() + floor * np.eye(self.dim), True
        return pd_modify(self.matrix(), floor)

    def precondition(self, g: NDArray, floor: float) -> NDArray:
        h, _ = self.modified(floor)
        return spd_solve(h, g)


class DiagAverageState:
    """Running l^p average of diagonal Hessian estimates (p = 1 or 2)."""

    def __init__(self, dim: int, p: int = 1, decay: Optional[float] = None):
        if p not in (1, 2):
            raise ValueError(f"p must be 1 or 2, got {p}")
        self.dim = dim
        self.p = p
        self._acc = _Accumulator(decay)

    @property
    def count(self) -> int:
        return self._acc.count

    def update(self, d_new: NDArray) -> None:
        d_new = np.asarray(d_new, dtype=float)
        if d_new.shape != (self.dim,):
            raise ValueError(f"expected shape {(self.dim,)}, got {d_new.shape}")
        self._acc.update(np.abs(d_new) if self.p == 1 else d_new * d_new)

    def preconditioner(self) -> NDArray:
        acc = self._acc.value()
        return acc if self.p == 1 else np.sqrt(acc)

    def precondition(self, g: NDArray, floor: float) -> NDArray:
        return np.asarray(g, dtype=float) / (self.preconditioner() + floor)


@dataclass
class HutchinsonConfig:
    """Probe count and stream for randomized diagonal estimation."""

    rank: int = 1
    rng: Optional[np.random.Generator] = None

    def __post_init__(self) -> None:
        if self.rank < 1:
            raise ValueError("rank must be >= 1")


def hutchinson_diag(hvp: Callable[[NDArray], NDArray], dim: int, config: HutchinsonConfig) -> NDArray:
    """Unbiased randomized estimate of ``diag(H)`` from ``rank`` products.

    Draws Rademacher probes ``z`` and averages ``z * (H z)``; since
    ``z_i^2 = 1`` each entry is exactly unbiased, and the estimate is
    exact for diagonal ``H`` at any rank. Probes are reduced in draw
    order, so results are deterministic given the stream.
    """
    rng = config.rng if config.rng is not None else np.random.default_rng(0)
    z = rng.integers(0, 2, size=(dim, config.rank)).astype(float) * 2.0 - 1.0
    hz = hvp(z)
    if hz.shape != z.shape:
        raise ValueError(f"hvp returned shape {hz.shape}, expected {z.shape}")
    if not np.all(np.isfinite(hz)):
        raise ValueError("hvp returned non-finite values")
    return np.mean(z * hz, axis=1)


@dataclass(frozen=True)
class UpdateFrequencyPolicy:
    """When to recompute the Hessian estimate.

    Updates happen at every iteration below ``warmup``; afterwards every
    ``hf``-th iteration (counted from the end of warmup).
    """

    warmup: int = 0
    hf: int = 1

    def __post_init__(self) -> None:
        if self.hf < 1:
            raise ValueError("hf must be >= 1")
        if self.warmup < 0:
            raise ValueError("warmup must be >= 0")

    def should_update(self, iteration: int) -> bool:
        if iteration < self.warmup:
            return True
        return (iteration - self.warmup) % self.hf == 0
