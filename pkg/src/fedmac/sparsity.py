"""Smooth l1 surrogate, sparsity measurement and communication-bit accounting."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import kernels

LOG2 = math.log(2.0)

DEFAULT_RHO = 1e-4
DEFAULT_ZERO_TOL = 1e-3


@dataclass(frozen=True)
class SmoothL1Config:
    """Smoothing level of the log-cosh surrogate (``rho`` -> 0 recovers l1)."""

    rho: float = DEFAULT_RHO

    def __post_init__(self):
        if not (self.rho > 0.0 and math.isfinite(self.rho)):
            raise ValueError(f"rho must be positive and finite, got {self.rho!r}")


@dataclass(frozen=True)
class CommCostModel:
    bits_dense: int = 64
    bits_zero: int = 1
    index_bits_per_param: int = 1

    def __post_init__(self):
        for name in ("bits_dense", "bits_zero", "index_bits_per_param"):
            value = getattr(self, name)
            if int(value) != value or value < 1:
                raise ValueError(f"{name} must be an integer >= 1, got {value!r}")


def _as_vector(x) -> np.ndarray:
    x = np.ascontiguousarray(x, dtype=np.float64).reshape(-1)
    if not np.isfinite(x).all():
        raise ValueError("non-finite parameter")
    return x


def phi_rho(x, cfg: SmoothL1Config = SmoothL1Config()) -> float:
    """``rho * sum(log cosh(x / rho))``.

    Evaluated as ``||x||_1 - rho * sum(delta_n)`` with
    ``delta_n = log 2 - log1p(exp(-2|x_n|/rho))`` in ``[0, log 2]``. Both sums
    are correctly rounded (``math.fsum``), so the returned float satisfies
    ``fsum(|x|) - rho * (d * log 2) <= phi <= fsum(|x|)`` exactly, with no
    overflow for large ``|x|/rho``.
    """
    x = _as_vector(x)
    l1 = math.fsum(np.abs(x))
    excess = math.fsum(kernels.logcosh_excess(x, cfg.rho))
    return l1 - cfg.rho * excess


def grad_phi_rho(x, cfg: SmoothL1Config = SmoothL1Config()) -> np.ndarray:
    """Elementwise ``tanh(x / rho)``."""
    return kernels.tanh_scaled(_as_vector(x), cfg.rho)


def sparsity_fraction(x, zero_tol: float = DEFAULT_ZERO_TOL) -> float:
    """Fraction of entries with ``|x_n| > zero_tol`` (the non-zero rate)."""
    if zero_tol < 0:
        raise ValueError("zero_tol must be nonnegative")
    x = np.asarray(x).reshape(-1)
    if x.size == 0:
        raise ValueError("sparsity of an empty vector is undefined")
    return np.count_nonzero(np.abs(x) > zero_tol) / x.size


def round_comm_bits(n_params: int, sparsity: float, model: CommCostModel = CommCostModel()) -> int:
    """Bits for one upload + broadcast of an ``n_params`` model plus its zero-index mask.

    ``sparsity`` is the non-zero fraction; non-zeros cost ``bits_dense`` and
    zeros ``bits_zero`` in each direction.
    """
    if n_params <= 0:
        raise ValueError("n_params must be positive")
    if not 0.0 <= sparsity <= 1.0:
        raise ValueError(f"sparsity must lie in [0, 1], got {sparsity!r}")
    bits = (
        sparsity * n_params * 2 * model.bits_dense
        + (1.0 - sparsity) * n_params * 2 * model.bits_zero
        + n_params * model.index_bits_per_param
    )
    return int(round(bits))
