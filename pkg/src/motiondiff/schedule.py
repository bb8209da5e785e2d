"""Linear variance schedule and the closed-form marginal coefficients."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-step tables for k = 1..K, stored 0-based (entry k-1 is step k)."""

    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray

    @property
    def K(self) -> int:
        return len(self.betas)

    def _check(self, k: int) -> int:
        if not 1 <= k <= self.K:
            raise IndexError(f"diffusion step {k} out of range 1..{self.K}")
        return k - 1

    def beta(self, k: int) -> float:
        return float(self.betas[self._check(k)])

    def alpha(self, k: int) -> float:
        return float(self.alphas[self._check(k)])

    def alpha_bar(self, k: int) -> float:
        return float(self.alpha_bars[self._check(k)])


def build_linear_schedule(K: int = 100, beta_1: float = 1e-4, beta_K: float = 0.05) -> NoiseSchedule:
    if K < 2:
        raise ValueError(f"K must be >= 2, got {K}")
    if not (0.0 < beta_1 < 1.0 and 0.0 < beta_K < 1.0):
        raise ValueError(f"betas must lie in (0, 1), got {beta_1}, {beta_K}")
    if beta_1 > beta_K:
        raise ValueError(f"beta_1={beta_1} exceeds beta_K={beta_K}")
    k = np.arange(K, dtype=np.float64)
    betas = beta_1 + k / (K - 1) * (beta_K - beta_1)
    betas[-1] = beta_K
    alphas = 1.0 - betas
    alpha_bars = np.empty(K)
    acc = 1.0
    for i, a in enumerate(alphas):
        acc *= a
        alpha_bars[i] = acc
    for arr in (betas, alphas, alpha_bars):
        arr.flags.writeable = False
    return NoiseSchedule(betas, alphas, alpha_bars)


def marginal_coefficients(s: NoiseSchedule, k: int) -> tuple[float, float]:
    """``(sqrt(alpha_bar_k), sqrt(1 - alpha_bar_k))`` for q(X^k | X^0)."""
    ab = s.alpha_bar(k)
    return math.sqrt(ab), math.sqrt(1.0 - ab)
