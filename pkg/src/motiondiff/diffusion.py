"""Forward diffusion, the noise-prediction loss, ancestral sampling and the
prior KL diagnostic. Works with any ``predictor(x_k, k, C) -> eps_hat``."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np
import torch

from .errors import NumericError
from .schedule import NoiseSchedule

Predictor = Callable[[torch.Tensor, torch.Tensor, torch.Tensor], torch.Tensor]


@dataclass
class DiffusionState:
    k: int
    data: torch.Tensor  # [..., f, J, 3]

    def __post_init__(self):
        if self.k < 0:
            raise ValueError(f"diffusion step must be >= 0, got {self.k}")
        if not torch.isfinite(self.data).all():
            raise NumericError(f"non-finite diffusion state at step {self.k}")


@dataclass
class PredictionSet:
    samples: np.ndarray  # [N, f, J, 3]
    obs_id: str = ""

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 4 or self.samples.shape[0] < 1:
            raise ValueError(f"samples must be [N>=1, f, J, 3], got {self.samples.shape}")

    def __len__(self):
        return self.samples.shape[0]


def _as_tensor(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor) and x.is_floating_point():
        return x
    return torch.as_tensor(x, dtype=torch.float64)


def _coef(table: np.ndarray, k, like: torch.Tensor) -> torch.Tensor:
    """Gather per-step coefficients, broadcastable against ``like``."""
    if isinstance(k, torch.Tensor) and k.ndim == 1:
        c = torch.tensor(table, dtype=like.dtype)[k - 1]
        return c.reshape(-1, *([1] * (like.ndim - 1)))
    return torch.tensor(float(table[int(k) - 1]), dtype=like.dtype)


def _check_steps(schedule: NoiseSchedule, k) -> None:
    kk = k if isinstance(k, torch.Tensor) else torch.tensor([int(k)])
    if kk.numel() and (kk.min() < 1 or kk.max() > schedule.K):
        raise IndexError(f"diffusion step out of range 1..{schedule.K}")


def forward_diffuse(schedule: NoiseSchedule, x0, k, eps) -> DiffusionState:
    """``X^k = sqrt(ab_k) x0 + sqrt(1 - ab_k) eps``.

    ``k`` is an int, or a 1-D integer tensor giving one step per leading-batch element.
    """
    x0, eps = _as_tensor(x0), _as_tensor(eps)
    if x0.shape != eps.shape:
        raise ValueError(f"shape mismatch: x0 {tuple(x0.shape)} vs eps {tuple(eps.shape)}")
    _check_steps(schedule, k)
    ab = _coef(schedule.alpha_bars, k, x0)
    data = torch.sqrt(ab) * x0 + torch.sqrt(1.0 - ab) * eps
    step = int(k.max()) if isinstance(k, torch.Tensor) else int(k)
    return DiffusionState(step, data)


def simplified_loss(schedule: NoiseSchedule, predictor: Predictor, x0, C, k, eps) -> torch.Tensor:
    """Squared error between injected and predicted noise, summed over
    coordinates and averaged over the batch when ``x0`` is ``[B, f, J, 3]``."""
    x0, eps = _as_tensor(x0), _as_tensor(eps)
    xk = forward_diffuse(schedule, x0, k, eps).data
    kt = k if isinstance(k, torch.Tensor) else torch.tensor(int(k))
    err = (eps - predictor(xk, kt, C)) ** 2
    if x0.ndim == 3:
        return err.sum()
    return err.flatten(1).sum(1).mean()


def reverse_step(schedule: NoiseSchedule, predictor: Predictor, state: DiffusionState, C,
                 z=None) -> DiffusionState:
    """One ancestral step X^k -> X^{k-1} with variance beta_k; ``z`` must be zero at k=1."""
    k = state.k
    if k < 1:
        raise ValueError("cannot reverse from step 0")
    _check_steps(schedule, k)
    xk = state.data
    if z is None:
        z = torch.zeros_like(xk)
    z = _as_tensor(z)
    if z.shape != xk.shape:
        raise ValueError(f"shape mismatch: z {tuple(z.shape)} vs state {tuple(xk.shape)}")
    if k == 1 and torch.any(z != 0):
        raise ValueError("final reverse step (k=1) takes no noise; pass z=0")
    beta, alpha, ab = schedule.beta(k), schedule.alpha(k), schedule.alpha_bar(k)
    eps_hat = predictor(xk, torch.tensor(k), C)
    mean = (xk - (beta / np.sqrt(1.0 - ab)) * eps_hat) / np.sqrt(alpha)
    return DiffusionState(k - 1, mean + np.sqrt(beta) * z)


def chain_generator(seed: int, chain: int) -> np.random.Generator:
    """Independent counter-based stream for one reverse chain."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), int(chain)])))


@torch.no_grad()
def sample_chains(schedule: NoiseSchedule, predictor: Predictor, C: torch.Tensor, N: int,
                  seeds: Sequence[int], shape: Sequence[int],
                  record: Iterable[int] = ()) -> tuple[torch.Tensor, dict[int, torch.Tensor]]:
    """Run ``N`` reverse chains for each of ``B`` conditions.

    ``C`` is ``[B, d_c]``; chain ``n`` of condition ``b`` draws all its noise
    from ``chain_generator(seeds[b], n)``. Returns ``[B, N, *shape]`` samples
    and the states at every step listed in ``record`` (same layout).
    """
    if N < 1:
        raise ValueError(f"N must be >= 1, got {N}")
    B = C.shape[0]
    if len(seeds) != B:
        raise ValueError(f"need one seed per condition, got {len(seeds)} for {B}")
    shape = tuple(shape)
    size = int(np.prod(shape))
    gens = [chain_generator(seeds[b], n) for b in range(B) for n in range(N)]

    def draw() -> torch.Tensor:
        z = np.stack([g.standard_normal(size) for g in gens])
        return torch.from_numpy(z).reshape(B * N, *shape).to(C.dtype)

    record = set(record)
    kept = {}
    Crep = C.repeat_interleave(N, dim=0)
    state = DiffusionState(schedule.K, draw())
    if schedule.K in record:
        kept[schedule.K] = state.data.reshape(B, N, *shape).clone()
    for k in range(schedule.K, 0, -1):
        z = draw() if k > 1 else torch.zeros(B * N, *shape, dtype=C.dtype)
        state = reverse_step(schedule, predictor, state, Crep, z)
        if state.k in record:
            kept[state.k] = state.data.reshape(B, N, *shape).clone()
    return state.data.reshape(B, N, *shape), kept


def sample(schedule: NoiseSchedule, predictor: Predictor, C, N: int, seed: int,
           shape: Sequence[int], obs_id: str = "") -> PredictionSet:
    """``N`` futures for a single condition vector ``C`` of shape ``[d_c]``."""
    C = _as_tensor(C).reshape(1, -1)
    out, _ = sample_chains(schedule, predictor, C, N, [seed], shape)
    return PredictionSet(out[0].numpy(), obs_id)


def gaussian_kl_to_standard(mean, var) -> torch.Tensor:
    """KL( N(mean, var I) || N(0, I) ), summed over coordinates."""
    mean = _as_tensor(mean)
    var = torch.as_tensor(var, dtype=torch.float64).expand_as(mean)
    return 0.5 * (var + mean ** 2 - 1.0 - torch.log(var)).sum()


def elbo_terms(schedule: NoiseSchedule, x0) -> float:
    """Prior-matching KL between q(X^K | X^0) and the standard normal."""
    x0 = _as_tensor(x0)
    ab = schedule.alpha_bar(schedule.K)
    mean = np.sqrt(ab) * x0
    var = torch.full_like(x0, 1.0 - ab)
    return float(gaussian_kl_to_standard(mean, var))
