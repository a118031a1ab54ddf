"""DDIM noise schedule, forward noising and deterministic reverse steps.

Index convention: ``alpha_bar[0] == 1`` is the clean motion and
``alpha_bar[K_m]`` the noisiest. The denoiser predicts the clean motion, so a
reverse step only needs ``(M_k, M0_hat)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import ConfigError, ContractError, StructuralError


@dataclass(frozen=True)
class Schedule:
    K_m: int
    beta: np.ndarray
    alpha_bar: np.ndarray

    @property
    def sqrt_ab(self) -> np.ndarray:
        return np.sqrt(self.alpha_bar)

    @property
    def sqrt_one_minus_ab(self) -> np.ndarray:
        return np.sqrt(1.0 - self.alpha_bar)


@dataclass(frozen=True)
class StepPlan:
    indices: tuple[int, ...]

    def __len__(self) -> int:
        return len(self.indices)

    def transitions(self) -> list[tuple[int, int]]:
        """(k, k_next) pairs; the last one always targets index 0."""
        return list(zip(self.indices, self.indices[1:] + (0,)))


def _from_alpha_bar(alpha_bar: np.ndarray) -> Schedule:
    beta = 1.0 - alpha_bar[1:] / alpha_bar[:-1]
    return Schedule(len(beta), beta, alpha_bar)


def build_schedule(K_m: int = 100, beta_min: float = 1e-4, beta_max: float = 0.02) -> Schedule:
    """Linearly spaced betas, ``alpha_bar`` = cumulative product of ``1 - beta`` with a leading 1."""
    if K_m < 1:
        raise ConfigError(f"K_m must be >= 1, got {K_m}", component="schedule")
    if not (0.0 < beta_min <= beta_max < 1.0):
        raise ConfigError(
            f"need 0 < beta_min <= beta_max < 1, got beta_min={beta_min}, beta_max={beta_max}",
            component="schedule",
        )
    beta = np.array([beta_max]) if K_m == 1 else np.linspace(beta_min, beta_max, K_m)
    alpha_bar = np.concatenate([[1.0], np.cumprod(1.0 - beta)])
    return Schedule(int(K_m), beta, alpha_bar)


def make_step_plan(schedule: Schedule, K: int) -> StepPlan:
    """K evenly spaced indices starting at ``K_m``: ``k_j = K_m - floor(j * K_m / K)``."""
    K_m = schedule.K_m
    if not (1 <= K <= K_m):
        raise ConfigError(f"K={K} outside [1, K_m={K_m}]", component="schedule")
    return StepPlan(tuple(K_m - (j * K_m) // K for j in range(K)))


def subsample_schedule(schedule: Schedule, K: int) -> Schedule:
    """A K-step schedule keeping only the noise levels visited by ``make_step_plan(schedule, K)``.

    Used for models trained with ``K_m = K``: the endpoint noise level is
    preserved, so one-step sampling from the subsampled schedule still starts
    from (nearly) pure noise.
    """
    plan = make_step_plan(schedule, K)
    alpha_bar = np.concatenate([[1.0], schedule.alpha_bar[list(reversed(plan.indices))]])
    return _from_alpha_bar(alpha_bar)


def _check_index(schedule: Schedule, k: int, name: str = "k") -> None:
    if not (0 <= k <= schedule.K_m):
        raise ContractError(f"{name}={k} outside [0, {schedule.K_m}]", component="schedule")


def forward_noise(schedule: Schedule, M0: np.ndarray, k, z: np.ndarray) -> np.ndarray:
    """``sqrt(ab_k) * M0 + sqrt(1 - ab_k) * z``.

    ``k`` may be an int or, for batched motions, an integer array with one
    entry per leading-axis element.
    """
    M0, z = np.asarray(M0, dtype=np.float64), np.asarray(z, dtype=np.float64)
    if M0.shape != z.shape:
        raise StructuralError(f"M0 shape {M0.shape} != noise shape {z.shape}", component="schedule")
    if np.ndim(k) == 0:
        _check_index(schedule, int(k))
        return schedule.sqrt_ab[k] * M0 + schedule.sqrt_one_minus_ab[k] * z
    k = np.asarray(k)
    if k.min() < 0 or k.max() > schedule.K_m:
        raise ContractError(f"diffusion index outside [0, {schedule.K_m}]", component="schedule")
    shape = (-1,) + (1,) * (M0.ndim - 1)
    return schedule.sqrt_ab[k].reshape(shape) * M0 + schedule.sqrt_one_minus_ab[k].reshape(shape) * z


def ddim_reverse_step(schedule: Schedule, Mk: np.ndarray, M0_hat: np.ndarray, k: int, k_next: int) -> np.ndarray:
    """Deterministic DDIM transition k -> k_next given a clean-motion estimate."""
    if not (0 <= k_next < k <= schedule.K_m):
        raise ContractError(
            f"need 0 <= k_next < k <= {schedule.K_m}, got k={k}, k_next={k_next}", component="schedule"
        )
    if np.shape(Mk) != np.shape(M0_hat):
        raise StructuralError(f"Mk shape {np.shape(Mk)} != M0_hat shape {np.shape(M0_hat)}", component="schedule")
    ab = schedule.alpha_bar[k]
    if ab >= 1.0:
        raise ContractError(f"alpha_bar[{k}] == 1, noise estimate undefined", component="schedule")
    z_hat = (Mk - np.sqrt(ab) * M0_hat) / np.sqrt(1.0 - ab)
    ab_next = schedule.alpha_bar[k_next]
    return np.sqrt(ab_next) * M0_hat + np.sqrt(1.0 - ab_next) * z_hat


def run_sampler(
    schedule: Schedule,
    plan: StepPlan,
    denoise: Callable[[np.ndarray, int], np.ndarray],
    init: np.ndarray,
) -> np.ndarray:
    """Fold ``ddim_reverse_step`` over ``plan`` starting from ``init`` at index ``plan[0]``."""
    if not plan.indices or plan.indices[0] > schedule.K_m:
        raise ContractError(f"plan {plan.indices[:3]}... invalid for K_m={schedule.K_m}", component="schedule")
    M = init
    for k, k_next in plan.transitions():
        M0_hat = denoise(M, k)
        M = ddim_reverse_step(schedule, M, M0_hat, k, k_next)
    return M
