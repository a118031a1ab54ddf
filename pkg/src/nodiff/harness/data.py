"""Turning expert episodes into (observation window, motion) training pairs."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import DataError
from ..policy import Batch, ModelConfig, NormStats, ObservationWindow, flatten_window
from ..toyworld import EpisodeRecord


def build_windows(
    episode: EpisodeRecord, T_o: int, T_p: int, image_shape: tuple[int, ...], norm: NormStats | None = None
) -> list[tuple[ObservationWindow, np.ndarray]]:
    """One sample per time index.

    Observations before the episode start repeat the first frame; actions
    past the end repeat the last action. Motions are normalised when
    ``norm`` is given.
    """
    L = len(episode)
    if L < 1:
        raise DataError("cannot build windows from an empty episode", component="harness")
    imgs = episode.images.reshape((L,) + tuple(image_shape))
    out = []
    for t in range(L):
        obs_idx = [max(0, t - T_o + 1 + j) for j in range(T_o)]
        act_idx = [min(L - 1, t + j) for j in range(T_p)]
        motion = episode.actions[act_idx]
        if norm is not None:
            motion = norm.normalize_actions(motion)
        out.append((ObservationWindow(episode.states[obs_idx], imgs[obs_idx]), motion))
    return out


def fit_norm_stats(episodes: list[EpisodeRecord]) -> NormStats:
    return NormStats.fit(
        np.concatenate([ep.actions for ep in episodes]), np.concatenate([ep.states for ep in episodes])
    )


@dataclass
class TrainingSet:
    obs: np.ndarray  # (N, obs_dim), normalised states + raw pixels
    motions: np.ndarray  # (N, T_p, D_a), normalised

    def __len__(self) -> int:
        return len(self.motions)

    def batch(self, idx: np.ndarray) -> Batch:
        return Batch(self.obs[idx], self.motions[idx])


def build_training_set(episodes: list[EpisodeRecord], config: ModelConfig, norm: NormStats) -> TrainingSet:
    obs, motions = [], []
    for ep in episodes:
        for window, motion in build_windows(ep, config.T_o, config.T_p, config.image_shape, norm):
            obs.append(flatten_window(window, norm))
            motions.append(motion)
    return TrainingSet(np.array(obs), np.array(motions))
