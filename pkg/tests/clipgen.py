"""Synthetic clip builders shared by the analysis and acceptance tests.

Seed namespaces here are disjoint from the ones used to calibrate the
frozen loop threshold, so these corpora act as a held-out split.
"""
import numpy as np

from rollflow import toydata


def planted_loop_video(period: int, seed: int, frames: int = 240) -> np.ndarray:
    """Exactly periodic ball clip: integer-period sinusoid heights."""
    rng = np.random.default_rng([4400, period, seed])
    phase = rng.uniform(0.0, 2.0 * np.pi)
    k = np.arange(frames)
    heights = 3.5 + 2.5 * np.sin(2.0 * np.pi * k / period + phase)
    color = toydata.PALETTE[seed % len(toydata.PALETTE)]
    return toydata.render_ball_video(heights, color)


def random_walk_video(seed: int, frames: int = 240,
                      step: float = 2.0) -> np.ndarray:
    """Aperiodic ball clip: reflected Gaussian random walk in height."""
    rng = np.random.default_rng([4401, seed])
    h = rng.uniform(1.0, 6.0)
    heights = np.empty(frames)
    for i in range(frames):
        h = h + rng.normal(0.0, step)
        while h < 1.0 or h > 6.0:
            if h < 1.0:
                h = 2.0 - h
            if h > 6.0:
                h = 12.0 - h
        heights[i] = h
    color = toydata.PALETTE[seed % len(toydata.PALETTE)]
    return toydata.render_ball_video(heights, color)
