"""Rectified-flow forward process, velocity targets, and the training loss.

The forward process is the straight line x_t = t*x + (1-t)*noise with t=1
clean and t=0 pure noise.  The regression target is the constant velocity
of that line, x - noise, so a single Euler step of size (1-t) lands on x
exactly when the predicted field is perfect.
"""
from __future__ import annotations

import dataclasses

import numpy as np

from . import numerics as nx
from .schedule import TimestepVector, loss_weight


@dataclasses.dataclass(frozen=True)
class FlowSample:
    """One point on the noising line, with both endpoints retained."""

    clean: np.ndarray
    noise: np.ndarray
    t: float
    noisy: np.ndarray


@dataclasses.dataclass(frozen=True)
class VelocityTarget:
    phi: np.ndarray


def interpolate(clean: np.ndarray, noise: np.ndarray, t: float) -> np.ndarray:
    clean = np.asarray(clean)
    noise = np.asarray(noise)
    if clean.shape != noise.shape:
        raise ValueError(f"shape mismatch: {clean.shape} vs {noise.shape}")
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"t must lie in [0, 1], got {t}")
    return t * clean + (1.0 - t) * noise


def make_flow_sample(clean: np.ndarray, noise: np.ndarray, t: float) -> FlowSample:
    return FlowSample(clean, noise, float(t), interpolate(clean, noise, t))


def velocity_target(clean: np.ndarray, noise: np.ndarray) -> VelocityTarget:
    clean = np.asarray(clean)
    noise = np.asarray(noise)
    if clean.shape != noise.shape:
        raise ValueError(f"shape mismatch: {clean.shape} vs {noise.shape}")
    return VelocityTarget(clean - noise)


def euler_step(x_t: np.ndarray, phi_hat: np.ndarray, dt: float) -> np.ndarray:
    if dt < 0.0:
        raise ValueError("dt must be non-negative")
    return x_t + dt * np.asarray(phi_hat)


def _weighted_frame_mse(pred: nx.Tensor, target: np.ndarray,
                        weights: np.ndarray) -> nx.Tensor:
    frames = pred.shape[0]
    # keep the weight product in the prediction dtype so float32 training
    # does not promote the whole backward pass to float64
    weights = np.asarray(weights, dtype=pred.dtype)
    err = nx.square(nx.sub(pred, target))
    per_frame = nx.mean(nx.reshape(err, (frames, -1)), axis=1)
    return nx.mean(nx.mul(per_frame, weights))


def modality_loss(pred: nx.Tensor, target: np.ndarray,
                  ts: TimestepVector) -> nx.Tensor:
    """One modality's contribution to the window loss."""
    pred = nx.as_tensor(pred)
    target = np.asarray(target)
    if pred.shape != target.shape:
        raise ValueError(f"prediction shape {pred.shape} does not match "
                         f"target {target.shape}")
    if pred.shape[0] != len(ts.t):
        raise ValueError(f"leading axis {pred.shape[0]} != window {len(ts.t)}")
    return _weighted_frame_mse(pred, target, loss_weight(ts.t))


def windowed_loss(pred_v: nx.Tensor, target_v: np.ndarray,
                  pred_a: nx.Tensor, target_a: np.ndarray,
                  ts: TimestepVector) -> nx.Tensor:
    """Weighted velocity regression loss over one window, both modalities.

    Each modality contributes the mean over frames of loss_weight(t_k)
    times that frame's mean squared error; the two contributions add.
    Frames at t=0 or t=1 carry zero weight.
    """
    pred_v = nx.as_tensor(pred_v)
    pred_a = nx.as_tensor(pred_a)
    target_v = np.asarray(target_v)
    target_a = np.asarray(target_a)
    frames = len(ts.t)
    for name, arr in (("pred_v", pred_v), ("target_v", target_v),
                      ("pred_a", pred_a), ("target_a", target_a)):
        if arr.shape[0] != frames:
            raise ValueError(f"{name} leading axis {arr.shape[0]} != window {frames}")
    if pred_v.shape != target_v.shape or pred_a.shape != target_a.shape:
        raise ValueError("prediction and target shapes must match")
    weights = loss_weight(ts.t)
    loss_v = _weighted_frame_mse(pred_v, target_v, weights)
    loss_a = _weighted_frame_mse(pred_a, target_a, weights)
    return nx.add(loss_v, loss_a)
