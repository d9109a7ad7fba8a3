"""Variance schedules and forward/reverse diffusion arithmetic.

Timesteps are 1-based: ``t`` runs over ``1..T`` and ``alpha_bar_0 = 1``.
Arrays in :class:`DiffusionSchedule` are stored with a leading entry for
``t = 0`` so that ``sched.alpha_bar[t]`` reads naturally.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError, ParameterError, ShapeError
from .geometry import PointCloud


@dataclass(frozen=True)
class DiffusionSchedule:
    T: int
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    posterior_var: np.ndarray
    # network timestep fed for each schedule index; identity unless respaced
    timesteps: np.ndarray

    def check_t(self, t: int) -> int:
        t = int(t)
        if not 1 <= t <= self.T:
            raise ParameterError(f"timestep {t} outside [1, {self.T}]")
        return t


def _from_betas(beta: np.ndarray, timesteps: np.ndarray | None = None) -> DiffusionSchedule:
    T = len(beta)
    beta = np.concatenate([[0.0], beta])
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    posterior_var = np.zeros(T + 1)
    posterior_var[1:] = beta[1:] * (1.0 - alpha_bar[:-1]) / (1.0 - alpha_bar[1:])
    if timesteps is None:
        timesteps = np.arange(T + 1)
    arrays = [beta, alpha, alpha_bar, posterior_var, np.asarray(timesteps)]
    for a in arrays:
        a.setflags(write=False)
    return DiffusionSchedule(T, *arrays)


def make_schedule(
    T: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02, kind: str = "linear"
) -> DiffusionSchedule:
    if kind != "linear":
        raise ParameterError(f"unsupported schedule kind {kind!r}")
    if int(T) < 1:
        raise ParameterError("T must be >= 1")
    if not 0 < beta_start <= beta_end < 1:
        raise ParameterError("need 0 < beta_start <= beta_end < 1")
    beta = np.linspace(beta_start, beta_end, int(T), dtype=np.float64)
    return _from_betas(beta)


def respace(sched: DiffusionSchedule, stride: int) -> DiffusionSchedule:
    """Keep every ``stride``-th step (always including ``T``) for faster sampling.

    Betas are recomputed from the kept cumulative products so the marginals at
    the kept steps are unchanged. ``timesteps`` records the original index of
    each kept step, which is what the network is conditioned on.
    """
    if stride < 1:
        raise ParameterError("stride must be >= 1")
    if stride == 1:
        return sched
    kept = np.arange(sched.T, 0, -stride)[::-1]
    ab = sched.alpha_bar[kept]
    prev = np.concatenate([[1.0], ab[:-1]])
    return _from_betas(1.0 - ab / prev, np.concatenate([[0], kept]))


def _points(x) -> np.ndarray:
    return x.points if isinstance(x, PointCloud) else np.asarray(x, dtype=np.float64)


def q_sample(x0, t: int, eps, sched: DiffusionSchedule) -> PointCloud:
    """Noise clean points to step ``t`` in one shot."""
    t = sched.check_t(t)
    x = _points(x0)
    e = np.asarray(eps, dtype=np.float64)
    if e.shape != x.shape:
        raise ShapeError(f"noise shape {e.shape} does not match points {x.shape}")
    ab = sched.alpha_bar[t]
    return PointCloud(np.sqrt(ab) * x + np.sqrt(1.0 - ab) * e)


def q_step(x_prev, t: int, eps, sched: DiffusionSchedule) -> np.ndarray:
    """Single-step forward kernel from ``t - 1`` to ``t``."""
    t = sched.check_t(t)
    return np.sqrt(sched.alpha[t]) * _points(x_prev) + np.sqrt(sched.beta[t]) * np.asarray(eps)


def predict_x0(xt, eps_hat, t: int, sched: DiffusionSchedule) -> np.ndarray:
    ab = sched.alpha_bar[sched.check_t(t)]
    return (_points(xt) - np.sqrt(1.0 - ab) * np.asarray(eps_hat)) / np.sqrt(ab)


def posterior_step(xt, eps_hat, t: int, sched: DiffusionSchedule, z=None) -> PointCloud:
    """One ancestral sampling step from ``t`` to ``t - 1``.

    ``z`` is the injected Gaussian noise; pass ``None`` (or zeros) for a
    deterministic mean step. At ``t = 1`` only zero noise is allowed.
    """
    t = sched.check_t(t)
    x = _points(xt)
    e = np.asarray(eps_hat, dtype=np.float64)
    if e.shape != x.shape:
        raise ShapeError(f"eps_hat shape {e.shape} does not match points {x.shape}")
    beta, alpha, ab = sched.beta[t], sched.alpha[t], sched.alpha_bar[t]
    mean = (x - beta / np.sqrt(1.0 - ab) * e) / np.sqrt(alpha)
    if z is None:
        return PointCloud(mean)
    z = np.asarray(z, dtype=np.float64)
    if z.shape != x.shape:
        raise ShapeError(f"z shape {z.shape} does not match points {x.shape}")
    if t == 1:
        if np.any(z != 0):
            raise ContractError("posterior_step at t = 1 must not inject noise")
        return PointCloud(mean)
    return PointCloud(mean + np.sqrt(sched.posterior_var[t]) * z)


def snr(t: int, sched: DiffusionSchedule) -> float:
    ab = sched.alpha_bar[sched.check_t(t)]
    return float(ab / (1.0 - ab))
