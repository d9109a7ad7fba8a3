"""Iterative denoising with UDF self-conditioning, and point extraction."""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autograd as ag
from .diffusion import DiffusionSchedule, posterior_step
from .errors import ContractError, EmptyExtractionError, NumericError, ParameterError
from .geometry import PointCloud, normalize
from .net import PLACEHOLDER, NetParams, encode_condition, forward, noise_gain, select_condition


@dataclass(frozen=True)
class SamplerConfig:
    n_points: int = 2048
    extract_tau: float = 0.05
    # inclusive (lo, hi) timestep intervals where the self-condition is forced to the placeholder
    selfcond_mask: tuple = ()
    seed: int = 0
    capture_every: int | None = None
    stride: int = 1

    def validate(self, T: int | None = None, clamp: float = 0.5) -> None:
        if self.n_points < 1:
            raise ParameterError("n_points must be >= 1")
        if not 0 < self.extract_tau <= clamp:
            raise ParameterError(f"extract_tau must lie in (0, {clamp}]")
        if self.capture_every is not None and self.capture_every < 1:
            raise ParameterError("capture_every must be >= 1")
        if self.stride < 1:
            raise ParameterError("stride must be >= 1")
        check_mask(self.selfcond_mask, T)


def check_mask(intervals, T: int | None = None) -> None:
    spans = sorted(tuple(iv) for iv in intervals)
    for lo, hi in spans:
        if lo > hi:
            raise ParameterError(f"mask interval {lo}:{hi} has reversed bounds")
        if lo < 1 or (T is not None and hi > T):
            raise ParameterError(f"mask interval {lo}:{hi} outside [1, {T}]")
    for (_, hi), (lo, _) in zip(spans, spans[1:]):
        if lo <= hi:
            raise ParameterError("mask intervals overlap")


def stage_masks(T: int = 1000, stages: int = 4) -> list:
    """Split [1, T] into ``stages`` equal intervals, latest timesteps first."""
    edges = np.linspace(T, 0, stages + 1).round().astype(int)
    return [(int(lo) + 1, int(hi)) for hi, lo in zip(edges[:-1], edges[1:])]


@dataclass
class Trajectory:
    snapshots: list = field(default_factory=list)  # (t, PointCloud, nu_hat)

    def __len__(self) -> int:
        return len(self.snapshots)


def _masked(t: int, intervals) -> bool:
    return any(lo <= t <= hi for lo, hi in intervals)


def sample(
    params: NetParams,
    P,
    sched: DiffusionSchedule,
    cfg: SamplerConfig = SamplerConfig(),
    selfcond: bool = True,
    on_step=None,
):
    """Denoise Gaussian queries into a shape conditioned on the partial cloud ``P``.

    ``P`` is in world coordinates; it is normalized by its own statistics and
    the result is mapped back. Returns ``(x0, nu_hat, trajectory)`` where
    ``nu_hat`` is the predicted UDF (normalized units) at the final points.
    ``selfcond=False`` keeps the placeholder at every step. ``on_step`` is
    called as ``on_step(t, x_t, sc, eps_hat, nu_hat)`` for instrumentation.
    """
    cfg.validate(sched.T)
    base_alpha_bar = sched.alpha_bar
    if cfg.stride != 1:
        from .diffusion import respace

        sched = respace(sched, cfg.stride)
    pcloud = P if isinstance(P, PointCloud) else PointCloud(P)
    if len(pcloud) == 0:
        raise ParameterError("condition cloud is empty")
    pn, tf = normalize(pcloud)
    rng = np.random.default_rng(cfg.seed)
    x = rng.standard_normal((cfg.n_points, 3))
    traj = Trajectory()
    T = sched.T
    with ag.no_grad():
        tokens = encode_condition(params, select_condition(pn.points, params.cfg.n_cond_tokens)[None])
        prev = None
        for idx in range(T, 0, -1):
            t_net = int(sched.timesteps[idx])
            use_prev = selfcond and prev is not None and not _masked(t_net, cfg.selfcond_mask)
            sc = prev if use_prev else np.full(cfg.n_points, PLACEHOLDER)
            gain = noise_gain(params.cfg, base_alpha_bar, t_net)
            eps_hat, nu_hat = forward(params, x, t_net, None, sc, tokens=tokens, gain=gain)
            eps_hat, nu_hat = eps_hat.data, nu_hat.data
            if on_step is not None:
                on_step(t_net, x, sc, eps_hat, nu_hat)
            if cfg.capture_every is not None and (
                (T - idx) % cfg.capture_every == 0 or idx == 1
            ):
                traj.snapshots.append((t_net, tf.invert(PointCloud(x.copy())), nu_hat.copy()))
            z = rng.standard_normal(x.shape) if idx > 1 else None
            x = posterior_step(x, eps_hat, idx, sched, z).points
            if not np.all(np.isfinite(x)):
                raise NumericError(f"non-finite sample state after step t={t_net}")
            prev = nu_hat
        use_prev = selfcond and not _masked(int(sched.timesteps[1]), cfg.selfcond_mask)
        sc = prev if use_prev else np.full(cfg.n_points, PLACEHOLDER)
        _, nu_final = forward(params, x, int(sched.timesteps[1]), None, sc, tokens=tokens)
    return tf.invert(PointCloud(x)), nu_final.data.copy(), traj


def extract_points(x0, nu_hat, tau: float = 0.05) -> PointCloud:
    """Keep the points whose predicted UDF is below ``tau``; order is preserved."""
    pts = np.asarray(getattr(x0, "points", x0), dtype=np.float64).reshape(-1, 3)
    nu = np.asarray(nu_hat, dtype=np.float64).reshape(-1)
    if len(nu) != len(pts):
        raise ContractError(f"{len(nu)} UDF values for {len(pts)} points")
    if not tau > 0:
        raise ParameterError("tau must be > 0")
    keep = np.flatnonzero(nu < tau)
    if len(keep) == 0:
        raise EmptyExtractionError(f"no point has predicted UDF below {tau}")
    return PointCloud(pts[keep])


def export_trajectory(traj: Trajectory, path) -> list:
    """Write one cloud file per snapshot plus ``nu_hat.csv``; returns the paths."""
    from .store import write_cloud

    if not traj.snapshots:
        raise ContractError("trajectory has no snapshots")
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for t, cloud, _ in traj.snapshots:
        f = out / f"snapshot_t{t:04d}.ipc"
        write_cloud(f, cloud)
        written.append(f)
    csv_path = out / "nu_hat.csv"
    tmp = csv_path.with_suffix(".csv.tmp")
    with open(tmp, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "point_index", "nu_hat"])
        for t, _, nu in traj.snapshots:
            for i, v in enumerate(nu):
                w.writerow([t, i, repr(float(v))])
    os.replace(tmp, csv_path)
    written.append(csv_path)
    return written
