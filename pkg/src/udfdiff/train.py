"""Unified UDF + noise loss, self-conditioned training and Adam."""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .data import Prepared
from .diffusion import DiffusionSchedule
from .errors import NumericError, ParameterError, ShapeError
from .kdtree import udf_targets
from .net import PLACEHOLDER, NetParams, backward, encode_condition, forward, noise_gain

LOG_FIELDS = ("step", "loss", "udf_term", "noise_term", "wall_ms")


@dataclass(frozen=True)
class TrainConfig:
    lambda_weight: float = 1.0
    lr: float = 1e-4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    steps: int = 2000
    batch: int = 1
    n_query: int = 2048
    selfcond_prob: float = 0.5
    clamp: float = 0.5
    grad_clip: float = 10.0  # 0 disables
    seed: int = 0

    def validate(self) -> None:
        if not self.lambda_weight >= 0:
            raise ParameterError("lambda_weight must be >= 0")
        if not 0.0 <= self.selfcond_prob <= 1.0:
            raise ParameterError("selfcond_prob must lie in [0, 1]")
        if not self.lr > 0:
            raise ParameterError("lr must be > 0")
        if not (0 <= self.adam_beta1 < 1 and 0 <= self.adam_beta2 < 1):
            raise ParameterError("adam betas must lie in [0, 1)")
        if self.steps < 0 or self.batch < 1 or self.n_query < 1:
            raise ParameterError("steps >= 0, batch >= 1 and n_query >= 1 required")
        if not self.clamp > 0:
            raise ParameterError("clamp must be > 0")
        if self.grad_clip < 0:
            raise ParameterError("grad_clip must be >= 0")

    @property
    def adam_betas(self) -> tuple:
        return (self.adam_beta1, self.adam_beta2)


@dataclass
class TrainBatch:
    """Arrays carry a leading batch axis of length ``cfg.batch``."""

    x0: np.ndarray  # (B, N, 3)
    p: np.ndarray  # (B, M, 3) condition points
    t: np.ndarray  # (B,)
    eps: np.ndarray  # (B, N, 3)
    nu: np.ndarray  # (B, N)
    xt: np.ndarray  # (B, N, 3)
    instance: np.ndarray  # (B,)


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0


def loss_uni(nu_hat, nu, eps_hat, eps, lambda_weight: float = 1.0):
    """Mean absolute UDF error plus ``lambda_weight`` times the RMS noise error.

    Returns ``(loss, udf_term, noise_term)``; the first is a graph-carrying
    tensor when the predictions are.
    """
    nu_hat, eps_hat = ag.as_tensor(nu_hat), ag.as_tensor(eps_hat)
    nu, eps = np.asarray(nu, dtype=np.float64), np.asarray(eps, dtype=np.float64)
    if nu_hat.shape != nu.shape or eps_hat.shape != eps.shape:
        raise ShapeError(
            f"prediction shapes {nu_hat.shape}/{eps_hat.shape} vs targets {nu.shape}/{eps.shape}"
        )
    udf = ag.mean(ag.abs_(nu_hat - nu))
    noise = ag.sqrt(ag.mean(ag.square(eps_hat - eps)))
    loss = udf + noise * float(lambda_weight)
    return loss, float(udf.data), float(noise.data)


def make_batch(dataset: list, sched: DiffusionSchedule, cfg: TrainConfig, seed) -> TrainBatch:
    """Draw instances, timesteps and noise; noise the GT and compute UDF targets.

    ``dataset`` is a list of :class:`Prepared` instances.
    """
    if not dataset:
        raise ParameterError("dataset is empty")
    rng = np.random.default_rng(seed)
    B = cfg.batch
    which = rng.integers(len(dataset), size=B)
    ts = rng.integers(1, sched.T + 1, size=B)
    picks = []
    for i in which:
        n_gt = len(dataset[i].gt)
        picks.append(rng.choice(n_gt, size=cfg.n_query, replace=n_gt < cfg.n_query))
    eps = rng.standard_normal((B, cfg.n_query, 3))
    x0 = np.stack([dataset[i].gt[pk] for i, pk in zip(which, picks)])
    ab = sched.alpha_bar[ts][:, None, None]
    xt = np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps
    nu = np.empty((B, cfg.n_query))
    for i in np.unique(which):
        rows = np.flatnonzero(which == i)
        nu[rows] = udf_targets(xt[rows].reshape(-1, 3), dataset[i].index, cfg.clamp).reshape(
            len(rows), cfg.n_query
        )
    p = np.stack([dataset[i].cond for i in which])
    return TrainBatch(x0, p, ts, eps, nu, xt, which)


def adam_update(
    params: NetParams, grads: dict, state: AdamState, lr: float, betas=(0.9, 0.999),
    eps_stab: float = 1e-8,
) -> None:
    """In-place Adam step with bias correction."""
    for g in grads.values():
        if not np.all(np.isfinite(g)):
            raise NumericError("non-finite gradient passed to adam_update")
    b1, b2 = betas
    state.step += 1
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for name, g in grads.items():
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(g)
            state.v[name] = np.zeros_like(g)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        params[name].data -= lr * (m / c1) / (np.sqrt(v / c2) + eps_stab)


def clip_global_norm(grads: dict, max_norm: float) -> float:
    total = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / total
        for g in grads.values():
            g *= scale
    return total


def train_step(
    params: NetParams,
    batch: TrainBatch,
    cfg: TrainConfig,
    sched: DiffusionSchedule,
    opt_state: AdamState,
    rng: np.random.Generator,
    use_selfcond: bool | None = None,
) -> dict:
    """One optimization step; returns the loss terms.

    With probability ``cfg.selfcond_prob`` a first, gradient-free pass
    produces a UDF estimate that becomes the self-condition of the second
    pass; otherwise the self-condition is the placeholder. Only the second
    (or sole) pass is optimized. ``use_selfcond`` forces the coin.
    """
    if use_selfcond is None:
        use_selfcond = bool(rng.random() < cfg.selfcond_prob)
    sc = np.full(batch.nu.shape, PLACEHOLDER)
    tokens = encode_condition(params, batch.p)
    if use_selfcond:
        with ag.no_grad():
            _, nu_first = forward(params, batch.xt, batch.t, None, sc, tokens=tokens.detach())
        sc = nu_first.data.copy()
    gain = noise_gain(params.cfg, sched.alpha_bar, batch.t)
    eps_hat, nu_hat = forward(params, batch.xt, batch.t, None, sc, tokens=tokens, gain=gain)
    loss, udf_term, noise_term = loss_uni(nu_hat, batch.nu, eps_hat, batch.eps, cfg.lambda_weight)
    if not np.isfinite(loss.data):
        raise NumericError(f"non-finite loss {float(loss.data)}")
    grads = backward(params, loss)
    clip_global_norm(grads, cfg.grad_clip)
    adam_update(params, grads, opt_state, cfg.lr, cfg.adam_betas)
    return {
        "loss": float(loss.data),
        "udf_term": udf_term,
        "noise_term": noise_term,
        "selfcond": use_selfcond,
    }


def step_seed(seed: int, step: int) -> list:
    return [int(seed), int(step)]


def train(
    params: NetParams,
    dataset: list,
    sched: DiffusionSchedule,
    cfg: TrainConfig,
    log_path=None,
    opt_state: AdamState | None = None,
    start_step: int = 0,
    callback=None,
) -> list:
    """Run ``cfg.steps`` optimization steps; returns the per-step loss records.

    Each step draws its batch and self-conditioning coin from a generator
    seeded by ``(cfg.seed, step)``, so runs are reproducible and resumable.
    """
    cfg.validate()
    opt_state = opt_state or AdamState()
    history = []
    fh = writer = None
    if log_path is not None:
        fh = open(log_path, "w", newline="")
        writer = csv.writer(fh)
        writer.writerow(LOG_FIELDS)
    try:
        for step in range(start_step, start_step + cfg.steps):
            t0 = time.perf_counter()
            rng = np.random.default_rng(step_seed(cfg.seed, step))
            batch = make_batch(dataset, sched, cfg, rng)
            rec = train_step(params, batch, cfg, sched, opt_state, rng)
            rec["step"] = step
            rec["wall_ms"] = (time.perf_counter() - t0) * 1e3
            history.append(rec)
            if writer is not None:
                writer.writerow(
                    [step, repr(rec["loss"]), repr(rec["udf_term"]), repr(rec["noise_term"]),
                     f"{rec['wall_ms']:.1f}"]
                )
            if callback is not None:
                callback(step, rec, params, opt_state)
    finally:
        if fh is not None:
            fh.close()
    return history
