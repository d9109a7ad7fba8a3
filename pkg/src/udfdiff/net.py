"""Conditional denoiser predicting per-point noise and unsigned distance.

Data flow for one call of :func:`forward`::

    P  --FPS--> cond_encoder ----------------------> tokens (M, d)
    xt --query_embed--> FiLM(time_embed(t)) --> e (N, d)
    e  --udf_decoder(tokens)--> softplus --> nu_hat (N,)
    [e | sc] --selfcond_proj--> noise_decoder(tokens) --> eps_hat (N, 3)

``sc`` is the self-condition: the UDF prediction from a previous pass, or
the placeholder value -1. Every decoder is a stack of pre-norm
cross-attention blocks followed by a two-layer head; the two decoders
differ only in input and output width.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import asdict, dataclass

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .errors import ContractError, NumericError, ParameterError, ShapeError

PLACEHOLDER = -1.0

GROUPS = (
    "cond_encoder",
    "query_embed",
    "time_embed",
    "selfcond_proj",
    "udf_decoder",
    "noise_decoder",
)


@dataclass(frozen=True)
class NetConfig:
    d_model: int = 64
    n_heads: int = 4
    n_cond_tokens: int = 256
    time_embed_dim: int = 32
    depth: int = 1
    mlp_ratio: int = 2
    activation: str = "gelu"
    # noise-head output gain reference; 0 disables (see noise_gain)
    eps_ref: float = 0.0

    def validate(self) -> None:
        for name in ("d_model", "n_heads", "n_cond_tokens", "time_embed_dim", "depth", "mlp_ratio"):
            if getattr(self, name) < 1:
                raise ParameterError(f"{name} must be >= 1")
        if self.d_model % self.n_heads:
            raise ParameterError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")
        if self.time_embed_dim % 2:
            raise ParameterError("time_embed_dim must be even")
        if not (self.eps_ref >= 0 and math.isfinite(self.eps_ref)):
            raise ParameterError("eps_ref must be finite and >= 0")
        if self.activation != "gelu":
            raise ParameterError(f"unsupported activation {self.activation!r}")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    def digest(self) -> str:
        text = ";".join(f"{k}={v}" for k, v in sorted(asdict(self).items()))
        return hashlib.sha256(text.encode()).hexdigest()


class NetParams:
    """Named parameter tensors plus the config that shaped them."""

    def __init__(self, cfg: NetConfig, tensors: dict):
        self.cfg = cfg
        self.tensors = tensors

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __iter__(self):
        return iter(self.tensors)

    def items(self):
        return self.tensors.items()

    def names(self, group: str | None = None) -> list:
        if group is None:
            return list(self.tensors)
        return [n for n in self.tensors if n.split(".", 1)[0] == group]

    def arrays(self) -> dict:
        return {n: t.data for n, t in self.tensors.items()}

    def zero_grad(self):
        for t in self.tensors.values():
            t.grad = None

    def copy(self) -> "NetParams":
        return NetParams(self.cfg, {n: Tensor(t.data.copy(), True) for n, t in self.tensors.items()})


def param_shapes(cfg: NetConfig) -> dict:
    d, h = cfg.d_model, cfg.d_model * cfg.mlp_ratio
    shapes = {
        "cond_encoder.w1": (3, d),
        "cond_encoder.b1": (d,),
        "cond_encoder.w2": (d, d),
        "cond_encoder.b2": (d,),
        "cond_encoder.ln_g": (d,),
        "cond_encoder.ln_b": (d,),
        "query_embed.w1": (3, d),
        "query_embed.b1": (d,),
        "query_embed.w2": (d, d),
        "query_embed.b2": (d,),
        "query_embed.out_w": (d, d),
        "query_embed.out_b": (d,),
        "time_embed.w": (cfg.time_embed_dim, 2 * d),
        "time_embed.b": (2 * d,),
        "selfcond_proj.w": (d + 1, d),
        "selfcond_proj.b": (d,),
    }
    for dec, in_dim, out_dim in (("udf_decoder", d, 1), ("noise_decoder", None, 3)):
        if in_dim is not None:
            shapes[f"{dec}.in_w"] = (in_dim, d)
            shapes[f"{dec}.in_b"] = (d,)
        for k in range(cfg.depth):
            p = f"{dec}.block{k}"
            shapes.update(
                {
                    f"{p}.ln1_g": (d,),
                    f"{p}.ln1_b": (d,),
                    f"{p}.wq": (d, d),
                    f"{p}.wk": (d, d),
                    f"{p}.wv": (d, d),
                    f"{p}.wo": (d, d),
                    f"{p}.bo": (d,),
                    f"{p}.ln2_g": (d,),
                    f"{p}.ln2_b": (d,),
                    f"{p}.mlp_w1": (d, h),
                    f"{p}.mlp_b1": (h,),
                    f"{p}.mlp_w2": (h, d),
                    f"{p}.mlp_b2": (d,),
                }
            )
        shapes.update(
            {
                f"{dec}.head_ln_g": (d,),
                f"{dec}.head_ln_b": (d,),
                f"{dec}.head_w1": (d, d),
                f"{dec}.head_b1": (d,),
                f"{dec}.head_w2": (d, out_dim),
                f"{dec}.head_b2": (out_dim,),
            }
        )
    return shapes


def init_params(cfg: NetConfig, seed: int = 0) -> NetParams:
    cfg.validate()
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, shape in param_shapes(cfg).items():
        leaf = name.rsplit(".", 1)[1]
        if leaf.endswith("_g"):
            data = np.ones(shape)
        elif len(shape) == 1:
            data = np.zeros(shape)
        else:
            data = rng.standard_normal(shape) / math.sqrt(shape[0])
        tensors[name] = Tensor(data, requires_grad=True)
    return NetParams(cfg, tensors)


# ---------------------------------------------------------------------------
# condition


def farthest_point_indices(points: np.ndarray, n: int) -> np.ndarray:
    """Farthest-point sampling with an order-independent start.

    The first pick is the point farthest from the centroid (ties broken by
    lexicographic coordinate order). Clouds with fewer than ``n`` points are
    cycled, i.e. sampled with replacement in FPS order.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    m = len(pts)
    if m == 0:
        raise ShapeError("cannot subsample an empty cloud")
    k = min(n, m)
    d0 = np.sum((pts - pts.mean(axis=0)) ** 2, axis=1)
    cand = np.flatnonzero(d0 == d0.max())
    start = cand[np.lexsort(pts[cand].T[::-1])[0]]
    picked = np.empty(k, dtype=np.int64)
    picked[0] = start
    dist = np.sum((pts - pts[start]) ** 2, axis=1)
    for i in range(1, k):
        nxt = int(np.argmax(dist))
        picked[i] = nxt
        dist = np.minimum(dist, np.sum((pts - pts[nxt]) ** 2, axis=1))
    if k < n:
        picked = picked[np.arange(n) % k]
    return picked


def select_condition(points: np.ndarray, n: int) -> np.ndarray:
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(pts) == n:
        return pts
    return pts[farthest_point_indices(pts, n)]


def _linear(x, params, w, b):
    return x @ params[w] + params[b]


def _check(t: Tensor, where: str) -> Tensor:
    if not np.all(np.isfinite(t.data)):
        raise NumericError(f"non-finite activation in {where}")
    return t


def encode_condition(params: NetParams, P) -> Tensor:
    """Embed the partial cloud into ``n_cond_tokens`` feature tokens.

    ``P`` is an (M, 3) array / PointCloud, or a (B, M, 3) batch.
    """
    cfg = params.cfg
    pts = _as_points(P)
    if pts.shape[-2] == 0:
        raise ShapeError("condition cloud is empty")
    if pts.ndim == 2:
        sel = select_condition(pts, cfg.n_cond_tokens)
    else:
        sel = np.stack([select_condition(p, cfg.n_cond_tokens) for p in pts])
    h = ag.gelu(_linear(Tensor(sel), params, "cond_encoder.w1", "cond_encoder.b1"))
    h = _linear(h, params, "cond_encoder.w2", "cond_encoder.b2")
    h = h + ag.max_(h, axis=-2, keepdims=True)
    h = ag.layer_norm(h, params["cond_encoder.ln_g"], params["cond_encoder.ln_b"])
    return _check(h, "cond_encoder")


def timestep_embedding(t, dim: int) -> np.ndarray:
    """Sinusoidal embedding of integer timesteps; ``t`` scalar or (B,)."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    args = t[:, None] * freqs[None, :]
    return np.concatenate([np.sin(args), np.cos(args)], axis=-1)


def time_affine(params: NetParams, t) -> tuple:
    """(scale, shift) factors for a timestep, each shaped to broadcast over points."""
    d = params.cfg.d_model
    emb = Tensor(timestep_embedding(t, params.cfg.time_embed_dim))
    ss = _linear(emb, params, "time_embed.w", "time_embed.b")  # (B, 2d)
    ss = ss.reshape(-1, 1, 2 * d)
    scale, shift = ag.split_last(ss, (d, d))
    return scale, shift


def embed_queries(params: NetParams, xt, t, affine=None) -> Tensor:
    """Per-point embedding of query coordinates modulated by the timestep.

    ``affine`` overrides the (scale, shift) pair computed from ``t``.
    """
    x = Tensor(_as_batch(_as_points(xt)))
    h = ag.gelu(_linear(x, params, "query_embed.w1", "query_embed.b1"))
    h = _linear(h, params, "query_embed.w2", "query_embed.b2")
    scale, shift = time_affine(params, t) if affine is None else affine
    h = h * (1.0 + scale) + shift
    h = _linear(h, params, "query_embed.out_w", "query_embed.out_b")
    return _check(h, "query_embed")


def attach_selfcond(params: NetParams, e: Tensor, sc) -> Tensor:
    """Concatenate the self-condition channel to ``e`` and project back to width d."""
    sc = np.asarray(sc, dtype=np.float64)
    sc = sc.reshape(e.shape[:-1] + (1,))
    h = ag.concat([e, Tensor(sc)], axis=-1)
    return _linear(h, params, "selfcond_proj.w", "selfcond_proj.b")


def encode_queries(params: NetParams, xt, t, sc, affine=None) -> Tensor:
    """Query embedding with the self-condition channel attached (noise branch input)."""
    pts = _as_batch(_as_points(xt))
    sc = np.asarray(sc, dtype=np.float64)
    if sc.size != pts.shape[0] * pts.shape[1]:
        raise ShapeError(f"self-condition has {sc.size} entries for {pts.shape[1]} points")
    return attach_selfcond(params, embed_queries(params, pts, t, affine), sc)


def _cross_attention(params, prefix, x, tokens, cfg):
    B, N, d = x.shape
    M = tokens.shape[-2]
    H, dh = cfg.n_heads, cfg.head_dim
    q = (x @ params[f"{prefix}.wq"]).reshape(B, N, H, dh).transpose(0, 2, 1, 3)
    k = (tokens @ params[f"{prefix}.wk"]).reshape(B, M, H, dh).transpose(0, 2, 3, 1)
    v = (tokens @ params[f"{prefix}.wv"]).reshape(B, M, H, dh).transpose(0, 2, 1, 3)
    att = ag.softmax((q @ k) * (1.0 / math.sqrt(dh)), axis=-1)
    out = (att @ v).transpose(0, 2, 1, 3).reshape(B, N, d)
    return out @ params[f"{prefix}.wo"] + params[f"{prefix}.bo"]


def decode(params: NetParams, name: str, x: Tensor, tokens: Tensor) -> Tensor:
    """Shared decoder body: cross-attention blocks then a two-layer head."""
    cfg = params.cfg
    if f"{name}.in_w" in params.tensors:
        x = _linear(x, params, f"{name}.in_w", f"{name}.in_b")
    for k in range(cfg.depth):
        p = f"{name}.block{k}"
        h = ag.layer_norm(x, params[f"{p}.ln1_g"], params[f"{p}.ln1_b"])
        x = x + _cross_attention(params, p, h, tokens, cfg)
        h = ag.layer_norm(x, params[f"{p}.ln2_g"], params[f"{p}.ln2_b"])
        h = ag.gelu(_linear(h, params, f"{p}.mlp_w1", f"{p}.mlp_b1"))
        x = x + _linear(h, params, f"{p}.mlp_w2", f"{p}.mlp_b2")
        _check(x, p)
    h = ag.layer_norm(x, params[f"{name}.head_ln_g"], params[f"{name}.head_ln_b"])
    h = ag.gelu(_linear(h, params, f"{name}.head_w1", f"{name}.head_b1"))
    return _check(_linear(h, params, f"{name}.head_w2", f"{name}.head_b2"), f"{name}.head")


def noise_gain(cfg: NetConfig, alpha_bar, t) -> np.ndarray:
    """Fixed output gain ``max(1, eps_ref * sqrt(ab_t / (1 - ab_t)))`` for the noise head.

    Below noise level ``eps_ref`` the head then predicts displacement in
    units of ``eps_ref`` rather than raw noise, so the required input
    sensitivity stays bounded as ``t -> 1``. Returns ones when disabled.
    """
    t = np.asarray(t)
    if cfg.eps_ref <= 0:
        return np.ones(t.shape)
    ab = np.asarray(alpha_bar, dtype=np.float64)[t]
    return np.maximum(1.0, cfg.eps_ref * np.sqrt(ab / (1.0 - ab)))


def forward(
    params: NetParams, xt, t, P, sc, tokens: Tensor | None = None, affine=None, gain=None
):
    """Predict (eps_hat, nu_hat) for query points ``xt`` at timestep ``t``.

    Shapes follow the input: (N, 3) queries give eps_hat (N, 3) and nu_hat
    (N,); a (B, N, 3) batch gives (B, N, 3) and (B, N). ``t`` is a scalar or
    one timestep per batch item. ``tokens`` may carry precomputed condition
    tokens for ``P``. ``gain`` (scalar or one per batch item, see
    :func:`noise_gain`) multiplies the noise head output.
    """
    pts = _as_points(xt)
    batched = pts.ndim == 3
    xb = _as_batch(pts)
    B, N, _ = xb.shape
    sc = np.asarray(sc, dtype=np.float64)
    if sc.size != B * N:
        raise ShapeError(f"self-condition has {sc.size} entries for {B}x{N} query points")
    if tokens is None:
        pb = _as_points(P)
        tokens = encode_condition(params, pb if pb.ndim == 3 else pb[None])
    if tokens.shape[0] != B:
        raise ShapeError(f"condition batch {tokens.shape[0]} does not match query batch {B}")
    e = embed_queries(params, xb, t, affine)
    nu_hat = ag.softplus(decode(params, "udf_decoder", e, tokens)).reshape(B, N)
    h = attach_selfcond(params, e, sc.reshape(B, N))
    eps_hat = decode(params, "noise_decoder", h, tokens)
    if gain is not None:
        g = np.asarray(gain, dtype=np.float64)
        eps_hat = eps_hat * (g.reshape(-1, 1, 1) if g.ndim else g)
    if not batched:
        eps_hat, nu_hat = eps_hat.reshape(N, 3), nu_hat.reshape(N)
    return eps_hat, nu_hat


def backward(params: NetParams, loss: Tensor) -> dict:
    """Reverse-mode gradients of a scalar ``loss`` for every parameter tensor.

    Parameters the loss does not depend on get zero gradients.
    """
    if loss._backward is None:
        raise ContractError("backward needs a loss produced by a recorded forward pass")
    params.zero_grad()
    loss.backward()
    return {
        n: (np.zeros_like(t.data) if t.grad is None else t.grad) for n, t in params.items()
    }


def _as_points(x) -> np.ndarray:
    pts = getattr(x, "points", x)
    return np.asarray(pts, dtype=np.float64)


def _as_batch(pts: np.ndarray) -> np.ndarray:
    return pts[None] if pts.ndim == 2 else pts
