"""Shared test utilities: a small network config and a finite-difference checker."""

import numpy as np

from udfdiff import autograd as ag
from udfdiff.net import GROUPS, NetConfig, backward, forward, init_params
from udfdiff.train import loss_uni

SMALL = NetConfig(d_model=8, n_heads=2, n_cond_tokens=6, time_embed_dim=4, depth=1, mlp_ratio=2)


def small_problem(seed=0, n=5, m=10, cfg=SMALL):
    """A tiny network plus a fixed input and target set with self-conditioning active."""
    rng = np.random.default_rng(seed)
    params = init_params(cfg, seed)
    for t in params.tensors.values():
        # move biases and gains off their init so every parameter has a generic gradient
        t.data += 0.1 * rng.standard_normal(t.data.shape)
    inputs = dict(
        xt=rng.standard_normal((n, 3)),
        t=int(rng.integers(1, 1000)),
        P=rng.standard_normal((m, 3)),
        sc=rng.uniform(0, 0.5, n),
        nu=rng.uniform(0, 0.5, n),
        eps=rng.standard_normal((n, 3)),
    )
    return params, inputs


def loss_fn(params, inp):
    eps_hat, nu_hat = forward(params, inp["xt"], inp["t"], inp["P"], inp["sc"])
    loss, _, _ = loss_uni(nu_hat, inp["nu"], eps_hat, inp["eps"])
    return loss


def gradcheck(params, inp, n_coords=240, h=1e-5, seed=0, floor=1e-8):
    """Compare analytic gradients with central differences at sampled coordinates.

    Coordinates are spread over every parameter group. Returns
    ``(max_rel_err, records)`` with one ``(name, index, analytic, numeric)``
    record per coordinate. The relative error divides by
    ``max(|analytic|, |numeric|, floor)``.
    """
    rng = np.random.default_rng(seed)
    grads = backward(params, loss_fn(params, inp))
    names = params.names()
    by_group = {g: [n for n in names if n.split(".")[0] == g] for g in GROUPS}
    per_group = -(-n_coords // len(GROUPS))
    records = []
    with ag.no_grad():
        for g in GROUPS:
            for _ in range(per_group):
                name = by_group[g][int(rng.integers(len(by_group[g])))]
                arr = params[name].data
                idx = tuple(int(rng.integers(s)) for s in arr.shape)
                orig = arr[idx]
                arr[idx] = orig + h
                fp = float(loss_fn(params, inp).data)
                arr[idx] = orig - h
                fm = float(loss_fn(params, inp).data)
                arr[idx] = orig
                records.append((name, idx, float(grads[name][idx]), (fp - fm) / (2 * h)))
    rel = [abs(a - n) / max(abs(a), abs(n), floor) for _, _, a, n in records]
    return max(rel), records


def corrupted_files(root):
    """Write malformed cloud and checkpoint files; returns ``(label, path, kind)`` triples.

    ``kind`` is ``"cloud"`` or ``"ckpt"``. Every file must be rejected with a
    structured error by the matching reader.
    """
    import struct
    from pathlib import Path

    from udfdiff.geometry import PointCloud
    from udfdiff.store import checkpoint_bytes, cloud_bytes

    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(0)
    cloud = cloud_bytes(PointCloud(rng.standard_normal((10, 3))))
    ckpt = checkpoint_bytes(init_params(SMALL, 0))

    def with_length(body):
        return body + struct.pack("<Q", len(body))

    inner = ckpt[:-8]
    # first entry header starts after magic and count
    name_len = struct.unpack_from("<I", inner, 8)[0]
    rank_at = 12 + name_len
    cases = [
        ("cloud_bad_magic", b"XXXX" + cloud[4:], "cloud"),
        ("cloud_empty_file", b"", "cloud"),
        ("cloud_header_only", cloud[:6], "cloud"),
        ("cloud_truncated_body", cloud[:-5], "cloud"),
        ("cloud_extra_bytes", cloud + b"\0\0\0\0", "cloud"),
        ("cloud_count_mismatch", cloud[:4] + struct.pack("<I", 11) + cloud[8:], "cloud"),
        ("cloud_zero_points", b"IPC1" + struct.pack("<IB", 0, 0), "cloud"),
        ("cloud_unknown_flag", cloud[:8] + bytes([4]) + cloud[9:], "cloud"),
        ("ckpt_bad_magic", b"IPKX" + ckpt[4:], "ckpt"),
        ("ckpt_truncated", ckpt[: len(ckpt) // 2], "ckpt"),
        ("ckpt_length_check", ckpt[:-8] + struct.pack("<Q", 7), "ckpt"),
        ("ckpt_count_too_high", with_length(inner[:4] + struct.pack("<I", 10**6) + inner[8:]), "ckpt"),
        ("ckpt_count_too_low", with_length(inner[:4] + struct.pack("<I", 1) + inner[8:]), "ckpt"),
        ("ckpt_huge_rank", with_length(inner[:rank_at] + struct.pack("<I", 99) + inner[rank_at + 4:]), "ckpt"),
        ("ckpt_bad_hash", _patch_entry(ckpt, "__net_config_hash__", np.array([1.0])), "ckpt"),
        ("ckpt_unknown_entry", _patch_entry(ckpt, "udf_decoder.head_b2", None, rename="udf_decoder.bogus"), "ckpt"),
        ("ckpt_wrong_shape", _patch_shape(ckpt, "noise_decoder.head_b2"), "ckpt"),
    ]
    out = []
    for label, payload, kind in cases:
        path = root / f"{label}.{'ipc' if kind == 'cloud' else 'ipk'}"
        path.write_bytes(payload)
        out.append((label, path, kind))
    return out


def _entries(ckpt):
    import struct

    body = ckpt[:-8]
    count = struct.unpack_from("<I", body, 4)[0]
    pos, out = 8, []
    for _ in range(count):
        (n,) = struct.unpack_from("<I", body, pos)
        name = body[pos + 4 : pos + 4 + n].decode()
        p = pos + 4 + n
        (rank,) = struct.unpack_from("<I", body, p)
        dims = struct.unpack_from(f"<{rank}I", body, p + 4)
        end = p + 4 + 4 * rank + 8 * int(np.prod(dims) if rank else 1)
        out.append((name, pos, end, dims))
        pos = end
    return body, out


def _encode(name, arr):
    import struct

    raw = name.encode()
    return (struct.pack("<I", len(raw)) + raw + struct.pack("<I", arr.ndim)
            + struct.pack(f"<{arr.ndim}I", *arr.shape) + arr.astype("<f8").tobytes())


def _rebuild(body, start, end, replacement):
    import struct

    new = body[:start] + replacement + body[end:]
    return new + struct.pack("<Q", len(new))


def _patch_entry(ckpt, name, value, rename=None):
    body, entries = _entries(ckpt)
    for n, s, e, dims in entries:
        if n == name:
            if value is None:
                import struct

                (k,) = struct.unpack_from("<I", body, s)
                rank_at = s + 4 + k
                value = np.frombuffer(body[rank_at + 4 + 4 * len(dims) : e], "<f8").reshape(dims)
            return _rebuild(body, s, e, _encode(rename or name, value))
    raise KeyError(name)


def _patch_shape(ckpt, name):
    body, entries = _entries(ckpt)
    for n, s, e, dims in entries:
        if n == name:
            return _rebuild(body, s, e, _encode(name, np.zeros((1,) + tuple(dims))[..., :1]))
    raise KeyError(name)
