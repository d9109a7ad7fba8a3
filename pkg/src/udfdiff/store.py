"""Binary cloud and checkpoint files, ``key = value`` configs, CSV output.

Cloud file (little-endian)::

    b"IPC1" | u32 n | u8 flags (bit 0: normals) | n x 3 (or n x 6) float32

Checkpoint file (little-endian)::

    b"IPK1" | u32 entry count
    per entry: u32 name length | name (utf-8) | u32 rank | rank x u32 dims | float64 payload
    u64 byte length of everything above

Two reserved entries carry the network config and its hash so a checkpoint
cannot be loaded against a different architecture.
"""

from __future__ import annotations

import csv
import hashlib
import io
import os
import struct
import tempfile
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from .autograd import Tensor
from .diffusion import make_schedule
from .errors import ConfigError, FormatError, IncompatibleCheckpointError, UdfDiffError
from .geometry import PointCloud
from .net import NetConfig, NetParams, param_shapes
from .sample import SamplerConfig, check_mask
from .train import TrainConfig

CLOUD_MAGIC = b"IPC1"
CKPT_MAGIC = b"IPK1"
_CONFIG_ENTRY = "__net_config__"
_HASH_ENTRY = "__net_config_hash__"
_CONFIG_INT_FIELDS = ("d_model", "n_heads", "n_cond_tokens", "time_embed_dim", "depth", "mlp_ratio")
_CONFIG_FLOAT_FIELDS = ("eps_ref",)
_CONFIG_FIELDS = _CONFIG_INT_FIELDS + _CONFIG_FLOAT_FIELDS


def atomic_write_bytes(path, payload: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


# clouds ---------------------------------------------------------------------


def cloud_bytes(cloud: PointCloud) -> bytes:
    n = len(cloud)
    if n == 0:
        raise FormatError("refusing to write an empty cloud")
    has_normals = cloud.normals is not None
    body = cloud.points if not has_normals else np.concatenate([cloud.points, cloud.normals], axis=1)
    if np.any(np.abs(body) > np.finfo(np.float32).max):
        raise FormatError("cloud values exceed the 32-bit float range")
    return CLOUD_MAGIC + struct.pack("<IB", n, int(has_normals)) + body.astype("<f4").tobytes()


def write_cloud(path, cloud: PointCloud) -> None:
    atomic_write_bytes(path, cloud_bytes(cloud))


def parse_cloud(buf: bytes, source: str = "<bytes>") -> PointCloud:
    if len(buf) < 9:
        raise FormatError(f"{source}: header truncated ({len(buf)} bytes)")
    if buf[:4] != CLOUD_MAGIC:
        raise FormatError(f"{source}: bad magic {buf[:4]!r}")
    n, flags = struct.unpack_from("<IB", buf, 4)
    if flags & ~1:
        raise FormatError(f"{source}: unknown flags {flags:#x}")
    if n == 0:
        raise FormatError(f"{source}: point count is zero")
    width = 6 if flags & 1 else 3
    expected = 9 + 4 * width * n
    if len(buf) != expected:
        raise FormatError(
            f"{source}: body length {len(buf) - 9} does not match point count {n} (expected {expected - 9})"
        )
    body = np.frombuffer(buf, dtype="<f4", offset=9).reshape(n, width).astype(np.float64)
    return PointCloud(body[:, :3], body[:, 3:] if width == 6 else None)


def read_cloud(path) -> PointCloud:
    return parse_cloud(Path(path).read_bytes(), str(path))


# checkpoints ----------------------------------------------------------------


def config_hash(cfg: NetConfig) -> float:
    """48-bit config digest stored exactly as a float64."""
    return float(int(cfg.digest()[:12], 16))


def checkpoint_bytes(params: NetParams) -> bytes:
    cfg = params.cfg
    entries = [
        (_CONFIG_ENTRY, np.array([getattr(cfg, f) for f in _CONFIG_FIELDS], dtype=np.float64)),
        (_HASH_ENTRY, np.array([config_hash(cfg)])),
    ]
    entries += [(n, t.data) for n, t in params.items()]
    out = io.BytesIO()
    out.write(CKPT_MAGIC)
    out.write(struct.pack("<I", len(entries)))
    for name, arr in entries:
        raw = name.encode("utf-8")
        out.write(struct.pack("<I", len(raw)))
        out.write(raw)
        out.write(struct.pack("<I", arr.ndim))
        out.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    out.write(struct.pack("<Q", out.tell()))
    return out.getvalue()


def save_checkpoint(path, params: NetParams) -> None:
    atomic_write_bytes(path, checkpoint_bytes(params))


class _Reader:
    def __init__(self, buf: bytes, source: str):
        self.buf, self.pos, self.source = buf, 0, source

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise FormatError(f"{self.source}: truncated while reading {what}")
        chunk = self.buf[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]


def parse_checkpoint(buf: bytes, source: str = "<bytes>") -> dict:
    """Decode a checkpoint into ``{name: float64 array}`` (reserved entries included)."""
    if len(buf) < 16:
        raise FormatError(f"{source}: file truncated ({len(buf)} bytes)")
    if buf[:4] != CKPT_MAGIC:
        raise FormatError(f"{source}: bad magic {buf[:4]!r}")
    (length,) = struct.unpack("<Q", buf[-8:])
    if length != len(buf) - 8:
        raise FormatError(f"{source}: length check {length} does not match body {len(buf) - 8}")
    r = _Reader(buf[:-8], source)
    r.take(4, "magic")
    count = r.u32("entry count")
    out = {}
    for k in range(count):
        name_len = r.u32(f"entry {k} name length")
        try:
            name = r.take(name_len, f"entry {k} name").decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError(f"{source}: entry {k} name is not utf-8") from exc
        rank = r.u32(f"entry {name!r} rank")
        if rank > 8:
            raise FormatError(f"{source}: entry {name!r} rank {rank} is implausible")
        dims = struct.unpack(f"<{rank}I", r.take(4 * rank, f"entry {name!r} dims"))
        size = int(np.prod(dims)) if rank else 1
        payload = r.take(8 * size, f"entry {name!r} payload")
        if name in out:
            raise FormatError(f"{source}: duplicate entry {name!r}")
        out[name] = np.frombuffer(payload, dtype="<f8").reshape(dims).astype(np.float64)
    if r.pos != len(r.buf):
        raise FormatError(f"{source}: {len(r.buf) - r.pos} trailing bytes after {count} entries")
    return out


def _config_from_entries(entries: dict, source: str) -> NetConfig:
    if _CONFIG_ENTRY not in entries or _HASH_ENTRY not in entries:
        raise FormatError(f"{source}: missing network config entries")
    vals = entries[_CONFIG_ENTRY]
    if vals.shape != (len(_CONFIG_FIELDS),):
        raise FormatError(f"{source}: network config entry has shape {vals.shape}")
    try:
        kw = {f: int(v) for f, v in zip(_CONFIG_INT_FIELDS, vals)}
        kw.update((f, float(v)) for f, v in zip(_CONFIG_FLOAT_FIELDS, vals[len(_CONFIG_INT_FIELDS):]))
        cfg = NetConfig(**kw)
        cfg.validate()
    except (UdfDiffError, ValueError) as exc:
        raise FormatError(f"{source}: invalid network config: {exc}") from exc
    if float(entries[_HASH_ENTRY].reshape(-1)[0]) != config_hash(cfg):
        raise IncompatibleCheckpointError(f"{source}: config hash does not match stored config")
    return cfg


def load_checkpoint(path, cfg: NetConfig | None = None) -> NetParams:
    """Load parameters; if ``cfg`` is given it must match the stored config."""
    source = str(path)
    entries = parse_checkpoint(Path(path).read_bytes(), source)
    stored = _config_from_entries(entries, source)
    if cfg is not None and config_hash(cfg) != config_hash(stored):
        raise IncompatibleCheckpointError(
            f"{source}: checkpoint was saved for {stored}, not {cfg}"
        )
    shapes = param_shapes(stored)
    names = [n for n in entries if n not in (_CONFIG_ENTRY, _HASH_ENTRY)]
    unknown = sorted(set(names) - set(shapes))
    if unknown:
        raise FormatError(f"{source}: unknown parameter entries {unknown}")
    missing = sorted(set(shapes) - set(names))
    if missing:
        raise FormatError(f"{source}: missing parameter entries {missing}")
    tensors = {}
    for name, shape in shapes.items():
        arr = entries[name]
        if arr.shape != tuple(shape):
            raise FormatError(f"{source}: entry {name!r} has shape {arr.shape}, expected {shape}")
        tensors[name] = Tensor(arr.copy(), requires_grad=True)
    return NetParams(stored, tensors)


# configs ---------------------------------------------------------------------


@dataclass(frozen=True)
class ScheduleConfig:
    T: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02

    def build(self):
        return make_schedule(self.T, self.beta_start, self.beta_end)


@dataclass(frozen=True)
class EvalConfig:
    rho: float = 0.1


@dataclass(frozen=True)
class RunConfig:
    net: NetConfig = field(default_factory=NetConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def dump(self) -> str:
        lines = []
        for section, prefix in _SECTIONS:
            obj = getattr(self, section)
            for f in fields(obj):
                key = _KEY_ALIASES_REV.get((section, f.name), f.name)
                value = getattr(obj, f.name)
                if f.name == "selfcond_mask":
                    value = ",".join(f"{lo}:{hi}" for lo, hi in value)
                elif value is None:
                    value = "none"
                lines.append(f"{key} = {value}")
        return "\n".join(lines) + "\n"


_SECTIONS = (("net", ""), ("train", ""), ("sampler", ""), ("schedule", ""), ("eval", ""))
# keys whose field name is shared between sections get a section prefix
_KEY_ALIASES = {"sample_seed": ("sampler", "seed")}
_KEY_ALIASES_REV = {v: k for k, v in _KEY_ALIASES.items()}


def _key_table() -> dict:
    table = {}
    for section, cls in (
        ("net", NetConfig), ("train", TrainConfig), ("sampler", SamplerConfig),
        ("schedule", ScheduleConfig), ("eval", EvalConfig),
    ):
        for f in fields(cls):
            key = _KEY_ALIASES_REV.get((section, f.name), f.name)
            table[key] = (section, f.name, f.type)
    return table


def parse_mask(text: str) -> tuple:
    """Parse ``"lo:hi,lo:hi"`` into inclusive timestep intervals."""
    spans = []
    for part in filter(None, (p.strip() for p in text.split(","))):
        try:
            lo, hi = (int(v) for v in part.split(":"))
        except ValueError as exc:
            raise ConfigError(f"mask interval {part!r} is not of the form lo:hi") from exc
        spans.append((lo, hi))
    try:
        check_mask(spans)
    except UdfDiffError as exc:
        raise ConfigError(str(exc)) from exc
    return tuple(spans)


def _coerce(raw: str, type_name: str, key: str):
    t = str(type_name)
    if raw.lower() == "none" and "None" in t:
        return None
    if t.startswith("int"):
        return int(raw)
    if t.startswith("float"):
        return float(raw)
    if t == "tuple" and key == "selfcond_mask":
        return parse_mask(raw)
    return raw


def parse_config(text: str, source: str = "<config>") -> RunConfig:
    table = _key_table()
    values = {s: {} for s, _ in _SECTIONS}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in table:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        section, name, type_name = table[key]
        try:
            values[section][name] = _coerce(raw, type_name, key)
        except ConfigError as exc:
            raise ConfigError(f"{source}:{lineno}: {exc}") from exc
        except ValueError as exc:
            raise ConfigError(f"{source}:{lineno}: cannot parse {key} = {raw!r}") from exc
    try:
        cfg = RunConfig(
            net=NetConfig(**values["net"]),
            train=TrainConfig(**values["train"]),
            sampler=SamplerConfig(**values["sampler"]),
            schedule=ScheduleConfig(**values["schedule"]),
            eval=EvalConfig(**values["eval"]),
        )
        validate_run_config(cfg)
    except UdfDiffError as exc:
        raise ConfigError(f"{source}: {exc}") from exc
    return cfg


def validate_run_config(cfg: RunConfig) -> None:
    cfg.net.validate()
    cfg.train.validate()
    cfg.sampler.validate(cfg.schedule.T, cfg.train.clamp)
    cfg.schedule.build()
    if not cfg.eval.rho > 0:
        raise ConfigError("rho must be > 0")


def read_config(path) -> RunConfig:
    try:
        text = Path(path).read_bytes().decode("utf-8")
    except UnicodeDecodeError as exc:
        raise ConfigError(f"{path}: not valid UTF-8") from exc
    return parse_config(text, str(path))


# csv -------------------------------------------------------------------------


def write_csv(path, header, rows) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\r\n")
    w.writerow(header)
    w.writerows(rows)
    atomic_write_bytes(path, buf.getvalue().encode("utf-8"))


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
