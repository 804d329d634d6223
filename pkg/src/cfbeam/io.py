"""Experiment configuration, the CFBF1 tensor container, and config hashing.

Container layout (little-endian)::

    b"CFBF1"
    u64 metadata length, metadata as UTF-8 JSON
    u64 entry count
    per entry: u32 name length, UTF-8 name, u8 kind, u32 rank, rank x u64 dims, raw values
    u32 CRC-32 of every preceding byte

Kinds: 0 real64, 1 complex as (real64, real64) pairs, 2 int64.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

import numpy as np

from .accounting import SCHEMES
from .channel import Geometry, Multipath, ScenarioConfig
from .models.architectures import ArchConfig
from .models.training import TrainConfig

MAGIC = b"CFBF1"
KIND_REAL, KIND_COMPLEX, KIND_INT = 0, 1, 2


class ConfigError(ValueError):
    pass


class ContainerError(OSError):
    pass


# ------------------------------------------------------------------ container
def _kind(a: np.ndarray) -> int:
    if np.iscomplexobj(a):
        return KIND_COMPLEX
    if a.dtype.kind in "iub":
        return KIND_INT
    if a.dtype.kind == "f":
        return KIND_REAL
    raise ContainerError(f"unsupported dtype {a.dtype}")


def encode_container(tensors: Dict[str, np.ndarray], metadata: Optional[dict] = None) -> bytes:
    meta = json.dumps(metadata or {}, sort_keys=True, separators=(",", ":")).encode()
    parts = [MAGIC, struct.pack("<Q", len(meta)), meta, struct.pack("<Q", len(tensors))]
    for name, value in tensors.items():
        a = np.asarray(value)
        kind = _kind(a)
        if kind == KIND_COMPLEX:
            raw = np.ascontiguousarray(a, dtype="<c16").tobytes()
        elif kind == KIND_INT:
            raw = np.ascontiguousarray(a, dtype="<i8").tobytes()
        else:
            raw = np.ascontiguousarray(a, dtype="<f8").tobytes()
        key = name.encode()
        parts += [struct.pack("<I", len(key)), key, struct.pack("<BI", kind, a.ndim),
                  struct.pack(f"<{a.ndim}Q", *a.shape), raw]
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


def decode_container(data: bytes) -> Tuple[Dict[str, np.ndarray], dict]:
    if len(data) < len(MAGIC) + 20 or data[:len(MAGIC)] != MAGIC:
        raise ContainerError("not a CFBF1 container")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    if zlib.crc32(body) & 0xFFFFFFFF != crc:
        raise ContainerError("CRC mismatch: container is corrupted")
    pos = len(MAGIC)

    def take(n):
        nonlocal pos
        if pos + n > len(body):
            raise ContainerError("truncated container")
        chunk = body[pos:pos + n]
        pos += n
        return chunk

    (meta_len,) = struct.unpack("<Q", take(8))
    metadata = json.loads(take(meta_len).decode())
    (count,) = struct.unpack("<Q", take(8))
    tensors = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<I", take(4))
        name = take(name_len).decode()
        kind, rank = struct.unpack("<BI", take(5))
        dims = struct.unpack(f"<{rank}Q", take(8 * rank))
        n = int(np.prod(dims, dtype=np.int64)) if rank else 1
        dtype = {KIND_REAL: "<f8", KIND_COMPLEX: "<c16", KIND_INT: "<i8"}.get(kind)
        if dtype is None:
            raise ContainerError(f"unknown element kind {kind}")
        itemsize = np.dtype(dtype).itemsize
        tensors[name] = np.frombuffer(take(n * itemsize), dtype=dtype).reshape(dims).astype(dtype[1:])
    if pos != len(body):
        raise ContainerError("trailing bytes after the last entry")
    return tensors, metadata


def save_container(path, tensors: Dict[str, np.ndarray], metadata: Optional[dict] = None) -> None:
    data = encode_container(tensors, metadata)
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    tmp.replace(path)


def load_container(path) -> Tuple[Dict[str, np.ndarray], dict]:
    return decode_container(Path(path).read_bytes())


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# --------------------------------------------------------------------- config
@dataclass(frozen=True)
class BeamTrainingConfig:
    bits: int = 8
    floor_db: float = -140.0
    ceil_db: float = -60.0
    codebook_size: int = 16
    ssb_oversample: int = 8
    # FDP solutions used for codebook design: "ofdp" or "zf"; at most this many training samples.
    codebook_source: str = "ofdp"
    codebook_samples: int = 4000

    def __post_init__(self):
        if not 1 <= self.bits <= 16:
            raise ConfigError("beamtraining.bits must be in [1, 16]")
        if not self.ceil_db > self.floor_db:
            raise ConfigError("beamtraining.ceil_db must exceed floor_db")
        if self.codebook_size < 1 or self.codebook_samples < 1 or self.ssb_oversample < 1:
            raise ConfigError("codebook_size, codebook_samples and ssb_oversample must be >= 1")
        if self.codebook_source not in ("ofdp", "zf"):
            raise ConfigError("beamtraining.codebook_source must be 'ofdp' or 'zf'")


@dataclass(frozen=True)
class ExperimentConfig:
    scenario: ScenarioConfig = field(default_factory=ScenarioConfig)
    n_samples: int = 20_000
    split: float = 0.85
    beamtraining: BeamTrainingConfig = field(default_factory=BeamTrainingConfig)
    schemes: Tuple[str, ...] = SCHEMES
    train: TrainConfig = field(default_factory=TrainConfig)
    arch: ArchConfig = field(default_factory=ArchConfig)
    # Noise sweep: explicit dBW levels, or mean-SNR targets (dB) resolved on the dataset.
    noise_dbw: Tuple[float, ...] = ()
    snr_db: Tuple[float, ...] = (3.0, 8.0, 13.0, 18.0, 23.0)
    # Sweep points (indices, negative allowed) at which the DNNs are trained and scored.
    dnn_points: Tuple[int, ...] = (-1,)
    output_dir: str = "results"

    def __post_init__(self):
        bad = [s for s in self.schemes if s not in SCHEMES]
        if bad:
            raise ConfigError(f"unknown schemes {bad}; choose from {list(SCHEMES)}")
        if self.noise_dbw and self.snr_db:
            raise ConfigError("give either noise_dbw or snr_db, not both")
        if self.n_samples < 1 or not 0 < self.split <= 1:
            raise ConfigError("n_samples must be >= 1 and split in (0, 1]")
        n_points = len(self.noise_dbw or self.snr_db)
        for i in self.dnn_points:
            if not -n_points <= i < n_points:
                raise ConfigError(f"dnn_points index {i} outside the sweep")

    @property
    def sweep(self) -> Tuple[float, ...]:
        return tuple(self.noise_dbw or self.snr_db)

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)


_SECTIONS = {
    "scenario": ScenarioConfig,
    "beamtraining": BeamTrainingConfig,
    "train": TrainConfig,
    "arch": ArchConfig,
}
_NESTED = {"geometry": Geometry, "multipath": Multipath}
_TUPLES = ("schemes", "noise_dbw", "snr_db", "dnn_points")


def _check_keys(d: dict, cls, where: str) -> None:
    if not isinstance(d, dict):
        raise ConfigError(f"{where or 'config'} must be an object")
    names = {f.name for f in dataclasses.fields(cls)}
    for k in d:
        if k not in names:
            raise ConfigError(f"unknown key {(where + '.' if where else '') + k!r}")


def _tuplify(v):
    if isinstance(v, list):
        return tuple(_tuplify(x) for x in v)
    return v


def _build(cls, d: dict, where: str):
    _check_keys(d, cls, where)
    kwargs = {}
    for k, v in d.items():
        path = f"{where}.{k}" if where else k
        if k in _NESTED and cls is ScenarioConfig:
            v = _build(_NESTED[k], v or {}, path)
        elif k in _SECTIONS and cls is ExperimentConfig:
            v = _build(_SECTIONS[k], v or {}, path)
        elif isinstance(v, list):
            v = _tuplify(v)
        kwargs[k] = v
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where or 'config'}: {exc}") from exc


def config_from_dict(d: dict) -> ExperimentConfig:
    return _build(ExperimentConfig, d, "")


def config_to_dict(cfg) -> dict:
    def conv(v):
        if dataclasses.is_dataclass(v):
            return {f.name: conv(getattr(v, f.name)) for f in dataclasses.fields(v)}
        if isinstance(v, (tuple, list)):
            return [conv(x) for x in v]
        if isinstance(v, np.generic):
            return v.item()
        return v

    return conv(cfg)


def load_config(path) -> ExperimentConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ContainerError(f"cannot read config {path}: {exc}") from exc
    try:
        d = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    return config_from_dict(d)


def save_config(cfg: ExperimentConfig, path) -> None:
    Path(path).write_text(json.dumps(config_to_dict(cfg), indent=2, sort_keys=True) + "\n")


def config_hash(cfg) -> str:
    """Short SHA-256 of the canonical JSON form; the output location is not part of it."""
    d = config_to_dict(cfg)
    d.pop("output_dir", None)
    text = json.dumps(d, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode()).hexdigest()[:16]


def apply_overrides(cfg: ExperimentConfig, overrides: List[str]) -> ExperimentConfig:
    """``key.sub=value`` overrides (value parsed as JSON, else taken as a string)."""
    d = config_to_dict(cfg)
    for item in overrides:
        key, sep, raw = item.partition("=")
        if not sep:
            raise ConfigError(f"override {item!r} is not key=value")
        try:
            value: Any = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = d
        parts = key.split(".")
        for p in parts[:-1]:
            if not isinstance(node.get(p), dict):
                raise ConfigError(f"unknown key {key!r}")
            node = node[p]
        if parts[-1] not in node:
            raise ConfigError(f"unknown key {key!r}")
        node[parts[-1]] = value
        if parts == ["noise_dbw"] and value:
            d["snr_db"] = []
        if parts == ["snr_db"] and value:
            d["noise_dbw"] = []
    return config_from_dict(d)
