"""Binary named-tensor checkpoints.

Layout (little-endian): ``b"BIVR"``, u32 version, u32 tensor count, then per
tensor: u32 name length, UTF-8 name, u32 rank, rank x u64 dims, float64
payload. Optimizer moments are stored as extra tensors ``adam.m.<name>``,
``adam.v.<name>`` and the scalar ``adam.step``. The run config sits beside
the file as ``<file>.config``.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import RunConfig
from .model import BivRecModel
from .rng import Rng
from .tensorcore import Tensor
from .trainer import Adam

MAGIC = b"BIVR"
VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class LoadReport:
    reinitialized: list[str] = field(default_factory=list)
    dropped: list[str] = field(default_factory=list)


def config_path(path: str | Path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".config")


def encode_tensors(tensors: dict[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name in sorted(tensors):
        arr = np.asarray(tensors[name], dtype="<f8")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(np.ascontiguousarray(arr).tobytes())
    return b"".join(parts)


def decode_tensors(blob: bytes, source: str = "<bytes>") -> dict[str, np.ndarray]:
    pos = 0

    def read(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(blob):
            raise CheckpointError(f"{source}: truncated at byte {pos} (needed {n} more)")
        chunk = blob[pos:pos + n]
        pos += n
        return chunk

    if read(4) != MAGIC:
        raise CheckpointError(f"{source}: not a checkpoint (bad magic)")
    version, count = struct.unpack("<II", read(8))
    if version != VERSION:
        raise CheckpointError(f"{source}: unsupported version {version}, expected {VERSION}")
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (length,) = struct.unpack("<I", read(4))
        try:
            name = read(length).decode("utf-8")
        except UnicodeDecodeError as err:
            raise CheckpointError(f"{source}: tensor name is not UTF-8") from err
        (rank,) = struct.unpack("<I", read(4))
        dims = struct.unpack(f"<{rank}Q", read(8 * rank))
        size = int(np.prod(dims, dtype=np.int64)) if rank else 1
        data = np.frombuffer(read(8 * size), dtype="<f8").astype(np.float64).reshape(dims)
        if name in out:
            raise CheckpointError(f"{source}: duplicate tensor {name!r}")
        out[name] = data
    if pos != len(blob):
        raise CheckpointError(f"{source}: {len(blob) - pos} trailing bytes")
    return out


def save_checkpoint(model: BivRecModel, path: str | Path, opt: Adam | None = None) -> Path:
    path = Path(path)
    tensors = {name: p.data for name, p in model.params.items()}
    if opt is not None:
        tensors["adam.step"] = np.array(float(opt.step_count))
        for name in model.params:
            tensors[f"adam.m.{name}"] = opt.m[name]
            tensors[f"adam.v.{name}"] = opt.v[name]
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(encode_tensors(tensors))
        model.config.save(config_path(path))
    except OSError as err:
        raise OSError(f"cannot write checkpoint {path}: {err}") from err
    return path


def read_checkpoint(path: str | Path) -> dict[str, np.ndarray]:
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as err:
        raise CheckpointError(f"cannot read checkpoint {path}: {err}") from err
    return decode_tensors(blob, str(path))


def load_checkpoint(path: str | Path, config: RunConfig | None = None, num_items: int | None = None,
                    feature_dim: int | None = None, rng: Rng | None = None,
                    ) -> tuple[BivRecModel, Adam | None, LoadReport]:
    """Rebuild a model (and optimizer state, when saved) from ``path``.

    ``num_items`` different from the stored catalog triggers the transfer
    protocol: the multimodal tower and shared parts load, the ID item table
    is freshly initialized and listed in the report.
    """
    tensors = read_checkpoint(path)
    if config is None:
        cpath = config_path(path)
        if not cpath.exists():
            raise CheckpointError(f"{path}: missing config sidecar {cpath}")
        config = RunConfig.load(cpath)
    stored_items = tensors["id.item_table"].shape[0] - 1 if "id.item_table" in tensors else None
    stored_fdim = tensors["mm.projection.w"].shape[0] if "mm.projection.w" in tensors else 0
    num_items = num_items if num_items is not None else stored_items
    if num_items is None:
        raise CheckpointError(f"{path}: catalog size unknown for a multimodal-only checkpoint; pass num_items")
    feature_dim = feature_dim if feature_dim is not None else stored_fdim
    if "mm" in config.views and feature_dim != stored_fdim:
        raise CheckpointError(f"mm.projection.w: feature dim {stored_fdim} in checkpoint, data has {feature_dim}")

    fresh = BivRecModel.init_params(config, num_items, feature_dim, rng or Rng(config.seed))
    report = LoadReport()
    params: dict[str, Tensor] = {}
    for name, init in fresh.items():
        if name not in tensors:
            raise CheckpointError(f"{path}: tensor {name!r} missing")
        stored = tensors[name]
        if stored.shape != init.shape:
            if name == "id.item_table" and stored_items != num_items:
                params[name] = init
                report.reinitialized.append(name)
                continue
            raise CheckpointError(f"{path}: tensor {name!r} has shape {stored.shape}, expected {init.shape}")
        params[name] = Tensor(stored.copy(), requires_grad=True)
    extra = [n for n in tensors if n not in fresh and not n.startswith("adam.")]
    report.dropped.extend(sorted(extra))
    model = BivRecModel(config, num_items, feature_dim, params=params)

    opt = None
    if "adam.step" in tensors and not report.reinitialized:
        opt = Adam.from_config(model.params, config)
        opt.step_count = int(tensors["adam.step"])
        for name in model.params:
            opt.m[name] = tensors[f"adam.m.{name}"].copy()
            opt.v[name] = tensors[f"adam.v.{name}"].copy()
    return model, opt, report
