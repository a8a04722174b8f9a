"""Checkpoint file format.

Layout: magic "XINR", u32 format version, u64 header length, UTF-8 JSON
header (arch config, domain spec, tensor directory with name/shape/offset),
then raw little-endian float32 tensor payloads in directory order.
Offsets are relative to the start of the payload section.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from .model import ArchConfig, DomainSpec, ExplorableModel, FeatureStore, MLPDecoder, PLANE_AXES

__all__ = [
    "save_checkpoint", "load_checkpoint",
    "CheckpointError", "CheckpointFormatError", "CheckpointVersionError",
    "CheckpointTruncatedError", "CheckpointShapeError",
]

MAGIC = b"XINR"
FORMAT_VERSION = 1


class CheckpointError(Exception):
    pass


class CheckpointFormatError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


class CheckpointShapeError(CheckpointError):
    pass


def save_checkpoint(model: ExplorableModel, path) -> None:
    tensors = model.tensors()
    directory = []
    offset = 0
    payloads = []
    for name, arr in tensors.items():
        arr32 = np.ascontiguousarray(arr, dtype=np.float32)
        directory.append({"name": name, "shape": list(arr.shape), "offset": offset})
        payloads.append(arr32)
        offset += arr32.nbytes
    header = {
        "arch": model.arch.to_dict(),
        "domain": model.domain.to_dict(),
        "tensors": directory,
    }
    header_bytes = json.dumps(header).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", FORMAT_VERSION))
        f.write(struct.pack("<Q", len(header_bytes)))
        f.write(header_bytes)
        for arr32 in payloads:
            if not np.little_endian:
                arr32 = arr32.byteswap()
            f.write(arr32.tobytes())


def load_checkpoint(path) -> ExplorableModel:
    with open(path, "rb") as f:
        head = f.read(4 + 4 + 8)
        if len(head) < 16 or head[:4] != MAGIC:
            raise CheckpointFormatError(f"bad magic in {path!r}")
        (version,) = struct.unpack("<I", head[4:8])
        if version != FORMAT_VERSION:
            raise CheckpointVersionError(
                f"format version {version}, expected {FORMAT_VERSION}")
        (header_len,) = struct.unpack("<Q", head[8:16])
        header_bytes = f.read(header_len)
        if len(header_bytes) != header_len:
            raise CheckpointTruncatedError("header truncated")
        try:
            header = json.loads(header_bytes.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            raise CheckpointFormatError(f"unreadable header: {e}") from e
        payload = f.read()

    arch = ArchConfig.from_dict(header["arch"])
    domain = DomainSpec.from_dict(header["domain"])
    tensors: dict[str, np.ndarray] = {}
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        end = start + count * 4
        if end > len(payload):
            raise CheckpointTruncatedError(
                f"tensor '{entry['name']}' extends past end of file")
        arr = np.frombuffer(payload[start:end], dtype="<f4").reshape(shape)
        tensors[entry["name"]] = arr.astype(np.float32, copy=True)

    expected = _expected_shapes(arch)
    for name, shape in expected.items():
        if name not in tensors:
            raise CheckpointShapeError(f"missing tensor '{name}'")
        if tensors[name].shape != shape:
            raise CheckpointShapeError(
                f"tensor '{name}' has shape {tensors[name].shape}, expected {shape}")

    feats = FeatureStore(
        grid3d=tensors["grid3d"],
        planes={name: tensors[f"plane_{name}"] for name, _ in PLANE_AXES},
        lines=[tensors[f"line_{i}"] for i in range(arch.n_params_m)],
    )
    n_layers = arch.decoder_layers + 1
    dec = MLPDecoder(
        weights=[tensors[f"decoder_w{i}"] for i in range(n_layers)],
        biases=[tensors[f"decoder_b{i}"] for i in range(n_layers)],
    )
    return ExplorableModel(arch=arch, features=feats, decoder=dec, domain=domain)


def _expected_shapes(arch: ArchConfig) -> dict:
    r, rp, rl = arch.spatial_grid_res, arch.plane_res, arch.line_res
    c, cp = arch.spatial_dim_C, arch.param_dim_Cp
    shapes = {"grid3d": (r, r, r, c)}
    for name, _ in PLANE_AXES:
        shapes[f"plane_{name}"] = (rp, rp, c)
    for i in range(arch.n_params_m):
        shapes[f"line_{i}"] = (rl, cp)
    widths = [c + cp] + [arch.decoder_hidden] * arch.decoder_layers + [1]
    for i in range(len(widths) - 1):
        shapes[f"decoder_w{i}"] = (widths[i + 1], widths[i])
        shapes[f"decoder_b{i}"] = (widths[i + 1],)
    return shapes
