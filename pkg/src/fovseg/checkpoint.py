"""Checkpoint serialization.

Weights go into a flat binary container: an 8-byte magic, a 64-bit
little-endian index length, then one index entry per tensor (length-
prefixed UTF-8 name, rank, dims, payload offset, payload byte length, all
64-bit little-endian), followed by the concatenated float32 payloads.
The model configuration is written alongside as ``<path>.cfg`` key-value
text.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np
import torch

from .model import ModelConfig, Segmenter

MAGIC = b"FOVSEG01"


class CheckpointError(ValueError):
    pass


def _pack_u64(*values) -> bytes:
    return struct.pack("<" + "Q" * len(values), *values)


def save_tensors(path, tensors: dict[str, np.ndarray]):
    """Write named float32 tensors into the binary container format."""
    index = bytearray()
    payload = bytearray()
    for name, arr in tensors.items():
        arr = np.asarray(arr, dtype=np.float32)  # keeps 0-d shapes intact
        data = arr.astype("<f4").tobytes(order="C")
        name_b = name.encode("utf-8")
        index += _pack_u64(len(name_b)) + name_b
        index += _pack_u64(arr.ndim, *arr.shape)
        index += _pack_u64(len(payload), len(data))
        payload += data
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(_pack_u64(len(index)))
        fh.write(bytes(index))
        fh.write(bytes(payload))


def load_tensors(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:8] != MAGIC:
        raise CheckpointError(f"{path}: bad magic")
    (index_len,) = struct.unpack_from("<Q", blob, 8)
    pos = 16
    index_end = 16 + index_len
    data_start = index_end
    tensors = {}
    while pos < index_end:
        (name_len,) = struct.unpack_from("<Q", blob, pos)
        pos += 8
        name = blob[pos:pos + name_len].decode("utf-8")
        pos += name_len
        (ndim,) = struct.unpack_from("<Q", blob, pos)
        pos += 8
        shape = struct.unpack_from("<" + "Q" * ndim, blob, pos)
        pos += 8 * ndim
        offset, nbytes = struct.unpack_from("<QQ", blob, pos)
        pos += 16
        start = data_start + offset
        arr = np.frombuffer(blob, dtype="<f4", count=nbytes // 4, offset=start)
        tensors[name] = arr.reshape(shape).copy()
    return tensors


def config_to_text(config: ModelConfig) -> str:
    lines = []
    for key in ("d_model", "n_heads", "n_blocks", "mlp_expansion", "pe_hidden",
                "per_layer_pe", "shared_pe_norm"):
        lines.append(f"{key} = {getattr(config, key)}")
    sizes = ",".join(str(p) for p in config.patch_sizes)
    lines.append(f"patch_sizes = {sizes}")
    return "\n".join(lines) + "\n"


def config_from_text(text: str) -> ModelConfig:
    kv = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise CheckpointError(f"config line {lineno}: expected 'key = value'")
        key, _, value = line.partition("=")
        kv[key.strip()] = value.strip()
    try:
        return ModelConfig(
            d_model=int(kv["d_model"]),
            n_heads=int(kv["n_heads"]),
            n_blocks=int(kv["n_blocks"]),
            mlp_expansion=int(kv["mlp_expansion"]),
            pe_hidden=int(kv["pe_hidden"]),
            patch_sizes=tuple(int(p) for p in kv["patch_sizes"].split(",")),
            per_layer_pe=kv["per_layer_pe"] == "True",
            shared_pe_norm=kv["shared_pe_norm"] == "True",
        )
    except KeyError as exc:
        raise CheckpointError(f"config missing key {exc}") from exc


def save_checkpoint(path, model: Segmenter):
    """Write weight container at ``path`` and config text at ``path.cfg``."""
    path = Path(path)
    tensors = {name: param.detach().cpu().numpy()
               for name, param in model.state_dict().items()}
    save_tensors(path, tensors)
    path.with_name(path.name + ".cfg").write_text(config_to_text(model.config))


def load_checkpoint(path) -> Segmenter:
    path = Path(path)
    cfg_path = path.with_name(path.name + ".cfg")
    if not cfg_path.exists():
        raise CheckpointError(f"missing config file {cfg_path}")
    config = config_from_text(cfg_path.read_text())
    model = Segmenter(config)
    tensors = load_tensors(path)
    state = {name: torch.from_numpy(arr) for name, arr in tensors.items()}
    model.load_state_dict(state)
    return model
