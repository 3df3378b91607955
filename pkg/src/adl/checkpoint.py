"""Checkpoint container: a ``key=value`` manifest plus one float32 blob.

Layout of a checkpoint directory::

    manifest.txt   format/version, blob checksum, meta.* entries,
                   one tensor.<section>/<name>=<shape>@<byte offset> per array
    tensors.bin    concatenated little-endian float32 arrays
"""

from __future__ import annotations

import hashlib
from pathlib import Path

import numpy as np

FORMAT = "adl-checkpoint"
VERSION = 1
MANIFEST = "manifest.txt"
BLOB = "tensors.bin"


class CheckpointError(ValueError):
    pass


def write_checkpoint(path, tensors: dict[str, np.ndarray], meta: dict[str, str] | None = None) -> Path:
    """Write ``tensors`` (keys like ``"denoiser/encoder.0.conv1.weight"``) and string ``meta``."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    chunks = []
    entries = []
    offset = 0
    for key, arr in tensors.items():
        if any(c in key for c in "=\n"):
            raise CheckpointError(f"illegal tensor key {key!r}")
        raw = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        shape = ",".join(str(s) for s in np.shape(arr))
        entries.append(f"tensor.{key}={shape}@{offset}")
        chunks.append(raw)
        offset += len(raw)
    blob = b"".join(chunks)
    lines = [
        f"format={FORMAT}",
        f"version={VERSION}",
        f"blob={BLOB}",
        f"blob_bytes={len(blob)}",
        f"sha256={hashlib.sha256(blob).hexdigest()}",
    ]
    for k, v in (meta or {}).items():
        v = str(v)
        if "\n" in v or "\n" in k or "=" in k:
            raise CheckpointError(f"illegal meta entry {k!r}")
        lines.append(f"meta.{k}={v}")
    lines += entries
    (path / BLOB).write_bytes(blob)
    (path / MANIFEST).write_text("\n".join(lines) + "\n")
    return path


def read_checkpoint(path) -> tuple[dict[str, np.ndarray], dict[str, str]]:
    path = Path(path)
    manifest = path / MANIFEST
    if not manifest.exists():
        raise CheckpointError(f"{path}: no {MANIFEST}")
    head: dict[str, str] = {}
    meta: dict[str, str] = {}
    layout: list[tuple[str, tuple[int, ...], int]] = []
    for line in manifest.read_text().splitlines():
        if not line.strip():
            continue
        if "=" not in line:
            raise CheckpointError(f"malformed manifest line {line!r}")
        k, v = line.split("=", 1)
        if k.startswith("meta."):
            meta[k[5:]] = v
        elif k.startswith("tensor."):
            shape_s, off_s = v.rsplit("@", 1)
            shape = tuple(int(s) for s in shape_s.split(",")) if shape_s else ()
            layout.append((k[7:], shape, int(off_s)))
        else:
            head[k] = v
    if head.get("format") != FORMAT:
        raise CheckpointError(f"{path}: not an {FORMAT} directory")
    if int(head.get("version", -1)) != VERSION:
        raise CheckpointError(f"{path}: checkpoint version {head.get('version')} unsupported (expected {VERSION})")
    blob = (path / head.get("blob", BLOB)).read_bytes()
    if len(blob) != int(head["blob_bytes"]) or hashlib.sha256(blob).hexdigest() != head["sha256"]:
        raise CheckpointError(f"{path}: blob checksum mismatch (corrupt checkpoint)")
    tensors = {}
    for key, shape, off in layout:
        count = int(np.prod(shape)) if shape else 1
        tensors[key] = np.frombuffer(blob, dtype="<f4", count=count, offset=off).reshape(shape).astype(np.float32)
    return tensors, meta


def network_tensors(network, section: str) -> dict[str, np.ndarray]:
    return {f"{section}/{k}": p.data for k, p in network.parameters().items()}


def network_meta(network, section: str) -> dict[str, str]:
    return {f"{section}.{k}": v for k, v in network.config.echo().items()}


def save_network(path, network, section: str | None = None) -> Path:
    section = section or network.role
    return write_checkpoint(path, network_tensors(network, section), network_meta(network, section))


def load_network(path, section: str = "denoiser"):
    """Rebuild a network from a checkpoint section."""
    from .unet import Network, NetworkConfig

    tensors, meta = read_checkpoint(path)
    prefix = f"{section}."
    echo = {k[len(prefix) :]: v for k, v in meta.items() if k.startswith(prefix)}
    if not echo:
        raise CheckpointError(f"{path}: no {section} section")
    net = Network(NetworkConfig.from_echo(echo), seed=None)
    assign_network(net, tensors, section)
    return net


def assign_network(network, tensors: dict[str, np.ndarray], section: str):
    params = network.parameters()
    for k, p in params.items():
        key = f"{section}/{k}"
        if key not in tensors:
            raise CheckpointError(f"missing tensor {key}")
        if tensors[key].shape != p.shape:
            raise CheckpointError(f"{key}: shape {tensors[key].shape} does not match {p.shape}")
        p.data = tensors[key].copy()
