"""
Named-tensor checkpoints.

Layout (all integers little-endian)::

    b"LVTRCKPT" | u32 version | u64 header length | JSON header | payload

The header holds the parameter manifest (name, shape, dtype, byte offset, byte
count), free-form training metadata, and the payload length and SHA-256.
"""

import hashlib
import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

import numpy as np

from .errors import CheckpointError
from .nn import Module
from .utils import atomic_write_bytes

log = logging.getLogger(__name__)

MAGIC = b"LVTRCKPT"
FORMAT_VERSION = 1
STORAGE_DTYPES = ("<f8", "<f4")
_PREAMBLE = struct.Struct("<8sIQ")


@dataclass
class RestoreReport:
    loaded: list[str] = field(default_factory=list)
    fresh: list[str] = field(default_factory=list)
    ignored: list[str] = field(default_factory=list)


@dataclass
class Checkpoint:
    tensors: dict[str, np.ndarray]
    metadata: dict[str, Any] = field(default_factory=dict)
    version: int = FORMAT_VERSION

    @classmethod
    def from_modules(
        cls,
        modules: Mapping[str, Module],
        metadata: Mapping[str, Any] | None = None,
        storage_dtype: str = "<f8",
    ) -> "Checkpoint":
        if storage_dtype not in STORAGE_DTYPES:
            raise CheckpointError(f"unsupported storage dtype {storage_dtype!r}")
        tensors = {}
        for module_name in sorted(modules):
            for name, param in modules[module_name].named_parameters():
                tensors[f"{module_name}.{name}"] = param.data.astype(storage_dtype)
        return cls(tensors, dict(metadata or {}))

    @property
    def modules(self) -> list[str]:
        return sorted({name.split(".", 1)[0] for name in self.tensors})

    def to_bytes(self) -> bytes:
        manifest, chunks, offset = [], [], 0
        for name, array in self.tensors.items():
            data = np.ascontiguousarray(array).tobytes()
            manifest.append(
                {
                    "name": name,
                    "shape": list(array.shape),
                    "dtype": array.dtype.str,
                    "offset": offset,
                    "nbytes": len(data),
                }
            )
            chunks.append(data)
            offset += len(data)
        payload = b"".join(chunks)
        header = json.dumps(
            {
                "manifest": manifest,
                "metadata": self.metadata,
                "payload_bytes": len(payload),
                "payload_sha256": hashlib.sha256(payload).hexdigest(),
            },
            sort_keys=True,
            separators=(",", ":"),
        ).encode("utf-8")
        return _PREAMBLE.pack(MAGIC, self.version, len(header)) + header + payload

    @classmethod
    def from_bytes(cls, blob: bytes) -> "Checkpoint":
        if len(blob) < _PREAMBLE.size:
            raise CheckpointError("checkpoint is truncated before its header")
        magic, version, header_len = _PREAMBLE.unpack_from(blob)
        if magic != MAGIC:
            raise CheckpointError("not a laviter checkpoint (bad magic)")
        if version != FORMAT_VERSION:
            raise CheckpointError(f"checkpoint format version {version} is not supported (expected {FORMAT_VERSION})")
        start = _PREAMBLE.size + header_len
        if len(blob) < start:
            raise CheckpointError("checkpoint is truncated inside its header")
        try:
            header = json.loads(blob[_PREAMBLE.size : start].decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            raise CheckpointError(f"checkpoint header is corrupt: {e}") from None

        try:
            return cls._from_header(header, blob[start:], version)
        except (KeyError, TypeError, ValueError) as e:
            raise CheckpointError(f"checkpoint header is malformed: {e!r}") from None

    @classmethod
    def _from_header(cls, header: dict, payload: bytes, version: int) -> "Checkpoint":
        if len(payload) != header["payload_bytes"]:
            raise CheckpointError(
                f"checkpoint payload is {len(payload)} bytes, header declares {header['payload_bytes']} (truncated?)"
            )
        if hashlib.sha256(payload).hexdigest() != header["payload_sha256"]:
            raise CheckpointError("checkpoint payload checksum mismatch")

        tensors, end = {}, 0
        for entry in sorted(header["manifest"], key=lambda e: e["offset"]):
            dtype = np.dtype(entry["dtype"])
            if entry["dtype"] not in STORAGE_DTYPES:
                raise CheckpointError(f"tensor {entry['name']} has unsupported dtype {entry['dtype']}")
            expected = int(np.prod(entry["shape"], dtype=np.int64)) * dtype.itemsize
            if entry["nbytes"] != expected or entry["offset"] < end or entry["offset"] + expected > len(payload):
                raise CheckpointError(f"manifest entry for {entry['name']} is inconsistent with the payload")
            end = entry["offset"] + expected
            chunk = payload[entry["offset"] : end]
            tensors[entry["name"]] = np.frombuffer(chunk, dtype=dtype).reshape(entry["shape"]).copy()
        order = [e["name"] for e in header["manifest"]]
        return cls({name: tensors[name] for name in order}, header["metadata"], version)

    def restore(self, modules: Mapping[str, Module], config_hash: str | None = None) -> RestoreReport:
        """Load every stored tensor belonging to ``modules``; all checks happen before any write.

        Tensors of modules not listed are ignored; parameters of listed modules that
        the checkpoint lacks keep their current (fresh) values and are reported.
        """
        stored_hash = self.metadata.get("config_hash")
        if config_hash is not None and stored_hash is not None and stored_hash != config_hash:
            raise CheckpointError(f"checkpoint was written for config {stored_hash[:12]}, current config is {config_hash[:12]}")

        report = RestoreReport()
        updates = []
        for module_name, module in modules.items():
            params = dict(module.named_parameters())
            prefix = f"{module_name}."
            stored = {n[len(prefix) :]: a for n, a in self.tensors.items() if n.startswith(prefix)}
            unknown = sorted(set(stored) - set(params))
            if unknown:
                raise CheckpointError(f"unknown parameter names for {module_name}: {', '.join(unknown)}")
            for name, param in params.items():
                if name not in stored:
                    report.fresh.append(prefix + name)
                    continue
                if tuple(stored[name].shape) != param.shape:
                    raise CheckpointError(
                        f"parameter {prefix}{name} has shape {param.shape}, checkpoint has {tuple(stored[name].shape)}"
                    )
                updates.append((param, stored[name]))
                report.loaded.append(prefix + name)
        report.ignored = sorted(n for n in self.tensors if n.split(".", 1)[0] not in modules)

        for param, array in updates:
            param.data = np.array(array, dtype=np.float64)
        if report.fresh:
            log.info(f"{len(report.fresh)} parameters not in the checkpoint keep their fresh initialization")
        return report


def save_checkpoint(path: Path | str, checkpoint: Checkpoint) -> Path:
    path = Path(path)
    atomic_write_bytes(path, checkpoint.to_bytes())
    log.info(f"wrote checkpoint {path} ({len(checkpoint.tensors)} tensors)")
    return path


def load_checkpoint(path: Path | str) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint {path} does not exist")
    return Checkpoint.from_bytes(path.read_bytes())
