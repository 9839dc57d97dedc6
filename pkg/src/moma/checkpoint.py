"""Single-file checkpoint container.

Layout (all little-endian):
    magic "MOMACKPT" | u32 format version | u64 manifest length | manifest
    JSON (sorted keys) | per tensor: u32 name length, name utf-8, 4-byte
    dtype code, u32 ndim, u64 dims..., raw row-major data.

Tensors are written in sorted-name order and the manifest is canonical
JSON, so save -> load -> save is byte-identical. Parameter tensors use the
canonical `layer.{j}...` paths, optimizer moments live under `opt.`, and
auxiliary routers under `aux.`; a checkpoint without `aux.` tensors loads
fine but refuses inference mode.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import CheckpointError

_MAGIC = b"MOMACKPT"
_VERSION = 1

_DTYPE_CODES = {"<f4": b"f32 ", "<f8": b"f64 "}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}


@dataclass
class Checkpoint:
    manifest: dict = field(default_factory=dict)
    tensors: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def step(self) -> int:
        return int(self.manifest.get("step", 0))

    @property
    def has_aux(self) -> bool:
        return any(name.startswith("aux.") for name in self.tensors)

    def model_tensors(self) -> dict[str, np.ndarray]:
        return {
            n: t
            for n, t in self.tensors.items()
            if not n.startswith(("opt.", "aux."))
        }

    def save(self, path: str) -> None:
        names = sorted(self.tensors)
        manifest = dict(self.manifest)
        manifest["tensor_names"] = names
        blob = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode()
        with open(path, "wb") as f:
            f.write(_MAGIC)
            f.write(struct.pack("<IQ", _VERSION, len(blob)))
            f.write(blob)
            for name in names:
                arr = np.ascontiguousarray(self.tensors[name])
                le = arr.dtype.newbyteorder("<")
                code = _DTYPE_CODES.get(le.str)
                if code is None:
                    raise CheckpointError(f"unsupported dtype {arr.dtype} for tensor {name!r}")
                nb = name.encode()
                f.write(struct.pack("<I", len(nb)))
                f.write(nb)
                f.write(code)
                f.write(struct.pack("<I", arr.ndim))
                f.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
                f.write(arr.astype(le, copy=False).tobytes())

    @staticmethod
    def load(path: str) -> "Checkpoint":
        try:
            f = open(path, "rb")
        except OSError as e:
            raise CheckpointError(f"cannot open checkpoint {path!r}: {e}") from e
        with f:
            if f.read(8) != _MAGIC:
                raise CheckpointError(f"{path!r} is not a checkpoint (bad magic)")
            version, mlen = struct.unpack("<IQ", f.read(12))
            if version != _VERSION:
                raise CheckpointError(f"unsupported checkpoint version {version}")
            try:
                manifest = json.loads(f.read(mlen))
            except json.JSONDecodeError as e:
                raise CheckpointError(f"corrupt manifest in {path!r}") from e
            tensors: dict[str, np.ndarray] = {}
            for name in manifest.get("tensor_names", []):
                (nlen,) = struct.unpack("<I", f.read(4))
                got = f.read(nlen).decode()
                if got != name:
                    raise CheckpointError(f"tensor order mismatch: {got!r} != {name!r}")
                code = f.read(4)
                dtype = _CODE_DTYPES.get(code)
                if dtype is None:
                    raise CheckpointError(f"unknown dtype code {code!r}")
                (ndim,) = struct.unpack("<I", f.read(4))
                shape = struct.unpack(f"<{ndim}Q", f.read(8 * ndim))
                count = int(np.prod(shape)) if ndim else 1
                raw = f.read(count * int(dtype[-1]))
                tensors[name] = np.frombuffer(raw, dtype=dtype).reshape(shape).copy()
        manifest.pop("tensor_names", None)
        return Checkpoint(manifest=manifest, tensors=tensors)


def config_diff(expected: dict, found: dict, prefix: str = "") -> list[str]:
    """Human-readable field-by-field differences between two config dicts."""
    out = []
    keys = sorted(set(expected) | set(found))
    for k in keys:
        path = f"{prefix}{k}"
        a, b = expected.get(k, "<missing>"), found.get(k, "<missing>")
        if isinstance(a, dict) and isinstance(b, dict):
            out.extend(config_diff(a, b, prefix=f"{path}."))
        elif a != b:
            out.append(f"{path}: expected {a!r}, checkpoint has {b!r}")
    return out
