"""Binary checkpoint archive.

Layout (all integers little-endian)::

    b"LT3R" | version:u32 | header_len:u64 | header (UTF-8 JSON) | payload

The header is ``{"meta": {...}, "entries": [...]}``; each entry holds
``name``, ``dtype`` (``f32`` | ``fp8e4m3`` | ``bool``), ``shape``,
``offset`` and ``length`` (bytes, relative to the payload start) and, for
``fp8e4m3`` entries, ``scale`` naming the f32 entry with one scale per row.
JSON is written with sorted keys and no whitespace, so load -> save
reproduces the file byte for byte.
"""
from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field

import numpy as np

MAGIC = b"LT3R"
VERSION = 1
_PREFIX = struct.Struct("<4sIQ")

_DTYPES = {"f32": np.dtype("<f4"), "fp8e4m3": np.dtype("u1"), "bool": np.dtype("?")}


class ArchiveError(ValueError):
    pass


@dataclass
class Archive:
    meta: dict = field(default_factory=dict)
    tensors: dict = field(default_factory=dict)  # name -> (dtype tag, ndarray)
    scales: dict = field(default_factory=dict)   # fp8 entry name -> scale entry name

    def add(self, name, array, dtype="f32", scale=None):
        if name in self.tensors:
            raise ArchiveError(f"duplicate entry {name!r}")
        if dtype not in _DTYPES:
            raise ArchiveError(f"unknown dtype {dtype!r}")
        if dtype == "fp8e4m3":
            if scale is None:
                raise ArchiveError(f"fp8 entry {name!r} needs a scale entry")
            self.scales[name] = scale
        self.tensors[name] = (dtype, np.ascontiguousarray(array, dtype=_DTYPES[dtype]))

    def get(self, name):
        return self.tensors[name][1]

    def to_bytes(self):
        entries, chunks, offset = [], [], 0
        for name, (dtype, arr) in self.tensors.items():
            raw = arr.tobytes()
            entry = {"name": name, "dtype": dtype, "shape": list(arr.shape),
                     "offset": offset, "length": len(raw)}
            if dtype == "fp8e4m3":
                entry["scale"] = self.scales[name]
            entries.append(entry)
            chunks.append(raw)
            offset += len(raw)
        for name, scale in self.scales.items():
            if scale not in self.tensors or self.tensors[scale][0] != "f32":
                raise ArchiveError(f"scale entry {scale!r} for {name!r} missing or not f32")
        header = json.dumps({"meta": self.meta, "entries": entries},
                            sort_keys=True, separators=(",", ":")).encode("utf-8")
        return _PREFIX.pack(MAGIC, VERSION, len(header)) + header + b"".join(chunks)

    def save(self, path):
        data = self.to_bytes()
        tmp = f"{path}.tmp"
        with open(tmp, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
        return len(data)

    @classmethod
    def from_bytes(cls, data: bytes):
        if len(data) < _PREFIX.size:
            raise ArchiveError("file too short")
        magic, version, hlen = _PREFIX.unpack_from(data)
        if magic != MAGIC:
            raise ArchiveError(f"bad magic {magic!r}")
        if version != VERSION:
            raise ArchiveError(f"unsupported version {version}")
        start = _PREFIX.size + hlen
        if start > len(data):
            raise ArchiveError("header length exceeds file size")
        try:
            header = json.loads(data[_PREFIX.size:start].decode("utf-8"))
            meta, entries = header["meta"], header["entries"]
        except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError) as exc:
            raise ArchiveError(f"corrupt header: {exc}") from exc
        payload = memoryview(data)[start:]
        arc = cls(meta=meta)
        pos = 0
        for e in entries:
            try:
                name, dtype, shape = e["name"], e["dtype"], tuple(e["shape"])
                off, length = int(e["offset"]), int(e["length"])
            except (KeyError, TypeError, ValueError) as exc:
                raise ArchiveError(f"corrupt entry {e!r}") from exc
            if dtype not in _DTYPES:
                raise ArchiveError(f"unknown dtype {dtype!r}")
            if off < pos:
                raise ArchiveError(f"entry {name!r} overlaps its predecessor")
            if length != int(np.prod(shape, dtype=np.int64)) * _DTYPES[dtype].itemsize:
                raise ArchiveError(f"entry {name!r}: length does not match shape")
            if off + length > len(payload):
                raise ArchiveError(f"entry {name!r} runs past end of file")
            arr = np.frombuffer(payload[off:off + length], dtype=_DTYPES[dtype]).reshape(shape).copy()
            arc.add(name, arr, dtype, e.get("scale"))
            pos = off + length
        if pos != len(payload):
            raise ArchiveError("trailing bytes after last entry")
        for name, scale in arc.scales.items():
            if scale not in arc.tensors:
                raise ArchiveError(f"scale entry {scale!r} for {name!r} missing")
        return arc

    @classmethod
    def load(cls, path):
        with open(path, "rb") as f:
            return cls.from_bytes(f.read())


# ---------------------------------------------------------------------------
# model <-> archive
# ---------------------------------------------------------------------------

def model_to_archive(model, meta=None) -> Archive:
    from .model import SLAAttention
    from .qlinear import FakeQuantLinear, WeightOnlyLinear, linear_layers

    layers = linear_layers(model)
    attn = model.attention_modules()
    meta = dict(meta or {})
    meta["model"] = model.config.to_dict()
    meta["kind"] = "student" if any(isinstance(m, SLAAttention) for _, m in attn) else "teacher"
    meta["keep_ratio"] = next((m.keep_ratio for _, m in attn if isinstance(m, SLAAttention)), 1.0)
    meta["fake_quant"] = [n for n, m in layers if isinstance(m, FakeQuantLinear)]
    meta["act_quant"] = [n for n, m in layers
                         if isinstance(m, FakeQuantLinear) and m.enable_act_quant]
    meta["weight_only"] = [n for n, m in layers if isinstance(m, WeightOnlyLinear)]

    arc = Archive(meta=meta)
    exported = {n: m for n, m in layers if isinstance(m, WeightOnlyLinear)}
    for name, layer in exported.items():
        arc.add(f"{name}.weight.scale", layer.wq.scales, "f32")
        arc.add(f"{name}.weight", layer.wq.codes, "fp8e4m3", scale=f"{name}.weight.scale")
    for name, p in model.named_params():
        arc.add(name, p.tensor.data, "f32")
    return arc


def archive_to_model(arc: Archive):
    from .fp8 import Axis, QuantizedTensor
    from .model import ModelConfig, build_teacher, derive_student
    from .qlinear import FakeQuantLinear, WeightOnlyLinear

    meta = arc.meta
    try:
        config = ModelConfig(**meta["model"])
        model = build_teacher(config, 0)
        if meta["kind"] == "student":
            model = derive_student(model, meta["keep_ratio"])
        for name in meta["weight_only"]:
            codes = arc.get(f"{name}.weight")
            scales = arc.get(arc.scales[f"{name}.weight"])
            layer = model.get_module(name)
            wq = QuantizedTensor(codes, scales, Axis.PER_OUTPUT_ROW, codes.shape)
            model.set_module(name, WeightOnlyLinear(name, wq, layer.bias))
        act = set(meta["act_quant"])
        for name in meta["fake_quant"]:
            model.set_module(name, FakeQuantLinear.wrap(model.get_module(name), name in act))
        params = dict(model.named_params())
        for name, p in params.items():
            arr = arc.get(name)
            if arr.shape != p.tensor.shape:
                raise ArchiveError(f"{name}: shape {arr.shape} != {p.tensor.shape}")
            p.tensor.data = arr.astype(np.float32)
    except (KeyError, TypeError) as exc:
        raise ArchiveError(f"archive does not describe a model: {exc}") from exc
    return model


def save_model(path, model, meta=None):
    return model_to_archive(model, meta).save(path)


def load_model(path):
    arc = Archive.load(path)
    return archive_to_model(arc), arc.meta
