"""Base and delta checkpoint files.

Layout of both ``.dckpt`` (base) and ``.ddelta`` (delta) files::

    magic        8 bytes   b"DCKPT\\x00\\x00\\x01" or b"DDELT\\x00\\x00\\x01"
    header_len   8 bytes   unsigned little-endian
    header       header_len bytes of UTF-8 JSON (sorted keys, compact separators)
    payload      tensors as raw little-endian float32, concatenated in directory order
    checksum     32 bytes  SHA-256 of every preceding byte

The header carries ``version``, ``kind``, ``spec`` (model spec dict),
``tensors`` (list of ``{name, shape, offset, nbytes}``, offsets relative to the
payload start) and ``payload_sha256``. The base fingerprint is the payload's
SHA-256. Delta headers add ``base_fingerprint``, ``method`` and ``policy``.
Deltas store absolute tensor values, never differences.
"""
from __future__ import annotations

import hashlib
import json
import os
import struct
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping

import numpy as np
import torch

from .model import DiT, ModelSpec, build_model, named_params
from .peft import PEFTMethod, SelectionPolicy, apply_method

FORMAT_VERSION = 1
BASE_MAGIC = b"DCKPT\x00\x00\x01"
DELTA_MAGIC = b"DDELT\x00\x00\x01"
_CHECKSUM_LEN = 32


class CheckpointError(ValueError):
    pass


class ChecksumError(CheckpointError):
    pass


class FingerprintMismatch(CheckpointError):
    pass


def _tensor_bytes(t: torch.Tensor) -> bytes:
    if t.device.type == "meta":
        raise CheckpointError("cannot serialize a meta tensor")
    arr = t.detach().cpu().to(torch.float32).contiguous().numpy()
    if not np.isfinite(arr).all():
        raise CheckpointError("refusing to save non-finite tensor values")
    return arr.astype("<f4", copy=False).tobytes()


def _directory(params: Mapping[str, torch.Tensor]) -> list[dict]:
    out, offset = [], 0
    for name, t in params.items():
        nbytes = 4 * t.numel()
        out.append({"name": name, "shape": list(t.shape), "offset": offset, "nbytes": nbytes})
        offset += nbytes
    return out


def _encode_header(header: dict) -> bytes:
    return json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")


def _assemble(magic: bytes, header: dict, payload: bytes) -> bytes:
    hb = _encode_header(header)
    body = magic + struct.pack("<Q", len(hb)) + hb + payload
    return body + hashlib.sha256(body).digest()


def _atomic_write(path: Path, data: bytes):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _parse(data: bytes, magic: bytes) -> tuple[dict, bytes]:
    if len(data) < 16 + _CHECKSUM_LEN or data[:8] != magic:
        raise CheckpointError("not a checkpoint of the expected kind")
    body, digest = data[:-_CHECKSUM_LEN], data[-_CHECKSUM_LEN:]
    if hashlib.sha256(body).digest() != digest:
        raise ChecksumError("checkpoint checksum mismatch (file corrupted)")
    (hlen,) = struct.unpack("<Q", body[8:16])
    header = json.loads(body[16:16 + hlen].decode("utf-8"))
    payload = body[16 + hlen:]
    if header.get("version") != FORMAT_VERSION:
        raise CheckpointError(f"unsupported format version {header.get('version')}")
    return header, payload


def _read_tensors(header: dict, payload: bytes) -> dict[str, torch.Tensor]:
    out = {}
    end = 0
    for entry in header["tensors"]:
        off, nb = entry["offset"], entry["nbytes"]
        if off < end:
            raise CheckpointError("overlapping tensor directory entries")
        end = off + nb
        arr = np.frombuffer(payload, dtype="<f4", count=nb // 4, offset=off)
        out[entry["name"]] = torch.from_numpy(arr.astype(np.float32)).reshape(entry["shape"])
    if end != len(payload):
        raise CheckpointError("payload length does not match the tensor directory")
    return out


def _base_header(params: Mapping[str, torch.Tensor], spec: ModelSpec | None, fp: str,
                 method: PEFTMethod | None) -> dict:
    header = {"version": FORMAT_VERSION, "kind": "base",
              "spec": spec.to_dict() if spec else None,
              "tensors": _directory(params), "payload_sha256": fp}
    if method is not None:
        # surgery already baked into the tensors (e.g. a merged fine-tune)
        header["method"] = method.to_dict()
    return header


def encode_base(params: Mapping[str, torch.Tensor], spec: ModelSpec | None = None,
                method: PEFTMethod | None = None) -> tuple[bytes, str]:
    payload = b"".join(_tensor_bytes(t) for t in params.values())
    fp = hashlib.sha256(payload).hexdigest()
    return _assemble(BASE_MAGIC, _base_header(params, spec, fp, method), payload), fp


def base_file_nbytes(params: Mapping[str, torch.Tensor], spec: ModelSpec | None = None,
                     method: PEFTMethod | None = None) -> int:
    """Exact size of the file :func:`save_base` would write, from shapes alone."""
    header = _base_header(params, spec, "0" * 64, method)
    payload = sum(4 * t.numel() for t in params.values())
    return 16 + len(_encode_header(header)) + payload + _CHECKSUM_LEN


def base_payload_nbytes(params: Mapping[str, torch.Tensor]) -> int:
    return sum(4 * t.numel() for t in params.values())


def save_base(params, path, spec: ModelSpec | None = None, method: PEFTMethod | None = None) -> str:
    """Write a base checkpoint; returns its fingerprint (payload SHA-256).

    ``method`` records surgery whose extra tensors are part of ``params``; a model
    saved straight after :func:`merge` picks it up automatically.
    """
    if isinstance(params, DiT):
        spec = spec or params.spec
        method = method or params.peft_method
        params = named_params(params)
    data, fp = encode_base(params, spec, method)
    _atomic_write(Path(path), data)
    return fp


@dataclass
class BaseCheckpoint:
    params: dict[str, torch.Tensor]
    spec: ModelSpec | None
    fingerprint: str
    method: PEFTMethod | None = None


def load_base(path) -> BaseCheckpoint:
    header, payload = _parse(Path(path).read_bytes(), BASE_MAGIC)
    fp = hashlib.sha256(payload).hexdigest()
    if fp != header["payload_sha256"]:
        raise ChecksumError("payload fingerprint mismatch")
    spec = ModelSpec.from_dict(header["spec"]) if header.get("spec") else None
    method = PEFTMethod.from_dict(header["method"]) if header.get("method") else None
    return BaseCheckpoint(_read_tensors(header, payload), spec, fp, method)


@dataclass
class DeltaCheckpoint:
    base_fingerprint: str
    method: PEFTMethod
    policy: SelectionPolicy
    spec: ModelSpec | None
    tensors: dict[str, torch.Tensor]
    nbytes: int = 0
    payload_nbytes: int = 0


def save_delta(params, policy: SelectionPolicy, base_fingerprint: str | None, path,
               method: PEFTMethod | None = None, spec: ModelSpec | None = None) -> DeltaCheckpoint:
    """Write only the tensors ``policy`` selects, plus what is needed to rebuild the model."""
    if not base_fingerprint:
        raise CheckpointError("a delta needs the fingerprint of its base checkpoint")
    if isinstance(params, DiT):
        spec = spec or params.spec
        params = named_params(params)
    selected = {n: t for n, t in params.items() if policy.matches(n)}
    method = method or PEFTMethod("custom", patterns=policy.patterns)
    payload = b"".join(_tensor_bytes(t) for t in selected.values())
    header = {"version": FORMAT_VERSION, "kind": "delta",
              "spec": spec.to_dict() if spec else None,
              "base_fingerprint": base_fingerprint,
              "method": method.to_dict(), "policy": list(policy.patterns),
              "tensors": _directory(selected),
              "payload_sha256": hashlib.sha256(payload).hexdigest()}
    data = _assemble(DELTA_MAGIC, header, payload)
    _atomic_write(Path(path), data)
    return DeltaCheckpoint(base_fingerprint, method, policy, spec,
                           {n: t.detach().cpu().float().clone() for n, t in selected.items()},
                           len(data), len(payload))


def load_delta(path) -> DeltaCheckpoint:
    data = Path(path).read_bytes()
    header, payload = _parse(data, DELTA_MAGIC)
    spec = ModelSpec.from_dict(header["spec"]) if header.get("spec") else None
    return DeltaCheckpoint(header["base_fingerprint"], PEFTMethod.from_dict(header["method"]),
                           SelectionPolicy(tuple(header["policy"])), spec,
                           _read_tensors(header, payload), len(data), len(payload))


def merge(base: BaseCheckpoint, delta: DeltaCheckpoint, spec: ModelSpec | None = None, *,
          verify_fingerprint: bool = True) -> DiT:
    """Rebuild the fine-tuned model: method surgery, base weights, then delta tensors.

    ``spec`` defaults to the delta's recorded spec (which may differ from the base
    spec, e.g. after a resolution transfer) and then to the base's. Base tensors
    that the surgery also creates (merging onto an already merged model) are
    accepted and then overwritten by the delta.
    """
    if verify_fingerprint and delta.base_fingerprint != base.fingerprint:
        raise FingerprintMismatch(
            f"delta was made against base {delta.base_fingerprint[:12]}, got {base.fingerprint[:12]}")
    spec = spec or delta.spec or base.spec
    if spec is None:
        raise CheckpointError("no model spec recorded; pass one explicitly")
    model = build_model(spec)
    apply_method(model, delta.method)
    params = named_params(model)
    unknown = [n for n in list(base.params) + list(delta.tensors) if n not in params]
    if unknown:
        raise CheckpointError(f"unknown tensor names: {unknown[:5]}")
    uncovered = [n for n in params if n not in base.params and n not in delta.tensors]
    if uncovered:
        raise CheckpointError(f"tensors neither in base nor delta: {uncovered[:5]}")
    with torch.no_grad():
        for source in (base.params, delta.tensors):
            for name, t in source.items():
                if tuple(params[name].shape) != tuple(t.shape):
                    raise CheckpointError(f"shape mismatch for {name!r}")
                params[name].copy_(t)
    model.eval()
    return model


def load_params(model: DiT, params: Mapping[str, torch.Tensor], strict: bool = True):
    own = named_params(model)
    missing = [n for n in own if n not in params]
    unexpected = [n for n in params if n not in own]
    if strict and (missing or unexpected):
        raise CheckpointError(f"parameter mismatch: missing={missing[:5]} unexpected={unexpected[:5]}")
    with torch.no_grad():
        for n, t in params.items():
            if n in own:
                if tuple(own[n].shape) != tuple(t.shape):
                    raise CheckpointError(f"shape mismatch for {n!r}")
                own[n].copy_(t)
    return model


def model_from_base(path_or_ckpt, spec: ModelSpec | None = None) -> tuple[DiT, BaseCheckpoint]:
    ckpt = path_or_ckpt if isinstance(path_or_ckpt, BaseCheckpoint) else load_base(path_or_ckpt)
    spec = spec or ckpt.spec
    if spec is None:
        raise CheckpointError("no model spec recorded; pass one explicitly")
    model = build_model(spec)
    if ckpt.method is not None:
        apply_method(model, ckpt.method)
    load_params(model, ckpt.params)
    model.eval()
    return model, ckpt
