"""Binary checkpoint format.

Layout: 8-byte magic ``FDFCNCP1``; little-endian uint64 header length; UTF-8
JSON header (version, network config, epoch, seed, score, optimizer step and
an ordered array manifest of name/shape/byte offset); then the raw
little-endian float32 arrays in manifest order.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import FormatError, ShapeMismatch, VersionMismatch
from .network import Network, NetworkConfig

MAGIC = b"FDFCNCP1"
VERSION = 1
_LE32 = np.dtype("<f4")


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


@dataclass
class Checkpoint:
    config: NetworkConfig
    params: dict
    optimizer: AdamState | None = None
    epoch: int = 0
    seed: int = 0
    score: float | None = None
    version: int = VERSION


def _arrays(ckpt: Checkpoint):
    for name, arr in ckpt.params.items():
        yield "param", name, arr
    if ckpt.optimizer is not None:
        for name, arr in ckpt.optimizer.m.items():
            yield "adam_m", name, arr
        for name, arr in ckpt.optimizer.v.items():
            yield "adam_v", name, arr


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    manifest, blobs, offset = [], [], 0
    for kind, name, arr in _arrays(ckpt):
        blob = np.ascontiguousarray(arr, dtype=_LE32).tobytes()
        manifest.append({"kind": kind, "name": name, "shape": list(arr.shape), "offset": offset})
        blobs.append(blob)
        offset += len(blob)
    header = {
        "version": ckpt.version,
        "config": ckpt.config.to_dict(),
        "epoch": ckpt.epoch,
        "seed": ckpt.seed,
        "score": ckpt.score,
        "adam_t": None if ckpt.optimizer is None else ckpt.optimizer.t,
        "payload_bytes": offset,
        "manifest": manifest,
    }
    text = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(text)))
        fh.write(text)
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 16 or raw[:8] != MAGIC:
        raise FormatError(f"{path}: not an FD-FCN checkpoint (bad magic or too short)")
    size, = struct.unpack("<Q", raw[8:16])
    if len(raw) < 16 + size:
        raise FormatError(f"{path}: header truncated")
    try:
        header = json.loads(raw[16:16 + size].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: unreadable header ({exc})") from None
    if header.get("version") != VERSION:
        raise VersionMismatch(f"{path}: checkpoint version {header.get('version')}, "
                              f"this build reads {VERSION}")
    payload = raw[16 + size:]
    if len(payload) != header.get("payload_bytes"):
        raise FormatError(f"{path}: payload is {len(payload)} bytes, "
                          f"header declares {header.get('payload_bytes')}")
    try:
        config = NetworkConfig.from_dict(header["config"])
    except (TypeError, ValueError, KeyError) as exc:
        raise FormatError(f"{path}: invalid network config ({exc})") from None
    groups = {"param": {}, "adam_m": {}, "adam_v": {}}
    for entry in header["manifest"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape))
        start = entry["offset"]
        if start + 4 * count > len(payload):
            raise FormatError(f"{path}: array {entry['name']} runs past the payload")
        arr = np.frombuffer(payload, dtype=_LE32, count=count, offset=start)
        groups[entry["kind"]][entry["name"]] = arr.reshape(shape).astype(np.float32)
    net = Network(config)
    net.check_params(groups["param"])
    optimizer = None
    if header.get("adam_t") is not None:
        optimizer = AdamState(groups["adam_m"], groups["adam_v"], int(header["adam_t"]))
        for name, arr in list(optimizer.m.items()) + list(optimizer.v.items()):
            if name not in groups["param"] or arr.shape != groups["param"][name].shape:
                raise ShapeMismatch(f"optimizer moment for {name} does not match its parameter")
    return Checkpoint(config, groups["param"], optimizer, int(header["epoch"]),
                      int(header["seed"]), header["score"], header["version"])
