"""Single-file checkpoint container.

Layout: magic "CG3D" | u32 version | u32 header length | JSON header |
concatenated little-endian float32 payloads in header order. The header
carries group/tensor names and shapes, frozen flags, the config digest,
the step counter, the vocab, and the class list. Optimizer moments ride
along as extra payload entries so a resumed run is bitwise identical.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np
import torch

from .encoders import GROUP_NAMES, EncoderConfig, TriModalModel, Vocab

CKPT_MAGIC = b"CG3D"
CKPT_VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    cfg: EncoderConfig
    vocab: Vocab
    classes: List[str]
    step: int
    config_digest: str
    frozen: List[str]
    groups: Dict[str, Dict[str, np.ndarray]]
    extras: Dict[str, np.ndarray] = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def group_checksum(self, name: str) -> str:
        h = hashlib.sha256()
        for tname in sorted(self.groups[name]):
            h.update(np.ascontiguousarray(self.groups[name][tname], dtype="<f4").tobytes())
        return h.hexdigest()

    def build_model(self) -> TriModalModel:
        """Materialize a model with these parameters and frozen flags."""
        model = TriModalModel(self.cfg, self.vocab)
        with torch.no_grad():
            for gname in GROUP_NAMES:
                stored = self.groups.get(gname, {})
                for pname, tensor in model.group_parameters(gname):
                    if pname not in stored:
                        raise CheckpointError(f"missing tensor {pname} in group {gname}")
                    arr = stored[pname]
                    if tuple(arr.shape) != tuple(tensor.shape):
                        raise CheckpointError(
                            f"shape mismatch for {pname}: checkpoint "
                            f"{arr.shape} vs model {tuple(tensor.shape)}")
                    tensor.copy_(torch.from_numpy(arr.copy()))
        model.freeze(*self.frozen)
        return model


def snapshot(model: TriModalModel, classes: List[str], step: int,
             config_digest: str, extras: Optional[Dict[str, np.ndarray]] = None,
             meta: Optional[dict] = None) -> Checkpoint:
    groups = {}
    for gname in GROUP_NAMES:
        groups[gname] = {pname: t.detach().cpu().numpy().astype(np.float32, copy=True)
                         for pname, t in model.group_parameters(gname)}
    return Checkpoint(cfg=model.cfg, vocab=model.vocab, classes=list(classes),
                      step=step, config_digest=config_digest,
                      frozen=sorted(model.frozen), groups=groups,
                      extras=dict(extras or {}), meta=dict(meta or {}))


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    entries = []
    payloads = []
    for gname in sorted(ckpt.groups):
        for tname in sorted(ckpt.groups[gname]):
            arr = np.ascontiguousarray(ckpt.groups[gname][tname], dtype="<f4")
            entries.append({"group": gname, "name": tname, "shape": list(arr.shape)})
            payloads.append(arr.tobytes())
    for ename in sorted(ckpt.extras):
        arr = np.ascontiguousarray(ckpt.extras[ename], dtype="<f4")
        entries.append({"group": "__extra__", "name": ename, "shape": list(arr.shape)})
        payloads.append(arr.tobytes())
    header = {
        "entries": entries,
        "frozen": sorted(ckpt.frozen),
        "config_digest": ckpt.config_digest,
        "step": ckpt.step,
        "encoder_config": json.loads(ckpt.cfg.to_json()),
        "vocab": ckpt.vocab.token_to_index,
        "classes": ckpt.classes,
        "meta": ckpt.meta,
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<II", CKPT_VERSION, len(blob)))
        fh.write(blob)
        for p in payloads:
            fh.write(p)


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != CKPT_MAGIC:
        raise CheckpointError(f"bad checkpoint magic in {path}")
    version, hlen = struct.unpack_from("<II", data, 4)
    if version != CKPT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    header = json.loads(data[12:12 + hlen].decode("utf-8"))
    offset = 12 + hlen
    groups: Dict[str, Dict[str, np.ndarray]] = {}
    extras: Dict[str, np.ndarray] = {}
    for entry in header["entries"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(data, dtype="<f4", count=count, offset=offset)
        arr = arr.reshape(shape).copy()
        offset += count * 4
        if entry["group"] == "__extra__":
            extras[entry["name"]] = arr
        else:
            groups.setdefault(entry["group"], {})[entry["name"]] = arr
    return Checkpoint(
        cfg=EncoderConfig(**header["encoder_config"]),
        vocab=Vocab(token_to_index=header["vocab"]),
        classes=list(header["classes"]),
        step=int(header["step"]),
        config_digest=header["config_digest"],
        frozen=list(header["frozen"]),
        groups=groups,
        extras=extras,
        meta=header.get("meta", {}),
    )
