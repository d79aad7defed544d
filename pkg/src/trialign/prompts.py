"""Deep prompt token lifecycle: creation, serialization, and shape checks
against a target image encoder.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np
import torch

from .encoders import EncoderConfig

VPT_MAGIC = b"VPT1"


class PromptShapeError(ValueError):
    pass


@dataclass
class PromptSet:
    """Per-layer learnable tokens; (layers, n, width), n=0 disables prompting."""

    tokens: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.tokens, dtype=np.float32)
        if t.ndim != 3:
            raise ValueError("prompt tokens must have shape (layers, n, width)")
        if not np.isfinite(t).all():
            raise ValueError("prompt tokens must be finite")
        self.tokens = t

    @property
    def layers(self) -> int:
        return self.tokens.shape[0]

    @property
    def n(self) -> int:
        return self.tokens.shape[1]

    @property
    def width(self) -> int:
        return self.tokens.shape[2]

    def to_tensor(self, dtype=torch.float32) -> torch.Tensor:
        return torch.from_numpy(self.tokens).to(dtype)


def init_prompts(layers: int, n: int, width: int, rng: np.random.Generator) -> PromptSet:
    """Zero-mean Gaussian tokens, sigma 0.02; n=0 yields a disabled set."""
    if n < 0:
        raise ValueError("n must be >= 0")
    tokens = rng.normal(0.0, 0.02, size=(layers, n, width)).astype(np.float32)
    return PromptSet(tokens=tokens)


def write_prompts(path, ps: PromptSet) -> None:
    with open(path, "wb") as fh:
        fh.write(VPT_MAGIC)
        fh.write(struct.pack("<III", ps.layers, ps.n, ps.width))
        fh.write(np.ascontiguousarray(ps.tokens, dtype="<f4").tobytes())


def read_prompts(path) -> PromptSet:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != VPT_MAGIC:
        raise ValueError(f"bad prompt file magic in {path}")
    layers, n, width = struct.unpack_from("<III", data, 4)
    count = layers * n * width
    tokens = np.frombuffer(data, dtype="<f4", count=count, offset=16)
    return PromptSet(tokens=tokens.reshape(layers, n, width).copy())


def check_compatible(ps: PromptSet, cfg: EncoderConfig) -> None:
    """Raise unless the prompt set fits the target encoder's layer/width."""
    if ps.layers != cfg.layers or ps.width != cfg.width:
        raise PromptShapeError(
            f"prompt set (layers={ps.layers}, width={ps.width}) does not fit "
            f"encoder (layers={cfg.layers}, width={cfg.width})")
