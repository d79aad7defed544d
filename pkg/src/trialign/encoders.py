"""The three modality encoders and their projections onto the shared
unit hypersphere, plus the caption tokenizer.

Parameter tensors are organized into named groups (base_2d, base_text,
proj_2d, proj_text, enc_3d, proj_3d, prompts) so the training schedule can
freeze and update them independently.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass
from typing import Dict, Iterable, List, Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .seeding import derive_int

PAD, BOS, EOS, UNK = 0, 1, 2, 3
RESERVED = {"<pad>": PAD, "<bos>": BOS, "<eos>": EOS, "<unk>": UNK}

GROUP_NAMES = ("base_2d", "base_text", "proj_2d", "proj_text", "enc_3d", "proj_3d",
               "prompts")


class DegenerateFeatureError(ValueError):
    """Projection input collapsed to (near) zero norm."""


@dataclass(frozen=True)
class EncoderConfig:
    embed_dim: int = 64
    image_size: int = 64
    patch: int = 8
    layers: int = 4
    heads: int = 4
    width: int = 64
    text_len: int = 16
    n_prompt_tokens: int = 5

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "EncoderConfig":
        return cls(**json.loads(text))

    @property
    def n_patches(self) -> int:
        return (self.image_size // self.patch) ** 2


# ---------------------------------------------------------------------------
# tokenizer

@dataclass
class Vocab:
    token_to_index: Dict[str, int]

    def __len__(self) -> int:
        return len(self.token_to_index) + len(RESERVED)

    def index(self, token: str) -> int:
        return self.token_to_index.get(token, UNK)

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump({**RESERVED, **self.token_to_index}, fh, sort_keys=True)

    @classmethod
    def load(cls, path) -> "Vocab":
        with open(path) as fh:
            full = json.load(fh)
        return cls(token_to_index={t: i for t, i in full.items() if t not in RESERVED})

    @classmethod
    def build(cls, texts: Iterable[str]) -> "Vocab":
        words = sorted({w for t in texts for w in t.lower().split()})
        return cls(token_to_index={w: i + len(RESERVED) for i, w in enumerate(words)})


@dataclass
class TokenSeq:
    indices: np.ndarray  # (L,) int64
    eos_pos: int


def tokenize(text: str, vocab: Vocab, length: int = 16) -> TokenSeq:
    """BOS-prefixed, EOS-terminated, PAD-filled index sequence of fixed length.

    Overlong captions are truncated so EOS lands at the final position.
    """
    words = text.lower().split()
    ids = [vocab.index(w) for w in words][: length - 2]
    seq = [BOS] + ids + [EOS]
    eos_pos = len(seq) - 1
    seq = seq + [PAD] * (length - len(seq))
    return TokenSeq(indices=np.asarray(seq, dtype=np.int64), eos_pos=eos_pos)


def tokenize_batch(texts: Sequence[str], vocab: Vocab, length: int = 16):
    seqs = [tokenize(t, vocab, length) for t in texts]
    tokens = torch.from_numpy(np.stack([s.indices for s in seqs]))
    eos = torch.tensor([s.eos_pos for s in seqs], dtype=torch.long)
    return tokens, eos


# ---------------------------------------------------------------------------
# shared transformer pieces

class Attention(nn.Module):
    def __init__(self, width: int, heads: int):
        super().__init__()
        if width % heads:
            raise ValueError("width must divide evenly into heads")
        self.heads = heads
        self.scale = (width // heads) ** -0.5
        self.qkv = nn.Linear(width, 3 * width)
        self.out = nn.Linear(width, width)

    def forward(self, x, mask: Optional[torch.Tensor] = None):
        b, t, w = x.shape
        q, k, v = self.qkv(x).chunk(3, dim=-1)
        q = q.view(b, t, self.heads, -1).transpose(1, 2)
        k = k.view(b, t, self.heads, -1).transpose(1, 2)
        v = v.view(b, t, self.heads, -1).transpose(1, 2)
        att = (q @ k.transpose(-2, -1)) * self.scale
        if mask is not None:
            att = att + mask
        att = att.softmax(dim=-1)
        y = (att @ v).transpose(1, 2).reshape(b, t, w)
        return self.out(y)


class Block(nn.Module):
    def __init__(self, width: int, heads: int):
        super().__init__()
        self.ln1 = nn.LayerNorm(width)
        self.attn = Attention(width, heads)
        self.ln2 = nn.LayerNorm(width)
        self.mlp = nn.Sequential(nn.Linear(width, 4 * width), nn.GELU(),
                                 nn.Linear(4 * width, width))

    def forward(self, x, mask: Optional[torch.Tensor] = None):
        x = x + self.attn(self.ln1(x), mask)
        x = x + self.mlp(self.ln2(x))
        return x


# ---------------------------------------------------------------------------
# modality encoders

class PointSetEncoder(nn.Module):
    """Shared per-point MLP with coordinate-wise max pooling.

    Exactly permutation-invariant: the only cross-point interaction is max.
    """

    def __init__(self, dims=(3, 64, 128, 256), out_dim: int = 256):
        super().__init__()
        layers = []
        for a, b in zip(dims[:-1], dims[1:]):
            layers += [nn.Linear(a, b), nn.GELU()]
        self.pointwise = nn.Sequential(*layers)
        self.head = nn.Linear(dims[-1], out_dim)
        self.out_dim = out_dim

    def forward(self, pts: torch.Tensor) -> torch.Tensor:
        if pts.ndim != 3 or pts.shape[1] == 0:
            raise ValueError("expected nonempty batch of shape (B, N, 3)")
        h = self.pointwise(pts)
        pooled = h.max(dim=1).values
        return self.head(pooled)


class ImageTransformer(nn.Module):
    """Small ViT over depth images with optional deep prompt injection.

    With prompts, layer i attends over [cls, P_i, patches] and the outputs
    at the prompt positions are dropped before layer i+1 injects its own
    fresh tokens.
    """

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        if cfg.image_size % cfg.patch:
            raise ValueError("patch size must divide image size")
        self.cfg = cfg
        self.patch_embed = nn.Linear(cfg.patch * cfg.patch, cfg.width)
        self.cls_token = nn.Parameter(torch.zeros(1, 1, cfg.width))
        self.pos_embed = nn.Parameter(torch.zeros(1, cfg.n_patches + 1, cfg.width))
        self.blocks = nn.ModuleList(Block(cfg.width, cfg.heads) for _ in range(cfg.layers))
        self.ln_post = nn.LayerNorm(cfg.width)

    def patchify(self, images: torch.Tensor) -> torch.Tensor:
        b, h, w = images.shape
        p = self.cfg.patch
        x = images.view(b, h // p, p, w // p, p)
        x = x.permute(0, 1, 3, 2, 4).reshape(b, self.cfg.n_patches, p * p)
        return x

    def forward(self, images: torch.Tensor,
                prompts: Optional[torch.Tensor] = None) -> torch.Tensor:
        if images.ndim != 3:
            raise ValueError("expected (B, H, W) depth images")
        if prompts is not None and prompts.numel():
            if prompts.shape[0] != len(self.blocks) or prompts.shape[2] != self.cfg.width:
                raise ValueError(
                    f"prompt set {tuple(prompts.shape)} does not match encoder "
                    f"({len(self.blocks)} layers, width {self.cfg.width})")
        x = self.patch_embed(self.patchify(images))
        cls = self.cls_token.expand(x.shape[0], -1, -1)
        x = torch.cat([cls, x], dim=1) + self.pos_embed
        for i, block in enumerate(self.blocks):
            if prompts is not None and prompts.numel():
                n = prompts.shape[1]
                p = prompts[i].unsqueeze(0).expand(x.shape[0], -1, -1)
                y = block(torch.cat([x[:, :1], p, x[:, 1:]], dim=1))
                x = torch.cat([y[:, :1], y[:, 1 + n:]], dim=1)
            else:
                x = block(x)
        return self.ln_post(x)[:, 0]


class TextTransformer(nn.Module):
    """Causal transformer; the caption feature is the hidden state at EOS."""

    def __init__(self, cfg: EncoderConfig, vocab_size: int):
        super().__init__()
        self.cfg = cfg
        self.vocab_size = vocab_size
        self.token_embed = nn.Embedding(vocab_size, cfg.width)
        self.pos_embed = nn.Parameter(torch.zeros(1, cfg.text_len, cfg.width))
        self.blocks = nn.ModuleList(Block(cfg.width, cfg.heads) for _ in range(cfg.layers))
        self.ln_post = nn.LayerNorm(cfg.width)

    def forward(self, tokens: torch.Tensor, eos_pos: torch.Tensor) -> torch.Tensor:
        b, t = tokens.shape
        x = self.token_embed(tokens) + self.pos_embed[:, :t]
        mask = torch.full((t, t), float("-inf"), dtype=x.dtype, device=x.device).triu(1)
        for block in self.blocks:
            x = block(x, mask)
        x = self.ln_post(x)
        return x[torch.arange(b, device=x.device), eos_pos]


class ProjectionHead(nn.Module):
    """Affine map onto the shared space followed by unit normalization."""

    def __init__(self, in_dim: int, embed_dim: int):
        super().__init__()
        self.linear = nn.Linear(in_dim, embed_dim)

    def forward(self, features: torch.Tensor) -> torch.Tensor:
        z = self.linear(features)
        norms = z.norm(dim=-1, keepdim=True)
        if (norms < 1e-12).any():
            raise DegenerateFeatureError("pre-normalization norm below 1e-12")
        return z / norms


# ---------------------------------------------------------------------------
# combined model + parameter groups

def _init_transformer(module: nn.Module) -> None:
    for m in module.modules():
        if isinstance(m, nn.Linear):
            nn.init.normal_(m.weight, std=0.02)
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, nn.Embedding):
            nn.init.normal_(m.weight, std=0.02)


class TriModalModel(nn.Module):
    """All towers plus projections, addressable by parameter group."""

    def __init__(self, cfg: EncoderConfig, vocab: Vocab,
                 n_prompt_layers: Optional[int] = None):
        super().__init__()
        self.cfg = cfg
        self.vocab = vocab
        self.image_encoder = ImageTransformer(cfg)
        self.text_encoder = TextTransformer(cfg, len(vocab))
        self.point_encoder = PointSetEncoder()
        self.proj_2d = ProjectionHead(cfg.width, cfg.embed_dim)
        self.proj_text = ProjectionHead(cfg.width, cfg.embed_dim)
        self.proj_3d = ProjectionHead(self.point_encoder.out_dim, cfg.embed_dim)
        layers = cfg.layers if n_prompt_layers is None else n_prompt_layers
        self.prompt_tokens = nn.Parameter(
            torch.zeros(layers, cfg.n_prompt_tokens, cfg.width))
        _init_transformer(self.image_encoder)
        _init_transformer(self.text_encoder)
        nn.init.normal_(self.image_encoder.cls_token, std=0.02)
        nn.init.normal_(self.image_encoder.pos_embed, std=0.02)
        nn.init.normal_(self.text_encoder.pos_embed, std=0.02)
        nn.init.normal_(self.prompt_tokens, std=0.02)
        self.frozen: set = set()

    @classmethod
    def create(cls, cfg: EncoderConfig, vocab: Vocab, seed: int) -> "TriModalModel":
        torch.manual_seed(derive_int(seed, "model-init"))
        return cls(cfg, vocab)

    # group bookkeeping -----------------------------------------------------

    def group_parameters(self, name: str) -> List[tuple]:
        prefix = {"base_2d": "image_encoder.", "base_text": "text_encoder.",
                  "proj_2d": "proj_2d.", "proj_text": "proj_text.",
                  "enc_3d": "point_encoder.", "proj_3d": "proj_3d."}
        if name == "prompts":
            return [("prompt_tokens", self.prompt_tokens)]
        if name not in prefix:
            raise KeyError(f"unknown parameter group {name!r}")
        p = prefix[name]
        return [(n, t) for n, t in self.named_parameters() if n.startswith(p)]

    def freeze(self, *names: str) -> None:
        for name in names:
            for _, t in self.group_parameters(name):
                t.requires_grad_(False)
            self.frozen.add(name)

    def group_checksum(self, name: str) -> str:
        h = hashlib.sha256()
        for _, t in self.group_parameters(name):
            h.update(t.detach().cpu().numpy().astype("<f4").tobytes())
        return h.hexdigest()

    # forward paths ----------------------------------------------------------

    def encode_3d(self, pts: torch.Tensor) -> torch.Tensor:
        return self.point_encoder(pts)

    def encode_image(self, images: torch.Tensor, use_prompts: bool = False) -> torch.Tensor:
        prompts = self.prompt_tokens if use_prompts else None
        return self.image_encoder(images, prompts)

    def encode_text(self, tokens: torch.Tensor, eos_pos: torch.Tensor) -> torch.Tensor:
        return self.text_encoder(tokens, eos_pos)

    def embed_3d(self, pts: torch.Tensor) -> torch.Tensor:
        return self.proj_3d(self.encode_3d(pts))

    def embed_image(self, images: torch.Tensor, use_prompts: bool = False) -> torch.Tensor:
        return self.proj_2d(self.encode_image(images, use_prompts))

    def embed_text(self, tokens: torch.Tensor, eos_pos: torch.Tensor) -> torch.Tensor:
        return self.proj_text(self.encode_text(tokens, eos_pos))


@dataclass
class Embedding:
    """Unit-norm shared-space vector tagged with its source modality."""

    vector: np.ndarray
    modality: str  # "3D" | "2D" | "TEXT"

    def __post_init__(self):
        v = np.asarray(self.vector, dtype=np.float32)
        if abs(float(np.linalg.norm(v)) - 1.0) > 1e-5:
            raise ValueError("embedding must be unit norm within 1e-5")
        self.vector = v
