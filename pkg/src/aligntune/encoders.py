"""Alignment-aware image/text encoders, projection heads and the fusion encoder."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from typing import Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

from .data import COORD_MAX
from .geometry import build_patch_grid

NORM_EPS = 1e-12


@dataclass(frozen=True)
class EncoderConfig:
    hidden_size: int = 64
    num_layers_img: int = 2
    num_layers_txt: int = 2
    num_layers_fusion: int = 2
    num_heads: int = 4
    proj_dim: int = 32
    patch_size: int = 16
    image_size: int = 64
    vocab_size: int = 50
    max_tokens: int = 16
    num_labels: int = 9  # size of the BIO label vocabulary
    mlp_ratio: int = 4
    layout_bins: int = 32
    # LayerNorm applied to the summed fusion embeddings
    fusion_embed_norm: bool = True

    def __post_init__(self):
        if self.hidden_size % self.num_heads:
            raise ValueError("hidden_size must be divisible by num_heads")
        if self.proj_dim < 2:
            raise ValueError("proj_dim must be >= 2")
        if self.image_size % self.patch_size:
            raise ValueError("image_size must be divisible by patch_size")
        for name in ("num_layers_img", "num_layers_txt", "num_layers_fusion"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")

    @property
    def num_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "EncoderConfig":
        return cls(**json.loads(text))


def block_param_count(h: int, mlp_ratio: int = 4) -> int:
    f = mlp_ratio * h
    # 2 LayerNorms, fused qkv, output projection, two-layer MLP
    return 4 * h + (3 * h * h + 3 * h) + (h * h + h) + (h * f + f) + (f * h + h)


def parameter_count(cfg: EncoderConfig) -> int:
    """Closed-form trainable parameter count of :class:`AlignmentTuningModel`."""
    h, p, N, V, L = cfg.hidden_size, cfg.patch_size, cfg.num_patches, cfg.vocab_size, cfg.max_tokens
    blk = block_param_count(h, cfg.mlp_ratio)
    patch = 3 * p * p * h + h
    image = patch + h + (N + 1) * h + cfg.num_layers_img * blk + 2 * h + h * cfg.proj_dim
    text = V * h + h + (L + 1) * h + cfg.num_layers_txt * blk + 2 * h + h * cfg.proj_dim
    fusion = (
        V * h + L * h + 4 * cfg.layout_bins * h + patch + N * h
        + (2 * h if cfg.fusion_embed_norm else 0)
        + cfg.num_layers_fusion * blk + 2 * h
        + h * cfg.num_labels + cfg.num_labels
    )
    return image + text + fusion + 1  # + log-temperature


class Attention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x: torch.Tensor, key_mask: Optional[torch.Tensor] = None) -> torch.Tensor:
        B, n, d = x.shape
        q, k, v = self.qkv(x).view(B, n, 3, self.heads, d // self.heads).permute(2, 0, 3, 1, 4)
        scores = q @ k.transpose(-1, -2) / (d // self.heads) ** 0.5
        if key_mask is not None:
            scores = scores.masked_fill(~key_mask[:, None, None, :], float("-inf"))
        out = scores.softmax(dim=-1) @ v
        return self.proj(out.transpose(1, 2).reshape(B, n, d))


class Block(nn.Module):
    """Pre-norm transformer block."""

    def __init__(self, dim: int, heads: int, mlp_ratio: int = 4):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(
            nn.Linear(dim, mlp_ratio * dim), nn.GELU(), nn.Linear(mlp_ratio * dim, dim)
        )

    def forward(self, x, key_mask=None):
        x = x + self.attn(self.norm1(x), key_mask)
        return x + self.mlp(self.norm2(x))


class Transformer(nn.Module):
    def __init__(self, dim: int, depth: int, heads: int, mlp_ratio: int = 4):
        super().__init__()
        self.layers = nn.ModuleList([Block(dim, heads, mlp_ratio) for _ in range(depth)])
        self.norm = nn.LayerNorm(dim)

    def forward(self, x, key_mask=None):
        for blk in self.layers:
            x = blk(x, key_mask)
        return self.norm(x)


class PatchEmbed(nn.Module):
    def __init__(self, patch_size: int, dim: int):
        super().__init__()
        self.patch_size = patch_size
        self.proj = nn.Linear(3 * patch_size * patch_size, dim)

    def forward(self, pixels: torch.Tensor) -> torch.Tensor:
        # (B, H, W, 3) -> (B, N, p*p*3), patches row-major
        B, H, W, C = pixels.shape
        p = self.patch_size
        x = pixels.reshape(B, H // p, p, W // p, p, C).permute(0, 1, 3, 2, 4, 5)
        return self.proj(x.reshape(B, (H // p) * (W // p), p * p * C))


@dataclass
class EncodedBatch:
    cls: torch.Tensor  # (B, h)
    locals: torch.Tensor  # (B, n, h)
    mask: torch.Tensor  # (B, n) bool, valid local positions
    source_modality: str
    is_momentum: bool = False

    @property
    def empty(self) -> torch.Tensor:
        """(B,) flags for samples with no valid local vectors."""
        return ~self.mask.any(dim=1)


def normalize(x: torch.Tensor, eps: float = NORM_EPS) -> torch.Tensor:
    return x / (x.norm(dim=-1, keepdim=True) + eps)


class ProjectionHead(nn.Module):
    """Bias-free linear map followed by L2 normalization."""

    def __init__(self, hidden: int, proj_dim: int):
        super().__init__()
        self.linear = nn.Linear(hidden, proj_dim, bias=False)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return normalize(self.linear(x))


class ImageEncoder(nn.Module):
    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        h = cfg.hidden_size
        self.patch_embed = PatchEmbed(cfg.patch_size, h)
        self.cls_token = nn.Parameter(torch.zeros(h))
        self.pos_embed = nn.Parameter(torch.randn(cfg.num_patches + 1, h) * 0.02)
        self.encoder = Transformer(h, cfg.num_layers_img, cfg.num_heads, cfg.mlp_ratio)

    def forward(self, pixels: torch.Tensor, is_momentum: bool = False) -> EncodedBatch:
        B, H, W, C = pixels.shape
        if H != self.cfg.image_size or W != self.cfg.image_size or C != 3:
            raise ValueError(
                f"expected images of {self.cfg.image_size}x{self.cfg.image_size}x3, "
                f"got {H}x{W}x{C}"
            )
        x = self.patch_embed(pixels)
        x = torch.cat([self.cls_token.expand(B, 1, -1), x], dim=1) + self.pos_embed
        x = self.encoder(x)
        mask = torch.ones(B, x.shape[1] - 1, dtype=torch.bool, device=x.device)
        return EncodedBatch(x[:, 0], x[:, 1:], mask, "image", is_momentum)


class TextEncoder(nn.Module):
    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        h = cfg.hidden_size
        self.token_embed = nn.Embedding(cfg.vocab_size, h)
        self.cls_token = nn.Parameter(torch.zeros(h))
        self.pos_embed = nn.Parameter(torch.randn(cfg.max_tokens + 1, h) * 0.02)
        self.encoder = Transformer(h, cfg.num_layers_txt, cfg.num_heads, cfg.mlp_ratio)
        nn.init.normal_(self.token_embed.weight, std=0.02)

    def forward(self, token_ids: torch.Tensor, attention_mask: torch.Tensor,
                is_momentum: bool = False) -> EncodedBatch:
        B, L = token_ids.shape
        if L > self.cfg.max_tokens:
            raise ValueError(f"sequence length {L} exceeds max_tokens {self.cfg.max_tokens}")
        if token_ids.numel() and (token_ids.min() < 0 or token_ids.max() >= self.cfg.vocab_size):
            raise ValueError(f"token id out of range [0, {self.cfg.vocab_size})")
        mask = attention_mask.bool()
        x = self.token_embed(token_ids)
        x = torch.cat([self.cls_token.expand(B, 1, -1), x], dim=1) + self.pos_embed[: L + 1]
        key_mask = torch.cat([torch.ones(B, 1, dtype=torch.bool, device=x.device), mask], dim=1)
        x = self.encoder(x, key_mask)
        return EncodedBatch(x[:, 0], x[:, 1:], mask, "text", is_momentum)


class AlignmentBranch(nn.Module):
    """An alignment-aware encoder together with its projection head.

    This pair is the unit that gets a momentum twin.
    """

    def __init__(self, encoder: nn.Module, cfg: EncoderConfig):
        super().__init__()
        self.encoder = encoder
        self.head = ProjectionHead(cfg.hidden_size, cfg.proj_dim)

    def forward(self, *args, **kwargs) -> EncodedBatch:
        return self.encoder(*args, **kwargs)

    def project(self, vecs: torch.Tensor) -> torch.Tensor:
        return self.head(vecs)


def bucketize_boxes(boxes: torch.Tensor, bins: int) -> torch.Tensor:
    return (boxes.clamp(0, COORD_MAX) * bins // (COORD_MAX + 1)).long()


class FusionEncoder(nn.Module):
    """Joint transformer over ``[text tokens || image patches]``.

    Its inputs are its own word/patch, position and layout embeddings,
    with the alignment-aware local vectors added on top.
    """

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        h = cfg.hidden_size
        # unit-scale init: these are summed with LayerNorm'd encoder outputs,
        # and a 0.02-scale layout code drowns under them, so text tokens never
        # learn to find their own patches
        self.word_embed = nn.Embedding(cfg.vocab_size, h)
        self.pos_embed = nn.Parameter(torch.randn(cfg.max_tokens, h))
        self.layout_embed = nn.ModuleList([nn.Embedding(cfg.layout_bins, h) for _ in range(4)])
        self.patch_embed = PatchEmbed(cfg.patch_size, h)
        self.patch_pos = nn.Parameter(torch.randn(cfg.num_patches, h))
        self.embed_norm = nn.LayerNorm(h) if cfg.fusion_embed_norm else nn.Identity()
        self.encoder = Transformer(h, cfg.num_layers_fusion, cfg.num_heads, cfg.mlp_ratio)
        self.classifier = nn.Linear(h, cfg.num_labels)
        grid = build_patch_grid(cfg.image_size, cfg.patch_size)
        self.register_buffer("patch_boxes", torch.as_tensor(grid.norm_boxes()), persistent=False)

    def layout(self, boxes: torch.Tensor) -> torch.Tensor:
        b = bucketize_boxes(boxes, self.cfg.layout_bins)
        return sum(emb(b[..., k]) for k, emb in enumerate(self.layout_embed))

    def base_embeddings(self, pixels, token_ids, boxes):
        """The fusion model's own input embeddings: ``(text (B,L,h), image (B,N,h))``."""
        if boxes.numel() and (boxes.min() < 0 or boxes.max() > COORD_MAX):
            raise ValueError(f"box coordinate outside [0, {COORD_MAX}]")
        L = token_ids.shape[1]
        txt = self.word_embed(token_ids) + self.pos_embed[:L] + self.layout(boxes)
        img = self.patch_embed(pixels) + self.patch_pos + self.layout(self.patch_boxes)
        return txt, img

    def fusion_inputs(self, img_locals, txt_locals, base_txt, base_img):
        """Summed (pre-norm) fusion input sequence ``[text || image]``."""
        if img_locals.shape[-1] != base_img.shape[-1] or txt_locals.shape[-1] != base_txt.shape[-1]:
            raise ValueError("alignment-aware and fusion hidden sizes differ")
        return torch.cat([base_txt + txt_locals, base_img + img_locals], dim=1)

    def forward(self, img_locals, txt_locals, base_txt, base_img, text_mask):
        x = self.embed_norm(self.fusion_inputs(img_locals, txt_locals, base_txt, base_img))
        B, L = text_mask.shape
        key_mask = torch.cat(
            [text_mask.bool(), torch.ones(B, base_img.shape[1], dtype=torch.bool, device=x.device)],
            dim=1,
        )
        x = self.encoder(x, key_mask)
        return self.classifier(x[:, :L])


class Temperature(nn.Module):
    """Learnable positive temperature, stored as its logarithm."""

    def __init__(self, init: float = 0.07):
        super().__init__()
        if init <= 0:
            raise ValueError("temperature must be positive")
        self.log_tau = nn.Parameter(torch.tensor(float(init)).log())

    @property
    def tau(self) -> torch.Tensor:
        return self.log_tau.exp()

    def forward(self) -> torch.Tensor:
        return self.tau


class AlignmentTuningModel(nn.Module):
    """All trainable parts: two alignment branches, the fusion encoder and tau."""

    def __init__(self, cfg: EncoderConfig, tau_init: float = 0.07):
        super().__init__()
        self.cfg = cfg
        self.image = AlignmentBranch(ImageEncoder(cfg), cfg)
        self.text = AlignmentBranch(TextEncoder(cfg), cfg)
        self.fusion = FusionEncoder(cfg)
        self.temperature = Temperature(tau_init)

    def fuse_and_predict(self, img: EncodedBatch, txt: EncodedBatch, pixels, token_ids, boxes):
        base_txt, base_img = self.fusion.base_embeddings(pixels, token_ids, boxes)
        return self.fusion(img.locals, txt.locals, base_txt, base_img, txt.mask)

    def forward(self, pixels, token_ids, attention_mask, boxes):
        img = self.image(pixels)
        txt = self.text(token_ids, attention_mask)
        return self.fuse_and_predict(img, txt, pixels, token_ids, boxes), img, txt
