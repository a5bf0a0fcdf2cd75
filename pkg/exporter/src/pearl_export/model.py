"""CLIP-compatible vision/text transformers.

Module attribute names and parameter shapes match the reference CLIP state
dict (visual.conv1.weight, visual.transformer.resblocks.{i}.attn.in_proj_weight,
token_embedding.weight, ...), so published checkpoints load with a plain
load_state_dict. Only the pieces the exporter needs are implemented: the
forward passes, per-token features, and pooled embeddings.
"""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn


@dataclass(frozen=True)
class ClipDims:
    image_size: int
    patch: int
    width: int
    layers: int
    heads: int
    embed_dim: int
    text_width: int
    text_layers: int
    text_heads: int
    context_length: int
    vocab_size: int
    quick_gelu: bool = True  # reference checkpoints use x * sigmoid(1.702 x)

    @property
    def grid(self) -> int:
        return self.image_size // self.patch


class QuickGELU(nn.Module):
    def forward(self, x):
        return x * torch.sigmoid(1.702 * x)


class ResidualAttentionBlock(nn.Module):
    def __init__(self, width: int, heads: int, quick_gelu: bool):
        super().__init__()
        self.attn = nn.MultiheadAttention(width, heads)
        self.ln_1 = nn.LayerNorm(width)
        self.mlp = nn.Sequential(OrderedDict([
            ("c_fc", nn.Linear(width, width * 4)),
            ("gelu", QuickGELU() if quick_gelu else nn.GELU()),
            ("c_proj", nn.Linear(width * 4, width)),
        ]))
        self.ln_2 = nn.LayerNorm(width)
        self.attn_mask: torch.Tensor | None = None

    def attention(self, x):
        mask = self.attn_mask.to(dtype=x.dtype, device=x.device) if self.attn_mask is not None else None
        return self.attn(x, x, x, need_weights=False, attn_mask=mask)[0]

    def forward(self, x):  # x: (L, N, D), sequence first
        x = x + self.attention(self.ln_1(x))
        x = x + self.mlp(self.ln_2(x))
        return x


class Transformer(nn.Module):
    def __init__(self, width: int, layers: int, heads: int, quick_gelu: bool):
        super().__init__()
        self.resblocks = nn.Sequential(
            *[ResidualAttentionBlock(width, heads, quick_gelu) for _ in range(layers)]
        )

    def forward(self, x):
        return self.resblocks(x)


class VisionTransformer(nn.Module):
    def __init__(self, dims: ClipDims):
        super().__init__()
        self.patch = dims.patch
        self.conv1 = nn.Conv2d(3, dims.width, kernel_size=dims.patch,
                               stride=dims.patch, bias=False)
        scale = dims.width ** -0.5
        self.class_embedding = nn.Parameter(scale * torch.randn(dims.width))
        self.positional_embedding = nn.Parameter(
            scale * torch.randn(dims.grid ** 2 + 1, dims.width)
        )
        self.ln_pre = nn.LayerNorm(dims.width)
        self.transformer = Transformer(dims.width, dims.layers, dims.heads, dims.quick_gelu)
        self.ln_post = nn.LayerNorm(dims.width)
        self.proj = nn.Parameter(scale * torch.randn(dims.width, dims.embed_dim))

    def embed_tokens(self, pixels: torch.Tensor) -> torch.Tensor:
        """Patchify, prepend CLS, add (grid-interpolated) positions, ln_pre.
        Returns (L, N, D) sequence-first tokens ready for the blocks."""
        x = self.conv1(pixels)  # (N, D, gh, gw)
        gh, gw = x.shape[2], x.shape[3]
        x = x.flatten(2).transpose(1, 2)  # (N, gh*gw, D)
        cls = self.class_embedding.to(x.dtype).expand(x.shape[0], 1, -1)
        x = torch.cat([cls, x], dim=1)
        x = x + self._positions(gh, gw).to(x.dtype)
        x = self.ln_pre(x)
        return x.permute(1, 0, 2)

    def _positions(self, gh: int, gw: int) -> torch.Tensor:
        native = self.positional_embedding.shape[0] - 1
        side = int(round(native ** 0.5))
        if (gh, gw) == (side, side):
            return self.positional_embedding
        # bilinear resample of the patch-position grid for off-size inputs
        grid = self.positional_embedding[1:].reshape(side, side, -1).permute(2, 0, 1)
        grid = F.interpolate(grid[None], size=(gh, gw), mode="bilinear",
                             align_corners=False)[0]
        flat = grid.permute(1, 2, 0).reshape(gh * gw, -1)
        return torch.cat([self.positional_embedding[:1], flat], dim=0)

    def forward(self, pixels: torch.Tensor) -> torch.Tensor:
        """Pooled CLS embedding in the joint space, (N, E)."""
        x = self.transformer(self.embed_tokens(pixels))
        x = x.permute(1, 0, 2)
        return self.ln_post(x[:, 0, :]) @ self.proj


class Clip(nn.Module):
    def __init__(self, dims: ClipDims):
        super().__init__()
        self.dims = dims
        self.visual = VisionTransformer(dims)
        self.transformer = Transformer(dims.text_width, dims.text_layers,
                                       dims.text_heads, dims.quick_gelu)
        for block in self.transformer.resblocks:
            block.attn_mask = self._causal_mask(dims.context_length)
        self.token_embedding = nn.Embedding(dims.vocab_size, dims.text_width)
        self.positional_embedding = nn.Parameter(
            0.01 * torch.randn(dims.context_length, dims.text_width)
        )
        self.ln_final = nn.LayerNorm(dims.text_width)
        self.text_projection = nn.Parameter(
            dims.text_width ** -0.5 * torch.randn(dims.text_width, dims.embed_dim)
        )
        self.logit_scale = nn.Parameter(torch.tensor(4.6052))

    @staticmethod
    def _causal_mask(length: int) -> torch.Tensor:
        mask = torch.full((length, length), float("-inf"))
        return mask.triu(1)

    def encode_text(self, tokens: torch.Tensor) -> torch.Tensor:
        """tokens: (N, context_length) int64 with EOT at the argmax position."""
        x = self.token_embedding(tokens) + self.positional_embedding
        x = self.transformer(x.permute(1, 0, 2)).permute(1, 0, 2)
        x = self.ln_final(x)
        eot = tokens.argmax(dim=-1)
        return x[torch.arange(x.shape[0]), eot] @ self.text_projection

    def encode_image(self, pixels: torch.Tensor) -> torch.Tensor:
        return self.visual(pixels)


def infer_dims(state: dict, quick_gelu: bool = True) -> ClipDims:
    """Derive the architecture from a reference-format state dict.
    Head counts follow the width/64 convention of the published models."""
    width = state["visual.conv1.weight"].shape[0]
    patch = state["visual.conv1.weight"].shape[2]
    grid = int(round((state["visual.positional_embedding"].shape[0] - 1) ** 0.5))
    layers = len({k.split(".")[3] for k in state if k.startswith("visual.transformer.resblocks.")})
    text_width = state["token_embedding.weight"].shape[1]
    text_layers = len({k.split(".")[2] for k in state
                       if k.startswith("transformer.resblocks.")})
    return ClipDims(
        image_size=grid * patch,
        patch=patch,
        width=width,
        layers=layers,
        heads=max(1, width // 64),
        embed_dim=state["visual.proj"].shape[1],
        text_width=text_width,
        text_layers=text_layers,
        text_heads=max(1, text_width // 64),
        context_length=state["positional_embedding"].shape[0],
        vocab_size=state["token_embedding.weight"].shape[0],
        quick_gelu=quick_gelu,
    )
