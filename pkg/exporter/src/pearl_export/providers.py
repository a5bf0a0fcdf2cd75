"""Backbone providers: seeded tiny models for tests/demos and a loader for
reference-format checkpoints. Every provider bundles a frozen model, a
matching tokenizer, and the preprocessing statistics."""

from __future__ import annotations

import re
from dataclasses import dataclass

import torch

from .model import Clip, ClipDims, infer_dims
from .tokenizer import BpeTokenizer, HashTokenizer

# preprocessing statistics of the reference checkpoints
CLIP_MEAN = (0.48145466, 0.4578275, 0.40821073)
CLIP_STD = (0.26862954, 0.26130258, 0.27577711)

TINY_DIMS = ClipDims(
    image_size=32,
    patch=8,
    width=64,
    layers=2,
    heads=4,
    embed_dim=48,
    text_width=64,
    text_layers=2,
    text_heads=4,
    context_length=16,
    vocab_size=256,
    quick_gelu=False,
)


@dataclass(frozen=True)
class Backbone:
    name: str
    model: Clip
    tokenizer: object             # callable: list[str] -> (N, context) int64
    mean: tuple[float, float, float]
    std: tuple[float, float, float]

    def encode_texts(self, texts: list[str]) -> torch.Tensor:
        with torch.no_grad():
            return self.model.encode_text(self.tokenizer(list(texts)))


def tiny_backbone(seed: int = 0, dims: ClipDims = TINY_DIMS) -> Backbone:
    """Randomly initialized frozen model; fully deterministic per seed."""
    generator = torch.Generator().manual_seed(seed)
    model = Clip(dims)
    with torch.no_grad():
        for param in model.parameters():
            param.copy_(0.02 * torch.randn(param.shape, generator=generator,
                                           dtype=torch.float32))
        # keep layer norms at their identity initialization
        for module in model.modules():
            if isinstance(module, torch.nn.LayerNorm):
                module.weight.fill_(1.0)
                module.bias.fill_(0.0)
    model.eval()
    for param in model.parameters():
        param.requires_grad_(False)
    tokenizer = HashTokenizer(dims.vocab_size, dims.context_length)
    return Backbone(name=f"tiny:{seed}", model=model, tokenizer=tokenizer,
                    mean=(0.5, 0.5, 0.5), std=(0.5, 0.5, 0.5))


def checkpoint_backbone(path: str, bpe_path: str | None = None,
                        heads: int | None = None, name: str | None = None) -> Backbone:
    """Load a reference-format checkpoint (TorchScript archive or plain
    state dict). Text encoding needs the BPE merges file."""
    state = _load_state(path)
    backbone_model = build_from_state(state, heads=heads)
    if bpe_path is None:
        tokenizer = _missing_tokenizer
    else:
        tokenizer = BpeTokenizer(bpe_path, backbone_model.dims.context_length)
        if tokenizer.vocab_size != backbone_model.dims.vocab_size:
            raise ValueError(
                f"BPE vocabulary size {tokenizer.vocab_size} does not match "
                f"the checkpoint's {backbone_model.dims.vocab_size}"
            )
    return Backbone(name=name or path, model=backbone_model, tokenizer=tokenizer,
                    mean=CLIP_MEAN, std=CLIP_STD)


def build_from_state(state: dict, heads: int | None = None,
                     quick_gelu: bool = True) -> Clip:
    dims = infer_dims(state, quick_gelu=quick_gelu)
    if heads is not None:
        dims = ClipDims(**{**dims.__dict__, "heads": heads,
                           "text_heads": max(1, dims.text_width // (dims.width // heads))})
    model = Clip(dims)
    missing, unexpected = model.load_state_dict(state, strict=False)
    unexpected = [k for k in unexpected if not _IGNORABLE.match(k)]
    missing = [k for k in missing if "attn_mask" not in k]
    if missing or unexpected:
        raise ValueError(f"state dict mismatch: missing {missing[:5]}, unexpected {unexpected[:5]}")
    model.eval()
    for param in model.parameters():
        param.requires_grad_(False)
    return model


_IGNORABLE = re.compile(r"^(input_resolution|context_length|vocab_size)$")


def _load_state(path: str) -> dict:
    try:
        scripted = torch.jit.load(path, map_location="cpu")
        return {k: v.float() for k, v in scripted.state_dict().items()}
    except RuntimeError:
        loaded = torch.load(path, map_location="cpu", weights_only=True)
        state = loaded.get("state_dict", loaded) if isinstance(loaded, dict) else loaded
        return {k.removeprefix("module."): v.float() for k, v in state.items()}


def _missing_tokenizer(texts):
    raise ValueError("checkpoint backbones need --bpe <merges file> to encode text")


def resolve_backbone(model_id: str, checkpoint: str | None = None,
                     bpe_path: str | None = None, heads: int | None = None) -> Backbone:
    """CLI model resolution: 'tiny' or 'tiny:<seed>' builds a seeded toy
    model; anything else names a real checkpoint supplied via --checkpoint."""
    if model_id == "tiny" or model_id.startswith("tiny:"):
        seed = int(model_id.partition(":")[2] or 0)
        return tiny_backbone(seed)
    if checkpoint is None:
        raise ValueError(
            f"model {model_id!r} needs --checkpoint <path> (only tiny[:seed] "
            "models are built in)"
        )
    return checkpoint_backbone(checkpoint, bpe_path=bpe_path, heads=heads, name=model_id)
