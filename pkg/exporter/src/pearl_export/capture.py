"""Last-block tensor capture.

A forward pre-hook on the final residual block grabs the block input; the
attention operands are then produced by applying the block's own layer norm
and Q/K/V projections explicitly, so the exported matrices are exactly what
the attention would consume (no hidden scaling, no fused kernels).
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F


class ExportError(RuntimeError):
    """Architecture mismatch or hook failure during capture."""


@dataclass(frozen=True)
class CapturedBlock:
    q: torch.Tensor        # (M, J, L, d) per window, per head
    k: torch.Tensor
    v: torch.Tensor
    x_in: torch.Tensor     # (M, L, D) block input before its layer norm
    x_ln: torch.Tensor     # (M, L, D) layer-normed projection input
    w_o: torch.Tensor      # (D, D), row-vector convention: features @ w_o
    w_o_bias: torch.Tensor
    ln2_weight: torch.Tensor
    ln2_bias: torch.Tensor
    fc1_weight: torch.Tensor   # (D, Dh)
    fc1_bias: torch.Tensor
    fc2_weight: torch.Tensor   # (Dh, D)
    fc2_bias: torch.Tensor
    ln_post_weight: torch.Tensor
    ln_post_bias: torch.Tensor
    proj: torch.Tensor         # (D, E)
    quick_gelu: bool

    @property
    def heads(self) -> int:
        return self.q.shape[1]

    @property
    def tokens(self) -> int:
        return self.q.shape[2]


def capture_last_block(visual, pixels: torch.Tensor) -> CapturedBlock:
    """Run the vision tower on a window batch (M, 3, S, S) and capture the
    final block's attention operands plus every tensor the tail needs."""
    for attr in ("transformer", "ln_pre", "conv1"):
        if not hasattr(visual, attr):
            raise ExportError(f"vision tower has no submodule {attr!r}")
    blocks = getattr(visual.transformer, "resblocks", None)
    if blocks is None or len(blocks) == 0:
        raise ExportError("vision tower has no transformer.resblocks")
    block = blocks[-1]
    for attr in ("ln_1", "attn", "ln_2", "mlp"):
        if not hasattr(block, attr):
            raise ExportError(f"last block has no submodule {attr!r}")

    captured: dict[str, torch.Tensor] = {}

    def pre_hook(_module, args):
        captured["x_in"] = args[0].detach()

    handle = block.register_forward_pre_hook(pre_hook)
    try:
        with torch.no_grad():
            visual.transformer(visual.embed_tokens(pixels))
    finally:
        handle.remove()
    if "x_in" not in captured:
        raise ExportError("forward pre-hook on the last block never fired")

    x_in = captured["x_in"]                      # (L, M, D), sequence first
    with torch.no_grad():
        x_ln = block.ln_1(x_in)
        qkv = F.linear(x_ln, block.attn.in_proj_weight, block.attn.in_proj_bias)
        q, k, v = qkv.chunk(3, dim=-1)
        heads = block.attn.num_heads
        mlp = block.mlp
        quick = type(mlp.gelu).__name__ == "QuickGELU"
        return CapturedBlock(
            q=_split_heads(q, heads),
            k=_split_heads(k, heads),
            v=_split_heads(v, heads),
            x_in=x_in.permute(1, 0, 2).contiguous(),
            x_ln=x_ln.permute(1, 0, 2).contiguous(),
            w_o=block.attn.out_proj.weight.T.contiguous(),
            w_o_bias=block.attn.out_proj.bias.detach().clone(),
            ln2_weight=block.ln_2.weight.detach().clone(),
            ln2_bias=block.ln_2.bias.detach().clone(),
            fc1_weight=mlp.c_fc.weight.T.contiguous(),
            fc1_bias=mlp.c_fc.bias.detach().clone(),
            fc2_weight=mlp.c_proj.weight.T.contiguous(),
            fc2_bias=mlp.c_proj.bias.detach().clone(),
            ln_post_weight=visual.ln_post.weight.detach().clone(),
            ln_post_bias=visual.ln_post.bias.detach().clone(),
            proj=visual.proj.detach().clone(),
            quick_gelu=quick,
        )


def _split_heads(x: torch.Tensor, heads: int) -> torch.Tensor:
    length, batch, width = x.shape
    if width % heads:
        raise ExportError(f"width {width} not divisible into {heads} heads")
    return (
        x.reshape(length, batch, heads, width // heads)
        .permute(1, 2, 0, 3)
        .contiguous()
    )
