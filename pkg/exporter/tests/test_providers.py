"""Backbone providers: seeding, state-dict format compatibility."""

import numpy as np
import pytest
import torch

from pearl_export.model import infer_dims
from pearl_export.providers import (
    TINY_DIMS,
    build_from_state,
    resolve_backbone,
    tiny_backbone,
)


class TestTiny:
    def test_same_seed_same_weights(self):
        a = tiny_backbone(3).model.state_dict()
        b = tiny_backbone(3).model.state_dict()
        assert all(torch.equal(a[k], b[k]) for k in a)

    def test_different_seed_different_weights(self):
        a = tiny_backbone(0).model.visual.conv1.weight
        b = tiny_backbone(1).model.visual.conv1.weight
        assert not torch.equal(a, b)

    def test_frozen(self):
        model = tiny_backbone(0).model
        assert all(not p.requires_grad for p in model.parameters())


class TestStateDictFormat:
    def test_reference_key_names_present(self):
        state = tiny_backbone(0).model.state_dict()
        for key in [
            "visual.conv1.weight",
            "visual.class_embedding",
            "visual.positional_embedding",
            "visual.ln_pre.weight",
            "visual.transformer.resblocks.0.attn.in_proj_weight",
            "visual.transformer.resblocks.0.attn.out_proj.weight",
            "visual.transformer.resblocks.1.mlp.c_fc.weight",
            "visual.transformer.resblocks.1.ln_2.bias",
            "visual.ln_post.weight",
            "visual.proj",
            "token_embedding.weight",
            "positional_embedding",
            "transformer.resblocks.0.attn.in_proj_weight",
            "ln_final.weight",
            "text_projection",
            "logit_scale",
        ]:
            assert key in state, key

    def test_infer_dims_from_state(self):
        state = tiny_backbone(0).model.state_dict()
        dims = infer_dims(state, quick_gelu=False)
        assert dims.width == TINY_DIMS.width
        assert dims.patch == TINY_DIMS.patch
        assert dims.image_size == TINY_DIMS.image_size
        assert dims.layers == TINY_DIMS.layers
        assert dims.text_layers == TINY_DIMS.text_layers
        assert dims.embed_dim == TINY_DIMS.embed_dim
        assert dims.context_length == TINY_DIMS.context_length
        assert dims.vocab_size == TINY_DIMS.vocab_size

    def test_round_trip_through_loader(self):
        original = tiny_backbone(5)
        state = {k: v.clone() for k, v in original.model.state_dict().items()}
        rebuilt = build_from_state(state, heads=TINY_DIMS.heads, quick_gelu=False)

        pixels = torch.from_numpy(
            np.random.default_rng(0).uniform(-1, 1, (2, 3, 32, 32)).astype(np.float32)
        )
        tokens = original.tokenizer(["a photo of a cat.", "a photo of a dog."])
        with torch.no_grad():
            assert torch.equal(original.model.encode_image(pixels),
                               rebuilt.encode_image(pixels))
            assert torch.equal(original.model.encode_text(tokens),
                               rebuilt.encode_text(tokens))

    def test_loader_rejects_garbage(self):
        state = tiny_backbone(0).model.state_dict()
        state["visual.surprise"] = torch.zeros(3)
        with pytest.raises(ValueError, match="unexpected"):
            build_from_state(state, heads=TINY_DIMS.heads, quick_gelu=False)


class TestResolve:
    def test_tiny_ids(self):
        assert resolve_backbone("tiny").name == "tiny:0"
        assert resolve_backbone("tiny:7").name == "tiny:7"

    def test_checkpoint_requires_path(self):
        with pytest.raises(ValueError, match="--checkpoint"):
            resolve_backbone("ViT-B/16")
