"""Container export: validation, determinism, geometry, downstream runs."""

import numpy as np
import pytest
import torch

from pearl import run
from pearl.config import PipelineConfig
from pearl.container import read_container, write_container
from pearl.errors import ValidationError
from pearl_export.export import (
    ExportManifest,
    export_image,
    export_prototypes,
    load_rgb,
    resize_short_side,
)
from pearl_export.providers import tiny_backbone
from pearl_export.templates import SINGLE_TEMPLATE


@pytest.fixture(scope="module")
def backbone():
    return tiny_backbone(0)


@pytest.fixture(scope="module")
def manifest(backbone):
    return ExportManifest(model=backbone.name, short_side=32, window=32, stride=32)


def make_image(shape=(40, 48, 3), seed=0):
    rng = np.random.default_rng(seed)
    return rng.uniform(0, 1, shape).astype(np.float32)


class TestContainer:
    def test_reader_accepts_with_zero_warnings(self, backbone, manifest):
        container = export_image(make_image(), backbone, manifest)
        back = read_container(write_container(container))
        assert back.nonfinite == ()
        assert back.names() == container.names()

    def test_deterministic_bytes(self, backbone, manifest):
        a = write_container(export_image(make_image(), backbone, manifest))
        b = write_container(export_image(make_image(), backbone, manifest))
        assert a == b

    def test_expected_entries_single_window(self, backbone):
        manifest = ExportManifest(model="tiny", short_side=32, window=32, stride=32)
        container = export_image(make_image((32, 32, 3)), backbone, manifest)
        names = set(container.names())
        for j in range(4):
            assert {f"Q.h{j}", f"K.h{j}", f"V.h{j}"} <= names
        assert {"x_in", "W_o", "W_o_bias", "ln2.weight", "mlp.fc1.weight",
                "mlp.fc2.weight", "ln_post.weight", "proj", "image_gray",
                "meta.h_p", "meta.w_p", "meta.cls_index", "meta.mlp_act"} <= names
        assert container.get("Q.h0").shape == (17, 16)
        assert float(container.get("meta.h_p")) == 4.0
        assert float(container.get("meta.mlp_act")) == 0.0  # tiny uses plain GELU

    def test_window_prefixes_in_plan_order(self, backbone, manifest):
        container = export_image(make_image(), backbone, manifest)
        # 40x48 image resized to short side 32 -> 32x38 frame -> lefts [0, 6]
        assert "win0.Q.h0" in container
        assert "win1.Q.h0" in container
        assert "win2.Q.h0" not in container
        assert container.get("image_gray").shape == (32, 38)

    def test_gray_is_rec601_of_resized_rgb(self, backbone, manifest):
        image = make_image(seed=3)
        container = export_image(image, backbone, manifest)
        rgb = resize_short_side(load_rgb(image), 32).numpy()
        expected = 0.299 * rgb[0] + 0.587 * rgb[1] + 0.114 * rgb[2]
        gray = container.get("image_gray")
        assert gray.min() >= 0.0 and gray.max() <= 1.0
        assert np.allclose(gray, expected.clip(0, 1), atol=1e-6)

    def test_gt_labels_nearest_resize(self, backbone, manifest):
        gt = np.arange(40 * 48).reshape(40, 48) % 3
        container = export_image(make_image(), backbone, manifest, gt_labels=gt)
        labels = container.get("gt_labels")
        assert labels.shape == (32, 38)
        assert set(np.unique(labels)) <= {0.0, 1.0, 2.0}


class TestDownstream:
    def test_pipeline_consumes_export(self, backbone, manifest):
        container = export_image(make_image(seed=4), backbone, manifest)
        protos = export_prototypes(["cat", "dog", "sky"], backbone, SINGLE_TEMPLATE)
        cfg = PipelineConfig(window=32, stride=32, short_side=32, grid_h=8, grid_w=8)
        result = run(container, protos, container, cfg)
        assert result.labels.shape == (32, 38)
        assert all(report.projected for report in result.reports)
        assert all(report.tail_replayed for report in result.reports)

    def test_tail_changes_the_features(self, backbone, manifest):
        container = export_image(make_image(seed=5), backbone, manifest)
        protos = export_prototypes(["cat", "dog", "sky"], backbone, SINGLE_TEMPLATE)
        cfg = PipelineConfig(window=32, stride=32, short_side=32, grid_h=8, grid_w=8)
        with_tail = run(container, protos, container, cfg, keep_field=True)
        without = run(container, protos, container, cfg, keep_field=True,
                      replay_tail=False)
        assert not np.allclose(with_tail.field.scores, without.field.scores)

    def test_aligned_features_match_full_tower_on_identity_path(self, backbone):
        """With the rotation forced to identity and the key-key term off, the
        replayed tail must reproduce the tower's own pooled features: the
        patch-text scores of the CLS row equal cosine against the prototypes."""
        manifest = ExportManifest(model="tiny", short_side=32, window=32, stride=32)
        image = make_image((32, 32, 3), seed=6)
        container = export_image(image, backbone, manifest)

        from pearl.pipeline import load_block
        from pearl.procrustes import align_block
        from pearl.types import PrototypeMatrix

        protos_c = export_prototypes(["cat", "dog"], backbone, SINGLE_TEMPLATE)
        protos = PrototypeMatrix(protos_c.get("prototypes"))
        heads, w_o, w_o_bias, tail, (h_p, w_p) = load_block(container)
        cfg = PipelineConfig(window=32, stride=32, short_side=32, grid_h=4, grid_w=4)
        logits, report = align_block(
            heads, w_o, protos, cfg, h_p, w_p, w_o_bias=w_o_bias, tail=tail,
            identity_rotation=True, use_key_key=False,
        )
        assert report.tail_replayed

        rgb = resize_short_side(load_rgb(image), 32)
        mean = torch.tensor(backbone.mean).view(3, 1, 1)
        std = torch.tensor(backbone.std).view(3, 1, 1)
        with torch.no_grad():
            tokens = backbone.model.visual.embed_tokens(((rgb - mean) / std)[None])
            out = backbone.model.visual.transformer(tokens).permute(1, 0, 2)
            feats = backbone.model.visual.ln_post(out) @ backbone.model.visual.proj
        feats = feats[0, 1:].double().numpy()
        alpha = 1.0 / np.sqrt(feats.shape[1])
        cos = (feats / np.linalg.norm(feats, axis=1, keepdims=True)) @ protos.vectors.T
        expected = (alpha * cos).reshape(h_p, w_p, -1)
        assert np.allclose(logits.scores, expected, atol=1e-5)


class TestManifest:
    def test_geometry_validation(self):
        with pytest.raises(ValidationError, match="stride"):
            ExportManifest(model="m", window=10, stride=11)
        with pytest.raises(ValidationError, match="short side"):
            ExportManifest(model="m", short_side=100, window=224)

    def test_json_round_trip(self):
        import json

        manifest = ExportManifest(model="tiny:0", dataset="toy", short_side=32,
                                  window=32, stride=16)
        data = json.loads(manifest.to_json())
        assert data["model"] == "tiny:0"
        assert data["stride"] == 16
