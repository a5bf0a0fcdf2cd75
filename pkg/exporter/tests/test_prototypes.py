"""Prompt prototypes: normalization, averaging, ordering, determinism."""

import numpy as np
import pytest
import torch

from pearl.container import write_container
from pearl.errors import ValidationError
from pearl_export.export import export_prototypes
from pearl_export.providers import tiny_backbone
from pearl_export.templates import IMAGENET_TEMPLATES, SINGLE_TEMPLATE

VOC21 = [
    "background", "aeroplane", "bicycle", "bird", "boat", "bottle", "bus",
    "car", "cat", "chair", "cow", "dining table", "dog", "horse",
    "motorbike", "person", "potted plant", "sheep", "sofa", "train",
    "tv monitor",
]


@pytest.fixture(scope="module")
def backbone():
    return tiny_backbone(0)


class TestPrototypes:
    def test_rows_unit_norm(self, backbone):
        protos = export_prototypes(["cat", "dog", "sky"], backbone, IMAGENET_TEMPLATES)
        norms = np.linalg.norm(protos.get("prototypes"), axis=1)
        assert np.all(np.abs(norms - 1.0) <= 1e-4)

    def test_duplicate_classes_identical_rows(self, backbone):
        protos = export_prototypes(["cat", "cat"], backbone, IMAGENET_TEMPLATES)
        matrix = protos.get("prototypes")
        assert np.array_equal(matrix[0], matrix[1])

    def test_voc21_row_count_and_order(self, backbone):
        protos = export_prototypes(VOC21, backbone, SINGLE_TEMPLATE)
        matrix = protos.get("prototypes")
        assert matrix.shape[0] == 21
        solo = export_prototypes(["car"], backbone, SINGLE_TEMPLATE).get("prototypes")
        assert np.array_equal(matrix[VOC21.index("car")], solo[0])

    def test_template_averaging_oracle(self, backbone):
        templates = IMAGENET_TEMPLATES[:5]
        protos = export_prototypes(["bus"], backbone, templates).get("prototypes")
        with torch.no_grad():
            embedded = backbone.encode_texts([t.format("bus") for t in templates]).double()
        embedded /= embedded.norm(dim=-1, keepdim=True)
        mean = embedded.mean(dim=0)
        expected = (mean / mean.norm()).float().numpy()
        assert np.allclose(protos[0], expected, atol=1e-7)

    def test_single_template_differs_from_full_set(self, backbone):
        full = export_prototypes(["cat"], backbone, IMAGENET_TEMPLATES).get("prototypes")
        single = export_prototypes(["cat"], backbone, SINGLE_TEMPLATE).get("prototypes")
        assert not np.allclose(full, single)

    def test_deterministic(self, backbone):
        a = write_container(export_prototypes(VOC21, backbone, IMAGENET_TEMPLATES))
        b = write_container(export_prototypes(VOC21, backbone, IMAGENET_TEMPLATES))
        assert a == b

    def test_template_set_size(self):
        assert len(IMAGENET_TEMPLATES) == 80
        assert len(set(IMAGENET_TEMPLATES)) == 80
        assert SINGLE_TEMPLATE == ["a photo of a {}."]

    def test_empty_inputs_rejected(self, backbone):
        with pytest.raises(ValidationError, match="class"):
            export_prototypes([], backbone, IMAGENET_TEMPLATES)
        with pytest.raises(ValidationError, match="template"):
            export_prototypes(["cat"], backbone, [])
