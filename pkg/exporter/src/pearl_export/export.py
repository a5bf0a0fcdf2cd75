"""Container export: per-window attention tensors and prompt prototypes."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from pearl.container import TensorContainer, container_from_arrays
from pearl.errors import ValidationError
from pearl.pipeline import plan_windows

from .capture import CapturedBlock, capture_last_block
from .providers import Backbone

LUMA = (0.299, 0.587, 0.114)


@dataclass(frozen=True)
class ExportManifest:
    """Geometry and provenance shared by one export batch. The three
    geometry fields must mirror the downstream run configuration."""

    model: str
    dataset: str = "default"
    short_side: int = 336
    window: int = 224
    stride: int = 112
    outputs: tuple = field(default=(), compare=False)

    def __post_init__(self):
        if not (1 <= self.stride <= self.window):
            raise ValidationError(f"stride {self.stride} must be in [1, window={self.window}]")
        if self.window > self.short_side:
            raise ValidationError(
                f"window {self.window} exceeds short side {self.short_side}; "
                "windows could never fit the resized image"
            )

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2) + "\n"


def load_rgb(source) -> torch.Tensor:
    """Image file / PIL image / array -> (3, H, W) float32 in [0, 1]."""
    if isinstance(source, (str, Path)):
        with Image.open(source) as img:
            arr = np.asarray(img.convert("RGB"), dtype=np.float32) / 255.0
    elif isinstance(source, Image.Image):
        arr = np.asarray(source.convert("RGB"), dtype=np.float32) / 255.0
    else:
        arr = np.asarray(source, dtype=np.float32)
        if arr.max() > 1.0 + 1e-6:
            arr = arr / 255.0
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ValidationError(f"expected an H x W x 3 image, got shape {arr.shape}")
    return torch.from_numpy(np.ascontiguousarray(arr.transpose(2, 0, 1)))


def resize_short_side(rgb: torch.Tensor, short_side: int) -> torch.Tensor:
    _, h, w = rgb.shape
    short = min(h, w)
    if short == short_side:
        return rgb
    scale = short_side / short
    out_h, out_w = max(1, round(h * scale)), max(1, round(w * scale))
    resized = F.interpolate(rgb[None], size=(out_h, out_w), mode="bilinear",
                            align_corners=False)[0]
    return resized.clamp(0.0, 1.0)


def export_image(source, backbone: Backbone, manifest: ExportManifest,
                 gt_labels: np.ndarray | None = None) -> TensorContainer:
    """One container per image: per-window head tensors, projection and tail
    weights, geometry metadata, the grayscale frame, and optional ground
    truth. Pass the same file as --features and --image downstream."""
    rgb = resize_short_side(load_rgb(source), manifest.short_side)
    _, height, width = rgb.shape
    gray = (LUMA[0] * rgb[0] + LUMA[1] * rgb[1] + LUMA[2] * rgb[2]).clamp(0.0, 1.0)

    plan = plan_windows(height, width, manifest.window, manifest.stride)
    mean = torch.tensor(backbone.mean).view(3, 1, 1)
    std = torch.tensor(backbone.std).view(3, 1, 1)
    crops = torch.stack([
        (rgb[:, top : top + h, left : left + w] - mean) / std
        for top, left, h, w in plan.windows
    ])
    captured = capture_last_block(backbone.model.visual, crops)

    grid = manifest.window // backbone.model.visual.patch
    expected_tokens = 1 + grid * grid
    if captured.tokens != expected_tokens:
        raise ValidationError(
            f"captured {captured.tokens} tokens, expected {expected_tokens} "
            f"for a {manifest.window}px window at patch {backbone.model.visual.patch}"
        )

    entries: list[tuple[str, np.ndarray]] = []
    multi = len(plan.windows) > 1
    for m in range(len(plan.windows)):
        prefix = f"win{m}." if multi else ""
        for j in range(captured.heads):
            entries.append((f"{prefix}Q.h{j}", _np(captured.q[m, j])))
            entries.append((f"{prefix}K.h{j}", _np(captured.k[m, j])))
            entries.append((f"{prefix}V.h{j}", _np(captured.v[m, j])))
        entries.append((f"{prefix}x_in", _np(captured.x_in[m])))
    entries += [
        ("W_o", _np(captured.w_o)),
        ("W_o_bias", _np(captured.w_o_bias)),
        ("ln2.weight", _np(captured.ln2_weight)),
        ("ln2.bias", _np(captured.ln2_bias)),
        ("mlp.fc1.weight", _np(captured.fc1_weight)),
        ("mlp.fc1.bias", _np(captured.fc1_bias)),
        ("mlp.fc2.weight", _np(captured.fc2_weight)),
        ("mlp.fc2.bias", _np(captured.fc2_bias)),
        ("ln_post.weight", _np(captured.ln_post_weight)),
        ("ln_post.bias", _np(captured.ln_post_bias)),
        ("proj", _np(captured.proj)),
        ("meta.h_p", np.array(grid, dtype=np.float32)),
        ("meta.w_p", np.array(grid, dtype=np.float32)),
        ("meta.cls_index", np.array(0.0, dtype=np.float32)),
        ("meta.mlp_act", np.array(1.0 if captured.quick_gelu else 0.0, dtype=np.float32)),
        ("image_gray", gray.numpy().astype(np.float32)),
    ]
    if gt_labels is not None:
        entries.append(("gt_labels", _resize_labels(gt_labels, height, width)))
    return container_from_arrays(entries)


def export_prototypes(class_names: list[str], backbone: Backbone,
                      templates: list[str]) -> TensorContainer:
    """Template-averaged unit-norm embedding per class, rows in input order.
    Each templated prompt is embedded and normalized; the per-class mean is
    re-normalized to unit length."""
    if not class_names:
        raise ValidationError("need at least one class name")
    if not templates:
        raise ValidationError("need at least one prompt template")
    rows = []
    for name in class_names:
        prompts = [t.format(name) for t in templates]
        embedded = backbone.encode_texts(prompts).double()
        embedded = embedded / embedded.norm(dim=-1, keepdim=True)
        mean = embedded.mean(dim=0)
        rows.append((mean / mean.norm()).float())
    return container_from_arrays([("prototypes", torch.stack(rows).numpy())])


def capture_for(source, backbone: Backbone, manifest: ExportManifest) -> CapturedBlock:
    """Capture without packaging (diagnostics and replay tests)."""
    rgb = resize_short_side(load_rgb(source), manifest.short_side)
    plan = plan_windows(rgb.shape[1], rgb.shape[2], manifest.window, manifest.stride)
    mean = torch.tensor(backbone.mean).view(3, 1, 1)
    std = torch.tensor(backbone.std).view(3, 1, 1)
    crops = torch.stack([
        (rgb[:, top : top + h, left : left + w] - mean) / std
        for top, left, h, w in plan.windows
    ])
    return capture_last_block(backbone.model.visual, crops)


def _np(tensor: torch.Tensor) -> np.ndarray:
    return tensor.detach().cpu().numpy().astype(np.float32, copy=False)


def _resize_labels(labels: np.ndarray, height: int, width: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.shape == (height, width):
        return labels.astype(np.float32)
    rows = (np.arange(height) + 0.5) * labels.shape[0] / height
    cols = (np.arange(width) + 0.5) * labels.shape[1] / width
    rows = np.clip(rows.astype(np.int64), 0, labels.shape[0] - 1)
    cols = np.clip(cols.astype(np.int64), 0, labels.shape[1] - 1)
    return labels[np.ix_(rows, cols)].astype(np.float32)
