"""End-to-end inference: window planning, per-window alignment and scoring,
overlap fusion, grid propagation, and the final label map.

Canonical container entries (see container.py for the byte format):

    features:   "Q.h{j}" / "K.h{j}" / "V.h{j}"   per head, single window,
                or "win{m}.Q.h{j}" ... for m = 0..M-1 in plan order
                (rows of windows top-to-bottom, then left-to-right);
                optional "W_o", "W_o_bias", tail tensors ("x_in",
                "ln2.weight", "mlp.fc1.weight", ..., "ln_post.weight",
                "proj") and scalars "meta.h_p", "meta.w_p",
                "meta.cls_index", "meta.mlp_act" (0 = GELU, 1 = QuickGELU)
    prototypes: "prototypes" (C x D)
    image:      "image_gray" (H x W in [0, 1]) or "image_rgb" (H x W x 3),
                optional "gt_labels"
"""

from __future__ import annotations

import re
from contextlib import contextmanager
from dataclasses import dataclass

import numpy as np

from .config import PipelineConfig
from .container import TensorContainer
from .errors import DimensionError, PearlError, PlanningError, ValidationError
from .procrustes import BlockReport, BlockTail, align_block
from .propagate import (
    PropagationTrace,
    bilinear_resize,
    class_graph,
    finalize,
    pool_to_grid,
    propagate_field,
)
from .types import HeadTensors, LabelMap, LogitGrid, PrototypeMatrix

# Rec. 601 luma coefficients for grayscale conversion of RGB inputs.
LUMA = (0.299, 0.587, 0.114)


@dataclass(frozen=True)
class WindowPlan:
    """Sliding-window crops plus count-reciprocal fusion weights."""

    windows: tuple[tuple[int, int, int, int], ...]  # (top, left, height, width)
    coverage: np.ndarray                            # H x W window count per pixel

    @property
    def image_shape(self) -> tuple[int, int]:
        return self.coverage.shape

    def weight(self, index: int) -> np.ndarray:
        """Fusion weight field of one window over its own crop."""
        top, left, h, w = self.windows[index]
        return 1.0 / self.coverage[top : top + h, left : left + w]


def plan_windows(height: int, width: int, window: int, stride: int) -> WindowPlan:
    """Standard sliding grid; the last row/column is clamped to the border so
    every pixel is covered. Weights average the covering windows."""
    if stride < 1 or stride > window:
        raise ValidationError(f"stride {stride} must be in [1, window={window}]")
    if window > height or window > width:
        raise PlanningError(
            f"window {window} exceeds the {height} x {width} image; "
            "resize the input so the short side is at least the window"
        )
    tops = _starts(height, window, stride)
    lefts = _starts(width, window, stride)
    windows = tuple(
        (top, left, window, window) for top in tops for left in lefts
    )
    coverage = np.zeros((height, width), dtype=np.int64)
    for top, left, h, w in windows:
        coverage[top : top + h, left : left + w] += 1
    return WindowPlan(windows=windows, coverage=coverage)


def _starts(extent: int, window: int, stride: int) -> list[int]:
    starts = list(range(0, extent - window + 1, stride))
    if starts[-1] + window < extent:
        starts.append(extent - window)
    return starts


def fuse(window_logits: list[LogitGrid], plan: WindowPlan) -> LogitGrid:
    """Pixelwise convex combination of per-window logits in the image frame."""
    if len(window_logits) != len(plan.windows):
        raise DimensionError(
            f"{len(window_logits)} logit grids for {len(plan.windows)} planned windows"
        )
    height, width = plan.image_shape
    classes = window_logits[0].classes
    fused = np.zeros((height, width, classes), dtype=np.float64)
    for index, grid in enumerate(window_logits):
        top, left, h, w = plan.windows[index]
        if grid.scores.shape != (h, w, classes):
            raise DimensionError(
                f"window {index} logits {grid.scores.shape} do not match its "
                f"{h} x {w} crop with {classes} classes"
            )
        fused[top : top + h, left : left + w] += plan.weight(index)[:, :, None] * grid.scores
    return LogitGrid(fused)


@contextmanager
def _stage(name: str):
    """Prefix module errors with the pipeline stage they came from."""
    try:
        yield
    except PearlError as exc:
        exc.args = (f"[{name}] {exc.args[0]}" if exc.args else f"[{name}]",) + exc.args[1:]
        raise


@dataclass(frozen=True)
class RunResult:
    labels: LabelMap
    field: LogitGrid | None
    reports: tuple[BlockReport, ...]
    propagation: PropagationTrace

    @property
    def cg(self):
        return self.propagation.cg


def run(
    features: TensorContainer,
    prototypes: TensorContainer,
    image: TensorContainer,
    config: PipelineConfig,
    *,
    identity_rotation: bool = False,
    use_key_key: bool | None = None,
    replay_tail: bool = True,
    keep_field: bool = False,
    track_energy: bool = False,
) -> RunResult:
    """Align every window, fuse, propagate, and label.

    Deterministic for fixed inputs and config. identity_rotation and
    use_key_key override the alignment stage for baselines and ablations.
    """
    with _stage("load"):
        gray = _load_gray(image, config.short_side)
        height, width = gray.shape
        protos = load_prototypes(prototypes)
    with _stage("plan"):
        plan = plan_windows(height, width, config.window, config.stride)

    grids = []
    reports = []
    for index, (top, left, win_h, win_w) in enumerate(plan.windows):
        with _stage(f"align win{index}"):
            heads, w_o, w_o_bias, tail, (h_p, w_p) = load_block(
                features, window_index=index, num_windows=len(plan.windows)
            )
            logits, report = align_block(
                heads, w_o, protos, config, h_p, w_p,
                w_o_bias=w_o_bias, tail=tail,
                identity_rotation=identity_rotation,
                use_key_key=use_key_key,
                replay_tail=replay_tail,
            )
        upsampled = bilinear_resize(np.moveaxis(logits.scores, 2, 0), win_h, win_w)
        grids.append(LogitGrid(np.moveaxis(upsampled, 0, 2)))
        reports.append(report)

    with _stage("fuse"):
        fused = fuse(grids, plan)
    with _stage("propagate"):
        field = pool_to_grid(fused, gray, config.grid_h, config.grid_w)
        graph = class_graph(protos, config.tau_s, config.beta)
        refined, trace = propagate_field(
            field, graph,
            epsilon=config.epsilon, kappa=config.kappa, lam=config.lam,
            tau=config.tau, cg_iters=config.cg_iters, track_energy=track_energy,
        )
    with _stage("finalize"):
        labels, full = finalize(refined, height, width)
    return RunResult(
        labels=labels,
        field=full if keep_field else None,
        reports=tuple(reports),
        propagation=trace,
    )


def _load_gray(image: TensorContainer, short_side: int) -> np.ndarray:
    if "image_gray" in image:
        gray = np.asarray(image.get("image_gray"), dtype=np.float64)
        if gray.ndim != 2:
            raise DimensionError(f"image_gray must be H x W, got {gray.shape}")
    elif "image_rgb" in image:
        rgb = np.asarray(image.get("image_rgb"), dtype=np.float64)
        if rgb.ndim != 3 or rgb.shape[2] != 3:
            raise DimensionError(f"image_rgb must be H x W x 3, got {rgb.shape}")
        gray = LUMA[0] * rgb[:, :, 0] + LUMA[1] * rgb[:, :, 1] + LUMA[2] * rgb[:, :, 2]
    else:
        raise ValidationError("image container needs an 'image_gray' or 'image_rgb' entry")
    if np.any(gray < -1e-6) or np.any(gray > 1.0 + 1e-6):
        raise ValidationError("grayscale values must lie in [0, 1]")
    gray = np.clip(gray, 0.0, 1.0)
    h, w = gray.shape
    short = min(h, w)
    if short != short_side:
        scale = short_side / short
        out_h, out_w = max(1, round(h * scale)), max(1, round(w * scale))
        gray = bilinear_resize(gray[None], out_h, out_w)[0]
        gray = np.clip(gray, 0.0, 1.0)
    return gray


def load_prototypes(container: TensorContainer) -> PrototypeMatrix:
    if "prototypes" not in container:
        raise ValidationError("prototypes container needs a 'prototypes' entry")
    return PrototypeMatrix(container.get("prototypes"))


def load_block(
    container: TensorContainer,
    window_index: int = 0,
    num_windows: int = 1,
) -> tuple[list[HeadTensors], np.ndarray | None, np.ndarray | None, BlockTail, tuple[int, int]]:
    """Pull one window's head tensors plus shared projection/tail tensors."""
    prefix = f"win{window_index}." if num_windows > 1 else ""
    if num_windows == 1 and "win0.Q.h0" in container:
        prefix = "win0."

    pattern = re.compile(rf"^{re.escape(prefix)}Q\.h(\d+)$")
    head_ids = sorted(
        int(match.group(1))
        for name in container.names()
        if (match := pattern.match(name))
    )
    if not head_ids:
        raise ValidationError(
            f"features container has no '{prefix}Q.h*' entries "
            f"(expected {num_windows} window groups)"
        )
    if head_ids != list(range(len(head_ids))):
        raise ValidationError(f"head indices must be contiguous from 0, got {head_ids}")

    cls_index = _meta_int(container, "meta.cls_index")
    tokens = container.get(f"{prefix}Q.h0").shape[0]
    h_p, w_p = _patch_grid(container, tokens, cls_index)
    if cls_index is None and tokens == h_p * w_p + 1:
        cls_index = 0

    heads = []
    for j in head_ids:
        try:
            q = container.get(f"{prefix}Q.h{j}")
            k = container.get(f"{prefix}K.h{j}")
            v = container.get(f"{prefix}V.h{j}")
        except KeyError as exc:
            raise ValidationError(f"features container is missing entry {exc}") from exc
        heads.append(HeadTensors(q, k, v, cls_index=cls_index))

    w_o = container.get("W_o") if "W_o" in container else None
    w_o_bias = container.get("W_o_bias") if "W_o_bias" in container else None
    act_code = _meta_int(container, "meta.mlp_act")
    tail = BlockTail(
        x_in=_maybe(container, f"{prefix}x_in"),
        ln2_weight=_maybe(container, "ln2.weight"),
        ln2_bias=_maybe(container, "ln2.bias"),
        fc1_weight=_maybe(container, "mlp.fc1.weight"),
        fc1_bias=_maybe(container, "mlp.fc1.bias"),
        fc2_weight=_maybe(container, "mlp.fc2.weight"),
        fc2_bias=_maybe(container, "mlp.fc2.bias"),
        ln_post_weight=_maybe(container, "ln_post.weight"),
        ln_post_bias=_maybe(container, "ln_post.bias"),
        proj=_maybe(container, "proj"),
        quick_gelu=act_code == 1,
    )
    return heads, w_o, w_o_bias, tail, (h_p, w_p)


def _maybe(container: TensorContainer, name: str) -> np.ndarray | None:
    return container.get(name) if name in container else None


def _meta_int(container: TensorContainer, name: str) -> int | None:
    if name not in container:
        return None
    value = np.asarray(container.get(name)).ravel()
    if value.size != 1:
        raise ValidationError(f"{name} must hold a single scalar")
    return int(round(float(value[0])))


def _patch_grid(container: TensorContainer, tokens: int, cls_index: int | None) -> tuple[int, int]:
    h_p = _meta_int(container, "meta.h_p")
    w_p = _meta_int(container, "meta.w_p")
    if h_p is not None and w_p is not None:
        return h_p, w_p
    patches = tokens if cls_index is None else tokens - 1
    side = int(round(np.sqrt(patches)))
    if side * side == patches:
        return side, side
    if cls_index is None and int(round(np.sqrt(tokens - 1))) ** 2 == tokens - 1:
        side = int(round(np.sqrt(tokens - 1)))
        return side, side
    raise ValidationError(
        f"cannot infer the patch grid from {tokens} tokens; "
        "ship meta.h_p / meta.w_p entries"
    )
