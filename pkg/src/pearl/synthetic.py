"""Synthetic scenes with known ground truth.

Builds containers the pipeline can consume end to end: class-banded images,
orthonormal prototypes, and per-window attention tensors whose token
geometry encodes the class layout (same-class tokens share a query
direction, values carry the class prototype). An optional fraction of
patches is corrupted with off-class evidence that argmax alone mislabels
but neighborhood propagation can repair.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .config import PipelineConfig
from .container import TensorContainer, container_from_arrays
from .pipeline import plan_windows
from .types import LabelMap


@dataclass(frozen=True)
class SceneSpec:
    height: int = 64
    width: int = 64
    patch: int = 4
    heads: int = 4
    head_dim: int = 8
    classes: int = 3
    window: int = 64
    stride: int = 64
    q_class_scale: float = 2.0   # class-direction strength in queries
    q_noise: float = 1.0         # isotropic query noise (keeps clouds well-conditioned)
    k_noise: float = 0.1         # key perturbation away from queries
    v_noise: float = 0.05
    noise_fraction: float = 0.0  # fraction of patches given off-class evidence
    noise_strength: float = 4.0  # query norm of corrupted tokens (self-attending)
    seed: int = 0

    def __post_init__(self):
        assert self.height % self.patch == 0 and self.width % self.patch == 0
        assert self.window % self.patch == 0
        assert self.classes <= self.head_dim


@dataclass(frozen=True)
class Scene:
    features: TensorContainer
    prototypes: TensorContainer
    image: TensorContainer
    gt: LabelMap
    config: PipelineConfig
    noisy_patches: np.ndarray = field(default=None, compare=False)  # bool, patch grid


def build_scene(spec: SceneSpec = SceneSpec()) -> Scene:
    rng = np.random.default_rng(spec.seed)
    c, d, j = spec.classes, spec.head_dim, spec.heads
    dim = d * j
    h_p = spec.height // spec.patch
    w_p = spec.width // spec.patch

    protos = _orthonormal_rows(rng, c, dim)
    head_dirs = [_orthonormal_rows(rng, c, d) for _ in range(j)]

    # vertical class bands, patch aligned
    band = (np.arange(w_p) * c) // w_p
    class_map = np.broadcast_to(band, (h_p, w_p)).copy()

    noisy = np.zeros((h_p, w_p), dtype=bool)
    wrong = class_map.copy()
    if spec.noise_fraction > 0:
        count = int(round(spec.noise_fraction * h_p * w_p))
        flat = rng.choice(h_p * w_p, size=count, replace=False)
        noisy.ravel()[flat] = True
        shift = rng.integers(1, c, size=count)
        wrong.ravel()[flat] = (class_map.ravel()[flat] + shift) % c

    gray_levels = np.linspace(0.15, 0.85, c)
    gray = np.repeat(np.repeat(gray_levels[class_map], spec.patch, axis=0),
                     spec.patch, axis=1)
    gt = np.repeat(np.repeat(class_map, spec.patch, axis=0), spec.patch, axis=1)

    plan = plan_windows(spec.height, spec.width, spec.window, spec.stride)
    multi = len(plan.windows) > 1
    win_p = spec.window // spec.patch

    entries = []
    for index, (top, left, _, _) in enumerate(plan.windows):
        prefix = f"win{index}." if multi else ""
        rows = slice(top // spec.patch, top // spec.patch + win_p)
        cols = slice(left // spec.patch, left // spec.patch + win_p)
        local_class = class_map[rows, cols].ravel()
        local_noisy = noisy[rows, cols].ravel()
        local_wrong = wrong[rows, cols].ravel()
        n = 1 + local_class.size
        for head in range(j):
            dirs = head_dirs[head]
            q = np.empty((n, d))
            k = np.empty((n, d))
            v = np.empty((n, d))
            q[0] = 0.5 * rng.standard_normal(d)
            k[0] = 0.5 * rng.standard_normal(d)
            v[0] = 0.1 * rng.standard_normal(d)
            for t, cls in enumerate(local_class, start=1):
                if local_noisy[t - 1]:
                    axis = _unit(rng.standard_normal(d))
                    q[t] = spec.noise_strength * axis + spec.q_noise * rng.standard_normal(d)
                    value_class = local_wrong[t - 1]
                else:
                    q[t] = spec.q_class_scale * dirs[cls] + spec.q_noise * rng.standard_normal(d)
                    value_class = cls
                k[t] = q[t] + spec.k_noise * rng.standard_normal(d)
                v[t] = protos[value_class, head * d : (head + 1) * d] \
                    + spec.v_noise * rng.standard_normal(d)
            entries.append((f"{prefix}Q.h{head}", q))
            entries.append((f"{prefix}K.h{head}", k))
            entries.append((f"{prefix}V.h{head}", v))
    entries.append(("W_o", np.eye(dim)))
    entries.append(("meta.h_p", np.array(float(win_p))))
    entries.append(("meta.w_p", np.array(float(win_p))))
    entries.append(("meta.cls_index", np.array(0.0)))

    config = PipelineConfig(
        grid_h=h_p,
        grid_w=w_p,
        window=spec.window,
        stride=spec.stride,
        short_side=min(spec.height, spec.width),
    )
    return Scene(
        features=container_from_arrays(entries),
        prototypes=container_from_arrays([("prototypes", protos)]),
        image=container_from_arrays([("image_gray", gray), ("gt_labels", gt)]),
        gt=LabelMap(gt),
        config=config,
        noisy_patches=noisy,
    )


def _orthonormal_rows(rng: np.random.Generator, rows: int, width: int) -> np.ndarray:
    q, _ = np.linalg.qr(rng.standard_normal((width, rows)))
    return q.T[:rows]


def _unit(vec: np.ndarray) -> np.ndarray:
    return vec / np.linalg.norm(vec)
