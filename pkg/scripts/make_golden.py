#!/usr/bin/env python3
"""Regenerate the checked-in golden fixture under tests/data/.

The fixture freezes one synthetic scene (inputs + config) and the label
container the pipeline produced for it. The regression test replays the
inputs and demands byte-identical output, so rerun this script only when
an intentional numerical change invalidates the fixture.
"""

import pathlib
import sys

import numpy as np

sys.path.insert(0, str(pathlib.Path(__file__).resolve().parent.parent / "src"))

from pearl import run, save_container
from pearl.config import dump_config
from pearl.container import TensorContainer, TensorEntry
from pearl.synthetic import SceneSpec, build_scene

GOLDEN_SPEC = SceneSpec(seed=2024, noise_fraction=0.05)


def main() -> None:
    out_dir = pathlib.Path(__file__).resolve().parent.parent / "tests" / "data"
    out_dir.mkdir(parents=True, exist_ok=True)
    scene = build_scene(GOLDEN_SPEC)
    save_container(scene.features, out_dir / "golden_features.prl")
    save_container(scene.prototypes, out_dir / "golden_prototypes.prl")
    save_container(scene.image, out_dir / "golden_image.prl")
    (out_dir / "golden_config.txt").write_text(dump_config(scene.config))

    result = run(scene.features, scene.prototypes, scene.image, scene.config)
    labels = TensorContainer(
        (TensorEntry("labels", result.labels.labels.astype(np.float32)),)
    )
    save_container(labels, out_dir / "golden_labels.prl")
    agreement = np.mean(result.labels.labels == scene.gt.labels)
    print(f"golden fixture written to {out_dir} (gt agreement {agreement:.4f})")


if __name__ == "__main__":
    main()
