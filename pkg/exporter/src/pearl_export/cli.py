"""Batch exporter CLI.

    pearl-export --model tiny:0 --images <dir|files> --classes classes.txt \
                 --out exports/ --short-side 336 --window 224 --stride 112 \
                 [--checkpoint weights.pt] [--bpe merges.txt.gz] \
                 [--labels gt_dir] [--single-template] [--dataset name]

Writes one PRL1 container per image (pass it as both --features and
--image downstream), prototypes.prl, manifest.json, and corpus.csv ready
for `pearl eval`.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np
from PIL import Image

from pearl.container import save_container
from pearl.errors import PearlError

from .capture import ExportError
from .export import ExportManifest, export_image, export_prototypes
from .providers import resolve_backbone
from .templates import IMAGENET_TEMPLATES, SINGLE_TEMPLATE

IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".webp"}


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="pearl-export", description=__doc__)
    parser.add_argument("--model", required=True,
                        help="'tiny[:seed]' or a checkpoint name used with --checkpoint")
    parser.add_argument("--images", required=True, nargs="+",
                        help="image files or directories")
    parser.add_argument("--classes", required=True,
                        help="text file, one class name per line")
    parser.add_argument("--out", required=True)
    parser.add_argument("--short-side", type=int, default=336)
    parser.add_argument("--window", type=int, default=224)
    parser.add_argument("--stride", type=int, default=112)
    parser.add_argument("--checkpoint", default=None)
    parser.add_argument("--bpe", default=None, help="BPE merges file for checkpoint models")
    parser.add_argument("--heads", type=int, default=None,
                        help="override the width/64 head-count convention")
    parser.add_argument("--labels", default=None,
                        help="directory of <stem>.png ground-truth label maps")
    parser.add_argument("--single-template", action="store_true",
                        help="use only 'a photo of a {}.' instead of the 80-template set")
    parser.add_argument("--dataset", default="default")
    args = parser.parse_args(argv)

    try:
        return _run(args)
    except (PearlError, ExportError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def _run(args) -> int:
    backbone = resolve_backbone(args.model, checkpoint=args.checkpoint,
                                bpe_path=args.bpe, heads=args.heads)
    class_names = [line.strip() for line in
                   Path(args.classes).read_text(encoding="utf-8").splitlines()
                   if line.strip()]
    templates = SINGLE_TEMPLATE if args.single_template else IMAGENET_TEMPLATES

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    save_container(export_prototypes(class_names, backbone, templates),
                   out_dir / "prototypes.prl")
    (out_dir / "classes.txt").write_text("\n".join(class_names) + "\n", encoding="utf-8")

    images = _collect_images(args.images)
    if not images:
        print("error: no images found", file=sys.stderr)
        return 2

    manifest = ExportManifest(model=backbone.name, dataset=args.dataset,
                              short_side=args.short_side, window=args.window,
                              stride=args.stride)
    outputs = []
    corpus_lines = []
    for path in images:
        gt = _load_labels(args.labels, path)
        container = export_image(path, backbone, manifest, gt_labels=gt)
        target = out_dir / f"{path.stem}.prl"
        save_container(container, target)
        outputs.append((str(path), str(target)))
        if gt is not None:
            corpus_lines.append(
                f"{args.dataset},{target},{target},{target},{out_dir / 'prototypes.prl'}"
            )
        print(f"exported {path} -> {target}")

    manifest = ExportManifest(model=backbone.name, dataset=args.dataset,
                              short_side=args.short_side, window=args.window,
                              stride=args.stride, outputs=tuple(outputs))
    (out_dir / "manifest.json").write_text(manifest.to_json(), encoding="utf-8")
    if corpus_lines:
        (out_dir / "corpus.csv").write_text("\n".join(corpus_lines) + "\n",
                                            encoding="utf-8")
    print(f"wrote {len(outputs)} containers, prototypes, manifest.json")
    return 0


def _collect_images(sources: list[str]) -> list[Path]:
    found: list[Path] = []
    for source in sources:
        path = Path(source)
        if path.is_dir():
            found.extend(sorted(
                p for p in path.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES
            ))
        elif path.is_file():
            found.append(path)
        else:
            raise FileNotFoundError(f"no such image or directory: {source}")
    return found


def _load_labels(labels_dir: str | None, image_path: Path) -> np.ndarray | None:
    if labels_dir is None:
        return None
    candidate = Path(labels_dir) / f"{image_path.stem}.png"
    if not candidate.exists():
        raise FileNotFoundError(f"no label map for {image_path.stem} in {labels_dir}")
    with Image.open(candidate) as img:
        return np.asarray(img.convert("P") if img.mode == "P" else img.convert("L"),
                          dtype=np.int64)


if __name__ == "__main__":
    sys.exit(main())
