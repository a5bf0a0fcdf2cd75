"""Command-line entry point.

    pearl run   --features F.prl --prototypes T.prl --image I.prl \
                --config C.txt --out S.prl [--dump-field F] \
                [--debug-identity-R] [--no-key-key] [--dump-system D.prl]
    pearl eval  --manifest M.csv --config C.txt [--prototypes T.prl] [--out R.csv]
    pearl info  PATH

Exit codes: 0 success, 2 validation/format error, 3 solver error.
"""

from __future__ import annotations

import argparse
import sys

import numpy as np

from .config import PipelineConfig, load_config
from .container import TensorContainer, TensorEntry, load_container, save_container
from .errors import PearlError, SolverError
from . import metrics, pipeline


def main(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        return args.handler(args)
    except SolverError as exc:
        print(f"solver error: {exc}", file=sys.stderr)
        return 3
    except PearlError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pearl")
    sub = parser.add_subparsers(required=True)

    run_p = sub.add_parser("run", help="segment one image from exported tensors")
    run_p.add_argument("--features", required=True)
    run_p.add_argument("--prototypes", required=True)
    run_p.add_argument("--image", required=True)
    run_p.add_argument("--config", required=True)
    run_p.add_argument("--out", required=True)
    run_p.add_argument("--dump-field", choices=["F"], default=None,
                       help="also write the refined class-score field")
    run_p.add_argument("--dump-system", default=None, metavar="PATH",
                       help="write propagation internals (graph, confidences, edges)")
    run_p.add_argument("--debug-identity-R", action="store_true", dest="identity_r",
                       help="skip the alignment solve (baseline attention)")
    run_p.add_argument("--no-key-key", action="store_true",
                       help="disable the key-key score term")
    run_p.add_argument("--no-replay-tail", action="store_true",
                       help="ignore shipped post-attention tail tensors")
    run_p.set_defaults(handler=_cmd_run)

    eval_p = sub.add_parser("eval", help="run a manifest of images and report mIoU/pAcc")
    eval_p.add_argument("--manifest", required=True)
    eval_p.add_argument("--config", required=True)
    eval_p.add_argument("--prototypes", default=None)
    eval_p.add_argument("--out", default=None, help="CSV output path (default stdout)")
    eval_p.set_defaults(handler=_cmd_eval)

    info_p = sub.add_parser("info", help="list the entries of a container file")
    info_p.add_argument("path")
    info_p.set_defaults(handler=_cmd_info)
    return parser


def _read_config(path: str) -> PipelineConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return load_config(fh.read())


def _cmd_run(args) -> int:
    config = _read_config(args.config)
    features = load_container(args.features)
    prototypes = load_container(args.prototypes)
    image = load_container(args.image)
    for name, container in (("features", features), ("prototypes", prototypes), ("image", image)):
        for entry in container.nonfinite:
            print(f"warning: {name} entry {entry!r} has non-finite values", file=sys.stderr)

    result = pipeline.run(
        features, prototypes, image, config,
        identity_rotation=args.identity_r,
        use_key_key=False if args.no_key_key else None,
        replay_tail=not args.no_replay_tail,
        keep_field=args.dump_field is not None,
    )
    entries = [TensorEntry("labels", result.labels.labels.astype(np.float32))]
    if args.dump_field is not None:
        entries.append(TensorEntry("F", np.moveaxis(result.field.scores, 2, 0)))
    save_container(TensorContainer(tuple(entries)), args.out)

    if args.dump_system:
        _dump_system(result, args.dump_system)
    worst = float(np.max(result.cg.residuals)) if result.cg.residuals.size else 0.0
    print(f"wrote {args.out} ({result.labels.shape[0]}x{result.labels.shape[1]}, "
          f"max CG residual {worst:.2e})")
    return 0


def _dump_system(result, path: str) -> None:
    trace = result.propagation
    save_container(TensorContainer((
        TensorEntry("G", trace.graph.matrix),
        TensorEntry("rho", trace.field.confidence),
        TensorEntry("edges.i", trace.edges.i.astype(np.float32)),
        TensorEntry("edges.j", trace.edges.j.astype(np.float32)),
        TensorEntry("edges.a", trace.edges.weight),
        TensorEntry("A.diag", trace.system.matrix.diagonal()),
    )), path)


def _cmd_eval(args) -> int:
    config = _read_config(args.config)
    with open(args.manifest, "r", encoding="utf-8") as fh:
        manifest = fh.read()
    table = metrics.run_corpus(manifest, config, default_prototypes=args.prototypes)
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(table)
    else:
        sys.stdout.write(table)
    return 0


def _cmd_info(args) -> int:
    container = load_container(args.path)
    for entry in container.entries:
        shape = "x".join(str(s) for s in entry.array.shape) or "scalar"
        flag = "  [non-finite]" if entry.name in container.nonfinite else ""
        print(f"{entry.name:32s} f32 {shape}{flag}")
    print(f"{len(container.entries)} entries")
    return 0


if __name__ == "__main__":
    sys.exit(main())
