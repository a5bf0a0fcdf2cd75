"""Segmentation metrics: confusion-matrix accumulation, mIoU / pixel
accuracy, the precision-efficiency score, and a manifest-driven corpus
runner emitting a CSV results table."""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .config import PipelineConfig
from .container import load_container
from .errors import ValidationError
from .pipeline import run
from .types import LabelMap


@dataclass(frozen=True)
class ConfusionMatrix:
    """counts[gt][pred] over non-ignored pixels."""

    counts: np.ndarray  # C x C int64
    ignored: int = 0

    def __post_init__(self):
        counts = np.asarray(self.counts, dtype=np.int64)
        if counts.ndim != 2 or counts.shape[0] != counts.shape[1]:
            raise ValidationError(f"confusion matrix must be square, got {counts.shape}")
        if np.any(counts < 0):
            raise ValidationError("confusion counts must be nonnegative")
        object.__setattr__(self, "counts", counts)

    @property
    def num_classes(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum())


def new_confusion(num_classes: int) -> ConfusionMatrix:
    if num_classes < 1:
        raise ValidationError(f"need at least one class, got {num_classes}")
    return ConfusionMatrix(np.zeros((num_classes, num_classes), dtype=np.int64))


def accumulate(cm: ConfusionMatrix, pred: LabelMap, gt: LabelMap) -> ConfusionMatrix:
    """Return a new matrix with one image's pixels added (gt ignore pixels
    are skipped and counted separately)."""
    if pred.shape != gt.shape:
        raise ValidationError(f"prediction {pred.shape} vs ground truth {gt.shape}")
    c = cm.num_classes
    mask = gt.valid_mask()
    g = gt.labels[mask].astype(np.int64)
    p = pred.labels[mask].astype(np.int64)
    if g.size and (g.min() < 0 or g.max() >= c):
        raise ValidationError(f"ground-truth label outside [0, {c})")
    if p.size and (p.min() < 0 or p.max() >= c):
        raise ValidationError(f"predicted label outside [0, {c})")
    extra = np.bincount(c * g + p, minlength=c * c).reshape(c, c)
    return ConfusionMatrix(cm.counts + extra, ignored=cm.ignored + int((~mask).sum()))


def merge(a: ConfusionMatrix, b: ConfusionMatrix) -> ConfusionMatrix:
    if a.num_classes != b.num_classes:
        raise ValidationError("cannot merge confusion matrices of different sizes")
    return ConfusionMatrix(a.counts + b.counts, ignored=a.ignored + b.ignored)


def per_class_iou(cm: ConfusionMatrix) -> np.ndarray:
    """IoU per class; NaN for classes absent from both gt and prediction."""
    tp = np.diag(cm.counts).astype(np.float64)
    gt_total = cm.counts.sum(axis=1).astype(np.float64)
    pred_total = cm.counts.sum(axis=0).astype(np.float64)
    union = gt_total + pred_total - tp
    with np.errstate(invalid="ignore", divide="ignore"):
        iou = np.where(union > 0, tp / union, np.nan)
    return iou


def miou(cm: ConfusionMatrix) -> float:
    """Mean IoU in percent over classes present in gt or prediction."""
    if cm.total == 0:
        raise ValidationError("confusion matrix is empty")
    iou = per_class_iou(cm)
    present = ~np.isnan(iou)
    if not present.any():
        raise ValidationError("no class is present in gt or prediction")
    return float(100.0 * iou[present].mean())


def pacc(cm: ConfusionMatrix) -> float:
    """Overall pixel accuracy in percent."""
    if cm.total == 0:
        raise ValidationError("confusion matrix is empty")
    return float(100.0 * np.diag(cm.counts).sum() / cm.total)


@dataclass(frozen=True)
class PesRow:
    """One configuration's quality/cost measurements."""

    miou: float
    pacc: float
    latency_ms: float
    memory_gb: float

    def __post_init__(self):
        for name in ("miou", "pacc", "latency_ms", "memory_gb"):
            value = getattr(self, name)
            if not np.isfinite(value) or value < 0:
                raise ValidationError(f"{name} must be finite and nonnegative, got {value}")


def pes(rows: list[PesRow]) -> list[float]:
    """Precision-efficiency score: the mean of min-max-normalized mIoU and
    pAcc plus flipped-normalized latency and memory. A metric constant
    across rows normalizes to 1 for every row."""
    if len(rows) < 2:
        raise ValidationError("PES normalization needs at least two rows")
    higher = [np.array([r.miou for r in rows]), np.array([r.pacc for r in rows])]
    lower = [np.array([r.latency_ms for r in rows]), np.array([r.memory_gb for r in rows])]
    terms = [_normalize(v) for v in higher] + [_normalize(v, flip=True) for v in lower]
    return list(np.mean(terms, axis=0))


def _normalize(values: np.ndarray, flip: bool = False) -> np.ndarray:
    lo, hi = values.min(), values.max()
    if hi <= lo:
        return np.ones_like(values, dtype=np.float64)
    scaled = (values - lo) / (hi - lo)
    return 1.0 - scaled if flip else scaled


@dataclass
class CorpusResult:
    dataset: str
    images: int = 0
    cm: ConfusionMatrix | None = None
    latency_ms: float = 0.0


def run_corpus(manifest_text: str, config: PipelineConfig,
               default_prototypes: str | None = None) -> str:
    """Evaluate every manifest line and emit a CSV table.

    Manifest lines: ``dataset,features,image,gt[,prototypes]`` (paths);
    blank lines and # comments are skipped. The optional fifth column
    overrides --prototypes per line. Ground truth is the "gt_labels" entry
    of the gt container, at the same resolution the pipeline emits.
    """
    datasets: dict[str, CorpusResult] = {}
    for lineno, raw in enumerate(manifest_text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = [p.strip() for p in line.split(",")]
        if len(parts) not in (4, 5):
            raise ValidationError(
                f"manifest line {lineno}: expected dataset,features,image,gt[,prototypes]"
            )
        dataset, features_path, image_path, gt_path = parts[:4]
        proto_path = parts[4] if len(parts) == 5 else default_prototypes
        if not proto_path:
            raise ValidationError(
                f"manifest line {lineno}: no prototypes column and no default given"
            )
        features = load_container(features_path)
        image = load_container(image_path)
        gt_container = load_container(gt_path)
        protos = load_container(proto_path)
        if "gt_labels" not in gt_container:
            raise ValidationError(f"{gt_path} has no 'gt_labels' entry")
        gt = LabelMap(gt_container.get("gt_labels"))

        started = time.perf_counter()
        result = run(features, protos, image, config)
        elapsed_ms = 1000.0 * (time.perf_counter() - started)

        num_classes = protos.get("prototypes").shape[0]
        entry = datasets.setdefault(dataset, CorpusResult(dataset, cm=new_confusion(num_classes)))
        if entry.cm.num_classes != num_classes:
            raise ValidationError(f"dataset {dataset}: class count changed between lines")
        entry.cm = accumulate(entry.cm, result.labels, gt)
        entry.images += 1
        entry.latency_ms += elapsed_ms

    lines = ["dataset,mIoU,pAcc"]
    for name in sorted(datasets):
        entry = datasets[name]
        lines.append(f"{name},{miou(entry.cm):.2f},{pacc(entry.cm):.2f}")
    return "\n".join(lines) + "\n"
