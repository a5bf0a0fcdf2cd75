"""Orthogonal alignment of attention keys to queries inside one block.

The solve is the classic orthogonal Procrustes problem: given weighted-centered
token clouds Q_c and K_c, find the orthogonal R minimizing ||K_c R - Q_c||_F.
The minimizer is the orthogonal polar factor of the cross-covariance
M = K_c^T Q_c, available either from a small SVD (R = U V^T) or from a
multiplication-only Newton-Schulz approximation of M (M^T M)^{-1/2}.

Attention is then recomputed with rotated keys; an optional key-key Gram term
built from the centered keys is added to the pre-softmax scores.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import erf

from .config import PipelineConfig
from .errors import DimensionError, SolverError, ValidationError
from .types import HeadTensors, LogitGrid, PrototypeMatrix

# Cross-covariance singular values below RANK_TOL * s_max are treated as zero.
RANK_TOL = 1e-10
# The raw Newton-Schulz op errors above this orthogonality residual;
# solve_alignment additionally falls back to SVD above the tighter
# NS_ORTHO_TARGET so every returned rotation meets its type tolerance.
NS_ORTHO_LIMIT = 1e-2
NS_ORTHO_TARGET = 1e-3


@dataclass(frozen=True)
class CenteredClouds:
    """Weighted-centered query/key clouds with their centroids and weights."""

    q_c: np.ndarray   # N x d
    k_c: np.ndarray   # N x d
    mu_q: np.ndarray  # d
    mu_k: np.ndarray  # d
    pi: np.ndarray    # N, nonnegative, sums to 1


@dataclass(frozen=True)
class AlignmentResult:
    rotation: np.ndarray  # d x d orthogonal
    solver_used: str
    iterations: int = 0
    residual: float | None = None   # ||K_c R - Q_c||_F, filled by solve_alignment
    degenerate: bool = False


def token_weights(q: np.ndarray, cls_index: int | None = None, zero_cls: bool = False) -> np.ndarray:
    """Weights proportional to query row norms, normalized to sum to 1.

    With zero_cls the CLS entry is forced to 0 before normalization. An
    all-zero query matrix falls back to uniform weights over the eligible
    tokens (degenerate input, kept total so downstream centering works).
    """
    q = np.asarray(q, dtype=np.float64)
    if q.ndim != 2 or q.shape[0] < 1:
        raise DimensionError(f"queries must be a nonempty N x d matrix, got {q.shape}")
    weights = np.linalg.norm(q, axis=1)
    if zero_cls and cls_index is not None:
        weights = weights.copy()
        weights[cls_index] = 0.0
    total = weights.sum()
    if total <= 0.0:
        eligible = np.ones(q.shape[0], dtype=np.float64)
        if zero_cls and cls_index is not None and q.shape[0] > 1:
            eligible[cls_index] = 0.0
        return eligible / eligible.sum()
    return weights / total


def weighted_center(q: np.ndarray, k: np.ndarray, pi: np.ndarray) -> CenteredClouds:
    """Remove the pi-weighted centroid from both clouds."""
    q = np.asarray(q, dtype=np.float64)
    k = np.asarray(k, dtype=np.float64)
    pi = np.asarray(pi, dtype=np.float64)
    if q.shape != k.shape:
        raise DimensionError(f"query/key shapes differ: {q.shape} vs {k.shape}")
    if pi.shape != (q.shape[0],):
        raise DimensionError(f"weights shape {pi.shape} does not match N={q.shape[0]}")
    if abs(pi.sum() - 1.0) > 1e-6 or np.any(pi < 0):
        raise ValidationError("token weights must be nonnegative and sum to 1")
    mu_q = pi @ q
    mu_k = pi @ k
    return CenteredClouds(q_c=q - mu_q, k_c=k - mu_k, mu_q=mu_q, mu_k=mu_k, pi=pi)


def cross_covariance(clouds: CenteredClouds) -> np.ndarray:
    """M = K_c^T Q_c, the d x d matrix whose polar factor is the aligner."""
    return clouds.k_c.T @ clouds.q_c


def polar_orthogonal_svd(m: np.ndarray) -> AlignmentResult:
    """Orthogonal polar factor via SVD: m = U S V^T  ->  R = U V^T.

    Rank-deficient m still yields a valid orthogonal matrix (the SVD
    completes the null directions arbitrarily); the result is flagged.
    """
    m = np.asarray(m, dtype=np.float64)
    _check_square(m)
    u, s, vt = np.linalg.svd(m)
    degenerate = bool(s[-1] <= RANK_TOL * max(s[0], 1e-300))
    return AlignmentResult(rotation=u @ vt, solver_used="svd", degenerate=degenerate)


def polar_orthogonal_newton_schulz(m: np.ndarray, iters: int) -> AlignmentResult:
    """Orthogonal polar factor via the coupled Newton-Schulz iteration.

    Computes (M^T M)^{-1/2} with the multiplication-only coupled iteration
        Y <- Y (3I - Z Y) / 2,   Z <- (3I - Z Y) Z / 2
    started from Y = A/c, Z = I where A = M^T M. The scale c is an upper
    bound on the spectral norm of A (min of Frobenius and max-column-sum
    norms, both >= lambda_max for SPD A), which places every eigenvalue of
    Y in (0, 1] - inside the convergence region. Then R = M Z / sqrt(c).
    """
    m = np.asarray(m, dtype=np.float64)
    _check_square(m)
    if iters < 1:
        raise ValidationError(f"iteration count must be >= 1, got {iters}")
    if not np.any(m):
        raise ValidationError("cross-covariance is identically zero")
    d = m.shape[0]
    a = m.T @ m
    scale = min(np.linalg.norm(a, "fro"), np.abs(a).sum(axis=0).max())
    eye = np.eye(d)
    y = a / scale
    z = eye.copy()
    for _ in range(iters):
        t = 0.5 * (3.0 * eye - z @ y)
        y = y @ t
        z = t @ z
    rotation = (m @ z) / np.sqrt(scale)
    ortho = np.linalg.norm(rotation.T @ rotation - eye)
    if ortho > NS_ORTHO_LIMIT:
        raise SolverError(
            f"Newton-Schulz did not converge after {iters} iterations "
            f"(orthogonality residual {ortho:.3e}); use the svd solver"
        )
    return AlignmentResult(rotation=rotation, solver_used="newton_schulz", iterations=iters)


def solve_alignment(clouds: CenteredClouds, solver: str, ns_iters: int = 8) -> AlignmentResult:
    """Cross-covariance -> configured polar solver -> fit residual.

    Newton-Schulz refuses rank-deficient or non-converged inputs; those
    fall back to the SVD route with the degenerate flag set.
    """
    m = cross_covariance(clouds)
    if solver == "svd":
        result = polar_orthogonal_svd(m)
    elif solver == "newton_schulz":
        result = None
        try:
            candidate = polar_orthogonal_newton_schulz(m, ns_iters)
            ortho = np.linalg.norm(candidate.rotation.T @ candidate.rotation - np.eye(m.shape[0]))
            if ortho <= NS_ORTHO_TARGET:
                result = candidate
        except (SolverError, ValidationError):
            pass
        if result is None:
            svd = polar_orthogonal_svd(m)
            result = AlignmentResult(rotation=svd.rotation, solver_used="svd", degenerate=True)
    else:
        raise ValidationError(f"unknown solver {solver!r}")
    residual = float(np.linalg.norm(clouds.k_c @ result.rotation - clouds.q_c))
    return AlignmentResult(
        rotation=result.rotation,
        solver_used=result.solver_used,
        iterations=result.iterations,
        residual=residual,
        degenerate=result.degenerate,
    )


def aligned_attention(
    head: HeadTensors,
    rotation: np.ndarray,
    use_key_key: bool,
    clouds: CenteredClouds | None = None,
) -> np.ndarray:
    """Recompute one head with rotated keys.

    scores = d^{-1/2} Q (K R)^T, plus d^{-1/2} K_c K_c^T when use_key_key,
    then row softmax and the usual value mixing. Each output row is a convex
    combination of V rows.
    """
    rotation = np.asarray(rotation, dtype=np.float64)
    d = head.width
    if rotation.shape != (d, d):
        raise DimensionError(f"rotation shape {rotation.shape} does not match head width {d}")
    scale = 1.0 / np.sqrt(d)
    scores = scale * (head.q @ (head.k @ rotation).T)
    if use_key_key:
        if clouds is None:
            raise ValidationError("key-key term requires the centered clouds")
        scores = scores + scale * (clouds.k_c @ clouds.k_c.T)
    return _row_softmax(scores) @ head.v


def _row_softmax(scores: np.ndarray) -> np.ndarray:
    shifted = scores - scores.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def aligned_logits(
    features: np.ndarray,
    prototypes: PrototypeMatrix,
    grid_h: int,
    grid_w: int,
) -> LogitGrid:
    """Cosine scores between patch features and class prototypes, scaled by
    D^{-1/2}. Zero-norm feature rows get a zero score row."""
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2:
        raise DimensionError(f"features must be P x D, got {features.shape}")
    if features.shape[0] != grid_h * grid_w:
        raise DimensionError(
            f"{features.shape[0]} feature rows cannot fill a {grid_h} x {grid_w} grid"
        )
    if features.shape[1] != prototypes.width:
        raise DimensionError(
            f"feature width {features.shape[1]} != prototype width {prototypes.width}"
        )
    alpha = 1.0 / np.sqrt(features.shape[1])
    feat_norms = np.linalg.norm(features, axis=1, keepdims=True)
    proto = prototypes.vectors / np.linalg.norm(prototypes.vectors, axis=1, keepdims=True)
    safe = np.where(feat_norms > 0.0, feat_norms, 1.0)
    cosine = (features / safe) @ proto.T
    cosine[feat_norms[:, 0] == 0.0] = 0.0
    scores = alpha * cosine
    return LogitGrid(scores.reshape(grid_h, grid_w, prototypes.num_classes))


@dataclass(frozen=True)
class BlockReport:
    """Diagnostics from one aligned block evaluation."""

    alignments: tuple[AlignmentResult, ...]
    projected: bool          # False = degraded mode, no output projection shipped
    tail_replayed: bool
    zero_feature_rows: int


@dataclass(frozen=True)
class BlockTail:
    """Optional post-attention tensors needed to replay the rest of the block."""

    x_in: np.ndarray | None = None            # N x D block input (pre-layernorm)
    ln2_weight: np.ndarray | None = None
    ln2_bias: np.ndarray | None = None
    fc1_weight: np.ndarray | None = None      # D x Dh
    fc1_bias: np.ndarray | None = None
    fc2_weight: np.ndarray | None = None      # Dh x D
    fc2_bias: np.ndarray | None = None
    ln_post_weight: np.ndarray | None = None
    ln_post_bias: np.ndarray | None = None
    proj: np.ndarray | None = None            # D x E embedding projection
    quick_gelu: bool = False                  # x * sigmoid(1.702 x) instead of erf GELU

    def can_replay(self) -> bool:
        mlp = (self.x_in, self.ln2_weight, self.ln2_bias,
               self.fc1_weight, self.fc1_bias, self.fc2_weight, self.fc2_bias)
        return all(t is not None for t in mlp)


def align_block(
    heads: list[HeadTensors],
    w_o: np.ndarray | None,
    prototypes: PrototypeMatrix,
    config: PipelineConfig,
    grid_h: int,
    grid_w: int,
    *,
    w_o_bias: np.ndarray | None = None,
    tail: BlockTail | None = None,
    identity_rotation: bool = False,
    use_key_key: bool | None = None,
    replay_tail: bool = True,
) -> tuple[LogitGrid, BlockReport]:
    """Full per-block path: weights -> centering -> polar solve -> aligned
    attention per head, concatenation, output projection, CLS drop, logits.

    identity_rotation short-circuits the solve with R = I (debug baseline).
    Without a shipped output projection the concatenated heads are scored
    directly (degraded mode, reported via BlockReport.projected).
    """
    if not heads:
        raise ValidationError("need at least one attention head")
    n = heads[0].tokens
    cls_index = heads[0].cls_index
    if any(h.tokens != n or h.cls_index != cls_index for h in heads):
        raise DimensionError("heads disagree on token count or CLS index")
    key_key = config.use_key_key if use_key_key is None else use_key_key

    outputs = []
    alignments = []
    for head in heads:
        pi = token_weights(head.q, head.cls_index, config.zero_cls_weight)
        clouds = weighted_center(head.q, head.k, pi)
        if identity_rotation:
            result = AlignmentResult(rotation=np.eye(head.width), solver_used="identity")
        else:
            result = solve_alignment(clouds, config.solver, config.ns_iters)
        alignments.append(result)
        outputs.append(aligned_attention(head, result.rotation, key_key, clouds))
    mixed = np.concatenate(outputs, axis=1)

    projected = w_o is not None
    if projected:
        w_o = np.asarray(w_o, dtype=np.float64)
        if w_o.shape[0] != mixed.shape[1]:
            raise DimensionError(
                f"output projection rows {w_o.shape[0]} != concatenated width {mixed.shape[1]}"
            )
        mixed = mixed @ w_o
        if w_o_bias is not None:
            mixed = mixed + np.asarray(w_o_bias, dtype=np.float64)

    replayed = False
    if tail is not None and replay_tail and tail.can_replay():
        act = _quick_gelu if tail.quick_gelu else _gelu
        mixed = np.asarray(tail.x_in, dtype=np.float64) + mixed
        hidden = _layer_norm(mixed, tail.ln2_weight, tail.ln2_bias)
        hidden = act(hidden @ np.asarray(tail.fc1_weight, dtype=np.float64)
                     + np.asarray(tail.fc1_bias, dtype=np.float64))
        mixed = mixed + hidden @ np.asarray(tail.fc2_weight, dtype=np.float64) \
            + np.asarray(tail.fc2_bias, dtype=np.float64)
        replayed = True
    if tail is not None and tail.ln_post_weight is not None and tail.ln_post_bias is not None:
        mixed = _layer_norm(mixed, tail.ln_post_weight, tail.ln_post_bias)
    if tail is not None and tail.proj is not None:
        mixed = mixed @ np.asarray(tail.proj, dtype=np.float64)

    if cls_index is not None:
        mixed = np.delete(mixed, cls_index, axis=0)
    logits = aligned_logits(mixed, prototypes, grid_h, grid_w)
    zero_rows = int(np.sum(np.linalg.norm(mixed, axis=1) == 0.0))
    report = BlockReport(
        alignments=tuple(alignments),
        projected=projected,
        tail_replayed=replayed,
        zero_feature_rows=zero_rows,
    )
    return logits, report


def _layer_norm(x: np.ndarray, weight, bias, eps: float = 1e-5) -> np.ndarray:
    mean = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    return (x - mean) / np.sqrt(var + eps) * np.asarray(weight, dtype=np.float64) \
        + np.asarray(bias, dtype=np.float64)


def _gelu(x: np.ndarray) -> np.ndarray:
    return 0.5 * x * (1.0 + erf(x / np.sqrt(2.0)))


def _quick_gelu(x: np.ndarray) -> np.ndarray:
    return x / (1.0 + np.exp(-1.702 * x))


def _check_square(m: np.ndarray) -> None:
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise DimensionError(f"expected a square matrix, got {m.shape}")
    if not np.all(np.isfinite(m)):
        raise ValidationError("matrix contains non-finite entries")
