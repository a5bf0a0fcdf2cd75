"""Text-aware Laplacian refinement of a class-logit field.

The logit field is pooled onto a small grid, each node gets a confidence
weight built from its class posterior and a prototype-derived class graph,
4-neighbor edges are weighted by image gradients gated by text consistency,
and the refined field solves

    (D_rho + tau L) F = D_rho Z

with a fixed number of conjugate-gradient iterations warm-started at Z.
The result is bilinearly upsampled and argmaxed into a label map.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
import scipy.sparse as sp

from .errors import DimensionError, SolverError, ValidationError
from .types import LabelMap, LogitGrid, PrototypeMatrix


@dataclass(frozen=True)
class ClassGraph:
    """Row-stochastic class-affinity matrix derived from the prototypes."""

    matrix: np.ndarray  # C x C, rows sum to 1
    tau_s: float
    beta: float

    @property
    def num_classes(self) -> int:
        return self.matrix.shape[0]


@dataclass(frozen=True)
class GridField:
    """Pooled logits plus, once node_stats ran, posteriors and confidences."""

    pooled: np.ndarray             # C x Hg x Wg
    gray: np.ndarray               # Hg x Wg in [0, 1]
    probs: np.ndarray | None = None       # n x C simplex rows (n = Hg * Wg)
    confidence: np.ndarray | None = None  # n, strictly positive

    @property
    def grid_shape(self) -> tuple[int, int]:
        return self.pooled.shape[1], self.pooled.shape[2]

    @property
    def num_nodes(self) -> int:
        return self.pooled.shape[1] * self.pooled.shape[2]

    def flat_logits(self) -> np.ndarray:
        """Node-major view of the pooled logits, shape n x C."""
        c = self.pooled.shape[0]
        return self.pooled.reshape(c, -1).T


@dataclass(frozen=True)
class EdgeSet:
    """Undirected 4-neighbor edges with positive weights."""

    i: np.ndarray       # E, node indices (row-major, i < j)
    j: np.ndarray
    weight: np.ndarray  # E, in (0, 1 + lam]
    kappa: float
    lam: float

    def __len__(self) -> int:
        return len(self.weight)


@dataclass(frozen=True)
class LinearSystem:
    matrix: sp.csr_matrix   # D_rho + tau L, SPD
    rhs: np.ndarray         # n x C = D_rho Z
    z: np.ndarray           # n x C pooled logits (warm start)
    rho: np.ndarray
    tau: float
    edges: EdgeSet


@dataclass(frozen=True)
class CgResult:
    solution: np.ndarray          # n x C
    residuals: np.ndarray         # final relative residual per channel
    iterations: int
    energies: np.ndarray | None = None  # per-iteration objective, if tracked


def pool_to_grid(logits: LogitGrid, gray: np.ndarray, grid_h: int, grid_w: int) -> GridField:
    """Adaptive average pooling onto a grid_h x grid_w grid.

    Cell (r, s) averages input rows [floor(r H / Hg), floor((r+1) H / Hg))
    and likewise for columns, which partitions the input exactly.
    """
    gray = np.asarray(gray, dtype=np.float64)
    h, w = logits.height, logits.width
    if gray.shape != (h, w):
        raise DimensionError(f"gray shape {gray.shape} does not match logits {h} x {w}")
    if not (1 <= grid_h <= h and 1 <= grid_w <= w):
        raise DimensionError(
            f"grid {grid_h} x {grid_w} must be within the {h} x {w} input"
        )
    pooled = _adaptive_mean(np.moveaxis(logits.scores, 2, 0), grid_h, grid_w)
    pooled_gray = _adaptive_mean(gray[None], grid_h, grid_w)[0]
    return GridField(pooled=pooled, gray=pooled_gray)


def _adaptive_mean(stack: np.ndarray, grid_h: int, grid_w: int) -> np.ndarray:
    """Mean-pool the trailing two axes of a (C, H, W) stack via integral sums."""
    _, h, w = stack.shape
    rows = (np.arange(grid_h + 1) * h) // grid_h
    cols = (np.arange(grid_w + 1) * w) // grid_w
    integral = np.zeros((stack.shape[0], h + 1, w + 1), dtype=np.float64)
    integral[:, 1:, 1:] = stack.cumsum(axis=1).cumsum(axis=2)
    block = (
        integral[:, rows[1:], :][:, :, cols[1:]]
        - integral[:, rows[:-1], :][:, :, cols[1:]]
        - integral[:, rows[1:], :][:, :, cols[:-1]]
        + integral[:, rows[:-1], :][:, :, cols[:-1]]
    )
    areas = np.outer(np.diff(rows), np.diff(cols))
    return block / areas


def class_graph(prototypes: PrototypeMatrix, tau_s: float, beta: float) -> ClassGraph:
    """Row-softmax of the prototype similarities plus a boosted diagonal,
    re-normalized so every row sums to 1."""
    if tau_s <= 0:
        raise ValidationError(f"tau_s must be positive, got {tau_s}")
    if beta < 0:
        raise ValidationError(f"beta must be nonnegative, got {beta}")
    sim = (prototypes.vectors @ prototypes.vectors.T) / tau_s
    soft = _row_softmax(sim)
    boosted = soft + beta * np.eye(prototypes.num_classes)
    matrix = boosted / boosted.sum(axis=1, keepdims=True)
    return ClassGraph(matrix=matrix, tau_s=tau_s, beta=beta)


def node_stats(field: GridField, graph: ClassGraph, epsilon: float) -> GridField:
    """Per-node posterior p = softmax(logits) and confidence
    rho = max(peak, epsilon)^2 * (1 + p^T G p)."""
    if epsilon <= 0:
        raise ValidationError(f"epsilon must be positive, got {epsilon}")
    if field.pooled.shape[0] != graph.num_classes:
        raise DimensionError(
            f"{field.pooled.shape[0]} logit channels vs {graph.num_classes} graph classes"
        )
    probs = _row_softmax(field.flat_logits())
    peak = probs.max(axis=1)
    agreement = np.einsum("nc,cd,nd->n", probs, graph.matrix, probs)
    rho = np.maximum(peak, epsilon) ** 2 * (1.0 + agreement)
    return replace(field, probs=probs, confidence=rho)


def edge_set(field: GridField, graph: ClassGraph, kappa: float, lam: float) -> EdgeSet:
    """4-neighbor edge weights a = exp(-kappa |dI|) * (1 + lam * g) with the
    text gate g = clip_[0,1](p_i^T G p_j)."""
    if field.probs is None:
        raise ValidationError("edge_set needs node_stats output (posteriors missing)")
    if kappa <= 0:
        raise ValidationError(f"kappa must be positive, got {kappa}")
    if lam < 0:
        raise ValidationError(f"lambda must be nonnegative, got {lam}")
    hg, wg = field.grid_shape
    gray = field.gray
    if np.any(gray < -1e-9) or np.any(gray > 1.0 + 1e-9):
        raise ValidationError("grayscale values must lie in [0, 1]")
    idx = np.arange(hg * wg).reshape(hg, wg)
    horiz = (idx[:, :-1].ravel(), idx[:, 1:].ravel())
    vert = (idx[:-1, :].ravel(), idx[1:, :].ravel())
    i = np.concatenate([horiz[0], vert[0]])
    j = np.concatenate([horiz[1], vert[1]])
    flat_gray = gray.ravel()
    grad = np.abs(flat_gray[i] - flat_gray[j])
    img_strength = np.exp(-kappa * grad)
    gate = np.einsum("ec,cd,ed->e", field.probs[i], graph.matrix, field.probs[j])
    gate = np.clip(gate, 0.0, 1.0)
    weight = img_strength * (1.0 + lam * gate)
    return EdgeSet(i=i, j=j, weight=weight, kappa=kappa, lam=lam)


def assemble_system(rho: np.ndarray, edges: EdgeSet, tau: float, flat_logits: np.ndarray) -> LinearSystem:
    """A = D_rho + tau L (graph Laplacian of the edge weights) and
    B = D_rho Z. A is SPD whenever some rho_i > 0."""
    rho = np.asarray(rho, dtype=np.float64)
    n = rho.shape[0]
    if tau < 0:
        raise ValidationError(f"tau must be nonnegative, got {tau}")
    if np.all(rho <= 0):
        raise ValidationError("need at least one positive confidence")
    lap = graph_laplacian(n, edges)
    matrix = (sp.diags(rho) + tau * lap).tocsr()
    z = np.asarray(flat_logits, dtype=np.float64)
    if z.shape[0] != n:
        raise DimensionError(f"{z.shape[0]} logit rows for {n} confidence entries")
    rhs = rho[:, None] * z
    return LinearSystem(matrix=matrix, rhs=rhs, z=z, rho=rho, tau=tau, edges=edges)


def graph_laplacian(n: int, edges: EdgeSet) -> sp.csr_matrix:
    """Degree-minus-adjacency Laplacian for an undirected weighted edge list."""
    rows = np.concatenate([edges.i, edges.j])
    cols = np.concatenate([edges.j, edges.i])
    vals = np.concatenate([edges.weight, edges.weight])
    adj = sp.coo_matrix((vals, (rows, cols)), shape=(n, n))
    degree = np.asarray(adj.sum(axis=1)).ravel()
    return (sp.diags(degree) - adj).tocsr()


def system_energy(flat_f: np.ndarray, rho: np.ndarray, flat_z: np.ndarray,
                  edges: EdgeSet, tau: float) -> float:
    """Quadratic objective: 0.5 sum_i rho_i ||f_i - z_i||^2
    + 0.5 tau sum_edges a_ij ||f_i - f_j||^2."""
    diff = flat_f - flat_z
    data = 0.5 * float(np.sum(rho * np.sum(diff * diff, axis=1)))
    step = flat_f[edges.i] - flat_f[edges.j]
    smooth = 0.5 * tau * float(np.sum(edges.weight * np.sum(step * step, axis=1)))
    return data + smooth


def cg_solve(system: LinearSystem, iters: int, *, track_energy: bool = False) -> CgResult:
    """Exactly `iters` conjugate-gradient iterations per class channel,
    warm-started at the pooled logits (the rhs preimage).

    All channels share the matrix; each keeps its own step sizes. Channels
    whose residual hits zero are frozen. A residual growing more than 10x
    within one iteration signals numerical breakdown.
    """
    if iters < 1:
        raise ValidationError(f"iteration count must be >= 1, got {iters}")
    a = system.matrix
    b = system.rhs
    flat_z = system.z
    x = flat_z.copy()
    r = b - a @ x
    p = r.copy()
    rs = np.sum(r * r, axis=0)
    energies = [system_energy(x, system.rho, flat_z, system.edges, system.tau)] if track_energy else None
    for _ in range(iters):
        norm_before = np.sqrt(rs)
        ap = a @ p
        denom = np.sum(p * ap, axis=0)
        if np.any((denom <= 0) & (rs > 0)):
            worst = int(np.argmin(denom))
            raise SolverError(
                f"conjugate-gradient breakdown on channel {worst}: nonpositive "
                f"curvature {denom[worst]:.3e} (operator is not positive definite)"
            )
        step = np.divide(rs, denom, out=np.zeros_like(rs), where=denom > 0)
        x = x + step * p
        r = r - step * ap
        rs_new = np.sum(r * r, axis=0)
        grew = np.sqrt(rs_new) > 10.0 * norm_before
        if np.any(grew & (norm_before > 0)):
            worst = int(np.argmax(np.sqrt(rs_new) - norm_before))
            raise SolverError(
                f"conjugate gradients diverged on channel {worst}: residual "
                f"{norm_before[worst]:.3e} -> {np.sqrt(rs_new[worst]):.3e}"
            )
        beta = np.divide(rs_new, rs, out=np.zeros_like(rs), where=rs > 0)
        p = r + beta * p
        rs = rs_new
        if track_energy:
            energies.append(system_energy(x, system.rho, flat_z, system.edges, system.tau))
    b_norm = np.linalg.norm(b, axis=0)
    rel = np.divide(np.sqrt(rs), b_norm, out=np.zeros_like(rs), where=b_norm > 0)
    return CgResult(
        solution=x,
        residuals=rel,
        iterations=iters,
        energies=np.asarray(energies) if track_energy else None,
    )


@dataclass(frozen=True)
class PropagationTrace:
    """Everything the propagation stage derived, for diagnostics/dumping."""

    cg: CgResult
    field: GridField      # with posteriors and confidences populated
    edges: EdgeSet
    system: LinearSystem
    graph: ClassGraph


def propagate_field(field: GridField, graph: ClassGraph, *, epsilon: float,
                    kappa: float, lam: float, tau: float, cg_iters: int,
                    track_energy: bool = False) -> tuple[np.ndarray, PropagationTrace]:
    """Convenience chain: node_stats -> edge_set -> assemble -> cg_solve.
    Returns the refined C x Hg x Wg field and the full trace."""
    field = node_stats(field, graph, epsilon)
    edges = edge_set(field, graph, kappa, lam)
    system = assemble_system(field.confidence, edges, tau, field.flat_logits())
    result = cg_solve(system, cg_iters, track_energy=track_energy)
    c = graph.num_classes
    hg, wg = field.grid_shape
    refined = result.solution.T.reshape(c, hg, wg)
    return refined, PropagationTrace(cg=result, field=field, edges=edges,
                                     system=system, graph=graph)


def bilinear_resize(stack: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Separable bilinear resampling of a (C, H, W) stack with half-pixel
    centers (align_corners=False convention), edges clamped."""
    stack = np.asarray(stack, dtype=np.float64)
    _, h, w = stack.shape
    resized = _interp_axis(stack, out_h, axis=1)
    return _interp_axis(resized, out_w, axis=2)


def _interp_axis(stack: np.ndarray, out_size: int, axis: int) -> np.ndarray:
    size = stack.shape[axis]
    src = (np.arange(out_size) + 0.5) * (size / out_size) - 0.5
    src = np.clip(src, 0.0, size - 1.0)
    lo = np.floor(src).astype(np.int64)
    hi = np.minimum(lo + 1, size - 1)
    frac = src - lo
    take_lo = np.take(stack, lo, axis=axis)
    take_hi = np.take(stack, hi, axis=axis)
    shape = [1, 1, 1]
    shape[axis] = out_size
    frac = frac.reshape(shape)
    return take_lo * (1.0 - frac) + take_hi * frac


def finalize(refined: np.ndarray, out_h: int, out_w: int) -> tuple[LabelMap, LogitGrid]:
    """Bilinear upsample to the output frame and take the per-pixel argmax
    (ties break toward the lowest class index)."""
    refined = np.asarray(refined, dtype=np.float64)
    if refined.ndim != 3:
        raise DimensionError(f"refined field must be C x Hg x Wg, got {refined.shape}")
    _, hg, wg = refined.shape
    if out_h < hg or out_w < wg:
        raise DimensionError(
            f"output {out_h} x {out_w} smaller than grid {hg} x {wg}"
        )
    full = bilinear_resize(refined, out_h, out_w)
    labels = np.argmax(full, axis=0).astype(np.int32)
    return LabelMap(labels), LogitGrid(np.moveaxis(full, 0, 2))


def _row_softmax(scores: np.ndarray) -> np.ndarray:
    shifted = scores - scores.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)
