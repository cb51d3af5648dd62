"""Evaluation suite: L2, Fréchet distance, variation, Shannon-index
diversity, paired FD, Pearson correlation, and time-lagged cross correlation.

All statistics are computed in float64. Sequence arguments are (N, T, F)
stacks (a single (T, F) sequence is promoted to N=1); distribution metrics
flatten each sequence to one R^{T*F} point.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    ContractError,
    DegenerateInput,
    EmptyInput,
    NumericalError,
    ShapeError,
)
from .rng import named_stream

logger = logging.getLogger(__name__)

PCC_EPS = 1e-12


def _as_stack(x, name: str) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[None]
    if arr.ndim != 3:
        raise ShapeError(f"{name}: expected (N, T, F) or (T, F), got {arr.shape}")
    return arr


# -- distances -------------------------------------------------------------------


def l2(pred, gt) -> float:
    """Mean per-sequence Euclidean distance between prediction and truth."""
    p = _as_stack(pred, "l2 pred")
    g = _as_stack(gt, "l2 gt")
    if p.shape != g.shape:
        raise ShapeError(f"l2: shapes {p.shape} and {g.shape} differ")
    diff = (p - g).reshape(len(p), -1)
    return float(np.linalg.norm(diff, axis=1).mean())


def _cov_mean(rows: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    mu = rows.mean(axis=0)
    sigma = np.cov(rows, rowvar=False)
    sigma = np.atleast_2d(sigma)
    return mu, sigma


def _trace_sqrt_product(sig_a: np.ndarray, xa: np.ndarray, sig_b: np.ndarray,
                        xb: np.ndarray) -> float:
    """tr((sig_a sig_b)^(1/2)) with negative eigenvalues clamped to zero.

    Uses the symmetrized eigendecomposition sig_a^(1/2) sig_b sig_a^(1/2)
    directly; when the feature dimension is much larger than the sample
    counts the same spectrum is read off the (na x nb) Gram matrix of the
    centered samples instead, which is algebraically identical.
    """
    d = sig_a.shape[0]
    if d > 4 * max(len(xa), len(xb)) and d > 64:
        ca = xa - xa.mean(axis=0)
        cb = xb - xb.mean(axis=0)
        cross = ca @ cb.T / np.sqrt((len(xa) - 1) * (len(xb) - 1))
        svals = np.linalg.svd(cross, compute_uv=False)
        return float(svals.sum())
    evals_a, evecs_a = np.linalg.eigh(sig_a)
    root_a = (evecs_a * np.sqrt(np.clip(evals_a, 0, None))) @ evecs_a.T
    inner = root_a @ sig_b @ root_a
    inner = (inner + inner.T) / 2
    evals = np.linalg.eigvalsh(inner)
    return float(np.sqrt(np.clip(evals, 0, None)).sum())


def frechet_distance(a, b) -> float:
    """Fréchet distance between the Gaussian fits of two sequence sets.

    |mu_a - mu_b|^2 + tr(S_a + S_b - 2 (S_a S_b)^(1/2)), sample covariance.
    """
    def rows(x, name):
        arr = np.asarray(x, dtype=np.float64)
        if arr.ndim == 3:          # (N, T, F) sequences, flattened per sample
            return arr.reshape(len(arr), -1)
        if arr.ndim == 2:          # (N, D) already-flattened samples
            return arr
        raise ShapeError(f"{name}: expected (N, T, F) or (N, D), got {arr.shape}")

    xa = rows(a, "frechet a")
    xb = rows(b, "frechet b")
    if len(xa) < 2 or len(xb) < 2:
        raise ContractError(f"frechet_distance: need >= 2 samples per side, "
                            f"got {len(xa)} and {len(xb)}")
    if xa.shape[1] != xb.shape[1]:
        raise ShapeError(f"frechet_distance: feature dims {xa.shape[1]} vs {xb.shape[1]}")
    mu_a, sig_a = _cov_mean(xa)
    mu_b, sig_b = _cov_mean(xb)
    if not (np.isfinite(sig_a).all() and np.isfinite(sig_b).all()):
        raise NumericalError("frechet_distance: non-finite covariance")
    diff = mu_a - mu_b
    tr_sqrt = _trace_sqrt_product(sig_a, xa, sig_b, xb)
    val = float(diff @ diff + np.trace(sig_a) + np.trace(sig_b) - 2.0 * tr_sqrt)
    # tiny negatives are floating-point dust from the clamped square root
    return max(val, 0.0)


def paired_fd(pred_listener, gt_listener, speaker) -> float:
    """FD on channel-wise listener (+) speaker pairs against ground truth."""
    p = _as_stack(pred_listener, "paired_fd pred")
    g = _as_stack(gt_listener, "paired_fd gt")
    s = _as_stack(speaker, "paired_fd speaker")
    if p.shape[:2] != s.shape[:2] or g.shape[:2] != s.shape[:2]:
        raise ShapeError(f"paired_fd: misaligned shapes {p.shape}, {g.shape}, {s.shape}")
    return frechet_distance(np.concatenate([p, s], axis=2),
                            np.concatenate([g, s], axis=2))


# -- diversity -------------------------------------------------------------------


def variation(sequences) -> float:
    """Temporal (population) variance averaged over batch and features."""
    x = _as_stack(sequences, "variation")
    if x.shape[1] == 1:
        logger.info("variation: single-frame sequences, returning 0 by convention")
        return 0.0
    return float(x.var(axis=1).mean())


@dataclass
class ClusterModel:
    """k-means centroids fitted on training frames."""

    centroids: np.ndarray
    k: int

    def assign(self, frames: np.ndarray) -> np.ndarray:
        frames = np.asarray(frames, dtype=np.float64)
        d = ((frames[:, None, :] - self.centroids[None]) ** 2).sum(axis=2)
        return d.argmin(axis=1)


def fit_clusters(frames: np.ndarray, k: int, seed: int = 0, max_iter: int = 100) -> ClusterModel:
    """Plain k-means with k-means++ init, fixed seed, at most max_iter sweeps."""
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim != 2 or len(frames) == 0:
        raise EmptyInput(f"fit_clusters: need non-empty (N, F) frames, got {frames.shape}")
    if k < 1 or k > len(frames):
        raise ContractError(f"fit_clusters: k={k} incompatible with {len(frames)} frames")
    rng = named_stream(seed, "kmeans")
    centroids = np.empty((k, frames.shape[1]))
    centroids[0] = frames[rng.integers(len(frames))]
    d2 = ((frames - centroids[0]) ** 2).sum(axis=1)
    for i in range(1, k):
        total = d2.sum()
        if total <= 0:
            centroids[i:] = frames[rng.integers(len(frames), size=k - i)]
            break
        centroids[i] = frames[np.searchsorted(np.cumsum(d2 / total), rng.random())]
        d2 = np.minimum(d2, ((frames - centroids[i]) ** 2).sum(axis=1))
    assign = None
    for _ in range(max_iter):
        d = ((frames[:, None, :] - centroids[None]) ** 2).sum(axis=2)
        new_assign = d.argmin(axis=1)
        if assign is not None and np.array_equal(new_assign, assign):
            break
        assign = new_assign
        for j in range(k):
            members = frames[assign == j]
            if len(members):
                centroids[j] = members.mean(axis=0)
    return ClusterModel(centroids=centroids, k=k)


def shannon_index(model: ClusterModel, sequences) -> float:
    """Entropy (natural log) of the cluster-id histogram of all frames."""
    x = _as_stack(sequences, "shannon_index")
    frames = x.reshape(-1, x.shape[2])
    ids = model.assign(frames)
    counts = np.bincount(ids, minlength=model.k).astype(np.float64)
    p = counts / counts.sum()
    nz = p > 0
    return float(-(p[nz] * np.log(p[nz])).sum() + 0.0)  # +0.0 normalizes -0.0


# -- synchrony -------------------------------------------------------------------


def pcc(x, y) -> float:
    """Pearson correlation of two 1-D series."""
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    if x.shape != y.shape or len(x) < 2:
        raise ShapeError(f"pcc: need equal-length series of >= 2 points, "
                         f"got {x.shape} and {y.shape}")
    xc = x - x.mean()
    yc = y - y.mean()
    vx = (xc * xc).sum()
    vy = (yc * yc).sum()
    if vx < PCC_EPS or vy < PCC_EPS:
        raise DegenerateInput("pcc: a series has zero variance")
    return float((xc * yc).sum() / np.sqrt(vx * vy))


def project_1d(sequence, channel: str, smile_weights: np.ndarray | None = None) -> np.ndarray:
    """1-D projection of a motion matrix for synchrony metrics.

    channel "expression_smile": a linear functional over the expression
    block (default: the first coefficient; configurable weights). channel
    "rotation_nod": the pitch component of the rotation block. `sequence`
    is a full (T, d_m+3) motion matrix or a MotionSequence.
    """
    from .motiondata import MotionSequence

    if isinstance(sequence, MotionSequence):
        expr, rot = sequence.expression, sequence.rotation
    else:
        arr = np.asarray(sequence, dtype=np.float64)
        if arr.ndim != 2 or arr.shape[1] < 4:
            raise ShapeError(f"project_1d: expected (T, d_m+3), got {arr.shape}")
        expr, rot = arr[:, :-3], arr[:, -3:]
    if channel == "expression_smile":
        if smile_weights is None:
            return np.asarray(expr[:, 0], dtype=np.float64)
        w = np.asarray(smile_weights, dtype=np.float64)
        if w.shape != (expr.shape[1],):
            raise ShapeError(f"project_1d: smile weights {w.shape} vs expression "
                             f"dim {expr.shape[1]}")
        return expr.astype(np.float64) @ w
    if channel == "rotation_nod":
        return np.asarray(rot[:, 0], dtype=np.float64)
    raise ContractError(f"project_1d: unknown channel {channel!r}")


def tlcc(speaker, listener, max_lag: int = 60) -> tuple[np.ndarray, int]:
    """PCC of (speaker shifted forward by x) against the listener, x in [0, max_lag].

    Returns the full lag curve and the argmax lag; the lowest lag wins ties.
    """
    speaker = np.asarray(speaker, dtype=np.float64).reshape(-1)
    listener = np.asarray(listener, dtype=np.float64).reshape(-1)
    if speaker.shape != listener.shape:
        raise ShapeError(f"tlcc: series lengths {speaker.shape} vs {listener.shape}")
    n = len(speaker)
    if n <= max_lag + 2:
        raise ContractError(f"tlcc: series of {n} points too short for max_lag {max_lag}")
    curve = np.empty(max_lag + 1)
    for x in range(max_lag + 1):
        curve[x] = pcc(listener[x:], speaker[:n - x]) if x else pcc(listener, speaker)
    peak = int(np.argmax(curve))
    return curve, peak


# -- aggregated reports -------------------------------------------------------------


@dataclass
class ChannelMetrics:
    """One Table-row cell group (expression or rotation)."""

    l2: float | None = None
    fd: float | None = None
    variation: float | None = None
    si: float | None = None
    p_fd: float | None = None
    pcc: float | None = None
    tlcc_peak_lag: float | None = None
    tlcc_curve: np.ndarray | None = None


@dataclass
class MetricsReport:
    """Evaluated metrics for one method, expression and rotation separately."""

    method: str
    expression: ChannelMetrics
    rotation: ChannelMetrics
    sample_count: int
    notes: list[str] = field(default_factory=list)
    config: dict = field(default_factory=dict)


def channel_suite(pred: np.ndarray, gt: np.ndarray, speaker: np.ndarray,
                  clusters: ClusterModel | None, series_fn, max_lag: int,
                  include_reference: bool = True) -> ChannelMetrics:
    """All metrics for one channel group.

    pred/gt/speaker: (N, T, F) stacks restricted to the group's features.
    series_fn maps one (T, F) block to a 1-D synchrony series. When
    include_reference is False (ground-truth row), L2/FD/P-FD are omitted.
    """
    out = ChannelMetrics()
    if include_reference:
        out.l2 = l2(pred, gt)
        out.fd = frechet_distance(pred, gt)
        out.p_fd = paired_fd(pred, gt, speaker)
    out.variation = variation(pred)
    if clusters is not None:
        out.si = shannon_index(clusters, pred)

    pccs = []
    peaks = []
    curves = []
    for i in range(len(pred)):
        ls = series_fn(pred[i])
        ss = series_fn(speaker[i])
        try:
            pccs.append(pcc(ls, ss))
        except DegenerateInput:
            pass
        try:
            curve, peak = tlcc(ss, ls, max_lag=max_lag)
            peaks.append(peak)
            curves.append(curve)
        except (DegenerateInput, ContractError):
            pass
    out.pcc = float(np.mean(pccs)) if pccs else None
    out.tlcc_peak_lag = float(np.mean(peaks)) if peaks else None
    out.tlcc_curve = np.mean(np.stack(curves), axis=0) if curves else None
    return out
