"""RBF kernel, Gram blocks, bandwidth selection and weighted MMD."""

import logging
import typing as t
from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import cdist

from config import KERNEL_SETTINGS

logger = logging.getLogger(__name__)

NEGATIVE_MMD_TOL = 1e-12
ZERO_DISCREPANCY = 1e-12


class KernelError(Exception):
    """Raise if kernel inputs are inconsistent or a kernel context is corrupted."""


@dataclass(frozen=True)
class KernelContext:
    """Bandwidth plus the cached Gram blocks of one source/target pair."""

    sigma: float
    k_ss: np.ndarray
    k_st: np.ndarray
    k_tt: np.ndarray

    @property
    def n_source(self) -> int:
        """Number of source rows."""
        return int(self.k_ss.shape[0])

    @property
    def n_target(self) -> int:
        """Number of target rows."""
        return int(self.k_tt.shape[0])


@dataclass(frozen=True)
class BandwidthSelection:
    """Outcome of the standardized-MMD bandwidth search."""

    sigma: float
    median: float
    candidates: t.Tuple[float, ...]
    z_scores: t.Tuple[float, ...]


def _as_matrix(values: np.ndarray, name: str) -> np.ndarray:
    matrix = np.asarray(values, dtype=float)
    if matrix.ndim == 1:
        matrix = matrix.reshape(-1, 1)
    if matrix.ndim != 2:
        raise KernelError(f"{name} must be a feature matrix")
    return matrix


def _check_pair(source: np.ndarray, target: np.ndarray) -> t.Tuple[np.ndarray, np.ndarray]:
    source = _as_matrix(source, "source")
    target = _as_matrix(target, "target")
    if source.shape[1] != target.shape[1]:
        raise KernelError(
            f"dimension mismatch: source d={source.shape[1]}, target d={target.shape[1]}"
        )
    return source, target


def _check_sigma(sigma: float) -> None:
    if not sigma > 0:
        raise KernelError(f"sigma must be positive, got {sigma}")


def _rbf_from_sq(sq_dists: np.ndarray, sigma: float) -> np.ndarray:
    return np.exp(-sq_dists / (2.0 * sigma**2))


def _self_gram(x: np.ndarray, sigma: float) -> np.ndarray:
    gram = _rbf_from_sq(cdist(x, x, "sqeuclidean"), sigma)
    gram = 0.5 * (gram + gram.T)
    np.fill_diagonal(gram, 1.0)
    return gram


def rbf(x: np.ndarray, y: np.ndarray, sigma: float) -> float:
    """Return exp(-||x - y||^2 / (2 sigma^2))."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    y = np.atleast_1d(np.asarray(y, dtype=float))
    if x.shape != y.shape:
        raise KernelError(f"dimension mismatch: {x.shape} vs {y.shape}")
    _check_sigma(sigma)
    return float(np.exp(-np.sum((x - y) ** 2) / (2.0 * sigma**2)))


def gram_blocks(source: np.ndarray, target: np.ndarray, sigma: float) -> KernelContext:
    """Build the K_SS, K_ST and K_TT blocks for one bandwidth."""
    source, target = _check_pair(source, target)
    _check_sigma(sigma)
    ctx = KernelContext(
        sigma=float(sigma),
        k_ss=_self_gram(source, sigma),
        k_st=_rbf_from_sq(cdist(source, target, "sqeuclidean"), sigma),
        k_tt=_self_gram(target, sigma),
    )
    for block in (ctx.k_ss, ctx.k_st, ctx.k_tt):
        block.setflags(write=False)
    logger.debug(
        "Built Gram blocks for n=%d, m=%d, sigma=%g.", ctx.n_source, ctx.n_target, sigma
    )
    return ctx


def median_distance(
    source: np.ndarray,
    target: np.ndarray,
    cap: int = KERNEL_SETTINGS.median_pair_cap,
    seed: int = 0,
) -> float:
    """Median Euclidean distance over source x target pairs.

    Above ``cap`` pairs a seeded subsample of ``cap`` pairs is used. A zero median
    falls back to a fixed positive bandwidth.
    """
    source, target = _check_pair(source, target)
    n, m = len(source), len(target)
    if n == 0 or m == 0:
        raise KernelError("median_distance needs non-empty samples")
    if n * m > cap:
        rng = np.random.default_rng(seed)
        rows = rng.integers(n, size=cap)
        cols = rng.integers(m, size=cap)
        distances = np.linalg.norm(source[rows] - target[cols], axis=1)
    else:
        distances = cdist(source, target, "euclidean").ravel()
    median = float(np.median(distances))
    if median <= 0.0:
        logger.warning(
            "All cross pairs coincide; using fallback bandwidth %g.",
            KERNEL_SETTINGS.zero_median_fallback,
        )
        return KERNEL_SETTINGS.zero_median_fallback
    return median


def _permutation_statistics(
    pooled_gram: np.ndarray, signed: np.ndarray, permutations: np.ndarray
) -> np.ndarray:
    relabelled = signed[permutations].T
    return np.einsum("ip,ip->p", relabelled, pooled_gram @ relabelled)


def select_bandwidth_details(
    source: np.ndarray,
    target: np.ndarray,
    n_permutations: int = KERNEL_SETTINGS.n_permutations,
    seed: int = 0,
    factors: t.Sequence[float] = KERNEL_SETTINGS.bandwidth_factors,
) -> BandwidthSelection:
    """Pick the candidate bandwidth with the largest permutation z-score of MMD^2."""
    source, target = _check_pair(source, target)
    n, m = len(source), len(target)
    if n < 2 or m < 2:
        raise KernelError("bandwidth selection needs at least 2 points in each sample")
    if n_permutations < 2:
        raise KernelError("n_permutations must be at least 2")

    median = median_distance(source, target, seed=seed)
    pooled = np.vstack([source, target])
    pooled_sq = cdist(pooled, pooled, "sqeuclidean")
    signed = np.concatenate([np.full(n, 1.0 / n), np.full(m, -1.0 / m)])
    rng = np.random.default_rng(seed)
    permutations = np.stack([rng.permutation(n + m) for _ in range(n_permutations)])

    candidates = tuple(sorted(float(c) * median for c in factors))
    z_scores = []
    best_sigma, best_z = candidates[-1], -np.inf
    for sigma in candidates:
        gram = _rbf_from_sq(pooled_sq, sigma)
        observed = float(signed @ gram @ signed)
        if observed <= ZERO_DISCREPANCY:
            z_score = -np.inf
        else:
            null = _permutation_statistics(gram, signed, permutations)
            spread = max(float(np.std(null)), KERNEL_SETTINGS.permutation_std_floor)
            z_score = (observed - float(np.mean(null))) / spread
        z_scores.append(z_score)
        logger.debug("sigma=%g observed MMD^2=%.6g z=%.6g", sigma, observed, z_score)
        # ascending candidates with >= resolve ties toward the larger sigma
        if z_score >= best_z:
            best_sigma, best_z = sigma, z_score

    logger.info("Selected bandwidth %g (median distance %g).", best_sigma, median)
    return BandwidthSelection(
        sigma=best_sigma, median=median, candidates=candidates, z_scores=tuple(z_scores)
    )


def select_bandwidth(
    source: np.ndarray,
    target: np.ndarray,
    n_permutations: int = KERNEL_SETTINGS.n_permutations,
    seed: int = 0,
) -> float:
    """Return the selected bandwidth; see :func:`select_bandwidth_details`."""
    return select_bandwidth_details(source, target, n_permutations, seed).sigma


def mmd_squared_weighted(ctx: KernelContext, w: np.ndarray, a: np.ndarray) -> float:
    """Squared RKHS distance between the w-weighted source and a-weighted target means."""
    w = np.asarray(w, dtype=float)
    a = np.asarray(a, dtype=float)
    n, m = ctx.n_source, ctx.n_target
    if w.shape != (n,) or a.shape != (m,):
        raise KernelError(
            f"weight lengths ({w.shape}, {a.shape}) do not match context ({n}, {m})"
        )
    value = (
        float(w @ ctx.k_ss @ w) / n**2
        - 2.0 * float(w @ ctx.k_st @ a) / (n * m)
        + float(a @ ctx.k_tt @ a) / m**2
    )
    if value < -NEGATIVE_MMD_TOL:
        raise KernelError(f"negative MMD^2 {value:.3g}: kernel context is not PSD")
    return max(value, 0.0)


def mmd(ctx: KernelContext, w: np.ndarray, a: np.ndarray) -> float:
    """Weighted MMD (the square root of :func:`mmd_squared_weighted`)."""
    return float(np.sqrt(mmd_squared_weighted(ctx, w, a)))
