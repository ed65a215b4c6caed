"""Calibration weights: uniform, KDE ratio, classifier odds, KMM and selective KMM."""

import logging
import math
import typing as t
import warnings
from abc import ABCMeta, abstractmethod
from dataclasses import dataclass, field, replace

import numpy as np
from sklearn.exceptions import ConvergenceWarning
from sklearn.linear_model import LogisticRegression
from sklearn.neighbors import KernelDensity

from config import DENSITY_RATIO_SETTINGS, KmmConfig, Method
from dataset import FeatureTable
from kernel import KernelContext, gram_blocks, mmd, mmd_squared_weighted
from qp import QpError, QpProblem, QpSolution, solve

logger = logging.getLogger(__name__)

NORMALIZATION_TOL = 1e-9
KDE_FALLBACK_BANDWIDTH = 1.0


class WeightingError(Exception):
    """Raise if weights cannot be computed or are degenerate."""


@dataclass(frozen=True)
class WeightSet:  # pylint: disable = too-many-instance-attributes
    """Per-calibration-point weights with provenance and diagnostics."""

    raw: np.ndarray
    normalized: np.ndarray
    method: Method
    ess: float
    mmd: t.Optional[float] = None
    selected_target_ids: t.Optional[t.Tuple[str, ...]] = None
    alpha: t.Optional[np.ndarray] = None
    converged: bool = True
    diagnostics: t.Dict[str, t.Any] = field(default_factory=dict)
    test_weights: t.Optional[np.ndarray] = None

    @property
    def retained_fraction(self) -> float:
        """Fraction of targets kept for prediction (1 unless selective)."""
        if self.alpha is None or self.selected_target_ids is None:
            return 1.0
        return len(self.selected_target_ids) / len(self.alpha)


def ess(normalized: np.ndarray) -> float:
    """Effective sample size 1 / sum(w_i^2) of a probability vector."""
    normalized = np.asarray(normalized, dtype=float)
    if normalized.size == 0 or np.any(normalized < 0):
        raise WeightingError("ess needs a non-empty non-negative vector")
    if abs(float(normalized.sum()) - 1.0) > NORMALIZATION_TOL:
        raise WeightingError(f"weights sum to {normalized.sum():.12g}, not 1")
    return float(np.clip(1.0 / float(normalized @ normalized), 1.0, normalized.size))


def _weight_set(raw: np.ndarray, method: Method, **extra: t.Any) -> WeightSet:
    raw = np.asarray(raw, dtype=float)
    if np.any(~np.isfinite(raw)) or np.any(raw < 0):
        raise WeightingError(f"{method.value} produced negative or non-finite weights")
    total = float(raw.sum())
    if total <= 0:
        raise WeightingError(f"{method.value} produced all-zero weights")
    normalized = raw / total
    return WeightSet(raw=raw, normalized=normalized, method=method, ess=ess(normalized), **extra)


def weighted_mmd(ctx: KernelContext, weights: WeightSet) -> float:
    """MMD of the normalized weights, rescaled to mean 1, against the full target."""
    return mmd(ctx, ctx.n_source * weights.normalized, np.ones(ctx.n_target))


def resolve_epsilon(cfg: KmmConfig, n: int) -> float:
    """Return the configured mass slack, or min(B/sqrt(n), 1 - 1/sqrt(n))."""
    if cfg.epsilon is not None:
        return cfg.epsilon
    root = math.sqrt(n)
    return min(cfg.b_bound / root, (root - 1.0) / root)


def uniform_weights(n: int, ctx: t.Optional[KernelContext] = None) -> WeightSet:
    """All-ones weights; the MMD is filled in when a kernel context is given."""
    if n < 1:
        raise WeightingError("uniform_weights needs n >= 1")
    weights = _weight_set(np.ones(n), Method.UNIFORM)
    if ctx is None:
        return weights
    return _with_mmd(weights, weighted_mmd(ctx, weights))


def _with_mmd(weights: WeightSet, value: float) -> WeightSet:
    return replace(weights, mmd=value)


def _as_matrix(values: np.ndarray) -> np.ndarray:
    matrix = np.asarray(values, dtype=float)
    return matrix.reshape(-1, 1) if matrix.ndim == 1 else matrix


def _canonical_order(x: np.ndarray) -> np.ndarray:
    return np.lexsort(x.T[::-1])


def _holdout(x: np.ndarray, fraction: float, seed: int) -> t.Tuple[np.ndarray, np.ndarray]:
    """Seeded fit/holdout split that does not depend on the row order of ``x``."""
    order = _canonical_order(x)[np.random.default_rng(seed).permutation(len(x))]
    n_hold = min(len(x) - 1, max(1, int(math.floor(fraction * len(x) + 0.5))))
    return x[order[n_hold:]], x[order[:n_hold]]


def select_kde_bandwidth(
    cal: np.ndarray, test: np.ndarray, holdout_fraction: float, seed: int = 0
) -> float:
    """Shared bandwidth with the best held-out log-likelihood over both samples."""
    if len(cal) < 2 or len(test) < 2:
        logger.info("Too few points for held-out KDE; bandwidth %g.", KDE_FALLBACK_BANDWIDTH)
        return KDE_FALLBACK_BANDWIDTH
    cal_fit, cal_hold = _holdout(cal, holdout_fraction, seed)
    test_fit, test_hold = _holdout(test, holdout_fraction, seed + 1)
    best, best_score = None, -np.inf
    for bandwidth in DENSITY_RATIO_SETTINGS.kde_bandwidths:
        score = KernelDensity(bandwidth=bandwidth).fit(cal_fit).score(cal_hold)
        score += KernelDensity(bandwidth=bandwidth).fit(test_fit).score(test_hold)
        logger.debug("KDE bandwidth %g held-out log-likelihood %.6g", bandwidth, score)
        if np.isfinite(score) and score > best_score:
            best, best_score = bandwidth, score
    if best is None:
        raise WeightingError("degenerate density: zero likelihood at every KDE bandwidth")
    return best


def kde_ratio_weights(
    cal: np.ndarray,
    test: np.ndarray,
    holdout_fraction: float = DENSITY_RATIO_SETTINGS.kde_holdout_fraction,
    seed: int = 0,
    ctx: t.Optional[KernelContext] = None,
) -> WeightSet:
    """Ratio of Gaussian KDEs p_test / p_cal at the calibration points."""
    cal = _as_matrix(cal)
    test = _as_matrix(test)
    bandwidth = select_kde_bandwidth(cal, test, holdout_fraction, seed)
    cal_kde = KernelDensity(bandwidth=bandwidth).fit(cal)
    test_kde = KernelDensity(bandwidth=bandwidth).fit(test)
    log_floor = math.log(DENSITY_RATIO_SETTINGS.kde_density_floor)
    log_clip = math.log(DENSITY_RATIO_SETTINGS.ratio_clip)

    def ratio(points: np.ndarray) -> np.ndarray:
        log_ratio = test_kde.score_samples(points) - np.maximum(
            cal_kde.score_samples(points), log_floor
        )
        return np.exp(np.minimum(log_ratio, log_clip))

    weights = _weight_set(
        ratio(cal),
        Method.KDE,
        diagnostics={"kde_bandwidth": bandwidth},
        test_weights=ratio(test),
    )
    logger.info("KDE ratio weights: bandwidth %g, ESS %.4g.", bandwidth, weights.ess)
    return weights if ctx is None else _with_mmd(weights, weighted_mmd(ctx, weights))


def classifier_odds(eta: np.ndarray, n_source: int, n_target: int) -> np.ndarray:
    """Map domain probabilities to density ratios (n/m) * eta / (1 - eta)."""
    clip = DENSITY_RATIO_SETTINGS.probability_clip
    eta = np.clip(np.asarray(eta, dtype=float), clip, 1.0 - clip)
    return (n_source / n_target) * eta / (1.0 - eta)


def classifier_ratio_weights(
    cal: np.ndarray,
    test: np.ndarray,
    reg: float = DENSITY_RATIO_SETTINGS.classifier_reg,
    ctx: t.Optional[KernelContext] = None,
) -> WeightSet:
    """Odds of a ridge-penalized logistic domain classifier (0 = cal, 1 = test)."""
    cal = _as_matrix(cal)
    test = _as_matrix(test)
    n, m = len(cal), len(test)
    if n < 2 or m < 2:
        raise WeightingError("classifier weights need at least 2 points in each sample")
    model = LogisticRegression(
        C=1.0 / reg, solver="lbfgs", max_iter=DENSITY_RATIO_SETTINGS.classifier_max_iter
    )
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", ConvergenceWarning)
        model.fit(np.vstack([cal, test]), np.concatenate([np.zeros(n), np.ones(m)]))
    converged = not any(issubclass(w.category, ConvergenceWarning) for w in caught)
    if not converged:
        logger.warning(
            "Domain classifier did not converge in %d iterations; using the last iterate.",
            DENSITY_RATIO_SETTINGS.classifier_max_iter,
        )
    weights = _weight_set(
        classifier_odds(model.predict_proba(cal)[:, 1], n, m),
        Method.CLASSIFIER,
        converged=converged,
        diagnostics={"classifier_iterations": int(np.max(model.n_iter_))},
        test_weights=classifier_odds(model.predict_proba(test)[:, 1], n, m),
    )
    logger.info("Classifier ratio weights: ESS %.4g.", weights.ess)
    return weights if ctx is None else _with_mmd(weights, weighted_mmd(ctx, weights))


def build_kmm_problem(ctx: KernelContext, cfg: KmmConfig) -> QpProblem:
    """KMM as a QP over w in [0, B]^n with (1/n) sum(w) in [1 - eps, 1 + eps]."""
    n, m = ctx.n_source, ctx.n_target
    epsilon = resolve_epsilon(cfg, n)
    mass = np.full(n, 1.0 / n)
    return QpProblem(
        q_matrix=2.0 * ctx.k_ss / n**2,
        linear=-2.0 * ctx.k_st.sum(axis=1) / (n * m),
        lower=np.zeros(n),
        upper=np.full(n, cfg.b_bound),
        ineq_rows=np.vstack([mass, -mass]),
        ineq_bounds=np.array([1.0 + epsilon, -(1.0 - epsilon)]),
    )


def solve_kmm(ctx: KernelContext, cfg: KmmConfig) -> WeightSet:
    """Solve kernel mean matching against every target point of ``ctx``."""
    logger.info("Solving KMM for %d calibration points.", ctx.n_source)
    solution = solve(build_kmm_problem(ctx, cfg))
    raw = np.clip(solution.v, 0.0, cfg.b_bound)
    if not solution.converged:
        logger.warning("KMM solver did not converge; using the best iterate.")
    weights = _weight_set(
        raw,
        Method.KMM,
        converged=solution.converged,
        diagnostics={
            **_solver_diagnostics(solution, resolve_epsilon(cfg, ctx.n_source)),
            # unnormalized QP weights
            "qp_mmd": math.sqrt(mmd_squared_weighted(ctx, raw, np.ones(ctx.n_target))),
        },
    )
    return _with_mmd(weights, weighted_mmd(ctx, weights))


def _solver_diagnostics(solution: QpSolution, epsilon: float) -> t.Dict[str, t.Any]:
    return {
        "epsilon": epsilon,
        "solver_iterations": solution.iterations,
        "kkt_stationarity": solution.kkt_stationarity,
        "kkt_feasibility": solution.kkt_feasibility,
    }


def build_skmm_problem(ctx: KernelContext, cfg: KmmConfig) -> QpProblem:
    """Joint QP over (w, alpha) with mass coupling and the yield constraint."""
    n, m = ctx.n_source, ctx.n_target
    epsilon = resolve_epsilon(cfg, n)
    q_matrix = 2.0 * np.block(
        [
            [ctx.k_ss / n**2, -ctx.k_st / (n * m)],
            [-ctx.k_st.T / (n * m), ctx.k_tt / m**2],
        ]
    )
    coupling = np.concatenate([np.full(n, 1.0 / n), np.full(m, -1.0 / m)])
    yield_row = np.concatenate([np.zeros(n), np.full(m, -1.0 / m)])
    return QpProblem(
        q_matrix=0.5 * (q_matrix + q_matrix.T),
        linear=np.zeros(n + m),
        lower=np.zeros(n + m),
        upper=np.concatenate([np.full(n, cfg.b_bound), np.ones(m)]),
        ineq_rows=np.vstack([coupling, -coupling, yield_row]),
        ineq_bounds=np.array([epsilon, epsilon, -cfg.tau]),
    )


def solve_skmm_joint(
    ctx: KernelContext, cfg: KmmConfig
) -> t.Tuple[np.ndarray, np.ndarray, QpSolution]:
    """Solve for source weights and target selection variables jointly."""
    logger.info(
        "Solving joint selective KMM for %d calibration and %d target points.",
        ctx.n_source,
        ctx.n_target,
    )
    solution = solve(build_skmm_problem(ctx, cfg))
    n = ctx.n_source
    w = np.clip(solution.v[:n], 0.0, cfg.b_bound)
    alpha = np.clip(solution.v[n:], 0.0, 1.0)
    return w, alpha, solution


def select_targets(alpha: np.ndarray, cfg: KmmConfig) -> np.ndarray:
    """Indices of retained targets: alpha >= threshold, else the top ceil(tau m)."""
    retained = np.flatnonzero(alpha >= cfg.alpha_threshold)
    if retained.size >= 2:
        return retained
    count = min(len(alpha), max(2, math.ceil(cfg.tau * len(alpha))))
    logger.warning(
        "Only %d targets pass alpha >= %g; keeping the top %d by alpha.",
        retained.size,
        cfg.alpha_threshold,
        count,
    )
    order = np.lexsort((np.arange(len(alpha)), -alpha))
    return np.sort(order[:count])


def two_stage_skmm(
    cal: np.ndarray,
    test: FeatureTable,
    cfg: KmmConfig,
    sigma: float,
    ctx: t.Optional[KernelContext] = None,
) -> WeightSet:
    """Joint selection, thresholding, then KMM against the retained targets."""
    full_ctx = gram_blocks(cal, test.features, sigma) if ctx is None else ctx
    _, alpha, joint = solve_skmm_joint(full_ctx, cfg)
    retained = select_targets(alpha, cfg)
    selected = test.subset(retained)
    stage_ctx = gram_blocks(cal, selected.features, sigma)
    stage = solve_kmm(stage_ctx, cfg)

    retained_fraction = len(retained) / test.n_rows
    diagnostics = {
        **stage.diagnostics,
        "joint_solver_iterations": joint.iterations,
        "joint_kkt_stationarity": joint.kkt_stationarity,
        "pre_selection_mmd": weighted_mmd(full_ctx, stage),
        "retained_fraction": retained_fraction,
    }
    logger.info("Selective KMM kept %d of %d targets.", len(retained), test.n_rows)
    return _weight_set(
        stage.raw,
        Method.SKMM,
        mmd=weighted_mmd(stage_ctx, stage),
        selected_target_ids=selected.ids,
        alpha=alpha,
        converged=stage.converged and joint.converged,
        diagnostics=diagnostics,
    )


class WeightingStrategy(metaclass=ABCMeta):  # pylint: disable = too-few-public-methods
    """Base class for one weighting method."""

    method: Method

    @abstractmethod
    def compute(self, cal: FeatureTable, test: FeatureTable, ctx: KernelContext) -> WeightSet:
        """Compute calibration weights for ``cal`` against ``test``."""


class UniformStrategy(WeightingStrategy):  # pylint: disable = too-few-public-methods
    """Unweighted split conformal."""

    method = Method.UNIFORM

    def compute(self, cal: FeatureTable, test: FeatureTable, ctx: KernelContext) -> WeightSet:
        """Compute."""
        return uniform_weights(cal.n_rows, ctx)


class KdeStrategy(WeightingStrategy):  # pylint: disable = too-few-public-methods
    """KDE density ratio."""

    method = Method.KDE

    def __init__(self, holdout_fraction: float, seed: int) -> None:
        """Init."""
        self.holdout_fraction = holdout_fraction
        self.seed = seed

    def compute(self, cal: FeatureTable, test: FeatureTable, ctx: KernelContext) -> WeightSet:
        """Compute."""
        return kde_ratio_weights(
            cal.features, test.features, self.holdout_fraction, self.seed, ctx
        )


class ClassifierStrategy(WeightingStrategy):  # pylint: disable = too-few-public-methods
    """Logistic domain-classifier odds."""

    method = Method.CLASSIFIER

    def __init__(self, reg: float) -> None:
        """Init."""
        self.reg = reg

    def compute(self, cal: FeatureTable, test: FeatureTable, ctx: KernelContext) -> WeightSet:
        """Compute."""
        return classifier_ratio_weights(cal.features, test.features, self.reg, ctx)


class KmmStrategy(WeightingStrategy):  # pylint: disable = too-few-public-methods
    """Kernel mean matching."""

    method = Method.KMM

    def __init__(self, cfg: KmmConfig) -> None:
        """Init."""
        self.cfg = cfg

    def compute(self, cal: FeatureTable, test: FeatureTable, ctx: KernelContext) -> WeightSet:
        """Compute."""
        return solve_kmm(ctx, self.cfg)


class SkmmStrategy(KmmStrategy):  # pylint: disable = too-few-public-methods
    """Two-stage selective kernel mean matching."""

    method = Method.SKMM

    def compute(self, cal: FeatureTable, test: FeatureTable, ctx: KernelContext) -> WeightSet:
        """Compute."""
        return two_stage_skmm(cal.features, test, self.cfg, ctx.sigma, ctx)


class WeightingHelper:
    """Dispatch weight computation to the strategy of each method."""

    def __init__(
        self,
        kmm: KmmConfig,
        holdout_fraction: float = DENSITY_RATIO_SETTINGS.kde_holdout_fraction,
        reg: float = DENSITY_RATIO_SETTINGS.classifier_reg,
        seed: int = 0,
    ) -> None:
        """Init."""
        self.kmm = kmm
        self.holdout_fraction = holdout_fraction
        self.reg = reg
        self.seed = seed

    @property
    def strategies(self) -> t.Dict[Method, WeightingStrategy]:
        """Define a strategy for every method."""
        strategies: t.List[WeightingStrategy] = [
            UniformStrategy(),
            KdeStrategy(self.holdout_fraction, self.seed),
            ClassifierStrategy(self.reg),
            KmmStrategy(self.kmm),
            SkmmStrategy(self.kmm),
        ]
        return {strategy.method: strategy for strategy in strategies}

    def compute(
        self, method: Method, cal: FeatureTable, test: FeatureTable, sigma: float
    ) -> WeightSet:
        """Build the kernel context once and run the strategy for ``method``."""
        ctx = gram_blocks(cal.features, test.features, sigma)
        try:
            return self.strategies[Method(method)].compute(cal, test, ctx)
        except QpError as err:
            raise WeightingError(f"{Method(method).value}: {err}") from err
