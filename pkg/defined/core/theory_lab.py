"""
Numerical checks of the one-layer linear transformer on binary Gaussian
prompts: the O(1/k) squared-error expansion against the Bayes posterior,
agreement with the optimal sign rule under a covariance mismatch, and
invariance of the decision boundary to mean shifts.

With W = 2 Lambda^-1 the linear transformer output is S(p^T Lambda^-1 q),
where p = (2/k) sum_i y_i x_i. Since sum_i y_i x_i is exactly
k1 mu1 - (k - k1) mu0 + N(0, k Lambda) with k1 ~ Binomial(k, 1/2), Monte
Carlo draws that statistic instead of k individual pairs.
"""

import math
from typing import List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import structlog
from scipy.special import expit

from defined.config.logging_config import log_call
from defined.config.run_configs import TheoryConfig
from defined.data.models import BinaryGaussianTask, LinearTfWeight, MonteCarloEstimate
from defined.engines.channel_engine import frame_rng
from defined.errors import AssumptionViolationError

logger = structlog.get_logger()

THEORY_STREAM = 7
ASSUMPTION_TOLERANCE = 1e-10
MIN_TRIALS = 1000


def default_task(d: int = 2, sigma2: float = 0.25) -> BinaryGaussianTask:
    """mu1 = -mu0 = e_1 with isotropic covariance sigma2 I"""
    mu1 = np.zeros(d)
    mu1[0] = 1.0
    return BinaryGaussianTask(mu0=-mu1, mu1=mu1, Lambda=sigma2 * np.eye(d))


def default_query(d: int = 2) -> np.ndarray:
    query = np.zeros(d)
    query[: min(d, 2)] = 0.25
    return query


def optimal_weight(task: BinaryGaussianTask) -> LinearTfWeight:
    return LinearTfWeight(W=2.0 * np.linalg.inv(task.Lambda))


def check_assumption(task: BinaryGaussianTask):
    """Positive-definite covariance and equal Mahalanobis norms of the two means"""
    try:
        np.linalg.cholesky(task.Lambda)
    except np.linalg.LinAlgError as e:
        raise AssumptionViolationError("covariance is not positive definite") from e
    precision = np.linalg.inv(task.Lambda)
    gap = abs(task.mu0 @ precision @ task.mu0 - task.mu1 @ precision @ task.mu1)
    if gap > ASSUMPTION_TOLERANCE:
        raise AssumptionViolationError(f"class means have unequal Mahalanobis norms (gap {gap:.3e})")


def sample_prompt(
    task: BinaryGaussianTask, k: int, rng: np.random.Generator
) -> Tuple[np.ndarray, np.ndarray, np.ndarray, int]:
    """
    Draw k labelled pairs and a query

    Returns:
        (Y (k, d), labels (k,) in {-1, +1}, y_query (d,), x_query)
    """
    if k < 1:
        raise ValueError("a prompt needs at least one pair")
    labels = rng.choice(np.array([-1, 1]), size=k + 1)
    means = np.where(labels[:, None] == 1, task.mu1, task.mu0)
    noise = rng.standard_normal((k + 1, task.dim)) @ np.linalg.cholesky(task.Lambda).T
    samples = means + noise
    return samples[:k], labels[:k], samples[k], int(labels[k])


def linear_tf_output(W: np.ndarray, Y: np.ndarray, labels: np.ndarray, y_query: np.ndarray) -> float:
    """S((1/k sum_i x_i y_i^T) W y_query)"""
    Y = np.atleast_2d(Y)
    labels = np.asarray(labels, dtype=float)
    if Y.shape[0] != labels.shape[0] or W.shape != (Y.shape[1], Y.shape[1]) or y_query.shape[0] != Y.shape[1]:
        raise ValueError("prompt, weight and query dimensions disagree")
    summary = labels @ Y / Y.shape[0]
    return float(expit(summary @ W @ y_query))


def p_form_output(task: BinaryGaussianTask, Y: np.ndarray, labels: np.ndarray, y_query: np.ndarray) -> float:
    """S(p^T Lambda^-1 q) with p = (2/k) sum_i y_i x_i"""
    Y = np.atleast_2d(Y)
    p = 2.0 * (np.asarray(labels, dtype=float) @ Y) / Y.shape[0]
    return float(expit(p @ np.linalg.solve(task.Lambda, y_query)))


def posterior_true(task: BinaryGaussianTask, y_query: np.ndarray) -> float:
    """Bayes posterior P(x = 1 | y_query) = S(mu^T Lambda^-1 q), mu = mu1 - mu0"""
    check_assumption(task)
    mu = task.mu1 - task.mu0
    return float(expit(mu @ np.linalg.solve(task.Lambda, y_query)))


def sigmoid_slope(z: float) -> float:
    s = expit(z)
    return float(s * (1.0 - s))


def thm1_leading_term(task: BinaryGaussianTask, y_query: np.ndarray, k: int) -> float:
    """
    Leading 1/k term of the expected squared error of the linear transformer

    (1/k) S'(a)^2 [(u^T Lambda^-1 q)^2 / 4 + 4 q^T Lambda^-1 q], with
    a = mu^T Lambda^-1 q and u = 2 (mu1 + mu0).
    """
    if k < 1:
        raise ValueError("k must be positive")
    check_assumption(task)
    precision_q = np.linalg.solve(task.Lambda, y_query)
    a = (task.mu1 - task.mu0) @ precision_q
    u = 2.0 * (task.mu1 + task.mu0)
    bracket = (u @ precision_q) ** 2 / 4.0 + 4.0 * (y_query @ precision_q)
    return sigmoid_slope(a) ** 2 * bracket / k


def sample_label_statistic(task: BinaryGaussianTask, k: int, n: int, rng: np.random.Generator) -> np.ndarray:
    """n draws of sum_i y_i x_i over k fresh pairs, shape (n, d)"""
    k1 = rng.binomial(k, 0.5, size=n).astype(float)
    noise = math.sqrt(k) * rng.standard_normal((n, task.dim)) @ np.linalg.cholesky(task.Lambda).T
    return k1[:, None] * task.mu1 - (k - k1)[:, None] * task.mu0 + noise


def _estimate(values: np.ndarray) -> MonteCarloEstimate:
    n = values.shape[0]
    mean = math.fsum(values) / n
    stderr = float(np.std(values, ddof=1) / math.sqrt(n)) if n > 1 else math.nan
    return MonteCarloEstimate(mean=mean, stderr=stderr, n_trials=n)


def thm1_mc_error(
    task: BinaryGaussianTask, y_query: np.ndarray, k: int, n_trials: int, rng: np.random.Generator
) -> MonteCarloEstimate:
    """Monte Carlo E[(linear transformer output - true posterior)^2] at a fixed query"""
    if n_trials < MIN_TRIALS:
        raise ValueError(f"need at least {MIN_TRIALS} trials, got {n_trials}")
    target = posterior_true(task, y_query)
    statistic = sample_label_statistic(task, k, n_trials, rng)
    outputs = expit(statistic @ optimal_weight(task).W @ y_query / k)
    return _estimate((outputs - target) ** 2)


def _check_isotropic(task: BinaryGaussianTask) -> float:
    sigma2 = float(task.Lambda[0, 0])
    if not np.allclose(task.Lambda, sigma2 * np.eye(task.dim)):
        raise AssumptionViolationError("mismatch experiment needs an isotropic test covariance")
    return sigma2


def _sample_queries(task: BinaryGaussianTask, n: int, rng: np.random.Generator) -> np.ndarray:
    labels = rng.choice(np.array([-1, 1]), size=n)
    means = np.where(labels[:, None] == 1, task.mu1, task.mu0)
    return means + rng.standard_normal((n, task.dim)) @ np.linalg.cholesky(task.Lambda).T


def thm2_mismatch_agreement(
    train_xi2: float, test_task: BinaryGaussianTask, k: int, n_trials: int, rng: np.random.Generator
) -> MonteCarloEstimate:
    """
    Agreement of a transformer trained at covariance xi2 I with the optimal sign rule

    The thresholded output S(xi^-2 p^T q) > 1/2 is compared with
    sign(mu^T q) on fresh prompts and queries from the test task.
    """
    _check_isotropic(test_task)
    statistic = sample_label_statistic(test_task, k, n_trials, rng)
    queries = _sample_queries(test_task, n_trials, rng)
    p = 2.0 * statistic / k
    outputs = expit(np.einsum("nd,nd->n", p, queries) / train_xi2)
    predicted = np.where(outputs > 0.5, 1, -1)
    optimal = np.where(queries @ (test_task.mu1 - test_task.mu0) > 0, 1, -1)
    return _estimate((predicted == optimal).astype(float))


def mean_shift_boundary(
    task: BinaryGaussianTask,
    shift: np.ndarray,
    scale: float,
    k: int,
    n_trials: int,
    rng: np.random.Generator,
) -> MonteCarloEstimate:
    """
    Agreement between large-k decisions before and after moving the class means

    The shifted task uses means (mu + shift) * scale. The shift must keep the
    Mahalanobis norms of both means equal, so it has to be Lambda^-1
    orthogonal to mu1 - mu0.
    """
    if scale <= 0:
        raise ValueError("scale must be positive")
    shifted = BinaryGaussianTask(
        mu0=(task.mu0 + shift) * scale, mu1=(task.mu1 + shift) * scale, Lambda=task.Lambda
    )
    check_assumption(task)
    check_assumption(shifted)

    whitened = np.linalg.solve(task.Lambda, _sample_queries(task, n_trials, rng).T).T
    original = np.sign(np.einsum("nd,nd->n", sample_label_statistic(task, k, n_trials, rng), whitened))
    moved = np.sign(np.einsum("nd,nd->n", sample_label_statistic(shifted, k, n_trials, rng), whitened))
    return _estimate((original == moved).astype(float))


def loglog_slope(ks: Sequence[float], values: Sequence[float]) -> float:
    """Least-squares slope of log(values) against log(ks)"""
    slope, _ = np.polyfit(np.log(ks), np.log(values), 1)
    return float(slope)


class TheoryLab:
    """Runs the k-grid sweeps behind the `theory` subcommand"""

    def __init__(self, config: TheoryConfig):
        self.config = config
        self.task = default_task(config.d, config.sigma2)
        self.query = np.asarray(config.query, dtype=float) if config.query else default_query(config.d)
        if self.query.shape != (config.d,):
            raise ValueError(f"query has {self.query.shape[0]} entries, d={config.d}")

    def _rng(self, experiment: int, k: int) -> np.random.Generator:
        return frame_rng(self.config.seed, THEORY_STREAM, experiment, k)

    @log_call("thm1_sweep")
    def thm1_sweep(self) -> pd.DataFrame:
        """Columns k, mc_error, stderr, leading_term, ratio"""
        rows = []
        for k in self.config.k_grid:
            estimate = thm1_mc_error(self.task, self.query, k, self.config.trials, self._rng(1, k))
            leading = thm1_leading_term(self.task, self.query, k)
            rows.append(
                {
                    "k": k,
                    "mc_error": estimate.mean,
                    "stderr": estimate.stderr,
                    "leading_term": leading,
                    "ratio": estimate.mean / leading,
                }
            )
            logger.info("thm1_point", k=k, mc_error=estimate.mean, ratio=estimate.mean / leading)

        table = pd.DataFrame(rows, columns=["k", "mc_error", "stderr", "leading_term", "ratio"])
        if len(table) > 1:
            logger.info("thm1_rate", slope=loglog_slope(table["k"], table["mc_error"]))
        return table

    @log_call("thm2_sweep")
    def thm2_sweep(self, xi2: Optional[float] = None) -> pd.DataFrame:
        """Columns k, agreement, stderr"""
        xi2 = xi2 or self.config.xi2 or self.config.sigma2
        rows: List[dict] = []
        for k in self.config.k_grid:
            estimate = thm2_mismatch_agreement(xi2, self.task, k, self.config.trials, self._rng(2, k))
            rows.append({"k": k, "agreement": estimate.mean, "stderr": estimate.stderr})
            logger.info("thm2_point", k=k, xi2=xi2, agreement=estimate.mean)
        return pd.DataFrame(rows, columns=["k", "agreement", "stderr"])
