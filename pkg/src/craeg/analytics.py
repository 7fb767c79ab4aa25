"""Statistical analyses and evaluation metrics for decoding diagnostics.

Covers the correlation/regression toolkit applied to per-sequence crowding
statistics and the generation-quality metrics (avg@k, pass@k, distinct-n,
semantic diversity).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

TERTILE_LABELS = ("low", "mid", "high")


@dataclass(frozen=True)
class SequenceStats:
    """Per-generation aggregates, the unit of all sequence-level analyses."""

    seq_crowding: float
    mean_entropy: float
    steps: int
    correct: bool
    sample_id: str = ""
    problem_id: str = ""

    def __post_init__(self) -> None:
        if self.seq_crowding < 0:
            raise ValueError("sequence crowding must be non-negative")
        if self.steps < 1:
            raise ValueError("sequence needs at least one step")


@dataclass(frozen=True)
class RegressionResult:
    """Maximum-likelihood logistic fit, intercept first."""

    coefficients: np.ndarray
    standard_errors: np.ndarray
    p_values: np.ndarray
    odds_ratios: np.ndarray
    converged: bool
    iterations: int


@dataclass(frozen=True)
class EcdfCurve:
    sorted_values: np.ndarray
    cumulative_fractions: np.ndarray


def shannon_entropy(dist) -> float:
    """Entropy in nats, with 0 * ln 0 taken as 0.

    Accepts a probability array or anything with a .probs attribute.
    """
    probs = np.asarray(getattr(dist, "probs", dist), dtype=np.float64)
    if probs.size == 0 or probs.min() < 0:
        raise ValueError("invalid probability vector")
    nz = probs[probs > 0.0]
    return float(-np.sum(nz * np.log(nz)))


def tertile_accuracy(stats: list[SequenceStats]) -> list[tuple[str, int, float]]:
    """Accuracy per low/mid/high crowding bin.

    Bin edges are the 1/3 and 2/3 quantiles (linear interpolation); values
    tied with an edge fall into the lower bin. Empty bins report NaN.
    """
    if len(stats) < 3:
        raise ValueError("need at least 3 sequences for tertile binning")
    crowding = np.array([s.seq_crowding for s in stats], dtype=np.float64)
    correct = np.array([s.correct for s in stats], dtype=bool)
    q1, q2 = np.quantile(crowding, [1.0 / 3.0, 2.0 / 3.0])
    masks = (crowding <= q1, (crowding > q1) & (crowding <= q2), crowding > q2)
    rows = []
    for label, mask in zip(TERTILE_LABELS, masks):
        count = int(mask.sum())
        acc = float(correct[mask].mean()) if count else float("nan")
        rows.append((label, count, acc))
    return rows


def point_biserial(x, y) -> float:
    """Pearson correlation of a continuous variable with a binary outcome."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("x and y must be parallel 1-D vectors")
    if not np.all((y == 0.0) | (y == 1.0)):
        raise ValueError("y must be binary")
    if y.min() == y.max():
        raise ValueError("y contains a single class; correlation undefined")
    dx = x - x.mean()
    dy = y - y.mean()
    denom = math.sqrt(float(np.dot(dx, dx)) * float(np.dot(dy, dy)))
    if denom == 0.0:
        raise ValueError("x is constant; correlation undefined")
    return float(np.dot(dx, dy)) / denom


def standardize(x) -> np.ndarray:
    """Center to zero mean and scale to unit sample (n-1) standard deviation."""
    x = np.asarray(x, dtype=np.float64)
    if x.size < 2:
        raise ValueError("need at least two values to standardize")
    sd = float(x.std(ddof=1))
    if sd == 0.0:
        raise ValueError("constant vector cannot be standardized")
    return (x - x.mean()) / sd


def _sigmoid(eta: np.ndarray) -> np.ndarray:
    return 1.0 / (1.0 + np.exp(-np.clip(eta, -30.0, 30.0)))


def logistic_fit(X, y, max_iter: int = 100, grad_tol: float = 1e-8) -> RegressionResult:
    """Logistic regression by iteratively reweighted least squares.

    X is the design matrix including its intercept column. Standard errors
    come from the inverse observed information at the optimum; p-values are
    two-sided Wald z-tests. On non-convergence or a singular information
    matrix the result is flagged (converged=False) with NaN uncertainty
    fields where they could not be computed.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if X.ndim != 2 or y.ndim != 1 or X.shape[0] != y.shape[0]:
        raise ValueError("X must be (n, k) and y a length-n vector")
    if not np.all((y == 0.0) | (y == 1.0)):
        raise ValueError("y must be binary")
    n, k = X.shape
    beta = np.zeros(k)
    converged = False
    singular = False
    iterations = 0
    for iterations in range(1, max_iter + 1):
        mu = _sigmoid(X @ beta)
        grad = X.T @ (y - mu)
        if float(np.linalg.norm(grad)) <= grad_tol:
            converged = True
            break
        w = mu * (1.0 - mu)
        info = X.T @ (w[:, None] * X)
        try:
            beta = beta + np.linalg.solve(info, grad)
        except np.linalg.LinAlgError:
            singular = True
            break
    mu = _sigmoid(X @ beta)
    w = mu * (1.0 - mu)
    info = X.T @ (w[:, None] * X)
    se = np.full(k, np.nan)
    p_values = np.full(k, np.nan)
    if not singular:
        try:
            cov = np.linalg.inv(info)
            se = np.sqrt(np.clip(np.diag(cov), 0.0, None))
            with np.errstate(divide="ignore", invalid="ignore"):
                z = beta / se
            p_values = np.array([math.erfc(abs(zi) / math.sqrt(2.0)) if np.isfinite(zi) else np.nan
                                 for zi in z])
        except np.linalg.LinAlgError:
            pass
    return RegressionResult(
        coefficients=beta,
        standard_errors=se,
        p_values=p_values,
        odds_ratios=np.exp(beta),
        converged=converged,
        iterations=iterations,
    )


def ecdf(values) -> EcdfCurve:
    """Empirical CDF evaluated at the sorted unique sample points."""
    values = np.asarray(values, dtype=np.float64)
    if values.size == 0:
        raise ValueError("ecdf of an empty sample is undefined")
    uniq, counts = np.unique(values, return_counts=True)
    fractions = np.cumsum(counts) / values.size
    return EcdfCurve(sorted_values=uniq, cumulative_fractions=fractions)


def expected_prob_by_crowding(pairs, n_bins: int = 20):
    """Mean probability conditioned on binned crowding.

    Bins are equal-width over the observed crowding range; only nonempty
    bins are reported, as (lo, hi, count, mean_prob) rows. Returns the rows
    together with the overall mean crowding.
    """
    if n_bins < 1:
        raise ValueError("n_bins must be at least 1")
    arr = np.asarray(pairs, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] != 2 or arr.shape[0] == 0:
        raise ValueError("pairs must be a nonempty (crowding, probability) list")
    crowding = arr[:, 0]
    probs = arr[:, 1]
    lo, hi = float(crowding.min()), float(crowding.max())
    if hi == lo:
        return [(lo, hi, int(crowding.size), float(probs.mean()))], float(crowding.mean())
    edges = np.linspace(lo, hi, n_bins + 1)
    idx = np.minimum(np.digitize(crowding, edges[1:-1], right=True), n_bins - 1)
    rows = []
    for b in range(n_bins):
        mask = idx == b
        if not mask.any():
            continue
        rows.append((float(edges[b]), float(edges[b + 1]), int(mask.sum()), float(probs[mask].mean())))
    return rows, float(crowding.mean())


def avg_at_k(per_sample_correct) -> float:
    """Mean correctness over all problems and repeats, scaled by 100."""
    arr = np.asarray(per_sample_correct, dtype=np.float64)
    if arr.size == 0:
        raise ValueError("empty correctness matrix")
    return float(arr.mean()) * 100.0


def pass_at_k(n: int, c: int, k: int) -> float:
    """Unbiased estimate of solving a problem in at least one of k draws.

    1 - C(n-c, k) / C(n, k), for c correct out of n samples.
    """
    if k < 1 or k > n:
        raise ValueError("k must satisfy 1 <= k <= n")
    if c < 0 or c > n:
        raise ValueError("c must satisfy 0 <= c <= n")
    if c == 0:
        return 0.0
    if n - c < k:
        return 1.0
    # exact rational, rounded once at the end
    return float(1 - Fraction(math.comb(n - c, k), math.comb(n, k)))


def distinct_n(token_sequences, n: int = 4) -> float:
    """Unique-to-total n-gram ratio over a pooled generation set, x100."""
    if n < 1:
        raise ValueError("n must be at least 1")
    total = 0
    seen = set()
    for seq in token_sequences:
        seq = tuple(seq)
        for i in range(len(seq) - n + 1):
            seen.add(seq[i:i + n])
            total += 1
    if total == 0:
        raise ValueError(f"no {n}-gram in the generation set")
    return 100.0 * len(seen) / total


def semantic_diversity(embeddings) -> tuple[float, float]:
    """100 * (1 - mean pairwise cosine), plus the near-duplicate pair fraction.

    Pairs with cosine above 0.999 count as near duplicates.
    """
    emb = np.asarray(embeddings, dtype=np.float64)
    if emb.ndim != 2 or emb.shape[0] < 2:
        raise ValueError("need at least two embedding vectors")
    norms = np.linalg.norm(emb, axis=1)
    if norms.min() < 1e-12:
        raise ValueError("embeddings must have nonzero norm")
    unit = emb / norms[:, None]
    sim = unit @ unit.T
    iu = np.triu_indices(emb.shape[0], k=1)
    pair_cos = sim[iu]
    score = 100.0 * (1.0 - float(pair_cos.mean()))
    near_dup = float(np.mean(pair_cos > 0.999))
    return score, near_dup
