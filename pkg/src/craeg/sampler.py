"""Crowding-aware reweighting and the samplers it composes with.

The correction runs in five stages per step: pick the correction set S_t
(probability >= epsilon), score crowding inside it, derive a step strength
lambda_t so the expected removed mass is a fraction tau of the set's mass,
down-weight each candidate by alpha_i = 1 / (1 + lambda_t C_i), and rescale
the set back to its original mass. Tokens outside S_t are never touched.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .analytics import shannon_entropy
from .geometry import (
    CrowdingReport,
    EmbeddingTable,
    NextTokenDistribution,
    _check_weighting,
    measure_crowding,
    token_crowding_scores,
    top_k_restrict,
)

DEFAULT_EPSILON = 0.01
DEFAULT_CROWD_FLOOR = 1e-12
DEFAULT_MASS_CAP = 1.0 - 1e-6


class SkipCorrection(RuntimeError):
    """Raised when a step has no usable crowding signal and must pass through."""


class InfeasibleReductionError(ValueError):
    """Raised when no finite lambda can remove the requested mass."""


@dataclass(frozen=True)
class CraegConfig:
    """Knobs for one reweighting policy.

    tau is the target fraction of correction-set mass to remove before
    renormalization; lambda_mode "fixed" bypasses the adaptive strength and
    uses fixed_lambda at every step.
    """

    tau: float
    epsilon: float = DEFAULT_EPSILON
    weighting: str = "exponential"
    lambda_mode: str = "adaptive"
    fixed_lambda: float | None = None
    crowd_floor: float = DEFAULT_CROWD_FLOOR
    mass_cap: float = DEFAULT_MASS_CAP

    def __post_init__(self) -> None:
        if not 0.0 <= self.tau <= 1.0:
            raise ValueError("tau must lie in [0, 1]")
        if not 0.0 < self.epsilon < 1.0:
            raise ValueError("epsilon must lie in (0, 1)")
        _check_weighting(self.weighting)
        if self.lambda_mode not in ("adaptive", "fixed"):
            raise ValueError("lambda_mode must be 'adaptive' or 'fixed'")
        if self.lambda_mode == "fixed":
            if self.fixed_lambda is None or not self.fixed_lambda > 0.0:
                raise ValueError("fixed lambda_mode needs a positive fixed_lambda")
        if self.crowd_floor < 0.0:
            raise ValueError("crowd_floor must be non-negative")
        if not 0.0 < self.mass_cap < 1.0:
            raise ValueError("mass_cap must lie in (0, 1)")


@dataclass(frozen=True)
class ReweightReport:
    """Everything one reweighting step decided, for logging and audits.

    target_reduction (delta) and mean_weight (mu) are always filled in when
    computable, skipped steps included, so the mean-field error delta vs.
    achieved_reduction stays observable per step.
    """

    correction_set: np.ndarray
    crowding_weights: np.ndarray
    lambda_: float
    alphas: np.ndarray
    target_reduction: float
    mean_weight: float
    mass_before: float
    mass_after: float
    achieved_reduction: float
    skipped: bool
    skip_reason: str = ""


def _prob_weight(probs: np.ndarray, weighting: str) -> np.ndarray:
    _check_weighting(weighting)
    if weighting == "exponential":
        return np.expm1(probs)
    return probs


def select_correction_set(dist: NextTokenDistribution, epsilon: float) -> np.ndarray:
    """Positions of candidates with probability >= epsilon.

    Ordered by descending probability, ties by ascending token id. May be
    empty.
    """
    if not epsilon > 0.0:
        raise ValueError("epsilon must be positive")
    idx = np.flatnonzero(dist.probs >= epsilon)
    if idx.size == 0:
        return idx
    order = np.lexsort((dist.token_ids[idx], -dist.probs[idx]))
    return idx[order]


def _as_step_vectors(probs_S, weights_S) -> tuple[np.ndarray, np.ndarray]:
    p = np.asarray(probs_S, dtype=np.float64)
    c = np.asarray(weights_S, dtype=np.float64)
    if p.ndim != 1 or p.shape != c.shape:
        raise ValueError("probabilities and weights must be parallel 1-D vectors")
    return p, c


def compute_lambda(
    probs_S,
    weights_S,
    tau: float,
    mass_cap: float = DEFAULT_MASS_CAP,
    crowd_floor: float = DEFAULT_CROWD_FLOOR,
) -> float:
    """Closed-form step strength from the mean-field reduction equation.

    lambda = (tau * sum(p)) / (mu * (1 - min(tau * sum(p), mass_cap))) with
    mu = sum(p_i * C_i). Exact when all C_i coincide, an approximation
    otherwise. Raises SkipCorrection when mu is at or below crowd_floor.
    """
    if not 0.0 <= tau <= 1.0:
        raise ValueError("tau must lie in [0, 1]")
    p, c = _as_step_vectors(probs_S, weights_S)
    if tau == 0.0:
        return 0.0
    mu = float(np.dot(p, c))
    if mu <= crowd_floor:
        raise SkipCorrection("mean crowding weight at or below crowd_floor")
    delta = tau * float(p.sum())
    return delta / (mu * (1.0 - min(delta, mass_cap)))


def correction_factors(probs_S, crowd_S, lambda_: float, weighting: str) -> np.ndarray:
    """Per-candidate down-weights alpha_i = 1 / (1 + lambda w(p_i) crowd_i).

    w(p) = e^p - 1 for exponential weighting, p for linear. Zero crowding or
    lambda = 0 leave a candidate untouched (alpha = 1).
    """
    if lambda_ < 0.0:
        raise ValueError("lambda must be non-negative")
    p, crowd = _as_step_vectors(probs_S, crowd_S)
    return 1.0 / (1.0 + lambda_ * _prob_weight(p, weighting) * crowd)


def exact_lambda_oracle(
    probs_S,
    weights_S,
    tau: float,
    crowd_floor: float = DEFAULT_CROWD_FLOOR,
    residual_tol: float = 1e-10,
) -> float:
    """Bisection root of sum(p_i lambda C_i / (1 + lambda C_i)) = tau sum(p).

    The reduction is strictly increasing in lambda with supremum
    sum(p_i [C_i > 0]); a target at or above that supremum raises
    InfeasibleReductionError. Reference implementation for tests.
    """
    if not 0.0 <= tau <= 1.0:
        raise ValueError("tau must lie in [0, 1]")
    p, c = _as_step_vectors(probs_S, weights_S)
    if tau == 0.0:
        return 0.0
    if float(np.dot(p, c)) <= crowd_floor:
        raise SkipCorrection("mean crowding weight at or below crowd_floor")
    delta = tau * float(p.sum())
    supremum = float(p[c > 0.0].sum())
    if delta >= supremum:
        raise InfeasibleReductionError(
            f"target reduction {delta:.6g} not attainable (supremum {supremum:.6g})"
        )

    def reduction(lam: float) -> float:
        lc = lam * c
        return float(np.dot(p, lc / (1.0 + lc)))

    lo, hi = 0.0, 1.0
    for _ in range(200):
        if reduction(hi) >= delta:
            break
        hi *= 2.0
    else:
        raise InfeasibleReductionError("bisection bracket never reached the target")
    mid = hi
    for _ in range(500):
        mid = 0.5 * (lo + hi)
        diff = reduction(mid) - delta
        if abs(diff) <= residual_tol:
            return mid
        if diff < 0.0:
            lo = mid
        else:
            hi = mid
    raise RuntimeError("bisection failed to reach the residual tolerance")


def _skip_report(
    dist: NextTokenDistribution,
    positions: np.ndarray,
    weights: np.ndarray,
    mu: float,
    delta: float,
    reason: str,
) -> ReweightReport:
    block = float(dist.probs[positions].sum())
    return ReweightReport(
        correction_set=dist.token_ids[positions].copy(),
        crowding_weights=weights,
        lambda_=0.0,
        alphas=np.ones(positions.size),
        target_reduction=delta,
        mean_weight=mu,
        mass_before=block,
        mass_after=block,
        achieved_reduction=0.0,
        skipped=True,
        skip_reason=reason,
    )


def reweight_block(
    dist: NextTokenDistribution,
    table: EmbeddingTable,
    config: CraegConfig,
) -> tuple[NextTokenDistribution, ReweightReport]:
    """Reweighting core that also accepts restricted (partial-mass) inputs."""
    positions = select_correction_set(dist, config.epsilon)
    block_probs = dist.probs[positions]
    block_mass = float(block_probs.sum())
    delta = config.tau * block_mass

    crowd = np.zeros(positions.size)
    if positions.size >= 2:
        sub = NextTokenDistribution(
            token_ids=dist.token_ids[positions],
            probs=block_probs,
            restricted=True,
        )
        crowd = token_crowding_scores(table, sub)
    weights = _prob_weight(block_probs, config.weighting) * crowd
    mu = float(np.dot(block_probs, weights))

    if config.tau == 0.0:
        return dist, _skip_report(dist, positions, weights, mu, delta, "tau is zero")
    if positions.size <= 1:
        return dist, _skip_report(
            dist, positions, weights, mu, delta, "fewer than two candidates"
        )
    if mu <= config.crowd_floor:
        return dist, _skip_report(
            dist, positions, weights, mu, delta, "mean crowding weight at or below crowd_floor"
        )

    if config.lambda_mode == "fixed":
        lam = float(config.fixed_lambda)
    else:
        lam = compute_lambda(
            block_probs, weights, config.tau, config.mass_cap, config.crowd_floor
        )
    alphas = correction_factors(block_probs, crowd, lam, config.weighting)
    achieved = float(np.dot(block_probs, 1.0 - alphas))

    # Rescale the corrected block to its original mass; the tail is untouched.
    penalized = alphas * block_probs
    new_probs = np.array(dist.probs)
    new_probs[positions] = penalized * (block_mass / float(penalized.sum()))
    out = NextTokenDistribution(
        token_ids=dist.token_ids, probs=new_probs, restricted=dist.restricted
    )
    report = ReweightReport(
        correction_set=dist.token_ids[positions].copy(),
        crowding_weights=weights,
        lambda_=lam,
        alphas=alphas,
        target_reduction=delta,
        mean_weight=mu,
        mass_before=block_mass,
        mass_after=float(out.probs[positions].sum()),
        achieved_reduction=achieved,
        skipped=False,
    )
    return out, report


def reweight(
    dist: NextTokenDistribution,
    table: EmbeddingTable,
    config: CraegConfig,
) -> tuple[NextTokenDistribution, ReweightReport]:
    """Apply the five-stage correction to a full next-token distribution."""
    if dist.restricted:
        raise ValueError("reweight expects a full distribution; use reweight_block")
    return reweight_block(dist, table, config)


def temperature_scale(logits, temperature: float) -> NextTokenDistribution:
    """softmax(logits / T) over token ids 0..n-1, max-subtracted for stability."""
    if not temperature > 0.0:
        raise ValueError("temperature must be positive")
    z = np.asarray(logits, dtype=np.float64)
    if z.ndim != 1 or z.size == 0:
        raise ValueError("logits must be a nonempty 1-D vector")
    if not np.all(np.isfinite(z)):
        raise ValueError("logits must be finite")
    z = z / temperature
    z = z - z.max()
    e = np.exp(z)
    return NextTokenDistribution.full(e / e.sum())


def top_p_filter(dist: NextTokenDistribution, top_p: float) -> NextTokenDistribution:
    """Nucleus truncation: smallest descending-probability prefix reaching top_p.

    The crossing token is kept; the prefix is renormalized. top_p = 1 returns
    the input unchanged.
    """
    if not 0.0 < top_p <= 1.0:
        raise ValueError("top_p must lie in (0, 1]")
    if top_p == 1.0:
        return dist
    order = np.lexsort((dist.token_ids, -dist.probs))
    cum = np.cumsum(dist.probs[order])
    crossing = int(np.searchsorted(cum, top_p, side="left"))
    keep = order[: min(crossing + 1, order.size)]
    kept = dist.probs[keep]
    return NextTokenDistribution(token_ids=dist.token_ids[keep], probs=kept / kept.sum())


def sample_token(dist: NextTokenDistribution, rng: np.random.Generator) -> tuple[int, np.random.Generator]:
    """Inverse-CDF draw over the distribution's support.

    Consumes exactly one uniform variate, so equal seeds replay equal tokens.
    """
    u = float(rng.random())
    cum = np.cumsum(dist.probs)
    idx = int(np.searchsorted(cum, u, side="right"))
    if idx >= len(dist):
        idx = len(dist) - 1
    while idx > 0 and dist.probs[idx] == 0.0:
        idx -= 1
    return int(dist.token_ids[idx]), rng


@dataclass(frozen=True)
class PipelineResult:
    """One decoded trajectory with per-step diagnostics.

    step_distributions holds the post-correction distribution of each step
    restricted to its measured top candidates, ready for trace writing.
    """

    token_ids: np.ndarray
    reweight_reports: list[ReweightReport] = field(repr=False)
    crowding_reports: list[CrowdingReport] = field(repr=False)
    step_entropies: np.ndarray = field(repr=False)
    step_distributions: list[NextTokenDistribution] = field(repr=False)

    def step_crowding_scores(self) -> np.ndarray:
        return np.array([r.step_score for r in self.crowding_reports])

    def mean_step_crowding(self) -> float:
        return float(self.step_crowding_scores().mean())

    def mean_entropy(self) -> float:
        return float(self.step_entropies.mean())


def decode_pipeline(
    logits_stream,
    table: EmbeddingTable,
    config: CraegConfig,
    temperature: float = 1.0,
    top_p: float = 1.0,
    seed: int = 0,
    crowd_top_k: int = 100,
) -> PipelineResult:
    """Decode one trajectory: temperature -> correction -> top-p -> sample.

    Crowding diagnostics are measured on the post-correction distribution
    restricted to its crowd_top_k most probable tokens, before truncation.
    With tau = 0 the trajectory is bit-identical to an uncorrected pipeline
    run from the same seed.
    """
    rng = np.random.default_rng(seed)
    tokens: list[int] = []
    reports: list[ReweightReport] = []
    crowding: list[CrowdingReport] = []
    entropies: list[float] = []
    step_dists: list[NextTokenDistribution] = []
    for logits in logits_stream:
        dist = temperature_scale(logits, temperature)
        dist, report = reweight(dist, table, config)
        restricted = top_k_restrict(dist, crowd_top_k)
        crowding.append(measure_crowding(table, restricted, config.weighting))
        entropies.append(shannon_entropy(dist))
        truncated = top_p_filter(dist, top_p)
        token, rng = sample_token(truncated, rng)
        tokens.append(token)
        reports.append(report)
        step_dists.append(restricted)
    return PipelineResult(
        token_ids=np.array(tokens, dtype=np.int64),
        reweight_reports=reports,
        crowding_reports=crowding,
        step_entropies=np.array(entropies),
        step_distributions=step_dists,
    )
