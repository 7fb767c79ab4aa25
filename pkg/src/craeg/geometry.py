"""Token-embedding geometry and crowding scores.

Crowding measures how much next-token probability mass sits on tokens whose
embeddings are nearly collinear (high absolute cosine), at three
granularities: per token, per decoding step, and per generated sequence.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

# Rows with Euclidean norm below this are treated as having no direction:
# their cosine with anything is defined as 0.
ZERO_NORM_EPS = 1e-12

WEIGHTINGS = ("exponential", "linear")


def _check_weighting(weighting: str) -> None:
    if weighting not in WEIGHTINGS:
        raise ValueError(f"unknown weighting {weighting!r}, expected one of {WEIGHTINGS}")


class EmbeddingTable:
    """Immutable V x d matrix of token embeddings with cached row norms.

    Rows may be stored in single precision; norms and every downstream
    accumulation are carried out in double precision.
    """

    def __init__(self, rows) -> None:
        rows = np.asarray(rows)
        if rows.ndim != 2:
            raise ValueError(f"embedding rows must be 2-D, got shape {rows.shape}")
        if rows.shape[0] < 1 or rows.shape[1] < 1:
            raise ValueError(f"embedding table needs at least one row and one column, got {rows.shape}")
        if not np.issubdtype(rows.dtype, np.floating):
            rows = rows.astype(np.float64)
        if not np.all(np.isfinite(rows)):
            raise ValueError("embedding table contains non-finite entries")
        self._rows = rows.copy()
        self._rows.setflags(write=False)
        self._norms = np.linalg.norm(self._rows.astype(np.float64, copy=False), axis=1)
        self._norms.setflags(write=False)
        n_zero = int(np.count_nonzero(self._norms < ZERO_NORM_EPS))
        if n_zero:
            warnings.warn(
                f"{n_zero} embedding row(s) have (near-)zero norm; "
                "their cosine with any token is taken as 0",
                RuntimeWarning,
                stacklevel=2,
            )

    @property
    def vocab_size(self) -> int:
        return self._rows.shape[0]

    @property
    def dim(self) -> int:
        return self._rows.shape[1]

    @property
    def rows(self) -> np.ndarray:
        return self._rows

    @property
    def row_norms(self) -> np.ndarray:
        return self._norms

    def __repr__(self) -> str:
        return f"EmbeddingTable(vocab_size={self.vocab_size}, dim={self.dim}, dtype={self._rows.dtype})"

    def _check_ids(self, ids: np.ndarray) -> None:
        if ids.size and (ids.min() < 0 or ids.max() >= self.vocab_size):
            raise IndexError(f"token id out of range for vocabulary of size {self.vocab_size}")


@dataclass(frozen=True)
class NextTokenDistribution:
    """Token ids with parallel probabilities at one decoding step.

    The full-vocabulary form sums to 1 (within 1e-6); a restricted form
    (e.g. after a top-K cut) keeps raw, unrenormalized probabilities and
    records the retained mass explicitly.
    """

    token_ids: np.ndarray
    probs: np.ndarray
    mass: float = field(default=float("nan"))
    restricted: bool = False

    def __post_init__(self) -> None:
        # always copy so freezing the arrays cannot affect caller-owned data
        ids = np.array(self.token_ids, dtype=np.int64)
        probs = np.array(self.probs, dtype=np.float64)
        if ids.ndim != 1 or probs.ndim != 1 or ids.shape != probs.shape:
            raise ValueError("token_ids and probs must be parallel 1-D arrays")
        if ids.size == 0:
            raise ValueError("distribution needs at least one token")
        if np.unique(ids).size != ids.size:
            raise ValueError("token_ids must be distinct")
        if ids.min() < 0:
            raise ValueError("token ids must be non-negative")
        if probs.min() < 0.0:
            raise ValueError("probabilities must be non-negative")
        if probs.max() > 1.0 + 1e-9:
            raise ValueError("probabilities must not exceed 1")
        total = float(probs.sum())
        mass = total if np.isnan(self.mass) else float(self.mass)
        if abs(mass - total) > 1e-9:
            raise ValueError(f"recorded mass {mass} does not match probability sum {total}")
        if self.restricted:
            if mass > 1.0 + 1e-6:
                raise ValueError(f"restricted mass {mass} exceeds 1")
        elif abs(total - 1.0) > 1e-6:
            raise ValueError(f"full distribution must sum to 1 within 1e-6, got {total}")
        ids.setflags(write=False)
        probs.setflags(write=False)
        object.__setattr__(self, "token_ids", ids)
        object.__setattr__(self, "probs", probs)
        object.__setattr__(self, "mass", mass)

    @classmethod
    def full(cls, probs) -> "NextTokenDistribution":
        """Full-vocabulary distribution with implicit ids 0..V-1."""
        probs = np.asarray(probs, dtype=np.float64)
        return cls(token_ids=np.arange(probs.size, dtype=np.int64), probs=probs)

    def __len__(self) -> int:
        return int(self.token_ids.size)


@dataclass(frozen=True)
class CrowdingReport:
    """Per-step crowding diagnostics over one candidate set."""

    token_scores: np.ndarray
    step_score: float
    adjusted_step_score: float
    candidate_ids: np.ndarray


def cosine_similarity(table: EmbeddingTable, i: int, j: int) -> float:
    """Cosine of embeddings i and j; 0 if either row has (near-)zero norm."""
    v = table.vocab_size
    if not (0 <= i < v and 0 <= j < v):
        raise IndexError(f"token index out of range for vocabulary of size {v}")
    ni = table.row_norms[i]
    nj = table.row_norms[j]
    if ni < ZERO_NORM_EPS or nj < ZERO_NORM_EPS:
        return 0.0
    dot = float(np.dot(table.rows[i].astype(np.float64, copy=False),
                       table.rows[j].astype(np.float64, copy=False)))
    return float(np.clip(dot / (ni * nj), -1.0, 1.0))


def pairwise_abs_cosine(table: EmbeddingTable, ids) -> np.ndarray:
    """Symmetric |cosine| matrix over a distinct candidate id list.

    Zero-norm rows contribute 0 everywhere, including their diagonal.
    """
    ids = np.asarray(ids, dtype=np.int64)
    if np.unique(ids).size != ids.size:
        raise ValueError("candidate ids must be distinct")
    table._check_ids(ids)
    emb = table.rows[ids].astype(np.float64, copy=False)
    norms = table.row_norms[ids]
    nonzero = norms >= ZERO_NORM_EPS
    safe = np.where(nonzero, norms, 1.0)
    unit = emb / safe[:, None]
    unit[~nonzero] = 0.0
    sim = np.abs(unit @ unit.T)
    np.clip(sim, 0.0, 1.0, out=sim)
    # exact symmetry and exact diagonal, unspoiled by BLAS rounding
    sim = np.triu(sim) + np.triu(sim, 1).T
    np.fill_diagonal(sim, np.where(nonzero, 1.0, 0.0))
    return sim


def token_crowding_scores(table: EmbeddingTable, dist: NextTokenDistribution) -> np.ndarray:
    """score[i] = sum over other candidates j of p_j * |cos(e_i, e_j)|.

    Probabilities are used raw (no renormalization) even for restricted
    candidate sets; the self term is excluded.
    """
    sim = pairwise_abs_cosine(table, dist.token_ids)
    np.fill_diagonal(sim, 0.0)
    return sim @ dist.probs


def step_crowding(dist: NextTokenDistribution, token_scores) -> float:
    """Probability-weighted aggregate of token-level crowding scores."""
    token_scores = np.asarray(token_scores, dtype=np.float64)
    if token_scores.shape != dist.probs.shape:
        raise ValueError("token_scores must parallel the distribution")
    return float(np.dot(dist.probs, token_scores))


def adjusted_step_crowding(dist: NextTokenDistribution, token_scores,
                           weighting: str = "exponential") -> float:
    """Nonlinearly weighted step crowding.

    exponential: sum p_i * (e^{p_i} - 1) * score_i
    linear:      sum p_i * p_i * score_i
    """
    _check_weighting(weighting)
    token_scores = np.asarray(token_scores, dtype=np.float64)
    if token_scores.shape != dist.probs.shape:
        raise ValueError("token_scores must parallel the distribution")
    p = dist.probs
    w = np.expm1(p) if weighting == "exponential" else p
    return float(np.dot(p * w, token_scores))


def sequence_crowding(step_scores) -> float:
    """Mean step-level crowding over a generated sequence."""
    step_scores = np.asarray(step_scores, dtype=np.float64)
    if step_scores.size == 0:
        raise ValueError("sequence has no steps")
    return float(step_scores.mean())


def top_k_restrict(dist: NextTokenDistribution, k: int) -> NextTokenDistribution:
    """Keep the K highest-probability tokens without renormalizing.

    Ties at the cut rank keep the smaller token id. When K covers the whole
    support the input is returned unchanged (same object, same order).
    """
    if k < 1:
        raise ValueError("k must be at least 1")
    n = len(dist)
    if k >= n:
        return dist
    order = np.lexsort((dist.token_ids, -dist.probs))[:k]
    return NextTokenDistribution(
        token_ids=dist.token_ids[order],
        probs=dist.probs[order],
        restricted=True,
    )


def measure_crowding(table: EmbeddingTable, dist: NextTokenDistribution,
                     weighting: str = "exponential") -> CrowdingReport:
    """Token, step, and adjusted step crowding for one candidate set."""
    scores = token_crowding_scores(table, dist)
    return CrowdingReport(
        token_scores=scores,
        step_score=step_crowding(dist, scores),
        adjusted_step_score=adjusted_step_crowding(dist, scores, weighting),
        candidate_ids=dist.token_ids,
    )
