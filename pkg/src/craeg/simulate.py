"""Desk-scale synthetic decoding study with a planted embedding cluster.

The scenario plants one cluster of tokens sharing a common direction
(pairwise cosine exactly cluster_cosine) plus a small pool of exactly
orthogonal alternatives; remaining tokens are random unit vectors. Step
logits boost a few cluster tokens hard and a few pool tokens moderately, so
probability mass concentrates on geometrically redundant candidates while
distinct alternatives stay available. Paired trajectories (shared logits,
shared sampling seed) compare an uncorrected arm against a corrected one.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .analytics import distinct_n
from .geometry import EmbeddingTable
from .sampler import CraegConfig, PipelineResult, decode_pipeline
from .trace_io import SequenceEndRecord, StepRecord, TraceRecord, write_trace

CLUSTER_BOOST = 5.0
POOL_BOOST = 4.2
LOGIT_NOISE_SCALE = 0.3


def build_clustered_table(
    vocab: int,
    dim: int,
    cluster_size: int,
    cluster_cosine: float,
    seed: int = 0,
) -> tuple[EmbeddingTable, np.ndarray, np.ndarray]:
    """Embedding table with a planted cluster and an orthogonal pool.

    Cluster rows are sqrt(rho) * b_0 + sqrt(1 - rho) * b_(1+i) on the
    standard basis, giving pairwise cosine exactly rho (exactly 0 when
    rho = 0). Pool rows are further basis vectors, orthogonal to everything
    planted. Returns (table, cluster_ids, pool_ids).
    """
    if vocab < 1 or cluster_size < 1:
        raise ValueError("vocab and cluster_size must be positive")
    if cluster_size > vocab:
        raise ValueError("cluster_size cannot exceed vocab")
    if not 0.0 <= cluster_cosine < 1.0:
        raise ValueError("cluster_cosine must lie in [0, 1)")
    if dim < cluster_size + 2:
        raise ValueError(
            f"dim {dim} too small: planting a {cluster_size}-token cluster with an "
            f"orthogonal pool needs dim >= {cluster_size + 2}"
        )
    pool_size = max(0, min(cluster_size, dim - cluster_size - 1, vocab - cluster_size))

    rows = np.zeros((vocab, dim))
    rows[:cluster_size, 0] = math.sqrt(cluster_cosine)
    for i in range(cluster_size):
        rows[i, 1 + i] = math.sqrt(1.0 - cluster_cosine)
    for j in range(pool_size):
        rows[cluster_size + j, 1 + cluster_size + j] = 1.0
    rest = vocab - cluster_size - pool_size
    if rest:
        rng = np.random.default_rng(seed)
        g = rng.standard_normal((rest, dim))
        rows[cluster_size + pool_size:] = g / np.linalg.norm(g, axis=1)[:, None]
    cluster_ids = np.arange(cluster_size, dtype=np.int64)
    pool_ids = np.arange(cluster_size, cluster_size + pool_size, dtype=np.int64)
    return EmbeddingTable(rows), cluster_ids, pool_ids


def generate_step_logits(
    rng: np.random.Generator,
    vocab: int,
    cluster_ids: np.ndarray,
    pool_ids: np.ndarray,
) -> np.ndarray:
    """One step of synthetic logits: noise, boosted cluster, boosted pool."""
    logits = rng.normal(0.0, LOGIT_NOISE_SCALE, size=vocab)
    n_cluster = min(int(rng.integers(3, 9)), cluster_ids.size)
    logits[rng.choice(cluster_ids, size=n_cluster, replace=False)] += CLUSTER_BOOST
    if pool_ids.size:
        n_pool = min(int(rng.integers(1, 4)), pool_ids.size)
        logits[rng.choice(pool_ids, size=n_pool, replace=False)] += POOL_BOOST
    return logits


@dataclass(frozen=True)
class ArmSummary:
    """Aggregate statistics of one decoding arm over all trials."""

    name: str
    mean_step_crowding: float
    mean_entropy: float
    distinct_4: float
    solved: int
    mean_lambda: float
    skip_fraction: float


@dataclass(frozen=True)
class SimulationReport:
    """Paired comparison of the corrected arm against the baseline."""

    baseline: ArmSummary
    craeg: ArmSummary
    trials: int
    steps: int
    wins: int
    losses: int
    ties: int
    sign_test_p: float
    mean_crowding_reduction: float
    # per-trial columns: baseline crowding, corrected crowding,
    # baseline entropy, corrected entropy
    per_trial: np.ndarray = field(repr=False)

    def summary_dict(self) -> dict:
        def arm(a: ArmSummary) -> dict:
            return {
                "name": a.name,
                "mean_step_crowding": a.mean_step_crowding,
                "mean_entropy": a.mean_entropy,
                "distinct_4": None if math.isnan(a.distinct_4) else a.distinct_4,
                "solved": a.solved,
                "mean_lambda": a.mean_lambda,
                "skip_fraction": a.skip_fraction,
            }

        return {
            "baseline": arm(self.baseline),
            "craeg": arm(self.craeg),
            "trials": self.trials,
            "steps": self.steps,
            "wins": self.wins,
            "losses": self.losses,
            "ties": self.ties,
            "sign_test_p": self.sign_test_p,
            "mean_crowding_reduction": self.mean_crowding_reduction,
        }


def paired_sign_test_p(wins: int, losses: int) -> float:
    """One-sided exact binomial tail P(X >= wins | n = wins + losses, 1/2)."""
    if wins < 0 or losses < 0:
        raise ValueError("counts must be non-negative")
    n = wins + losses
    if n == 0:
        return 1.0
    return sum(math.comb(n, i) for i in range(wins, n + 1)) / 2.0 ** n


def pipeline_trace_records(
    result: PipelineResult, sample_id: str, problem_id: str, correct: bool
) -> list[TraceRecord]:
    """Flatten one trajectory into step records plus its end record."""
    records: list[TraceRecord] = []
    for t, dist in enumerate(result.step_distributions):
        order = np.lexsort((dist.token_ids, -dist.probs))
        records.append(
            StepRecord(
                step_index=t,
                token_ids=tuple(int(i) for i in dist.token_ids[order]),
                probs=tuple(float(p) for p in dist.probs[order]),
                mass=float(dist.probs.sum()),
                sampled_id=int(result.token_ids[t]),
            )
        )
    records.append(
        SequenceEndRecord(
            sample_id=sample_id,
            problem_id=problem_id,
            correct=correct,
            step_count=len(result.step_distributions),
        )
    )
    return records


def _arm_summary(
    name: str,
    results: list[PipelineResult],
    solved: list[bool],
) -> ArmSummary:
    lambdas = [
        r.lambda_
        for res in results
        for r in res.reweight_reports
        if not r.skipped
    ]
    n_steps = sum(len(res.reweight_reports) for res in results)
    n_skipped = sum(sum(r.skipped for r in res.reweight_reports) for res in results)
    seqs = [[int(t) for t in res.token_ids] for res in results]
    # distinct-4 is undefined for trajectories shorter than 4 steps
    has_4gram = any(len(s) >= 4 for s in seqs)
    return ArmSummary(
        name=name,
        mean_step_crowding=float(np.mean([res.mean_step_crowding() for res in results])),
        mean_entropy=float(np.mean([res.mean_entropy() for res in results])),
        distinct_4=distinct_n(seqs, 4) if has_4gram else float("nan"),
        solved=sum(solved),
        mean_lambda=float(np.mean(lambdas)) if lambdas else 0.0,
        skip_fraction=n_skipped / n_steps if n_steps else 1.0,
    )


def simulate_synthetic(
    vocab: int = 500,
    dim: int = 32,
    cluster_size: int = 20,
    cluster_cosine: float = 0.9,
    steps: int = 30,
    trials: int = 200,
    config: CraegConfig | None = None,
    seed: int = 0,
    temperature: float = 1.0,
    top_p: float = 1.0,
    crowd_top_k: int = 100,
    trace_prefix=None,
) -> SimulationReport:
    """Decode paired trajectories and compare step crowding across arms.

    Each trial draws a fresh logit sequence, decoded once without correction
    and once with `config`, from the same sampling seed. A trial counts as
    solved when its final sampled token lands in the orthogonal pool. With
    trace_prefix set, writes <prefix>.baseline.jsonl and <prefix>.craeg.jsonl.
    """
    if steps < 1 or trials < 1:
        raise ValueError("steps and trials must be positive")
    if config is None:
        config = CraegConfig(tau=0.3)
    table, cluster_ids, pool_ids = build_clustered_table(
        vocab, dim, cluster_size, cluster_cosine, seed
    )
    pool_set = set(int(t) for t in pool_ids)
    baseline_config = replace(config, tau=0.0)

    per_trial = np.empty((trials, 4))
    base_results: list[PipelineResult] = []
    craeg_results: list[PipelineResult] = []
    base_solved: list[bool] = []
    craeg_solved: list[bool] = []
    base_records: list[TraceRecord] = []
    craeg_records: list[TraceRecord] = []

    for k, child in enumerate(np.random.SeedSequence(seed).spawn(trials)):
        rng = np.random.default_rng(child)
        logits = [generate_step_logits(rng, vocab, cluster_ids, pool_ids) for _ in range(steps)]
        decode_seed = int(rng.integers(0, 2**63 - 1))
        base = decode_pipeline(
            logits, table, baseline_config, temperature, top_p, decode_seed, crowd_top_k
        )
        cra = decode_pipeline(
            logits, table, config, temperature, top_p, decode_seed, crowd_top_k
        )
        per_trial[k] = (
            base.mean_step_crowding(),
            cra.mean_step_crowding(),
            base.mean_entropy(),
            cra.mean_entropy(),
        )
        base_results.append(base)
        craeg_results.append(cra)
        base_solved.append(int(base.token_ids[-1]) in pool_set)
        craeg_solved.append(int(cra.token_ids[-1]) in pool_set)
        if trace_prefix is not None:
            base_records.extend(
                pipeline_trace_records(base, f"trial-{k}", "synthetic", base_solved[-1])
            )
            craeg_records.extend(
                pipeline_trace_records(cra, f"trial-{k}", "synthetic", craeg_solved[-1])
            )

    if trace_prefix is not None:
        write_trace(base_records, f"{trace_prefix}.baseline.jsonl")
        write_trace(craeg_records, f"{trace_prefix}.craeg.jsonl")

    diffs = per_trial[:, 0] - per_trial[:, 1]
    wins = int(np.sum(diffs > 0.0))
    losses = int(np.sum(diffs < 0.0))
    ties = trials - wins - losses
    return SimulationReport(
        baseline=_arm_summary("baseline", base_results, base_solved),
        craeg=_arm_summary("craeg", craeg_results, craeg_solved),
        trials=trials,
        steps=steps,
        wins=wins,
        losses=losses,
        ties=ties,
        sign_test_p=paired_sign_test_p(wins, losses),
        mean_crowding_reduction=float(diffs.mean()),
        per_trial=per_trial,
    )
