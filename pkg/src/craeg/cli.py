"""Command line front end.

Subcommands: reweight (one distribution in, one out), analyze (trace files
plus an embedding table to crowding/correctness tables), metrics (result
files to avg@k, pass@k, distinct-n, semantic diversity), simulate (paired
synthetic study), serve (streaming reweight protocol on stdin/stdout).

Exit codes: 0 success, 2 invalid inputs or parameters, 3 malformed file
formats, 4 filesystem errors, 1 unexpected failures. Flags override the
optional --config JSON file, which overrides built-in defaults; the
CRAEG_LOG_LEVEL environment variable sets the log level when no flag does.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from .analytics import (
    SequenceStats,
    avg_at_k,
    distinct_n,
    ecdf,
    expected_prob_by_crowding,
    logistic_fit,
    pass_at_k,
    point_biserial,
    semantic_diversity,
    shannon_entropy,
    standardize,
    tertile_accuracy,
)
from .geometry import NextTokenDistribution, token_crowding_scores
from .sampler import CraegConfig, reweight, reweight_block
from .simulate import simulate_synthetic
from .trace_io import (
    EmbeddingFormatError,
    StepRecord,
    TraceParseError,
    load_embedding_table,
    serve_stream,
    read_trace_stream,
)

log = logging.getLogger("craeg")

EXIT_VALIDATION = 2
EXIT_FORMAT = 3
EXIT_OS = 4


@dataclass(frozen=True)
class RunConfig:
    """Global run parameters shared by every subcommand."""

    seed: int = 0
    log_level: str = "INFO"
    out_dir: str = "."
    tau: float = 0.3
    epsilon: float = 0.01
    temperature: float = 1.0
    top_p: float = 1.0
    weighting: str = "exponential"
    lambda_mode: str = "adaptive"
    fixed_lambda: float | None = None
    top_k: int = 100

    def craeg_config(self) -> CraegConfig:
        return CraegConfig(
            tau=self.tau,
            epsilon=self.epsilon,
            weighting=self.weighting,
            lambda_mode=self.lambda_mode,
            fixed_lambda=self.fixed_lambda,
        )


def _global_parent() -> argparse.ArgumentParser:
    parent = argparse.ArgumentParser(add_help=False)
    g = parent.add_argument_group("global options")
    g.add_argument("--config", type=Path, help="JSON file with RunConfig fields; flags win")
    g.add_argument("--seed", type=int)
    g.add_argument("--log-level", dest="log_level")
    g.add_argument("--out-dir", dest="out_dir")
    g.add_argument("--tau", type=float)
    g.add_argument("--epsilon", type=float)
    g.add_argument("--temperature", type=float)
    g.add_argument("--top-p", dest="top_p", type=float)
    g.add_argument("--weighting", choices=("exponential", "linear"))
    g.add_argument("--lambda-mode", dest="lambda_mode", choices=("adaptive", "fixed"))
    g.add_argument("--fixed-lambda", dest="fixed_lambda", type=float)
    g.add_argument("--top-k", dest="top_k", type=int)
    return parent


def resolve_run_config(args: argparse.Namespace) -> RunConfig:
    """Merge flag > config file > environment (log level) > defaults."""
    file_values: dict = {}
    if getattr(args, "config", None) is not None:
        file_values = json.loads(Path(args.config).read_text(encoding="utf-8"))
        if not isinstance(file_values, dict):
            raise ValueError("--config file must hold a JSON object")
        known = {f.name for f in fields(RunConfig)}
        unknown = sorted(set(file_values) - known)
        if unknown:
            raise ValueError(f"unknown config keys: {', '.join(unknown)}")
    values: dict = {}
    for f in fields(RunConfig):
        flag = getattr(args, f.name, None)
        if flag is not None:
            values[f.name] = flag
        elif f.name in file_values:
            values[f.name] = file_values[f.name]
    if "log_level" not in values and os.environ.get("CRAEG_LOG_LEVEL"):
        values["log_level"] = os.environ["CRAEG_LOG_LEVEL"]
    return RunConfig(**values)


def _setup_logging(level_name: str) -> None:
    level = getattr(logging, level_name.upper(), None)
    if not isinstance(level, int):
        raise ValueError(f"unknown log level {level_name!r}")
    logging.basicConfig(
        level=level, stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s"
    )
    log.setLevel(level)


def _out_dir(run: RunConfig) -> Path:
    out = Path(run.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_json(path: Path, obj: dict) -> None:
    path.write_text(json.dumps(obj, indent=2) + "\n", encoding="utf-8")
    log.info("wrote %s", path)


def _write_csv(path: Path, header: list[str], rows: list[tuple]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)
    log.info("wrote %s", path)


def cmd_reweight(args: argparse.Namespace, run: RunConfig) -> int:
    table = load_embedding_table(args.table)
    if args.infile:
        payload = json.loads(Path(args.infile).read_text(encoding="utf-8"))
    else:
        payload = json.load(sys.stdin)
    if not isinstance(payload, dict) or "probs" not in payload:
        raise ValueError('input must be a JSON object with a "probs" field')
    probs = np.asarray(payload["probs"], dtype=np.float64)
    token_ids = np.asarray(
        payload.get("token_ids", np.arange(probs.size)), dtype=np.int64
    )
    restricted = bool(payload.get("restricted", False))
    dist = NextTokenDistribution(token_ids=token_ids, probs=probs, restricted=restricted)
    config = run.craeg_config()
    out, report = (reweight_block if restricted else reweight)(dist, table, config)
    result = {
        "token_ids": [int(t) for t in out.token_ids],
        "probs": [float(p) for p in out.probs],
        "lambda": report.lambda_,
        "skipped": report.skipped,
        "skip_reason": report.skip_reason,
        "correction_set": [int(t) for t in report.correction_set],
        "alphas": [float(a) for a in report.alphas],
        "target_reduction": report.target_reduction,
        "mean_weight": report.mean_weight,
        "achieved_reduction": report.achieved_reduction,
        "mass_before": report.mass_before,
        "mass_after": report.mass_after,
    }
    json.dump(result, sys.stdout)
    sys.stdout.write("\n")
    log.info(
        "reweighted %d tokens: lambda=%.6g skipped=%s", len(dist), report.lambda_, report.skipped
    )
    return 0


def cmd_serve(args: argparse.Namespace, run: RunConfig) -> int:
    table = load_embedding_table(args.table)
    config = run.craeg_config()
    log.info(
        "serving reweight requests on stdin (tau=%g epsilon=%g weighting=%s)",
        config.tau, config.epsilon, config.weighting,
    )
    handled = serve_stream(sys.stdin, sys.stdout, table, config)
    log.info("served %d requests", handled)
    return 0


def _trace_sequences(paths, table):
    """Per-sequence stats plus pooled (crowding, probability) pairs."""
    stats: list[SequenceStats] = []
    pairs: list[tuple[float, float]] = []
    for path in paths:
        step_scores: list[float] = []
        entropies: list[float] = []

        def warn(lineno: int, message: str, _path=path) -> None:
            log.warning("%s:%d skipped: %s", _path, lineno, message)

        for record in read_trace_stream(path, on_error=warn):
            if isinstance(record, StepRecord):
                dist = NextTokenDistribution(
                    token_ids=np.asarray(record.token_ids, dtype=np.int64),
                    probs=np.asarray(record.probs, dtype=np.float64),
                    restricted=True,
                )
                scores = token_crowding_scores(table, dist)
                step_scores.append(float(np.dot(dist.probs, scores)))
                pairs.extend(zip(scores.tolist(), dist.probs.tolist()))
                # entropy of the retained block, renormalized to a distribution
                entropies.append(
                    shannon_entropy(dist.probs / dist.mass) if dist.mass > 0.0 else 0.0
                )
            else:
                if not step_scores:
                    log.warning("%s: sequence %s has no steps, dropped", path, record.sample_id)
                    continue
                stats.append(
                    SequenceStats(
                        seq_crowding=float(np.mean(step_scores)),
                        mean_entropy=float(np.mean(entropies)),
                        steps=len(step_scores),
                        correct=record.correct,
                        sample_id=record.sample_id,
                        problem_id=record.problem_id,
                    )
                )
                step_scores, entropies = [], []
        if step_scores:
            log.warning("%s: trailing steps without a sequence_end record, dropped", path)
    return stats, pairs


def cmd_analyze(args: argparse.Namespace, run: RunConfig) -> int:
    table = load_embedding_table(args.table)
    out = _out_dir(run)
    stats, pairs = _trace_sequences(args.traces, table)
    if not stats:
        raise ValueError("no complete sequences found in the given traces")
    log.info("analyzed %d sequences from %d trace file(s)", len(stats), len(args.traces))

    crowding = np.array([s.seq_crowding for s in stats])
    entropy = np.array([s.mean_entropy for s in stats])
    correct = np.array([float(s.correct) for s in stats])
    summary: dict = {
        "n_sequences": len(stats),
        "accuracy": float(correct.mean()),
        "mean_sequence_crowding": float(crowding.mean()),
    }

    _write_csv(
        out / "sequences.csv",
        ["sample_id", "problem_id", "steps", "seq_crowding", "mean_entropy", "correct"],
        [
            (s.sample_id, s.problem_id, s.steps, repr(s.seq_crowding),
             repr(s.mean_entropy), int(s.correct))
            for s in stats
        ],
    )

    if len(stats) >= 3:
        tertiles = tertile_accuracy(stats)
        _write_csv(
            out / "tertiles.csv",
            ["bin", "count", "accuracy"],
            [(b, c, repr(a)) for b, c, a in tertiles],
        )
        summary["tertiles"] = [
            {"bin": b, "count": c, "accuracy": a} for b, c, a in tertiles
        ]

    both_classes = 0.0 < correct.mean() < 1.0
    if both_classes:
        summary["point_biserial"] = point_biserial(crowding, correct)
    else:
        summary["point_biserial"] = None
        log.warning("single-class outcomes: correlation and regression skipped")
    if both_classes and crowding.std() > 0.0 and entropy.std() > 0.0:
        X = np.column_stack(
            [np.ones(len(stats)), standardize(crowding), standardize(entropy)]
        )
        fit = logistic_fit(X, correct)
        summary["logistic"] = {
            "terms": ["intercept", "seq_crowding", "mean_entropy"],
            "coefficients": fit.coefficients.tolist(),
            "standard_errors": fit.standard_errors.tolist(),
            "p_values": fit.p_values.tolist(),
            "odds_ratios": fit.odds_ratios.tolist(),
            "converged": fit.converged,
            "iterations": fit.iterations,
        }
    else:
        summary["logistic"] = None

    ecdf_rows = []
    for label, mask in (("correct", correct == 1.0), ("incorrect", correct == 0.0)):
        if mask.any():
            curve = ecdf(crowding[mask])
            ecdf_rows.extend(
                (label, repr(float(v)), repr(float(f)))
                for v, f in zip(curve.sorted_values, curve.cumulative_fractions)
            )
    _write_csv(out / "ecdf.csv", ["group", "seq_crowding", "cumulative_fraction"], ecdf_rows)

    bin_rows, mean_crowding = expected_prob_by_crowding(pairs, args.bins)
    _write_csv(
        out / "prob_by_crowding.csv",
        ["bin_lo", "bin_hi", "count", "mean_prob"],
        [(repr(lo), repr(hi), c, repr(m)) for lo, hi, c, m in bin_rows],
    )
    summary["mean_token_crowding"] = mean_crowding

    _write_json(out / "analysis.json", summary)
    json.dump(summary, sys.stdout, indent=2)
    sys.stdout.write("\n")
    return 0


def _load_results(paths) -> list[dict]:
    records = []
    for path in paths:
        with open(path, "r", encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                line = line.strip()
                if not line:
                    continue
                obj = json.loads(line)
                if not isinstance(obj, dict) or "problem_id" not in obj or "correct" not in obj:
                    raise ValueError(
                        f"{path}:{lineno}: result records need problem_id and correct fields"
                    )
                if not isinstance(obj["correct"], bool):
                    raise ValueError(f"{path}:{lineno}: correct must be a boolean")
                records.append(obj)
    return records


def cmd_metrics(args: argparse.Namespace, run: RunConfig) -> int:
    records = _load_results(args.results)
    if not records:
        raise ValueError("no result records found")
    out = _out_dir(run)

    by_problem: dict[str, list[bool]] = {}
    for rec in records:
        by_problem.setdefault(rec["problem_id"], []).append(rec["correct"])
    counts = {pid: (len(v), sum(v)) for pid, v in by_problem.items()}
    min_n = min(n for n, _ in counts.values())
    if args.k > min_n:
        raise ValueError(
            f"k={args.k} exceeds the smallest per-problem sample count {min_n}"
        )
    summary: dict = {
        "n_records": len(records),
        "n_problems": len(by_problem),
        "avg_pct": avg_at_k([rec["correct"] for rec in records]),
        "k": args.k,
        "pass_at_k_pct": 100.0
        * float(np.mean([pass_at_k(n, c, args.k) for n, c in counts.values()])),
    }

    token_seqs = [rec["tokens"] for rec in records if isinstance(rec.get("tokens"), list)]
    summary["distinct_n"] = {
        "n": args.ngram,
        "value": distinct_n(token_seqs, args.ngram) if token_seqs else None,
    }

    embeddings = [rec["embedding"] for rec in records if isinstance(rec.get("embedding"), list)]
    if len(embeddings) >= 2:
        score, near_dup = semantic_diversity(embeddings)
        summary["semantic_diversity"] = {"score": score, "near_duplicate_fraction": near_dup}
    else:
        summary["semantic_diversity"] = None

    _write_json(out / "metrics.json", summary)
    json.dump(summary, sys.stdout, indent=2)
    sys.stdout.write("\n")
    return 0


def cmd_simulate(args: argparse.Namespace, run: RunConfig) -> int:
    out = _out_dir(run)
    report = simulate_synthetic(
        vocab=args.vocab,
        dim=args.dim,
        cluster_size=args.cluster_size,
        cluster_cosine=args.cluster_cosine,
        steps=args.steps,
        trials=args.trials,
        config=run.craeg_config(),
        seed=run.seed,
        temperature=run.temperature,
        top_p=run.top_p,
        crowd_top_k=run.top_k,
        trace_prefix=out / args.trace_out if args.trace_out else None,
    )
    summary = report.summary_dict()
    _write_json(out / "simulation.json", summary)
    _write_csv(
        out / "paired_trials.csv",
        ["trial", "baseline_crowding", "craeg_crowding", "baseline_entropy", "craeg_entropy"],
        [
            (k,) + tuple(repr(float(x)) for x in row)
            for k, row in enumerate(report.per_trial)
        ],
    )
    log.info(
        "mean step crowding: baseline %.6f vs craeg %.6f (reduction %.6f, sign test p=%.3g)",
        report.baseline.mean_step_crowding,
        report.craeg.mean_step_crowding,
        report.mean_crowding_reduction,
        report.sign_test_p,
    )
    json.dump(summary, sys.stdout, indent=2)
    sys.stdout.write("\n")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parent = _global_parent()
    parser = argparse.ArgumentParser(
        prog="craeg",
        description="Embedding-space crowding diagnostics and crowding-aware reweighting",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("reweight", parents=[parent], help="reweight one distribution")
    p.add_argument("--table", required=True, type=Path, help="embedding table file")
    p.add_argument("--in", dest="infile", type=Path, help="JSON input (default: stdin)")
    p.set_defaults(func=cmd_reweight)

    p = sub.add_parser("analyze", parents=[parent], help="crowding/correctness analysis of traces")
    p.add_argument("--table", required=True, type=Path)
    p.add_argument("--traces", required=True, nargs="+", type=Path)
    p.add_argument("--bins", type=int, default=20, help="bins for E[p | crowding]")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("metrics", parents=[parent], help="avg@k, pass@k, diversity metrics")
    p.add_argument("--results", required=True, nargs="+", type=Path, help="JSONL result files")
    p.add_argument("--k", type=int, default=1, help="k for pass@k")
    p.add_argument("--ngram", type=int, default=4, help="n for distinct-n")
    p.set_defaults(func=cmd_metrics)

    p = sub.add_parser("simulate", parents=[parent], help="paired synthetic decoding study")
    p.add_argument("--vocab", type=int, default=500)
    p.add_argument("--dim", type=int, default=32)
    p.add_argument("--cluster-size", dest="cluster_size", type=int, default=20)
    p.add_argument("--cluster-cosine", dest="cluster_cosine", type=float, default=0.9)
    p.add_argument("--steps", type=int, default=30)
    p.add_argument("--trials", type=int, default=200)
    p.add_argument("--trace-out", dest="trace_out", help="trace file prefix inside --out-dir")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("serve", parents=[parent], help="streaming reweight protocol on stdio")
    p.add_argument("--table", required=True, type=Path)
    p.set_defaults(func=cmd_serve)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        run = resolve_run_config(args)
        _setup_logging(run.log_level)
        return args.func(args, run)
    except (EmbeddingFormatError, TraceParseError, json.JSONDecodeError) as exc:
        log.error("format error: %s", exc)
        return EXIT_FORMAT
    except (ValueError, IndexError) as exc:
        log.error("invalid input: %s", exc)
        return EXIT_VALIDATION
    except OSError as exc:
        log.error("file system error: %s", exc)
        return EXIT_OS
    except Exception:
        log.exception("unexpected failure")
        return 1
