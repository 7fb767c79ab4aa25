"""File formats and the streaming reweight protocol.

Embedding tables live in a fixed-header binary format so a reader can
validate shape and dtype before touching the payload. Decoding traces are
line-delimited JSON, one record per line, greppable and appendable. The
serve loop speaks a JSON-lines request/response protocol over a pair of
text channels.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Iterator, Union

import numpy as np

from .geometry import EmbeddingTable, NextTokenDistribution
from .sampler import CraegConfig, reweight_block

MAGIC = b"CRWD"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sIQIB11x")

_DTYPE_FOR_CODE = {1: "<f4", 2: "<f8"}
_CODE_FOR_NAME = {"float32": 1, "float64": 2}


class EmbeddingFormatError(ValueError):
    """Base for malformed embedding files."""


class BadMagicError(EmbeddingFormatError):
    pass


class UnsupportedVersionError(EmbeddingFormatError):
    pass


class UnsupportedDtypeError(EmbeddingFormatError):
    pass


class TruncatedFileError(EmbeddingFormatError):
    pass


class NonFinitePayloadError(EmbeddingFormatError):
    pass


def save_embedding_table(table: EmbeddingTable, path, dtype: str = "float32") -> None:
    """Write a table as header + row-major little-endian payload.

    dtype "float32" (code 1) is the interchange default; "float64" (code 2)
    preserves full precision. Values that overflow the storage dtype are
    rejected rather than written as inf.
    """
    if dtype not in _CODE_FOR_NAME:
        raise ValueError(f"unsupported dtype {dtype!r}; use float32 or float64")
    code = _CODE_FOR_NAME[dtype]
    with np.errstate(over="ignore"):
        payload = np.ascontiguousarray(table.rows.astype(_DTYPE_FOR_CODE[code]))
    if not np.all(np.isfinite(payload)):
        raise ValueError(f"table values overflow {dtype}")
    header = _HEADER.pack(MAGIC, FORMAT_VERSION, table.vocab_size, table.dim, code)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(payload.tobytes())


def load_embedding_table(path) -> EmbeddingTable:
    """Read a table back, validating the header before the payload."""
    with open(path, "rb") as fh:
        raw = fh.read(_HEADER.size)
        if len(raw) < _HEADER.size:
            raise TruncatedFileError(f"{path}: file shorter than the {_HEADER.size}-byte header")
        magic, version, vocab, dim, code = _HEADER.unpack(raw)
        if magic != MAGIC:
            raise BadMagicError(f"{path}: bad magic {magic!r}")
        if version != FORMAT_VERSION:
            raise UnsupportedVersionError(f"{path}: unsupported format version {version}")
        if code not in _DTYPE_FOR_CODE:
            raise UnsupportedDtypeError(f"{path}: unknown dtype code {code}")
        if vocab < 1 or dim < 1:
            raise EmbeddingFormatError(f"{path}: header declares an empty table")
        np_dtype = np.dtype(_DTYPE_FOR_CODE[code])
        expected = vocab * dim * np_dtype.itemsize
        payload = fh.read()
    if len(payload) < expected:
        raise TruncatedFileError(
            f"{path}: payload holds {len(payload)} bytes, header declares {expected}"
        )
    if len(payload) > expected:
        raise EmbeddingFormatError(f"{path}: {len(payload) - expected} trailing bytes")
    rows = np.frombuffer(payload, dtype=np_dtype).reshape(vocab, dim)
    if not np.all(np.isfinite(rows)):
        raise NonFinitePayloadError(f"{path}: payload contains non-finite values")
    return EmbeddingTable(rows)


@dataclass(frozen=True)
class StepRecord:
    """One decoding step: the top candidates (descending) and what was drawn."""

    step_index: int
    token_ids: tuple[int, ...]
    probs: tuple[float, ...]
    mass: float
    sampled_id: int

    kind = "step"


@dataclass(frozen=True)
class SequenceEndRecord:
    """Closes one generation and carries its outcome label."""

    sample_id: str
    problem_id: str
    correct: bool
    step_count: int

    kind = "sequence_end"


TraceRecord = Union[StepRecord, SequenceEndRecord]


class TraceParseError(ValueError):
    def __init__(self, line_number: int, message: str):
        super().__init__(f"line {line_number}: {message}")
        self.line_number = line_number


def _record_to_obj(record: TraceRecord) -> dict:
    if isinstance(record, StepRecord):
        return {
            "kind": "step",
            "step_index": record.step_index,
            "token_ids": [int(t) for t in record.token_ids],
            "probs": [float(p) for p in record.probs],
            "mass": float(record.mass),
            "sampled_id": int(record.sampled_id),
        }
    return {
        "kind": "sequence_end",
        "sample_id": record.sample_id,
        "problem_id": record.problem_id,
        "correct": bool(record.correct),
        "step_count": int(record.step_count),
    }


def write_trace(records: Iterable[TraceRecord], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for record in records:
            fh.write(json.dumps(_record_to_obj(record)) + "\n")


def _parse_step(obj: dict) -> StepRecord:
    step_index = obj["step_index"]
    token_ids = obj["token_ids"]
    probs = obj["probs"]
    mass = obj["mass"]
    sampled_id = obj["sampled_id"]
    if not isinstance(step_index, int) or step_index < 0:
        raise ValueError("step_index must be a non-negative integer")
    if not isinstance(token_ids, list) or not isinstance(probs, list):
        raise ValueError("token_ids and probs must be lists")
    if len(token_ids) != len(probs) or not token_ids:
        raise ValueError("token_ids and probs must be nonempty and parallel")
    if any(not isinstance(t, int) or t < 0 for t in token_ids):
        raise ValueError("token ids must be non-negative integers")
    p = np.asarray(probs, dtype=np.float64)
    if p.min() < 0.0 or p.max() > 1.0:
        raise ValueError("probabilities must lie in [0, 1]")
    if np.any(np.diff(p) > 0.0):
        raise ValueError("probabilities must be descending")
    total = float(p.sum())
    if total > 1.0 + 1e-6:
        raise ValueError("probabilities sum above 1")
    if abs(total - float(mass)) > 1e-6:
        raise ValueError("mass field disagrees with the probability sum")
    if not isinstance(sampled_id, int) or sampled_id < 0:
        raise ValueError("sampled_id must be a non-negative integer")
    return StepRecord(
        step_index=step_index,
        token_ids=tuple(token_ids),
        probs=tuple(float(x) for x in probs),
        mass=float(mass),
        sampled_id=sampled_id,
    )


def _parse_end(obj: dict) -> SequenceEndRecord:
    sample_id = obj["sample_id"]
    problem_id = obj["problem_id"]
    correct = obj["correct"]
    step_count = obj["step_count"]
    if not isinstance(sample_id, str) or not isinstance(problem_id, str):
        raise ValueError("sample_id and problem_id must be strings")
    if not isinstance(correct, bool):
        raise ValueError("correct must be a boolean")
    if not isinstance(step_count, int) or step_count < 0:
        raise ValueError("step_count must be a non-negative integer")
    return SequenceEndRecord(
        sample_id=sample_id, problem_id=problem_id, correct=correct, step_count=step_count
    )


def read_trace_stream(
    path,
    on_error: Callable[[int, str], None] | None = None,
) -> Iterator[TraceRecord]:
    """Yield validated records in file order.

    A malformed line raises TraceParseError with its line number; passing
    on_error(line_number, message) instead reports the line and continues,
    so one bad record never aborts the stream.
    """
    def report(lineno: int, message: str) -> None:
        if on_error is None:
            raise TraceParseError(lineno, message)
        on_error(lineno, message)

    expected_step = 0
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
                if not isinstance(obj, dict):
                    raise ValueError("record must be an object")
                kind = obj.get("kind")
                if kind == "step":
                    record = _parse_step(obj)
                elif kind == "sequence_end":
                    record = _parse_end(obj)
                else:
                    raise ValueError(f"unknown record kind {kind!r}")
            except (ValueError, KeyError, TypeError) as exc:
                report(lineno, str(exc))
                continue
            if isinstance(record, StepRecord):
                if record.step_index != expected_step:
                    report(
                        lineno,
                        f"step_index {record.step_index} breaks contiguity "
                        f"(expected {expected_step})",
                    )
                    expected_step = record.step_index + 1
                    continue
                expected_step += 1
            else:
                if record.step_count != expected_step:
                    report(
                        lineno,
                        f"step_count {record.step_count} disagrees with "
                        f"{expected_step} steps seen",
                    )
                    expected_step = 0
                    continue
                expected_step = 0
            yield record


def serve_stream(in_channel, out_channel, table: EmbeddingTable, config: CraegConfig) -> int:
    """Answer line-delimited reweight requests until end-of-input.

    Request: {"id": ..., "token_ids": [...], "probs": [...]}. Response:
    {"id", "probs", "lambda", "skipped"} in request order. A malformed
    request yields {"id", "error"} and the stream continues. Returns the
    number of requests answered.
    """
    handled = 0
    for line in in_channel:
        line = line.strip()
        if not line:
            continue
        request_id = None
        try:
            obj = json.loads(line)
            if not isinstance(obj, dict):
                raise ValueError("request must be an object")
            request_id = obj.get("id")
            dist = NextTokenDistribution(
                token_ids=np.asarray(obj["token_ids"], dtype=np.int64),
                probs=np.asarray(obj["probs"], dtype=np.float64),
                restricted=True,
            )
            out, report = reweight_block(dist, table, config)
            response = {
                "id": request_id,
                "probs": [float(p) for p in out.probs],
                "lambda": report.lambda_,
                "skipped": report.skipped,
            }
        except Exception as exc:  # malformed request must not kill the stream
            response = {"id": request_id, "error": str(exc)}
        out_channel.write(json.dumps(response) + "\n")
        out_channel.flush()
        handled += 1
    return handled
