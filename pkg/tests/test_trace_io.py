import io
import json
import struct

import numpy as np
import pytest

from craeg.geometry import EmbeddingTable
from craeg.sampler import CraegConfig
from craeg.trace_io import (
    BadMagicError,
    EmbeddingFormatError,
    NonFinitePayloadError,
    SequenceEndRecord,
    StepRecord,
    TraceParseError,
    TruncatedFileError,
    UnsupportedDtypeError,
    UnsupportedVersionError,
    load_embedding_table,
    read_trace_stream,
    save_embedding_table,
    serve_stream,
    write_trace,
)

THREE_TOKEN_PPRIME = (0.44538296721975656, 0.2772614761978115, 0.27735555658243194)
THREE_TOKEN_LAMBDA = 2.861205545052731


def shared_direction_table():
    return EmbeddingTable(np.array([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]]))


def corrupt(path, offset, new_bytes):
    data = bytearray(path.read_bytes())
    data[offset:offset + len(new_bytes)] = new_bytes
    path.write_bytes(bytes(data))


class TestEmbeddingFile:
    def test_float32_round_trip_is_exact(self, tmp_path):
        rng = np.random.default_rng(1)
        rows = rng.standard_normal((7, 5)).astype(np.float32).astype(np.float64)
        table = EmbeddingTable(rows)
        path = tmp_path / "table.crwd"
        save_embedding_table(table, path, dtype="float32")
        loaded = load_embedding_table(path)
        assert np.array_equal(loaded.rows, rows)
        assert loaded.vocab_size == 7 and loaded.dim == 5

    def test_float64_round_trip_is_exact(self, tmp_path):
        rng = np.random.default_rng(2)
        rows = rng.standard_normal((4, 3))
        path = tmp_path / "table.crwd"
        save_embedding_table(EmbeddingTable(rows), path, dtype="float64")
        assert np.array_equal(load_embedding_table(path).rows, rows)

    def test_float32_storage_quantizes(self, tmp_path):
        rows = np.array([[0.1, 0.2]])
        path = tmp_path / "table.crwd"
        save_embedding_table(EmbeddingTable(rows), path, dtype="float32")
        loaded = load_embedding_table(path)
        assert not np.array_equal(loaded.rows, rows)
        assert loaded.rows == pytest.approx(rows, abs=1e-7)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "table.crwd"
        save_embedding_table(shared_direction_table(), path)
        corrupt(path, 0, b"XXXX")
        with pytest.raises(BadMagicError):
            load_embedding_table(path)

    def test_unsupported_version(self, tmp_path):
        path = tmp_path / "table.crwd"
        save_embedding_table(shared_direction_table(), path)
        corrupt(path, 4, struct.pack("<I", 99))
        with pytest.raises(UnsupportedVersionError):
            load_embedding_table(path)

    def test_unsupported_dtype_code(self, tmp_path):
        path = tmp_path / "table.crwd"
        save_embedding_table(shared_direction_table(), path)
        corrupt(path, 20, bytes([9]))
        with pytest.raises(UnsupportedDtypeError):
            load_embedding_table(path)

    def test_truncated_header(self, tmp_path):
        path = tmp_path / "table.crwd"
        save_embedding_table(shared_direction_table(), path)
        path.write_bytes(path.read_bytes()[:10])
        with pytest.raises(TruncatedFileError):
            load_embedding_table(path)

    def test_truncated_payload(self, tmp_path):
        path = tmp_path / "table.crwd"
        save_embedding_table(shared_direction_table(), path)
        path.write_bytes(path.read_bytes()[:-3])
        with pytest.raises(TruncatedFileError):
            load_embedding_table(path)

    def test_trailing_bytes(self, tmp_path):
        path = tmp_path / "table.crwd"
        save_embedding_table(shared_direction_table(), path)
        path.write_bytes(path.read_bytes() + b"\x00\x00")
        with pytest.raises(EmbeddingFormatError) as excinfo:
            load_embedding_table(path)
        assert not isinstance(excinfo.value, TruncatedFileError)
        assert "trailing" in str(excinfo.value)

    def test_non_finite_payload(self, tmp_path):
        path = tmp_path / "table.crwd"
        save_embedding_table(shared_direction_table(), path, dtype="float64")
        corrupt(path, 32, struct.pack("<d", float("nan")))
        with pytest.raises(NonFinitePayloadError):
            load_embedding_table(path)

    def test_empty_table_header(self, tmp_path):
        path = tmp_path / "table.crwd"
        header = struct.Struct("<4sIQIB11x").pack(b"CRWD", 1, 0, 3, 1)
        path.write_bytes(header)
        with pytest.raises(EmbeddingFormatError):
            load_embedding_table(path)

    def test_save_rejects_float32_overflow(self, tmp_path):
        table = EmbeddingTable(np.array([[1e39, 0.0]]))
        path = tmp_path / "table.crwd"
        with pytest.raises(ValueError):
            save_embedding_table(table, path, dtype="float32")
        save_embedding_table(table, path, dtype="float64")
        assert load_embedding_table(path).rows[0, 0] == 1e39

    def test_save_rejects_unknown_dtype(self, tmp_path):
        with pytest.raises(ValueError):
            save_embedding_table(shared_direction_table(), tmp_path / "t", dtype="f16")


def two_sequence_records():
    return [
        StepRecord(0, (5, 2), (0.6, 0.3), 0.9, 5),
        StepRecord(1, (1,), (0.8,), 0.8, 1),
        SequenceEndRecord("s0", "p0", True, 2),
        StepRecord(0, (4, 3, 9), (0.5, 0.3, 0.1), 0.9, 3),
        SequenceEndRecord("s1", "p0", False, 1),
    ]


class TestTraceFile:
    def test_round_trip(self, tmp_path):
        records = two_sequence_records()
        path = tmp_path / "trace.jsonl"
        write_trace(records, path)
        assert list(read_trace_stream(path)) == records

    def test_strict_mode_raises_with_line_number(self, tmp_path):
        path = tmp_path / "trace.jsonl"
        path.write_text('{"kind": "step", "step_index": 0, "token_ids": [1], "probs": [0.5], "mass": 0.5, "sampled_id": 1}\n{broken\n')
        with pytest.raises(TraceParseError) as excinfo:
            list(read_trace_stream(path))
        assert excinfo.value.line_number == 2

    def test_on_error_continues(self, tmp_path):
        path = tmp_path / "trace.jsonl"
        good = '{"kind": "step", "step_index": %d, "token_ids": [1], "probs": [0.5], "mass": 0.5, "sampled_id": 1}'
        path.write_text("\n".join([good % 0, "not json", good % 1]) + "\n")
        errors = []
        records = list(read_trace_stream(path, on_error=lambda n, m: errors.append(n)))
        assert [r.step_index for r in records] == [0, 1]
        assert errors == [2]

    def test_ascending_probs_rejected(self, tmp_path):
        path = tmp_path / "trace.jsonl"
        path.write_text('{"kind": "step", "step_index": 0, "token_ids": [1, 2], "probs": [0.1, 0.5], "mass": 0.6, "sampled_id": 1}\n')
        with pytest.raises(TraceParseError, match="descending"):
            list(read_trace_stream(path))

    def test_mass_mismatch_rejected(self, tmp_path):
        path = tmp_path / "trace.jsonl"
        path.write_text('{"kind": "step", "step_index": 0, "token_ids": [1], "probs": [0.5], "mass": 0.7, "sampled_id": 1}\n')
        with pytest.raises(TraceParseError, match="mass"):
            list(read_trace_stream(path))

    def test_integer_correct_flag_rejected(self, tmp_path):
        path = tmp_path / "trace.jsonl"
        path.write_text('{"kind": "sequence_end", "sample_id": "a", "problem_id": "b", "correct": 1, "step_count": 0}\n')
        with pytest.raises(TraceParseError, match="boolean"):
            list(read_trace_stream(path))

    def test_missing_field_rejected(self, tmp_path):
        path = tmp_path / "trace.jsonl"
        path.write_text('{"kind": "step", "step_index": 0}\n')
        with pytest.raises(TraceParseError):
            list(read_trace_stream(path))

    def test_step_contiguity_enforced_and_resynced(self, tmp_path):
        path = tmp_path / "trace.jsonl"
        good = '{"kind": "step", "step_index": %d, "token_ids": [1], "probs": [0.5], "mass": 0.5, "sampled_id": 1}'
        path.write_text("\n".join([good % 0, good % 2, good % 3]) + "\n")
        errors = []
        records = list(read_trace_stream(path, on_error=lambda n, m: errors.append((n, m))))
        assert [r.step_index for r in records] == [0, 3]
        assert len(errors) == 1 and "contiguity" in errors[0][1]

    def test_step_count_mismatch_resets(self, tmp_path):
        path = tmp_path / "trace.jsonl"
        good = '{"kind": "step", "step_index": %d, "token_ids": [1], "probs": [0.5], "mass": 0.5, "sampled_id": 1}'
        end = '{"kind": "sequence_end", "sample_id": "a", "problem_id": "b", "correct": true, "step_count": %d}'
        path.write_text("\n".join([good % 0, good % 1, end % 5, good % 0]) + "\n")
        errors = []
        records = list(read_trace_stream(path, on_error=lambda n, m: errors.append((n, m))))
        kinds = [r.kind for r in records]
        assert kinds == ["step", "step", "step"]
        assert len(errors) == 1 and "step_count" in errors[0][1]

    def test_empty_file_and_blank_lines(self, tmp_path):
        path = tmp_path / "trace.jsonl"
        path.write_text("")
        assert list(read_trace_stream(path)) == []
        path.write_text("\n\n  \n")
        assert list(read_trace_stream(path)) == []


def run_serve(payload_lines, config, table=None):
    table = table if table is not None else shared_direction_table()
    out = io.StringIO()
    handled = serve_stream(io.StringIO("\n".join(payload_lines) + "\n"), out, table, config)
    return handled, [json.loads(line) for line in out.getvalue().splitlines()]


class TestServeStream:
    def test_tau_zero_passthrough(self):
        request = json.dumps({"id": 1, "token_ids": [0, 1, 2], "probs": [0.5, 0.3, 0.2]})
        handled, responses = run_serve([request], CraegConfig(tau=0.0))
        assert handled == 1
        assert responses == [
            {"id": 1, "probs": [0.5, 0.3, 0.2], "lambda": 0.0, "skipped": True}
        ]

    def test_matches_in_process_reweight(self):
        request = json.dumps({"id": "a", "token_ids": [0, 1, 2], "probs": [0.5, 0.3, 0.2]})
        handled, responses = run_serve([request], CraegConfig(tau=0.3))
        assert handled == 1
        resp = responses[0]
        assert resp["id"] == "a"
        assert not resp["skipped"]
        assert resp["lambda"] == pytest.approx(THREE_TOKEN_LAMBDA, abs=1e-9)
        assert resp["probs"] == pytest.approx(THREE_TOKEN_PPRIME, abs=1e-9)

    def test_restricted_block_mass_preserved(self):
        request = json.dumps({"id": 7, "token_ids": [0, 1], "probs": [0.5, 0.3]})
        handled, responses = run_serve([request], CraegConfig(tau=0.3))
        resp = responses[0]
        assert not resp["skipped"]
        assert sum(resp["probs"]) == pytest.approx(0.8, abs=1e-9)
        assert resp["probs"][0] != pytest.approx(0.5, abs=1e-6)

    def test_request_order_and_mixed_ids(self):
        requests = [
            json.dumps({"id": "first", "token_ids": [0, 1], "probs": [0.6, 0.4]}),
            json.dumps({"id": 2, "token_ids": [2], "probs": [1.0]}),
            json.dumps({"id": None, "token_ids": [0, 2], "probs": [0.5, 0.5]}),
        ]
        handled, responses = run_serve(requests, CraegConfig(tau=0.2))
        assert handled == 3
        assert [r["id"] for r in responses] == ["first", 2, None]
        assert responses[1]["skipped"]

    def test_error_response_keeps_stream_alive(self):
        requests = [
            json.dumps({"id": 10, "token_ids": [0, 1], "probs": [0.6]}),
            "not json at all",
            json.dumps({"id": 11, "token_ids": [0, 1], "probs": [0.6, 0.4]}),
        ]
        handled, responses = run_serve(requests, CraegConfig(tau=0.3))
        assert handled == 3
        assert responses[0]["id"] == 10 and "error" in responses[0]
        assert responses[1]["id"] is None and "error" in responses[1]
        assert "probs" in responses[2] and responses[2]["id"] == 11

    def test_blank_lines_ignored(self):
        request = json.dumps({"id": 0, "token_ids": [0, 1], "probs": [0.6, 0.4]})
        out = io.StringIO()
        handled = serve_stream(
            io.StringIO("\n" + request + "\n\n"), out, shared_direction_table(),
            CraegConfig(tau=0.3),
        )
        assert handled == 1
        assert len(out.getvalue().splitlines()) == 1
