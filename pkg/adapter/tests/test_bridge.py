import sys

import numpy as np
import pytest

from craeg.geometry import EmbeddingTable, NextTokenDistribution
from craeg.sampler import CraegConfig, reweight
from craeg.trace_io import load_embedding_table

from craeg_adapter import AdapterConfig, BridgeProtocolError, ReweightBridge, export_embeddings

COMMAND = (sys.executable, "-m", "craeg")

# hand case: tokens 0 and 1 share a direction, token 2 orthogonal
SHARED_ROWS = np.array([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]])


def make_config(tmp_path, rows, **overrides):
    table_path = tmp_path / "table.crwd"
    export_embeddings({"wte.weight": rows}, table_path, dtype="float64")
    defaults = dict(table_path=str(table_path), command=COMMAND, tau=0.3)
    defaults.update(overrides)
    return AdapterConfig(**defaults)


class TestAdapterConfig:
    def test_validation(self):
        with pytest.raises(ValueError):
            AdapterConfig(table_path="t", tau=1.5)
        with pytest.raises(ValueError):
            AdapterConfig(table_path="t", epsilon=0.0)
        with pytest.raises(ValueError):
            AdapterConfig(table_path="t", weighting="cubic")
        with pytest.raises(ValueError):
            AdapterConfig(table_path="t", lambda_mode="fixed")
        with pytest.raises(ValueError):
            AdapterConfig(table_path="t", fixed_lambda=2.0)
        with pytest.raises(ValueError):
            AdapterConfig(table_path="t", forward_top_k=0)
        with pytest.raises(ValueError):
            AdapterConfig(table_path="t", fallback="retry")
        with pytest.raises(ValueError):
            AdapterConfig(table_path="")

    def test_serve_argv_carries_parameters(self):
        config = AdapterConfig(
            table_path="emb.crwd", tau=0.25, epsilon=0.02,
            lambda_mode="fixed", fixed_lambda=8.0,
        )
        argv = config.serve_argv()
        assert argv[:2] == ["craeg", "serve"]
        assert argv[argv.index("--tau") + 1] == "0.25"
        assert argv[argv.index("--fixed-lambda") + 1] == "8.0"

    def test_forward_min_prob(self):
        assert AdapterConfig(table_path="t", epsilon=0.01).forward_min_prob == 0.001


class TestSelectPayload:
    def test_default_threshold_rule(self, tmp_path):
        config = make_config(tmp_path, SHARED_ROWS)
        bridge = ReweightBridge(config)
        probs = np.array([0.5, 0.3, 0.1995, 0.0005])
        assert bridge.select_payload(probs).tolist() == [0, 1, 2]

    def test_top_k_cap(self, tmp_path):
        config = make_config(tmp_path, SHARED_ROWS, forward_top_k=2)
        bridge = ReweightBridge(config)
        positions = bridge.select_payload(np.array([0.1, 0.5, 0.4]))
        assert positions.tolist() == [1, 2]

    def test_all_tail_falls_back_to_argmax(self, tmp_path):
        config = make_config(tmp_path, SHARED_ROWS)
        bridge = ReweightBridge(config)
        probs = np.full(2000, 1.0 / 2000.0)
        assert bridge.select_payload(probs).tolist() == [0]


class TestProtocolRoundTrip:
    def test_tau_zero_equals_input(self, tmp_path):
        config = make_config(tmp_path, SHARED_ROWS, tau=0.0)
        probs = np.array([0.5, 0.3, 0.2])
        with ReweightBridge(config) as bridge:
            out = bridge.reweight_hook(probs)
        assert np.array_equal(out, probs)
        assert out is not probs

    def test_hand_case_matches_in_process(self, tmp_path):
        config = make_config(tmp_path, SHARED_ROWS, tau=0.3)
        probs = np.array([0.5, 0.3, 0.2])
        with ReweightBridge(config) as bridge:
            out = bridge.reweight_hook(probs)
        table = EmbeddingTable(SHARED_ROWS)
        expected, report = reweight(
            NextTokenDistribution.full(probs), table, CraegConfig(tau=0.3)
        )
        assert not report.skipped
        assert np.max(np.abs(out - expected.probs)) <= 1e-9

    def test_hundred_random_distributions_match_in_process(self, tmp_path):
        rng = np.random.default_rng(42)
        vocab, dim = 40, 8
        # a common direction keeps cosines high enough that most steps correct
        rows = rng.normal(0.0, 1.0, (1, dim)) + 0.5 * rng.normal(0.0, 1.0, (vocab, dim))
        config = make_config(tmp_path, rows, tau=0.3)
        table = load_embedding_table(config.table_path)
        engine_config = CraegConfig(tau=0.3)
        corrected = 0
        with ReweightBridge(config) as bridge:
            for _ in range(100):
                raw = rng.random(vocab) ** 3
                probs = raw / raw.sum()
                out = bridge.reweight_hook(probs)
                expected, report = reweight(
                    NextTokenDistribution.full(probs), table, engine_config
                )
                assert np.max(np.abs(out - expected.probs)) <= 1e-9
                assert abs(float(out.sum()) - float(probs.sum())) <= 1e-6
                corrected += not report.skipped
        assert corrected >= 50

    def test_tail_positions_untouched(self, tmp_path):
        config = make_config(tmp_path, SHARED_ROWS, tau=0.3, epsilon=0.4)
        # only tokens 0 and 1 clear epsilon/10 = 0.04
        probs = np.array([0.5, 0.46, 0.02, 0.02])
        rows = np.array([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0], [0.0, 1.0]])
        config = make_config(tmp_path, rows, tau=0.3, epsilon=0.4)
        with ReweightBridge(config) as bridge:
            out = bridge.reweight_hook(probs)
        assert np.array_equal(out[2:], probs[2:])
        assert float(out[:2].sum()) == pytest.approx(0.96, abs=1e-9)

    def test_custom_token_ids(self, tmp_path):
        rows = np.array([[1.0, 0.0], [1.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
        config = make_config(tmp_path, rows, tau=0.3)
        # host vector covers tokens 1..3 of the table's vocabulary
        ids = np.array([1, 2, 3])
        probs = np.array([0.5, 0.3, 0.2])
        with ReweightBridge(config) as bridge:
            out = bridge.reweight_hook(probs, token_ids=ids)
        table = load_embedding_table(config.table_path)
        block = NextTokenDistribution(token_ids=ids, probs=probs, restricted=True)
        from craeg.sampler import reweight_block

        expected, _ = reweight_block(block, table, CraegConfig(tau=0.3))
        assert np.max(np.abs(out - expected.probs)) <= 1e-9

    def test_requests_serialized_in_order(self, tmp_path):
        config = make_config(tmp_path, SHARED_ROWS, tau=0.3)
        probs = np.array([0.5, 0.3, 0.2])
        with ReweightBridge(config) as bridge:
            first = bridge.reweight_hook(probs)
            for _ in range(10):
                assert np.array_equal(bridge.reweight_hook(probs), first)


class TestFallback:
    def test_killed_server_passes_through_with_warning(self, tmp_path, caplog):
        config = make_config(tmp_path, SHARED_ROWS, tau=0.3)
        probs = np.array([0.5, 0.3, 0.2])
        with ReweightBridge(config) as bridge:
            bridge._proc.kill()
            bridge._proc.wait()
            with caplog.at_level("WARNING", logger="craeg_adapter"):
                out = bridge.reweight_hook(probs)
        assert np.array_equal(out, probs)
        assert any("passing input through" in r.message for r in caplog.records)

    def test_killed_server_aborts_when_configured(self, tmp_path):
        config = make_config(tmp_path, SHARED_ROWS, tau=0.3, fallback="abort")
        with ReweightBridge(config) as bridge:
            bridge._proc.kill()
            bridge._proc.wait()
            with pytest.raises(BridgeProtocolError):
                bridge.reweight_hook(np.array([0.5, 0.3, 0.2]))

    def test_unstarted_bridge_falls_back(self, tmp_path, caplog):
        config = make_config(tmp_path, SHARED_ROWS)
        bridge = ReweightBridge(config)
        probs = np.array([0.6, 0.4])
        with caplog.at_level("WARNING", logger="craeg_adapter"):
            out = bridge.reweight_hook(probs)
        assert np.array_equal(out, probs)

    def test_server_error_response_passes_through(self, tmp_path, caplog):
        # a request the server rejects (bad probabilities) must not kill the stream
        config = make_config(tmp_path, SHARED_ROWS, tau=0.3)
        with ReweightBridge(config) as bridge:
            with caplog.at_level("WARNING", logger="craeg_adapter"):
                bad = np.array([1.5, 0.3])
                out = bridge.reweight_hook(bad)
                assert np.array_equal(out, bad)
            good = np.array([0.5, 0.3, 0.2])
            after = bridge.reweight_hook(good)
            assert not np.array_equal(after, good)

    def test_validation(self, tmp_path):
        config = make_config(tmp_path, SHARED_ROWS)
        bridge = ReweightBridge(config)
        with pytest.raises(ValueError):
            bridge.reweight_hook(np.ones((2, 2)))
        with pytest.raises(ValueError):
            bridge.reweight_hook(np.array([0.5, 0.5]), token_ids=np.array([1]))
