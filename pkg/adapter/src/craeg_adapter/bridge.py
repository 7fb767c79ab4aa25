"""Per-step reweighting hook over the streaming line protocol.

One bridge owns one server subprocess and serializes requests to it. Each
hook call forwards the high-probability slice of the host's step
distribution as one JSON line, reads one JSON response, and splices the
reweighted block back into the full vector; unforwarded tail entries are
returned untouched. Protocol failures (dead server, timeout, malformed or
mismatched response) either fall back to the unmodified input with a
warning or abort, per configuration.
"""

from __future__ import annotations

import json
import logging
import select
import subprocess
import threading

import numpy as np

from .config import AdapterConfig

log = logging.getLogger("craeg_adapter")


class BridgeProtocolError(RuntimeError):
    """The server could not answer and the bridge is configured to abort."""


class ReweightBridge:
    """Client for one reweighting server process."""

    def __init__(self, config: AdapterConfig):
        self.config = config
        self._proc: subprocess.Popen | None = None
        self._lock = threading.Lock()
        self._next_id = 0

    def __enter__(self) -> "ReweightBridge":
        self.start()
        return self

    def __exit__(self, *exc) -> None:
        self.close()

    def start(self) -> None:
        if self._proc is not None:
            return
        self._proc = subprocess.Popen(
            self.config.serve_argv(),
            stdin=subprocess.PIPE,
            stdout=subprocess.PIPE,
            stderr=subprocess.DEVNULL,
            text=True,
            bufsize=1,
        )

    def close(self) -> None:
        proc, self._proc = self._proc, None
        if proc is None:
            return
        try:
            if proc.stdin:
                proc.stdin.close()
            proc.wait(timeout=5.0)
        except (OSError, subprocess.TimeoutExpired):
            proc.kill()
            proc.wait()

    def select_payload(self, probs: np.ndarray) -> np.ndarray:
        """Positions to forward: top-K, or everything above epsilon/10."""
        if self.config.forward_top_k is not None:
            k = min(self.config.forward_top_k, probs.size)
            order = np.lexsort((np.arange(probs.size), -probs))
            return order[:k]
        positions = np.flatnonzero(probs >= self.config.forward_min_prob)
        if positions.size == 0:
            return np.array([int(np.argmax(probs))])
        return positions

    def reweight_hook(self, step_probabilities, token_ids=None) -> np.ndarray:
        """Reweight one step distribution, returning a same-length vector."""
        probs = np.asarray(step_probabilities, dtype=np.float64)
        if probs.ndim != 1 or probs.size == 0:
            raise ValueError("step_probabilities must be a nonempty 1-D vector")
        if token_ids is None:
            ids = np.arange(probs.size, dtype=np.int64)
        else:
            ids = np.asarray(token_ids, dtype=np.int64)
            if ids.shape != probs.shape:
                raise ValueError("token_ids and probabilities must be parallel")

        positions = self.select_payload(probs)
        request = {
            "id": self._next_id,
            "token_ids": [int(t) for t in ids[positions]],
            "probs": [float(p) for p in probs[positions]],
        }
        self._next_id += 1
        with self._lock:
            response = self._roundtrip(json.dumps(request))
        if response is None:
            return self._fallback(probs, "no usable response from server")
        if response.get("id") != request["id"]:
            return self._fallback(probs, f"response id {response.get('id')!r} out of order")
        if "error" in response:
            return self._fallback(probs, f"server rejected request: {response['error']}")
        block = response.get("probs")
        if not isinstance(block, list) or len(block) != positions.size:
            return self._fallback(probs, "response block has the wrong shape")
        out = probs.copy()
        out[positions] = block
        return out

    def _roundtrip(self, line: str) -> dict | None:
        proc = self._proc
        if proc is None or proc.poll() is not None:
            return None
        try:
            proc.stdin.write(line + "\n")
            proc.stdin.flush()
        except (OSError, ValueError):
            return None
        ready, _, _ = select.select([proc.stdout], [], [], self.config.request_timeout)
        if not ready:
            return None
        try:
            raw = proc.stdout.readline()
        except (OSError, ValueError):
            return None
        if not raw:
            return None
        try:
            obj = json.loads(raw)
        except json.JSONDecodeError:
            return None
        return obj if isinstance(obj, dict) else None

    def _fallback(self, probs: np.ndarray, reason: str) -> np.ndarray:
        if self.config.fallback == "abort":
            raise BridgeProtocolError(reason)
        log.warning("reweighting skipped, passing input through: %s", reason)
        return probs.copy()
