"""Bridge configuration.

The adapter never imports the reweighting engine; it talks to the `craeg`
executable over its line protocol and reads/writes its embedding file
format. The parameter bounds below mirror the engine's documented contract
so misconfiguration fails here, before a subprocess is spawned.
"""

from __future__ import annotations

from dataclasses import dataclass

WEIGHTINGS = ("exponential", "linear")
LAMBDA_MODES = ("adaptive", "fixed")
FALLBACK_MODES = ("passthrough", "abort")


@dataclass(frozen=True)
class AdapterConfig:
    """Everything needed to spawn and drive one reweighting server.

    command is the executable prefix (e.g. ("craeg",) or
    (sys.executable, "-m", "craeg")). forward_top_k caps protocol payloads
    at the top-K tokens by probability; None forwards every token with
    p >= epsilon/10, which guarantees the server-side correction set is
    never clipped by transport.
    """

    table_path: str
    command: tuple[str, ...] = ("craeg",)
    tau: float = 0.3
    epsilon: float = 0.01
    weighting: str = "exponential"
    lambda_mode: str = "adaptive"
    fixed_lambda: float | None = None
    forward_top_k: int | None = None
    fallback: str = "passthrough"
    request_timeout: float = 30.0

    def __post_init__(self) -> None:
        if not self.table_path:
            raise ValueError("table_path is required")
        if not self.command:
            raise ValueError("command must name the executable")
        if not 0.0 <= self.tau <= 1.0:
            raise ValueError(f"tau must lie in [0, 1], got {self.tau}")
        if not 0.0 < self.epsilon < 1.0:
            raise ValueError(f"epsilon must lie in (0, 1), got {self.epsilon}")
        if self.weighting not in WEIGHTINGS:
            raise ValueError(f"weighting must be one of {WEIGHTINGS}")
        if self.lambda_mode not in LAMBDA_MODES:
            raise ValueError(f"lambda_mode must be one of {LAMBDA_MODES}")
        if self.lambda_mode == "fixed":
            if self.fixed_lambda is None or not self.fixed_lambda > 0.0:
                raise ValueError("fixed lambda_mode needs fixed_lambda > 0")
        elif self.fixed_lambda is not None:
            raise ValueError("fixed_lambda only applies to lambda_mode='fixed'")
        if self.forward_top_k is not None and self.forward_top_k < 1:
            raise ValueError("forward_top_k must be at least 1")
        if self.fallback not in FALLBACK_MODES:
            raise ValueError(f"fallback must be one of {FALLBACK_MODES}")
        if not self.request_timeout > 0.0:
            raise ValueError("request_timeout must be positive")

    @property
    def forward_min_prob(self) -> float:
        return self.epsilon / 10.0

    def serve_argv(self) -> list[str]:
        argv = [
            *self.command,
            "serve",
            "--table", self.table_path,
            "--tau", repr(self.tau),
            "--epsilon", repr(self.epsilon),
            "--weighting", self.weighting,
            "--lambda-mode", self.lambda_mode,
            "--log-level", "WARNING",
        ]
        if self.fixed_lambda is not None:
            argv.extend(["--fixed-lambda", repr(self.fixed_lambda)])
        return argv
