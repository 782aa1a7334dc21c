"""Learning-rate schedules: linear warmup into cosine or piecewise decay."""

import math

from .errors import ConfigError

KINDS = ("cosine", "piecewise")

# piecewise decay drops to base/10 after this fraction of the run, the
# 700-of-800-epoch split generalized to arbitrary budgets
PIECEWISE_KNEE = 0.875


def lr_schedule(step: int, total_steps: int, kind: str, warmup_steps: int,
                base_lr: float) -> float:
    if kind not in KINDS:
        raise ConfigError(f"unknown schedule kind {kind!r}; choose from {KINDS}")
    if total_steps <= 0:
        raise ConfigError("total_steps must be positive")
    if warmup_steps < 0 or warmup_steps >= total_steps:
        raise ConfigError(
            f"warmup_steps {warmup_steps} must lie in [0, total_steps={total_steps})")
    if not 0 <= step < total_steps:
        raise ConfigError(f"step {step} outside [0, {total_steps})")
    if step < warmup_steps:
        return base_lr * step / warmup_steps
    if kind == "cosine":
        span = total_steps - warmup_steps
        t = (step - warmup_steps) / span
        return base_lr * 0.5 * (1.0 + math.cos(math.pi * t))
    return base_lr if step / total_steps < PIECEWISE_KNEE else base_lr / 10.0
