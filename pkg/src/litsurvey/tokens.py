"""Token estimation and budget-aware context compression.

The estimator is a deliberate approximation (4 characters per token, rounded
up). It is deterministic and monotone in text length, which is what the
pipeline needs; exact tokenizer parity is out of scope.
"""

from __future__ import annotations

import math

from .errors import BudgetError

CHARS_PER_TOKEN = 4


def estimate_tokens(text: str) -> int:
    """Deterministic token estimate: ceil(len/4), 0 for empty text."""
    if not text:
        return 0
    return math.ceil(len(text) / CHARS_PER_TOKEN)


def compress_context(core: str, aux: str, budget: int) -> str:
    """Fit ``core + aux`` into ``budget`` tokens without ever touching core.

    The auxiliary text is halved iteratively (keeping its prefix) until the
    total fits; a final character-level trim covers the case where one more
    halving would discard more than necessary. Idempotent when the input
    already fits.

    Raises BudgetError when core alone exceeds the budget.
    """
    core_tokens = estimate_tokens(core)
    if core_tokens > budget:
        raise BudgetError(
            f"core content is {core_tokens} tokens but the budget is {budget}"
        )
    remaining = budget - core_tokens
    if estimate_tokens(aux) <= remaining:
        return core + aux
    while aux and estimate_tokens(aux) > remaining:
        half = aux[: len(aux) // 2]
        if estimate_tokens(half) < remaining:
            # Halving again would overshoot; trim to the exact budget instead.
            aux = aux[: remaining * CHARS_PER_TOKEN]
            break
        aux = half
    return core + aux
