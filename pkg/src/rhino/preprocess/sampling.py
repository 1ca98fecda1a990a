from __future__ import annotations

import hashlib
import math

import numpy as np

DEFAULT_FIELD_CAP = 8


def estimate_tokens(text: str) -> int:
    """Model-agnostic token estimate: one token per four characters, rounded up."""
    return math.ceil(len(text) / 4)


def derive_seed(seed: int, *parts: object) -> int:
    """Stable child seed for a named sub-stream (independent of PYTHONHASHSEED)."""
    h = hashlib.sha256(repr((int(seed),) + tuple(str(p) for p in parts)).encode())
    return int.from_bytes(h.digest()[:8], "big")


def sample_app_field(values: list[str], cap: int = DEFAULT_FIELD_CAP, seed: int = 0) -> list[str]:
    """Binomially thin a list of application-layer values down to ``cap`` entries.

    Each distinct value with multiplicity n keeps k ~ Binomial(n, p) copies,
    clamped to [1, n], where p = min(1, cap / len(values)). If the result still
    exceeds ``cap``, one copy of as many distinct values as fit is kept first
    (most frequent first), then remaining slots take further copies.
    Output lists values grouped in first-appearance order.
    """
    if cap < 1:
        raise ValueError("cap must be >= 1")
    if not values:
        return []
    counts: dict[str, int] = {}
    for v in values:
        counts[v] = counts.get(v, 0) + 1
    p = min(1.0, cap / len(values))
    rng = np.random.default_rng(seed)
    kept = {}
    for v, n in counts.items():
        k = int(rng.binomial(n, p))
        kept[v] = min(max(k, 1), n)

    if sum(kept.values()) > cap:
        order = sorted(kept, key=lambda v: -kept[v])  # stable: ties keep first appearance
        chosen = order[:cap]
        alloc = {v: 1 for v in chosen}
        room = cap - len(chosen)
        for v in chosen:
            if room == 0:
                break
            extra = min(kept[v] - 1, room)
            alloc[v] += extra
            room -= extra
        kept = alloc

    out: list[str] = []
    for v in counts:
        out.extend([v] * kept.get(v, 0))
    return out
