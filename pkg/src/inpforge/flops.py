"""Multiply-add and memory accounting for self-attention vs INP-guided attention.

A length-``C`` dot product costs ``C`` multiplications and ``C - 1`` additions,
so ``Q K^T`` with ``K`` keys costs ``N * K * (2C - 1)`` and ``A V`` costs
``N * C * (2K - 1)``. Self-attention has ``K = N`` keys; INP-guided attention
has ``K = M`` prototypes. Memory counts 4-byte elements.
"""

from __future__ import annotations

from dataclasses import dataclass

from .errors import ConfigError

BYTES_PER_ELEMENT = 4


def qk_count(n: int, keys: int, c: int) -> int:
    return n * keys * (2 * c - 1)


def av_count(n: int, keys: int, c: int) -> int:
    return n * c * (2 * keys - 1)


@dataclass(frozen=True)
class AttentionCost:
    scheme: str
    keys: int
    qk: int
    av: int
    q_bytes: int
    kv_bytes: int  # each of K and V
    a_bytes: int

    @property
    def total(self) -> int:
        return self.qk + self.av


def attention_cost(scheme: str, n: int, keys: int, c: int) -> AttentionCost:
    b = BYTES_PER_ELEMENT
    return AttentionCost(
        scheme=scheme,
        keys=keys,
        qk=qk_count(n, keys, c),
        av=av_count(n, keys, c),
        q_bytes=n * c * b,
        kv_bytes=keys * c * b,
        a_bytes=n * keys * b,
    )


def complexity_table(n: int, m: int, c: int) -> tuple[AttentionCost, AttentionCost]:
    """(self-attention, INP-guided) costs for ``N`` tokens, ``M`` prototypes, dim ``C``."""
    for name, v in (("N", n), ("M", m), ("C", c)):
        if not isinstance(v, int) or v < 1:
            raise ConfigError(f"{name} must be a positive integer, got {v!r}")
    return attention_cost("self-attention", n, n, c), attention_cost("inp-guided", n, m, c)


def mib(nbytes: int) -> float:
    return nbytes / 2**20


def format_table(n: int, m: int, c: int) -> str:
    sa, inp = complexity_table(n, m, c)
    lines = [
        f"N={n} M={m} C={c}",
        f"{'scheme':<16}{'QK^T mult-add':>16}{'A*V mult-add':>16}{'Q bytes':>12}{'K/V bytes':>12}{'A bytes':>12}",
    ]
    for row in (sa, inp):
        lines.append(
            f"{row.scheme:<16}{row.qk:>16,}{row.av:>16,}{row.q_bytes:>12,}{row.kv_bytes:>12,}{row.a_bytes:>12,}"
        )
    lines.append(
        f"memory (MiB): Q {mib(sa.q_bytes):.2f}  self A {mib(sa.a_bytes):.2f}  "
        f"INP K/V {mib(inp.kv_bytes):.3f}  INP A {mib(inp.a_bytes):.3f}"
    )
    lines.append(f"QK^T ratio {sa.qk / inp.qk:.4f} (N/M = {n / m:.4f}); A*V ratio {sa.av / inp.av:.4f}")
    return "\n".join(lines)


def as_csv(n: int, m: int, c: int) -> str:
    rows = ["scheme,N,keys,C,qk,av,q_bytes,kv_bytes,a_bytes"]
    for r in complexity_table(n, m, c):
        rows.append(f"{r.scheme},{n},{r.keys},{c},{r.qk},{r.av},{r.q_bytes},{r.kv_bytes},{r.a_bytes}")
    return "\n".join(rows) + "\n"
