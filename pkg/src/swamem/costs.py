"""Analytic cost model for the hybrid mixer and its attention baselines.

Two distinct accountings live here and must not be conflated:

* The **deployment model** (`component_cost`, `emit_cost_csv`, `band_check`,
  `crossover_length`) prices attention by *visible pairs only*: a causal
  kernel at position t touches min(t+1, window + sinks) keys, so prefill
  attention work is sum_t min(t+1, W+s) score/value dot products.  This is
  the convention a tiled kernel that skips fully-masked blocks achieves, and
  it is what the long-context comparisons below use.

* The **implementation audit** (`expected_forward_macs`) mirrors this
  package's reference forward pass exactly, which materializes the dense
  (L, L) score matrix and multiplies masked entries by zero.  `swamem bench`
  checks instrumented multiply-accumulate counts against this function.

Counts are in MACs (one multiply-accumulate).  Convert with `flops`, which
charges `ops_per_mac` operations per MAC (2 by default: one multiply plus
one add; pass 1 to count fused multiply-adds as single operations).
Elementwise work (normalization, gating, softmax, rotations, the fast-weight
maintenance steps) is excluded throughout -- it is O(L * width) with small
constants and identical across the compared components.

Chunk size does not appear in any MAC total: every chunked fast-weight
operation (reads, inner forward, inner gradients) is a matmul whose
contraction work is linear in the number of tokens in the chunk, so the sum
over chunks telescopes to a per-token constant.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, replace

from .errors import ConfigError
from .mixer import ModelConfig, Runtime

__all__ = [
    "Geometry",
    "CostReport",
    "DESK_GEOMETRY",
    "STUDY_GEOMETRY",
    "DEFAULT_LENGTHS",
    "COMPONENTS",
    "visible_pairs",
    "attention_projection_macs",
    "attention_core_macs",
    "memory_macs_per_token",
    "kv_cache_bytes",
    "memory_state_bytes",
    "component_cost",
    "flops",
    "emit_cost_csv",
    "band_check",
    "crossover_length",
    "expected_forward_macs",
]

COMPONENTS = ("full_attention", "swa_sinks", "allmem")
DEFAULT_LENGTHS = (1024, 4096, 16384, 65536, 131072)


@dataclass(frozen=True)
class Geometry:
    """Static shape numbers the cost formulas consume.

    Decoupled from `ModelConfig` so paper-scale what-ifs don't need a full
    (vocab-bearing, validated) model definition; `from_model_config` bridges
    the two for desk-scale checks.
    """

    d_model: int
    n_layers: int
    n_heads: int
    n_kv_heads: int
    head_dim: int
    mem_heads: int
    mem_head_dim: int
    mem_hidden: int
    conv_kernel: int
    d_ff: int
    vocab: int

    def __post_init__(self):
        for name, value in vars(self).items():
            if int(value) != value or value < 1:
                raise ConfigError(f"Geometry.{name} must be a positive integer")

    @property
    def q_width(self) -> int:
        return self.n_heads * self.head_dim

    @property
    def kv_width(self) -> int:
        return self.n_kv_heads * self.head_dim

    @property
    def mem_dim(self) -> int:
        return self.mem_heads * self.mem_head_dim

    @classmethod
    def from_model_config(cls, cfg: ModelConfig) -> "Geometry":
        return cls(
            d_model=cfg.d_model,
            n_layers=cfg.n_layers,
            n_heads=cfg.n_heads,
            n_kv_heads=cfg.n_kv_heads,
            head_dim=cfg.head_dim,
            mem_heads=cfg.n_mem,
            mem_head_dim=cfg.mem_head_dim,
            mem_hidden=cfg.mem_hidden,
            conv_kernel=cfg.conv_kernel,
            d_ff=cfg.d_ff,
            vocab=cfg.vocab,
        )


DESK_GEOMETRY = Geometry(
    d_model=64,
    n_layers=2,
    n_heads=4,
    n_kv_heads=2,
    head_dim=16,
    mem_heads=2,
    mem_head_dim=16,
    mem_hidden=32,
    conv_kernel=4,
    d_ff=128,
    vocab=64,
)

# A 0.6B-class decoder shape: 28 layers, 16 query / 8 KV heads of width 128
# on a 1024-wide stream, with a 512-wide 8-head fast-weight memory.
STUDY_GEOMETRY = Geometry(
    d_model=1024,
    n_layers=28,
    n_heads=16,
    n_kv_heads=8,
    head_dim=128,
    mem_heads=8,
    mem_head_dim=64,
    mem_hidden=128,
    conv_kernel=4,
    d_ff=3072,
    vocab=151936,
)


@dataclass(frozen=True)
class CostReport:
    component: str
    length: int
    prefill_macs: int
    decode_macs: int
    cache_bytes: int

    def prefill_flops(self, ops_per_mac: int = 2) -> int:
        return flops(self.prefill_macs, ops_per_mac)

    def decode_flops(self, ops_per_mac: int = 2) -> int:
        return flops(self.decode_macs, ops_per_mac)


def flops(macs: int, ops_per_mac: int = 2) -> int:
    if ops_per_mac not in (1, 2):
        raise ConfigError("ops_per_mac must be 1 (fused) or 2 (multiply+add)")
    return macs * ops_per_mac


# ----------------------------------------------------------------------
# attention


def visible_pairs(length: int, window: int | None = None, sinks: int = 0) -> int:
    """Number of (query, visible key) pairs in a causal prefill.

    `window=None` means unwindowed causal attention: L(L+1)/2.  With a
    window of W and s sink positions, token t sees min(t+1, W + s) keys
    (the trailing W positions plus the first s, which overlap while
    t + 1 <= W + s), so the sum has a closed form.
    """
    if length < 0:
        raise ConfigError("length must be nonnegative")
    if window is None:
        return length * (length + 1) // 2
    if window < 1 or sinks < 0:
        raise ConfigError("window must be >= 1 and sinks >= 0")
    span = window + sinks
    if length <= span:
        return length * (length + 1) // 2
    return span * (span + 1) // 2 + (length - span) * span


def attention_projection_macs(g: Geometry, length: int) -> int:
    """Q/K/V in-projections plus the output projection, one layer."""
    return length * g.d_model * (g.q_width + 2 * g.kv_width) + length * g.q_width * g.d_model


def attention_core_macs(
    g: Geometry, length: int, window: int | None = None, sinks: int = 0
) -> int:
    """Score and value-mix dot products over visible pairs, one layer.

    Each pair costs head_dim MACs for q.k and head_dim for prob*v, per
    query head (grouped KV sharing changes memory traffic, not MACs).
    """
    return 2 * g.n_heads * g.head_dim * visible_pairs(length, window, sinks)


# ----------------------------------------------------------------------
# fast-weight memory

_READ_MATMULS = 3  # gate, up, down
_UPDATE_MATMULS = 6  # forward gate/up + pulled-back output + three outer products


def memory_macs_per_token(g: Geometry, rule: str = "ttt") -> int:
    """Marginal per-token memory-branch MACs, one layer.

    Producer projections (3), causal convs (3), the two meta-signal dot
    products, read + update work for the given rule, and the gate and
    output projections.  Chunk size cancels (see module docstring).
    """
    base = (
        3 * g.d_model * g.mem_dim
        + 3 * g.conv_kernel * g.mem_dim
        + 2 * g.d_model
        + g.d_model * g.mem_dim  # sigmoid gate projection
        + g.mem_dim * g.d_model  # output projection
    )
    if rule == "ttt":
        core = (_READ_MATMULS + _UPDATE_MATMULS) * g.mem_dim * g.mem_hidden
    elif rule == "mamba2":
        core = 2 * g.mem_dim * g.mem_head_dim
    elif rule == "delta":
        core = 4 * g.mem_dim * g.mem_head_dim
    else:
        raise ConfigError(f"unknown memory rule {rule!r}")
    return base + core


# ----------------------------------------------------------------------
# cache state


def kv_cache_bytes(g: Geometry, length: int, window: int | None = None, sinks: int = 0) -> int:
    """f64 bytes of retained keys+values across layers at context `length`."""
    entries = length if window is None else min(length, window + sinks)
    return g.n_layers * entries * 2 * g.kv_width * 8


def memory_state_bytes(g: Geometry) -> int:
    """f64 bytes of persistent fast-weight state across layers.

    Three weight matrices, their momentum buffers, and the captured
    row-norm targets, per memory head.  Independent of context length;
    transient chunk buffers are bounded by chunk_size and excluded.
    """
    per_head = 2 * 3 * g.mem_hidden * g.mem_head_dim + (2 * g.mem_hidden + g.mem_head_dim)
    return g.n_layers * g.mem_heads * per_head * 8


# ----------------------------------------------------------------------
# per-component totals


def component_cost(
    g: Geometry,
    component: str,
    length: int,
    *,
    window: int = 4096,
    sinks: int = 128,
    rule: str = "ttt",
) -> CostReport:
    """Deployment-model cost of one mixer variant at context `length`.

    Totals cover the token-mixing path (projections, attention core, and
    for "allmem" the memory branch) across all layers.  The channel MLP,
    embedding, and output head are identical across components and omitted.
    Decode MACs are the marginal cost of one token at context `length`.
    """
    if length < 1:
        raise ConfigError("length must be >= 1")
    proj = attention_projection_macs(g, length)
    proj_decode = attention_projection_macs(g, 1)
    if component == "full_attention":
        prefill = proj + attention_core_macs(g, length)
        decode = proj_decode + 2 * g.n_heads * g.head_dim * length
        cache = kv_cache_bytes(g, length)
    elif component == "swa_sinks":
        prefill = proj + attention_core_macs(g, length, window, sinks)
        decode = proj_decode + 2 * g.n_heads * g.head_dim * min(length, window + sinks)
        cache = kv_cache_bytes(g, length, window, sinks)
    elif component == "allmem":
        mem = memory_macs_per_token(g, rule)
        prefill = proj + attention_core_macs(g, length, window, sinks) + length * mem
        decode = (
            proj_decode + 2 * g.n_heads * g.head_dim * min(length, window + sinks) + mem
        )
        cache = kv_cache_bytes(g, length, window, sinks) + memory_state_bytes(g)
    else:
        raise ConfigError(f"unknown component {component!r}; expected one of {COMPONENTS}")
    return CostReport(
        component=component,
        length=length,
        prefill_macs=g.n_layers * prefill,
        decode_macs=g.n_layers * decode,
        cache_bytes=cache,
    )


def band_check(
    g: Geometry = STUDY_GEOMETRY,
    *,
    length: int = 131072,
    window: int = 4096,
    sinks: int = 128,
    low: float = 7.0,
    high: float = 12.0,
) -> dict:
    """Prefill-cost ratio of unwindowed attention to the hybrid at one anchor.

    Returns the ratio under both FLOP conventions plus a pass flag for the
    [low, high] acceptance band.
    """
    full = component_cost(g, "full_attention", length, window=window, sinks=sinks)
    hybrid = component_cost(g, "allmem", length, window=window, sinks=sinks)
    out = {}
    for ops in (2, 1):
        out[f"ratio_ops{ops}"] = full.prefill_flops(ops) / hybrid.prefill_flops(ops)
    out["band"] = (low, high)
    out["ok"] = all(low <= out[f"ratio_ops{ops}"] <= high for ops in (2, 1))
    return out


def crossover_length(
    g: Geometry = STUDY_GEOMETRY, *, window: int = 4096, sinks: int = 128
) -> int:
    """Smallest context length where hybrid prefill is cheaper than full.

    Below this length the memory branch's fixed per-token cost outweighs
    the attention saved by windowing.
    """
    lo, hi = 1, 1
    def cheaper(length):
        return (
            component_cost(g, "allmem", length, window=window, sinks=sinks).prefill_macs
            < component_cost(g, "full_attention", length, window=window, sinks=sinks).prefill_macs
        )
    while not cheaper(hi):
        hi *= 2
        if hi > 1 << 40:
            raise ConfigError("no crossover below 2^40 tokens")
    while lo < hi:
        mid = (lo + hi) // 2
        if cheaper(mid):
            hi = mid
        else:
            lo = mid + 1
    return lo


def emit_cost_csv(
    out,
    g: Geometry = STUDY_GEOMETRY,
    *,
    lengths=DEFAULT_LENGTHS,
    window: int = 4096,
    sinks: int = 128,
    rule: str = "ttt",
    ops_per_mac: int = 2,
) -> str:
    """Write the component cost table as CSV; returns the text.

    Schema: `component,L,prefill_flops,decode_flops,cache_bytes`, one row
    per (component, length), followed by a `# band_check,...` comment line
    recording the long-context prefill ratio against its acceptance band.
    `out` is a writable text file or None.
    """
    buf = io.StringIO()
    buf.write("component,L,prefill_flops,decode_flops,cache_bytes\n")
    for component in COMPONENTS:
        for length in lengths:
            r = component_cost(g, component, length, window=window, sinks=sinks, rule=rule)
            buf.write(
                f"{component},{length},{r.prefill_flops(ops_per_mac)},"
                f"{r.decode_flops(ops_per_mac)},{r.cache_bytes}\n"
            )
    bc = band_check(g, window=window, sinks=sinks)
    buf.write(
        f"# band_check,ratio_ops2={bc['ratio_ops2']:.4f},ratio_ops1={bc['ratio_ops1']:.4f},"
        f"band=[{bc['band'][0]:g},{bc['band'][1]:g}],{'pass' if bc['ok'] else 'FAIL'}\n"
    )
    text = buf.getvalue()
    if out is not None:
        out.write(text)
    return text


# ----------------------------------------------------------------------
# implementation audit


def expected_forward_macs(cfg: ModelConfig, rt: Runtime, batch: int, length: int) -> int:
    """Exact matmul+conv MAC count of `Model.forward` on a (batch, length) input.

    Mirrors the reference implementation, which materializes dense (L, L)
    attention scores (masked entries are multiplied by zero, not skipped),
    so the attention core is 2*H*L^2*head_dim regardless of window.  Used
    by the bench command to cross-check the instrumented counter.
    """
    g = Geometry.from_model_config(cfg)
    per_layer = attention_projection_macs(g, length)
    per_layer += 2 * g.n_heads * g.head_dim * length * length
    if rt.memory_rule != "none":
        # the conv term inside memory_macs_per_token already matches the
        # implementation exactly: prod(input)*k MACs per stream, zero-padded
        # at the left edge
        per_layer += length * memory_macs_per_token(g, rt.memory_rule)
    per_layer += 3 * length * g.d_model * g.d_ff
    total = cfg.n_layers * per_layer + length * g.d_model * g.vocab
    return batch * total
