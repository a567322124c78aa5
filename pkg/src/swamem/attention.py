"""Sliding-window attention with sink tokens, plus rotary embedding.

Visibility rule: token t attends to the first ``sinks`` positions of the
sequence plus the trailing ``window`` positions ending at (and including) t.
Rotary rotation always uses absolute positions, so a cached key never needs
re-rotation when the window slides.

Attention functions here take already-rotated q/k; rotation is explicit via
:func:`rope_rotate` so prefill and decode can share the exact same geometry.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, OrderingError, ShapeError
from .tensor import Tensor, as_tensor, concat, matmul, mT, permute, reshape, softmax_rows

__all__ = [
    "AttnConfig",
    "rope_rotate",
    "rope_angles",
    "swa_mask",
    "full_attention",
    "swa_sinks_attention",
    "WindowKVCache",
    "decode_step",
]


@dataclass(frozen=True)
class AttnConfig:
    """Shape and visibility parameters for one attention block."""

    n_heads: int
    n_kv_heads: int
    head_dim: int
    window: int
    sinks: int
    rope_theta: float = 10000.0

    def __post_init__(self):
        if self.n_heads < 1 or self.n_kv_heads < 1:
            raise ConfigError("head counts must be positive")
        if self.n_heads % self.n_kv_heads != 0:
            raise ConfigError(
                f"n_heads={self.n_heads} not divisible by n_kv_heads={self.n_kv_heads}"
            )
        if self.head_dim % 2 != 0:
            raise ConfigError(f"head_dim={self.head_dim} must be even for rotation")
        if self.window < 1:
            raise ConfigError("window must be at least 1")
        if self.sinks < 0:
            raise ConfigError("sinks must be non-negative")

    @property
    def group(self) -> int:
        return self.n_heads // self.n_kv_heads


def rope_angles(positions, head_dim: int, theta: float = 10000.0):
    """cos/sin tables for the given absolute positions, shape (L, head_dim/2)."""
    if head_dim % 2 != 0:
        raise ConfigError(f"head_dim={head_dim} must be even for rotation")
    positions = np.asarray(positions, dtype=np.float64)
    half = head_dim // 2
    freqs = theta ** (-2.0 * np.arange(half) / head_dim)
    ang = positions[..., None] * freqs
    return np.cos(ang), np.sin(ang)


def rope_rotate(x, positions, theta: float = 10000.0) -> Tensor:
    """Rotate head vectors by position-dependent angles (half-split pairing).

    ``x`` has shape (..., L, H, head_dim); ``positions`` is an int array of
    shape (L,) giving each token's absolute position. Channel i pairs with
    channel i + head_dim/2; pair i rotates by positions * theta^(-2i/head_dim).
    Rotation at position 0 is the identity and preserves pair norms.
    """
    x = as_tensor(x)
    if x.ndim < 3:
        raise ShapeError("rope_rotate expects (..., L, H, head_dim)")
    d_h = x.shape[-1]
    cos, sin = rope_angles(positions, d_h, theta)
    if cos.shape[0] != x.shape[-3]:
        raise ShapeError(f"{cos.shape[0]} positions for sequence length {x.shape[-3]}")
    half = d_h // 2
    cos = cos[:, None, :]  # broadcast over heads
    sin = sin[:, None, :]
    x1 = x[..., :half]
    x2 = x[..., half:]
    y1 = x1 * cos - x2 * sin
    y2 = x1 * sin + x2 * cos
    return concat([y1, y2], axis=-1)


_MASK_CACHE: dict[tuple[int, int, int], np.ndarray] = {}


def swa_mask(length: int, window: int, sinks: int) -> np.ndarray:
    """Boolean (L, L) visibility: row t sees sinks plus its trailing window."""
    key = (length, window, sinks)
    cached = _MASK_CACHE.get(key)
    if cached is not None:
        return cached
    i = np.arange(length)[:, None]
    j = np.arange(length)[None, :]
    mask = (j <= i) & ((j > i - window) | (j < sinks))
    mask.setflags(write=False)
    _MASK_CACHE[key] = mask
    return mask


def _grouped_attend(q: Tensor, k: Tensor, v: Tensor, mask: np.ndarray) -> Tensor:
    """Grouped-query attention core over (B, L, H, d_h) inputs."""
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    if q.ndim != 4 or k.ndim != 4 or v.ndim != 4:
        raise ShapeError("attention expects (B, L, H, head_dim) tensors")
    batch, length, n_heads, d_h = q.shape
    n_kv = k.shape[2]
    if n_heads % n_kv != 0:
        raise ShapeError(f"{n_heads} query heads not divisible by {n_kv} kv heads")
    group = n_heads // n_kv

    qg = reshape(permute(q, (0, 2, 1, 3)), (batch, n_kv, group, length, d_h))
    kg = reshape(permute(k, (0, 2, 1, 3)), (batch, n_kv, 1, length, d_h))
    vg = reshape(permute(v, (0, 2, 1, 3)), (batch, n_kv, 1, length, d_h))

    scores = matmul(qg, mT(kg)) * (1.0 / np.sqrt(d_h))
    probs = softmax_rows(scores, mask)
    ctx = matmul(probs, vg)  # (B, n_kv, group, L, d_h)
    ctx = permute(ctx, (0, 3, 1, 2, 4))  # (B, L, n_kv, group, d_h)
    return reshape(ctx, (batch, length, n_heads * d_h))


def swa_sinks_attention(q, k, v, window: int, sinks: int) -> Tensor:
    """Sliding-window attention with sink tokens over rotated q/k.

    Inputs are (B, L, H, head_dim); output is (B, L, n_heads*head_dim),
    heads concatenated. With ``window >= L`` and ``sinks = 0`` this is
    exactly full causal attention (same code path, same mask content).
    """
    if window < 1:
        raise ConfigError("window must be at least 1")
    if sinks < 0:
        raise ConfigError("sinks must be non-negative")
    length = as_tensor(q).shape[1]
    return _grouped_attend(q, k, v, swa_mask(length, window, sinks))


def full_attention(q, k, v) -> Tensor:
    """Full causal attention: the window covers the whole sequence."""
    length = as_tensor(q).shape[1]
    return swa_sinks_attention(q, k, v, window=max(length, 1), sinks=0)


class WindowKVCache:
    """Decode-time store: a sink block plus a ring buffer of recent tokens.

    Keys are stored already rotated (absolute positions), so eviction never
    touches stored data. Entry count is bounded by sinks + window forever.
    Batched: all arrays carry a leading batch axis.
    """

    def __init__(self, cfg: AttnConfig, batch: int = 1):
        self.cfg = cfg
        self.batch = batch
        d = (batch, cfg.sinks, cfg.n_kv_heads, cfg.head_dim)
        r = (batch, cfg.window, cfg.n_kv_heads, cfg.head_dim)
        self.sink_k = np.zeros(d)
        self.sink_v = np.zeros(d)
        self.ring_k = np.zeros(r)
        self.ring_v = np.zeros(r)
        self.count = 0  # tokens appended so far == next expected position

    @property
    def n_entries(self) -> int:
        """Live cache entries (== min over warm-up, s + window afterwards)."""
        return min(self.count, self.cfg.sinks) + min(
            max(self.count - self.cfg.sinks, 0), self.cfg.window
        )

    def capacity_bytes(self) -> int:
        """Bytes held by k/v storage (fixed at construction)."""
        return (self.sink_k.nbytes + self.sink_v.nbytes + self.ring_k.nbytes + self.ring_v.nbytes)

    def append(self, k_row: np.ndarray, v_row: np.ndarray, position: int) -> None:
        """Store one token's rotated key and value at the given position."""
        if position != self.count:
            raise OrderingError(f"expected position {self.count}, got {position}")
        k_row = np.asarray(k_row, dtype=np.float64)
        v_row = np.asarray(v_row, dtype=np.float64)
        want = (self.batch, self.cfg.n_kv_heads, self.cfg.head_dim)
        if k_row.shape != want or v_row.shape != want:
            raise ShapeError(f"expected per-token k/v of shape {want}")
        if position < self.cfg.sinks:
            self.sink_k[:, position] = k_row
            self.sink_v[:, position] = v_row
        else:
            slot = (position - self.cfg.sinks) % self.cfg.window
            self.ring_k[:, slot] = k_row
            self.ring_v[:, slot] = v_row
        self.count += 1

    def visible(self) -> tuple[np.ndarray, np.ndarray]:
        """All live entries in chronological order: (B, m, n_kv, d_h) pair."""
        s = min(self.count, self.cfg.sinks)
        parts_k = [self.sink_k[:, :s]]
        parts_v = [self.sink_v[:, :s]]
        in_ring = self.count - self.cfg.sinks
        if in_ring > 0:
            if in_ring <= self.cfg.window:
                parts_k.append(self.ring_k[:, :in_ring])
                parts_v.append(self.ring_v[:, :in_ring])
            else:
                start = in_ring % self.cfg.window
                order = (start + np.arange(self.cfg.window)) % self.cfg.window
                parts_k.append(self.ring_k[:, order])
                parts_v.append(self.ring_v[:, order])
        return np.concatenate(parts_k, axis=1), np.concatenate(parts_v, axis=1)


def decode_step(
    cache: WindowKVCache, q_t: np.ndarray, k_t: np.ndarray, v_t: np.ndarray, position: int
) -> tuple[np.ndarray, WindowKVCache]:
    """One decode token: append rotated k/v, attend over the live window.

    ``q_t`` is (B, n_heads, head_dim); ``k_t``/``v_t`` are
    (B, n_kv_heads, head_dim), all already rotated for ``position``.
    Returns (attention output (B, n_heads*head_dim), cache). Inference-only:
    plain numpy, no tape.
    """
    cfg = cache.cfg
    q_t = np.asarray(q_t, dtype=np.float64)
    if q_t.shape != (cache.batch, cfg.n_heads, cfg.head_dim):
        raise ShapeError(f"expected q of shape {(cache.batch, cfg.n_heads, cfg.head_dim)}")
    cache.append(k_t, v_t, position)
    keys, vals = cache.visible()  # (B, m, kv, d_h)
    batch, m = keys.shape[0], keys.shape[1]
    group = cfg.group

    qg = q_t.reshape(batch, cfg.n_kv_heads, group, cfg.head_dim)
    kk = keys.transpose(0, 2, 1, 3)  # (B, kv, m, d_h)
    vv = vals.transpose(0, 2, 1, 3)
    scores = np.einsum("bhgd,bhmd->bhgm", qg, kk) / np.sqrt(cfg.head_dim)
    scores -= scores.max(axis=-1, keepdims=True)
    e = np.exp(scores)
    probs = e / e.sum(axis=-1, keepdims=True)
    ctx = np.einsum("bhgm,bhmd->bhgd", probs, vv)
    return ctx.reshape(batch, cfg.n_heads * cfg.head_dim), cache
